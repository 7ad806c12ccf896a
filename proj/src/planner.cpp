#include "cema/planner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace cema {

RewardArray RewardVector::array() const {
  RewardArray a;
  a << time_to_goal, long_accel_cost, lat_accel_cost, collision, goal_reached;
  return a;
}

RewardVector RewardVector::from_array(const RewardArray& a) { return {a[0], a[1], a[2], a[3], a[4]}; }

const std::array<std::string, kRewardDims>& RewardVector::names() {
  static const std::array<std::string, kRewardDims> n{"time_to_goal", "long_accel_cost", "lat_accel_cost",
                                                      "collision", "goal_reached"};
  return n;
}

RewardVector reward_of_states(const std::vector<LocalState>& states, const Goal& goal, const LaneGraph& graph,
                              int horizon_end, const JointTrace* others, AgentId self) {
  RewardVector r;
  if (states.empty()) return r;
  const int t0 = states.front().timestep;
  int entered = -1;
  for (const auto& s : states)
    if (goal.contains(graph, s.position)) {
      entered = s.timestep;
      break;
    }
  r.goal_reached = entered >= 0 ? 1.0 : 0.0;
  r.time_to_goal = ((entered >= 0 ? entered : std::max(horizon_end, states.back().timestep)) - t0) * kDt;

  double lon = 0.0;
  for (const auto& s : states) lon += std::abs(s.accel);
  r.long_accel_cost = lon / static_cast<double>(states.size());
  if (states.size() >= 3) {
    double lat = 0.0;
    for (std::size_t i = 1; i + 1 < states.size(); ++i) {
      const Vec2 acc = (states[i + 1].position - 2.0 * states[i].position + states[i - 1].position) / (kDt * kDt);
      const Vec2 n(-std::sin(states[i].heading), std::cos(states[i].heading));
      lat += std::abs(n.dot(acc));
    }
    r.lat_accel_cost = lat / static_cast<double>(states.size() - 2);
  }

  if (others) {
    const double reach = 2.0 * kCollisionRadius;
    for (const auto& s : states) {
      if (!others->covers(s.timestep)) continue;
      for (const auto& [id, o] : others->at(s.timestep))
        if (id != self && (o.position - s.position).norm() < reach) {
          r.collision = 1.0;
          break;
        }
      if (r.collision > 0.0) break;
    }
  }
  return r;
}

RewardVector reward(const JointTrace& trace, const Goal& ego_goal, const LaneGraph& graph) {
  if (trace.empty()) throw std::invalid_argument("reward: empty trace");
  const AgentId ego = trace.ego();
  return reward_of_states(trace.states_of(ego), ego_goal, graph, trace.end(), &trace, ego);
}

double scalarize(const RewardVector& r, const RewardWeights& w) {
  return w.time_to_goal * r.time_to_goal + w.long_accel * r.long_accel_cost + w.lat_accel * r.lat_accel_cost +
         w.collision * r.collision + w.goal_reached * r.goal_reached;
}

const PlanEntry& PlanDistribution::mode() const {
  if (entries.empty()) throw std::logic_error("plan distribution is empty");
  return entries.front();
}

std::size_t PlanDistribution::sample(Rng& rng) const {
  std::vector<double> p;
  for (const auto& e : entries) p.push_back(e.probability);
  return rng.categorical(p);
}

std::vector<MacroSpec> to_specs(const std::vector<Macro>& macros) {
  std::vector<MacroSpec> out;
  for (Macro m : macros) out.push_back(MacroSpec{m});
  return out;
}

std::vector<AgentId> nearby_agents(const Engine& eng, AgentId ego, double radius) {
  std::vector<AgentId> out;
  if (!eng.has(ego) || !eng.active(ego)) return out;
  const Vec2 p = eng.state_of(ego).position;
  for (const auto& a : eng.slots())
    if (a.id != ego && a.active && (eng.state_of(a.id).position - p).norm() <= radius) out.push_back(a.id);
  return out;
}

namespace {

struct Node {
  std::vector<Macro> actions;
  std::vector<int> child;
  std::vector<int> visits;
  std::vector<double> value_sum;
  std::vector<double> q;  // mean at the leaf edge, best child value above it
  int total = 0;
  bool expanded = false;
};

void run_until_idle(Engine& e, AgentId ego, int horizon) {
  do {
    e.step();
  } while (e.now() < horizon && e.active(ego) && !e.idle(ego));
}

}  // namespace

PlanDistribution mcts_plan(const Engine& root, AgentId ego, const GoalPosterior& posterior, const Goal& ego_goal,
                           const MctsOptions& options, std::uint64_t seed) {
  const PlannerConfig& cfg = options.config;
  if (cfg.budget < 1) throw std::invalid_argument("mcts_plan: budget must be at least 1");
  const LaneGraph& graph = root.graph();
  const int horizon = options.horizon > root.now() ? options.horizon : root.now() + 30 * kFps;
  const auto root_actions = applicable_macros(root.state_of(ego), graph, &ego_goal, root.kinematics());
  if (root_actions.empty()) throw std::runtime_error("mcts_plan: no applicable macro at root");

  std::vector<Node> tree(1);
  std::map<std::vector<Macro>, std::pair<int, double>> plans;

  for (int it = 0; it < cfg.budget; ++it) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(it)));
    Engine e = root.snapshot();
    e.set_goal(ego, ego_goal);
    if (options.fixed) {
      for (const auto& [id, plan] : *options.fixed)
        if (e.has(id)) e.set_plan(id, plan, true);
      if (options.fixed_goals)
        for (const auto& [id, g] : *options.fixed_goals)
          if (e.has(id)) e.set_goal(id, g);
    } else {
      const Assignment a = sample_assignment(posterior, rng);
      for (const auto& c : a.choices) {
        if (!e.has(c.agent)) continue;
        const auto& gh = posterior.find(c.agent)->goals[static_cast<std::size_t>(c.goal)];
        e.set_goal(c.agent, gh.goal);
        e.set_plan(c.agent,
                   gh.trajectories.empty() ? std::vector<MacroSpec>{}
                                           : gh.trajectories[static_cast<std::size_t>(c.trajectory)].macros,
                   true);
      }
    }

    std::vector<std::pair<int, std::size_t>> path;
    std::vector<Macro> plan;
    int node = 0;
    for (int depth = 0; depth < cfg.depth; ++depth) {
      if (!e.active(ego) || e.now() >= horizon) break;
      if (!tree[static_cast<std::size_t>(node)].expanded) {
        const auto acts = depth == 0 ? root_actions
                                     : applicable_macros(e.state_of(ego), graph, &ego_goal, e.kinematics());
        Node& nd = tree[static_cast<std::size_t>(node)];
        nd.actions = acts;
        nd.child.assign(acts.size(), -1);
        nd.visits.assign(acts.size(), 0);
        nd.value_sum.assign(acts.size(), 0.0);
        nd.q.assign(acts.size(), 0.0);
        nd.expanded = true;
      }
      const Node& nd = tree[static_cast<std::size_t>(node)];
      if (nd.actions.empty()) break;
      std::size_t pick = nd.actions.size();
      for (std::size_t k = 0; k < nd.actions.size() && pick == nd.actions.size(); ++k)
        if (nd.visits[k] == 0) pick = k;
      if (pick == nd.actions.size()) {
        double best = -std::numeric_limits<double>::infinity();
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t k = 0; k < nd.actions.size(); ++k) {
          lo = std::min(lo, nd.q[k]);
          hi = std::max(hi, nd.q[k]);
        }
        const double span = hi > lo ? hi - lo : 1.0;
        for (std::size_t k = 0; k < nd.actions.size(); ++k) {
          const double q = (nd.q[k] - lo) / span;
          const double u = q + cfg.exploration * std::sqrt(std::log(static_cast<double>(nd.total)) / nd.visits[k]);
          if (u > best) {
            best = u;
            pick = k;
          }
        }
      }
      const Macro m = nd.actions[pick];
      path.emplace_back(node, pick);
      plan.push_back(m);
      e.set_plan(ego, {MacroSpec{m}}, false);
      run_until_idle(e, ego, horizon);
      int next = tree[static_cast<std::size_t>(node)].child[pick];
      if (next < 0) {
        next = static_cast<int>(tree.size());
        tree[static_cast<std::size_t>(node)].child[pick] = next;
        tree.emplace_back();
      }
      node = next;
    }
    if (e.active(ego) && e.goal_time(ego) < 0) {
      e.set_plan(ego, {}, true);
      while (e.now() < horizon && e.active(ego) && e.goal_time(ego) < 0) e.step();
    }
    const JointTrace& tr = e.trace();
    const double value =
        scalarize(reward_of_states(tr.states_of(ego), ego_goal, graph, horizon, &tr, ego), cfg.weights);
    for (auto p = path.rbegin(); p != path.rend(); ++p) {
      Node& nd = tree[static_cast<std::size_t>(p->first)];
      const std::size_t k = p->second;
      ++nd.total;
      ++nd.visits[k];
      nd.value_sum[k] += value;
      nd.q[k] = nd.value_sum[k] / nd.visits[k];
      const int c = nd.child[k];
      if (c >= 0 && tree[static_cast<std::size_t>(c)].total > 0) {
        const Node& ch = tree[static_cast<std::size_t>(c)];
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < ch.actions.size(); ++j)
          if (ch.visits[j] > 0) best = std::max(best, ch.q[j]);
        nd.q[k] = best;
      }
    }
    auto& slot = plans[plan];
    ++slot.first;
    slot.second += value;
  }

  PlanDistribution dist;
  for (const auto& [macros, stat] : plans)
    dist.entries.push_back({macros, static_cast<double>(stat.first) / cfg.budget, stat.first,
                            stat.second / stat.first});
  std::stable_sort(dist.entries.begin(), dist.entries.end(),
                   [](const PlanEntry& a, const PlanEntry& b) { return a.visits > b.visits; });
  int node = 0;
  while (node >= 0 && tree[static_cast<std::size_t>(node)].expanded) {
    const Node& nd = tree[static_cast<std::size_t>(node)];
    std::size_t best = nd.actions.size();
    for (std::size_t k = 0; k < nd.actions.size(); ++k) {
      if (nd.visits[k] == 0) continue;
      if (best == nd.actions.size() || nd.visits[k] > nd.visits[best] ||
          (nd.visits[k] == nd.visits[best] && nd.q[k] > nd.q[best]))
        best = k;
    }
    if (best == nd.actions.size()) break;
    dist.greedy.push_back(nd.actions[best]);
    node = nd.child[best];
  }
  return dist;
}

std::vector<MacroSpec> plan_ego(const Engine& eng, const JointTrace& seen, const Goal& ego_goal,
                                const PlannerConfig& cfg, const PredictionConfig& prediction, std::uint64_t seed) {
  const AgentId ego = seen.ego();
  if (applicable_macros(eng.state_of(ego), eng.graph(), &ego_goal, eng.kinematics()).empty()) return {};
  const GoalPosterior post = build_posterior(seen, eng.graph(), prediction, nearby_agents(eng, ego, cfg.interaction_radius));
  MctsOptions opt;
  opt.config = cfg;
  opt.horizon = eng.now() + 30 * kFps;
  return to_specs(mcts_plan(eng.snapshot(), ego, post, ego_goal, opt, seed).greedy);
}

PlanDistribution mcts_plan(const Scenario& scenario, const JointTrace& prefix, const GoalPosterior& posterior,
                           const Goal& ego_goal, int budget, std::uint64_t seed) {
  const Engine root = root_engine(scenario, prefix);
  MctsOptions opt;
  opt.config = scenario.planner;
  opt.config.budget = budget;
  opt.horizon = prefix.end() + 30 * kFps;
  return mcts_plan(root, prefix.ego(), posterior, ego_goal, opt, seed);
}

}  // namespace cema
