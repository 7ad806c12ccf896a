#include "cema/prediction.hpp"

#include "cema/planner.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <sstream>

namespace cema {

std::vector<double> smooth(const std::vector<double>& theta, double alpha) {
  const Eigen::Map<const Eigen::VectorXd> t(theta.data(), static_cast<Eigen::Index>(theta.size()));
  const Eigen::VectorXd phi = smooth(t, alpha);
  return {phi.data(), phi.data() + phi.size()};
}

const AgentPosterior* GoalPosterior::find(AgentId id) const {
  for (const auto& a : agents)
    if (a.agent == id) return &a;
  return nullptr;
}

nlohmann::json GoalPosterior::to_json(const LaneGraph& graph) const {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& a : agents) {
    nlohmann::json goals = nlohmann::json::array();
    for (const auto& g : a.goals) {
      nlohmann::json trajs = nlohmann::json::array();
      for (const auto& t : g.trajectories) {
        nlohmann::json ms = nlohmann::json::array();
        for (const auto& m : t.macros) ms.push_back(std::string(to_string(m.kind)));
        trajs.push_back({{"variant", t.variant}, {"p", t.probability}, {"macros", ms}});
      }
      goals.push_back({{"goal", g.goal.key(graph)}, {"p", g.probability}, {"trajectories", trajs}});
    }
    out[std::to_string(a.agent)] = {{"goals", goals}, {"uniform_fallback", a.uniform_fallback}};
  }
  return out;
}

std::vector<Goal> enumerate_goals(const LaneGraph& graph, int lane, AgentId agent) {
  std::vector<int> terminals;
  for (int l : graph.reachable(lane))
    if (graph.out(l).empty()) terminals.push_back(l);
  std::sort(terminals.begin(), terminals.end());
  std::vector<char> used(static_cast<std::size_t>(graph.size()), 0);
  auto is_terminal = [&](int l) { return std::binary_search(terminals.begin(), terminals.end(), l); };
  std::vector<Goal> goals;
  for (int t : terminals) {
    if (used[static_cast<std::size_t>(t)]) continue;
    Goal g;
    g.agent = agent;
    std::deque<int> q{t};
    used[static_cast<std::size_t>(t)] = 1;
    while (!q.empty()) {
      const int l = q.front();
      q.pop_front();
      g.lane_ends.push_back(l);
      for (int nb : {graph.left(l), graph.right(l)})
        if (nb >= 0 && is_terminal(nb) && !used[static_cast<std::size_t>(nb)]) {
          used[static_cast<std::size_t>(nb)] = 1;
          q.push_back(nb);
        }
    }
    std::sort(g.lane_ends.begin(), g.lane_ends.end());
    goals.push_back(std::move(g));
  }
  return goals;
}

std::vector<Goal> enumerate_goals(const Scenario& scenario, AgentId agent) {
  const LocalState s = scenario.spawn_state(scenario.agent(agent));
  return enumerate_goals(scenario.graph, s.lane, agent);
}

std::vector<LocalState> simulate_alone(const LaneGraph& graph, const LocalState& start, const Goal& goal,
                                       const std::vector<MacroSpec>& macros, const PredictionConfig& cfg) {
  Engine eng(graph, cfg.kin, start.timestep);
  eng.add_agent(0, false, goal, start);
  eng.set_plan(0, macros, true);
  const int steps = static_cast<int>(cfg.horizon_s * kFps);
  for (int k = 0; k < steps && eng.active(0); ++k) eng.step();
  return eng.trace().states_of(0);
}

double free_flow_cost(const std::vector<LocalState>& states, const Goal& goal, const LaneGraph& graph,
                      const PredictionConfig& cfg) {
  if (states.empty()) return 0.0;
  const RewardVector r = reward_of_states(states, goal, graph, states.back().timestep);
  return -scalarize(r, cfg.weights);
}

namespace {

bool reaches(const std::vector<LocalState>& st, const Goal& g, const LaneGraph& graph) {
  return !st.empty() && g.contains(graph, st.back().position);
}

std::vector<double> softmax(const std::vector<double>& logits, const std::vector<char>& mask) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (mask[i]) mx = std::max(mx, logits[i]);
  std::vector<double> p(logits.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (mask[i]) z += p[i] = std::exp(logits[i] - mx);
  for (double& x : p) x /= z;
  return p;
}

}  // namespace

std::vector<double> goal_posterior(const std::vector<LocalState>& observed, const std::vector<Goal>& goals,
                                   const LaneGraph& graph, double beta, const PredictionConfig& cfg,
                                   bool* fallback) {
  if (observed.empty()) throw std::invalid_argument("goal_posterior: no observed states");
  if (goals.empty()) throw std::invalid_argument("goal_posterior: no goals");
  std::vector<double> logits(goals.size(), 0.0);
  std::vector<char> ok(goals.size(), 0);
  const LocalState& first = observed.front();
  const LocalState& last = observed.back();
  for (std::size_t k = 0; k < goals.size(); ++k) {
    const Goal& g = goals[k];
    const auto opt = simulate_alone(graph, first, g, plan_to_goal(graph, first.lane, first.lane_s, g), cfg);
    auto comp = simulate_alone(graph, last, g, plan_to_goal(graph, last.lane, last.lane_s, g), cfg);
    std::vector<LocalState> combined = observed;
    combined.insert(combined.end(), comp.begin() + (comp.empty() ? 0 : 1), comp.end());
    if (!reaches(combined, g, graph)) continue;
    ok[k] = 1;
    const double c_obs = free_flow_cost(combined, g, graph, cfg);
    const double c_opt = reaches(opt, g, graph) ? free_flow_cost(opt, g, graph, cfg) : c_obs;
    logits[k] = -beta * (c_obs - c_opt);
  }
  const bool none = std::none_of(ok.begin(), ok.end(), [](char c) { return c != 0; });
  if (fallback) *fallback = none;
  if (none) return std::vector<double>(goals.size(), 1.0 / static_cast<double>(goals.size()));
  return softmax(logits, ok);
}

GoalPosterior build_posterior(const JointTrace& observed, const LaneGraph& graph, const PredictionConfig& cfg,
                              const std::vector<AgentId>& agents) {
  GoalPosterior post;
  for (AgentId id : agents) {
    const auto obs = observed.states_of(id);
    if (obs.empty()) continue;
    const LocalState& cur = obs.back();
    if (observed.state(id, observed.end()) == nullptr) continue;
    AgentPosterior ap;
    ap.agent = id;
    const auto goals = enumerate_goals(graph, cur.lane, id);
    if (goals.empty()) continue;
    const auto probs = goal_posterior(obs, goals, graph, cfg.beta, cfg, &ap.uniform_fallback);
    for (std::size_t k = 0; k < goals.size(); ++k) {
      GoalHypothesis gh;
      gh.goal = goals[k];
      gh.probability = probs[k];
      const auto base = plan_to_goal(graph, cur.lane, cur.lane_s, goals[k]);
      std::vector<std::pair<std::string, std::vector<MacroSpec>>> variants{{"optimal", base}};
      for (std::size_t i = 1; i < base.size(); ++i)
        if ((base[i].kind == Macro::ChangeLeft || base[i].kind == Macro::ChangeRight) &&
            base[i - 1].kind == Macro::Continue && base[i - 1].until_lane >= 0) {
          auto early = base;
          early.erase(early.begin() + static_cast<long>(i) - 1);
          variants.emplace_back("early-change", early);
          break;
        }
      if (!base.empty()) {
        auto slow = base;
        for (auto& m : slow) m.speed_factor = 0.8;
        variants.emplace_back("conservative", slow);
      }
      std::vector<double> logits;
      for (const auto& [name, macros] : variants) {
        const bool dup = std::any_of(gh.trajectories.begin(), gh.trajectories.end(),
                                     [&](const PredictedTrajectory& t) { return t.macros == macros; });
        if (dup) continue;
        PredictedTrajectory t;
        t.variant = name;
        t.macros = macros;
        t.states = simulate_alone(graph, cur, goals[k], macros, cfg);
        t.cost = free_flow_cost(t.states, goals[k], graph, cfg);
        logits.push_back(-cfg.beta * t.cost);
        gh.trajectories.push_back(std::move(t));
      }
      const auto p = softmax(logits, std::vector<char>(logits.size(), 1));
      for (std::size_t i = 0; i < p.size(); ++i) gh.trajectories[i].probability = p[i];
      ap.goals.push_back(std::move(gh));
    }
    post.agents.push_back(std::move(ap));
  }
  return post;
}

GoalPosterior smooth(const GoalPosterior& posterior, double alpha, SmoothingLevels levels) {
  GoalPosterior out = posterior;
  for (auto& a : out.agents) {
    if (levels.goals) {
      std::vector<double> p;
      for (const auto& g : a.goals) p.push_back(g.probability);
      p = smooth(p, alpha);
      for (std::size_t i = 0; i < p.size(); ++i) a.goals[i].probability = p[i];
    }
    if (levels.trajectories)
      for (auto& g : a.goals) {
        std::vector<double> p;
        for (const auto& t : g.trajectories) p.push_back(t.probability);
        p = smooth(p, alpha);
        for (std::size_t i = 0; i < p.size(); ++i) g.trajectories[i].probability = p[i];
      }
  }
  return out;
}

const Assignment::Choice* Assignment::find(AgentId id) const {
  for (const auto& c : choices)
    if (c.agent == id) return &c;
  return nullptr;
}

std::string Assignment::key(const std::vector<AgentId>& subset) const {
  std::vector<Choice> cs;
  for (const auto& c : choices)
    if (std::find(subset.begin(), subset.end(), c.agent) != subset.end()) cs.push_back(c);
  std::sort(cs.begin(), cs.end(), [](const Choice& a, const Choice& b) { return a.agent < b.agent; });
  std::ostringstream os;
  for (const auto& c : cs) os << c.agent << ':' << c.goal << '.' << c.trajectory << ';';
  return os.str();
}

Assignment sample_assignment(const GoalPosterior& posterior, Rng& rng) {
  Assignment a;
  for (const auto& ap : posterior.agents) {
    std::vector<double> pg;
    for (const auto& g : ap.goals) pg.push_back(g.probability);
    const std::size_t gi = rng.categorical(pg);
    std::vector<double> pt;
    for (const auto& t : ap.goals[gi].trajectories) pt.push_back(t.probability);
    const std::size_t ti = pt.empty() ? 0 : rng.categorical(pt);
    a.choices.push_back({ap.agent, static_cast<int>(gi), static_cast<int>(ti)});
    a.probability *= pg[gi] * (pt.empty() ? 1.0 : pt[ti]);
  }
  return a;
}

Engine root_engine(const Scenario& scenario, const JointTrace& prefix, const Kinematics& kin) {
  Engine eng(scenario.graph, kin, prefix.end());
  for (const auto& info : prefix.agents) {
    const LocalState* s = prefix.state(info.id, prefix.end());
    if (!s) continue;
    eng.add_agent(info.id, info.ego, scenario.agent(info.id).goal, *s);
  }
  eng.set_roster(prefix.agents);
  return eng;
}

Rollout sample_rollout(const Scenario& scenario, const JointTrace& prefix, const GoalPosterior& posterior,
                       int horizon, std::uint64_t seed, const EgoPolicy& ego_policy, const Kinematics& kin,
                       const ClosedLoop* loop) {
  if (horizon < prefix.end()) throw std::invalid_argument("sample_closed_loop: horizon before start");
  Rng rng(seed);
  Engine eng = root_engine(scenario, prefix, kin);
  Rollout out;
  out.assignment = sample_assignment(posterior, rng);
  for (const auto& c : out.assignment.choices) {
    if (!eng.has(c.agent)) continue;
    const auto& gh = posterior.find(c.agent)->goals[static_cast<std::size_t>(c.goal)];
    eng.set_goal(c.agent, gh.goal);
    if (gh.trajectories.empty())
      eng.set_plan(c.agent, {}, true);
    else
      eng.set_plan(c.agent, gh.trajectories[static_cast<std::size_t>(c.trajectory)].macros, true);
  }
  const AgentId ego = prefix.ego();
  if (eng.has(ego)) {
    eng.set_recording(false);
    out.ego = ego_policy(eng.snapshot(), out.assignment, rng);
    eng.set_plan(ego, out.ego.macros, true);
  }
  eng.set_recording(true);
  int last_plan = eng.now();
  while (eng.now() < horizon) {
    if (loop && eng.has(ego) && eng.active(ego) && eng.goal_time(ego) < 0 && eng.now() - last_plan >= loop->period &&
        eng.interruptible(ego)) {
      eng.set_plan(ego, loop->replan(eng, derive_seed(seed, static_cast<std::uint64_t>(eng.now()))), true);
      last_plan = eng.now();
    }
    eng.step();
  }
  out.trace = eng.trace();
  if (out.trace.empty()) {
    out.trace.start = eng.now();
    out.trace.frames.push_back(eng.frame());
  }
  out.trace.agents = prefix.agents;
  out.probability = out.assignment.probability * out.ego.probability;
  return out;
}

JointTrace sample_closed_loop(const Scenario& scenario, const JointTrace& prefix, const GoalPosterior& posterior,
                              int horizon, std::uint64_t seed, const EgoPolicy& ego_policy, const Kinematics& kin) {
  return sample_rollout(scenario, prefix, posterior, horizon, seed, ego_policy, kin).trace;
}

}  // namespace cema
