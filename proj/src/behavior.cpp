#include "cema/behavior.hpp"

#include "cema/traffic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <tuple>
#include <queue>

namespace cema {

namespace {

// Distance from (lane, s) to the end of the straight chain, optionally requiring a neighbour on `side`.
double chain_room(const LaneGraph& g, int lane, double s, int side, double cap = 400.0) {
  double room = 0.0;
  int cur = lane;
  double from = s;
  while (cur >= 0 && room < cap) {
    if (side > 0 && g.left(cur) < 0) break;
    if (side < 0 && g.right(cur) < 0) break;
    room += g.lane(cur).length() - from;
    from = 0.0;
    cur = g.straight_next(cur);
  }
  return room;
}

// Connector of the first turn ahead, or -1.
int turn_ahead(const LaneGraph& g, int lane, double s, double cap = 200.0) {
  double dist = -s;
  int cur = lane;
  for (int guard = 0; guard < 32 && cur >= 0; ++guard) {
    if (g.is_connector(cur)) return -1;
    dist += g.lane(cur).length();
    if (g.turn_from(cur) >= 0) return g.turn_from(cur);
    if (dist > cap) return -1;
    cur = g.straight_next(cur);
  }
  return -1;
}

bool goal_reachable_from(const LaneGraph& g, int lane, const Goal& goal) {
  thread_local std::map<std::tuple<const LaneGraph*, int, std::string>, bool> cache;
  const auto key = std::make_tuple(&g, lane, goal.key(g));
  if (const auto it = cache.find(key); it != cache.end()) return it->second;
  bool ok = false;
  for (int li : g.reachable(lane)) {
    const Lane& L = g.lane(li);
    for (double t = 0.0; t < L.length() + 1.0 && !ok; t += 1.0) ok = goal.contains(g, L.point(std::min(t, L.length())));
    if (ok) break;
  }
  cache.emplace(key, ok);
  return ok;
}

}  // namespace

std::vector<Macro> applicable_macros(const LocalState& state, const LaneGraph& graph, const Goal* goal,
                                     const Kinematics& kin) {
  std::vector<Macro> out;
  if (goal && goal->contains(graph, state.position)) return out;
  const int lane = state.lane >= 0 ? state.lane : graph.locate(state.position, state.heading).lane;
  if (lane < 0) return out;
  const double s = state.lane >= 0 ? state.lane_s : graph.locate(state.position, state.heading).s;
  const double v = state.speed;
  if (chain_room(graph, lane, s, 0) > 5.0) out.push_back(Macro::Continue);
  const double need = 0.5 * v * kin.lane_change_time + 5.0;
  if (!graph.is_connector(lane)) {
    if (graph.left(lane) >= 0 && chain_room(graph, lane, s, 1) >= need) out.push_back(Macro::ChangeLeft);
    if (graph.right(lane) >= 0 && chain_room(graph, lane, s, -1) >= need) out.push_back(Macro::ChangeRight);
    const int conn = turn_ahead(graph, lane, s);
    if (conn >= 0 && (!goal || goal_reachable_from(graph, conn, *goal))) out.push_back(Macro::Exit);
  }
  out.push_back(Macro::Stop);
  return out;
}

std::vector<LocalState> synthesize(const MacroSpec& macro, const LocalState& start, const LaneGraph& graph,
                                   const Kinematics& kin) {
  LocalState st = start;
  if (st.lane < 0) {
    const auto loc = graph.locate(st.position, st.heading);
    if (loc.lane < 0) throw InfeasibleMacro("synthesize: start state is off-road");
    st.lane = loc.lane;
    st.lane_s = loc.s;
    st.lane_offset = loc.d;
  }
  const auto ok = applicable_macros(st, graph, nullptr, kin);
  if (std::find(ok.begin(), ok.end(), macro.kind) == ok.end())
    throw InfeasibleMacro("synthesize: " + std::string(to_string(macro.kind)) + " is not applicable here");
  Engine eng(graph, kin, st.timestep);
  Goal none;
  eng.add_agent(0, true, none, st);
  eng.set_plan(0, {macro}, false);
  const int cap = 60 * kFps;
  eng.step();
  for (int k = 1; k < cap && eng.macros_done(0) == 0; ++k) eng.step();
  if (eng.macros_done(0) == 0) throw InfeasibleMacro("synthesize: macro did not terminate");
  return eng.trace().states_of(0);
}

ActionLabels label_actions(const JointTrace& trace, AgentId agent, const LaneGraph& graph) {
  ActionLabels out;
  out.agent = agent;
  const auto st = trace.states_of(agent);
  if (st.empty()) {
    out.start = trace.start;
    return out;
  }
  out.start = st.front().timestep;
  const std::size_t n = st.size();
  out.labels.assign(n, ActionLabel{});
  std::vector<double> lat(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Lane& L = graph.lane(st[i].lane);
    lat[i] = st[i].speed * std::sin(wrap_angle(st[i].heading - L.heading(st[i].lane_s)));
  }

  // Exit spans: connector timesteps plus the approach lane before them.
  std::vector<char> in_exit(n, 0);
  std::vector<int> turn_sign(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (graph.is_connector(st[i].lane)) {
      turn_sign[i] = graph.connector_kind_sign(st[i].lane);
      in_exit[i] = 1;
      if (i > 0 && !graph.is_connector(st[i - 1].lane)) {
        const int approach = st[i - 1].lane;
        for (std::size_t j = i; j-- > 0 && st[j].lane == approach;) in_exit[j] = 1;
      }
    }
  for (std::size_t i = 0; i < n; ++i)
    if (in_exit[i]) out.labels[i].macro = Macro::Exit;

  // Stops and the deceleration leading into them.
  for (std::size_t i = 0; i < n;) {
    if (st[i].speed > 0.1) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && st[j].speed <= 0.1) ++j;
    if (j - i >= 10) {
      std::size_t k = i;
      while (k > 0 && st[k - 1].speed > st[k].speed + 1e-9) --k;
      for (std::size_t t = k; t < i; ++t)
        out.labels[t] = in_exit[t] ? ActionLabel{Maneuver::GiveWay, Macro::Exit} : ActionLabel{Maneuver::Stop, Macro::Stop};
      for (std::size_t t = i; t < j; ++t)
        out.labels[t] = ActionLabel{Maneuver::Stop, in_exit[t] ? Macro::Exit : Macro::Stop};
    }
    i = j;
  }

  for (std::size_t i = 0; i < n; ++i)
    if (turn_sign[i] != 0)
      out.labels[i] = ActionLabel{turn_sign[i] > 0 ? Maneuver::TurnLeft : Maneuver::TurnRight, Macro::Exit};

  // Lane changes: a switch to a neighbouring lane, extended over the lateral motion around it.
  auto neighbour_side = [&](int from, int to) {
    auto check = [&](int side) {
      const int nb = side > 0 ? graph.left(from) : graph.right(from);
      if (nb == to) return true;
      if (nb >= 0 && graph.straight_next(nb) == to) return true;
      const int fwd = graph.straight_next(from);
      if (fwd >= 0 && (side > 0 ? graph.left(fwd) : graph.right(fwd)) == to) return true;
      return false;
    };
    if (check(1)) return 1;
    if (check(-1)) return -1;
    return 0;
  };
  for (std::size_t i = 1; i < n; ++i) {
    if (st[i].lane == st[i - 1].lane) continue;
    const int side = neighbour_side(st[i - 1].lane, st[i].lane);
    if (side == 0) continue;
    std::size_t a = i - 1;
    while (a > 0 && side * lat[a - 1] > 0.05) --a;
    std::size_t b = i;
    while (b + 1 < n && side * lat[b + 1] > 0.05) ++b;
    const ActionLabel lab = side > 0 ? ActionLabel{Maneuver::LaneChangeLeft, Macro::ChangeLeft}
                                     : ActionLabel{Maneuver::LaneChangeRight, Macro::ChangeRight};
    for (std::size_t t = a; t <= b; ++t) out.labels[t] = lab;
  }
  return out;
}

bool subsequence_match(const JointTrace& needle, const JointTrace& haystack, const LaneGraph& graph) {
  if (needle.empty()) return true;
  std::vector<AgentId> a, b;
  for (const auto& x : needle.agents) a.push_back(x.id);
  for (const auto& x : haystack.agents) b.push_back(x.id);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a != b) throw std::invalid_argument("subsequence_match: traces do not share the agent roster");
  const AgentId ego = haystack.ego();
  const auto ln = label_actions(needle, ego, graph);
  const auto lh = label_actions(haystack, ego, graph);
  return subsequence_match(ln.labels, ln.start, lh.labels, lh.start);
}

std::vector<MacroSpec> plan_to_goal(const LaneGraph& g, int lane, double s, const Goal& goal) {
  const int n = g.size();
  // First position on each lane that lies in the goal, or NaN.
  std::vector<double> goal_s(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < n; ++i) {
    const Lane& L = g.lane(i);
    for (double t = 0.0;; t += 1.0) {
      const double tt = std::min(t, L.length());
      if (goal.contains(g, L.point(tt))) {
        goal_s[static_cast<std::size_t>(i)] = tt;
        break;
      }
      if (tt >= L.length()) break;
    }
  }
  if (goal.contains(g, g.lane(lane).point(s))) return {};

  struct Node {
    double cost;
    int lane;
    double entry;
    bool operator>(const Node& o) const { return cost > o.cost; }
  };
  const double kChangeCost = 15.0;
  std::vector<double> best(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<int> parent(static_cast<std::size_t>(n), -1);
  std::vector<ConnectionKind> via(static_cast<std::size_t>(n), ConnectionKind::Successor);
  std::vector<double> entry(static_cast<std::size_t>(n), 0.0);
  std::priority_queue<Node, std::vector<Node>, std::greater<Node>> pq;
  best[static_cast<std::size_t>(lane)] = 0.0;
  entry[static_cast<std::size_t>(lane)] = s;
  pq.push({0.0, lane, s});
  int reached = -1;
  double reached_cost = std::numeric_limits<double>::infinity();
  while (!pq.empty()) {
    const Node cur = pq.top();
    pq.pop();
    if (cur.cost > best[static_cast<std::size_t>(cur.lane)]) continue;
    if (cur.cost >= reached_cost) break;
    const Lane& L = g.lane(cur.lane);
    const double gs = goal_s[static_cast<std::size_t>(cur.lane)];
    if (!std::isnan(gs)) {
      double total = cur.cost + std::max(0.0, gs - cur.entry);
      if (gs < cur.entry - 1e-6) total = std::numeric_limits<double>::infinity();
      if (gs < cur.entry - 1e-6 && goal.contains(g, L.point(std::min(cur.entry + 1.0, L.length()))))
        total = cur.cost;
      if (total < reached_cost) {
        reached_cost = total;
        reached = cur.lane;
      }
    }
    auto relax = [&](int to, double c, double e, ConnectionKind k) {
      if (c < best[static_cast<std::size_t>(to)]) {
        best[static_cast<std::size_t>(to)] = c;
        parent[static_cast<std::size_t>(to)] = cur.lane;
        via[static_cast<std::size_t>(to)] = k;
        entry[static_cast<std::size_t>(to)] = e;
        pq.push({c, to, e});
      }
    };
    const double rest = std::max(0.0, L.length() - cur.entry);
    for (const auto& e : g.out(cur.lane)) relax(e.to, cur.cost + rest, 0.0, e.kind);
    if (!g.is_connector(cur.lane)) {
      const double probe = std::min(cur.entry + 30.0, L.length());
      if (g.left(cur.lane) >= 0) {
        const int to = g.left(cur.lane);
        relax(to, cur.cost + kChangeCost + (probe - cur.entry), g.lane(to).project(L.point(probe)).s,
              ConnectionKind::LeftAdjacent);
      }
      if (g.right(cur.lane) >= 0) {
        const int to = g.right(cur.lane);
        relax(to, cur.cost + kChangeCost + (probe - cur.entry), g.lane(to).project(L.point(probe)).s,
              ConnectionKind::RightAdjacent);
      }
    }
  }
  if (reached < 0) return {};

  std::vector<std::pair<int, ConnectionKind>> path;
  for (int cur = reached; cur != lane; cur = parent[static_cast<std::size_t>(cur)])
    path.emplace_back(cur, via[static_cast<std::size_t>(cur)]);
  std::reverse(path.begin(), path.end());

  std::vector<MacroSpec> out;
  int at = lane;
  bool pending = false;
  for (const auto& [to, kind] : path) {
    if (kind == ConnectionKind::LeftAdjacent || kind == ConnectionKind::RightAdjacent) {
      if (pending) {
        MacroSpec c;
        c.kind = Macro::Continue;
        c.until_lane = at;
        out.push_back(c);
        pending = false;
      }
      MacroSpec m;
      m.kind = kind == ConnectionKind::LeftAdjacent ? Macro::ChangeLeft : Macro::ChangeRight;
      out.push_back(m);
    } else if (kind == ConnectionKind::TurnLeft || kind == ConnectionKind::TurnRight) {
      MacroSpec m;
      m.kind = Macro::Exit;
      m.exit_lane = to;
      out.push_back(m);
      pending = false;
    } else if (!g.is_connector(at)) {
      pending = true;
    }
    at = to;
  }
  MacroSpec fin;
  fin.kind = Macro::Continue;
  fin.duration = std::numeric_limits<double>::infinity();
  out.push_back(fin);
  return out;
}

}  // namespace cema
