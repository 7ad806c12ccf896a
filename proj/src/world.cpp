#include "cema/world.hpp"

#include <json.hpp>

#include <algorithm>
#include <deque>
#include <limits>
#include <set>
#include <sstream>

namespace cema {

using nlohmann::json;

namespace {

constexpr double kResample = 0.1;

std::vector<Vec2> catmull_rom(const std::vector<Vec2>& c) {
  std::vector<Vec2> out;
  const std::size_t n = c.size();
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const Vec2& p0 = c[i == 0 ? 0 : i - 1];
    const Vec2& p1 = c[i];
    const Vec2& p2 = c[i + 1];
    const Vec2& p3 = c[i + 2 < n ? i + 2 : n - 1];
    const int steps = std::max(1, static_cast<int>(std::ceil((p2 - p1).norm() / kResample)));
    for (int k = 0; k < steps; ++k) {
      const double t = static_cast<double>(k) / steps;
      const double t2 = t * t, t3 = t2 * t;
      out.push_back(0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                           (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3));
    }
  }
  out.push_back(c.back());
  return out;
}

}  // namespace

std::string_view to_string(Maneuver m) {
  switch (m) {
    case Maneuver::LaneFollow: return "lane-follow";
    case Maneuver::LaneChangeLeft: return "lane-change-left";
    case Maneuver::LaneChangeRight: return "lane-change-right";
    case Maneuver::TurnLeft: return "turn-left";
    case Maneuver::TurnRight: return "turn-right";
    case Maneuver::GiveWay: return "give-way";
    case Maneuver::Stop: return "stop";
  }
  return "lane-follow";
}

std::string_view to_string(Macro m) {
  switch (m) {
    case Macro::Continue: return "Continue";
    case Macro::ChangeLeft: return "ChangeLeft";
    case Macro::ChangeRight: return "ChangeRight";
    case Macro::Exit: return "Exit";
    case Macro::Stop: return "Stop";
  }
  return "Continue";
}

bool parse_maneuver(std::string_view s, Maneuver& out) {
  for (Maneuver m : kAllManeuvers)
    if (to_string(m) == s) {
      out = m;
      return true;
    }
  return false;
}

bool parse_macro(std::string_view s, Macro& out) {
  for (Macro m : kAllMacros)
    if (to_string(m) == s) {
      out = m;
      return true;
    }
  return false;
}

bool is_action_name(std::string_view s) {
  Maneuver m;
  Macro a;
  return parse_maneuver(s, m) || parse_macro(s, a);
}

std::string_view to_string(ConnectionKind k) {
  switch (k) {
    case ConnectionKind::Successor: return "successor";
    case ConnectionKind::LeftAdjacent: return "left-adjacent";
    case ConnectionKind::RightAdjacent: return "right-adjacent";
    case ConnectionKind::TurnLeft: return "junction-turn-left";
    case ConnectionKind::TurnRight: return "junction-turn-right";
    case ConnectionKind::Straight: return "junction-straight";
  }
  return "successor";
}

bool parse_connection_kind(std::string_view s, ConnectionKind& out) {
  for (auto k : {ConnectionKind::Successor, ConnectionKind::LeftAdjacent, ConnectionKind::RightAdjacent,
                 ConnectionKind::TurnLeft, ConnectionKind::TurnRight, ConnectionKind::Straight})
    if (to_string(k) == s) {
      out = k;
      return true;
    }
  return false;
}

std::string_view to_string(Controller c) {
  switch (c) {
    case Controller::EgoPlanner: return "ego-planner";
    case Controller::Scripted: return "scripted";
    case Controller::PredictedFollower: return "predicted-follower";
  }
  return "scripted";
}

// ---------------------------------------------------------------- Lane

Lane::Lane(std::string id, std::vector<Vec2> centerline, double width, double speed_limit, bool give_way)
    : id_(std::move(id)), control_(std::move(centerline)), width_(width), speed_limit_(speed_limit),
      give_way_(give_way) {
  if (control_.size() < 2) throw ValidationError("lane " + id_ + ": centerline needs at least 2 points");
  pts_ = control_.size() > 2 ? catmull_rom(control_) : control_;
  cum_.assign(pts_.size(), 0.0);
  for (std::size_t i = 1; i < pts_.size(); ++i) cum_[i] = cum_[i - 1] + (pts_[i] - pts_[i - 1]).norm();
  if (cum_.back() <= 0.0) throw ValidationError("lane " + id_ + ": zero length");
}

std::size_t Lane::segment(double s) const {
  if (s <= 0.0) return 0;
  auto it = std::upper_bound(cum_.begin(), cum_.end(), s);
  std::size_t i = static_cast<std::size_t>(it - cum_.begin());
  if (i == 0) return 0;
  return std::min(i - 1, pts_.size() - 2);
}

Vec2 Lane::point(double s) const {
  const std::size_t i = segment(s);
  const double len = cum_[i + 1] - cum_[i];
  const double t = len > 0.0 ? (s - cum_[i]) / len : 0.0;
  return pts_[i] + t * (pts_[i + 1] - pts_[i]);
}

double Lane::heading(double s) const {
  const std::size_t i = segment(s);
  const Vec2 d = pts_[i + 1] - pts_[i];
  return std::atan2(d.y(), d.x());
}

Vec2 Lane::normal(double s) const {
  const double h = heading(s);
  return Vec2(-std::sin(h), std::cos(h));
}

double Lane::curvature(double s) const {
  if (pts_.size() <= 2) return 0.0;
  const double h = 0.5;
  return wrap_angle(heading(s + h) - heading(s - h)) / (2.0 * h);
}

Lane::Projection Lane::project(const Vec2& p) const {
  Projection best;
  double best_dist = std::numeric_limits<double>::infinity();
  const std::size_t nseg = pts_.size() - 1;
  for (std::size_t i = 0; i < nseg; ++i) {
    const Vec2 a = pts_[i];
    const Vec2 ab = pts_[i + 1] - a;
    const double len2 = ab.squaredNorm();
    double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
    if (i > 0) t = std::max(t, 0.0);
    if (i + 1 < nseg) t = std::min(t, 1.0);
    const Vec2 q = a + t * ab;
    const double dist = (p - q).norm();
    if (dist < best_dist) {
      best_dist = dist;
      const double len = std::sqrt(len2);
      const Vec2 n(-ab.y() / len, ab.x() / len);
      best.s = cum_[i] + t * len;
      best.d = (p - q).dot(n);
      best.dist = dist;
    }
  }
  return best;
}

// ---------------------------------------------------------------- LaneGraph

LaneGraph::LaneGraph(std::vector<Lane> lanes, std::vector<Connection> connections)
    : lanes_(std::move(lanes)), connections_(std::move(connections)) {
  const std::size_t n = lanes_.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!index_.emplace(lanes_[i].id(), static_cast<int>(i)).second)
      throw ValidationError("duplicate lane id: " + lanes_[i].id());
  }
  left_.assign(n, -1);
  right_.assign(n, -1);
  out_.assign(n, {});
  connector_.assign(n, 0);
  std::set<std::tuple<int, int, ConnectionKind>> seen;
  for (const auto& c : connections_) {
    const int a = find(c.from), b = find(c.to);
    if (a < 0) throw ValidationError("connection references unknown lane: " + c.from);
    if (b < 0) throw ValidationError("connection references unknown lane: " + c.to);
    seen.emplace(a, b, c.kind);
    switch (c.kind) {
      case ConnectionKind::LeftAdjacent: left_[a] = b; break;
      case ConnectionKind::RightAdjacent: right_[a] = b; break;
      default: {
        out_[a].push_back({b, c.kind});
        if (c.kind == ConnectionKind::TurnLeft || c.kind == ConnectionKind::TurnRight) {
          const Vec2 end = lanes_[a].point(lanes_[a].length());
          const Vec2 begin = lanes_[b].point(0.0);
          if ((end - begin).norm() > 0.5)
            throw ValidationError("junction-turn connection " + c.from + " -> " + c.to +
                                  " does not join lane endpoints within 0.5 m");
          connector_[b] = c.kind == ConnectionKind::TurnLeft ? 1 : -1;
        }
      }
    }
  }
  for (const auto& c : connections_) {
    const int a = find(c.from), b = find(c.to);
    if (c.kind == ConnectionKind::LeftAdjacent && !seen.count({b, a, ConnectionKind::RightAdjacent}))
      throw ValidationError("adjacency not symmetric: " + c.from + " left of ... missing right-adjacent " + c.to +
                            " -> " + c.from);
    if (c.kind == ConnectionKind::RightAdjacent && !seen.count({b, a, ConnectionKind::LeftAdjacent}))
      throw ValidationError("adjacency not symmetric: missing left-adjacent " + c.to + " -> " + c.from);
  }
}

int LaneGraph::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  return it == index_.end() ? -1 : it->second;
}

int LaneGraph::index(std::string_view id) const {
  const int i = find(id);
  if (i < 0) throw ValidationError("unknown lane: " + std::string(id));
  return i;
}

int LaneGraph::straight_next(int i) const {
  for (const auto& e : out(i))
    if (e.kind == ConnectionKind::Successor || e.kind == ConnectionKind::Straight) return e.to;
  return -1;
}

int LaneGraph::turn_from(int i) const {
  for (const auto& e : out(i))
    if (e.kind == ConnectionKind::TurnLeft || e.kind == ConnectionKind::TurnRight) return e.to;
  return -1;
}

std::vector<int> LaneGraph::reachable(int from) const {
  std::vector<char> seen(lanes_.size(), 0);
  std::deque<int> q{from};
  std::vector<int> order;
  seen[static_cast<std::size_t>(from)] = 1;
  while (!q.empty()) {
    const int i = q.front();
    q.pop_front();
    order.push_back(i);
    std::vector<int> next;
    for (const auto& e : out(i)) next.push_back(e.to);
    if (left(i) >= 0) next.push_back(left(i));
    if (right(i) >= 0) next.push_back(right(i));
    for (int j : next)
      if (!seen[static_cast<std::size_t>(j)]) {
        seen[static_cast<std::size_t>(j)] = 1;
        q.push_back(j);
      }
  }
  return order;
}

LaneGraph::Location LaneGraph::locate(const Vec2& p, std::optional<double> heading) const {
  Location best;
  double best_score = std::numeric_limits<double>::infinity();
  for (int i = 0; i < size(); ++i) {
    const Lane& l = lane(i);
    const auto pr = l.project(p);
    if (pr.s < -0.5 || pr.s > l.length() + 0.5) continue;
    if (std::abs(pr.d) > 0.5 * l.width() + 0.25) continue;
    if (heading && std::abs(wrap_angle(*heading - l.heading(pr.s))) > M_PI / 2) continue;
    // Prefer the lane whose centre is closest; a connector only wins when clearly closer.
    const double score = std::abs(pr.d) + (is_connector(i) ? 0.05 : 0.0);
    if (score < best_score) {
      best_score = score;
      best = {i, std::clamp(pr.s, 0.0, l.length()), pr.d};
    }
  }
  return best;
}

// ---------------------------------------------------------------- Goal

bool Goal::contains(const LaneGraph& g, const Vec2& p) const {
  if (box) {
    const auto& b = *box;
    if (p.x() >= b[0] && p.x() <= b[2] && p.y() >= b[1] && p.y() <= b[3]) return true;
  }
  for (int li : lane_ends) {
    const Lane& l = g.lane(li);
    const auto pr = l.project(p);
    if (pr.s >= l.length() - kLaneEndGoalLength && pr.s <= l.length() + 2.0 && std::abs(pr.d) <= 0.5 * l.width() + 0.25)
      return true;
  }
  return false;
}

Vec2 Goal::anchor(const LaneGraph& g) const {
  if (box) return Vec2(0.5 * ((*box)[0] + (*box)[2]), 0.5 * ((*box)[1] + (*box)[3]));
  if (!lane_ends.empty()) {
    const Lane& l = g.lane(lane_ends.front());
    return l.point(l.length());
  }
  return Vec2::Zero();
}

std::string Goal::key(const LaneGraph& g) const {
  std::ostringstream os;
  if (box) os << "box:" << (*box)[0] << "," << (*box)[1] << "," << (*box)[2] << "," << (*box)[3];
  for (std::size_t i = 0; i < lane_ends.size(); ++i) os << (i || box ? "+" : "lane:") << g.lane(lane_ends[i]).id();
  return os.str();
}

// ---------------------------------------------------------------- JointTrace

AgentId JointTrace::ego() const {
  for (const auto& a : agents)
    if (a.ego) return a.id;
  throw ValidationError("trace has no ego");
}

bool JointTrace::has_agent(AgentId id) const {
  return std::any_of(agents.begin(), agents.end(), [&](const AgentInfo& a) { return a.id == id; });
}

const LocalState* JointTrace::state(AgentId id, int t) const {
  if (!covers(t)) return nullptr;
  const auto& f = at(t);
  auto it = f.find(id);
  return it == f.end() ? nullptr : &it->second;
}

std::vector<LocalState> JointTrace::states_of(AgentId id, int from, int to) const {
  std::vector<LocalState> out;
  from = std::max(from, start);
  to = std::min(to, end());
  for (int t = from; t <= to; ++t)
    if (const LocalState* s = state(id, t)) out.push_back(*s);
  return out;
}

JointTrace JointTrace::slice(int from, int to) const {
  JointTrace out;
  out.agents = agents;
  from = std::max(from, start);
  to = std::min(to, end());
  out.start = from;
  for (int t = from; t <= to; ++t) out.frames.push_back(at(t));
  return out;
}

void JointTrace::validate() const {
  int egos = 0;
  std::set<AgentId> ids;
  for (const auto& a : agents) {
    egos += a.ego ? 1 : 0;
    if (!ids.insert(a.id).second) throw ValidationError("duplicate agent id in trace");
  }
  if (egos != 1) throw ValidationError("trace must have exactly one ego");
  std::set<AgentId> exited;
  std::set<AgentId> prev;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    std::set<AgentId> cur;
    for (const auto& [id, s] : frames[i]) {
      if (!ids.count(id)) throw ValidationError("trace frame holds unknown agent");
      if (s.timestep != start + static_cast<int>(i)) throw ValidationError("trace timesteps not contiguous");
      if (exited.count(id)) throw ValidationError("agent reappears after exit");
      cur.insert(id);
    }
    if (i > 0)
      for (AgentId id : prev)
        if (!cur.count(id)) exited.insert(id);
    prev = std::move(cur);
  }
}

JointTrace concat(const JointTrace& head, const JointTrace& tail) {
  if (tail.empty()) return head;
  if (head.empty()) return tail;
  if (tail.start < head.start || tail.start > head.end() + 1)
    throw std::invalid_argument("concat: traces do not join");
  JointTrace out;
  out.agents = head.agents;
  out.start = head.start;
  out.frames.assign(head.frames.begin(), head.frames.begin() + (tail.start - head.start));
  out.frames.insert(out.frames.end(), tail.frames.begin(), tail.frames.end());
  return out;
}

// ---------------------------------------------------------------- Scenario

const AgentSpec& Scenario::agent(AgentId id) const {
  for (const auto& a : agents)
    if (a.id == id) return a;
  throw ValidationError("unknown agent: " + std::to_string(id));
}

AgentId Scenario::ego() const {
  for (const auto& a : agents)
    if (a.ego) return a.id;
  throw ValidationError("scenario has no ego");
}

LocalState Scenario::spawn_state(const AgentSpec& a) const {
  const Vec2 p(a.spawn.x, a.spawn.y);
  const auto loc = graph.locate(p, a.spawn.heading);
  if (loc.lane < 0) throw ValidationError("agent " + std::to_string(a.id) + ": spawn is off-road");
  LocalState s;
  s.position = p;
  s.heading = wrap_angle(a.spawn.heading);
  s.speed = a.spawn.speed;
  s.lane = loc.lane;
  s.lane_s = loc.s;
  s.lane_offset = loc.d;
  return s;
}

JointTrace Scenario::initial_trace() const {
  JointTrace tr;
  tr.start = 0;
  Frame f;
  for (const auto& a : agents) {
    tr.agents.push_back({a.id, a.ego});
    f.emplace(a.id, spawn_state(a));
  }
  tr.frames.push_back(std::move(f));
  return tr;
}

namespace {

const json& field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ValidationError(where + ": missing field '" + key + "'");
  return j.at(key);
}

double number(const json& j, const char* key, const std::string& where) {
  const json& v = field(j, key, where);
  if (!v.is_number()) throw ValidationError(where + ": field '" + key + "' must be a number");
  return v.get<double>();
}

std::string text(const json& j, const char* key, const std::string& where) {
  const json& v = field(j, key, where);
  if (!v.is_string()) throw ValidationError(where + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

std::string id_text(const json& v, const std::string& where) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw ValidationError(where + ": lane id must be a string");
}

double opt_number(const json& j, const char* key, double def, const std::string& where) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_number()) throw ValidationError(where + ": field '" + key + "' must be a number");
  return j.at(key).get<double>();
}

Goal parse_goal(const json& j, const LaneGraph& g, AgentId agent, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": goal must be an object");
  Goal goal;
  goal.agent = agent;
  if (j.contains("box")) {
    const json& b = j.at("box");
    if (!b.is_array() || b.size() != 4) throw ValidationError(where + ": goal.box must be [xmin,ymin,xmax,ymax]");
    std::array<double, 4> box{};
    for (std::size_t i = 0; i < 4; ++i) {
      if (!b[i].is_number()) throw ValidationError(where + ": goal.box entries must be numbers");
      box[i] = b[i].get<double>();
    }
    if (!(box[0] < box[2] && box[1] < box[3])) throw ValidationError(where + ": goal.box is empty");
    goal.box = box;
  }
  if (j.contains("lane_end")) {
    const json& le = j.at("lane_end");
    std::vector<std::string> ids;
    if (le.is_array())
      for (const auto& x : le) ids.push_back(id_text(x, where));
    else
      ids.push_back(id_text(le, where));
    for (const auto& id : ids) {
      const int li = g.find(id);
      if (li < 0) throw ValidationError(where + ": goal references unknown lane " + id);
      goal.lane_ends.push_back(li);
    }
  }
  if (!goal.box && goal.lane_ends.empty()) throw ValidationError(where + ": goal needs 'box' or 'lane_end'");
  return goal;
}

MacroSpec parse_macro_spec(const json& j, const LaneGraph& g, const std::string& where) {
  MacroSpec m;
  const std::string kind = text(j, "kind", where);
  if (!parse_macro(kind, m.kind)) throw ValidationError(where + ": unknown macro '" + kind + "'");
  m.duration = opt_number(j, "duration", -1.0, where);
  m.speed_factor = opt_number(j, "speed_factor", 1.0, where);
  if (m.speed_factor <= 0.0) throw ValidationError(where + ": speed_factor must be positive");
  if (j.contains("until")) m.until_lane = g.index(id_text(j.at("until"), where));
  if (j.contains("exit")) m.exit_lane = g.index(id_text(j.at("exit"), where));
  return m;
}

bool goal_reachable(const Scenario& sc, const AgentSpec& a) {
  const LocalState s = sc.spawn_state(a);
  for (int li : sc.graph.reachable(s.lane)) {
    const Lane& l = sc.graph.lane(li);
    for (double t = 0.0; t <= l.length(); t += 0.5)
      if (a.goal.contains(sc.graph, l.point(t))) return true;
    if (a.goal.contains(sc.graph, l.point(l.length()))) return true;
  }
  return false;
}

}  // namespace

Scenario load_scenario(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("scenario is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ValidationError("scenario: document must be an object");
  if (!doc.contains("format") || doc.at("format") != "cema-scenario/1")
    throw ValidationError("scenario: field 'format' must be \"cema-scenario/1\"");

  Scenario sc;
  sc.name = text(doc, "name", "scenario");
  if (doc.contains("description")) sc.description = text(doc, "description", "scenario");
  if (doc.contains("max_steps")) {
    if (!doc.at("max_steps").is_number_integer() || doc.at("max_steps").get<int>() < 1)
      throw ValidationError("scenario: max_steps must be a positive integer");
    sc.max_steps = doc.at("max_steps").get<int>();
  }

  const json& jl = field(doc, "lanes", "scenario");
  if (!jl.is_array() || jl.empty()) throw ValidationError("scenario: 'lanes' must be a non-empty array");
  std::vector<Lane> lanes;
  for (std::size_t i = 0; i < jl.size(); ++i) {
    const std::string where = "lanes[" + std::to_string(i) + "]";
    const json& l = jl[i];
    const std::string id = id_text(field(l, "id", where), where);
    const json& cl = field(l, "centerline", where);
    if (!cl.is_array()) throw ValidationError(where + ": centerline must be an array");
    std::vector<Vec2> pts;
    for (const auto& p : cl) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
        throw ValidationError(where + ": centerline points must be [x,y]");
      pts.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
    const double width = number(l, "width", where);
    const double limit = number(l, "speed_limit", where);
    if (width <= 0.0 || limit <= 0.0) throw ValidationError(where + ": width and speed_limit must be positive");
    bool gw = false;
    if (l.contains("give_way")) {
      if (!l.at("give_way").is_boolean()) throw ValidationError(where + ": give_way must be a boolean");
      gw = l.at("give_way").get<bool>();
    }
    lanes.emplace_back(id, std::move(pts), width, limit, gw);
  }

  std::vector<Connection> conns;
  if (doc.contains("connections")) {
    const json& jc = doc.at("connections");
    if (!jc.is_array()) throw ValidationError("scenario: 'connections' must be an array");
    for (std::size_t i = 0; i < jc.size(); ++i) {
      const std::string where = "connections[" + std::to_string(i) + "]";
      Connection c;
      c.from = id_text(field(jc[i], "from", where), where);
      c.to = id_text(field(jc[i], "to", where), where);
      const std::string kind = text(jc[i], "kind", where);
      if (!parse_connection_kind(kind, c.kind)) throw ValidationError(where + ": unknown kind '" + kind + "'");
      conns.push_back(c);
    }
  }
  sc.graph = LaneGraph(std::move(lanes), std::move(conns));

  if (doc.contains("planner")) {
    const json& p = doc.at("planner");
    const std::string where = "planner";
    if (!p.is_object()) throw ValidationError("planner: must be an object");
    sc.planner.budget = static_cast<int>(opt_number(p, "budget", sc.planner.budget, where));
    sc.planner.depth = static_cast<int>(opt_number(p, "depth", sc.planner.depth, where));
    sc.planner.exploration = opt_number(p, "exploration", sc.planner.exploration, where);
    sc.planner.replan_period_s = opt_number(p, "replan_period_s", sc.planner.replan_period_s, where);
    sc.planner.interaction_radius = opt_number(p, "interaction_radius", sc.planner.interaction_radius, where);
    if (p.contains("weights")) {
      const json& w = p.at("weights");
      auto& W = sc.planner.weights;
      W.time_to_goal = opt_number(w, "time_to_goal", W.time_to_goal, "planner.weights");
      W.long_accel = opt_number(w, "long_accel", W.long_accel, "planner.weights");
      W.lat_accel = opt_number(w, "lat_accel", W.lat_accel, "planner.weights");
      W.collision = opt_number(w, "collision", W.collision, "planner.weights");
      W.goal_reached = opt_number(w, "goal_reached", W.goal_reached, "planner.weights");
    }
    if (sc.planner.budget < 1 || sc.planner.depth < 1) throw ValidationError("planner: budget and depth must be >= 1");
  }

  const json& ja = field(doc, "agents", "scenario");
  if (!ja.is_array() || ja.empty()) throw ValidationError("scenario: 'agents' must be a non-empty array");
  std::set<AgentId> ids;
  for (std::size_t i = 0; i < ja.size(); ++i) {
    const std::string where = "agents[" + std::to_string(i) + "]";
    const json& a = ja[i];
    AgentSpec spec;
    const json& jid = field(a, "id", where);
    if (!jid.is_number_integer()) throw ValidationError(where + ": id must be an integer");
    spec.id = jid.get<int>();
    if (!ids.insert(spec.id).second) throw ValidationError(where + ": duplicate agent id");
    if (a.contains("ego")) {
      if (!a.at("ego").is_boolean()) throw ValidationError(where + ": ego must be a boolean");
      spec.ego = a.at("ego").get<bool>();
    }
    const std::string ctrl = a.contains("controller") ? text(a, "controller", where)
                                                      : std::string(spec.ego ? "ego-planner" : "predicted-follower");
    if (ctrl == "ego-planner")
      spec.controller = Controller::EgoPlanner;
    else if (ctrl == "scripted")
      spec.controller = Controller::Scripted;
    else if (ctrl == "predicted-follower")
      spec.controller = Controller::PredictedFollower;
    else
      throw ValidationError(where + ": unknown controller '" + ctrl + "'");
    if (spec.ego != (spec.controller == Controller::EgoPlanner))
      throw ValidationError(where + ": the ego and only the ego uses the ego-planner controller");
    const json& sp = field(a, "spawn", where);
    spec.spawn = {number(sp, "x", where + ".spawn"), number(sp, "y", where + ".spawn"),
                  number(sp, "heading", where + ".spawn"), number(sp, "speed", where + ".spawn")};
    if (spec.spawn.speed < 0.0) throw ValidationError(where + ": spawn speed must be >= 0");
    spec.goal = parse_goal(field(a, "goal", where), sc.graph, spec.id, where + ".goal");
    if (a.contains("macros")) {
      const json& jm = a.at("macros");
      if (!jm.is_array()) throw ValidationError(where + ": macros must be an array");
      for (std::size_t k = 0; k < jm.size(); ++k)
        spec.macros.push_back(parse_macro_spec(jm[k], sc.graph, where + ".macros[" + std::to_string(k) + "]"));
    }
    sc.agents.push_back(std::move(spec));
  }
  if (std::count_if(sc.agents.begin(), sc.agents.end(), [](const AgentSpec& a) { return a.ego; }) != 1)
    throw ValidationError("scenario: exactly one agent must be the ego");

  std::vector<LocalState> spawns;
  for (const auto& a : sc.agents) {
    spawns.push_back(sc.spawn_state(a));
    if (!goal_reachable(sc, a)) throw ValidationError("agent " + std::to_string(a.id) + ": unreachable goal");
  }
  for (std::size_t i = 0; i < spawns.size(); ++i)
    for (std::size_t j = i + 1; j < spawns.size(); ++j)
      if ((spawns[i].position - spawns[j].position).norm() < 2.5)
        throw ValidationError("overlapping spawns: agents " + std::to_string(sc.agents[i].id) + " and " +
                              std::to_string(sc.agents[j].id));
  return sc;
}

std::string serialize(const Scenario& sc) {
  json doc;
  doc["format"] = "cema-scenario/1";
  doc["name"] = sc.name;
  doc["description"] = sc.description;
  doc["max_steps"] = sc.max_steps;
  json lanes = json::array();
  for (const auto& l : sc.graph.lanes()) {
    json cl = json::array();
    for (const auto& p : l.centerline()) cl.push_back({p.x(), p.y()});
    json jl = {{"id", l.id()}, {"centerline", cl}, {"width", l.width()}, {"speed_limit", l.speed_limit()}};
    if (l.give_way()) jl["give_way"] = true;
    lanes.push_back(jl);
  }
  doc["lanes"] = lanes;
  json conns = json::array();
  for (const auto& c : sc.graph.connections())
    conns.push_back({{"from", c.from}, {"to", c.to}, {"kind", std::string(to_string(c.kind))}});
  doc["connections"] = conns;
  const auto& P = sc.planner;
  doc["planner"] = {{"budget", P.budget},
                    {"depth", P.depth},
                    {"exploration", P.exploration},
                    {"replan_period_s", P.replan_period_s},
                    {"interaction_radius", P.interaction_radius},
                    {"weights",
                     {{"time_to_goal", P.weights.time_to_goal},
                      {"long_accel", P.weights.long_accel},
                      {"lat_accel", P.weights.lat_accel},
                      {"collision", P.weights.collision},
                      {"goal_reached", P.weights.goal_reached}}}};
  json agents = json::array();
  for (const auto& a : sc.agents) {
    json goal = json::object();
    if (a.goal.box) goal["box"] = *a.goal.box;
    if (!a.goal.lane_ends.empty()) {
      json ids = json::array();
      for (int li : a.goal.lane_ends) ids.push_back(sc.graph.lane(li).id());
      goal["lane_end"] = ids;
    }
    json ja = {{"id", a.id},
               {"ego", a.ego},
               {"controller", std::string(to_string(a.controller))},
               {"spawn", {{"x", a.spawn.x}, {"y", a.spawn.y}, {"heading", a.spawn.heading}, {"speed", a.spawn.speed}}},
               {"goal", goal}};
    if (!a.macros.empty()) {
      json ms = json::array();
      for (const auto& m : a.macros) {
        json jm = {{"kind", std::string(to_string(m.kind))}};
        if (m.duration >= 0.0) jm["duration"] = m.duration;
        if (m.speed_factor != 1.0) jm["speed_factor"] = m.speed_factor;
        if (m.until_lane >= 0) jm["until"] = sc.graph.lane(m.until_lane).id();
        if (m.exit_lane >= 0) jm["exit"] = sc.graph.lane(m.exit_lane).id();
        ms.push_back(jm);
      }
      ja["macros"] = ms;
    }
    agents.push_back(ja);
  }
  doc["agents"] = agents;
  return doc.dump(2);
}

}  // namespace cema
