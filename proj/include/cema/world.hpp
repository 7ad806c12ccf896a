#ifndef CEMA_WORLD_HPP
#define CEMA_WORLD_HPP

#include "cema/core.hpp"

#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cema {

class Lane {
 public:
  Lane() = default;
  Lane(std::string id, std::vector<Vec2> centerline, double width, double speed_limit, bool give_way = false);

  struct Projection {
    double s = 0.0;
    double d = 0.0;  // signed, left positive
    double dist = 0.0;
  };

  const std::string& id() const { return id_; }
  const std::vector<Vec2>& centerline() const { return control_; }
  const std::vector<Vec2>& points() const { return pts_; }
  double width() const { return width_; }
  double speed_limit() const { return speed_limit_; }
  bool give_way() const { return give_way_; }
  double length() const { return cum_.back(); }

  Vec2 point(double s) const;
  double heading(double s) const;
  Vec2 normal(double s) const;
  double curvature(double s) const;
  Vec2 at(double s, double d) const { return point(s) + d * normal(s); }
  Projection project(const Vec2& p) const;

  bool operator==(const Lane& o) const {
    return id_ == o.id_ && control_ == o.control_ && width_ == o.width_ && speed_limit_ == o.speed_limit_ &&
           give_way_ == o.give_way_;
  }

 private:
  std::size_t segment(double s) const;

  std::string id_;
  std::vector<Vec2> control_;
  double width_ = 3.5;
  double speed_limit_ = 10.0;
  bool give_way_ = false;
  std::vector<Vec2> pts_;
  std::vector<double> cum_;
};

enum class ConnectionKind { Successor, LeftAdjacent, RightAdjacent, TurnLeft, TurnRight, Straight };

std::string_view to_string(ConnectionKind k);
bool parse_connection_kind(std::string_view s, ConnectionKind& out);
inline bool is_longitudinal(ConnectionKind k) {
  return k != ConnectionKind::LeftAdjacent && k != ConnectionKind::RightAdjacent;
}

struct Connection {
  std::string from;
  std::string to;
  ConnectionKind kind = ConnectionKind::Successor;
  bool operator==(const Connection&) const = default;
};

class LaneGraph {
 public:
  struct Edge {
    int to;
    ConnectionKind kind;
  };
  struct Location {
    int lane = -1;
    double s = 0.0;
    double d = 0.0;
  };

  LaneGraph() = default;
  LaneGraph(std::vector<Lane> lanes, std::vector<Connection> connections);

  int size() const { return static_cast<int>(lanes_.size()); }
  const Lane& lane(int i) const { return lanes_[static_cast<std::size_t>(i)]; }
  const std::vector<Lane>& lanes() const { return lanes_; }
  const std::vector<Connection>& connections() const { return connections_; }
  int find(std::string_view id) const;
  int index(std::string_view id) const;

  int left(int i) const { return left_[static_cast<std::size_t>(i)]; }
  int right(int i) const { return right_[static_cast<std::size_t>(i)]; }
  const std::vector<Edge>& out(int i) const { return out_[static_cast<std::size_t>(i)]; }
  int straight_next(int i) const;
  // Target of a turn connection leaving lane i, or -1.
  int turn_from(int i) const;
  bool is_connector(int i) const { return connector_[static_cast<std::size_t>(i)] != 0; }
  int connector_kind_sign(int i) const { return connector_[static_cast<std::size_t>(i)]; }

  // Lanes reachable from `from` over longitudinal and adjacency connections.
  std::vector<int> reachable(int from) const;
  Location locate(const Vec2& p, std::optional<double> heading = std::nullopt) const;

  bool operator==(const LaneGraph& o) const { return lanes_ == o.lanes_ && connections_ == o.connections_; }

 private:
  std::vector<Lane> lanes_;
  std::vector<Connection> connections_;
  std::unordered_map<std::string, int> index_;
  std::vector<int> left_, right_;
  std::vector<std::vector<Edge>> out_;
  std::vector<int> connector_;  // -1 turn right, +1 turn left, 0 otherwise
};

struct LocalState {
  Vec2 position = Vec2::Zero();
  double heading = 0.0;
  double speed = 0.0;
  double accel = 0.0;
  int lane = -1;
  int timestep = 0;
  double lane_s = 0.0;
  double lane_offset = 0.0;
  bool operator==(const LocalState&) const = default;
};

struct Goal {
  AgentId agent = -1;
  std::optional<std::array<double, 4>> box;  // xmin, ymin, xmax, ymax
  std::vector<int> lane_ends;

  bool contains(const LaneGraph& g, const Vec2& p) const;
  Vec2 anchor(const LaneGraph& g) const;
  std::string key(const LaneGraph& g) const;
  bool operator==(const Goal&) const = default;
};

constexpr double kLaneEndGoalLength = 10.0;

struct AgentInfo {
  AgentId id = 0;
  bool ego = false;
  bool operator==(const AgentInfo&) const = default;
};

using Frame = std::map<AgentId, LocalState>;

struct JointTrace {
  std::vector<AgentInfo> agents;
  int start = 0;
  std::vector<Frame> frames;

  bool empty() const { return frames.empty(); }
  int end() const { return start + static_cast<int>(frames.size()) - 1; }
  bool covers(int t) const { return t >= start && t <= end(); }
  const Frame& at(int t) const { return frames.at(static_cast<std::size_t>(t - start)); }
  AgentId ego() const;
  bool has_agent(AgentId id) const;
  const LocalState* state(AgentId id, int t) const;
  // Contiguous states of one agent from its first to last presence within [from, to].
  std::vector<LocalState> states_of(AgentId id, int from, int to) const;
  std::vector<LocalState> states_of(AgentId id) const { return states_of(id, start, end()); }
  JointTrace slice(int from, int to) const;
  void validate() const;
  bool operator==(const JointTrace&) const = default;
};

// Frames of `tail` replace those of `head` from tail.start onward.
JointTrace concat(const JointTrace& head, const JointTrace& tail);

struct MacroSpec {
  Macro kind = Macro::Continue;
  double duration = -1.0;  // seconds; negative selects the macro default
  double speed_factor = 1.0;
  int until_lane = -1;
  int exit_lane = -1;
  bool operator==(const MacroSpec&) const = default;
};

enum class Controller { EgoPlanner, Scripted, PredictedFollower };
std::string_view to_string(Controller c);

struct Spawn {
  double x = 0.0, y = 0.0, heading = 0.0, speed = 0.0;
  bool operator==(const Spawn&) const = default;
};

struct AgentSpec {
  AgentId id = 0;
  bool ego = false;
  Controller controller = Controller::PredictedFollower;
  Spawn spawn;
  Goal goal;
  std::vector<MacroSpec> macros;
  bool operator==(const AgentSpec&) const = default;
};

struct RewardWeights {
  double time_to_goal = -0.05;
  double long_accel = -0.1;
  double lat_accel = -0.1;
  double collision = -1000.0;
  double goal_reached = 10.0;
  bool operator==(const RewardWeights&) const = default;
};

struct PlannerConfig {
  int budget = 200;
  int depth = 4;
  double exploration = 1.4;
  RewardWeights weights;
  double replan_period_s = 2.0;
  double interaction_radius = 75.0;
  bool operator==(const PlannerConfig&) const = default;
};

struct Scenario {
  std::string name;
  std::string description;
  LaneGraph graph;
  std::vector<AgentSpec> agents;
  PlannerConfig planner;
  int max_steps = 400;

  const AgentSpec& agent(AgentId id) const;
  AgentId ego() const;
  JointTrace initial_trace() const;
  LocalState spawn_state(const AgentSpec& a) const;
  bool operator==(const Scenario&) const = default;
};

Scenario load_scenario(std::string_view document);
std::string serialize(const Scenario& scenario);

// Label-level containment: the needle's collapsed runs must appear contiguously in the
// haystack's collapsed runs over the needle's span. Sequences are indexed from their start offsets.
template <typename Label>
bool subsequence_match(const std::vector<Label>& needle, int needle_start, const std::vector<Label>& haystack,
                       int haystack_start) {
  if (needle.empty()) return true;
  const int lo = needle_start;
  const int hi = needle_start + static_cast<int>(needle.size()) - 1;
  if (lo < haystack_start || hi > haystack_start + static_cast<int>(haystack.size()) - 1) return false;
  auto collapse = [](auto first, auto last) {
    std::vector<Label> runs;
    for (auto it = first; it != last; ++it)
      if (runs.empty() || !(runs.back() == *it)) runs.push_back(*it);
    return runs;
  };
  const auto a = collapse(needle.begin(), needle.end());
  const auto h0 = haystack.begin() + (lo - haystack_start);
  const auto b = collapse(h0, h0 + static_cast<long>(needle.size()));
  if (a.size() > b.size()) return false;
  for (std::size_t off = 0; off + a.size() <= b.size(); ++off) {
    bool ok = true;
    for (std::size_t i = 0; i < a.size() && ok; ++i) ok = a[i] == b[off + i];
    if (ok) return true;
  }
  return false;
}

}  // namespace cema

#endif
