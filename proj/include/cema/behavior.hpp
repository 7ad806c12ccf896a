#ifndef CEMA_BEHAVIOR_HPP
#define CEMA_BEHAVIOR_HPP

#include "cema/world.hpp"

#include <optional>
#include <stdexcept>
#include <vector>

namespace cema {

struct Kinematics {
  double max_accel = 5.0;
  double max_lat_accel = 4.0;
  double comfort_accel = 2.0;
  double comfort_decel = 2.5;
  double stop_decel = 3.0;
  double headway = 1.2;
  double min_gap = 2.0;
  double length = 2.5;
  double speed_gain = 0.8;
  double lane_change_time = 4.0;
  double continue_time = 2.0;
  double stop_hold = 1.0;
  double lane_change_patience = 6.0;
  double gap_accept = 8.0;
  double give_way_gap = 2.0;
};

class InfeasibleMacro : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ActionLabel {
  Maneuver maneuver = Maneuver::LaneFollow;
  Macro macro = Macro::Continue;
  bool operator==(const ActionLabel&) const = default;
};

struct ActionLabels {
  AgentId agent = 0;
  int start = 0;
  std::vector<ActionLabel> labels;

  bool empty() const { return labels.empty(); }
  int end() const { return start + static_cast<int>(labels.size()) - 1; }
  bool covers(int t) const { return t >= start && t <= end(); }
  const ActionLabel& at(int t) const { return labels.at(static_cast<std::size_t>(t - start)); }
};

// Applicable macros at a state; empty when the state already lies in `goal`.
std::vector<Macro> applicable_macros(const LocalState& state, const LaneGraph& graph,
                                     const Goal* goal = nullptr, const Kinematics& kin = {});

// Start state included as the first element.
std::vector<LocalState> synthesize(const MacroSpec& macro, const LocalState& start, const LaneGraph& graph,
                                   const Kinematics& kin = {});

ActionLabels label_actions(const JointTrace& trace, AgentId agent, const LaneGraph& graph);

bool subsequence_match(const JointTrace& needle, const JointTrace& haystack, const LaneGraph& graph);

// Shortest lane route to the goal turned into macros; empty when already inside it.
std::vector<MacroSpec> plan_to_goal(const LaneGraph& graph, int lane, double s, const Goal& goal);

}  // namespace cema

#endif
