#ifndef CEMA_TRAFFIC_HPP
#define CEMA_TRAFFIC_HPP

#include "cema/behavior.hpp"

#include <deque>
#include <limits>
#include <vector>

namespace cema {

// Quintic in time with general boundary conditions.
struct Quintic {
  double c[6] = {0, 0, 0, 0, 0, 0};
  double T = 0.0;

  static Quintic fit(double d0, double v0, double a0, double d1, double T);
  double pos(double t) const;
  double vel(double t) const;
  double acc(double t) const;
};

struct Body {
  int lane = -1;
  double s = 0.0;
  double d = 0.0;
  double v = 0.0;
  double a = 0.0;
  double d_rate = 0.0;
  double d_acc = 0.0;
  bool profile_on = false;
  Quintic profile;
  double profile_t = 0.0;
  double profile_shift = 0.0;
  int target_lane = -1;
  std::deque<int> route;
};

struct MacroRun {
  MacroSpec spec;
  bool active = false;
  int elapsed = 0;
  int phase = 0;
  int phase_steps = 0;
  int side = 0;  // +1 left, -1 right
  int connector = -1;
  int origin_lane = -1;
  bool switched = false;
};

struct AgentSlot {
  AgentId id = 0;
  bool ego = false;
  Goal goal;
  Body body;
  MacroRun run;
  std::deque<MacroSpec> plan;
  bool complete_to_goal = true;
  bool active = true;
  bool exits_at_goal = true;
  bool exit_pending = false;
  int goal_time = -1;
  int macros_done = 0;
};

class Engine {
 public:
  Engine(const LaneGraph& graph, Kinematics kin = {}, int start_time = 0);

  void add_agent(AgentId id, bool ego, const Goal& goal, const LocalState& state);
  void set_plan(AgentId id, const std::vector<MacroSpec>& plan, bool complete_to_goal = true);
  void push_macro(AgentId id, const MacroSpec& m);
  void clear_plan(AgentId id);
  void set_exits_at_goal(AgentId id, bool v) { slot(id).exits_at_goal = v; }
  void set_goal(AgentId id, const Goal& g) { slot(id).goal = g; }
  void set_roster(const std::vector<AgentInfo>& roster) { trace_.agents = roster; }
  void set_recording(bool on) { recording_ = on; }

  // Idle means the current macro has finished and no further macro is queued.
  bool idle(AgentId id) const;
  bool interruptible(AgentId id) const;
  Macro current_macro(AgentId id) const;
  int macros_done(AgentId id) const { return slot(id).macros_done; }
  bool active(AgentId id) const { return slot(id).active; }
  int goal_time(AgentId id) const { return slot(id).goal_time; }
  bool has(AgentId id) const;

  void step();
  int now() const { return now_; }
  LocalState state_of(AgentId id) const;
  Frame frame() const;
  const JointTrace& trace() const { return trace_; }
  std::vector<AgentId> ids() const;
  const std::vector<AgentSlot>& slots() const { return slots_; }
  const LaneGraph& graph() const { return *graph_; }
  const Kinematics& kinematics() const { return kin_; }
  // Copy without recorded frames, for planning from the current state.
  Engine snapshot() const;

 private:
  AgentSlot& slot(AgentId id);
  const AgentSlot& slot(AgentId id) const;
  void begin_macro(AgentSlot& a);
  void start_profile(Body& b, double target, double T);
  double control(std::size_t i);
  double lead_gap(std::size_t i, double& lead_speed) const;
  bool gap_clear(std::size_t i, int target) const;
  bool give_way_clear(std::size_t i) const;
  bool end_is_open(const AgentSlot& a, int lane) const;
  void integrate(AgentSlot& a, double acc);
  void advance_lane(AgentSlot& a);
  void finish_checks(AgentSlot& a);
  void record();

  const LaneGraph* graph_;
  Kinematics kin_;
  int now_;
  std::vector<AgentSlot> slots_;
  JointTrace trace_;
  bool recording_ = true;
};

}  // namespace cema

#endif
