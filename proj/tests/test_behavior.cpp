#include "support.hpp"

#include "cema/behavior.hpp"

#include <doctest.h>

#include <algorithm>
#include <map>

using namespace cema;
using namespace cema::testing;

namespace {

nlohmann::json two_lane_road() {
  auto doc = straight_road(300.0, 10.0);
  doc["lanes"].push_back({{"id", "B"}, {"centerline", {{0, 3.5}, {300, 3.5}}}, {"width", 3.5}, {"speed_limit", 10.0}});
  doc["connections"] = {{{"from", "A"}, {"to", "B"}, {"kind", "left-adjacent"}},
                        {{"from", "B"}, {"to", "A"}, {"kind", "right-adjacent"}}};
  return doc;
}

// Straight lane into a quarter circle of radius 10 turning right.
nlohmann::json turn_only() {
  nlohmann::json arc = nlohmann::json::array();
  for (int k = 0; k <= 18; ++k) {
    const double th = M_PI / 2 * k / 18;
    arc.push_back({60 + 10 * std::sin(th), -10 + 10 * std::cos(th)});
  }
  return {{"format", "cema-scenario/1"},
          {"name", "turn-only"},
          {"lanes",
           {{{"id", "A"}, {"centerline", {{0, 0}, {60, 0}}}, {"width", 3.5}, {"speed_limit", 10.0}},
            {{"id", "T"}, {"centerline", arc}, {"width", 3.5}, {"speed_limit", 5.0}},
            {{"id", "S"}, {"centerline", {{70, -10}, {70, -60}}}, {"width", 3.5}, {"speed_limit", 10.0}}}},
          {"connections",
           {{{"from", "A"}, {"to", "T"}, {"kind", "junction-turn-right"}}, {{"from", "T"}, {"to", "S"}, {"kind", "successor"}}}},
          {"agents",
           {{{"id", 0},
             {"ego", true},
             {"spawn", {{"x", 10}, {"y", 0}, {"heading", 0}, {"speed", 8}}},
             {"goal", {{"lane_end", "S"}}}}}}};
}

JointTrace as_trace(const std::vector<LocalState>& states) {
  JointTrace t;
  t.agents = {AgentInfo{0, true}};
  t.start = states.front().timestep;
  for (const auto& s : states) t.frames.push_back({{0, s}});
  return t;
}

// Largest longitudinal and lateral acceleration by second differences of position.
std::pair<double, double> max_accels(const std::vector<LocalState>& st) {
  double lon = 0.0, lat = 0.0;
  for (std::size_t i = 1; i + 1 < st.size(); ++i) {
    const Vec2 acc = (st[i + 1].position - 2.0 * st[i].position + st[i - 1].position) / (kDt * kDt);
    const Vec2 t(std::cos(st[i].heading), std::sin(st[i].heading));
    const Vec2 n(-t.y(), t.x());
    lon = std::max(lon, std::abs(t.dot(acc)));
    lat = std::max(lat, std::abs(n.dot(acc)));
  }
  return {lon, lat};
}

}  // namespace

TEST_CASE("action names round-trip") {
  for (Maneuver m : kAllManeuvers) {
    Maneuver back{};
    REQUIRE(parse_maneuver(to_string(m), back));
    CHECK(back == m);
    CHECK(is_action_name(to_string(m)));
  }
  for (Macro m : kAllMacros) {
    Macro back{};
    REQUIRE(parse_macro(to_string(m), back));
    CHECK(back == m);
  }
  CHECK(to_string(Maneuver::GiveWay) == "give-way");
  CHECK(to_string(Macro::ChangeLeft) == "ChangeLeft");
  CHECK_FALSE(is_action_name("changeleft"));
}

TEST_CASE("applicable macros on a single straight lane") {
  const Scenario s = load(straight_road());
  const auto m = applicable_macros(s.spawn_state(s.agent(0)), s.graph);
  CHECK(std::set<Macro>(m.begin(), m.end()) == std::set<Macro>{Macro::Continue, Macro::Stop});
}

TEST_CASE("S1 ego in the right lane may change left") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  const LocalState* st = t.state(0, 40);
  REQUIRE(st);
  const auto m = applicable_macros(*st, s.graph);
  CHECK(std::find(m.begin(), m.end(), Macro::ChangeLeft) != m.end());
}

TEST_CASE("turn-only junction offers Exit and Continue stays before it") {
  const Scenario s = load(turn_only());
  const LocalState start = s.spawn_state(s.agent(0));
  const auto m = applicable_macros(start, s.graph);
  CHECK(std::find(m.begin(), m.end(), Macro::Exit) != m.end());
  const auto cont = synthesize(MacroSpec{Macro::Continue, 20.0}, start, s.graph);
  for (const auto& st : cont) CHECK(s.graph.lane(st.lane).id() == "A");
  const auto ex = synthesize(MacroSpec{Macro::Exit}, start, s.graph);
  CHECK(s.graph.lane(ex.back().lane).id() != "A");
}

TEST_CASE("Stop from 10 m/s") {
  const Scenario s = load(straight_road(300.0, 10.0));
  const auto st = synthesize(MacroSpec{Macro::Stop}, s.spawn_state(s.agent(0)), s.graph);
  for (std::size_t i = 1; i < st.size(); ++i) CHECK(st[i].speed <= st[i - 1].speed + 1e-12);
  CHECK(st.back().speed <= 0.1);
}

TEST_CASE("Continue at the speed limit is constant speed and straight") {
  const Scenario s = load(straight_road(300.0, 10.0));
  const auto st = synthesize(MacroSpec{Macro::Continue}, s.spawn_state(s.agent(0)), s.graph);
  REQUIRE(st.size() > 10);
  for (const auto& x : st) {
    CHECK(x.speed == doctest::Approx(10.0).epsilon(1e-6));
    CHECK(std::abs(x.position.y()) < 1e-9);
  }
}

TEST_CASE("ChangeLeft at 10 m/s moves one lane width within lateral limits") {
  const Scenario s = load(two_lane_road());
  const LocalState start = s.spawn_state(s.agent(0));
  const auto st = synthesize(MacroSpec{Macro::ChangeLeft}, start, s.graph);
  CHECK(st.back().position.y() - start.position.y() == doctest::Approx(3.5).epsilon(0.1 / 3.5));
  const auto [lon, lat] = max_accels(st);
  CHECK(lat <= 4.0);
  CHECK(lon <= Kinematics{}.max_accel + 1e-6);
}

TEST_CASE("constant-speed single-lane trace is all lane-follow Continue") {
  const Scenario s = load(straight_road(300.0, 10.0));
  const auto st = synthesize(MacroSpec{Macro::Continue, 5.0}, s.spawn_state(s.agent(0)), s.graph);
  const ActionLabels l = label_actions(as_trace(st), 0, s.graph);
  for (const auto& x : l.labels) CHECK(x == ActionLabel{Maneuver::LaneFollow, Macro::Continue});
}

TEST_CASE("synthesize then label recovers the macro") {
  const Scenario two = load(two_lane_road());
  const Scenario turn = load(turn_only());
  struct Case {
    const Scenario* s;
    Macro m;
    LocalState start;
  };
  LocalState right_start = two.spawn_state(two.agent(0));
  LocalState left_start = right_start;
  left_start.position.y() = 3.5;
  left_start.lane = two.graph.index("B");
  left_start.lane_offset = 0.0;
  const std::vector<Case> cases{{&two, Macro::Continue, right_start},   {&two, Macro::ChangeLeft, right_start},
                                {&two, Macro::ChangeRight, left_start}, {&two, Macro::Stop, right_start},
                                {&turn, Macro::Exit, turn.spawn_state(turn.agent(0))}};
  for (const auto& c : cases) {
    CAPTURE(to_string(c.m));
    const auto st = synthesize(MacroSpec{c.m}, c.start, c.s->graph);
    const ActionLabels l = label_actions(as_trace(st), 0, c.s->graph);
    const auto hits = std::count_if(l.labels.begin(), l.labels.end(), [&](const ActionLabel& x) { return x.macro == c.m; });
    CHECK(static_cast<double>(hits) >= 0.8 * static_cast<double>(l.labels.size()));
    const auto [lon, lat] = max_accels(st);
    CHECK(lon <= Kinematics{}.max_accel + 1e-6);
    CHECK(lat <= Kinematics{}.max_lat_accel + 1e-6);
  }
}

TEST_CASE("stopped run relabels as stop") {
  const Scenario s = load(straight_road(300.0, 10.0));
  const auto st = synthesize(MacroSpec{Macro::Stop}, s.spawn_state(s.agent(0)), s.graph);
  const ActionLabels l = label_actions(as_trace(st), 0, s.graph);
  int stopped = 0;
  for (std::size_t i = 0; i < st.size(); ++i)
    if (st[i].speed <= 0.1) {
      ++stopped;
      CHECK(l.labels[i] == ActionLabel{Maneuver::Stop, Macro::Stop});
    }
  CHECK(stopped > 0);
}

TEST_CASE("S1 ego has one contiguous lane-change-left run crossing the boundary") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  const ActionLabels l = label_actions(t, 0, s.graph);
  int first = -1, last = -1, runs = 0;
  for (int k = l.start; k <= l.end(); ++k) {
    const bool on = l.at(k) == ActionLabel{Maneuver::LaneChangeLeft, Macro::ChangeLeft};
    if (on && (k == l.start || !(l.at(k - 1) == l.at(k)))) ++runs;
    if (on) {
      if (first < 0) first = k;
      last = k;
    }
  }
  CHECK(runs == 1);
  REQUIRE(first >= 0);
  // the lane-boundary crossing (y = 1.75) happens inside the run
  int cross = -1;
  for (int k = t.start; k < t.end(); ++k)
    if (t.state(0, k)->position.y() < 1.75 && t.state(0, k + 1)->position.y() >= 1.75) cross = k;
  CHECK(cross >= first);
  CHECK(cross <= last);
}

TEST_CASE("plan_to_goal routes through the junction") {
  const Scenario s = scenario("s1");
  const LocalState v = s.spawn_state(s.agent(1));
  const auto plan = plan_to_goal(s.graph, v.lane, v.lane_s, s.agent(1).goal);
  std::vector<Macro> kinds;
  for (const auto& m : plan) kinds.push_back(m.kind);
  CHECK(std::find(kinds.begin(), kinds.end(), Macro::ChangeRight) != kinds.end());
  CHECK(std::find(kinds.begin(), kinds.end(), Macro::Exit) != kinds.end());
}
