#include "support.hpp"

#include "cema/behavior.hpp"
#include "cema/world.hpp"

#include <doctest.h>

#include <random>

using namespace cema;
using namespace cema::testing;

TEST_CASE("minimal document loads with one agent and no connections") {
  const Scenario s = load(straight_road());
  CHECK(s.agents.size() == 1);
  CHECK(s.graph.connections().empty());
  CHECK(s.graph.size() == 1);
  CHECK(s.ego() == 0);
}

TEST_CASE("S1 document matches the cut-in layout") {
  const Scenario s = scenario("s1");
  CHECK(s.agents.size() == 2);
  CHECK(s.agent(0).ego);
  CHECK_FALSE(s.agent(1).ego);
  const int r1 = s.graph.index("R1");
  CHECK(s.graph.left(r1) == s.graph.index("L1"));
  CHECK(s.graph.turn_from(r1) == s.graph.index("T"));
  // non-ego starts in the left lane ahead of the ego
  const LocalState e = s.spawn_state(s.agent(0)), v = s.spawn_state(s.agent(1));
  CHECK(v.position.x() > e.position.x());
  CHECK(s.graph.lane(v.lane).id() == "L1");
}

TEST_CASE("goal off the road network is rejected") {
  auto doc = straight_road();
  doc["agents"][0]["goal"] = {{"box", {50, 40, 60, 50}}};
  CHECK_THROWS_WITH_AS(load(doc), doctest::Contains("unreachable goal"), ValidationError);
}

TEST_CASE("malformed documents fail validation") {
  auto doc = straight_road();
  doc["format"] = "other";
  CHECK_THROWS_AS(load(doc), ValidationError);
  doc = straight_road();
  doc["agents"][0]["ego"] = false;
  CHECK_THROWS_AS(load(doc), ValidationError);
  doc = straight_road();
  doc["connections"] = {{{"from", "A"}, {"to", "Z"}, {"kind", "successor"}}};
  CHECK_THROWS_AS(load(doc), ValidationError);
  CHECK_THROWS_AS(load_scenario("{not json"), ValidationError);
}

TEST_CASE("serialize then load is the identity") {
  for (const char* name : {"s1", "s1_scaled", "s3"}) {
    const Scenario s = scenario(name);
    const Scenario back = load_scenario(serialize(s));
    CHECK(back == s);
  }
  const Scenario m = load(straight_road());
  CHECK(load_scenario(serialize(m)) == m);
}

TEST_CASE("lane geometry") {
  const Lane l("X", {Vec2(0, 0), Vec2(20, 0)}, 3.5, 10.0);
  CHECK(l.length() == doctest::Approx(20.0));
  const auto p = l.project(Vec2(5, 1));
  CHECK(p.s == doctest::Approx(5.0));
  CHECK(p.d == doctest::Approx(1.0));
  CHECK((l.at(5.0, 1.0) - Vec2(5, 1)).norm() < 1e-9);
  CHECK(l.curvature(10.0) == 0.0);

  // smoothed polylines still pass through their control points
  const Lane c("C", {Vec2(0, 0), Vec2(10, 0), Vec2(20, 10), Vec2(20, 30)}, 3.5, 10.0);
  for (const auto& v : c.centerline()) CHECK(c.project(v).dist < 1e-6);
  CHECK(c.project(c.point(12.0)).s == doctest::Approx(12.0).epsilon(1e-3));
}

TEST_CASE("subsequence_match on labels") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  SUBCASE("reflexive") { CHECK(subsequence_match(t, t, s.graph)); }
  SUBCASE("empty needle") { CHECK(subsequence_match(JointTrace{}, t, s.graph)); }
  SUBCASE("lane change against a straight haystack") {
    const auto labels = label_actions(t, t.ego(), s.graph);
    const auto runs = [&] {
      std::vector<std::pair<int, int>> r;
      for (int k = labels.start; k <= labels.end(); ++k)
        if (labels.at(k).maneuver == Maneuver::LaneChangeLeft) {
          if (r.empty() || r.back().second != k - 1) r.emplace_back(k, k);
          else r.back().second = k;
        }
      return r;
    }();
    REQUIRE(runs.size() == 1);
    const JointTrace needle = t.slice(runs[0].first, runs[0].second);

    Engine eng(s.graph);
    for (const auto& a : s.agents) {
      eng.add_agent(a.id, a.ego, a.goal, s.spawn_state(a));
      eng.set_plan(a.id, a.ego ? std::vector<MacroSpec>{MacroSpec{Macro::Continue, 20.0}} : a.macros, !a.ego);
    }
    eng.set_roster(t.agents);
    for (int k = 0; k < t.end(); ++k) eng.step();
    const JointTrace& straight = eng.trace();
    CHECK_FALSE(subsequence_match(needle, straight, s.graph));
    CHECK(subsequence_match(needle, t, s.graph));
  }
}

TEST_CASE("label-level subsequence is transitive") {
  std::mt19937 gen(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> c(60);
    for (auto& x : c) x = static_cast<int>(gen() % 3);
    const int bs = static_cast<int>(gen() % 20), bl = 10 + static_cast<int>(gen() % 30);
    const std::vector<int> b(c.begin() + bs, c.begin() + bs + bl);
    const int as = bs + static_cast<int>(gen() % 5), al = 1 + static_cast<int>(gen() % 5);
    const std::vector<int> a(c.begin() + as, c.begin() + as + al);
    if (subsequence_match(a, as, b, bs) && subsequence_match(b, bs, c, 0)) CHECK(subsequence_match(a, as, c, 0));
  }
}

TEST_CASE("trace validation and concat") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  CHECK_NOTHROW(t.validate());
  const JointTrace a = t.slice(0, 50), b = t.slice(50, 100);
  const JointTrace c = concat(a, b);
  CHECK(c == t.slice(0, 100));
  CHECK_THROWS(concat(t.slice(0, 10), t.slice(20, 30)));
}

TEST_CASE("positions stay within a lane width of some centerline") {
  for (const char* name : {"s1", "s3"}) {
    const Scenario s = scenario(name);
    const JointTrace t = service::factual_trace(s, 21);
    for (const auto& f : t.frames)
      for (const auto& [id, st] : f) {
        double best = 1e9;
        for (const auto& l : s.graph.lanes()) best = std::min(best, l.project(st.position).dist);
        const double w = s.graph.lane(st.lane).width();
        CHECK(best <= w);
      }
  }
}
