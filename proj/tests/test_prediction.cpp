#include "support.hpp"

#include "cema/prediction.hpp"
#include "cema/simulator.hpp"

#include <doctest.h>

#include <cmath>
#include <deque>
#include <random>
#include <set>

using namespace cema;
using namespace cema::testing;

namespace {

// Terminal lanes reachable over any connection, by breadth-first search on the raw connection list.
std::set<std::string> reachable_terminals(const Scenario& s, const std::string& from) {
  std::set<std::string> seen{from}, out;
  std::deque<std::string> q{from};
  while (!q.empty()) {
    const std::string l = q.front();
    q.pop_front();
    bool has_next = false;
    for (const auto& c : s.graph.connections()) {
      if (c.from != l) continue;
      if (is_longitudinal(c.kind)) has_next = true;
      if (seen.insert(c.to).second) q.push_back(c.to);
    }
    if (!has_next) out.insert(l);
  }
  return out;
}

double binom_pmf(int n, int k, double p) {
  return std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) +
                  (n - k) * std::log1p(-p));
}

// Central interval holding at least `level` of the Binomial(n, p) mass.
std::pair<int, int> binom_band(int n, double p, double level) {
  const double tail = (1.0 - level) / 2.0;
  int lo = 0, hi = n;
  double acc = 0.0;
  while (acc + binom_pmf(n, lo, p) <= tail) acc += binom_pmf(n, lo++, p);
  acc = 0.0;
  while (acc + binom_pmf(n, hi, p) <= tail) acc += binom_pmf(n, hi--, p);
  return {lo, hi};
}

EgoPolicy route_policy(const Scenario& s) {
  return [&s](const Engine& root, const Assignment&, Rng&) {
    const LocalState e = root.state_of(s.ego());
    return EgoChoice{plan_to_goal(s.graph, e.lane, e.lane_s, s.agent(s.ego()).goal), 1.0};
  };
}

}  // namespace

TEST_CASE("single dead-end lane has one goal") {
  const Scenario s = load(straight_road());
  CHECK(enumerate_goals(s, 0).size() == 1);
}

TEST_CASE("S1 non-ego has a straight goal and a right-turn goal") {
  const Scenario s = scenario("s1");
  const auto goals = enumerate_goals(s, 1);
  REQUIRE(goals.size() == 2);
  std::set<std::string> ends;
  for (const auto& g : goals)
    for (int l : g.lane_ends) ends.insert(s.graph.lane(l).id());
  CHECK(ends.count("S") == 1);
  CHECK((ends.count("L2") == 1 || ends.count("R2") == 1));
}

TEST_CASE("roundabout entry reaches one goal per exit") {
  const Scenario s = scenario("s3");
  for (const char* entry : {"E0", "E1", "E2", "E3"}) {
    const auto goals = enumerate_goals(s.graph, s.graph.index(entry), 0);
    std::set<std::string> got;
    for (const auto& g : goals) {
      REQUIRE(g.lane_ends.size() == 1);
      got.insert(s.graph.lane(g.lane_ends.front()).id());
    }
    CHECK(got == reachable_terminals(s, entry));
    CHECK(got.size() == 4);
  }
}

TEST_CASE("goal posterior") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  const auto goals = enumerate_goals(s, 1);
  const auto observed = t.states_of(1, 0, 100);

  SUBCASE("single goal") {
    const auto p = goal_posterior(observed, {goals.front()}, s.graph, 1.0);
    REQUIRE(p.size() == 1);
    CHECK(p[0] == doctest::Approx(1.0));
  }
  SUBCASE("beta zero is uniform") {
    const auto p = goal_posterior(observed, goals, s.graph, 0.0);
    for (double x : p) CHECK(x == doctest::Approx(1.0 / goals.size()));
  }
  SUBCASE("cut-in and deceleration favour the right turn") {
    const auto p = goal_posterior(t.states_of(1, 0, 115), goals, s.graph, 1.0);
    double exit = 0.0, straight = 0.0;
    for (std::size_t i = 0; i < goals.size(); ++i)
      (s.graph.lane(goals[i].lane_ends.front()).id() == "S" ? exit : straight) += p[i];
    CHECK(exit > straight);
  }
  SUBCASE("normalised") {
    for (int end : {5, 40, 80, 120}) {
      const auto p = goal_posterior(t.states_of(1, 0, end), goals, s.graph, 1.0);
      double sum = 0.0;
      for (double x : p) sum += x;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("smoothing examples") {
  const std::vector<double> theta{0.2, 0.5, 0.3};
  CHECK(smooth(theta, 0.0) == theta);
  const auto s = smooth(std::vector<double>{1.0, 0.0}, 0.1);
  CHECK(s[0] == doctest::Approx(1.1 / 1.2).epsilon(1e-15));
  CHECK(s[1] == doctest::Approx(0.1 / 1.2).epsilon(1e-15));
  const auto u = smooth(theta, 31.62);
  for (double x : u) CHECK(std::abs(x - 1.0 / 3.0) <= 1.0 / (1.0 + 3.0 * 31.62));
  CHECK_THROWS_AS(smooth(theta, -0.1), std::invalid_argument);
}

TEST_CASE("smoothing preserves order and argmax") {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const int d = 1 + static_cast<int>(gen() % 20);
    std::vector<double> th(static_cast<std::size_t>(d));
    double sum = 0.0;
    for (auto& x : th) sum += (x = U(gen));
    for (auto& x : th) x /= sum;
    const double alpha = 10.0 * U(gen);
    const auto phi = smooth(th, alpha);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        if (th[static_cast<std::size_t>(i)] < th[static_cast<std::size_t>(j)])
          CHECK(phi[static_cast<std::size_t>(i)] < phi[static_cast<std::size_t>(j)]);
  }
}

TEST_CASE("posterior smoothing applies at both levels") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  const GoalPosterior p = build_posterior(t.slice(0, 100), s.graph, PredictionConfig{}, {1});
  const GoalPosterior q = smooth(p, 0.5);
  const auto& a = p.find(1)->goals;
  const auto& b = q.find(1)->goals;
  REQUIRE(a.size() == b.size());
  for (std::size_t g = 0; g < a.size(); ++g) {
    CHECK(b[g].probability == doctest::Approx((a[g].probability + 0.5) / (1.0 + 0.5 * a.size())));
    for (std::size_t k = 0; k < a[g].trajectories.size(); ++k)
      CHECK(b[g].trajectories[k].probability ==
            doctest::Approx((a[g].trajectories[k].probability + 0.5) / (1.0 + 0.5 * a[g].trajectories.size())));
  }
  const GoalPosterior only_goals = smooth(p, 0.5, SmoothingLevels{true, false});
  for (std::size_t g = 0; g < a.size(); ++g)
    for (std::size_t k = 0; k < a[g].trajectories.size(); ++k)
      CHECK(only_goals.find(1)->goals[g].trajectories[k].probability == a[g].trajectories[k].probability);
}

TEST_CASE("predicted trajectories per goal") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  const GoalPosterior p = build_posterior(t.slice(0, 30), s.graph, PredictionConfig{}, {1});
  for (const auto& g : p.find(1)->goals) {
    CHECK(!g.trajectories.empty());
    CHECK(g.trajectories.size() <= 3);
    double sum = 0.0;
    for (const auto& tr : g.trajectories) sum += tr.probability;
    CHECK(sum == doctest::Approx(1.0));
  }
}

TEST_CASE("assignment frequencies match the posterior") {
  GoalPosterior post;
  AgentPosterior ap;
  ap.agent = 1;
  for (double p : {0.5, 0.3, 0.2}) {
    GoalHypothesis g;
    g.probability = p;
    g.trajectories.push_back(PredictedTrajectory{"optimal", {}, 1.0, 0.0, {}});
    ap.goals.push_back(g);
  }
  post.agents.push_back(ap);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    std::array<int, 3> n{};
    const int N = 1000;
    for (int i = 0; i < N; ++i) ++n[static_cast<std::size_t>(sample_assignment(post, rng).find(1)->goal)];
    double chi2 = 0.0;
    const double expect[3] = {0.5 * N, 0.3 * N, 0.2 * N};
    for (int i = 0; i < 3; ++i) chi2 += (n[static_cast<std::size_t>(i)] - expect[i]) * (n[static_cast<std::size_t>(i)] - expect[i]) / expect[i];
    CHECK(chi2 < 9.21);  // chi-squared, 2 dof, p = 0.01
  }
}

TEST_CASE("closed-loop sampling") {
  SUBCASE("single-goal deterministic scene is seed independent") {
    const Scenario s = load(straight_road());
    const JointTrace prefix = s.initial_trace();
    const GoalPosterior empty;
    const JointTrace a = sample_closed_loop(s, prefix, empty, 100, 1, route_policy(s));
    const JointTrace b = sample_closed_loop(s, prefix, empty, 100, 99, route_policy(s));
    CHECK(a == b);
  }
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  const JointTrace prefix = t.slice(0, 90);
  const GoalPosterior post = build_posterior(window(prefix, 90), s.graph, PredictionConfig{}, {1});

  SUBCASE("equal seeds give identical traces") {
    CHECK(sample_closed_loop(s, prefix, post, 300, 5, route_policy(s)) ==
          sample_closed_loop(s, prefix, post, 300, 5, route_policy(s)));
  }
  SUBCASE("turn-right frequency follows the posterior") {
    double p_exit = 0.0;
    for (const auto& g : post.find(1)->goals)
      if (s.graph.lane(g.goal.lane_ends.front()).id() == "S") p_exit += g.probability;
    int turns = 0;
    const int N = 100;
    for (int seed = 0; seed < N; ++seed) {
      const JointTrace r = sample_closed_loop(s, prefix, post, 300, static_cast<std::uint64_t>(seed), route_policy(s));
      const auto l = label_actions(r, 1, s.graph);
      bool turned = false;
      for (const auto& x : l.labels) turned = turned || x.maneuver == Maneuver::TurnRight;
      turns += turned;
    }
    const auto [lo, hi] = binom_band(N, p_exit, 0.95);
    CAPTURE(p_exit);
    CHECK(turns >= lo);
    CHECK(turns <= hi);
  }
}

TEST_CASE("posterior JSON export") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  const GoalPosterior p = build_posterior(t.slice(0, 60), s.graph, PredictionConfig{}, {1});
  const auto j = p.to_json(s.graph);
  REQUIRE(j.contains("1"));
  double sum = 0.0;
  for (const auto& g : j["1"]["goals"]) sum += g["p"].get<double>();
  CHECK(sum == doctest::Approx(1.0));
}
