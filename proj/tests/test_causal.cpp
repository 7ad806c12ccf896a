#include "support.hpp"

#include "cema/causal.hpp"
#include "cema/stats.hpp"

#include <doctest.h>

#include <random>

using namespace cema;
using namespace cema::testing;

namespace {

ActionLabels ego_labels(std::vector<std::pair<Maneuver, int>> segs) {
  ActionLabels l;
  for (const auto& [m, n] : segs) l.labels.insert(l.labels.end(), static_cast<std::size_t>(n), ActionLabel{m, Macro::Continue});
  return l;
}

JointTrace empty_trace(int steps) {
  JointTrace t;
  t.agents = {AgentInfo{0, true}};
  for (int k = 0; k < steps; ++k) {
    LocalState s;
    s.timestep = k;
    t.frames.push_back({{0, s}});
  }
  return t;
}

// Ego at 10 m/s; vehicle 1 brakes at 1 m/s2 when `brake`, vehicle 2 brakes when `coin`.
Record synthetic_record(bool brake, bool coin, int steps) {
  Record r;
  r.trace.agents = {AgentInfo{0, true}, AgentInfo{1, false}, AgentInfo{2, false}};
  double v1 = 10.0, v2 = 10.0;
  for (int k = 0; k < steps; ++k) {
    LocalState e, a, b;
    e.timestep = a.timestep = b.timestep = k;
    e.speed = 10.0;
    e.position = Vec2(10.0 * k * kDt, 0.0);
    a.speed = v1;
    a.accel = brake ? -1.0 : 0.0;
    a.position = Vec2(10.0 * k * kDt, 3.5);
    b.speed = v2;
    b.accel = coin ? -1.0 : 0.0;
    b.position = Vec2(10.0 * k * kDt, 7.0);
    r.trace.frames.push_back({{0, e}, {1, a}, {2, b}});
    v1 += a.accel * kDt;
    v2 += b.accel * kDt;
  }
  r.y = brake;
  return r;
}

CounterfactualDataset synthetic(std::mt19937_64& gen, int K, std::uint64_t seed) {
  std::bernoulli_distribution B(0.5);
  CounterfactualDataset d;
  d.tau = -1;
  d.n = 39;
  d.seed = seed;
  for (int k = 0; k < K; ++k) d.records.push_back(synthetic_record(k % 2 == 0, B(gen), 40));
  return d;
}

const FeatureStat* find(const std::vector<FeatureStat>& f, const std::string& name) {
  for (const auto& x : f)
    if (x.name == name) return &x;
  return nullptr;
}

}  // namespace

TEST_CASE("rollback") {
  const JointTrace t = empty_trace(300);
  RollbackConfig tel;
  tel.mode = CauseMode::Teleological;
  CHECK(rollback(t, QueryWindow{50, 60}, tel, {}) == 50);

  const RollbackConfig mech;
  // last maneuver starts at 70, 1.5 s before u = 100: clamped to 2 s before
  CHECK(rollback(t, QueryWindow{100, 120}, mech, ego_labels({{Maneuver::LaneFollow, 70}, {Maneuver::LaneChangeLeft, 60}})) ==
        60);
  // started 3 s before u: inside the band
  CHECK(rollback(t, QueryWindow{200, 220}, mech, ego_labels({{Maneuver::LaneFollow, 140}, {Maneuver::TurnRight, 100}})) ==
        140);
  // started 8 s before u: clamped to 5 s before
  CHECK(rollback(t, QueryWindow{200, 220}, mech, ego_labels({{Maneuver::LaneFollow, 40}, {Maneuver::Stop, 200}})) == 100);

  bool clamped = false;
  CHECK(rollback(t, QueryWindow{20, 30}, mech, ego_labels({{Maneuver::LaneFollow, 100}}), &clamped) == 0);
  CHECK(clamped);
  CHECK_THROWS_AS(rollback(t, QueryWindow{400, 410}, mech, {}), std::invalid_argument);

  // oracle: for random label sequences, tau = clamp(start of run holding u - 1, u - 100, u - 40)
  std::mt19937 gen(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::pair<Maneuver, int>> segs;
    int total = 0;
    while (total < 300) {
      const int n = 1 + static_cast<int>(gen() % 80);
      segs.emplace_back(static_cast<Maneuver>(gen() % 7), n);
      total += n;
    }
    const ActionLabels l = ego_labels(segs);
    const int u = 100 + static_cast<int>(gen() % 180);
    int a = u - 1;
    while (a > 0 && l.at(a - 1).maneuver == l.at(u - 1).maneuver) --a;
    CHECK(rollback(t, QueryWindow{u, u}, mech, l) == std::clamp(a, u - 100, u - 40));
  }
}

TEST_CASE("slices tile the rollout span") {
  CHECK(make_slices(9, SlicePlan{{50, 100}}).size() == 2);
  const auto s = make_slices(9, SlicePlan{{50, 100}});
  CHECK(s[0].from == 10);
  CHECK(s[0].to == 49);
  CHECK(s[1].from == 50);
  CHECK(s[1].to == 100);
  CHECK_THROWS_AS(make_slices(9, SlicePlan{{60, 50}}), std::invalid_argument);

  std::mt19937 gen(4);
  for (int trial = 0; trial < 300; ++trial) {
    const int tau = static_cast<int>(gen() % 50);
    std::vector<int> p;
    int at = tau + 1;
    for (int k = 0; k < 1 + static_cast<int>(gen() % 4); ++k) p.push_back(at += 1 + static_cast<int>(gen() % 30));
    const auto sl = make_slices(tau, SlicePlan{p});
    REQUIRE(!sl.empty());
    CHECK(sl.front().from == tau + 1);
    CHECK(sl.back().to == p.back());
    for (std::size_t j = 1; j < sl.size(); ++j) CHECK(sl[j].from == sl[j - 1].to + 1);
    for (const auto& x : sl) CHECK(x.from <= x.to);
  }
}

TEST_CASE("teleological attribution") {
  SUBCASE("hand-built groups") {
    const std::vector<int> y{1, 1, 0, 0};
    const std::vector<RewardVector> r{{10, 0, 0, 0, 1}, {12, 0, 0, 0, 1}, {20, 0, 0, 0, 1}, {22, 0, 0, 0, 1}};
    const auto t = teleological_attribution(y, r);
    CHECK(t.front().component == "time_to_goal");
    CHECK(t.front().delta == -10.0);
  }
  SUBCASE("identical groups") {
    const std::vector<RewardVector> r(4, RewardVector{5, 1, 2, 0, 1});
    for (const auto& e : teleological_attribution({1, 0, 1, 0}, r)) CHECK(e.delta == 0.0);
  }
  SUBCASE("single class") {
    const std::vector<RewardVector> r(3, RewardVector{});
    CHECK_THROWS_AS(teleological_attribution({1, 1, 1}, r), DegenerateError);
  }
  SUBCASE("brute-force group means") {
    std::mt19937_64 gen(6);
    std::uniform_real_distribution<double> U(0.0, 40.0);
    for (int trial = 0; trial < 100; ++trial) {
      const int K = 2 + static_cast<int>(gen() % 100);
      std::vector<int> y(static_cast<std::size_t>(K));
      std::vector<RewardVector> r;
      for (int k = 0; k < K; ++k) {
        y[static_cast<std::size_t>(k)] = k < 1 ? 1 : k < 2 ? 0 : static_cast<int>(gen() % 2);
        r.push_back({U(gen), U(gen) / 8, U(gen) / 8, gen() % 2 ? 1.0 : 0.0, gen() % 2 ? 1.0 : 0.0});
      }
      const auto t = teleological_attribution(y, r);
      REQUIRE(t.size() == static_cast<std::size_t>(kRewardDims));
      for (std::size_t i = 0; i < t.size(); ++i) {
        const auto& names = RewardVector::names();
        const int c = static_cast<int>(std::find(names.begin(), names.end(), t[i].component) - names.begin());
        double s1 = 0, s0 = 0;
        int n1 = 0, n0 = 0;
        for (int k = 0; k < K; ++k) {
          const double v = r[static_cast<std::size_t>(k)].array()[c];
          if (y[static_cast<std::size_t>(k)]) s1 += v, ++n1;
          else s0 += v, ++n0;
        }
        CHECK(std::abs(t[i].delta - (s1 / n1 - s0 / n0)) <= 1e-9);
        if (i > 0) CHECK(std::abs(t[i - 1].delta) >= std::abs(t[i].delta));
      }
    }
  }
}

TEST_CASE("mechanistic attribution on synthetic rollouts") {
  std::mt19937_64 gen(8);
  const CausalConfig cfg;
  const CounterfactualDataset d = synthetic(gen, 60, 21);
  const auto slices = mechanistic_attribution(d, SlicePlan{{20, 39}}, cfg);
  REQUIRE(slices.size() == 2);
  for (const auto& s : slices) {
    REQUIRE(!s.features.empty());
    CHECK(s.features.front().name.find("(1)") != std::string::npos);
    CHECK(s.features.front().mean > 0.0);
    CHECK(s.features.front().samples.size() == 35);
    for (std::size_t i = 1; i < s.features.size(); ++i)
      CHECK(std::abs(s.features[i - 1].mean) >= std::abs(s.features[i].mean) - 1e-9);
  }

  SUBCASE("independent feature is centred on zero across datasets") {
    std::vector<double> means;
    for (int rep = 0; rep < 40; ++rep) {
      const CounterfactualDataset e = synthetic(gen, 60, 100 + static_cast<std::uint64_t>(rep));
      CausalConfig keep = cfg;
      keep.weight_floor = 0.0;
      const auto a = mechanistic_attribution(e, SlicePlan{{20, 39}}, keep);
      const FeatureStat* f = find(a[1].features, "decelerates(2)");
      REQUIRE(f);
      means.push_back(f->mean);
    }
    std::sort(means.begin(), means.end());
    CHECK(stats::quantile_sorted(means, 0.025) <= 0.0);
    CHECK(stats::quantile_sorted(means, 0.975) >= 0.0);
  }
  SUBCASE("top feature survives new fold seeds") {
    int same = 0;
    const std::string top = slices[1].features.front().name;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      CounterfactualDataset e = d;
      e.seed = 1000 + seed;
      same += mechanistic_attribution(e, SlicePlan{{20, 39}}, cfg)[1].features.front().name == top;
    }
    CHECK(same >= 95);
  }
  SUBCASE("degenerate datasets are refused") {
    CounterfactualDataset e = d;
    e.degenerate = true;
    CHECK_THROWS_AS(mechanistic_attribution(e, SlicePlan{{20, 39}}, cfg), DegenerateError);
  }
}

TEST_CASE("design matrix drops constant columns") {
  std::mt19937_64 gen(9);
  const CounterfactualDataset d = synthetic(gen, 20, 1);
  const DesignMatrix dm = design_matrix(d, Slice{0, 39}, Thresholds{});
  CHECK(dm.X.rows() == 20);
  for (Eigen::Index c = 0; c < dm.X.cols(); ++c) CHECK(dm.X.col(c).maxCoeff() != dm.X.col(c).minCoeff());
  CHECK(std::find(dm.names.begin(), dm.names.end(), "decelerates(1)") != dm.names.end());
  CHECK(std::find(dm.names.begin(), dm.names.end(), "maneuver:lane-follow(1)") == dm.names.end());
}

TEST_CASE("a deterministic scene gives a degenerate dataset") {
  const Scenario s = load(straight_road(300.0, 10.0));
  const JointTrace t = service::factual_trace(s, 21, 120);
  Query q;
  q.vid = 0;
  q.tense = Tense::Present;
  q.actions = {"Continue"};
  q.query_time = 80;
  CausalConfig cfg;
  cfg.K = 10;
  cfg.alpha = 0.0;
  const CounterfactualDataset d = sample_counterfactuals(s, t, 40, q, QueryWindow{80, 100}, cfg);
  CHECK(d.records.size() == 10);
  CHECK(d.degenerate);
  CHECK_THROWS_AS(mechanistic_attribution(d, SlicePlan{{80, 119}}, cfg), DegenerateError);
  // with the ego on its modal plan nothing is left to sample
  cfg.map_ego = true;
  const CounterfactualDataset m = sample_counterfactuals(s, t, 40, q, QueryWindow{80, 100}, cfg);
  CHECK(m.degenerate);
  for (const auto& r : m.records) CHECK(r.trace == m.records.front().trace);
}

TEST_CASE("turn-right frequency matches the two-branch posterior") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  const int tau = 90;
  CausalConfig cfg;
  cfg.closed_loop = false;
  cfg.budget = 50;
  const Sampler sm(s, t, tau, cfg);
  const ActionLabels v1 = label_actions(t, 1, s.graph);
  int u = -1, v = -1;
  for (int k = v1.start; k <= v1.end(); ++k)
    if (v1.at(k).maneuver == Maneuver::TurnRight) {
      if (u < 0) u = k;
      v = k;
    }
  REQUIRE(u > tau);
  Query q;
  q.vid = 1;
  q.tense = Tense::Future;
  q.actions = {"turn-right"};
  q.query_time = tau;
  const QueryWindow w{u, v, WindowSource::FactualTrace};

  // exact enumeration over (goal, trajectory) branches of the predicted states
  const JointTrace prefix = t.slice(0, tau);
  double P = 0.0;
  const auto* ap = sm.posterior().find(1);
  REQUIRE(ap);
  REQUIRE(ap->goals.size() == 2);
  for (const auto& g : ap->goals)
    for (const auto& tr : g.trajectories) {
      JointTrace jt = prefix;
      for (const auto& st : tr.states)
        if (st.timestep > tau) jt.frames.push_back({{0, *prefix.state(0, tau)}, {1, st}});
      P += g.probability * tr.probability * outcome_indicator(jt, q, w, s.graph);
    }
  CHECK(P > 0.1);
  CHECK(P < 0.9);

  const int N = 1000;
  int ones = 0;
  for (const auto& r : sm.draw(0, N, 21)) ones += outcome_indicator(r.labels.at(1), q, w);
  // binomial 99% band by normal approximation
  const double sd = std::sqrt(N * P * (1 - P));
  CAPTURE(P);
  CHECK(std::abs(ones - N * P) <= 2.576 * sd + 1.0);
}

TEST_CASE("S1 counterfactual dataset") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  const Query q = query("q_s1_why_left");
  const CausalConfig cfg;
  const ActionLabels ego = label_actions(t, 0, s.graph);
  const QueryWindow w = resolve_window(q, ego, {});
  const int tau = rollback(t, w, RollbackConfig{}, ego);
  const CounterfactualDataset d = sample_counterfactuals(s, t, tau, q, w, cfg);
  CHECK(d.records.size() == 100);
  CHECK_FALSE(d.degenerate);
  for (const auto& r : d.records) {
    CHECK(r.trace.start == tau + 1);
    CHECK(r.trace.end() == t.end());
  }
  SUBCASE("negation complements y under the same seed") {
    Query neg = q;
    neg.negated = true;
    CounterfactualDataset e = d;
    e.query = neg;
    label_outcomes(e, s.graph);
    for (std::size_t k = 0; k < d.records.size(); ++k) CHECK(e.records[k].y == 1 - d.records[k].y);
  }
  SUBCASE("same seed, same dataset") {
    const CounterfactualDataset e = sample_counterfactuals(s, t, tau, q, w, cfg);
    CHECK(e.ys() == d.ys());
    for (std::size_t k = 0; k < d.records.size(); ++k) {
      CHECK(e.records[k].r == d.records[k].r);
      CHECK(e.records[k].trace == d.records[k].trace);
    }
  }
}

TEST_CASE("S1 report is reproducible and names time to goal") {
  const Scenario s = scenario("s1");
  const JointTrace t = service::factual_trace(s, 21);
  const Query q = query("q_s1_why_left");
  const AttributionReport a = explain_query(s, t, q, CausalConfig{});
  REQUIRE(!a.teleological.empty());
  CHECK(a.teleological.front().component == "time_to_goal");
  CHECK(a.teleological.front().delta < 0.0);
  CHECK(a.K == 100);
  CHECK(a.seed == 21);
  const AttributionReport b = explain_query(s, t, q, CausalConfig{});
  CHECK(a.to_json().dump() == b.to_json().dump());
  CHECK(AttributionReport::from_json(a.to_json()).to_json() == a.to_json());
}
