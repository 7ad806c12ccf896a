#include "cema/causal.hpp"

#include "cema/simulator.hpp"
#include "cema/stats.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

namespace cema {

namespace {

template <typename F>
void parallel_for(int n, int threads, F&& body) {
  if (n <= 0) return;
  int t = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  t = std::min(t, n);
  if (t <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (int k = 0; k < t; ++k)
    pool.emplace_back([&] {
      for (int i = next++; i < n && !failed; i = next++) {
        try {
          body(i);
        } catch (...) {
          if (!failed.exchange(true)) err = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

std::vector<AgentId> non_egos_at(const JointTrace& t, int at) {
  std::vector<AgentId> out;
  if (!t.covers(at)) return out;
  for (const auto& [id, s] : t.at(at))
    if (id != t.ego()) out.push_back(id);
  return out;
}

Assignment map_assignment(const GoalPosterior& post) {
  Assignment a;
  for (const auto& ap : post.agents) {
    std::size_t g = 0;
    for (std::size_t i = 1; i < ap.goals.size(); ++i)
      if (ap.goals[i].probability > ap.goals[g].probability) g = i;
    const auto& tr = ap.goals[g].trajectories;
    std::size_t k = 0;
    for (std::size_t i = 1; i < tr.size(); ++i)
      if (tr[i].probability > tr[k].probability) k = i;
    a.choices.push_back({ap.agent, static_cast<int>(g), static_cast<int>(k)});
    a.probability *= ap.goals[g].probability * (tr.empty() ? 1.0 : tr[k].probability);
  }
  return a;
}

void apply(Engine& e, const GoalPosterior& post, const Assignment& a) {
  for (const auto& c : a.choices) {
    if (!e.has(c.agent)) continue;
    const auto& gh = post.find(c.agent)->goals[static_cast<std::size_t>(c.goal)];
    e.set_goal(c.agent, gh.goal);
    e.set_plan(c.agent,
               gh.trajectories.empty() ? std::vector<MacroSpec>{}
                                       : gh.trajectories[static_cast<std::size_t>(c.trajectory)].macros,
               true);
  }
}

std::vector<Macro> collapsed_macros(const ActionLabels& l, int from, int to) {
  std::vector<Macro> out;
  for (int t = std::max(from, l.start); t <= std::min(to, l.end()); ++t)
    if (out.empty() || out.back() != l.at(t).macro) out.push_back(l.at(t).macro);
  return out;
}

}  // namespace

int rollback(const JointTrace& trace, const QueryWindow& w, const RollbackConfig& cfg, const ActionLabels& ego_labels,
             bool* clamped) {
  if (!trace.covers(w.u)) throw std::invalid_argument("rollback: u outside the trace");
  if (clamped) *clamped = false;
  if (cfg.mode == CauseMode::Teleological) return w.u;
  const int lo = w.u - static_cast<int>(std::lround(cfg.tau_max * kFps));
  const int hi = w.u - static_cast<int>(std::lround(cfg.tau_min * kFps));
  int start = hi;
  if (!ego_labels.empty()) {
    for (int t = std::min(w.u - 1, ego_labels.end()); t >= ego_labels.start; --t) {
      const Maneuver m = ego_labels.at(t).maneuver;
      int a = t;
      while (a - 1 >= ego_labels.start && ego_labels.at(a - 1).maneuver == m) --a;
      start = a;
      break;
    }
  }
  int tau = std::clamp(start, lo, hi);
  if (tau < trace.start) {
    tau = trace.start;
    if (clamped) *clamped = true;
  }
  return tau;
}

std::vector<int> CounterfactualDataset::ys() const {
  std::vector<int> y;
  for (const auto& r : records) y.push_back(r.y);
  return y;
}

Sampler::Sampler(const Scenario& scenario, const JointTrace& factual, int tau, const CausalConfig& cfg)
    : scenario_(&scenario), tau_(tau), n_(factual.end()), cfg_(cfg) {
  if (!factual.covers(tau)) throw std::invalid_argument("sampler: tau outside the factual trace");
  prefix_ = factual.slice(factual.start, tau);
  const GoalPosterior raw =
      build_posterior(window(prefix_, tau), scenario.graph, cfg.prediction, non_egos_at(prefix_, tau));
  posterior_ = smooth(raw, cfg.alpha, cfg.smoothing);
  const Engine root = root_engine(scenario, prefix_, cfg.prediction.kin);
  near_ = nearby_agents(root, prefix_.ego(), scenario.planner.interaction_radius);
}

PlanDistribution Sampler::search(const Assignment& a, std::uint64_t seed) const {
  Engine root = root_engine(*scenario_, prefix_, cfg_.prediction.kin);
  apply(root, posterior_, a);
  const AgentId ego = prefix_.ego();
  PlanDistribution none;
  if (!root.has(ego)) return none;
  const Goal& goal = scenario_->agent(ego).goal;
  if (applicable_macros(root.state_of(ego), scenario_->graph, &goal, root.kinematics()).empty()) return none;
  MctsOptions opt;
  opt.config = scenario_->planner;
  if (cfg_.budget > 0) opt.config.budget = cfg_.budget;
  opt.horizon = tau_ + 30 * kFps;
  const std::map<AgentId, std::vector<MacroSpec>> fixed;
  opt.fixed = &fixed;
  return mcts_plan(root, ego, posterior_, goal, opt, seed);
}

void Sampler::prepare_plans(const std::vector<Assignment>& assignments) const {
  std::vector<std::pair<std::string, const Assignment*>> todo;
  for (const auto& a : assignments) {
    const std::string key = a.key(near_);
    if (plans_.count(key)) continue;
    if (std::any_of(todo.begin(), todo.end(), [&](const auto& p) { return p.first == key; })) continue;
    todo.emplace_back(key, &a);
  }
  std::vector<PlanDistribution> out(todo.size());
  parallel_for(static_cast<int>(todo.size()), cfg_.threads, [&](int i) {
    const auto& [key, a] = todo[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = search(*a, derive_seed(cfg_.seed, fnv1a(key)));
  });
  for (std::size_t i = 0; i < todo.size(); ++i) plans_.emplace(todo[i].first, std::move(out[i]));
}

ClosedLoop Sampler::loop() const {
  const PlannerConfig& pc = scenario_->planner;
  ClosedLoop l;
  l.period = std::max(1, static_cast<int>(std::lround(pc.replan_period_s * kFps)));
  l.replan = [this, &pc](const Engine& eng, std::uint64_t seed) {
    const JointTrace seen = window(concat(prefix_, eng.trace()), eng.now());
    return plan_ego(eng, seen, scenario_->agent(prefix_.ego()).goal, pc, cfg_.prediction, seed);
  };
  return l;
}

Record Sampler::finish(const Rollout& ro) const {
  Record rec;
  const JointTrace full = concat(prefix_, ro.trace);
  const int last = std::min(full.end(), n_);
  rec.trace = tau_ + 1 <= last ? full.slice(tau_ + 1, last) : JointTrace{full.agents, tau_ + 1, {}};
  rec.labels = label_all(full, scenario_->graph);
  rec.r = reward(full, scenario_->agent(full.ego()).goal, scenario_->graph);
  rec.probability = ro.probability;
  for (const auto& m : ro.ego.macros) rec.ego_plan.push_back(m.kind);
  return rec;
}

std::vector<Record> Sampler::draw(int first, int count, std::uint64_t seed) const {
  std::vector<std::uint64_t> seeds;
  for (int k = first; k < first + count; ++k) seeds.push_back(derive_seed(seed, static_cast<std::uint64_t>(k)));
  if (!cfg_.replan) {
    std::vector<Assignment> as;
    for (auto s : seeds) {
      Rng rng(s);
      as.push_back(sample_assignment(posterior_, rng));
    }
    prepare_plans(as);
  }
  const EgoPolicy policy = [this](const Engine& root, const Assignment& a, Rng& rng) -> EgoChoice {
    PlanDistribution fresh;
    const PlanDistribution* dist = nullptr;
    if (cfg_.replan) {
      (void)root;
      fresh = search(a, rng.next());
      dist = &fresh;
    } else {
      dist = &plans_.at(a.key(near_));
    }
    if (dist->entries.empty()) return {};
    const std::size_t i = cfg_.map_ego ? 0 : dist->sample(rng);
    const PlanEntry& e = dist->entries[i];
    return {to_specs(e.macros), e.probability};
  };
  const ClosedLoop cl = loop();
  std::vector<Record> out(static_cast<std::size_t>(count));
  parallel_for(count, cfg_.threads, [&](int i) {
    const Rollout ro =
        sample_rollout(*scenario_, prefix_, posterior_, rollout_horizon(), seeds[static_cast<std::size_t>(i)], policy,
                       cfg_.prediction.kin, cfg_.closed_loop ? &cl : nullptr);
    out[static_cast<std::size_t>(i)] = finish(ro);
  });
  return out;
}

Record Sampler::draw_map() const {
  const Assignment a = map_assignment(posterior_);
  prepare_plans({a});
  const PlanDistribution& dist = plans_.at(a.key(near_));
  double mass = 0.0;
  for (const auto& e : dist.entries)
    if (e.macros.size() >= dist.greedy.size() && std::equal(dist.greedy.begin(), dist.greedy.end(), e.macros.begin()))
      mass += e.probability;
  const EgoPolicy policy = [&](const Engine&, const Assignment&, Rng&) -> EgoChoice {
    return {to_specs(dist.greedy), mass};
  };
  GoalPosterior fixed = posterior_;
  for (auto& ap : fixed.agents) {
    const auto c = std::find_if(a.choices.begin(), a.choices.end(), [&](const auto& x) { return x.agent == ap.agent; });
    if (c == a.choices.end()) continue;
    for (std::size_t g = 0; g < ap.goals.size(); ++g) {
      ap.goals[g].probability = static_cast<int>(g) == c->goal ? 1.0 : 0.0;
      for (std::size_t k = 0; k < ap.goals[g].trajectories.size(); ++k)
        ap.goals[g].trajectories[k].probability = static_cast<int>(k) == c->trajectory ? 1.0 : 0.0;
    }
  }
  const ClosedLoop cl = loop();
  Rollout ro = sample_rollout(*scenario_, prefix_, fixed, n_, derive_seed(cfg_.seed, fnv1a("map")), policy,
                              cfg_.prediction.kin, cfg_.closed_loop ? &cl : nullptr);
  ro.assignment = a;
  ro.probability = a.probability * mass;
  return finish(ro);
}

void label_outcomes(CounterfactualDataset& d, const LaneGraph& graph) {
  (void)graph;
  int ones = 0;
  for (auto& r : d.records) {
    const auto it = r.labels.find(d.query.vid);
    r.y = outcome_indicator(it == r.labels.end() ? ActionLabels{} : it->second, d.query, d.window);
    ones += r.y;
  }
  d.degenerate = ones == 0 || ones == static_cast<int>(d.records.size());
}

CounterfactualDataset sample_counterfactuals(const Scenario& scenario, const JointTrace& factual, int tau,
                                             const Query& q, const QueryWindow& w, const CausalConfig& cfg) {
  if (cfg.K < 1) throw std::invalid_argument("sample_counterfactuals: K must be at least 1");
  const Sampler s(scenario, factual, tau, cfg);
  CounterfactualDataset d;
  d.records = s.draw(0, cfg.K, cfg.seed);
  d.tau = tau;
  d.n = factual.end();
  d.query = q;
  d.window = w;
  d.seed = cfg.seed;
  d.alpha = cfg.alpha;
  label_outcomes(d, scenario.graph);
  return d;
}

std::vector<Slice> make_slices(int tau, const SlicePlan& plan) {
  std::vector<Slice> out;
  int from = tau + 1;
  for (std::size_t j = 0; j < plan.endpoints.size(); ++j) {
    const int p = plan.endpoints[j];
    if (p < from - 1 || (j > 0 && p <= plan.endpoints[j - 1]))
      throw std::invalid_argument("slice plan endpoints must be strictly increasing");
    const bool last = j + 1 == plan.endpoints.size();
    const int to = last ? p : p - 1;
    if (to >= from) out.push_back({from, to});
    from = std::max(from, to + 1);
  }
  return out;
}

void rank_features(std::vector<FeatureStat>& f) {
  std::sort(f.begin(), f.end(), [](const FeatureStat& a, const FeatureStat& b) {
    const double ma = std::abs(a.mean), mb = std::abs(b.mean);
    const double tol = 1e-6 * std::max(ma, mb);
    if (std::abs(ma - mb) > tol) return ma > mb;
    if ((a.mean > 0) != (b.mean > 0)) return a.mean > 0;
    return a.name < b.name;
  });
}

DesignMatrix design_matrix(const CounterfactualDataset& d, const Slice& s, const Thresholds& th) {
  std::vector<std::string> names;
  std::map<std::string, int> col;
  std::vector<std::vector<std::pair<int, int>>> rows;
  for (const auto& r : d.records) {
    const JointTrace sub = r.trace.slice(s.from, s.to);
    const FeatureVector fv = featurise(sub, sub.ego(), th, r.labels);
    std::vector<std::pair<int, int>> row;
    for (std::size_t i = 0; i < fv.size(); ++i) {
      auto [it, fresh] = col.emplace(fv.names[i], static_cast<int>(names.size()));
      if (fresh) names.push_back(fv.names[i]);
      row.emplace_back(it->second, fv.values[i]);
    }
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd full = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (const auto& [c, v] : rows[i]) full(static_cast<Eigen::Index>(i), c) = v;
  DesignMatrix dm;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index c = 0; c < full.cols(); ++c)
    if (full.col(c).maxCoeff() != full.col(c).minCoeff()) keep.push_back(c);
  dm.X.resize(full.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) {
    dm.X.col(static_cast<Eigen::Index>(j)) = full.col(keep[j]);
    dm.names.push_back(names[static_cast<std::size_t>(keep[j])]);
  }
  return dm;
}

namespace {

std::vector<FeatureStat> fit_features(const DesignMatrix& dm, const Eigen::VectorXd& y, const CausalConfig& cfg,
                                      std::uint64_t seed, bool filter) {
  Eigen::MatrixXd W;
  try {
    W = stats::cv_importance<double>(dm.X, y, cfg.folds, cfg.repeats, cfg.lambda, seed);
  } catch (const std::invalid_argument& e) {
    throw DegenerateError(std::string("mechanistic attribution: ") + e.what());
  }
  std::vector<FeatureStat> out;
  double mx = 0.0;
  for (Eigen::Index c = 0; c < W.cols(); ++c) {
    FeatureStat f;
    f.name = dm.names[static_cast<std::size_t>(c)];
    f.samples.assign(W.col(c).data(), W.col(c).data() + W.rows());
    f.mean = W.col(c).mean();
    f.ci = stats::bootstrap_ci(f.samples, 0.95, cfg.bootstrap_resamples, derive_seed(seed, static_cast<std::uint64_t>(c)));
    mx = std::max(mx, std::abs(f.mean));
    out.push_back(std::move(f));
  }
  if (filter)
    std::erase_if(out, [&](const FeatureStat& f) { return std::abs(f.mean) < cfg.weight_floor * mx; });
  rank_features(out);
  return out;
}

Eigen::VectorXd y_vector(const std::vector<int>& y) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) v[static_cast<Eigen::Index>(i)] = y[i];
  return v;
}

}  // namespace

std::vector<SliceAttribution> mechanistic_attribution(const CounterfactualDataset& d, const SlicePlan& plan,
                                                      const CausalConfig& cfg) {
  if (d.degenerate) throw DegenerateError("mechanistic attribution: every rollout has the same outcome");
  const auto slices = make_slices(d.tau, plan);
  const Eigen::VectorXd y = y_vector(d.ys());
  std::vector<SliceAttribution> out;
  for (std::size_t j = 0; j < slices.size(); ++j) {
    SliceAttribution sa;
    sa.index = static_cast<int>(j);
    sa.span = slices[j];
    sa.label = slices.size() == 2 ? (j == 0 ? "past" : "present-future") : "slice-" + std::to_string(j);
    if (sa.span.to - sa.span.from + 1 < 2) {
      sa.constant = true;
      out.push_back(std::move(sa));
      continue;
    }
    const DesignMatrix dm = design_matrix(d, sa.span, cfg.thresholds);
    sa.columns = static_cast<int>(dm.names.size());
    if (dm.names.empty()) {
      sa.constant = true;
    } else {
      sa.features = fit_features(dm, y, cfg, derive_seed(d.seed, 100 + j), true);
    }
    out.push_back(std::move(sa));
  }
  if (!out.empty() && std::all_of(out.begin(), out.end(), [](const SliceAttribution& s) { return s.constant; }))
    throw DegenerateError("mechanistic attribution: all features are constant");
  return out;
}

std::vector<TeleoEntry> teleological_attribution(const std::vector<int>& y, const std::vector<RewardVector>& r) {
  if (y.size() != r.size()) throw std::invalid_argument("teleological attribution: size mismatch");
  RewardArray s1 = RewardArray::Zero(), s0 = RewardArray::Zero();
  int n1 = 0, n0 = 0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    if (y[k]) {
      s1 += r[k].array();
      ++n1;
    } else {
      s0 += r[k].array();
      ++n0;
    }
  }
  if (n1 == 0 || n0 == 0) throw DegenerateError("teleological attribution: every rollout has the same outcome");
  const RewardArray m1 = s1 / n1, m0 = s0 / n0;
  std::vector<TeleoEntry> out;
  for (int c = 0; c < kRewardDims; ++c)
    out.push_back({RewardVector::names()[static_cast<std::size_t>(c)], m1[c] - m0[c], m1[c], m0[c]});
  std::sort(out.begin(), out.end(), [](const TeleoEntry& a, const TeleoEntry& b) {
    if (std::abs(a.delta) != std::abs(b.delta)) return std::abs(a.delta) > std::abs(b.delta);
    return a.component < b.component;
  });
  return out;
}

std::vector<TeleoEntry> teleological_attribution(const CounterfactualDataset& d) {
  std::vector<RewardVector> r;
  for (const auto& rec : d.records) r.push_back(rec.r);
  return teleological_attribution(d.ys(), r);
}

nlohmann::json AttributionReport::to_json() const {
  nlohmann::json tel = nlohmann::json::array();
  for (const auto& t : teleological)
    tel.push_back({{"component", t.component}, {"delta", t.delta}, {"mean_match", t.mean_match},
                   {"mean_nonmatch", t.mean_nonmatch}});
  nlohmann::json mech = nlohmann::json::array();
  for (const auto& s : mechanistic) {
    nlohmann::json fs = nlohmann::json::array();
    for (const auto& f : s.features)
      fs.push_back({{"name", f.name}, {"mean", f.mean}, {"ci", {f.ci.first, f.ci.second}}, {"samples", f.samples}});
    mech.push_back({{"slice", s.index},
                    {"label", s.label},
                    {"from", s.span.from},
                    {"to", s.span.to},
                    {"columns", s.columns},
                    {"constant", s.constant},
                    {"features", fs}});
  }
  nlohmann::json j = {{"query", query.to_json()},
                      {"window", {{"u", window.u}, {"v", window.v}, {"source", std::string(to_string(window.source))}}},
                      {"tau", tau},
                      {"tau_teleological", tau_teleological},
                      {"n", n},
                      {"ego", ego},
                      {"K", K},
                      {"alpha", alpha},
                      {"seed", seed},
                      {"teleological", tel},
                      {"mechanistic", mech},
                      {"degenerate", {{"teleological", teleological_degenerate}, {"mechanistic", mechanistic_degenerate}}},
                      {"y", y},
                      {"y_teleological", y_teleological},
                      {"warnings", warnings}};
  if (associative) {
    nlohmann::json plan = nlohmann::json::array();
    for (Macro m : associative->plan) plan.push_back(std::string(to_string(m)));
    j["associative"] = {{"vehicle", associative->vehicle},
                        {"plan", plan},
                        {"support", associative->support},
                        {"matches", associative->matches}};
  }
  return j;
}

AttributionReport AttributionReport::from_json(const nlohmann::json& j) {
  AttributionReport r;
  r.query = parse_query(j.at("query"));
  const auto& w = j.at("window");
  r.window.u = w.at("u");
  r.window.v = w.at("v");
  const std::string src = w.at("source");
  for (WindowSource s : {WindowSource::FactualTrace, WindowSource::CounterfactualSample, WindowSource::MapPrediction})
    if (to_string(s) == src) r.window.source = s;
  r.tau = j.at("tau");
  r.tau_teleological = j.at("tau_teleological");
  r.n = j.at("n");
  r.ego = j.at("ego");
  r.K = j.at("K");
  r.alpha = j.at("alpha");
  r.seed = j.at("seed");
  for (const auto& t : j.at("teleological"))
    r.teleological.push_back({t.at("component"), t.at("delta"), t.at("mean_match"), t.at("mean_nonmatch")});
  for (const auto& s : j.at("mechanistic")) {
    SliceAttribution a;
    a.index = s.at("slice");
    a.label = s.at("label");
    a.span = {s.at("from"), s.at("to")};
    a.columns = s.at("columns");
    a.constant = s.at("constant");
    for (const auto& f : s.at("features"))
      a.features.push_back({f.at("name"), f.at("mean"), {f.at("ci")[0], f.at("ci")[1]}, f.at("samples")});
    r.mechanistic.push_back(std::move(a));
  }
  r.teleological_degenerate = j.at("degenerate").at("teleological");
  r.mechanistic_degenerate = j.at("degenerate").at("mechanistic");
  r.y = j.at("y").get<std::vector<int>>();
  r.y_teleological = j.at("y_teleological").get<std::vector<int>>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  if (j.contains("associative")) {
    const auto& a = j.at("associative");
    Associative as;
    as.vehicle = a.at("vehicle");
    for (const auto& m : a.at("plan")) {
      Macro mac{};
      if (!parse_macro(m.get<std::string>(), mac)) throw ValidationError("report: unknown macro in associative plan");
      as.plan.push_back(mac);
    }
    as.support = a.at("support");
    as.matches = a.at("matches");
    r.associative = as;
  }
  return r;
}

JointTrace reference_trace(const Scenario& scenario, const JointTrace& factual, const Query& q,
                           const CausalConfig& cfg, bool* predicted) {
  if (predicted) *predicted = false;
  const bool future = q.kind == QueryKind::What ? *q.action_time > q.query_time : q.tense == Tense::Future;
  if (!future || q.query_time >= factual.end()) return factual;
  const int at = std::max(q.query_time, factual.start);
  const Sampler s(scenario, factual, at, cfg);
  const Record map = s.draw_map();
  if (predicted) *predicted = true;
  return concat(factual.slice(factual.start, at), map.trace);
}

namespace {

struct Prepared {
  JointTrace ref;
  bool predicted = false;
  QueryWindow window;
  int tau = 0;
  int tau_teleological = 0;
  std::vector<std::string> warnings;
};

Prepared prepare(const Scenario& scenario, const JointTrace& factual, const Query& q, const CausalConfig& cfg) {
  if (!factual.has_agent(q.vid)) throw ValidationError("query: unknown vehicle " + std::to_string(q.vid));
  if (!factual.covers(q.query_time)) throw ValidationError("query: query_time outside the trace");
  Prepared p;
  p.ref = reference_trace(scenario, factual, q, cfg, &p.predicted);
  const ActionLabels lv = label_actions(p.ref, q.vid, scenario.graph);
  try {
    p.window = resolve_window(q, lv, {}, p.predicted);
  } catch (const UnmatchedQuery&) {
    if (q.kind == QueryKind::What) throw;
    const int t0 = std::clamp(q.query_time - static_cast<int>(std::lround(cfg.tau_max * kFps)), p.ref.start, p.ref.end());
    const Sampler s(scenario, p.ref, t0, cfg);
    std::vector<LabelledSample> samples;
    for (auto& r : s.draw(0, cfg.K, derive_seed(cfg.seed, fnv1a("resolve")))) {
      const auto it = r.labels.find(q.vid);
      samples.push_back({it == r.labels.end() ? ActionLabels{} : it->second, r.probability});
    }
    p.window = resolve_window(q, lv, samples, p.predicted);
  }
  const ActionLabels le = label_actions(p.ref, p.ref.ego(), scenario.graph);
  bool clamped = false;
  p.tau = rollback(p.ref, p.window, {cfg.tau_min, cfg.tau_max, CauseMode::Mechanistic}, le, &clamped);
  if (clamped) p.warnings.push_back("rollback clamped to the trace start");
  p.tau_teleological = rollback(p.ref, p.window, {cfg.tau_min, cfg.tau_max, CauseMode::Teleological}, le);
  return p;
}

// Dominant macro of each rollout over each factual ego run from u on, collapsed.
std::vector<Macro> coarse_plan(const ActionLabels& l, const std::vector<std::pair<int, int>>& runs) {
  std::vector<Macro> out;
  for (const auto& [a, b] : runs) {
    std::map<Macro, int> n;
    for (int t = std::max(a, l.start); t <= std::min(b, l.end()); ++t) ++n[l.at(t).macro];
    if (n.empty()) continue;
    const auto m = std::max_element(n.begin(), n.end(), [](const auto& x, const auto& y) { return x.second < y.second; });
    if (out.empty() || out.back() != m->first) out.push_back(m->first);
  }
  return out;
}

std::optional<Associative> associate(const CounterfactualDataset& d, const ActionLabels& factual_ego, AgentId ego) {
  std::vector<std::pair<int, int>> runs;
  for (int t = std::max(d.window.u, factual_ego.start); t <= std::min(d.n, factual_ego.end()); ++t)
    if (runs.empty() || factual_ego.at(t).macro != factual_ego.at(runs.back().second).macro) runs.emplace_back(t, t);
    else runs.back().second = t;
  if (runs.empty()) runs.emplace_back(d.window.u, d.n);
  std::map<std::vector<Macro>, int> counts;
  int matches = 0;
  for (const auto& r : d.records) {
    if (!r.y) continue;
    ++matches;
    const auto it = r.labels.find(ego);
    if (it == r.labels.end()) continue;
    ++counts[coarse_plan(it->second, runs)];
  }
  if (counts.empty()) return std::nullopt;
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it)
    if (it->second > best->second) best = it;
  return Associative{ego, best->first, static_cast<double>(best->second) / matches, matches};
}

}  // namespace

AttributionReport explain_query(const Scenario& scenario, const JointTrace& factual, const Query& q,
                                const CausalConfig& cfg) {
  const Prepared p = prepare(scenario, factual, q, cfg);
  AttributionReport rep;
  rep.query = q;
  rep.window = p.window;
  rep.tau = p.tau;
  rep.tau_teleological = p.tau_teleological;
  rep.n = p.ref.end();
  rep.ego = p.ref.ego();
  rep.K = cfg.K;
  rep.alpha = cfg.alpha;
  rep.seed = cfg.seed;
  rep.warnings = p.warnings;

  if (q.kind == QueryKind::What) {
    const ActionLabels lv = label_actions(p.ref, q.vid, scenario.graph);
    rep.associative = Associative{q.vid, collapsed_macros(lv, p.window.u, p.window.v), 1.0, 1};
    rep.K = 0;
    rep.teleological_degenerate = rep.mechanistic_degenerate = true;
    return rep;
  }

  const CounterfactualDataset dm = sample_counterfactuals(scenario, p.ref, p.tau, q, p.window, cfg);
  const CounterfactualDataset dt =
      p.tau_teleological == p.tau ? dm : sample_counterfactuals(scenario, p.ref, p.tau_teleological, q, p.window, cfg);
  rep.y = dm.ys();
  rep.y_teleological = dt.ys();
  try {
    rep.mechanistic = mechanistic_attribution(dm, SlicePlan{{p.window.u, dm.n}}, cfg);
  } catch (const DegenerateError& e) {
    rep.mechanistic_degenerate = true;
    rep.warnings.push_back(e.what());
  }
  try {
    rep.teleological = teleological_attribution(dt);
  } catch (const DegenerateError& e) {
    rep.teleological_degenerate = true;
    rep.warnings.push_back(e.what());
  }
  rep.associative = associate(dt, label_actions(p.ref, p.ref.ego(), scenario.graph), p.ref.ego());
  if (rep.mechanistic_degenerate && rep.teleological_degenerate)
    throw DegenerateError("degenerate dataset: the queried outcome does not vary across counterfactual samples");
  return rep;
}

nlohmann::json SweepResult::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points) {
    nlohmann::json mean = nlohmann::json::object(), ci = nlohmann::json::object();
    for (const auto& [k, v] : p.mean) mean[k] = v;
    for (const auto& [k, v] : p.ci) ci[k] = {v.first, v.second};
    pts.push_back({{"x", p.x},
                   {"repeats", p.repeats},
                   {"degenerate", p.degenerate},
                   {"top", p.top},
                   {"mean", mean},
                   {"ci", ci},
                   {"per_repeat", p.per_repeat}});
  }
  return {{"kind", kind}, {"slice", slice}, {"points", pts}};
}

namespace {

void summarise(SweepPoint& pt, const std::vector<std::string>& names, const CausalConfig& cfg, std::uint64_t seed) {
  std::vector<FeatureStat> stats;
  for (std::size_t c = 0; c < names.size(); ++c) {
    std::vector<double> vals;
    for (const auto& rep : pt.per_repeat)
      if (!rep.empty()) {
        const auto it = rep.find(names[c]);
        vals.push_back(it == rep.end() ? 0.0 : it->second);
      }
    if (vals.empty()) continue;
    FeatureStat f;
    f.name = names[c];
    double s = 0.0;
    for (double v : vals) s += v;
    f.mean = s / static_cast<double>(vals.size());
    f.ci = stats::bootstrap_ci(vals, 0.95, cfg.bootstrap_resamples, derive_seed(seed, c));
    pt.mean[f.name] = f.mean;
    pt.ci[f.name] = f.ci;
    stats.push_back(std::move(f));
  }
  rank_features(stats);
  if (!stats.empty()) pt.top = stats.front().name;
}

}  // namespace

SweepResult sweep_sample_size(const Scenario& scenario, const JointTrace& factual, const Query& q,
                              const CausalConfig& cfg, const std::vector<int>& sizes, int repeats, int master) {
  const Prepared p = prepare(scenario, factual, q, cfg);
  const Sampler s(scenario, p.ref, p.tau, cfg);
  CounterfactualDataset d;
  d.records = s.draw(0, master, cfg.seed);
  d.tau = p.tau;
  d.n = p.ref.end();
  d.query = q;
  d.window = p.window;
  d.seed = cfg.seed;
  d.alpha = cfg.alpha;
  label_outcomes(d, scenario.graph);
  const auto slices = make_slices(d.tau, SlicePlan{{p.window.u, d.n}});
  SweepResult res;
  res.kind = "size";
  res.slice = static_cast<int>(slices.size()) - 1;
  const DesignMatrix dm = design_matrix(d, slices.back(), cfg.thresholds);
  const auto y = d.ys();

  for (int K : sizes) {
    SweepPoint pt;
    pt.x = K;
    pt.repeats = repeats;
    pt.per_repeat.assign(static_cast<std::size_t>(repeats), {});
    std::vector<char> bad(static_cast<std::size_t>(repeats), 0);
    CausalConfig inner = cfg;
    inner.threads = 1;
    parallel_for(repeats, cfg.threads, [&](int r) {
      const std::uint64_t rs = derive_seed(cfg.seed, static_cast<std::uint64_t>(K) * 1000 + r);
      Rng rng(rs);
      std::vector<int> idx(d.records.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      rng.shuffle(idx);
      idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(K)));
      std::sort(idx.begin(), idx.end());
      DesignMatrix sub;
      Eigen::MatrixXd X(static_cast<Eigen::Index>(idx.size()), dm.X.cols());
      std::vector<int> ys;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        X.row(static_cast<Eigen::Index>(i)) = dm.X.row(idx[i]);
        ys.push_back(y[static_cast<std::size_t>(idx[i])]);
      }
      std::vector<Eigen::Index> keep;
      for (Eigen::Index c = 0; c < X.cols(); ++c)
        if (X.col(c).maxCoeff() != X.col(c).minCoeff()) keep.push_back(c);
      sub.X.resize(X.rows(), static_cast<Eigen::Index>(keep.size()));
      for (std::size_t j = 0; j < keep.size(); ++j) {
        sub.X.col(static_cast<Eigen::Index>(j)) = X.col(keep[j]);
        sub.names.push_back(dm.names[static_cast<std::size_t>(keep[j])]);
      }
      if (sub.names.empty()) {
        bad[static_cast<std::size_t>(r)] = 1;
        return;
      }
      try {
        std::map<std::string, double> m;
        for (const auto& f : fit_features(sub, y_vector(ys), inner, rs, false)) m[f.name] = f.mean;
        for (const auto& n : dm.names) m.emplace(n, 0.0);
        pt.per_repeat[static_cast<std::size_t>(r)] = std::move(m);
      } catch (const DegenerateError&) {
        bad[static_cast<std::size_t>(r)] = 1;
      } catch (const std::invalid_argument&) {
        bad[static_cast<std::size_t>(r)] = 1;
      }
    });
    for (char b : bad) pt.degenerate += b;
    summarise(pt, dm.names, cfg, derive_seed(cfg.seed, static_cast<std::uint64_t>(K)));
    res.points.push_back(std::move(pt));
  }
  return res;
}

SweepResult sweep_alpha(const Scenario& scenario, const JointTrace& factual, const Query& q, const CausalConfig& cfg,
                        const std::vector<double>& alphas, int K) {
  const Prepared p = prepare(scenario, factual, q, cfg);
  SweepResult res;
  res.kind = "alpha";
  std::optional<Sampler> first;
  for (double a : alphas) {
    CausalConfig c = cfg;
    c.alpha = a;
    c.K = K;
    const Sampler s(scenario, p.ref, p.tau, c);
    if (first) s.share_plans(*first);
    CounterfactualDataset d;
    d.records = s.draw(0, K, cfg.seed);
    if (!first) first.emplace(s);
    else first->share_plans(s);
    d.tau = p.tau;
    d.n = p.ref.end();
    d.query = q;
    d.window = p.window;
    d.seed = cfg.seed;
    d.alpha = a;
    label_outcomes(d, scenario.graph);
    SweepPoint pt;
    pt.x = a;
    pt.repeats = 1;
    const auto slices = make_slices(d.tau, SlicePlan{{p.window.u, d.n}});
    res.slice = static_cast<int>(slices.size()) - 1;
    try {
      if (d.degenerate) throw DegenerateError("degenerate");
      const DesignMatrix dm = design_matrix(d, slices.back(), c.thresholds);
      if (dm.names.empty()) throw DegenerateError("constant");
      const auto fs = fit_features(dm, y_vector(d.ys()), c, derive_seed(cfg.seed, 100 + res.slice), false);
      std::map<std::string, double> m;
      for (const auto& f : fs) {
        m[f.name] = f.mean;
        pt.mean[f.name] = f.mean;
        pt.ci[f.name] = f.ci;
      }
      pt.top = fs.front().name;
      pt.per_repeat.push_back(std::move(m));
    } catch (const DegenerateError&) {
      pt.degenerate = 1;
      pt.per_repeat.emplace_back();
    }
    res.points.push_back(std::move(pt));
  }
  return res;
}

}  // namespace cema
