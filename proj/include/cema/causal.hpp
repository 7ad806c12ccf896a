#ifndef CEMA_CAUSAL_HPP
#define CEMA_CAUSAL_HPP

#include "cema/features.hpp"
#include "cema/planner.hpp"
#include "cema/prediction.hpp"
#include "cema/query.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace cema {

enum class CauseMode { Teleological, Mechanistic };

struct RollbackConfig {
  double tau_min = 2.0;
  double tau_max = 5.0;
  CauseMode mode = CauseMode::Mechanistic;
};

// `clamped` reports that the band reached before the trace start.
int rollback(const JointTrace& trace, const QueryWindow& w, const RollbackConfig& cfg, const ActionLabels& ego_labels,
             bool* clamped = nullptr);

struct CausalConfig {
  int K = 100;
  double alpha = 0.1;
  std::uint64_t seed = 21;
  double tau_min = 2.0;
  double tau_max = 5.0;
  Thresholds thresholds;
  double lambda = 1.0;
  int folds = 5;
  int repeats = 7;
  double weight_floor = 0.05;
  SmoothingLevels smoothing;
  // Run a fresh search for every rollout instead of sampling a cached plan distribution.
  bool replan = false;
  // Use the modal ego plan instead of sampling one.
  bool map_ego = false;
  // After the sampled plan at tau the ego replans every planner period, as in the factual run.
  bool closed_loop = true;
  int budget = -1;  // negative: the scenario's planner budget
  int threads = 0;  // 0: hardware concurrency
  PredictionConfig prediction;
  int bootstrap_resamples = 1000;
  // Rollouts run to max(n, tau + this) so that reward sees goal arrival after the factual end.
  double reward_horizon_s = 30.0;
};

struct Record {
  JointTrace trace;  // [tau + 1, n]; reward uses the full rollout
  int y = 0;
  RewardVector r;
  double probability = 0.0;
  std::map<AgentId, ActionLabels> labels;  // over the prefix and the rollout
  std::vector<Macro> ego_plan;
};

struct CounterfactualDataset {
  std::vector<Record> records;
  int tau = 0;
  int n = 0;
  Query query;
  QueryWindow window;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  bool degenerate = false;

  std::vector<int> ys() const;
};

// Rollouts from the factual state at tau, without outcome labels.
class Sampler {
 public:
  Sampler(const Scenario& scenario, const JointTrace& factual, int tau, const CausalConfig& cfg);

  // Records k = first .. first + count - 1; record k depends only on (seed, k).
  std::vector<Record> draw(int first, int count, std::uint64_t seed) const;
  // Most probable goal and trajectory for every non-ego and the modal ego plan.
  Record draw_map() const;
  void share_plans(const Sampler& other) const { plans_.insert(other.plans_.begin(), other.plans_.end()); }
  const GoalPosterior& posterior() const { return posterior_; }
  int tau() const { return tau_; }
  int horizon() const { return n_; }
  int rollout_horizon() const { return std::max(n_, tau_ + static_cast<int>(std::lround(cfg_.reward_horizon_s * kFps))); }

 private:
  PlanDistribution search(const Assignment& a, std::uint64_t seed) const;
  void prepare_plans(const std::vector<Assignment>& assignments) const;
  Record finish(const Rollout& ro) const;
  ClosedLoop loop() const;

  const Scenario* scenario_;
  JointTrace prefix_;
  int tau_;
  int n_;
  CausalConfig cfg_;
  GoalPosterior posterior_;
  std::vector<AgentId> near_;
  mutable std::map<std::string, PlanDistribution> plans_;
};

CounterfactualDataset sample_counterfactuals(const Scenario& scenario, const JointTrace& factual, int tau,
                                             const Query& q, const QueryWindow& w, const CausalConfig& cfg);

// Fills y from the query; marks degenerate when one class is absent.
void label_outcomes(CounterfactualDataset& d, const LaneGraph& graph);

struct SlicePlan {
  std::vector<int> endpoints;  // p_1 .. p_|P|; p_0 = tau + 1 is implicit
};

struct Slice {
  int from = 0;
  int to = 0;  // inclusive
};

// Slices [p_{j-1}, p_j - 1], the last one closed at n.
std::vector<Slice> make_slices(int tau, const SlicePlan& plan);

struct FeatureStat {
  std::string name;
  double mean = 0.0;
  std::pair<double, double> ci{0.0, 0.0};
  std::vector<double> samples;
};

struct SliceAttribution {
  int index = 0;
  std::string label;
  Slice span;
  std::vector<FeatureStat> features;
  int columns = 0;
  bool constant = false;
};

// Sort by decreasing |mean|, positive first on ties, then by name.
void rank_features(std::vector<FeatureStat>& features);

struct DesignMatrix {
  std::vector<std::string> names;
  Eigen::MatrixXd X;
};

// Union of featurised columns over the records, absent entries zero, constant columns dropped.
DesignMatrix design_matrix(const CounterfactualDataset& d, const Slice& s, const Thresholds& th);

std::vector<SliceAttribution> mechanistic_attribution(const CounterfactualDataset& d, const SlicePlan& plan,
                                                      const CausalConfig& cfg);

struct TeleoEntry {
  std::string component;
  double delta = 0.0;
  double mean_match = 0.0;
  double mean_nonmatch = 0.0;
};

std::vector<TeleoEntry> teleological_attribution(const std::vector<int>& y, const std::vector<RewardVector>& r);
std::vector<TeleoEntry> teleological_attribution(const CounterfactualDataset& d);

struct Associative {
  AgentId vehicle = 0;
  std::vector<Macro> plan;  // modal collapsed macro sequence over [u, n] among matching rollouts
  double support = 0.0;
  int matches = 0;
};

struct AttributionReport {
  Query query;
  QueryWindow window;
  int tau = 0;
  int tau_teleological = 0;
  int n = 0;
  AgentId ego = 0;
  int K = 0;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  std::vector<TeleoEntry> teleological;
  std::vector<SliceAttribution> mechanistic;
  bool teleological_degenerate = false;
  bool mechanistic_degenerate = false;
  std::vector<int> y;
  std::vector<int> y_teleological;
  std::optional<Associative> associative;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  static AttributionReport from_json(const nlohmann::json& j);
};

// Factual trace the query refers to: the trace itself, or the prefix up to query_time followed by
// the MAP prediction for future-tense queries.
JointTrace reference_trace(const Scenario& scenario, const JointTrace& factual, const Query& q,
                           const CausalConfig& cfg, bool* predicted = nullptr);

AttributionReport explain_query(const Scenario& scenario, const JointTrace& factual, const Query& q,
                                const CausalConfig& cfg);

struct SweepPoint {
  double x = 0.0;  // K or alpha
  int repeats = 0;
  int degenerate = 0;
  std::string top;
  std::map<std::string, double> mean;
  std::map<std::string, std::pair<double, double>> ci;
  std::vector<std::map<std::string, double>> per_repeat;  // mean weights of each repeat, empty when degenerate
};

struct SweepResult {
  std::string kind;
  int slice = 0;
  std::vector<SweepPoint> points;
  nlohmann::json to_json() const;
};

inline const std::vector<double>& alpha_schedule() {
  static const std::vector<double> a{0,    0.1,  0.14, 0.18, 0.25, 0.34, 0.45,  0.62,  0.83,  1.13, 1.53,
                                     2.07, 2.8,  3.79, 5.13, 6.95, 9.41, 12.74, 17.25, 23.36, 31.62};
  return a;
}

inline std::vector<int> default_sizes() {
  std::vector<int> k;
  for (int i = 5; i <= 100; i += 5) k.push_back(i);
  return k;
}

// Subsamples K records without replacement from a master dataset of `master` rollouts.
SweepResult sweep_sample_size(const Scenario& scenario, const JointTrace& factual, const Query& q,
                              const CausalConfig& cfg, const std::vector<int>& sizes, int repeats, int master = 500);

SweepResult sweep_alpha(const Scenario& scenario, const JointTrace& factual, const Query& q, const CausalConfig& cfg,
                        const std::vector<double>& alphas, int K = 50);

}  // namespace cema

#endif
