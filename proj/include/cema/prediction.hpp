#ifndef CEMA_PREDICTION_HPP
#define CEMA_PREDICTION_HPP

#include "cema/behavior.hpp"
#include "cema/traffic.hpp"
#include "cema/world.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cema {

struct SmoothingParams {
  double alpha = 0.0;
  int d = 1;
};

// (theta_i + alpha) / (1 + d * alpha) with d = theta.size().
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> smooth(const Eigen::MatrixBase<Derived>& theta,
                                                                  typename Derived::Scalar alpha) {
  using Scalar = typename Derived::Scalar;
  if (alpha < Scalar(0)) throw std::invalid_argument("smooth: alpha must be non-negative");
  const Scalar d = static_cast<Scalar>(theta.size());
  return ((theta.array() + alpha) / (Scalar(1) + d * alpha)).matrix();
}

std::vector<double> smooth(const std::vector<double>& theta, double alpha);

struct PredictedTrajectory {
  std::string variant;
  std::vector<MacroSpec> macros;
  double probability = 0.0;
  double cost = 0.0;
  std::vector<LocalState> states;
};

struct GoalHypothesis {
  Goal goal;
  double probability = 0.0;
  std::vector<PredictedTrajectory> trajectories;
};

struct AgentPosterior {
  AgentId agent = 0;
  std::vector<GoalHypothesis> goals;
  bool uniform_fallback = false;
};

struct GoalPosterior {
  std::vector<AgentPosterior> agents;

  const AgentPosterior* find(AgentId id) const;
  nlohmann::json to_json(const LaneGraph& graph) const;
};

struct PredictionConfig {
  double beta = 1.0;
  RewardWeights weights;
  Kinematics kin;
  double horizon_s = 60.0;
};

std::vector<Goal> enumerate_goals(const Scenario& scenario, AgentId agent);
std::vector<Goal> enumerate_goals(const LaneGraph& graph, int lane, AgentId agent);

// Per-goal probabilities; `fallback` reports the uniform case when no goal is reachable.
std::vector<double> goal_posterior(const std::vector<LocalState>& observed, const std::vector<Goal>& goals,
                                   const LaneGraph& graph, double beta, const PredictionConfig& cfg = {},
                                   bool* fallback = nullptr);

// Single-agent free-flow simulation of a macro plan from a state.
std::vector<LocalState> simulate_alone(const LaneGraph& graph, const LocalState& start, const Goal& goal,
                                       const std::vector<MacroSpec>& macros, const PredictionConfig& cfg);
double free_flow_cost(const std::vector<LocalState>& states, const Goal& goal, const LaneGraph& graph,
                      const PredictionConfig& cfg);

// Observed states per non-ego, taken from the trace.
GoalPosterior build_posterior(const JointTrace& observed, const LaneGraph& graph, const PredictionConfig& cfg,
                              const std::vector<AgentId>& agents);

struct SmoothingLevels {
  bool goals = true;
  bool trajectories = true;
};

GoalPosterior smooth(const GoalPosterior& posterior, double alpha, SmoothingLevels levels = {});

struct Assignment {
  struct Choice {
    AgentId agent;
    int goal;
    int trajectory;
  };
  std::vector<Choice> choices;
  double probability = 1.0;

  const Choice* find(AgentId id) const;
  std::string key(const std::vector<AgentId>& subset) const;
};

Assignment sample_assignment(const GoalPosterior& posterior, Rng& rng);

struct EgoChoice {
  std::vector<MacroSpec> macros;
  double probability = 1.0;
};

// Supplies the ego's plan for a rollout given the root state and the non-ego assignment.
using EgoPolicy = std::function<EgoChoice(const Engine& root, const Assignment& assignment, Rng& rng)>;

struct Rollout {
  JointTrace trace;  // frames from `from` to `horizon`
  Assignment assignment;
  EgoChoice ego;
  double probability = 1.0;
};

// Ego replanning inside a rollout, run every `period` steps once the current macro can be interrupted.
struct ClosedLoop {
  int period = 40;
  std::function<std::vector<MacroSpec>(const Engine& eng, std::uint64_t seed)> replan;
};

// Engine at the last frame of the prefix with ego goal from the scenario.
Engine root_engine(const Scenario& scenario, const JointTrace& prefix, const Kinematics& kin = {});

Rollout sample_rollout(const Scenario& scenario, const JointTrace& prefix, const GoalPosterior& posterior,
                       int horizon, std::uint64_t seed, const EgoPolicy& ego_policy, const Kinematics& kin = {},
                       const ClosedLoop* loop = nullptr);

JointTrace sample_closed_loop(const Scenario& scenario, const JointTrace& prefix, const GoalPosterior& posterior,
                              int horizon, std::uint64_t seed, const EgoPolicy& ego_policy,
                              const Kinematics& kin = {});

}  // namespace cema

#endif
