#ifndef CEMA_PLANNER_HPP
#define CEMA_PLANNER_HPP

#include "cema/prediction.hpp"
#include "cema/traffic.hpp"
#include "cema/world.hpp"

#include <Eigen/Core>

#include <array>
#include <map>
#include <string>
#include <vector>

namespace cema {

constexpr int kRewardDims = 5;
using RewardArray = Eigen::Matrix<double, kRewardDims, 1>;

struct RewardVector {
  double time_to_goal = 0.0;
  double long_accel_cost = 0.0;
  double lat_accel_cost = 0.0;
  double collision = 0.0;
  double goal_reached = 0.0;

  RewardArray array() const;
  static RewardVector from_array(const RewardArray& a);
  static const std::array<std::string, kRewardDims>& names();
  bool operator==(const RewardVector&) const = default;
};

constexpr double kCollisionRadius = 1.25;

RewardVector reward(const JointTrace& trace, const Goal& ego_goal, const LaneGraph& graph);
// Reward over one agent's states; `others` supplies collision partners (may be null).
RewardVector reward_of_states(const std::vector<LocalState>& states, const Goal& goal, const LaneGraph& graph,
                              int horizon_end, const JointTrace* others = nullptr, AgentId self = -1);
double scalarize(const RewardVector& r, const RewardWeights& w);

struct PlanEntry {
  std::vector<Macro> macros;
  double probability = 0.0;
  int visits = 0;
  double mean_value = 0.0;
};

struct PlanDistribution {
  std::vector<PlanEntry> entries;  // sorted by descending probability, then macro order
  std::vector<Macro> greedy;       // max-visit path from the root

  const PlanEntry& mode() const;
  std::size_t sample(Rng& rng) const;
};

std::vector<MacroSpec> to_specs(const std::vector<Macro>& macros);

struct MctsOptions {
  PlannerConfig config;
  int horizon = 0;  // last timestep a rollout may reach
  // Non-ego plans held fixed for every rollout instead of sampling the posterior.
  const std::map<AgentId, std::vector<MacroSpec>>* fixed = nullptr;
  const std::map<AgentId, Goal>* fixed_goals = nullptr;
};

// UCT over macro sequences from the engine's current state.
PlanDistribution mcts_plan(const Engine& root, AgentId ego, const GoalPosterior& posterior, const Goal& ego_goal,
                           const MctsOptions& options, std::uint64_t seed);

PlanDistribution mcts_plan(const Scenario& scenario, const JointTrace& prefix, const GoalPosterior& posterior,
                           const Goal& ego_goal, int budget, std::uint64_t seed);

// Non-egos within the interaction radius of the ego at the engine's current time.
std::vector<AgentId> nearby_agents(const Engine& eng, AgentId ego, double radius);

// One receding-horizon step: posterior over nearby agents from `seen`, search, greedy plan.
std::vector<MacroSpec> plan_ego(const Engine& eng, const JointTrace& seen, const Goal& ego_goal,
                                const PlannerConfig& cfg, const PredictionConfig& prediction, std::uint64_t seed);

}  // namespace cema

#endif
