#ifndef CEMA_SIMULATOR_HPP
#define CEMA_SIMULATOR_HPP

#include "cema/planner.hpp"
#include "cema/prediction.hpp"

#include <map>
#include <string>

namespace cema {

constexpr int kWindowSteps = 5 * kFps;

struct SimOptions {
  PredictionConfig prediction;
};

// Trace of exactly max_steps frames, or fewer if every agent has left the map.
JointTrace run(const Scenario& scenario, int max_steps, std::uint64_t seed, const SimOptions& options = {});

// Frames within `radius` steps of `now`.
JointTrace window(const JointTrace& trace, int now, int radius = kWindowSteps);

std::map<AgentId, ActionLabels> label_all(const JointTrace& trace, const LaneGraph& graph);

std::string export_jsonl(const JointTrace& trace, const LaneGraph& graph);
JointTrace import_jsonl(std::string_view text, const Scenario& scenario);

}  // namespace cema

#endif
