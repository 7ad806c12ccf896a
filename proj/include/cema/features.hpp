#ifndef CEMA_FEATURES_HPP
#define CEMA_FEATURES_HPP

#include "cema/behavior.hpp"
#include "cema/world.hpp"

#include <map>
#include <string>
#include <vector>

namespace cema {

struct Thresholds {
  double delta_a = 0.1;
  double delta_v = 0.1;
  double delta_s = 0.1;
};

struct FeatureVector {
  std::vector<std::string> names;
  std::vector<int> values;
  int slice = 0;

  int get(const std::string& name) const;
  std::size_t size() const { return names.size(); }
};

constexpr int kFeaturesPerAgent = 3 + 3 + 1 + 7 + 5;

std::string feature_name(std::string_view property, AgentId vid);
// Splits "<property>(<vid>)"; returns false for malformed names.
bool parse_feature_name(const std::string& name, std::string& property, AgentId& vid);

// Features for every non-ego present in the slice; absent agents contribute no columns.
FeatureVector featurise(const JointTrace& slice, AgentId ego, const Thresholds& thresholds,
                        const std::map<AgentId, ActionLabels>& labels);

}  // namespace cema

#endif
