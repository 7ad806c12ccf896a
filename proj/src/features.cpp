#include "cema/features.hpp"

#include <algorithm>
#include <stdexcept>

namespace cema {

int FeatureVector::get(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw std::out_of_range("no feature " + name);
  return values[static_cast<std::size_t>(it - names.begin())];
}

std::string feature_name(std::string_view property, AgentId vid) {
  return std::string(property) + "(" + std::to_string(vid) + ")";
}

bool parse_feature_name(const std::string& name, std::string& property, AgentId& vid) {
  const auto open = name.rfind('(');
  if (open == std::string::npos || name.empty() || name.back() != ')' || open == 0) return false;
  try {
    std::size_t used = 0;
    const std::string num = name.substr(open + 1, name.size() - open - 2);
    vid = std::stoi(num, &used);
    if (used != num.size()) return false;
  } catch (const std::exception&) {
    return false;
  }
  property = name.substr(0, open);
  return true;
}

FeatureVector featurise(const JointTrace& slice, AgentId ego, const Thresholds& th,
                        const std::map<AgentId, ActionLabels>& labels) {
  if (slice.frames.size() < 2) throw std::invalid_argument("featurise: slice shorter than 2 timesteps");
  const auto ego_states = slice.states_of(ego);
  if (ego_states.empty()) throw std::invalid_argument("featurise: ego absent from slice");
  double ego_v = 0.0;
  for (const auto& s : ego_states) ego_v += s.speed;
  ego_v /= static_cast<double>(ego_states.size());

  FeatureVector fv;
  auto push = [&](std::string_view prop, AgentId id, bool on) {
    fv.names.push_back(feature_name(prop, id));
    fv.values.push_back(on ? 1 : 0);
  };
  std::vector<AgentId> ids;
  for (const auto& a : slice.agents)
    if (a.id != ego) ids.push_back(a.id);
  std::sort(ids.begin(), ids.end());
  for (AgentId id : ids) {
    const auto st = slice.states_of(id);
    if (st.empty()) continue;
    double acc = 0.0, v = 0.0, vmin = st.front().speed;
    for (const auto& s : st) {
      acc += s.accel;
      v += s.speed;
      vmin = std::min(vmin, s.speed);
    }
    acc /= static_cast<double>(st.size());
    v /= static_cast<double>(st.size());
    const double dv = v - ego_v;
    push("accelerates", id, acc > th.delta_a);
    push("decelerates", id, acc < -th.delta_a);
    push("maintains", id, std::abs(acc) <= th.delta_a);
    push("faster", id, dv > th.delta_v);
    push("slower", id, dv < -th.delta_v);
    push("same_speed", id, std::abs(dv) <= th.delta_v);
    push("stops", id, vmin <= th.delta_s);

    std::map<Maneuver, int> man;
    std::map<Macro, int> mac;
    const auto it = labels.find(id);
    for (const auto& s : st) {
      ActionLabel l;
      if (it != labels.end() && it->second.covers(s.timestep)) l = it->second.at(s.timestep);
      ++man[l.maneuver];
      ++mac[l.macro];
    }
    auto longest = [](const auto& counts, auto first) {
      auto best = first;
      int n = -1;
      for (const auto& [k, c] : counts)
        if (c > n) {
          n = c;
          best = k;
        }
      return best;
    };
    const Maneuver lm = longest(man, Maneuver::LaneFollow);
    const Macro lc = longest(mac, Macro::Continue);
    for (Maneuver m : kAllManeuvers) push("maneuver:" + std::string(to_string(m)), id, m == lm);
    for (Macro m : kAllMacros) push("macro:" + std::string(to_string(m)), id, m == lc);
  }
  return fv;
}

}  // namespace cema
