#ifndef CEMA_TESTS_SUPPORT_HPP
#define CEMA_TESTS_SUPPORT_HPP

#include "cema/service.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace cema::testing {

inline std::filesystem::path source_dir() { return CEMA_SOURCE_DIR; }

inline Scenario scenario(const std::string& name) {
  return service::read_scenario(source_dir() / "scenarios" / (name + ".json"));
}

inline Query query(const std::string& name) {
  return parse_query(std::string_view(service::read_file(source_dir() / "queries" / (name + ".json"))));
}

// One straight lane from (0,0) to (length,0); the ego drives to a box at the end.
inline nlohmann::json straight_road(double length = 200.0, double speed_limit = 10.0) {
  return {{"format", "cema-scenario/1"},
          {"name", "straight"},
          {"max_steps", 200},
          {"lanes", {{{"id", "A"}, {"centerline", {{0, 0}, {length, 0}}}, {"width", 3.5}, {"speed_limit", speed_limit}}}},
          {"agents",
           {{{"id", 0},
             {"ego", true},
             {"spawn", {{"x", 10}, {"y", 0}, {"heading", 0}, {"speed", speed_limit}}},
             {"goal", {{"box", {length - 10, -2, length, 2}}}}}}}};
}

inline Scenario load(const nlohmann::json& doc) { return load_scenario(doc.dump()); }

inline ActionLabels labels_of(const std::vector<std::pair<int, ActionLabel>>& runs, int start = 0) {
  ActionLabels l;
  l.start = start;
  for (const auto& [len, lab] : runs)
    for (int i = 0; i < len; ++i) l.labels.push_back(lab);
  return l;
}

}  // namespace cema::testing

#endif
