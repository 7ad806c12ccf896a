#ifndef CEMA_QUERY_HPP
#define CEMA_QUERY_HPP

#include "cema/behavior.hpp"
#include "cema/world.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cema {

enum class QueryKind { Why, WhatIf, What };
enum class Tense { Past, Present, Future };

std::string_view to_string(QueryKind k);
std::string_view to_string(Tense t);

struct Query {
  QueryKind kind = QueryKind::Why;
  AgentId vid = 0;
  Tense tense = Tense::Present;
  std::vector<std::string> actions;
  int query_time = 0;
  std::optional<int> action_time;
  bool negated = false;
  std::optional<std::vector<std::string>> factuals;

  nlohmann::json to_json() const;
  bool operator==(const Query&) const = default;
};

Query parse_query(std::string_view document);
Query parse_query(const nlohmann::json& document);
inline Query parse_query(const char* document) { return parse_query(std::string_view(document)); }

enum class WindowSource { FactualTrace, CounterfactualSample, MapPrediction };
std::string_view to_string(WindowSource s);

struct QueryWindow {
  int u = 0;
  int v = 0;
  WindowSource source = WindowSource::FactualTrace;
  bool operator==(const QueryWindow&) const = default;
};

using Run = std::pair<int, int>;

class UnmatchedQuery : public ValidationError {
 public:
  UnmatchedQuery(const std::string& what, std::vector<Run> candidates)
      : ValidationError(what), candidates_(std::move(candidates)) {}
  const std::vector<Run>& candidates() const { return candidates_; }

 private:
  std::vector<Run> candidates_;
};

bool label_matches(const ActionLabel& label, const std::vector<std::string>& actions);
bool in_tense(int t, Tense tense, int query_time);

// Maximal runs of timesteps whose label matches any listed action and that contain every listed action.
std::vector<Run> action_runs(const ActionLabels& labels, const std::vector<std::string>& actions);

// Tense-filtered run closest to query_time, or nullopt. `candidates` receives all unfiltered runs.
std::optional<Run> resolve_labels(const ActionLabels& labels, const std::vector<std::string>& actions, Tense tense,
                                  int query_time, std::vector<Run>* candidates = nullptr);

// Maximal run of identical labels starting at or containing t.
Run label_run_at(const ActionLabels& labels, int t);

struct LabelledSample {
  ActionLabels labels;  // of the queried agent
  double probability = 0.0;
};

// `factual` labels the queried agent on the factual trace; for future tense it should cover the
// factual prefix followed by the MAP prediction. Samples are only consulted when the factual fails to match.
QueryWindow resolve_window(const Query& q, const ActionLabels& factual, const std::vector<LabelledSample>& samples,
                           bool factual_is_prediction = false);

// Dominance over [u, v]: matched when the queried actions label at least half the window; then XOR negated.
int outcome_indicator(const ActionLabels& sample, const Query& q, const QueryWindow& w);
int outcome_indicator(const JointTrace& sample, const Query& q, const QueryWindow& w, const LaneGraph& graph);

}  // namespace cema

#endif
