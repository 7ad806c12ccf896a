#include "cema/query.hpp"

#include <algorithm>
#include <limits>

namespace cema {

std::string_view to_string(QueryKind k) {
  switch (k) {
    case QueryKind::Why: return "why";
    case QueryKind::WhatIf: return "whatif";
    case QueryKind::What: return "what";
  }
  return "why";
}

std::string_view to_string(Tense t) {
  switch (t) {
    case Tense::Past: return "past";
    case Tense::Present: return "present";
    case Tense::Future: return "future";
  }
  return "present";
}

std::string_view to_string(WindowSource s) {
  switch (s) {
    case WindowSource::FactualTrace: return "factual-trace";
    case WindowSource::CounterfactualSample: return "counterfactual-sample";
    case WindowSource::MapPrediction: return "map-prediction";
  }
  return "factual-trace";
}

nlohmann::json Query::to_json() const {
  nlohmann::json j = {{"type", std::string(to_string(kind))},
                      {"vid", vid},
                      {"tense", std::string(to_string(tense))},
                      {"actions", actions},
                      {"query_time", query_time},
                      {"negated", negated}};
  if (action_time) j["action_time"] = *action_time;
  if (factuals) j["factuals"] = *factuals;
  return j;
}

namespace {

std::vector<std::string> action_list(const nlohmann::json& j, const char* key) {
  if (!j.is_array()) throw ValidationError(std::string("query: '") + key + "' must be an array of action names");
  std::vector<std::string> out;
  for (const auto& a : j) {
    if (!a.is_string()) throw ValidationError(std::string("query: '") + key + "' must contain strings");
    const auto s = a.get<std::string>();
    if (!is_action_name(s)) throw ValidationError("query: unknown action name '" + s + "'");
    out.push_back(s);
  }
  return out;
}

int int_field(const nlohmann::json& d, const char* key) {
  const auto& v = d.at(key);
  if (!v.is_number_integer()) throw ValidationError(std::string("query: '") + key + "' must be an integer");
  const int x = v.get<int>();
  if (x < 0) throw ValidationError(std::string("query: '") + key + "' must be non-negative");
  return x;
}

}  // namespace

Query parse_query(const nlohmann::json& d) {
  if (!d.is_object()) throw ValidationError("query: document must be an object");
  static const std::vector<std::string> known{"type",       "vid",         "tense",   "actions",
                                              "query_time", "action_time", "negated", "factuals"};
  for (const auto& [k, v] : d.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ValidationError("query: unknown field '" + k + "'");
  Query q;
  if (!d.contains("type") || !d["type"].is_string()) throw ValidationError("query: missing field 'type'");
  const auto type = d["type"].get<std::string>();
  if (type == "why") q.kind = QueryKind::Why;
  else if (type == "whatif") q.kind = QueryKind::WhatIf;
  else if (type == "what") q.kind = QueryKind::What;
  else throw ValidationError("query: unknown type '" + type + "'");
  if (!d.contains("vid")) throw ValidationError("query: missing field 'vid'");
  if (!d["vid"].is_number_integer()) throw ValidationError("query: 'vid' must be an integer");
  q.vid = d["vid"].get<int>();
  if (!d.contains("query_time")) throw ValidationError("query: missing field 'query_time'");
  q.query_time = int_field(d, "query_time");
  if (d.contains("action_time")) q.action_time = int_field(d, "action_time");
  if (q.kind == QueryKind::What && !q.action_time) throw ValidationError("query: 'what' requires 'action_time'");
  if (d.contains("negated")) {
    if (!d["negated"].is_boolean()) throw ValidationError("query: 'negated' must be a boolean");
    q.negated = d["negated"].get<bool>();
  }
  if (d.contains("factuals")) q.factuals = action_list(d["factuals"], "factuals");
  if (q.kind == QueryKind::WhatIf && !q.factuals && !q.negated)
    throw ValidationError("query: 'whatif' requires 'factuals' or negated=true");
  if (d.contains("actions")) q.actions = action_list(d["actions"], "actions");
  if (q.kind != QueryKind::What && q.actions.empty()) throw ValidationError("query: missing field 'actions'");
  if (d.contains("tense")) {
    if (!d["tense"].is_string()) throw ValidationError("query: 'tense' must be a string");
    const auto t = d["tense"].get<std::string>();
    if (t == "past") q.tense = Tense::Past;
    else if (t == "present") q.tense = Tense::Present;
    else if (t == "future") q.tense = Tense::Future;
    else throw ValidationError("query: unknown tense '" + t + "'");
  } else if (q.kind != QueryKind::What) {
    throw ValidationError("query: missing field 'tense'");
  }
  return q;
}

Query parse_query(std::string_view document) {
  nlohmann::json d;
  try {
    d = nlohmann::json::parse(document);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("query: invalid JSON: ") + e.what());
  }
  return parse_query(d);
}

bool label_matches(const ActionLabel& label, const std::vector<std::string>& actions) {
  const auto man = to_string(label.maneuver);
  const auto mac = to_string(label.macro);
  return std::any_of(actions.begin(), actions.end(), [&](const std::string& a) { return a == man || a == mac; });
}

bool in_tense(int t, Tense tense, int query_time) {
  switch (tense) {
    case Tense::Past: return t < query_time;
    case Tense::Present: return t == query_time;
    case Tense::Future: return t > query_time;
  }
  return false;
}

namespace {

std::vector<Run> runs_in(const ActionLabels& labels, const std::vector<std::string>& actions, int lo, int hi) {
  std::vector<Run> out;
  lo = std::max(lo, labels.start);
  hi = std::min(hi, labels.end());
  for (int t = lo; t <= hi;) {
    if (!label_matches(labels.at(t), actions)) {
      ++t;
      continue;
    }
    int e = t;
    while (e + 1 <= hi && label_matches(labels.at(e + 1), actions)) ++e;
    bool all = true;
    for (const auto& a : actions) {
      bool seen = false;
      for (int k = t; k <= e && !seen; ++k) seen = label_matches(labels.at(k), {a});
      all = all && seen;
    }
    if (all) out.emplace_back(t, e);
    t = e + 1;
  }
  return out;
}

std::vector<Run> tense_runs(const ActionLabels& labels, const std::vector<std::string>& actions, Tense tense,
                            int qt) {
  const int big = std::numeric_limits<int>::max() / 2;
  switch (tense) {
    case Tense::Past: return runs_in(labels, actions, labels.start, qt - 1);
    case Tense::Future: return runs_in(labels, actions, qt + 1, big);
    case Tense::Present: {
      std::vector<Run> out;
      for (const auto& r : runs_in(labels, actions, labels.start, big))
        if (r.first <= qt && qt <= r.second) out.push_back(r);
      return out;
    }
  }
  return {};
}

int distance(const Run& r, int qt) {
  if (qt < r.first) return r.first - qt;
  if (qt > r.second) return qt - r.second;
  return 0;
}

std::optional<Run> closest(const std::vector<Run>& runs, int qt) {
  std::optional<Run> best;
  for (const auto& r : runs)
    if (!best || distance(r, qt) < distance(*best, qt)) best = r;
  return best;
}

std::string describe(const Query& q) {
  std::string s = std::string(to_string(q.kind)) + " query for vehicle " + std::to_string(q.vid) + " [";
  for (std::size_t i = 0; i < q.actions.size(); ++i) s += (i ? "," : "") + q.actions[i];
  return s + "] at " + std::to_string(q.query_time) + " (" + std::string(to_string(q.tense)) + ")";
}

}  // namespace

std::vector<Run> action_runs(const ActionLabels& labels, const std::vector<std::string>& actions) {
  if (labels.empty()) return {};
  return runs_in(labels, actions, labels.start, labels.end());
}

std::optional<Run> resolve_labels(const ActionLabels& labels, const std::vector<std::string>& actions, Tense tense,
                                  int query_time, std::vector<Run>* candidates) {
  if (candidates) *candidates = action_runs(labels, actions);
  if (labels.empty()) return std::nullopt;
  return closest(tense_runs(labels, actions, tense, query_time), query_time);
}

Run label_run_at(const ActionLabels& labels, int t) {
  if (!labels.covers(t)) throw std::out_of_range("label_run_at: timestep outside labels");
  const ActionLabel& l = labels.at(t);
  int a = t, b = t;
  while (a - 1 >= labels.start && labels.at(a - 1) == l) --a;
  while (b + 1 <= labels.end() && labels.at(b + 1) == l) ++b;
  return {a, b};
}

QueryWindow resolve_window(const Query& q, const ActionLabels& factual, const std::vector<LabelledSample>& samples,
                           bool factual_is_prediction) {
  const auto fsrc = [&](int u) {
    return factual_is_prediction && u > q.query_time ? WindowSource::MapPrediction : WindowSource::FactualTrace;
  };
  if (q.kind == QueryKind::What) {
    const int u = *q.action_time;
    if (!factual.covers(u)) throw UnmatchedQuery(describe(q) + ": action_time outside the trace", {});
    return {u, label_run_at(factual, u).second, fsrc(u)};
  }

  std::vector<Run> cands;
  if (!(q.kind == QueryKind::WhatIf && !q.negated)) {
    if (const auto r = resolve_labels(factual, q.actions, q.tense, q.query_time, &cands))
      return {r->first, r->second, fsrc(r->first)};
  }

  std::optional<Run> ref;
  if (q.factuals) {
    ref = resolve_labels(factual, *q.factuals, q.tense, q.query_time);
  } else {
    const int t = q.tense == Tense::Past ? q.query_time - 1 : q.tense == Tense::Future ? q.query_time + 1 : q.query_time;
    if (factual.covers(t)) ref = label_run_at(factual, t);
  }
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return samples[a].probability > samples[b].probability; });
  for (std::size_t i : order) {
    const auto runs = tense_runs(samples[i].labels, q.actions, q.tense, q.query_time);
    if (runs.empty()) continue;
    for (const auto& r : action_runs(samples[i].labels, q.actions)) cands.push_back(r);
    if (!ref) {
      const Run r = *closest(runs, q.query_time);
      return {r.first, r.second, WindowSource::CounterfactualSample};
    }
    int best_overlap = -1;
    Run best{0, 0};
    for (const auto& r : runs) {
      const int ov = std::min(r.second, ref->second) - std::max(r.first, ref->first) + 1;
      if (ov > best_overlap) {
        best_overlap = ov;
        best = r;
      }
    }
    if (best_overlap > 0)
      return {std::max(best.first, ref->first), std::min(best.second, ref->second), WindowSource::CounterfactualSample};
    return {best.first, best.second, WindowSource::CounterfactualSample};
  }
  throw UnmatchedQuery(describe(q) + ": unmatched query", cands);
}

int outcome_indicator(const ActionLabels& sample, const Query& q, const QueryWindow& w) {
  int hits = 0;
  for (int t = w.u; t <= w.v; ++t)
    if (sample.covers(t) && label_matches(sample.at(t), q.actions)) ++hits;
  const bool present = 2 * hits >= (w.v - w.u + 1);
  return (present != q.negated) ? 1 : 0;
}

int outcome_indicator(const JointTrace& sample, const Query& q, const QueryWindow& w, const LaneGraph& graph) {
  return outcome_indicator(label_actions(sample, q.vid, graph), q, w);
}

}  // namespace cema
