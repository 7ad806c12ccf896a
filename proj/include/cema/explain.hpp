#ifndef CEMA_EXPLAIN_HPP
#define CEMA_EXPLAIN_HPP

#include "cema/causal.hpp"

#include <json.hpp>

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace cema {

enum class ExplainMode { Teleological, Mechanistic, Associative };
std::string_view to_string(ExplainMode m);
bool parse_explain_mode(std::string_view s, ExplainMode& out);

struct Cause {
  std::string kind;
  AgentId vehicle = 0;
  std::string name;  // feature or reward component
  std::string direction;
  double strength = 0.0;
  std::vector<std::string> plan;
};

struct Explanation {
  std::string text;
  ExplainMode mode = ExplainMode::Teleological;
  std::vector<Cause> causes;

  nlohmann::json to_json() const;
};

class Templates {
 public:
  Templates();  // compiled-in defaults
  explicit Templates(const nlohmann::json& doc);
  static Templates from_text(std::string_view text);
  const nlohmann::json& doc() const { return doc_; }

 private:
  nlohmann::json doc_;
};

struct RealiseOptions {
  int top_k = 2;
  std::set<std::string> exclude;  // mechanistic features already given
  std::string kind;               // "state", "action" or empty for either
  std::set<AgentId> mentioned;    // vehicles referred to by pronoun
  int slice = -1;                 // mechanistic slice; negative picks the last
};

// Default mode per query: what/whatif are associative, why is teleological.
ExplainMode default_mode(const Query& q);

Explanation realise(const AttributionReport& report, const Query& q, ExplainMode mode,
                    const Templates& templates = Templates(), const RealiseOptions& options = {});

struct Turn {
  Query query;
  QueryWindow window;
  ExplainMode mode = ExplainMode::Teleological;
  bool follow_up = false;
  Explanation answer;
};

struct Conversation {
  std::vector<Turn> turns;
  std::vector<AttributionReport> reports;  // parallel to turns
};

enum class FollowUp { Why, Other };
bool parse_follow_up(std::string_view s, FollowUp& out);

struct FollowUpRequest {
  Query query;
  ExplainMode mode = ExplainMode::Mechanistic;
  RealiseOptions options;
  std::size_t antecedent = 0;  // turn index whose report is reused
};

// Rewrites a follow-up onto the latest turn's report and window.
FollowUpRequest follow_up(const Conversation& conversation, FollowUp kind, int top_k = 2);

}  // namespace cema

#endif
