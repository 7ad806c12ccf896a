#include "cema/explain.hpp"

#include "cema/templates_data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>

namespace cema {

std::string_view to_string(ExplainMode m) {
  switch (m) {
    case ExplainMode::Teleological: return "teleological";
    case ExplainMode::Mechanistic: return "mechanistic";
    case ExplainMode::Associative: return "associative";
  }
  return "teleological";
}

bool parse_explain_mode(std::string_view s, ExplainMode& out) {
  for (ExplainMode m : {ExplainMode::Teleological, ExplainMode::Mechanistic, ExplainMode::Associative})
    if (to_string(m) == s) {
      out = m;
      return true;
    }
  return false;
}

bool parse_follow_up(std::string_view s, FollowUp& out) {
  if (s == "why") out = FollowUp::Why;
  else if (s == "other") out = FollowUp::Other;
  else return false;
  return true;
}

nlohmann::json Explanation::to_json() const {
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : causes) {
    nlohmann::json j = {{"kind", c.kind}, {"vehicle", c.vehicle}, {"direction", c.direction}, {"strength", c.strength}};
    if (c.kind == "teleological") j["component"] = c.name;
    else if (c.kind == "mechanistic") j["feature"] = c.name;
    else j["plan"] = c.plan;
    cs.push_back(std::move(j));
  }
  return {{"text", text}, {"mode", std::string(to_string(mode))}, {"causes", cs}};
}

Templates::Templates() : Templates(nlohmann::json::parse(kDefaultTemplates)) {}

Templates::Templates(const nlohmann::json& doc) : doc_(doc) {
  for (const char* k : {"subjects", "teleological", "mechanistic", "associative"})
    if (!doc_.contains(k)) throw ValidationError(std::string("templates: missing section '") + k + "'");
}

Templates Templates::from_text(std::string_view text) {
  try {
    return Templates(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("templates: ") + e.what());
  }
}

ExplainMode default_mode(const Query& q) {
  return q.kind == QueryKind::Why ? ExplainMode::Teleological : ExplainMode::Associative;
}

namespace {

std::string fill(std::string s, const std::string& key, const std::string& value) {
  const std::string pat = "{" + key + "}";
  for (auto pos = s.find(pat); pos != std::string::npos; pos = s.find(pat, pos + value.size()))
    s.replace(pos, pat.size(), value);
  return s;
}

std::string capitalise(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::string tense_key(Tense t) { return std::string(to_string(t)); }

// Leading auxiliary shared by the phrase, or empty.
std::string auxiliary(const std::string& phrase) {
  for (const char* aux : {"will not be ", "will not ", "will be ", "will ", "is not ", "is ", "was not ", "was ", "did not "})
    if (phrase.rfind(aux, 0) == 0) return aux;
  return {};
}

std::string feature_phrase(const nlohmann::json& prop, Tense tense, bool positive) {
  if (prop.at("kind") == "state") {
    const std::string c = prop.at("text");
    switch (tense) {
      case Tense::Past: return (positive ? "was " : "was not ") + c;
      case Tense::Present: return (positive ? "is " : "is not ") + c;
      case Tense::Future: return (positive ? "will be " : "will not be ") + c;
    }
  }
  const std::string base = prop.at("base"), past = prop.at("past"), prog = prop.at("progressive");
  switch (tense) {
    case Tense::Past: return positive ? past : "did not " + base;
    case Tense::Present: return (positive ? "is " : "is not ") + prog;
    case Tense::Future: return (positive ? "will " : "will not ") + base;
  }
  return base;
}

std::string join_clauses(const std::vector<std::string>& phrases) {
  std::string out;
  std::string aux = phrases.empty() ? "" : auxiliary(phrases.front());
  if (const auto n = aux.find("not "); n != std::string::npos) aux.erase(n);
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    std::string p = phrases[i];
    if (i > 0) {
      if (!aux.empty() && p.rfind(aux, 0) == 0) p = p.substr(aux.size());
      out += " and ";
    }
    out += p;
  }
  return out;
}

Explanation teleological(const AttributionReport& r, const Query& q, const Templates& t) {
  if (r.teleological_degenerate || r.teleological.empty())
    throw DegenerateError("explain: no teleological attribution for this query");
  const TeleoEntry& top = r.teleological.front();
  const auto& tel = t.doc().at("teleological");
  const bool negative = top.delta < 0.0;
  const bool decrease = q.negated ? !negative : negative;
  const auto& verb = tel.at("verbs").at(decrease ? "decrease" : "increase");
  const std::string frame = tel.at("frames").at((q.negated ? "negated_" : "") + tense_key(q.tense));
  std::string text = fill(frame, "component", tel.at("components").at(top.component));
  for (const char* f : {"base", "past", "third", "participle"}) text = fill(text, f, verb.at(f));
  Explanation e;
  e.mode = ExplainMode::Teleological;
  e.text = text;
  e.causes.push_back({"teleological", r.ego, top.component,
                      decrease ? "decrease" : "increase", std::abs(top.delta), {}});
  return e;
}

bool is_macro(const std::string& prop) { return prop.rfind("macro:", 0) == 0; }
bool is_maneuver(const std::string& prop) { return prop.rfind("maneuver:", 0) == 0; }

struct Candidate {
  const FeatureStat* f;
  std::string prop;
  AgentId vid;
  std::string kind;
};

Explanation mechanistic(const AttributionReport& r, const Query& q, const Templates& t, const RealiseOptions& o) {
  if (r.mechanistic_degenerate || r.mechanistic.empty())
    throw DegenerateError("explain: no mechanistic attribution for this query");
  const std::size_t si = o.slice >= 0 ? static_cast<std::size_t>(o.slice) : r.mechanistic.size() - 1;
  if (si >= r.mechanistic.size()) throw ValidationError("explain: no such slice");
  const auto& feats = r.mechanistic[si].features;
  const auto& mech = t.doc().at("mechanistic");
  const auto& props = mech.at("properties");
  const auto& subj = t.doc().at("subjects");

  std::vector<Candidate> all;
  for (const auto& f : feats) {
    Candidate c{&f, {}, 0, {}};
    if (!parse_feature_name(f.name, c.prop, c.vid) || !props.contains(c.prop))
      throw ValidationError("explain: no template for feature " + f.name);
    c.kind = props.at(c.prop).at("kind");
    all.push_back(std::move(c));
  }
  // A macro tied with a maneuver of the same vehicle describes the same event less precisely.
  const auto shadowed = [&](const Candidate& c) {
    if (!is_macro(c.prop)) return false;
    return std::any_of(all.begin(), all.end(), [&](const Candidate& m) {
      return m.vid == c.vid && is_maneuver(m.prop) && std::abs(m.f->mean - c.f->mean) < 1e-9;
    });
  };
  std::set<AgentId> stated;
  for (const auto& c : all)
    if (c.kind == "state" && o.exclude.count(c.f->name)) stated.insert(c.vid);

  const auto pick = [&](const std::string& kind, bool positive) {
    std::vector<const Candidate*> out;
    std::set<AgentId> state_taken = stated;
    std::map<AgentId, std::set<std::string>> said;
    for (const auto& c : all) {
      if (static_cast<int>(out.size()) >= o.top_k) break;
      if (o.exclude.count(c.f->name) || shadowed(c)) continue;
      if (!kind.empty() && c.kind != kind) continue;
      if ((c.f->mean >= 0.0) != positive) continue;
      if (c.kind == "state" && !state_taken.insert(c.vid).second) continue;
      const std::string phrase = feature_phrase(props.at(c.prop), q.tense, positive);
      if (!said[c.vid].insert(phrase).second) continue;
      out.push_back(&c);
    }
    return out;
  };
  std::vector<const Candidate*> chosen;
  for (const std::string& kind : {o.kind, std::string()}) {
    for (bool positive : {true, false}) {
      chosen = pick(kind, positive);
      if (!chosen.empty()) break;
    }
    if (!chosen.empty() || kind.empty()) break;
  }
  if (chosen.empty()) throw DegenerateError("explain: no further causes");

  std::vector<AgentId> order;
  std::map<AgentId, std::vector<std::string>> phrases;
  Explanation e;
  e.mode = ExplainMode::Mechanistic;
  for (const Candidate* c : chosen) {
    const bool pos = c->f->mean >= 0.0;
    if (!phrases.count(c->vid)) order.push_back(c->vid);
    phrases[c->vid].push_back(feature_phrase(props.at(c->prop), q.tense, pos));
    e.causes.push_back({"mechanistic", c->vid, c->f->name, pos ? "positive" : "negative", std::abs(c->f->mean), {}});
  }
  std::string clauses;
  bool pronoun_only = true;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const AgentId vid = order[k];
    const bool pronoun = o.mentioned.count(vid) && order.size() == 1;
    pronoun_only = pronoun_only && pronoun;
    const std::string who =
        pronoun ? std::string(subj.at("pronoun")) : fill(subj.at("vehicle").get<std::string>(), "vid", std::to_string(vid));
    if (k > 0) clauses += " and ";
    clauses += who + " " + join_clauses(phrases[vid]);
  }
  const std::string frame = pronoun_only ? mech.at("plain") : mech.at("because");
  e.text = capitalise(fill(frame, "clauses", clauses));
  return e;
}

Explanation associative(const AttributionReport& r, const Query& q, const Templates& t) {
  if (!r.associative || r.associative->plan.empty()) throw DegenerateError("explain: no associative content");
  const Associative& a = *r.associative;
  const auto& as = t.doc().at("associative");
  const auto& subj = t.doc().at("subjects");
  const bool we = a.vehicle == r.ego;
  const std::string subject =
      we ? std::string(subj.at("ego")) : fill(subj.at("vehicle").get<std::string>(), "vid", std::to_string(a.vehicle));
  const bool what = q.kind == QueryKind::What;
  const std::string form = what ? (q.tense == Tense::Past ? "past" : q.tense == Tense::Present ? "progressive" : "base")
                                : (q.tense == Tense::Past ? "participle" : "base");
  std::vector<std::string> parts;
  for (Macro m : a.plan) {
    const std::string p = as.at("macros").at(std::string(to_string(m))).at(form);
    if (parts.empty() || parts.back() != p) parts.push_back(p);
  }
  std::string body;
  for (std::size_t i = 0; i < parts.size(); ++i) body += (i ? " and " : "") + parts[i];
  std::string text = as.at("frames").at((what ? "what_" : "whatif_") + tense_key(q.tense));
  text = fill(text, "Subject", capitalise(subject));
  text = fill(text, "be", we ? "are" : "is");
  for (const char* f : {"base", "past", "participle", "progressive"}) text = fill(text, f, body);
  Explanation e;
  e.mode = ExplainMode::Associative;
  e.text = text;
  Cause c{"associative", a.vehicle, "", "", a.support, {}};
  for (Macro m : a.plan) c.plan.push_back(std::string(to_string(m)));
  e.causes.push_back(std::move(c));
  return e;
}

}  // namespace

Explanation realise(const AttributionReport& report, const Query& q, ExplainMode mode, const Templates& templates,
                    const RealiseOptions& options) {
  switch (mode) {
    case ExplainMode::Teleological: return teleological(report, q, templates);
    case ExplainMode::Mechanistic: return mechanistic(report, q, templates, options);
    case ExplainMode::Associative: return associative(report, q, templates);
  }
  throw std::logic_error("explain: unknown mode");
}

FollowUpRequest follow_up(const Conversation& c, FollowUp kind, int top_k) {
  if (c.turns.empty()) throw ValidationError("follow-up without an antecedent question");
  const std::size_t last = c.turns.size() - 1;
  const Turn& t = c.turns[last];
  if (kind == FollowUp::Other && t.mode != ExplainMode::Mechanistic)
    throw ValidationError("follow-up 'other' needs a mechanistic antecedent");
  FollowUpRequest req;
  req.query = t.query;
  req.antecedent = last;
  req.mode = ExplainMode::Mechanistic;
  req.options.top_k = top_k;
  if (kind == FollowUp::Why && t.mode != ExplainMode::Mechanistic) {
    req.options.kind = "state";
    return req;
  }
  if (kind == FollowUp::Why) req.options.kind = "action";
  for (const auto& cause : t.answer.causes) req.options.mentioned.insert(cause.vehicle);
  for (std::size_t i = last + 1; i-- > 0;) {
    for (const auto& cause : c.turns[i].answer.causes)
      if (cause.kind == "mechanistic") req.options.exclude.insert(cause.name);
    if (!c.turns[i].follow_up) break;
  }
  return req;
}

}  // namespace cema
