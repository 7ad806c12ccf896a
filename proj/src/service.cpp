#include "cema/service.hpp"

#include <httplib.h>

#include <fstream>
#include <sstream>

namespace cema::service {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

Scenario read_scenario(const std::filesystem::path& path) { return load_scenario(read_file(path)); }

ScenarioSet ScenarioSet::load_dir(const std::filesystem::path& dir) {
  ScenarioSet set;
  if (!std::filesystem::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) set.add(f.stem().string(), read_scenario(f));
  return set;
}

const Scenario& ScenarioSet::get(const std::string& id) const {
  const auto it = scenarios_.find(id);
  if (it == scenarios_.end()) throw ValidationError("unknown scenario '" + id + "'");
  return it->second;
}

JointTrace factual_trace(const Scenario& scenario, std::uint64_t seed, int steps) {
  static std::mutex mu;
  static std::map<std::tuple<std::uint64_t, std::uint64_t, int>, JointTrace> cache;
  if (steps < 0) steps = scenario.max_steps;
  const auto key = std::make_tuple(fnv1a(serialize(scenario)), seed, steps);
  {
    std::lock_guard lock(mu);
    if (const auto it = cache.find(key); it != cache.end()) return it->second;
  }
  JointTrace t = run(scenario, steps, seed);
  std::lock_guard lock(mu);
  return cache.emplace(key, std::move(t)).first->second;
}

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

nlohmann::json Answer::to_json() const { return {{"explanation", explanation.to_json()}, {"report", report.to_json()}}; }

Answer answer_query(const Scenario& scenario, const JointTrace& factual, const Query& q, const CausalConfig& cfg,
                    std::optional<ExplainMode> mode, const Templates& templates) {
  Answer a;
  a.report = explain_query(scenario, factual, q, cfg);
  a.mode = mode.value_or(default_mode(q));
  try {
    a.explanation = realise(a.report, q, a.mode, templates);
  } catch (const DegenerateError&) {
    if (mode) throw;
    a.mode = a.mode == ExplainMode::Teleological ? ExplainMode::Mechanistic : ExplainMode::Teleological;
    a.explanation = realise(a.report, q, a.mode, templates);
  }
  return a;
}

namespace {

nlohmann::json turn_json(const Turn& t) {
  return {{"query", t.query.to_json()},
          {"window", {{"u", t.window.u}, {"v", t.window.v}, {"source", std::string(to_string(t.window.source))}}},
          {"mode", std::string(to_string(t.mode))},
          {"follow_up", t.follow_up},
          {"answer", t.answer.to_json()}};
}

Explanation explanation_from_json(const nlohmann::json& j) {
  Explanation e;
  e.text = j.at("text");
  if (!parse_explain_mode(j.at("mode").get<std::string>(), e.mode)) throw ValidationError("state: unknown mode");
  for (const auto& c : j.at("causes")) {
    Cause k;
    k.kind = c.at("kind");
    k.vehicle = c.at("vehicle");
    k.direction = c.at("direction");
    k.strength = c.at("strength");
    if (c.contains("component")) k.name = c["component"];
    if (c.contains("feature")) k.name = c["feature"];
    if (c.contains("plan")) k.plan = c["plan"].get<std::vector<std::string>>();
    e.causes.push_back(std::move(k));
  }
  return e;
}

nlohmann::json config_json(const CausalConfig& c) {
  return {{"K", c.K}, {"alpha", c.alpha}, {"seed", c.seed}, {"budget", c.budget}};
}

CausalConfig config_from(const nlohmann::json& j, std::uint64_t seed) {
  CausalConfig c;
  c.seed = seed;
  for (const auto& [k, v] : j.items()) {
    if (k == "K") {
      if (!v.is_number_integer() || v.get<int>() < 2) throw ValidationError("session: 'K' must be an integer >= 2");
      c.K = v;
    } else if (k == "alpha") {
      if (!v.is_number() || v.get<double>() < 0.0) throw ValidationError("session: 'alpha' must be >= 0");
      c.alpha = v;
    } else if (k == "budget") {
      if (!v.is_number_integer()) throw ValidationError("session: 'budget' must be an integer");
      c.budget = v;
    } else if (k != "seed" && k != "scenario") {
      throw ValidationError("session: unknown field '" + k + "'");
    }
  }
  return c;
}

nlohmann::json query_schema() {
  nlohmann::json actions = nlohmann::json::array();
  for (Macro m : kAllMacros) actions.push_back(std::string(to_string(m)));
  for (Maneuver m : kAllManeuvers) actions.push_back(std::string(to_string(m)));
  const nlohmann::json list = {{"type", "array"}, {"items", {{"enum", actions}}}};
  return {{"type", "object"},
          {"required", {"type", "vid", "query_time"}},
          {"additionalProperties", false},
          {"properties",
           {{"type", {{"enum", {"why", "whatif", "what"}}}},
            {"vid", {{"type", "integer"}}},
            {"tense", {{"enum", {"past", "present", "future"}}}},
            {"actions", list},
            {"query_time", {{"type", "integer"}, {"minimum", 0}}},
            {"action_time", {{"type", "integer"}, {"minimum", 0}}},
            {"negated", {{"type", "boolean"}}},
            {"factuals", list}}}};
}

}  // namespace

nlohmann::json Session::to_json() const {
  nlohmann::json turns = nlohmann::json::array();
  for (std::size_t i = 0; i < conversation.turns.size(); ++i) {
    nlohmann::json t = turn_json(conversation.turns[i]);
    t["report"] = conversation.reports[i].to_json();
    turns.push_back(std::move(t));
  }
  return {{"id", id}, {"scenario", scenario}, {"seed", seed}, {"config", config_json(config)}, {"turns", turns}};
}

nlohmann::json Session::history() const {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : conversation.turns) turns.push_back(turn_json(t));
  return {{"session", id}, {"scenario", scenario}, {"seed", seed}, {"turns", turns}};
}

nlohmann::json Job::to_json() {
  static const char* names[] = {"queued", "running", "done", "failed"};
  const int s = state.load();
  nlohmann::json j = {{"job", id}, {"session", session}, {"state", names[s]}};
  if (s >= 2) {
    std::lock_guard lock(mutex);
    j["status"] = status;
    j["result"] = result;
  }
  return j;
}

Response error_response(int status, const std::string& reason, const std::string& message) {
  return {status, {{"error", {{"reason", reason}, {"message", message}}}}, "application/json", {}};
}

Service::Service(ScenarioSet scenarios, std::optional<std::filesystem::path> state_dir, Templates templates)
    : scenarios_(std::move(scenarios)), state_dir_(std::move(state_dir)), templates_(std::move(templates)) {
  if (state_dir_) restore();
}

Service::~Service() { wait_jobs(); }

void Service::wait_jobs() {
  std::vector<std::thread> ws;
  {
    std::lock_guard lock(mutex_);
    ws.swap(workers_);
  }
  for (auto& w : ws) w.join();
}

Response Service::list_scenarios() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [id, s] : scenarios_.all()) {
    nlohmann::json agents = nlohmann::json::array();
    for (const auto& a : s.agents) agents.push_back(a.id);
    out.push_back({{"id", id}, {"name", s.name}, {"description", s.description}, {"agents", agents},
                   {"ego", s.ego()}, {"max_steps", s.max_steps}});
  }
  return {200, out, "application/json", {}};
}

Response Service::scenario(const std::string& id) const {
  if (!scenarios_.has(id)) return error_response(404, "unknown-scenario", "unknown scenario '" + id + "'");
  return {200, nlohmann::json::parse(serialize(scenarios_.get(id))), "application/json", {}};
}

Response Service::trace(const std::string& id, std::uint64_t seed) const {
  if (!scenarios_.has(id)) return error_response(404, "unknown-scenario", "unknown scenario '" + id + "'");
  const Scenario& s = scenarios_.get(id);
  Response r;
  r.content_type = "application/x-ndjson";
  r.raw = export_jsonl(factual_trace(s, seed), s.graph);
  return r;
}

Response Service::create_session(const std::string& body) {
  nlohmann::json j = nlohmann::json::object();
  if (!body.empty()) {
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
      return error_response(400, "malformed", e.what());
    }
  }
  if (!j.is_object()) return error_response(400, "malformed", "session body must be an object");
  try {
    auto s = std::make_shared<Session>();
    if (!j.contains("scenario") || !j["scenario"].is_string()) throw ValidationError("session: missing 'scenario'");
    s->scenario = j["scenario"];
    if (!scenarios_.has(s->scenario)) throw ValidationError("session: unknown scenario '" + s->scenario + "'");
    if (j.contains("seed")) {
      if (!j["seed"].is_number_unsigned()) throw ValidationError("session: 'seed' must be a non-negative integer");
      s->seed = j["seed"];
    }
    s->config = config_from(j, s->seed);
    {
      std::lock_guard lock(mutex_);
      s->id = "s" + std::to_string(next_session_++);
      sessions_[s->id] = s;
    }
    persist(*s);
    return {201, {{"session", s->id}, {"scenario", s->scenario}, {"seed", s->seed}, {"config", config_json(s->config)}},
            "application/json", {}};
  } catch (const ValidationError& e) {
    return error_response(422, "validation", e.what());
  }
}

std::shared_ptr<Session> Service::find(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

Response Service::run_query(Session& s, const std::string& body, std::optional<std::string> mode_name) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    return error_response(400, "malformed", e.what());
  }
  std::optional<ExplainMode> mode;
  if (mode_name) {
    ExplainMode m{};
    if (!parse_explain_mode(*mode_name, m)) return error_response(400, "malformed", "unknown mode '" + *mode_name + "'");
    mode = m;
  }
  std::lock_guard lock(s.mutex);
  try {
    Answer a;
    Turn turn;
    if (doc.is_object() && doc.contains("follow_up")) {
      FollowUp kind{};
      if (!doc["follow_up"].is_string() || !parse_follow_up(doc["follow_up"].get<std::string>(), kind))
        throw ValidationError("follow_up must be 'why' or 'other'");
      const FollowUpRequest req = follow_up(s.conversation, kind);
      a.report = s.conversation.reports[req.antecedent];
      a.mode = req.mode;
      a.explanation = realise(a.report, req.query, req.mode, templates_, req.options);
      turn.query = req.query;
      turn.follow_up = true;
    } else {
      const Query q = parse_query(doc);
      const Scenario& sc = scenarios_.get(s.scenario);
      a = answer_query(sc, factual_trace(sc, s.seed), q, s.config, mode, templates_);
      turn.query = q;
    }
    turn.window = a.report.window;
    turn.mode = a.mode;
    turn.answer = a.explanation;
    s.conversation.turns.push_back(turn);
    s.conversation.reports.push_back(a.report);
    persist(s);
    nlohmann::json out = a.to_json();
    out["turn"] = s.conversation.turns.size() - 1;
    return {200, out, "application/json", {}};
  } catch (const UnmatchedQuery& e) {
    Response r = error_response(422, "unmatched", e.what());
    nlohmann::json c = nlohmann::json::array();
    for (const auto& [u, v] : e.candidates()) c.push_back({u, v});
    r.body["error"]["candidates"] = c;
    return r;
  } catch (const DegenerateError& e) {
    return error_response(422, "degenerate", e.what());
  } catch (const ValidationError& e) {
    return error_response(422, "validation", e.what());
  }
}

Response Service::post_query(const std::string& session, const std::string& body, std::optional<std::string> mode,
                             bool async) {
  const auto s = find(session);
  if (!s) return error_response(404, "unknown-session", "unknown session '" + session + "'");
  if (!async) return run_query(*s, body, mode);
  auto job = std::make_shared<Job>();
  job->session = session;
  {
    std::lock_guard lock(mutex_);
    job->id = "j" + std::to_string(next_job_++);
    jobs_[job->id] = job;
    workers_.emplace_back([this, s, job, body, mode] {
      job->state = 1;
      Response r;
      try {
        r = run_query(*s, body, mode);
      } catch (const std::exception& e) {
        r = error_response(500, "internal", e.what());
      }
      {
        std::lock_guard l(job->mutex);
        job->status = r.status;
        job->result = r.body;
      }
      job->state = r.status < 400 ? 2 : 3;
    });
  }
  return {202, {{"job", job->id}, {"session", session}}, "application/json", {}};
}

Response Service::history(const std::string& session) const {
  const auto s = find(session);
  if (!s) return error_response(404, "unknown-session", "unknown session '" + session + "'");
  std::lock_guard lock(s->mutex);
  return {200, s->history(), "application/json", {}};
}

Response Service::job(const std::string& session, const std::string& id) const {
  std::shared_ptr<Job> j;
  {
    std::lock_guard lock(mutex_);
    const auto it = jobs_.find(id);
    if (it != jobs_.end() && it->second->session == session) j = it->second;
  }
  if (!j) return error_response(404, "unknown-job", "unknown job '" + id + "'");
  return {200, j->to_json(), "application/json", {}};
}

void Service::persist(const Session& s) const {
  if (!state_dir_) return;
  write_file(*state_dir_ / "sessions" / (s.id + ".json"), dump(s.to_json()));
}

void Service::restore() {
  const auto dir = *state_dir_ / "sessions";
  if (!std::filesystem::is_directory(dir)) return;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    const auto j = nlohmann::json::parse(read_file(e.path()));
    auto s = std::make_shared<Session>();
    s->id = j.at("id");
    s->scenario = j.at("scenario");
    s->seed = j.at("seed");
    s->config = config_from(j.at("config"), s->seed);
    for (const auto& t : j.at("turns")) {
      Turn turn;
      turn.query = parse_query(t.at("query"));
      const AttributionReport rep = AttributionReport::from_json(t.at("report"));
      turn.window = rep.window;
      if (!parse_explain_mode(t.at("mode").get<std::string>(), turn.mode)) throw ValidationError("state: unknown mode");
      turn.follow_up = t.at("follow_up");
      turn.answer = explanation_from_json(t.at("answer").at("explanation"));
      s->conversation.turns.push_back(std::move(turn));
      s->conversation.reports.push_back(rep);
    }
    if (s->id.size() > 1 && s->id[0] == 's') next_session_ = std::max(next_session_, std::stoi(s->id.substr(1)) + 1);
    sessions_[s->id] = s;
  }
}

namespace {

void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_header("Access-Control-Allow-Origin", "*");
  if (!r.raw.empty() || r.content_type != "application/json") res.set_content(r.raw, r.content_type);
  else res.set_content(r.body.dump(), "application/json");
}

std::optional<std::string> param(const httplib::Request& req, const char* key) {
  if (!req.has_param(key)) return std::nullopt;
  return req.get_param_value(key);
}

}  // namespace

void Service::mount(httplib::Server& srv) {
  srv.Get("/scenarios", [this](const httplib::Request&, httplib::Response& res) { send(res, list_scenarios()); });
  srv.Get(R"(/scenarios/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    send(res, scenario(req.matches[1]));
  });
  srv.Get(R"(/scenarios/([^/]+)/trace)", [this](const httplib::Request& req, httplib::Response& res) {
    std::uint64_t seed = kDefaultSeed;
    if (const auto s = param(req, "seed")) {
      try {
        seed = std::stoull(*s);
      } catch (const std::exception&) {
        return send(res, error_response(400, "malformed", "seed must be a non-negative integer"));
      }
    }
    send(res, trace(req.matches[1], seed));
  });
  srv.Get("/schema/query", [](const httplib::Request&, httplib::Response& res) {
    send(res, {200, query_schema(), "application/json", {}});
  });
  srv.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
    send(res, create_session(req.body));
  });
  srv.Post(R"(/sessions/([^/]+)/query)", [this](const httplib::Request& req, httplib::Response& res) {
    const auto a = param(req, "async");
    send(res, post_query(req.matches[1], req.body, param(req, "mode"), a && *a != "0" && *a != "false"));
  });
  srv.Get(R"(/sessions/([^/]+)/history)", [this](const httplib::Request& req, httplib::Response& res) {
    send(res, history(req.matches[1]));
  });
  srv.Get(R"(/sessions/([^/]+)/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    send(res, job(req.matches[1], req.matches[2]));
  });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      send(res, error_response(500, "internal", e.what()));
    }
  });
}

}  // namespace cema::service
