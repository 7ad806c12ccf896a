#ifndef CEMA_SERVICE_HPP
#define CEMA_SERVICE_HPP

#include "cema/explain.hpp"
#include "cema/simulator.hpp"

#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace httplib {
class Server;
}

namespace cema::service {

inline constexpr std::uint64_t kDefaultSeed = 21;

// Scenarios keyed by file stem.
class ScenarioSet {
 public:
  static ScenarioSet load_dir(const std::filesystem::path& dir);
  void add(const std::string& id, Scenario s) { scenarios_.insert_or_assign(id, std::move(s)); }
  const Scenario& get(const std::string& id) const;
  bool has(const std::string& id) const { return scenarios_.count(id) > 0; }
  const std::map<std::string, Scenario>& all() const { return scenarios_; }

 private:
  std::map<std::string, Scenario> scenarios_;
};

Scenario read_scenario(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& text);

// Factual trace of a scenario under the planner; memoised per (scenario, seed, steps).
JointTrace factual_trace(const Scenario& scenario, std::uint64_t seed, int steps = -1);

struct Answer {
  AttributionReport report;
  Explanation explanation;
  ExplainMode mode = ExplainMode::Teleological;

  // {"explanation": ..., "report": ...}; identical for the CLI and HTTP paths.
  nlohmann::json to_json() const;
};

// Mode defaults to the query's default; a degenerate requested mode falls back to the other causal mode.
Answer answer_query(const Scenario& scenario, const JointTrace& factual, const Query& q, const CausalConfig& cfg,
                    std::optional<ExplainMode> mode = std::nullopt, const Templates& templates = Templates());

std::string dump(const nlohmann::json& j);

struct Session {
  std::string id;
  std::string scenario;
  std::uint64_t seed = kDefaultSeed;
  CausalConfig config;
  Conversation conversation;
  std::mutex mutex;  // single writer per conversation

  nlohmann::json to_json() const;
  nlohmann::json history() const;
};

struct Job {
  std::string id;
  std::string session;
  std::atomic<int> state{0};  // 0 queued, 1 running, 2 done, 3 failed
  nlohmann::json result;
  int status = 200;
  std::mutex mutex;

  nlohmann::json to_json();
};

struct Response {
  int status = 200;
  nlohmann::json body;
  std::string content_type = "application/json";
  std::string raw;  // non-JSON payload when set
};

class Service {
 public:
  explicit Service(ScenarioSet scenarios, std::optional<std::filesystem::path> state_dir = std::nullopt,
                   Templates templates = Templates());
  ~Service();

  Response list_scenarios() const;
  Response scenario(const std::string& id) const;
  Response trace(const std::string& id, std::uint64_t seed) const;
  Response create_session(const std::string& body);
  // Body is a query document or {"follow_up": "why"|"other"}; async returns a job handle.
  Response post_query(const std::string& session, const std::string& body, std::optional<std::string> mode,
                      bool async);
  Response history(const std::string& session) const;
  Response job(const std::string& session, const std::string& job) const;

  void mount(httplib::Server& server);
  void wait_jobs();

 private:
  std::shared_ptr<Session> find(const std::string& id) const;
  Response run_query(Session& s, const std::string& body, std::optional<std::string> mode);
  void persist(const Session& s) const;
  void restore();

  ScenarioSet scenarios_;
  std::optional<std::filesystem::path> state_dir_;
  Templates templates_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::vector<std::thread> workers_;
  int next_session_ = 1;
  int next_job_ = 1;
};

Response error_response(int status, const std::string& reason, const std::string& message);

}  // namespace cema::service

#endif
