#include "cema/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <iostream>

using namespace cema;
using namespace cema::service;

namespace {

struct Common {
  std::string scenario;
  std::string query;
  std::string trace;
  std::string out;
  std::string templates;
  std::string mode;
  int K = 100;
  double alpha = 0.1;
  std::uint64_t seed = kDefaultSeed;
  int budget = -1;
  int threads = 0;
};

CausalConfig config_of(const Common& c) {
  if (c.K < 2) throw ValidationError("--K must be at least 2");
  if (c.alpha < 0.0) throw ValidationError("--alpha must be non-negative");
  CausalConfig cfg;
  cfg.K = c.K;
  cfg.alpha = c.alpha;
  cfg.seed = c.seed;
  cfg.budget = c.budget;
  cfg.threads = c.threads;
  return cfg;
}

JointTrace factual_of(const Common& c, const Scenario& s) {
  if (!c.trace.empty()) return import_jsonl(read_file(c.trace), s);
  return factual_trace(s, c.seed);
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") std::cout << text;
  else write_file(path, text);
}

void add_causal_flags(CLI::App* cmd, Common& c) {
  cmd->add_option("scenario", c.scenario, "scenario JSON")->required();
  cmd->add_option("query", c.query, "query JSON")->required();
  cmd->add_option("--trace", c.trace, "factual trace JSONL instead of simulating the scenario");
  cmd->add_option("--K", c.K, "counterfactual samples");
  cmd->add_option("--alpha", c.alpha, "goal-posterior smoothing");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--budget", c.budget, "MCTS iterations per search");
  cmd->add_option("--threads", c.threads, "worker threads (0: all cores)");
  cmd->add_option("--out", c.out, "output file");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal explanations for a simulated driving scene"};
  app.require_subcommand(1);
  Common c;
  int steps = -1;
  bool text = false;
  std::string kind;
  int repeats = 50;
  int master = 500;
  int port = 8080;
  std::string host = "127.0.0.1";
  std::string scenario_dir = "scenarios";
  std::string state_dir;

  auto* run_cmd = app.add_subcommand("run", "simulate a scenario and write its trace");
  run_cmd->add_option("scenario", c.scenario, "scenario JSON")->required();
  run_cmd->add_option("--seed", c.seed, "random seed");
  run_cmd->add_option("--steps", steps, "number of frames (default: the scenario's max_steps)");
  run_cmd->add_option("--out", c.out, "trace JSONL");

  auto* query_cmd = app.add_subcommand("query", "answer a query and write the attribution report");
  add_causal_flags(query_cmd, c);
  query_cmd->add_flag("--text", text, "print the answer text");
  query_cmd->add_option("--mode", c.mode, "teleological, mechanistic or associative");
  query_cmd->add_option("--templates", c.templates, "explanation templates JSON");

  auto* sweep_cmd = app.add_subcommand("sweep", "robustness sweeps over sample size or smoothing");
  sweep_cmd->add_option("kind", kind, "size or alpha")->required()->check(CLI::IsMember({"size", "alpha"}));
  add_causal_flags(sweep_cmd, c);
  sweep_cmd->add_option("--repeats", repeats, "repeats per sample size");
  sweep_cmd->add_option("--master", master, "rollouts in the master dataset");

  auto* serve_cmd = app.add_subcommand("serve", "serve the HTTP API");
  serve_cmd->add_option("--port", port, "port");
  serve_cmd->add_option("--host", host, "bind address");
  serve_cmd->add_option("--scenarios", scenario_dir, "directory of scenario JSON files");
  serve_cmd->add_option("--state-dir", state_dir, "persist sessions here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*run_cmd) {
      const Scenario s = read_scenario(c.scenario);
      const JointTrace t = run(s, steps < 0 ? s.max_steps : steps, c.seed);
      emit(c.out, export_jsonl(t, s.graph));
    } else if (*query_cmd) {
      const Scenario s = read_scenario(c.scenario);
      const std::string qtext = read_file(c.query);
      const Query q = parse_query(std::string_view(qtext));
      std::optional<ExplainMode> mode;
      if (!c.mode.empty()) {
        ExplainMode m{};
        if (!parse_explain_mode(c.mode, m)) throw ValidationError("unknown --mode '" + c.mode + "'");
        mode = m;
      }
      const Templates tpl = c.templates.empty() ? Templates() : Templates::from_text(read_file(c.templates));
      const Answer a = answer_query(s, factual_of(c, s), q, config_of(c), mode, tpl);
      if (!c.out.empty()) write_file(c.out, dump(a.to_json()));
      if (text) std::cout << a.explanation.text << "\n";
      else if (c.out.empty()) std::cout << dump(a.to_json());
    } else if (*sweep_cmd) {
      const Scenario s = read_scenario(c.scenario);
      const std::string qtext = read_file(c.query);
      const Query q = parse_query(std::string_view(qtext));
      const CausalConfig cfg = config_of(c);
      const SweepResult r = kind == "size"
                                ? sweep_sample_size(s, factual_of(c, s), q, cfg, default_sizes(), repeats, master)
                                : sweep_alpha(s, factual_of(c, s), q, cfg, alpha_schedule(), sweep_cmd->count("--K") ? c.K : 50);
      emit(c.out, dump(r.to_json()));
    } else if (*serve_cmd) {
      std::optional<std::filesystem::path> sd;
      if (!state_dir.empty()) sd = state_dir;
      Service svc(ScenarioSet::load_dir(scenario_dir), sd);
      httplib::Server srv;
      svc.mount(srv);
      std::cerr << "listening on " << host << ":" << port << "\n";
      if (!srv.listen(host, port)) {
        std::cerr << "error: cannot bind " << host << ":" << port << "\n";
        return 1;
      }
    }
  } catch (const UnmatchedQuery& e) {
    std::cerr << "error: " << e.what() << "\n";
    for (const auto& [u, v] : e.candidates()) std::cerr << "  candidate window [" << u << ", " << v << "]\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DegenerateError& e) {
    std::cerr << "degenerate: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
