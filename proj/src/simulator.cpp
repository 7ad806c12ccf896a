#include "cema/simulator.hpp"

#include <json.hpp>

#include <sstream>

namespace cema {

namespace {

JointTrace current(const Engine& eng) {
  JointTrace t = eng.trace();
  if (t.empty()) {
    t.start = eng.now();
    t.frames.push_back(eng.frame());
  }
  return t;
}

}  // namespace

JointTrace window(const JointTrace& trace, int now, int radius) {
  if (trace.empty()) return trace;
  const int lo = std::max(trace.start, now - radius);
  const int hi = std::min(trace.end(), now + radius);
  if (lo == trace.start && hi == trace.end()) return trace;
  return trace.slice(lo, hi);
}

JointTrace run(const Scenario& scenario, int max_steps, std::uint64_t seed, const SimOptions& options) {
  if (max_steps < 1) throw std::invalid_argument("run: max_steps must be at least 1");
  const LaneGraph& graph = scenario.graph;
  Engine eng(graph, options.prediction.kin, 0);
  for (const auto& a : scenario.agents) {
    eng.add_agent(a.id, a.ego, a.goal, scenario.spawn_state(a));
    if (a.controller == Controller::Scripted) eng.set_plan(a.id, a.macros, true);
  }
  const AgentId ego = scenario.ego();
  const Goal& ego_goal = scenario.agent(ego).goal;
  const PlannerConfig& cfg = scenario.planner;
  const int period = std::max(1, static_cast<int>(std::lround(cfg.replan_period_s * kFps)));
  int last_plan = -period;

  while (static_cast<int>(eng.trace().frames.size()) < max_steps) {
    if (eng.active(ego) && eng.goal_time(ego) < 0 && eng.now() - last_plan >= period && eng.interruptible(ego)) {
      const auto plan = plan_ego(eng, window(current(eng), eng.now()), ego_goal, cfg, options.prediction,
                                 derive_seed(seed, static_cast<std::uint64_t>(eng.now())));
      if (!plan.empty()) eng.set_plan(ego, plan, true);
      last_plan = eng.now();
    }
    eng.step();
    bool any = false;
    for (const auto& s : eng.slots()) any = any || s.active;
    if (!any) break;
  }
  JointTrace out = current(eng);
  if (static_cast<int>(out.frames.size()) > max_steps) out.frames.resize(static_cast<std::size_t>(max_steps));
  return out;
}

std::map<AgentId, ActionLabels> label_all(const JointTrace& trace, const LaneGraph& graph) {
  std::map<AgentId, ActionLabels> out;
  for (const auto& a : trace.agents) out.emplace(a.id, label_actions(trace, a.id, graph));
  return out;
}

std::string export_jsonl(const JointTrace& trace, const LaneGraph& graph) {
  const auto labels = label_all(trace, graph);
  std::ostringstream os;
  for (int t = trace.start; t <= trace.end(); ++t) {
    nlohmann::json agents = nlohmann::json::object();
    for (const auto& [id, s] : trace.at(t)) {
      const ActionLabels& l = labels.at(id);
      const ActionLabel lab = l.covers(t) ? l.at(t) : ActionLabel{};
      agents[std::to_string(id)] = {{"x", s.position.x()},
                                    {"y", s.position.y()},
                                    {"heading", s.heading},
                                    {"speed", s.speed},
                                    {"accel", s.accel},
                                    {"lane", graph.lane(s.lane).id()},
                                    {"maneuver", std::string(to_string(lab.maneuver))},
                                    {"macro", std::string(to_string(lab.macro))}};
    }
    os << nlohmann::json{{"t", t}, {"agents", agents}}.dump() << '\n';
  }
  return os.str();
}

JointTrace import_jsonl(std::string_view text, const Scenario& scenario) {
  JointTrace out;
  for (const auto& a : scenario.agents) out.agents.push_back({a.id, a.ego});
  std::istringstream is{std::string(text)};
  std::string line;
  bool first = true;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("trace line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!rec.contains("t") || !rec["t"].is_number_integer() || !rec.contains("agents") || !rec["agents"].is_object())
      throw ValidationError("trace line " + std::to_string(lineno) + ": expected {t, agents}");
    const int t = rec["t"].get<int>();
    if (first) {
      out.start = t;
      first = false;
    } else if (t != out.end() + 1) {
      throw ValidationError("trace line " + std::to_string(lineno) + ": timesteps are not contiguous");
    }
    Frame f;
    for (const auto& [key, v] : rec["agents"].items()) {
      LocalState s;
      s.position = Vec2(v.at("x").get<double>(), v.at("y").get<double>());
      s.heading = v.at("heading").get<double>();
      s.speed = v.at("speed").get<double>();
      s.accel = v.value("accel", 0.0);
      s.timestep = t;
      const int lane = scenario.graph.find(v.at("lane").get<std::string>());
      if (lane < 0) throw ValidationError("trace line " + std::to_string(lineno) + ": unknown lane");
      const auto p = scenario.graph.lane(lane).project(s.position);
      s.lane = lane;
      s.lane_s = p.s;
      s.lane_offset = p.d;
      f.emplace(std::stoi(key), s);
    }
    out.frames.push_back(std::move(f));
  }
  out.validate();
  return out;
}

}  // namespace cema
