#include "cema/traffic.hpp"

#include <algorithm>
#include <cmath>

namespace cema {

Quintic Quintic::fit(double d0, double v0, double a0, double d1, double T) {
  Quintic q;
  q.T = T;
  const double A = d1 - d0 - v0 * T - 0.5 * a0 * T * T;
  const double B = -v0 - a0 * T;
  const double C = -a0;
  q.c[0] = d0;
  q.c[1] = v0;
  q.c[2] = 0.5 * a0;
  q.c[3] = (10.0 * A - 4.0 * B * T + 0.5 * C * T * T) / (T * T * T);
  q.c[4] = (-15.0 * A + 7.0 * B * T - C * T * T) / (T * T * T * T);
  q.c[5] = (6.0 * A - 3.0 * B * T + 0.5 * C * T * T) / (T * T * T * T * T);
  return q;
}

double Quintic::pos(double t) const {
  t = std::min(t, T);
  return c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
}

double Quintic::vel(double t) const {
  if (t >= T) return 0.0;
  return c[1] + t * (2 * c[2] + t * (3 * c[3] + t * (4 * c[4] + t * 5 * c[5])));
}

double Quintic::acc(double t) const {
  if (t >= T) return 0.0;
  return 2 * c[2] + t * (6 * c[3] + t * (12 * c[4] + t * 20 * c[5]));
}

Engine::Engine(const LaneGraph& graph, Kinematics kin, int start_time)
    : graph_(&graph), kin_(kin), now_(start_time) {
  trace_.start = start_time;
}

void Engine::add_agent(AgentId id, bool ego, const Goal& goal, const LocalState& st) {
  AgentSlot a;
  a.id = id;
  a.ego = ego;
  a.goal = goal;
  Body& b = a.body;
  if (st.lane >= 0) {
    b.lane = st.lane;
    b.s = st.lane_s;
    b.d = st.lane_offset;
  } else {
    const auto loc = graph_->locate(st.position, st.heading);
    b.lane = loc.lane;
    b.s = loc.s;
    b.d = loc.d;
  }
  if (b.lane < 0) throw ValidationError("agent " + std::to_string(id) + " is off-road");
  const double dh = wrap_angle(st.heading - graph_->lane(b.lane).heading(b.s));
  b.v = std::max(0.0, st.speed * std::cos(dh));
  b.d_rate = st.speed * std::sin(dh);
  b.a = st.accel;
  slots_.push_back(std::move(a));
  trace_.agents.push_back({id, ego});
  if (!trace_.frames.empty()) trace_.frames.clear();
}

AgentSlot& Engine::slot(AgentId id) {
  for (auto& a : slots_)
    if (a.id == id) return a;
  throw std::out_of_range("engine: unknown agent " + std::to_string(id));
}

const AgentSlot& Engine::slot(AgentId id) const {
  for (const auto& a : slots_)
    if (a.id == id) return a;
  throw std::out_of_range("engine: unknown agent " + std::to_string(id));
}

bool Engine::has(AgentId id) const {
  return std::any_of(slots_.begin(), slots_.end(), [&](const AgentSlot& a) { return a.id == id; });
}

std::vector<AgentId> Engine::ids() const {
  std::vector<AgentId> out;
  for (const auto& a : slots_) out.push_back(a.id);
  return out;
}

void Engine::set_plan(AgentId id, const std::vector<MacroSpec>& plan, bool complete_to_goal) {
  AgentSlot& a = slot(id);
  a.plan.assign(plan.begin(), plan.end());
  a.complete_to_goal = complete_to_goal;
  a.run.active = false;
}

void Engine::push_macro(AgentId id, const MacroSpec& m) { slot(id).plan.push_back(m); }

void Engine::clear_plan(AgentId id) {
  AgentSlot& a = slot(id);
  a.plan.clear();
  a.run.active = false;
}

bool Engine::idle(AgentId id) const {
  const AgentSlot& a = slot(id);
  return !a.run.active && a.plan.empty();
}

bool Engine::interruptible(AgentId id) const {
  const AgentSlot& a = slot(id);
  if (!a.run.active) return true;
  switch (a.run.spec.kind) {
    case Macro::ChangeLeft:
    case Macro::ChangeRight: return a.run.phase == 0;
    case Macro::Exit: return a.run.phase == 0;
    default: return true;
  }
}

Macro Engine::current_macro(AgentId id) const {
  const AgentSlot& a = slot(id);
  if (a.run.active) return a.run.spec.kind;
  return a.plan.empty() ? Macro::Continue : a.plan.front().kind;
}

LocalState Engine::state_of(AgentId id) const {
  const AgentSlot& a = slot(id);
  const Body& b = a.body;
  const Lane& L = graph_->lane(b.lane);
  LocalState s;
  s.position = L.at(b.s, b.d);
  const double lh = L.heading(b.s);
  s.heading = wrap_angle(lh + ((b.v > 1e-6 || std::abs(b.d_rate) > 1e-6) ? std::atan2(b.d_rate, b.v) : 0.0));
  s.speed = std::hypot(b.v, b.d_rate);
  s.accel = b.a;
  s.lane = b.lane;
  s.timestep = now_;
  s.lane_s = b.s;
  s.lane_offset = b.d;
  return s;
}

Frame Engine::frame() const {
  Frame f;
  for (const auto& a : slots_)
    if (a.active) f.emplace(a.id, state_of(a.id));
  return f;
}

void Engine::record() { trace_.frames.push_back(frame()); }

Engine Engine::snapshot() const {
  Engine e(*graph_, kin_, now_);
  e.slots_ = slots_;
  e.trace_.agents = trace_.agents;
  e.trace_.start = now_;
  e.recording_ = recording_;
  return e;
}

void Engine::start_profile(Body& b, double target, double T) {
  b.profile = Quintic::fit(b.d, b.d_rate, b.d_acc, target, T);
  b.profile_t = 0.0;
  b.profile_shift = 0.0;
  b.profile_on = true;
}

bool Engine::end_is_open(const AgentSlot& a, int lane) const {
  const Lane& L = graph_->lane(lane);
  return a.goal.contains(*graph_, L.point(L.length()));
}

void Engine::begin_macro(AgentSlot& a) {
  Body& b = a.body;
  if (a.plan.empty() && a.complete_to_goal) {
    for (const auto& m : plan_to_goal(*graph_, b.lane, b.s, a.goal)) a.plan.push_back(m);
  }
  MacroSpec spec;
  if (!a.plan.empty()) {
    spec = a.plan.front();
    a.plan.pop_front();
  } else {
    spec.kind = Macro::Continue;
    spec.duration = std::numeric_limits<double>::infinity();
  }
  a.run = MacroRun{};
  a.run.spec = spec;
  a.run.active = true;
  a.run.origin_lane = b.lane;
  b.target_lane = -1;
  b.route.clear();
  const bool off_centre = std::abs(b.d) > 0.05 || std::abs(b.d_rate) > 0.05;
  switch (spec.kind) {
    case Macro::ChangeLeft:
    case Macro::ChangeRight: {
      a.run.side = spec.kind == Macro::ChangeLeft ? 1 : -1;
      const int target = a.run.side > 0 ? graph_->left(b.lane) : graph_->right(b.lane);
      if (target < 0) {
        a.run.active = false;
        ++a.macros_done;
        return;
      }
      break;
    }
    case Macro::Exit: {
      int conn = spec.exit_lane;
      std::vector<int> chain;
      int cur = b.lane;
      double dist = 0.0;
      for (int guard = 0; guard < 32 && cur >= 0; ++guard) {
        const int t = graph_->turn_from(cur);
        bool hit = false;
        for (const auto& e : graph_->out(cur))
          if ((conn >= 0 && e.to == conn) || (conn < 0 && e.to == t && t >= 0)) hit = true;
        if (hit) {
          if (conn < 0) conn = t;
          break;
        }
        dist += graph_->lane(cur).length();
        if (dist > 600.0) {
          cur = -1;
          break;
        }
        cur = graph_->straight_next(cur);
        if (cur >= 0) chain.push_back(cur);
      }
      if (cur < 0 || conn < 0 || graph_->is_connector(b.lane)) {
        a.run.active = false;
        ++a.macros_done;
        return;
      }
      for (int l : chain) b.route.push_back(l);
      b.route.push_back(conn);
      a.run.connector = conn;
      if (off_centre) start_profile(b, 0.0, 2.0);
      break;
    }
    default:
      if (off_centre) start_profile(b, 0.0, 2.0);
  }
}

bool Engine::gap_clear(std::size_t i, int target) const {
  const AgentSlot& me = slots_[i];
  const Lane& T = graph_->lane(target);
  const double s_me = T.project(graph_->lane(me.body.lane).at(me.body.s, me.body.d)).s;
  for (std::size_t j = 0; j < slots_.size(); ++j) {
    if (j == i || !slots_[j].active) continue;
    const Body& o = slots_[j].body;
    if (o.lane != target && o.target_lane != target) continue;
    const double s_o = T.project(graph_->lane(o.lane).at(o.s, o.d)).s;
    const double ds = s_o - s_me;
    const double front = kin_.gap_accept + std::max(0.0, me.body.v - o.v) * 1.5;
    const double rear = kin_.gap_accept + std::max(0.0, o.v - me.body.v) * 1.5;
    if (ds < front && ds > -rear) return false;
  }
  return true;
}

double Engine::lead_gap(std::size_t i, double& lead_speed) const {
  const AgentSlot& me = slots_[i];
  const Body& b = me.body;
  const Lane& L = graph_->lane(b.lane);
  std::vector<std::pair<int, double>> path{{b.lane, 0.0}};
  {
    double off = L.length();
    int cur = b.lane;
    std::deque<int> route = b.route;
    while (off - b.s < 100.0) {
      int nxt = -1;
      if (!route.empty()) {
        nxt = route.front();
        route.pop_front();
      } else {
        nxt = graph_->straight_next(cur);
      }
      if (nxt < 0) break;
      path.emplace_back(nxt, off);
      off += graph_->lane(nxt).length();
      cur = nxt;
    }
  }
  double best = std::numeric_limits<double>::infinity();
  lead_speed = 0.0;
  const Vec2 my_pos = L.at(b.s, b.d);
  for (std::size_t j = 0; j < slots_.size(); ++j) {
    if (j == i || !slots_[j].active) continue;
    const AgentSlot& other = slots_[j];
    const Body& o = other.body;
    double ds = std::numeric_limits<double>::infinity();
    for (const auto& [lane, off] : path)
      if (o.lane == lane) {
        const double cand = off + o.s - b.s;
        if (cand > 0.0) ds = std::min(ds, cand);
      }
    if (!std::isfinite(ds)) {
      const bool cutting_in = o.target_lane == b.lane && other.run.phase == 1 &&
                              std::abs(o.d) >= 0.3 * std::abs(L.project(graph_->lane(o.lane).point(o.s)).d);
      const bool joining = b.target_lane >= 0 && me.run.phase == 1 && o.lane == b.target_lane;
      if (cutting_in || joining) {
        const Vec2 p = graph_->lane(o.lane).at(o.s, o.d);
        const double cand = L.project(p).s - b.s;
        if (cand > 0.0 && (p - my_pos).norm() < 100.0) ds = cand;
      }
    }
    if (ds < best) {
      best = ds;
      lead_speed = o.v;
    }
  }
  return best - kin_.length;
}

bool Engine::give_way_clear(std::size_t i) const {
  const AgentSlot& me = slots_[i];
  const Body& b = me.body;
  const Lane& C = graph_->lane(me.run.connector);
  const Vec2 c = C.point(C.length());
  const double my_eta = (graph_->lane(b.lane).length() - b.s + C.length()) / std::max(b.v, 3.0);
  for (std::size_t j = 0; j < slots_.size(); ++j) {
    if (j == i || !slots_[j].active) continue;
    const Body& o = slots_[j].body;
    if (o.lane == me.run.connector) continue;
    int lane = o.lane;
    double s = o.s;
    double dist = 0.0;
    double found = -1.0;
    for (int k = 0; k < 120 && lane >= 0; ++k) {
      const Lane& Lo = graph_->lane(lane);
      if ((Lo.point(s) - c).norm() < 3.0) {
        found = dist;
        break;
      }
      s += 1.0;
      dist += 1.0;
      if (s > Lo.length()) {
        s -= Lo.length();
        lane = graph_->straight_next(lane);
      }
    }
    if (found < 0.0) continue;
    const double eta = found / std::max(o.v, 0.5);
    if (eta < my_eta + kin_.give_way_gap) return false;
  }
  return true;
}

double Engine::control(std::size_t i) {
  AgentSlot& a = slots_[i];
  Body& b = a.body;
  const Lane& L = graph_->lane(b.lane);
  const double factor = a.run.spec.speed_factor;
  const double v_des = L.speed_limit() * factor;
  double acc = std::clamp(kin_.speed_gain * (v_des - b.v), -kin_.comfort_decel, kin_.comfort_accel);

  auto limit_to = [&](double D, double vt) {
    if (D <= 0.3 && vt <= 0.0) {
      acc = std::min(acc, -b.v / kDt);
      return;
    }
    const double v_allow = std::sqrt(vt * vt + 2.0 * kin_.comfort_decel * std::max(D, 0.0));
    if (b.v > v_allow)
      acc = std::min(acc, -(b.v * b.v - vt * vt) / (2.0 * std::max(D, 0.25)));
    else
      acc = std::min(acc, std::min(kin_.comfort_accel, kin_.speed_gain * (v_allow - b.v)));
  };

  // Path end without continuation.
  {
    double D = L.length() - b.s;
    int cur = b.lane;
    std::deque<int> route = b.route;
    while (D < 150.0) {
      int nxt;
      if (!route.empty()) {
        nxt = route.front();
        route.pop_front();
      } else {
        nxt = graph_->straight_next(cur);
      }
      if (nxt < 0) break;
      cur = nxt;
      D += graph_->lane(cur).length();
    }
    if (D < 150.0 && !end_is_open(a, cur)) limit_to(D - 0.5, 0.0);
  }

  if (a.run.active && a.run.spec.kind == Macro::Exit && a.run.phase == 0) {
    double D = L.length() - b.s;
    for (std::size_t k = 0; k + 1 < b.route.size(); ++k) D += graph_->lane(b.route[k]).length();
    const Lane& C = graph_->lane(a.run.connector);
    limit_to(D, C.speed_limit() * factor);
    if (b.route.size() == 1 && L.give_way() && D < 50.0 && !give_way_clear(i)) limit_to(D - 0.5, 0.0);
  }

  if (a.run.active && a.run.spec.kind == Macro::Stop) acc = std::min(acc, b.v > 0.0 ? -kin_.stop_decel : 0.0);

  double vl = 0.0;
  const double gap = lead_gap(i, vl);
  if (std::isfinite(gap)) {
    const double star = kin_.min_gap + b.v * kin_.headway +
                        b.v * (b.v - vl) / (2.0 * std::sqrt(kin_.comfort_accel * kin_.comfort_decel));
    const double ratio = std::max(star, 0.0) / std::max(gap, 0.1);
    acc = std::min(acc, kin_.comfort_accel * (1.0 - ratio * ratio));
  }

  const double a_lat = b.v * b.v * L.curvature(b.s) + b.d_acc;
  const double lim = std::max(0.0, std::sqrt(std::max(0.0, kin_.max_accel * kin_.max_accel - a_lat * a_lat)) - 0.2);
  acc = std::clamp(acc, -lim, lim);
  if (b.v + acc * kDt < 0.0) acc = -b.v / kDt;
  return acc;
}

void Engine::advance_lane(AgentSlot& a) {
  Body& b = a.body;
  while (b.s > graph_->lane(b.lane).length()) {
    int nxt = -1;
    if (!b.route.empty()) {
      for (const auto& e : graph_->out(b.lane))
        if (e.to == b.route.front()) nxt = e.to;
      if (nxt >= 0) b.route.pop_front();
    }
    if (nxt < 0) nxt = graph_->straight_next(b.lane);
    if (nxt < 0) {
      b.s = graph_->lane(b.lane).length();
      b.v = 0.0;
      b.a = 0.0;
      return;
    }
    b.s -= graph_->lane(b.lane).length();
    b.lane = nxt;
    if (b.target_lane >= 0) {
      b.target_lane = a.run.side > 0 ? graph_->left(nxt) : graph_->right(nxt);
    }
  }
}

void Engine::integrate(AgentSlot& a, double acc) {
  Body& b = a.body;
  b.a = acc;
  const double v1 = std::max(0.0, b.v + acc * kDt);
  b.s += 0.5 * (b.v + v1) * kDt;
  b.v = v1;
  if (b.profile_on) {
    b.profile_t += kDt;
    b.d = b.profile.pos(b.profile_t) + b.profile_shift;
    b.d_rate = b.profile.vel(b.profile_t);
    b.d_acc = b.profile.acc(b.profile_t);
    if (b.profile_t >= b.profile.T - 1e-9) b.profile_on = false;
  } else {
    b.d_rate = 0.0;
    b.d_acc = 0.0;
  }
  advance_lane(a);
  MacroRun& r = a.run;
  if (r.active && (r.spec.kind == Macro::ChangeLeft || r.spec.kind == Macro::ChangeRight) && r.phase == 1 &&
      !r.switched && b.target_lane >= 0) {
    const Lane& L = graph_->lane(b.lane);
    const Lane& T = graph_->lane(b.target_lane);
    const double sep = std::abs(T.project(L.point(b.s)).d);
    if (r.side * b.d > 0.5 * sep) {
      const auto pr = T.project(L.at(b.s, b.d));
      b.profile_shift += pr.d - b.d;
      b.d = pr.d;
      b.s = std::clamp(pr.s, 0.0, T.length());
      b.lane = b.target_lane;
      b.target_lane = -1;
      r.switched = true;
    }
  }
}

void Engine::finish_checks(AgentSlot& a) {
  Body& b = a.body;
  const Lane& L = graph_->lane(b.lane);
  if (a.goal_time < 0 && a.goal.contains(*graph_, L.at(b.s, b.d))) {
    a.goal_time = now_;
    a.exit_pending = a.exits_at_goal;
  }
  MacroRun& r = a.run;
  if (!r.active) return;
  ++r.elapsed;
  ++r.phase_steps;
  bool done = false;
  const double t = r.elapsed * kDt;
  switch (r.spec.kind) {
    case Macro::Continue: {
      const double dur = r.spec.duration >= 0.0 ? r.spec.duration : kin_.continue_time;
      if (r.spec.until_lane >= 0) {
        done = b.lane == r.spec.until_lane;
        if (r.spec.duration >= 0.0 && t >= dur - 1e-9) done = true;
      } else if (t >= dur - 1e-9) {
        done = true;
      }
      if (b.v < 0.1 && L.length() - b.s < 1.0 && graph_->straight_next(b.lane) < 0) done = true;
      break;
    }
    case Macro::ChangeLeft:
    case Macro::ChangeRight:
      if (r.phase == 1 && r.switched && !b.profile_on) done = true;
      if (r.phase == 1 && !r.switched && !b.profile_on) done = true;
      break;
    case Macro::Exit:
      if (r.phase == 0 && b.lane == r.connector) {
        r.phase = 1;
        r.phase_steps = 0;
      } else if (r.phase == 1 && b.lane != r.connector) {
        done = true;
      }
      break;
    case Macro::Stop: {
      if (r.phase == 0 && b.v <= 0.01) {
        r.phase = 1;
        r.phase_steps = 0;
      } else if (r.phase == 1) {
        const double hold = r.spec.duration >= 0.0 ? r.spec.duration : kin_.stop_hold;
        if (r.phase_steps * kDt >= hold - 1e-9) done = true;
      }
      break;
    }
  }
  if (done || a.exit_pending) {
    r.active = false;
    ++a.macros_done;
  }
}

void Engine::step() {
  if (recording_ && trace_.frames.empty()) record();
  for (auto& a : slots_)
    if (a.exit_pending) {
      a.exit_pending = false;
      a.active = false;
    }
  const std::size_t n = slots_.size();
  for (auto& a : slots_)
    if (a.active && !a.run.active) begin_macro(a);

  struct Decision {
    bool start_change = false;
    double target_d = 0.0;
    bool abort = false;
  };
  std::vector<Decision> dec(n);
  std::vector<double> acc(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    AgentSlot& a = slots_[i];
    if (!a.active) continue;
    MacroRun& r = a.run;
    if (r.active && (r.spec.kind == Macro::ChangeLeft || r.spec.kind == Macro::ChangeRight) && r.phase == 0) {
      const Body& b = a.body;
      const int target = r.side > 0 ? graph_->left(b.lane) : graph_->right(b.lane);
      if (target < 0) {
        dec[i].abort = true;
      } else if (gap_clear(i, target)) {
        const Lane& L = graph_->lane(b.lane);
        const double sep = std::abs(graph_->lane(target).project(L.point(b.s)).d);
        dec[i].start_change = true;
        dec[i].target_d = r.side * sep;
      } else if ((r.phase_steps + 1) * kDt > kin_.lane_change_patience) {
        dec[i].abort = true;
      }
    }
    acc[i] = control(i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    AgentSlot& a = slots_[i];
    if (!a.active) continue;
    if (dec[i].abort) {
      a.run.active = false;
      ++a.macros_done;
    } else if (dec[i].start_change) {
      Body& b = a.body;
      b.target_lane = a.run.side > 0 ? graph_->left(b.lane) : graph_->right(b.lane);
      start_profile(b, dec[i].target_d, kin_.lane_change_time);
      a.run.phase = 1;
      a.run.phase_steps = 0;
    }
    integrate(a, acc[i]);
  }
  ++now_;
  for (auto& a : slots_)
    if (a.active) finish_checks(a);
  if (recording_) record();
}

}  // namespace cema
