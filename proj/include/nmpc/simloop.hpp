#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "nmpc/controller.hpp"
#include "nmpc/dynamics.hpp"
#include "nmpc/netsim.hpp"
#include "nmpc/util.hpp"

namespace nmpc {

// ---------------------------------------------------------------------------
// Reference signals

struct StepRef {
  double target{0.0};
  double at{0.0};
};

// Schedule of (time, target) pairs; the most recent entry at or before t wins.
struct MultiStepRef {
  std::vector<std::pair<double, double>> schedule;
};

struct SineRef {
  double amplitude{0.0};
  double frequency_hz{0.0};
  double offset{0.0};
};

using JointReferenceSpec = std::variant<StepRef, MultiStepRef, SineRef>;

// Step-like references carry zero target velocity; the sine carries its
// analytic derivative so the tracking cost sees a consistent pair.
inline ReferenceTarget reference_signal(const JointReferenceSpec& spec, double t) {
  ReferenceTarget r;
  if (const auto* s = std::get_if<StepRef>(&spec)) {
    r.angle = t >= s->at ? s->target : 0.0;
  } else if (const auto* ms = std::get_if<MultiStepRef>(&spec)) {
    r.angle = 0.0;
    for (const auto& [at, target] : ms->schedule) {
      if (t >= at) r.angle = target;
    }
  } else if (const auto* sn = std::get_if<SineRef>(&spec)) {
    const double w = 2.0 * M_PI * sn->frequency_hz;
    r.angle = sn->offset + sn->amplitude * std::sin(w * t);
    r.velocity = sn->amplitude * w * std::cos(w * t);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Scenario configuration

enum class ControllerKind { mpc, pid };

struct ScenarioConfig {
  double duration_s{20.0};
  double ts{0.01};
  uint64_t seed{1};
  int joint_count{6};
  ControllerKind controller{ControllerKind::mpc};
  MpcConfig mpc{};
  PidConfig pid{};
  PlantConfig plant{};  // limit set; ts and joint_count above are authoritative
  ChannelConfig fwd{};  // controller -> plant (commands)
  ChannelConfig bwd{};  // plant -> controller (measurements)
  std::vector<JointReferenceSpec> references{};  // by joint; missing = hold zero
  bool forward_prediction{true};
  bool single_control_mode{false};  // send only the first planned input
  int controller_period_ticks{1};
};

inline void validate_scenario(const ScenarioConfig& cfg) {
  if (!std::isfinite(cfg.duration_s) || cfg.duration_s <= 0.0) {
    throw std::invalid_argument("scenario: duration must be positive");
  }
  if (!std::isfinite(cfg.ts) || cfg.ts <= 0.0) {
    throw std::invalid_argument("scenario: ts must be positive");
  }
  if (cfg.joint_count < 1) {
    throw std::invalid_argument("scenario: joint count must be at least 1");
  }
  if (cfg.controller_period_ticks < 1) {
    throw std::invalid_argument("scenario: controller period must be at least 1 tick");
  }
  if (static_cast<int>(cfg.references.size()) > cfg.joint_count) {
    throw std::invalid_argument("scenario: more reference entries than joints");
  }
  if (cfg.mpc.horizon < 1) {
    throw std::invalid_argument("scenario: horizon must be at least 1");
  }
  Channel probe_fwd{cfg.fwd};  // constructor enforces channel invariants
  Channel probe_bwd{cfg.bwd};
}

inline int64_t ns_per_tick(double ts) { return std::llround(ts * 1e9); }

inline int64_t scenario_tick_count(const ScenarioConfig& cfg) {
  return static_cast<int64_t>(std::floor(cfg.duration_s / cfg.ts + 1e-9));
}

// Deterministic one-line dump used for hashing and metadata.
inline std::string canonical_description(const ScenarioConfig& cfg) {
  std::ostringstream os;
  os << "duration=" << format_double(cfg.duration_s) << ";ts=" << format_double(cfg.ts)
     << ";seed=" << cfg.seed << ";joints=" << cfg.joint_count
     << ";controller=" << (cfg.controller == ControllerKind::mpc ? "mpc" : "pid")
     << ";horizon=" << cfg.mpc.horizon << ";qx=" << format_double(cfg.mpc.qx_angle) << ","
     << format_double(cfg.mpc.qx_velocity) << ";qu=" << format_double(cfg.mpc.qu)
     << ";pid=" << format_double(cfg.pid.kp) << "," << format_double(cfg.pid.ki) << ","
     << format_double(cfg.pid.kd) << ";fwd=" << format_double(cfg.fwd.base_delay_s) << ","
     << format_double(cfg.fwd.jitter_s) << "," << format_double(cfg.fwd.loss_rate)
     << ";bwd=" << format_double(cfg.bwd.base_delay_s) << "," << format_double(cfg.bwd.jitter_s)
     << "," << format_double(cfg.bwd.loss_rate) << ";predict=" << cfg.forward_prediction
     << ";single=" << cfg.single_control_mode << ";period=" << cfg.controller_period_ticks
     << ";refs=";
  for (size_t j = 0; j < cfg.references.size(); ++j) {
    const auto& spec = cfg.references[j];
    if (j) os << "|";
    if (const auto* s = std::get_if<StepRef>(&spec)) {
      os << "step(" << format_double(s->target) << "@" << format_double(s->at) << ")";
    } else if (const auto* ms = std::get_if<MultiStepRef>(&spec)) {
      os << "steps(";
      for (size_t i = 0; i < ms->schedule.size(); ++i) {
        if (i) os << ",";
        os << format_double(ms->schedule[i].first) << ":" << format_double(ms->schedule[i].second);
      }
      os << ")";
    } else if (const auto* sn = std::get_if<SineRef>(&spec)) {
      os << "sine(" << format_double(sn->amplitude) << "," << format_double(sn->frequency_hz)
         << "," << format_double(sn->offset) << ")";
    }
  }
  return os.str();
}

inline uint64_t scenario_hash(const ScenarioConfig& cfg) {
  return fnv1a(canonical_description(cfg));
}

// ---------------------------------------------------------------------------
// Actuator-side selection

struct ControlSelection {
  std::vector<double> accel;  // command per joint for this tick
  bool from_buffer{false};    // false: no packet yet, previous command held
  uint64_t seq{0};
  int64_t age_ticks{0};       // elapsed ticks since the plan base, unclamped
  int index{0};               // horizon slot actually used
  int64_t source_state_ns{0}; // origin of the measurement the plan answered
};

// Picks the horizon slot whose schedule covers the current tick. Plans are
// stamped with the time their first step is scheduled for, so the slot is
// just the elapsed time in ticks, clamped into the plan.
inline ControlSelection control_selection(const LatestBuffer& buf, int64_t now_ns,
                                          int64_t npt, std::span<const double> hold,
                                          int joint_count) {
  ControlSelection sel;
  sel.accel.assign(hold.begin(), hold.end());
  sel.accel.resize(joint_count, 0.0);
  const auto latest = buf.latest();
  if (!latest.has_value()) {
    return sel;
  }
  const auto* plan = std::get_if<ControlPayload>(&latest->payload);
  if (plan == nullptr || plan->horizon < 1) {
    return sel;
  }
  int64_t elapsed = now_ns - latest->origin_timestamp_ns;
  int64_t idx = elapsed >= 0 ? elapsed / npt : -((-elapsed + npt - 1) / npt);
  sel.age_ticks = idx;
  idx = std::clamp<int64_t>(idx, 0, plan->horizon - 1);
  sel.from_buffer = true;
  sel.seq = latest->seq;
  sel.index = static_cast<int>(idx);
  sel.source_state_ns = latest->echo_timestamp_ns;
  const int jc = std::min(joint_count, plan->joint_count);
  for (int j = 0; j < jc; ++j) {
    sel.accel[j] = plan->accel[static_cast<size_t>(idx) * plan->joint_count + j];
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Control-side agent, shared by the simulated loop and the UDP server

struct PlanMessage {
  uint64_t seq{0};
  int64_t base_ns{0};  // plant-clock time the first step is scheduled for
  int64_t echo_ns{0};  // origin timestamp of the state this plan answers
  ControlPayload payload;
};

struct SolverStats {
  uint64_t solves{0};
  uint64_t not_converged{0};
  uint64_t total_iterations{0};
};

// Computes one reply plan per fresh measurement (the command stream is
// response-driven: no new measurement, no new plan). Keeps the per-joint
// warm starts, PID states and the log of inputs it believes the plant has
// been applying, for forward prediction of stale measurements.
//
// With prediction on, the plan is anchored where it is expected to start
// acting, not where the measurement was taken: the agent rolls the state
// over the measurement's age plus the observed forward transit, so the
// actuator lands near slot 0 of every plan it receives. Each deeper slot
// is conditioned on the plan's own earlier slots, which the plant only
// actually applies near the head; anchoring at the state instead leaves
// the transit window conditioned on inputs that never happen, and on a
// double integrator that mismatch builds into a limit cycle.
class ControlAgent {
 public:
  ControlAgent(const ScenarioConfig& cfg)
      : cfg_(cfg), model_(discretize(cfg.ts)), npt_(ns_per_tick(cfg.ts)) {
    plant_cfg_ = cfg.plant;
    plant_cfg_.ts = cfg.ts;
    plant_cfg_.joint_count = cfg.joint_count;
    pid_states_.resize(cfg.joint_count);
    warm_.resize(cfg.joint_count);
  }

  // state_ns: the measurement's own stamp; now_ns: this agent's clock at the
  // moment of computing, in the same clock as state_ns (the simulated loop
  // shares one clock; the UDP server passes its best plant-clock estimate).
  // ref_time_s: where the operator's reference currently stands.
  // held_base_ns: the measurement's echo, i.e. the stamp of the plan the
  // plant was holding when it sampled; 0 before the first plan lands.
  PlanMessage respond(const StatePayload& state, int64_t state_ns, int64_t now_ns,
                      double ref_time_s, int64_t held_base_ns = 0) {
    const int jc = cfg_.joint_count;
    observe_transit(held_base_ns, state_ns);
    int64_t k_pred = 0;
    if (cfg_.forward_prediction) {
      if (now_ns > state_ns) k_pred = (now_ns - state_ns) / npt_;
      k_pred += fwd_transit_ticks_ - 1;
    }

    std::vector<JointState> est(jc);
    for (int j = 0; j < jc; ++j) {
      JointState xm = j < static_cast<int>(state.joints.size()) ? state.joints[j] : JointState{};
      if (k_pred > 0) {
        std::vector<ControlInput> applied(static_cast<size_t>(k_pred));
        for (int64_t i = 0; i < k_pred; ++i) {
          applied[i] = ControlInput{expected_applied(state_ns + i * npt_, j)};
        }
        xm = predict_forward(xm, applied, static_cast<int>(k_pred), model_, plant_cfg_);
      }
      est[j] = xm;
    }

    PlanMessage msg;
    msg.seq = ++seq_;
    msg.echo_ns = state_ns;
    // The first step is scheduled one tick after the prediction horizon's
    // anchor: the plan leaves in flight during the current tick.
    msg.base_ns = state_ns + (k_pred + 1) * npt_;
    msg.payload.joint_count = jc;
    msg.payload.predicted = k_pred > 0;

    const int horizon = cfg_.controller == ControllerKind::mpc ? cfg_.mpc.horizon : 1;
    const int sent_h = cfg_.single_control_mode ? 1 : horizon;
    msg.payload.horizon = sent_h;
    msg.payload.accel.assign(static_cast<size_t>(sent_h) * jc, 0.0);

    for (int j = 0; j < jc; ++j) {
      const ReferenceTarget ref =
          j < static_cast<int>(cfg_.references.size())
              ? reference_signal(cfg_.references[j], ref_time_s)
              : ReferenceTarget{};
      if (cfg_.controller == ControllerKind::mpc) {
        const CondensedQp qp = build_qp(est[j], ref, model_, cfg_.mpc);
        std::vector<double> warm = shifted_warm(j, msg.base_ns, horizon);
        MpcSolution sol = solve_qp(qp, cfg_.mpc, warm);
        stats_.solves++;
        stats_.total_iterations += sol.iterations_used;
        if (!sol.converged) stats_.not_converged++;
        warm_[j].base_ns = msg.base_ns;
        warm_[j].u.resize(horizon);
        for (int i = 0; i < horizon; ++i) warm_[j].u[i] = sol.u_seq[i].acceleration;
        for (int i = 0; i < sent_h; ++i) {
          msg.payload.accel[static_cast<size_t>(i) * jc + j] = sol.u_seq[i].acceleration;
        }
      } else {
        auto [u, next] = pid_control(est[j], ref, pid_states_[j],
                                     cfg_.ts * cfg_.controller_period_ticks, cfg_.pid);
        pid_states_[j] = next;
        msg.payload.accel[j] = u.acceleration;
      }
    }

    log_.push_back(LogEntry{msg.base_ns, now_ns, msg.payload.horizon, msg.payload.accel});
    while (log_.size() > 512) log_.pop_front();
    return msg;
  }

  const SolverStats& stats() const { return stats_; }

 private:
  struct LogEntry {
    int64_t base_ns;
    int64_t sent_ns;
    int horizon;
    std::vector<double> accel;  // step-major
  };
  struct WarmEntry {
    int64_t base_ns{0};
    std::vector<double> u;
  };

  // One transit sample per echo change. A fresh echo means that plan reached
  // the plant between the previous sample and this one; samples trail the
  // accepting poll by one tick, so the arrival instant is state_ns - npt and
  // the sample is exact under fixed delays.
  void observe_transit(int64_t held_base_ns, int64_t state_ns) {
    if (held_base_ns <= 0 || held_base_ns == last_echo_base_) return;
    last_echo_base_ = held_base_ns;
    for (auto it = log_.rbegin(); it != log_.rend(); ++it) {
      if (it->base_ns == held_base_ns) {
        const int64_t transit = (state_ns - npt_ - it->sent_ns) / npt_;
        fwd_transit_ticks_ = std::clamp<int64_t>(transit, 1, 10000);
        return;
      }
    }
  }

  // What the plant is believed to be applying at a given instant: the newest
  // plan whose schedule has started, indexed like the actuator indexes it.
  double expected_applied(int64_t t_ns, int joint) const {
    for (auto it = log_.rbegin(); it != log_.rend(); ++it) {
      if (it->base_ns <= t_ns) {
        int64_t idx = (t_ns - it->base_ns) / npt_;
        idx = std::clamp<int64_t>(idx, 0, it->horizon - 1);
        return it->accel[static_cast<size_t>(idx) * cfg_.joint_count + joint];
      }
    }
    return 0.0;
  }

  std::vector<double> shifted_warm(int joint, int64_t base_ns, int horizon) const {
    const WarmEntry& w = warm_[joint];
    std::vector<double> out;
    if (w.u.empty()) return out;
    int64_t shift = (base_ns - w.base_ns) / npt_;
    if (shift < 0) shift = 0;
    out.assign(horizon, 0.0);
    for (int i = 0; i < horizon; ++i) {
      const int64_t src = i + shift;
      out[i] = src < static_cast<int64_t>(w.u.size()) ? w.u[src] : 0.0;
    }
    return out;
  }

  ScenarioConfig cfg_;
  DiscreteModel model_;
  PlantConfig plant_cfg_;
  int64_t npt_;
  uint64_t seq_{0};
  int64_t fwd_transit_ticks_{1};  // newest observed command transit, >= 1
  int64_t last_echo_base_{0};
  std::deque<LogEntry> log_;
  std::vector<WarmEntry> warm_;
  std::vector<PidState> pid_states_;
  SolverStats stats_;
};

// ---------------------------------------------------------------------------
// Closed-loop run

struct TraceRecord {
  int64_t tick{0};
  double time{0.0};
  std::vector<double> angle, velocity, ref_angle, ref_velocity, applied_accel;
  uint64_t applied_seq{0};
  int64_t applied_age_ticks{0};
  bool actuator_hit{false};
  bool fresh_state{false};
  int64_t applied_source_ns{0};
  std::optional<double> rtt_s;
};

struct RunResult {
  std::vector<TraceRecord> trace;
  ChannelCounters fwd, bwd;
  SolverStats solver;
};

// Fixed-step loop on one clock. Per tick: the plant actuates and integrates,
// samples and sends the new state backward, both channels hand over what is
// due, then the controller answers any fresh measurement with a plan sent
// forward. A plan computed at tick k therefore starts acting at tick k+2,
// matching a direct loop whose solver takes one tick.
inline RunResult run_scenario(const ScenarioConfig& cfg) {
  validate_scenario(cfg);
  const int jc = cfg.joint_count;
  const int64_t npt = ns_per_tick(cfg.ts);
  const int64_t ticks = scenario_tick_count(cfg);
  const DiscreteModel model = discretize(cfg.ts);
  PlantConfig plant_cfg = cfg.plant;
  plant_cfg.ts = cfg.ts;
  plant_cfg.joint_count = jc;

  ChannelConfig fwd_cfg = cfg.fwd;
  fwd_cfg.seed = derive_seed(cfg.seed, "fwd");
  ChannelConfig bwd_cfg = cfg.bwd;
  bwd_cfg.seed = derive_seed(cfg.seed, "bwd");
  Channel fwd{fwd_cfg};
  Channel bwd{bwd_cfg};
  LatestBuffer actuator_buf;    // plant side, holds the freshest plan
  LatestBuffer controller_buf;  // control side, holds the freshest state

  ControlAgent agent{cfg};
  std::vector<JointState> x(jc);
  std::vector<double> hold(jc, 0.0);
  uint64_t state_seq = 0;
  uint64_t last_answered_seq = 0;
  int64_t last_ctrl_origin_ns = 0;  // newest plan stamp seen by the plant
  std::optional<double> last_rtt_s;

  RunResult result;
  result.trace.reserve(ticks + 1);

  for (int64_t k = 0; k <= ticks; ++k) {
    const int64_t now_ns = k * npt;
    TraceRecord rec;
    rec.tick = k;
    rec.time = static_cast<double>(now_ns) * 1e-9;
    rec.angle.resize(jc);
    rec.velocity.resize(jc);
    rec.ref_angle.resize(jc);
    rec.ref_velocity.resize(jc);
    for (int j = 0; j < jc; ++j) {
      rec.angle[j] = x[j].angle;
      rec.velocity[j] = x[j].velocity;
      const ReferenceTarget r = j < static_cast<int>(cfg.references.size())
                                    ? reference_signal(cfg.references[j], rec.time)
                                    : ReferenceTarget{};
      rec.ref_angle[j] = r.angle;
      rec.ref_velocity[j] = r.velocity;
    }

    // 1. actuate and integrate
    ControlSelection sel = control_selection(actuator_buf, now_ns, npt, hold, jc);
    hold = sel.accel;
    rec.applied_accel = sel.accel;
    rec.actuator_hit = sel.from_buffer;
    rec.applied_seq = sel.seq;
    rec.applied_age_ticks = sel.age_ticks;
    rec.applied_source_ns = sel.source_state_ns;
    for (int j = 0; j < jc; ++j) {
      x[j] = plant_step(x[j], ControlInput{sel.accel[j]}, model, plant_cfg).state;
    }

    // 2. sample and send the new state backward
    const int64_t sample_ns = (k + 1) * npt;
    Packet sp;
    sp.seq = ++state_seq;
    sp.origin_timestamp_ns = sample_ns;
    sp.echo_timestamp_ns = last_ctrl_origin_ns;
    sp.payload = StatePayload{x};
    bwd.send(sp, sample_ns);

    // 3. both channels hand over what is due
    for (const Packet& p : fwd.poll(sample_ns)) {
      if (actuator_buf.offer(p)) {
        last_ctrl_origin_ns = p.origin_timestamp_ns;
        if (p.echo_timestamp_ns > 0) {
          last_rtt_s = static_cast<double>(sample_ns - p.echo_timestamp_ns) * 1e-9;
        }
      }
    }
    for (const Packet& p : bwd.poll(sample_ns)) {
      controller_buf.offer(p);
    }
    rec.rtt_s = last_rtt_s;

    // 4. the controller answers a fresh measurement with a plan
    if (k % cfg.controller_period_ticks == 0) {
      const auto latest = controller_buf.latest();
      if (latest.has_value() && latest->seq != last_answered_seq) {
        last_answered_seq = latest->seq;
        rec.fresh_state = true;
        const auto& sp_in = std::get<StatePayload>(latest->payload);
        PlanMessage plan = agent.respond(sp_in, latest->origin_timestamp_ns, sample_ns,
                                         static_cast<double>(sample_ns) * 1e-9,
                                         latest->echo_timestamp_ns);
        Packet cp;
        cp.seq = plan.seq;
        cp.origin_timestamp_ns = plan.base_ns;
        cp.echo_timestamp_ns = plan.echo_ns;
        cp.payload = plan.payload;
        fwd.send(cp, sample_ns);
      }
    }

    result.trace.push_back(std::move(rec));
  }

  result.fwd = fwd.counters();
  result.bwd = bwd.counters();
  result.solver = agent.stats();
  return result;
}

}  // namespace nmpc
