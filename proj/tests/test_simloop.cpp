#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "nmpc/simloop.hpp"

using namespace nmpc;

TEST_CASE("step and multi-step references look up the schedule", "[simloop][reference]") {
  const JointReferenceSpec step = StepRef{1.0, 2.0};
  REQUIRE(reference_signal(step, 1.999).angle == 0.0);
  REQUIRE(reference_signal(step, 2.0).angle == 1.0);
  REQUIRE(reference_signal(step, 2.0).velocity == 0.0);

  const JointReferenceSpec ms = MultiStepRef{{{0.0, 0.5}, {5.0, 1.5}}};
  REQUIRE(reference_signal(ms, 4.9).angle == 0.5);
  REQUIRE(reference_signal(ms, 5.0).angle == 1.5);
  REQUIRE(reference_signal(ms, 100.0).angle == 1.5);

  const JointReferenceSpec late = MultiStepRef{{{1.0, 0.7}}};
  REQUIRE(reference_signal(late, 0.5).angle == 0.0);  // nothing scheduled yet
}

TEST_CASE("sine reference carries its analytic derivative", "[simloop][reference]") {
  const JointReferenceSpec sn = SineRef{1.0, 0.5, 0.0};
  const ReferenceTarget r0 = reference_signal(sn, 0.0);
  REQUIRE(r0.angle == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(r0.velocity == Catch::Approx(M_PI).margin(1e-12));

  // Quarter period: crest of the wave, zero rate.
  const ReferenceTarget rq = reference_signal(sn, 0.5);
  REQUIRE(rq.angle == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(rq.velocity == Catch::Approx(0.0).margin(1e-9));

  const JointReferenceSpec off = SineRef{0.5, 0.2, 0.3};
  REQUIRE(reference_signal(off, 1.25).angle == Catch::Approx(0.3 + 0.5).margin(1e-12));
}

namespace {

Packet plan_packet(uint64_t seq, int64_t origin_ns, int horizon, int jc,
                   double fill, int64_t echo_ns = 0) {
  Packet p;
  p.seq = seq;
  p.origin_timestamp_ns = origin_ns;
  p.echo_timestamp_ns = echo_ns;
  ControlPayload pl;
  pl.horizon = horizon;
  pl.joint_count = jc;
  pl.accel.resize(static_cast<size_t>(horizon) * jc);
  for (int i = 0; i < horizon; ++i) {
    for (int j = 0; j < jc; ++j) pl.accel[static_cast<size_t>(i) * jc + j] = fill + i;
  }
  p.payload = pl;
  return p;
}

}  // namespace

TEST_CASE("actuator indexes the plan by elapsed ticks", "[simloop][selection]") {
  const int64_t npt = ns_per_tick(0.01);
  const std::vector<double> hold{0.25, -0.5};

  LatestBuffer empty_buf;
  const ControlSelection none = control_selection(empty_buf, 0, npt, hold, 2);
  REQUIRE_FALSE(none.from_buffer);
  REQUIRE(none.accel == hold);  // empty buffer holds the previous command

  LatestBuffer buf;
  buf.offer(plan_packet(9, 10 * npt, 30, 2, 0.5));

  const ControlSelection s0 = control_selection(buf, 10 * npt, npt, hold, 2);
  REQUIRE(s0.from_buffer);
  REQUIRE(s0.index == 0);
  REQUIRE(s0.accel[0] == 0.5);
  REQUIRE(s0.seq == 9);

  // Elapsed 2.5 ticks lands in slot 2.
  const ControlSelection s2 = control_selection(buf, 10 * npt + npt * 5 / 2, npt, hold, 2);
  REQUIRE(s2.index == 2);
  REQUIRE(s2.accel[1] == 0.5 + 2);  // slot 2 of the staircase plan
  REQUIRE(s2.age_ticks == 2);

  // Far past the plan: clamp to the last slot.
  const ControlSelection s29 = control_selection(buf, 10 * npt + 100 * npt, npt, hold, 2);
  REQUIRE(s29.index == 29);
  REQUIRE(s29.age_ticks == 100);
}

TEST_CASE("trace has one record per tick plus the initial row", "[simloop][run]") {
  ScenarioConfig cfg;
  cfg.duration_s = 30.0;
  cfg.ts = 0.01;
  cfg.joint_count = 1;
  cfg.controller = ControllerKind::pid;
  const RunResult r = run_scenario(cfg);
  REQUIRE(scenario_tick_count(cfg) == 3000);
  REQUIRE(r.trace.size() == 3001);

  ScenarioConfig small = cfg;
  small.duration_s = 2.5;
  REQUIRE(run_scenario(small).trace.size() == 251);
}

TEST_CASE("clean loop equals a direct loop with one tick of compute latency",
          "[simloop][equivalence]") {
  ScenarioConfig cfg;
  cfg.duration_s = 2.5;
  cfg.joint_count = 2;
  cfg.references = {StepRef{0.5, 0.25}, SineRef{0.3, 0.5, 0.0}};
  const RunResult run = run_scenario(cfg);

  const int64_t ticks = scenario_tick_count(cfg);
  const int64_t npt = ns_per_tick(cfg.ts);
  const DiscreteModel m = discretize(cfg.ts);
  PlantConfig pc = cfg.plant;
  pc.ts = cfg.ts;
  pc.joint_count = cfg.joint_count;

  std::vector<JointState> x(cfg.joint_count);
  std::vector<std::vector<double>> planned(ticks + 3,
                                           std::vector<double>(cfg.joint_count, 0.0));
  std::vector<std::vector<double>> warm(cfg.joint_count);

  for (int64_t k = 0; k <= ticks; ++k) {
    for (int j = 0; j < cfg.joint_count; ++j) {
      REQUIRE(run.trace[k].angle[j] == x[j].angle);
      REQUIRE(run.trace[k].velocity[j] == x[j].velocity);
      REQUIRE(run.trace[k].applied_accel[j] == planned[k][j]);
    }
    for (int j = 0; j < cfg.joint_count; ++j) {
      x[j] = plant_step(x[j], ControlInput{planned[k][j]}, m, pc).state;
    }
    // The controller sees the state sampled after this step and its plan
    // starts acting two ticks from now.
    const double t_ref = static_cast<double>((k + 1) * npt) * 1e-9;
    for (int j = 0; j < cfg.joint_count; ++j) {
      const ReferenceTarget ref = reference_signal(cfg.references[j], t_ref);
      const CondensedQp qp = build_qp(x[j], ref, m, cfg.mpc);
      const MpcSolution sol = solve_qp(qp, cfg.mpc, warm[j]);
      planned[k + 2][j] = sol.u_seq[0].acceleration;
      warm[j].assign(cfg.mpc.horizon, 0.0);
      for (int i = 0; i + 1 < cfg.mpc.horizon; ++i) {
        warm[j][i] = sol.u_seq[i + 1].acceleration;
      }
    }
  }
}

TEST_CASE("clean step run settles on the target", "[simloop][run]") {
  ScenarioConfig cfg;
  cfg.duration_s = 3.0;
  cfg.joint_count = 1;
  cfg.references = {StepRef{0.5, 0.0}};
  const RunResult r = run_scenario(cfg);
  REQUIRE(std::abs(r.trace.back().angle[0] - 0.5) < 0.01);
  // Every applied input honors the actuator box.
  for (const TraceRecord& rec : r.trace) {
    REQUIRE(rec.applied_accel[0] >= -4.0);
    REQUIRE(rec.applied_accel[0] <= 4.0);
  }
}

TEST_CASE("equal seeds reproduce the trace bit for bit", "[simloop][determinism]") {
  ScenarioConfig cfg;
  cfg.duration_s = 2.0;
  cfg.joint_count = 2;
  cfg.seed = 77;
  cfg.references = {StepRef{0.4, 0.1}, SineRef{0.3, 0.4, 0.0}};
  cfg.fwd = ChannelConfig{0.1, 0.03, 0.1, 0};
  cfg.bwd = ChannelConfig{0.1, 0.03, 0.1, 0};
  const RunResult a = run_scenario(cfg);
  const RunResult b = run_scenario(cfg);
  REQUIRE(a.trace.size() == b.trace.size());
  for (size_t k = 0; k < a.trace.size(); ++k) {
    REQUIRE(a.trace[k].angle == b.trace[k].angle);
    REQUIRE(a.trace[k].velocity == b.trace[k].velocity);
    REQUIRE(a.trace[k].applied_accel == b.trace[k].applied_accel);
    REQUIRE(a.trace[k].applied_seq == b.trace[k].applied_seq);
    REQUIRE(a.trace[k].rtt_s == b.trace[k].rtt_s);
  }
  REQUIRE(a.fwd.dropped == b.fwd.dropped);
  REQUIRE(a.bwd.dropped == b.bwd.dropped);

  ScenarioConfig other = cfg;
  other.seed = 78;
  const RunResult c = run_scenario(other);
  bool differs = false;
  for (size_t k = 0; k < a.trace.size() && !differs; ++k) {
    differs = a.trace[k].applied_accel != c.trace[k].applied_accel;
  }
  REQUIRE(differs);
}

TEST_CASE("round trip measurement matches the configured path delays", "[simloop][rtt]") {
  ScenarioConfig clean;
  clean.duration_s = 1.0;
  clean.joint_count = 1;
  clean.references = {StepRef{0.3, 0.0}};
  const RunResult r = run_scenario(clean);
  REQUIRE_FALSE(r.trace[0].rtt_s.has_value());
  for (size_t k = 1; k < r.trace.size(); ++k) {
    REQUIRE(r.trace[k].rtt_s.has_value());
    // One tick: the echo comes back on the very next poll.
    REQUIRE(*r.trace[k].rtt_s == Catch::Approx(0.01).margin(1e-12));
  }

  ScenarioConfig delayed = clean;
  delayed.duration_s = 2.0;
  delayed.fwd = ChannelConfig{0.1, 0.0, 0.0, 0};
  delayed.bwd = ChannelConfig{0.1, 0.0, 0.0, 0};
  const RunResult d = run_scenario(delayed);
  REQUIRE(d.trace.back().rtt_s.has_value());
  REQUIRE(*d.trace.back().rtt_s == Catch::Approx(0.2).margin(1e-12));
}

TEST_CASE("applied commands never get older and stay causal", "[simloop][staleness]") {
  ScenarioConfig cfg;
  cfg.duration_s = 3.0;
  cfg.joint_count = 1;
  cfg.seed = 5;
  cfg.references = {SineRef{0.4, 0.3, 0.0}};
  cfg.fwd = ChannelConfig{0.08, 0.05, 0.15, 0};
  cfg.bwd = ChannelConfig{0.08, 0.05, 0.15, 0};
  const RunResult r = run_scenario(cfg);

  int64_t prev_base_tick = INT64_MIN;
  const int64_t npt = ns_per_tick(cfg.ts);
  bool saw_hit = false;
  for (const TraceRecord& rec : r.trace) {
    if (!rec.actuator_hit) continue;
    saw_hit = true;
    // The buffer keeps the newest schedule: the applied plan's base stamp
    // (recovered from the unclamped age) never moves backward.
    const int64_t base_tick = rec.tick - rec.applied_age_ticks;
    REQUIRE(base_tick >= prev_base_tick);
    prev_base_tick = base_tick;
    // The measurement the command answers predates its application by at
    // least the two base path delays (0.08 s each, jitter >= -0.05 s).
    REQUIRE(rec.tick * npt - rec.applied_source_ns >= 60'000'000);
  }
  REQUIRE(saw_hit);
}

TEST_CASE("fixed two way delay keeps commands at least one round trip stale",
          "[simloop][staleness]") {
  ScenarioConfig cfg;
  cfg.duration_s = 2.0;
  cfg.joint_count = 1;
  cfg.references = {StepRef{0.5, 0.0}};
  cfg.fwd = ChannelConfig{0.1, 0.0, 0.0, 0};
  cfg.bwd = ChannelConfig{0.1, 0.0, 0.0, 0};
  const int64_t npt = ns_per_tick(cfg.ts);
  const RunResult r = run_scenario(cfg);
  for (const TraceRecord& rec : r.trace) {
    if (!rec.actuator_hit) continue;
    REQUIRE(rec.tick * npt - rec.applied_source_ns >= 200'000'000);
  }
}

TEST_CASE("delay degrades sine tracking", "[simloop][run]") {
  ScenarioConfig clean;
  clean.duration_s = 10.0;
  clean.joint_count = 1;
  clean.references = {SineRef{0.5, 0.2, 0.0}};
  const RunResult a = run_scenario(clean);

  ScenarioConfig delayed = clean;
  delayed.fwd = ChannelConfig{0.1, 0.0, 0.0, 0};
  delayed.bwd = ChannelConfig{0.1, 0.0, 0.0, 0};
  const RunResult b = run_scenario(delayed);

  const auto rss = [](const RunResult& r) {
    double acc = 0.0;
    for (const TraceRecord& rec : r.trace) {
      const double e = rec.angle[0] - rec.ref_angle[0];
      acc += e * e;
    }
    return acc / static_cast<double>(r.trace.size());
  };
  REQUIRE(rss(b) > rss(a));
}

TEST_CASE("pid tuning keeps the delay free step overshoot under five percent",
          "[simloop][pid]") {
  ScenarioConfig cfg;
  cfg.duration_s = 4.0;
  cfg.joint_count = 1;
  cfg.controller = ControllerKind::pid;
  cfg.references = {StepRef{1.0, 0.0}};
  const RunResult r = run_scenario(cfg);
  double peak = 0.0;
  for (const TraceRecord& rec : r.trace) peak = std::max(peak, rec.angle[0]);
  REQUIRE(peak <= 1.05);
  REQUIRE(std::abs(r.trace.back().angle[0] - 1.0) < 0.02);
}

TEST_CASE("single control mode matches full horizon mode when nothing is stale",
          "[simloop][run]") {
  ScenarioConfig full;
  full.duration_s = 1.5;
  full.joint_count = 1;
  full.references = {StepRef{0.5, 0.0}};
  ScenarioConfig single = full;
  single.single_control_mode = true;
  const RunResult a = run_scenario(full);
  const RunResult b = run_scenario(single);
  for (size_t k = 0; k < a.trace.size(); ++k) {
    REQUIRE(a.trace[k].angle[0] == b.trace[k].angle[0]);
    REQUIRE(a.trace[k].applied_accel[0] == b.trace[k].applied_accel[0]);
  }
}

TEST_CASE("prediction flag is inert without staleness", "[simloop][run]") {
  ScenarioConfig off;
  off.duration_s = 1.5;
  off.joint_count = 1;
  off.references = {StepRef{0.5, 0.0}};
  off.forward_prediction = false;
  ScenarioConfig on = off;
  on.forward_prediction = true;
  const RunResult a = run_scenario(off);
  const RunResult b = run_scenario(on);
  for (size_t k = 0; k < a.trace.size(); ++k) {
    REQUIRE(a.trace[k].angle[0] == b.trace[k].angle[0]);
    REQUIRE(a.trace[k].applied_accel[0] == b.trace[k].applied_accel[0]);
  }
}

TEST_CASE("slower controller period still closes the loop", "[simloop][run]") {
  ScenarioConfig cfg;
  cfg.duration_s = 3.0;
  cfg.joint_count = 1;
  cfg.controller_period_ticks = 2;
  cfg.references = {StepRef{0.5, 0.0}};
  const RunResult r = run_scenario(cfg);
  REQUIRE(std::abs(r.trace.back().angle[0] - 0.5) < 0.01);
  int fresh = 0;
  for (const TraceRecord& rec : r.trace) {
    if (rec.fresh_state) {
      ++fresh;
      REQUIRE(rec.tick % 2 == 0);
    }
  }
  REQUIRE(fresh > 100);
}

TEST_CASE("overshoot grows with the commanded step size", "[simloop][multistep]") {
  // Three successive steps of increasing magnitude under a 200 ms round trip.
  ScenarioConfig cfg;
  cfg.duration_s = 15.0;
  cfg.joint_count = 1;
  cfg.references = {MultiStepRef{{{0.0, 0.5}, {5.0, 1.5}, {10.0, 3.0}}}};
  cfg.fwd = ChannelConfig{0.1, 0.0, 0.0, 0};
  cfg.bwd = ChannelConfig{0.1, 0.0, 0.0, 0};
  const RunResult r = run_scenario(cfg);

  const double targets[3] = {0.5, 1.5, 3.0};
  double overshoot[3] = {0.0, 0.0, 0.0};
  for (const TraceRecord& rec : r.trace) {
    const int seg = rec.time < 5.0 ? 0 : rec.time < 10.0 ? 1 : 2;
    overshoot[seg] = std::max(overshoot[seg], rec.angle[0] - targets[seg]);
  }
  REQUIRE(overshoot[0] <= overshoot[1] + 1e-9);
  REQUIRE(overshoot[1] <= overshoot[2] + 1e-9);
}

TEST_CASE("scenario validation rejects malformed configurations", "[simloop][config]") {
  ScenarioConfig ok;
  REQUIRE_NOTHROW(validate_scenario(ok));

  ScenarioConfig bad = ok;
  bad.duration_s = 0.0;
  REQUIRE_THROWS_AS(validate_scenario(bad), std::invalid_argument);
  bad = ok;
  bad.ts = -0.01;
  REQUIRE_THROWS_AS(validate_scenario(bad), std::invalid_argument);
  bad = ok;
  bad.joint_count = 0;
  REQUIRE_THROWS_AS(validate_scenario(bad), std::invalid_argument);
  bad = ok;
  bad.controller_period_ticks = 0;
  REQUIRE_THROWS_AS(validate_scenario(bad), std::invalid_argument);
  bad = ok;
  bad.mpc.horizon = 0;
  REQUIRE_THROWS_AS(validate_scenario(bad), std::invalid_argument);
  bad = ok;
  bad.fwd = ChannelConfig{0.01, 0.05, 0.0, 0};  // jitter exceeds base
  REQUIRE_THROWS_AS(validate_scenario(bad), std::invalid_argument);
  bad = ok;
  bad.references.assign(7, JointReferenceSpec{StepRef{}});
  REQUIRE_THROWS_AS(validate_scenario(bad), std::invalid_argument);
}

TEST_CASE("scenario hash tracks the configuration", "[simloop][config]") {
  ScenarioConfig a;
  ScenarioConfig b;
  REQUIRE(scenario_hash(a) == scenario_hash(b));
  b.seed = 2;
  REQUIRE(scenario_hash(a) != scenario_hash(b));
  ScenarioConfig c;
  c.references = {SineRef{0.5, 0.2, 0.0}};
  REQUIRE(scenario_hash(a) != scenario_hash(c));
}
