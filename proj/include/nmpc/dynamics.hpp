#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace nmpc {

// Closed interval with clamping; every plant limit is one of these.
struct Interval {
  double lo{0.0};
  double hi{0.0};

  double clamp(double v) const { return v < lo ? lo : (v > hi ? hi : v); }
  bool contains(double v) const { return v >= lo && v <= hi; }
};

// One joint: angle [rad] and angular velocity [rad/s].
struct JointState {
  double angle{0.0};
  double velocity{0.0};
};

// Commanded angular acceleration [rad/s^2] for one joint.
struct ControlInput {
  double acceleration{0.0};
};

// The arm is modeled as independent identical joints, each a double
// integrator in (angle, velocity) driven by commanded acceleration.
struct PlantConfig {
  int joint_count{6};
  double ts{0.01};
  Interval angle_limits{-6.0, 6.0};
  Interval velocity_limits{-3.14, 3.14};
  Interval input_limits{-4.0, 4.0};
};

// Zero-order-hold discretization of the double integrator. The continuous
// system matrix is nilpotent, so a = [[1,ts],[0,1]], b = [ts^2/2, ts] is
// exact, not a truncation.
struct DiscreteModel {
  double ts{0.01};
  std::array<std::array<double, 2>, 2> a{{{1.0, 0.01}, {0.0, 1.0}}};
  std::array<double, 2> b{{5e-5, 0.01}};
};

inline DiscreteModel discretize(double ts) {
  if (!std::isfinite(ts) || ts <= 0.0) {
    throw std::invalid_argument("discretize: sample period must be positive and finite");
  }
  DiscreteModel m;
  m.ts = ts;
  m.a = {{{1.0, ts}, {0.0, 1.0}}};
  m.b = {{0.5 * ts * ts, ts}};
  return m;
}

struct StepResult {
  JointState state;
  bool input_clamped{false};
  bool velocity_clamped{false};
  bool angle_clamped{false};
};

// Order matters: the input is clamped before integration (the actuator
// refuses out-of-range commands), the states after it.
inline StepResult plant_step(const JointState& x, const ControlInput& u,
                             const DiscreteModel& m, const PlantConfig& cfg) {
  StepResult r;
  const double ua = cfg.input_limits.clamp(u.acceleration);
  r.input_clamped = (ua != u.acceleration);

  double angle = m.a[0][0] * x.angle + m.a[0][1] * x.velocity + m.b[0] * ua;
  double velocity = m.a[1][0] * x.angle + m.a[1][1] * x.velocity + m.b[1] * ua;

  const double vc = cfg.velocity_limits.clamp(velocity);
  r.velocity_clamped = (vc != velocity);
  const double ac = cfg.angle_limits.clamp(angle);
  r.angle_clamped = (ac != angle);

  r.state = JointState{ac, vc};
  return r;
}

// Rolls one joint forward through u_seq; result[0] is x0, so the
// trajectory has u_seq.size() + 1 entries.
inline std::vector<JointState> simulate_open_loop(const JointState& x0,
                                                  std::span<const ControlInput> u_seq,
                                                  const DiscreteModel& m,
                                                  const PlantConfig& cfg) {
  if (u_seq.empty()) {
    throw std::invalid_argument("simulate_open_loop: control sequence is empty");
  }
  std::vector<JointState> traj;
  traj.reserve(u_seq.size() + 1);
  traj.push_back(x0);
  JointState x = x0;
  for (const ControlInput& u : u_seq) {
    x = plant_step(x, u, m, cfg).state;
    traj.push_back(x);
  }
  return traj;
}

}  // namespace nmpc
