#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "nmpc/dynamics.hpp"

namespace nmpc {

struct MpcConfig {
  int horizon{30};
  double qx_angle{13.0};
  double qx_velocity{1.8};
  double qu{0.01};
  Interval angle_bounds{-6.0, 6.0};
  Interval velocity_bounds{-3.14, 3.14};
  Interval input_bounds{-4.0, 4.0};
  // State bounds enter the objective as soft quadratic penalties; only the
  // input box is enforced exactly.
  double state_penalty_weight{1e4};
  double solver_tolerance{1e-8};
  int max_iterations{2000};
};

struct ReferenceTarget {
  double angle{0.0};
  double velocity{0.0};
};

// Condensed per-joint problem over the stacked input vector U (length N):
//   F(U) = U'HU + 2g'U + offset + penalty(U),  lo <= U_i <= hi
// where predicted states are X = base + M U and penalty() charges
// penalty_weight * dist(X, state box)^2 per predicted component.
struct CondensedQp {
  int horizon{0};
  std::vector<double> hessian;        // N x N, row-major
  std::vector<double> gradient;       // N
  double offset{0.0};                 // constant term of the tracking cost
  double lo{0.0}, hi{0.0};            // input box
  std::vector<double> state_base;     // 2N: unforced state predictions
  std::vector<double> input_to_state; // 2N x N, row-major
  Interval angle_bounds{};
  Interval velocity_bounds{};
  double penalty_weight{0.0};
};

// Stage cost uses constant extrapolation of the reference over the horizon:
// the target is known only up to the current instant, never previewed.
inline CondensedQp build_qp(const JointState& x0, const ReferenceTarget& ref,
                            const DiscreteModel& m, const MpcConfig& cfg) {
  if (cfg.horizon < 1) {
    throw std::invalid_argument("build_qp: horizon must be at least 1");
  }
  if (cfg.qu <= 0.0) {
    throw std::invalid_argument("build_qp: input weight must be positive");
  }
  const int n = cfg.horizon;
  const double ts = m.ts;

  CondensedQp qp;
  qp.horizon = n;
  qp.lo = cfg.input_bounds.lo;
  qp.hi = cfg.input_bounds.hi;
  qp.angle_bounds = cfg.angle_bounds;
  qp.velocity_bounds = cfg.velocity_bounds;
  qp.penalty_weight = cfg.state_penalty_weight;

  // Powers of the transition matrix act simply here: A^j = [[1, j ts],[0,1]],
  // A^j b = [ts^2 (j + 1/2), ts].
  qp.state_base.resize(2 * static_cast<size_t>(n));
  qp.input_to_state.assign(2 * static_cast<size_t>(n) * n, 0.0);
  for (int i = 1; i <= n; ++i) {
    qp.state_base[2 * (i - 1)] = x0.angle + i * ts * x0.velocity;
    qp.state_base[2 * (i - 1) + 1] = x0.velocity;
    for (int k = 0; k < i; ++k) {
      const int j = i - 1 - k;
      qp.input_to_state[(2 * (i - 1)) * n + k] = ts * ts * (j + 0.5);
      qp.input_to_state[(2 * (i - 1) + 1) * n + k] = ts;
    }
  }

  qp.hessian.assign(static_cast<size_t>(n) * n, 0.0);
  qp.gradient.assign(n, 0.0);
  qp.offset = 0.0;
  for (int i = 1; i <= n; ++i) {
    const double ea = qp.state_base[2 * (i - 1)] - ref.angle;
    const double ev = qp.state_base[2 * (i - 1) + 1] - ref.velocity;
    qp.offset += cfg.qx_angle * ea * ea + cfg.qx_velocity * ev * ev;
    for (int k = 0; k < i; ++k) {
      const double ma = qp.input_to_state[(2 * (i - 1)) * n + k];
      qp.gradient[k] += cfg.qx_angle * ma * ea + cfg.qx_velocity * ts * ev;
      for (int l = 0; l <= k; ++l) {
        const double mal = qp.input_to_state[(2 * (i - 1)) * n + l];
        qp.hessian[static_cast<size_t>(k) * n + l] +=
            cfg.qx_angle * ma * mal + cfg.qx_velocity * ts * ts;
      }
    }
  }
  for (int k = 0; k < n; ++k) {
    qp.hessian[static_cast<size_t>(k) * n + k] += cfg.qu;
    for (int l = 0; l < k; ++l) {
      qp.hessian[static_cast<size_t>(l) * n + k] = qp.hessian[static_cast<size_t>(k) * n + l];
    }
  }
  return qp;
}

struct MpcSolution {
  std::vector<ControlInput> u_seq;
  std::vector<JointState> predicted_states;
  double cost{0.0};
  int iterations_used{0};
  bool converged{false};
};

namespace detail {

inline void predict_states(const CondensedQp& qp, std::span<const double> u,
                           std::vector<double>& x) {
  const int n = qp.horizon;
  x.assign(2 * static_cast<size_t>(n), 0.0);
  for (int r = 0; r < 2 * n; ++r) {
    double acc = qp.state_base[r];
    const double* row = &qp.input_to_state[static_cast<size_t>(r) * n];
    const int last = r / 2;  // inputs beyond the step index do not act yet
    for (int k = 0; k <= last && k < n; ++k) acc += row[k] * u[k];
    x[r] = acc;
  }
}

inline double box_violation(double v, const Interval& b) {
  if (v > b.hi) return v - b.hi;
  if (v < b.lo) return v - b.lo;
  return 0.0;
}

// Full objective including the soft state penalty.
inline double qp_objective(const CondensedQp& qp, std::span<const double> u,
                           std::vector<double>& xtmp) {
  const int n = qp.horizon;
  double quad = qp.offset;
  for (int k = 0; k < n; ++k) {
    double hrow = 0.0;
    const double* row = &qp.hessian[static_cast<size_t>(k) * n];
    for (int l = 0; l < n; ++l) hrow += row[l] * u[l];
    quad += u[k] * hrow + 2.0 * qp.gradient[k] * u[k];
  }
  // quad now equals tracking + effort; the recomputation through the
  // prediction matrices below adds only the bound penalty.
  predict_states(qp, u, xtmp);
  double pen = 0.0;
  for (int i = 0; i < n; ++i) {
    const double va = box_violation(xtmp[2 * i], qp.angle_bounds);
    const double vv = box_violation(xtmp[2 * i + 1], qp.velocity_bounds);
    pen += va * va + vv * vv;
  }
  return quad + qp.penalty_weight * pen;
}

}  // namespace detail

// Projected gradient on the input box with an exact piecewise line search:
// within one activity pattern of the soft penalty the objective is a plain
// quadratic along any ray, so each step either lands on the analytic minimum
// of the current piece or stops at the first breakpoint (a predicted state
// touching its bound, or an input hitting the box). The penalty is C1, so
// gradients are continuous across pieces and every step strictly descends.
// While the free set and penalty pattern hold still, directions are made
// conjugate (Fletcher-Reeves on the free coordinates), which finishes a
// fixed piece in at most one sweep of its dimension.
inline MpcSolution solve_qp(const CondensedQp& qp, const MpcConfig& cfg,
                            std::span<const double> warm_start = {}) {
  const int n = qp.horizon;
  std::vector<double> u(n, 0.0);
  if (!warm_start.empty()) {
    for (int k = 0; k < n && k < static_cast<int>(warm_start.size()); ++k) {
      u[k] = std::clamp(warm_start[k], qp.lo, qp.hi);
    }
  }

  std::vector<double> xpred, grad(n), dir(n), mdir;
  {
    // The zero sequence is always admissible; never start anywhere worse.
    const double fw = detail::qp_objective(qp, u, xpred);
    std::vector<double> zero(n, 0.0);
    const double f0 = detail::qp_objective(qp, zero, xpred);
    if (f0 < fw) u = zero;
  }

  std::vector<signed char> sig(2 * static_cast<size_t>(n), 0), prev_sig(sig);
  std::vector<char> free_k(n, 0), prev_free(free_k);
  double prev_gf2 = 0.0;
  bool have_prev_dir = false;  // dir holds a reusable conjugate predecessor

  MpcSolution sol;
  int iter = 0;
  for (; iter < cfg.max_iterations; ++iter) {
    detail::predict_states(qp, u, xpred);
    for (int k = 0; k < n; ++k) {
      double hrow = 0.0;
      const double* row = &qp.hessian[static_cast<size_t>(k) * n];
      for (int l = 0; l < n; ++l) hrow += row[l] * u[l];
      grad[k] = 2.0 * (hrow + qp.gradient[k]);
    }
    for (int i = 0; i < n; ++i) {
      const double va = detail::box_violation(xpred[2 * i], qp.angle_bounds);
      const double vv = detail::box_violation(xpred[2 * i + 1], qp.velocity_bounds);
      if (va != 0.0 || vv != 0.0) {
        for (int k = 0; k <= i; ++k) {
          grad[k] += 2.0 * qp.penalty_weight *
                     (va * qp.input_to_state[(2 * i) * static_cast<size_t>(n) + k] +
                      vv * qp.input_to_state[(2 * i + 1) * static_cast<size_t>(n) + k]);
        }
      }
    }

    double res = 0.0;
    for (int k = 0; k < n; ++k) {
      res = std::max(res, std::abs(u[k] - std::clamp(u[k] - grad[k], qp.lo, qp.hi)));
    }
    if (res <= cfg.solver_tolerance) {
      sol.converged = true;
      break;
    }

    double gf2 = 0.0;
    for (int k = 0; k < n; ++k) {
      const bool at_lo = u[k] <= qp.lo && grad[k] > 0.0;
      const bool at_hi = u[k] >= qp.hi && grad[k] < 0.0;
      free_k[k] = !(at_lo || at_hi);
      if (free_k[k]) gf2 += grad[k] * grad[k];
    }
    for (int i = 0; i < n; ++i) {
      const auto classify = [](double v, const Interval& b) -> signed char {
        if (v > b.hi) return 1;
        if (v < b.lo) return -1;
        return 0;
      };
      sig[2 * i] = classify(xpred[2 * i], qp.angle_bounds);
      sig[2 * i + 1] = classify(xpred[2 * i + 1], qp.velocity_bounds);
    }

    bool conjugate = have_prev_dir && prev_gf2 > 0.0 && free_k == prev_free && sig == prev_sig;
    if (conjugate) {
      const double beta = gf2 / prev_gf2;
      double gd = 0.0;
      for (int k = 0; k < n; ++k) {
        dir[k] = free_k[k] ? -grad[k] + beta * dir[k] : 0.0;
        gd += grad[k] * dir[k];
        // A mixed direction may push a bound coordinate outward; that voids
        // the piece analysis, so fall back to steepest descent.
        if (free_k[k] && ((u[k] <= qp.lo && dir[k] < 0.0) || (u[k] >= qp.hi && dir[k] > 0.0))) {
          gd = 1.0;
          break;
        }
      }
      if (gd >= 0.0) conjugate = false;
    }
    if (!conjugate) {
      for (int k = 0; k < n; ++k) dir[k] = free_k[k] ? -grad[k] : 0.0;
    }
    prev_free = free_k;
    prev_gf2 = gf2;

    double gd = 0.0;
    for (int k = 0; k < n; ++k) gd += grad[k] * dir[k];
    if (gd >= 0.0) break;  // numerically no descent direction left

    mdir.assign(2 * static_cast<size_t>(n), 0.0);
    for (int r = 0; r < 2 * n; ++r) {
      const double* row = &qp.input_to_state[static_cast<size_t>(r) * n];
      double acc = 0.0;
      const int last = r / 2;
      for (int k = 0; k <= last && k < n; ++k) acc += row[k] * dir[k];
      mdir[r] = acc;
    }

    // Piece for an infinitesimal forward step: a component exactly on its
    // bound counts as active only if the step enters the violated side.
    double curv = 0.0;
    for (int k = 0; k < n; ++k) {
      if (dir[k] == 0.0) continue;
      const double* row = &qp.hessian[static_cast<size_t>(k) * n];
      double hrow = 0.0;
      for (int l = 0; l < n; ++l) hrow += row[l] * dir[l];
      curv += dir[k] * hrow;
    }
    curv *= 2.0;
    double alpha_break = std::numeric_limits<double>::infinity();
    for (int r = 0; r < 2 * n; ++r) {
      const double m = mdir[r];
      if (m == 0.0) continue;
      const Interval& b = (r % 2 == 0) ? qp.angle_bounds : qp.velocity_bounds;
      const double v = xpred[r];
      const bool active = v > b.hi || v < b.lo || (v == b.hi && m > 0.0) || (v == b.lo && m < 0.0);
      if (active) curv += 2.0 * qp.penalty_weight * m * m;
      const double a_hi = (b.hi - v) / m;
      const double a_lo = (b.lo - v) / m;
      if (a_hi > 0.0) alpha_break = std::min(alpha_break, a_hi);
      if (a_lo > 0.0) alpha_break = std::min(alpha_break, a_lo);
    }
    for (int k = 0; k < n; ++k) {
      if (dir[k] > 0.0) {
        alpha_break = std::min(alpha_break, (qp.hi - u[k]) / dir[k]);
      } else if (dir[k] < 0.0) {
        alpha_break = std::min(alpha_break, (qp.lo - u[k]) / dir[k]);
      }
    }
    if (curv <= 0.0) break;  // impossible with qu > 0; defensive only

    const double alpha_star = -gd / curv;
    const bool interior = alpha_star <= alpha_break;
    const double alpha = interior ? alpha_star : alpha_break;
    if (!(alpha > 0.0)) break;
    for (int k = 0; k < n; ++k) {
      if (dir[k] != 0.0) u[k] = std::clamp(u[k] + alpha * dir[k], qp.lo, qp.hi);
    }
    // Conjugacy only survives an interior step inside an unchanged piece.
    have_prev_dir = interior;
    prev_sig = sig;
  }

  sol.iterations_used = iter;
  sol.u_seq.resize(n);
  for (int k = 0; k < n; ++k) sol.u_seq[k] = ControlInput{u[k]};
  detail::predict_states(qp, u, xpred);
  sol.predicted_states.resize(n);
  double cost = qp.offset;
  for (int k = 0; k < n; ++k) {
    double hrow = 0.0;
    const double* row = &qp.hessian[static_cast<size_t>(k) * n];
    for (int l = 0; l < n; ++l) hrow += row[l] * u[l];
    cost += u[k] * hrow + 2.0 * qp.gradient[k] * u[k];
  }
  sol.cost = cost;
  for (int i = 0; i < n; ++i) {
    sol.predicted_states[i] = JointState{xpred[2 * i], xpred[2 * i + 1]};
  }
  return sol;
}

inline MpcSolution mpc_control(const JointState& x0, const ReferenceTarget& ref,
                               const DiscreteModel& m, const MpcConfig& cfg,
                               std::span<const double> warm_start = {}) {
  return solve_qp(build_qp(x0, ref, m, cfg), cfg, warm_start);
}

struct PidConfig {
  double kp{9.0};
  double ki{0.3};
  double kd{5.4};
  Interval output_limits{-4.0, 4.0};
};

struct PidState {
  double integral{0.0};
  double prev_error{0.0};
  bool has_prev{false};
};

// Positional PID on the angle error with derivative on error and
// conditional integration: the integral freezes while the output saturates.
inline std::pair<ControlInput, PidState> pid_control(const JointState& x,
                                                     const ReferenceTarget& ref,
                                                     const PidState& s, double ts,
                                                     const PidConfig& cfg) {
  if (!std::isfinite(ts) || ts <= 0.0) {
    throw std::invalid_argument("pid_control: sample period must be positive and finite");
  }
  const double e = ref.angle - x.angle;
  const double de = s.has_prev ? (e - s.prev_error) / ts : 0.0;

  PidState next = s;
  next.prev_error = e;
  next.has_prev = true;

  double integral = s.integral + e * ts;
  // Keep the stored integral inside what the output stage can express.
  if (cfg.ki > 0.0) {
    integral = std::clamp(integral, cfg.output_limits.lo / cfg.ki,
                          cfg.output_limits.hi / cfg.ki);
  }
  const double raw = cfg.kp * e + cfg.ki * integral + cfg.kd * de;
  const double out = cfg.output_limits.clamp(raw);
  if (out == raw) {
    next.integral = integral;
  }
  return {ControlInput{out}, next};
}

// Rolls a measured state forward through the controls believed applied
// while it was in flight. Short logs are zero-padded.
inline JointState predict_forward(const JointState& x_meas,
                                  std::span<const ControlInput> applied_u, int steps,
                                  const DiscreteModel& m, const PlantConfig& cfg) {
  if (steps < 0) {
    throw std::invalid_argument("predict_forward: step count must be non-negative");
  }
  JointState x = x_meas;
  for (int j = 0; j < steps; ++j) {
    const ControlInput u = j < static_cast<int>(applied_u.size()) ? applied_u[j] : ControlInput{};
    x = plant_step(x, u, m, cfg).state;
  }
  return x;
}

}  // namespace nmpc
