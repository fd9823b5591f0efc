#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "nmpc/controller.hpp"
#include "nmpc/dynamics.hpp"
#include "qp_brute_force.hpp"

using namespace nmpc;

namespace {

double urand(std::mt19937_64& gen, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(gen() >> 11) * 0x1.0p-53);
}

}  // namespace

TEST_CASE("condensed problem matches hand expansion at horizon 1", "[controller][qp]") {
  // With one step, H = b'Qx b + qu and g = b'Qx (A x0 - r), both scalars.
  const DiscreteModel m = discretize(0.1);
  MpcConfig cfg;
  cfg.horizon = 1;
  const JointState x0{1.0, 0.0};
  const ReferenceTarget ref{0.0, 0.0};
  const CondensedQp qp = build_qp(x0, ref, m, cfg);

  const double h_expect = cfg.qx_angle * m.b[0] * m.b[0] + cfg.qx_velocity * m.b[1] * m.b[1] + cfg.qu;
  const double ea = (x0.angle + m.ts * x0.velocity) - ref.angle;
  const double ev = x0.velocity - ref.velocity;
  const double g_expect = cfg.qx_angle * m.b[0] * ea + cfg.qx_velocity * m.b[1] * ev;
  REQUIRE(h_expect == Catch::Approx(0.028325).margin(1e-12));
  REQUIRE(g_expect == Catch::Approx(0.065).margin(1e-12));
  REQUIRE(qp.hessian[0] == Catch::Approx(h_expect).margin(1e-15));
  REQUIRE(qp.gradient[0] == Catch::Approx(g_expect).margin(1e-15));
}

TEST_CASE("solver reproduces the analytic single-step optimum", "[controller][qp]") {
  const DiscreteModel m = discretize(0.1);
  MpcConfig cfg;
  cfg.horizon = 1;
  const CondensedQp qp = build_qp(JointState{1.0, 0.0}, ReferenceTarget{}, m, cfg);
  const MpcSolution sol = solve_qp(qp, cfg);
  const double analytic = -qp.gradient[0] / qp.hessian[0];
  REQUIRE(sol.converged);
  REQUIRE(sol.u_seq.size() == 1);
  REQUIRE(std::abs(sol.u_seq[0].acceleration - analytic) < 1e-6);
  REQUIRE(sol.u_seq[0].acceleration == Catch::Approx(-2.2948).margin(5e-5));
}

TEST_CASE("hessian stays positive definite with margin qu", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig cfg;
  cfg.horizon = 30;
  const CondensedQp qp = build_qp(JointState{0.3, -0.2}, ReferenceTarget{0.5, 0.0}, m, cfg);
  // x'Hx - qu x'x = |sqrt(Q) M x|^2 >= 0 for every direction.
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> v(cfg.horizon);
    double vv = 0.0;
    for (double& vi : v) {
      vi = urand(gen, -1.0, 1.0);
      vv += vi * vi;
    }
    double vhv = 0.0;
    for (int i = 0; i < cfg.horizon; ++i) {
      for (int j = 0; j < cfg.horizon; ++j) {
        vhv += v[i] * qp.hessian[static_cast<size_t>(i) * cfg.horizon + j] * v[j];
      }
    }
    REQUIRE(vhv >= cfg.qu * vv - 1e-12);
  }
}

TEST_CASE("grid oracle inner search agrees with a full scan", "[controller][oracle]") {
  // Defends the ternary shortcut inside the reference minimizer.
  const DiscreteModel m = discretize(0.05);
  MpcConfig cfg;
  std::mt19937_64 gen(7);
  const brute::Grid grid;
  for (int trial = 0; trial < 200; ++trial) {
    const JointState x{urand(gen, -7.0, 7.0), urand(gen, -4.0, 4.0)};
    const ReferenceTarget ref{urand(gen, -6.0, 6.0), urand(gen, -1.0, 1.0)};
    double tern_cost = 0.0;
    const int tern = brute::minimize_last(x, ref, m, cfg, grid, &tern_cost);
    int scan = 0;
    double scan_cost = std::numeric_limits<double>::infinity();
    for (int i = 0; i < grid.count(); ++i) {
      const double u = grid.value(i);
      const double c = brute::stage_cost(brute::lin_step(x, u, m), u, ref, cfg);
      if (c < scan_cost) {
        scan_cost = c;
        scan = i;
      }
    }
    INFO("trial=" << trial);
    REQUIRE(tern == scan);
    REQUIRE(tern_cost == Catch::Approx(scan_cost).margin(1e-12));
  }
}

TEST_CASE("solver matches the exhaustive grid reference", "[controller][qp]") {
  const DiscreteModel m = discretize(0.05);
  std::mt19937_64 gen(3);
  for (int n = 1; n <= 3; ++n) {
    MpcConfig cfg;
    cfg.horizon = n;
    for (int trial = 0; trial < 3; ++trial) {
      const JointState x0{urand(gen, -2.0, 2.0), urand(gen, -1.5, 1.5)};
      const ReferenceTarget ref{urand(gen, -2.0, 2.0), 0.0};
      const std::vector<double> grid = brute::grid_argmin(x0, ref, m, cfg);
      const MpcSolution sol = mpc_control(x0, ref, m, cfg);
      REQUIRE(sol.converged);
      for (int k = 0; k < n; ++k) {
        INFO("n=" << n << " trial=" << trial << " k=" << k);
        REQUIRE(std::abs(sol.u_seq[k].acceleration - grid[k]) < 0.01);
      }
    }
  }
}

TEST_CASE("far target pins the first inputs at the actuator limit", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig cfg;
  cfg.horizon = 5;
  const JointState x0{6.0, 0.0};
  const ReferenceTarget ref{-6.0, 0.0};
  const MpcSolution sol = mpc_control(x0, ref, m, cfg);
  REQUIRE(sol.converged);
  REQUIRE(sol.u_seq[0].acceleration == Catch::Approx(-4.0).margin(1e-9));
  REQUIRE(sol.u_seq[1].acceleration == Catch::Approx(-4.0).margin(1e-9));

  // The short-horizon grid reference sees the same boundary activity.
  cfg.horizon = 3;
  const std::vector<double> grid = brute::grid_argmin(x0, ref, m, cfg);
  REQUIRE(grid[0] == Catch::Approx(-4.0).margin(1e-12));
  const MpcSolution sol3 = mpc_control(x0, ref, m, cfg);
  for (int k = 0; k < 3; ++k) {
    REQUIRE(std::abs(sol3.u_seq[k].acceleration - grid[k]) < 0.01);
  }
}

TEST_CASE("inputs respect the box for random states", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig cfg;
  cfg.horizon = 8;
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const JointState x0{urand(gen, -6.0, 6.0), urand(gen, -3.14, 3.14)};
    const ReferenceTarget ref{urand(gen, -6.0, 6.0), 0.0};
    const MpcSolution sol = mpc_control(x0, ref, m, cfg);
    for (const ControlInput& u : sol.u_seq) {
      REQUIRE(u.acceleration >= -4.0);
      REQUIRE(u.acceleration <= 4.0);
    }
  }
}

TEST_CASE("zero error solves to zero input at zero cost", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig cfg;
  cfg.horizon = 12;
  const MpcSolution sol = mpc_control(JointState{0.7, 0.0}, ReferenceTarget{0.7, 0.0}, m, cfg);
  REQUIRE(sol.converged);
  REQUIRE(sol.cost == Catch::Approx(0.0).margin(1e-12));
  for (const ControlInput& u : sol.u_seq) {
    REQUIRE(u.acceleration == Catch::Approx(0.0).margin(1e-9));
  }
}

TEST_CASE("reported cost equals the stage sum of the returned plan", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig cfg;
  cfg.horizon = 30;
  const JointState x0{1.2, -0.4};
  const ReferenceTarget ref{-0.5, 0.0};
  const MpcSolution sol = mpc_control(x0, ref, m, cfg);

  double stage = 0.0;
  JointState x = x0;
  for (int i = 0; i < cfg.horizon; ++i) {
    const double ui = sol.u_seq[i].acceleration;
    x = JointState{x.angle + m.ts * x.velocity + 0.5 * m.ts * m.ts * ui,
                   x.velocity + m.ts * ui};
    REQUIRE(x.angle == Catch::Approx(sol.predicted_states[i].angle).margin(1e-9));
    REQUIRE(x.velocity == Catch::Approx(sol.predicted_states[i].velocity).margin(1e-9));
    const double ea = x.angle - ref.angle;
    const double ev = x.velocity - ref.velocity;
    stage += cfg.qx_angle * ea * ea + cfg.qx_velocity * ev * ev + cfg.qu * ui * ui;
  }
  REQUIRE(sol.cost == Catch::Approx(stage).epsilon(1e-9));
}

TEST_CASE("plan never beats the zero sequence it was compared against", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig cfg;
  cfg.horizon = 20;
  std::mt19937_64 gen(23);
  for (int trial = 0; trial < 50; ++trial) {
    const JointState x0{urand(gen, -2.0, 2.0), urand(gen, -1.0, 1.0)};
    const ReferenceTarget ref{urand(gen, -2.0, 2.0), 0.0};
    const CondensedQp qp = build_qp(x0, ref, m, cfg);
    const MpcSolution sol = solve_qp(qp, cfg);
    const MpcSolution zero_eval = [&] {
      // Evaluate the zero plan through the same stage sum.
      double stage = 0.0;
      JointState x = x0;
      for (int i = 0; i < cfg.horizon; ++i) {
        x = JointState{x.angle + m.ts * x.velocity, x.velocity};
        const double ea = x.angle - ref.angle;
        const double ev = x.velocity - ref.velocity;
        stage += cfg.qx_angle * ea * ea + cfg.qx_velocity * ev * ev;
      }
      MpcSolution s;
      s.cost = stage;
      return s;
    }();
    REQUIRE(sol.cost <= zero_eval.cost + 1e-9);
  }
}

TEST_CASE("longer horizon evaluates no worse than the padded short plan", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig c5;
  c5.horizon = 5;
  MpcConfig c30;
  c30.horizon = 30;
  const JointState x0{1.0, 0.0};
  const ReferenceTarget ref{0.0, 0.0};
  const MpcSolution s5 = mpc_control(x0, ref, m, c5);
  const MpcSolution s30 = mpc_control(x0, ref, m, c30);

  std::vector<double> padded(30, 0.0);
  for (int i = 0; i < 5; ++i) padded[i] = s5.u_seq[i].acceleration;
  double stage = 0.0;
  JointState x = x0;
  for (int i = 0; i < 30; ++i) {
    x = JointState{x.angle + m.ts * x.velocity + 0.5 * m.ts * m.ts * padded[i],
                   x.velocity + m.ts * padded[i]};
    const double ea = x.angle - ref.angle;
    const double ev = x.velocity - ref.velocity;
    stage += c30.qx_angle * ea * ea + c30.qx_velocity * ev * ev + c30.qu * padded[i] * padded[i];
  }
  REQUIRE(s30.cost <= stage + 1e-9);
}

TEST_CASE("warm start does not change the answer", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig cfg;
  cfg.horizon = 30;
  const JointState x0{0.8, 0.3};
  const ReferenceTarget ref{-0.2, 0.0};
  const CondensedQp qp = build_qp(x0, ref, m, cfg);
  const MpcSolution cold = solve_qp(qp, cfg);

  std::vector<double> warm(cfg.horizon);
  for (int i = 0; i < cfg.horizon; ++i) {
    warm[i] = cold.u_seq[std::min(i + 1, cfg.horizon - 1)].acceleration;  // shifted
  }
  const MpcSolution warmed = solve_qp(qp, cfg, warm);
  REQUIRE(warmed.converged);
  for (int i = 0; i < cfg.horizon; ++i) {
    REQUIRE(warmed.u_seq[i].acceleration ==
            Catch::Approx(cold.u_seq[i].acceleration).margin(1e-5));
  }
}

TEST_CASE("solution is invariant to a common angle offset", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig cfg;
  cfg.horizon = 15;
  const double offset = 0.75;
  const JointState xa{0.4, -0.1};
  const JointState xb{0.4 + offset, -0.1};
  const ReferenceTarget ra{-0.3, 0.0};
  const ReferenceTarget rb{-0.3 + offset, 0.0};
  const MpcSolution sa = mpc_control(xa, ra, m, cfg);
  const MpcSolution sb = mpc_control(xb, rb, m, cfg);
  for (int i = 0; i < cfg.horizon; ++i) {
    REQUIRE(sa.u_seq[i].acceleration == Catch::Approx(sb.u_seq[i].acceleration).margin(1e-9));
  }
}

TEST_CASE("kkt conditions hold at the returned point", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig cfg;
  cfg.horizon = 25;
  const JointState x0{3.0, 1.0};
  const ReferenceTarget ref{-3.0, 0.0};
  const CondensedQp qp = build_qp(x0, ref, m, cfg);
  const MpcSolution sol = solve_qp(qp, cfg);
  REQUIRE(sol.converged);

  // Recompute the gradient of the full objective at the solution.
  const int n = cfg.horizon;
  std::vector<double> u(n), grad(n);
  for (int i = 0; i < n; ++i) u[i] = sol.u_seq[i].acceleration;
  std::vector<double> x(2 * n);
  for (int r = 0; r < 2 * n; ++r) {
    double acc = qp.state_base[r];
    for (int k = 0; k < n; ++k) acc += qp.input_to_state[static_cast<size_t>(r) * n + k] * u[k];
    x[r] = acc;
  }
  for (int k = 0; k < n; ++k) {
    double hrow = 0.0;
    for (int l = 0; l < n; ++l) hrow += qp.hessian[static_cast<size_t>(k) * n + l] * u[l];
    grad[k] = 2.0 * (hrow + qp.gradient[k]);
  }
  for (int i = 0; i < n; ++i) {
    auto over = [](double v, const Interval& b) {
      if (v > b.hi) return v - b.hi;
      if (v < b.lo) return v - b.lo;
      return 0.0;
    };
    const double va = over(x[2 * i], qp.angle_bounds);
    const double vv = over(x[2 * i + 1], qp.velocity_bounds);
    for (int k = 0; k <= i; ++k) {
      grad[k] += 2.0 * qp.penalty_weight *
                 (va * qp.input_to_state[(2 * i) * static_cast<size_t>(n) + k] +
                  vv * qp.input_to_state[(2 * i + 1) * static_cast<size_t>(n) + k]);
    }
  }
  for (int k = 0; k < n; ++k) {
    const bool at_lo = u[k] <= qp.lo + 1e-12;
    const bool at_hi = u[k] >= qp.hi - 1e-12;
    const bool outward = (at_lo && grad[k] > 0.0) || (at_hi && grad[k] < 0.0);
    const double projected = u[k] - std::clamp(u[k] - grad[k], qp.lo, qp.hi);
    INFO("k=" << k << " grad=" << grad[k]);
    REQUIRE((outward || std::abs(projected) <= 10 * cfg.solver_tolerance));
  }
}

TEST_CASE("pid proportional action and saturation freeze", "[controller][pid]") {
  PidConfig cfg;
  cfg.kp = 1.0;
  cfg.ki = 0.0;
  cfg.kd = 0.0;
  PidState s;
  auto [u, s1] = pid_control(JointState{0.0, 0.0}, ReferenceTarget{0.5, 0.0}, s, 0.01, cfg);
  REQUIRE(u.acceleration == Catch::Approx(0.5).margin(1e-15));

  PidConfig hot;
  hot.kp = 100.0;
  hot.ki = 0.5;
  hot.kd = 0.0;
  PidState t;
  auto [u1, t1] = pid_control(JointState{0.0, 0.0}, ReferenceTarget{1.0, 0.0}, t, 0.01, hot);
  REQUIRE(u1.acceleration == 4.0);
  REQUIRE(t1.integral == t.integral);  // frozen while clipped
  auto [u2, t2] = pid_control(JointState{0.0, 0.0}, ReferenceTarget{1.0, 0.0}, t1, 0.01, hot);
  REQUIRE(u2.acceleration == 4.0);
  REQUIRE(t2.integral == t1.integral);
}

TEST_CASE("pid derivative needs history and integral stays bounded", "[controller][pid]") {
  PidConfig cfg;
  cfg.kp = 0.0;
  cfg.ki = 0.0;
  cfg.kd = 2.0;
  cfg.output_limits = Interval{-1000.0, 1000.0};  // keep the kick visible
  PidState s;
  // First call has no previous error: no derivative contribution.
  auto [u, s1] = pid_control(JointState{0.0, 0.0}, ReferenceTarget{1.0, 0.0}, s, 0.01, cfg);
  REQUIRE(u.acceleration == 0.0);
  auto [u1, s2] = pid_control(JointState{0.5, 0.0}, ReferenceTarget{1.0, 0.0}, s1, 0.01, cfg);
  REQUIRE(u1.acceleration == Catch::Approx(2.0 * (0.5 - 1.0) / 0.01).margin(1e-12));
  (void)u1;

  PidConfig slow;
  slow.kp = 0.0;
  slow.ki = 0.2;
  slow.kd = 0.0;
  PidState w;
  for (int k = 0; k < 5000; ++k) {
    auto [uu, next] = pid_control(JointState{0.0, 0.0}, ReferenceTarget{3.0, 0.0}, w, 0.01, slow);
    w = next;
    REQUIRE(std::abs(slow.ki * w.integral) <= 4.0 + 1e-12);
  }
}

TEST_CASE("pid rejects bad sample periods", "[controller][pid]") {
  PidState s;
  REQUIRE_THROWS_AS(
      pid_control(JointState{}, ReferenceTarget{}, s, 0.0, PidConfig{}),
      std::invalid_argument);
}

TEST_CASE("predict_forward replays the applied inputs", "[controller][predict]") {
  const DiscreteModel m = discretize(0.01);
  const PlantConfig cfg;
  const JointState x0{0.2, -0.1};
  REQUIRE(predict_forward(x0, {}, 0, m, cfg).angle == x0.angle);

  std::vector<ControlInput> log{{0.5}, {-0.25}, {1.0}};
  const JointState rolled = predict_forward(x0, log, 3, m, cfg);
  const auto traj = simulate_open_loop(x0, log, m, cfg);
  REQUIRE(rolled.angle == traj.back().angle);
  REQUIRE(rolled.velocity == traj.back().velocity);

  // Steps past the end of the log coast with zero input.
  const JointState padded = predict_forward(x0, log, 5, m, cfg);
  JointState manual = traj.back();
  for (int i = 0; i < 2; ++i) manual = plant_step(manual, ControlInput{}, m, cfg).state;
  REQUIRE(padded.angle == manual.angle);
  REQUIRE(padded.velocity == manual.velocity);

  REQUIRE_THROWS_AS(predict_forward(x0, log, -1, m, cfg), std::invalid_argument);
}

TEST_CASE("build_qp validates its configuration", "[controller][qp]") {
  const DiscreteModel m = discretize(0.01);
  MpcConfig bad;
  bad.horizon = 0;
  REQUIRE_THROWS_AS(build_qp(JointState{}, ReferenceTarget{}, m, bad), std::invalid_argument);
  MpcConfig badq;
  badq.qu = 0.0;
  REQUIRE_THROWS_AS(build_qp(JointState{}, ReferenceTarget{}, m, badq), std::invalid_argument);
}
