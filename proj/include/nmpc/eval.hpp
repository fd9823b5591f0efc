#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nmpc/simloop.hpp"
#include "nmpc/trace_io.hpp"

namespace nmpc {

// ---------------------------------------------------------------------------
// Metrics

struct MetricReport {
  double ise{0.0};
  double rss{0.0};
  std::vector<double> ise_per_joint, rss_per_joint;
  int64_t n{0};
  uint64_t scenario_hash{0};
  uint64_t seed{0};
  std::string ideal_kind;  // "delay_free_run" or "reference"
};

// Mean squared angle tracking error, averaged over joints and samples.
inline std::vector<double> ise_per_joint(const std::vector<TraceRecord>& trace) {
  if (trace.empty()) throw std::invalid_argument("ise: empty trace");
  const int jc = static_cast<int>(trace.front().angle.size());
  std::vector<double> acc(jc, 0.0);
  for (const auto& rec : trace) {
    for (int j = 0; j < jc; ++j) {
      const double e = rec.angle[j] - rec.ref_angle[j];
      acc[j] += e * e;
    }
  }
  for (double& v : acc) v /= static_cast<double>(trace.size());
  return acc;
}

inline double ise(const std::vector<TraceRecord>& trace) {
  const auto per = ise_per_joint(trace);
  double sum = 0.0;
  for (double v : per) sum += v;
  return sum / static_cast<double>(per.size());
}

// Mean squared angle deviation from an ideal trajectory of equal length,
// averaged over joints and samples.
inline std::vector<double> rss_per_joint(const std::vector<TraceRecord>& run,
                                         const std::vector<TraceRecord>& ideal) {
  if (run.empty()) throw std::invalid_argument("rss: empty trace");
  if (run.size() != ideal.size()) {
    throw std::invalid_argument("rss: trace lengths differ");
  }
  const int jc = static_cast<int>(run.front().angle.size());
  if (jc != static_cast<int>(ideal.front().angle.size())) {
    throw std::invalid_argument("rss: joint counts differ");
  }
  std::vector<double> acc(jc, 0.0);
  for (std::size_t i = 0; i < run.size(); ++i) {
    for (int j = 0; j < jc; ++j) {
      const double d = run[i].angle[j] - ideal[i].angle[j];
      acc[j] += d * d;
    }
  }
  for (double& v : acc) v /= static_cast<double>(run.size());
  return acc;
}

inline double rss(const std::vector<TraceRecord>& run,
                  const std::vector<TraceRecord>& ideal) {
  const auto per = rss_per_joint(run, ideal);
  double sum = 0.0;
  for (double v : per) sum += v;
  return sum / static_cast<double>(per.size());
}

// RSS against the raw reference signal instead of a run. Numerically the
// same sum as ise; kept separate so reports can say which ideal they used.
inline double rss_vs_reference(const std::vector<TraceRecord>& trace) {
  return ise(trace);
}

// The scenario with its network made perfect; everything else identical.
// This is the default "ideal" a run is compared against: the residual then
// measures what the network cost, not what the controller cost.
inline ScenarioConfig delay_free(ScenarioConfig cfg) {
  cfg.fwd = ChannelConfig{};
  cfg.bwd = ChannelConfig{};
  return cfg;
}

inline MetricReport metric_report(const ScenarioConfig& cfg,
                                  const std::vector<TraceRecord>& run,
                                  const std::vector<TraceRecord>& ideal,
                                  std::string ideal_kind) {
  MetricReport rep;
  rep.ise_per_joint = ise_per_joint(run);
  rep.rss_per_joint = rss_per_joint(run, ideal);
  for (double v : rep.ise_per_joint) rep.ise += v;
  for (double v : rep.rss_per_joint) rep.rss += v;
  rep.ise /= static_cast<double>(rep.ise_per_joint.size());
  rep.rss /= static_cast<double>(rep.rss_per_joint.size());
  rep.n = static_cast<int64_t>(run.size());
  rep.scenario_hash = scenario_hash(cfg);
  rep.seed = cfg.seed;
  rep.ideal_kind = std::move(ideal_kind);
  return rep;
}

// ---------------------------------------------------------------------------
// Step-response shape metrics

// Largest excursion past the final target after the step lands; 0 when the
// response never crosses it.
inline double peak_overshoot(const std::vector<TraceRecord>& trace, int joint,
                             double step_at_s, double target) {
  double peak = 0.0;
  for (const auto& rec : trace) {
    if (rec.time < step_at_s) continue;
    const double ex = target >= 0.0 ? rec.angle[joint] - target : target - rec.angle[joint];
    peak = std::max(peak, ex);
  }
  return peak;
}

// Delay from the step instant to the first crossing of 90% of the target.
// Returns the full remaining window when the response never gets there.
inline double rise90_delay(const std::vector<TraceRecord>& trace, int joint,
                           double step_at_s, double target) {
  for (const auto& rec : trace) {
    if (rec.time < step_at_s) continue;
    const double frac = target != 0.0 ? rec.angle[joint] / target : 1.0;
    if (frac >= 0.9) return rec.time - step_at_s;
  }
  return trace.empty() ? 0.0 : trace.back().time - step_at_s;
}

// Fraction of ticks with any joint pinned at a state limit.
inline double saturated_fraction(const std::vector<TraceRecord>& trace,
                                 const PlantConfig& plant) {
  if (trace.empty()) return 0.0;
  int64_t hits = 0;
  for (const auto& rec : trace) {
    bool sat = false;
    for (std::size_t j = 0; j < rec.angle.size(); ++j) {
      if (rec.angle[j] <= plant.angle_limits.lo + 1e-9 ||
          rec.angle[j] >= plant.angle_limits.hi - 1e-9 ||
          rec.velocity[j] <= plant.velocity_limits.lo + 1e-9 ||
          rec.velocity[j] >= plant.velocity_limits.hi - 1e-9) {
        sat = true;
        break;
      }
    }
    if (sat) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(trace.size());
}

// ---------------------------------------------------------------------------
// Experiments

enum class ExperimentKind {
  horizon_sweep,
  multi_step,
  sine_compare,
  delay_split,
  loss_sweep,
  mixed,
};

inline const char* experiment_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::horizon_sweep: return "horizon_sweep";
    case ExperimentKind::multi_step: return "multi_step";
    case ExperimentKind::sine_compare: return "sine_compare";
    case ExperimentKind::delay_split: return "delay_split";
    case ExperimentKind::loss_sweep: return "loss_sweep";
    case ExperimentKind::mixed: return "mixed";
  }
  return "unknown";
}

inline std::optional<ExperimentKind> experiment_kind_from(const std::string& name) {
  for (ExperimentKind k :
       {ExperimentKind::horizon_sweep, ExperimentKind::multi_step,
        ExperimentKind::sine_compare, ExperimentKind::delay_split,
        ExperimentKind::loss_sweep, ExperimentKind::mixed}) {
    if (name == experiment_name(k)) return k;
  }
  return std::nullopt;
}

struct ExperimentSpec {
  ExperimentKind kind{ExperimentKind::delay_split};
  ScenarioConfig base;
  int repetitions{3};  // seeded runs averaged where channels are random
  std::vector<int> horizons{5, 10, 15, 20, 25, 30, 35, 40, 45, 50};
  std::vector<double> step_sizes{0.5, 1.0, 1.5};
  double step_at_s{1.0};
  double rtt_s{0.3};
  int splits{6};
  std::vector<double> loss_rates{0.0, 0.05, 0.10, 0.15, 0.20};
};

inline ChannelConfig delay_channel(double delay_s) {
  ChannelConfig c;
  c.base_delay_s = delay_s;
  return c;
}

// The shared single-joint sine scenario the tracking studies run on.
inline ScenarioConfig sine_base_scenario() {
  ScenarioConfig cfg;
  cfg.duration_s = 60.0;
  cfg.joint_count = 1;
  cfg.seed = 42;
  cfg.references = {SineRef{0.5, 0.2, 0.0}};
  return cfg;
}

// Per-kind defaults; every field can still be overridden afterwards.
inline ExperimentSpec default_experiment(ExperimentKind kind) {
  ExperimentSpec spec;
  spec.kind = kind;
  switch (kind) {
    case ExperimentKind::horizon_sweep: {
      // a staircase keeps the target piecewise-constant, so the horizon is
      // the only thing the sweep varies
      spec.base.duration_s = 15.0;
      spec.base.joint_count = 6;
      spec.base.seed = 42;
      spec.base.references.assign(
          6, MultiStepRef{{{0.0, 0.5}, {5.0, 1.5}, {10.0, 3.0}}});
      spec.base.fwd = delay_channel(0.1);
      spec.base.bwd = delay_channel(0.1);
      spec.repetitions = 1;
      break;
    }
    case ExperimentKind::multi_step: {
      spec.base.duration_s = 6.0;
      spec.base.joint_count = 1;
      spec.base.seed = 42;
      spec.base.fwd = delay_channel(0.1);
      spec.base.bwd = delay_channel(0.1);
      spec.repetitions = 1;
      break;
    }
    case ExperimentKind::sine_compare: {
      spec.base = sine_base_scenario();
      spec.base.fwd = delay_channel(0.1);
      spec.base.bwd = delay_channel(0.1);
      spec.repetitions = 1;
      break;
    }
    case ExperimentKind::delay_split: {
      spec.base = sine_base_scenario();
      spec.repetitions = 1;  // deterministic delays
      break;
    }
    case ExperimentKind::loss_sweep: {
      spec.base = sine_base_scenario();
      spec.base.fwd = delay_channel(0.1);
      spec.base.bwd = delay_channel(0.1);
      spec.repetitions = 3;
      break;
    }
    case ExperimentKind::mixed: {
      spec.base = sine_base_scenario();
      spec.repetitions = 3;
      break;
    }
  }
  return spec;
}

struct PointResult {
  std::string key;  // sort key, also the first CSV column
  std::vector<std::pair<std::string, double>> values;
  bool ok{true};
  std::string error;
};

struct ExperimentResult {
  ExperimentKind kind{};
  std::vector<std::string> columns;
  std::vector<PointResult> points;
  bool partial_failure{false};
  std::string ideal_kind;
};

namespace detail {

struct SeedStats {
  double mean{0.0}, lo{0.0}, hi{0.0};
};

inline SeedStats stats_of(const std::vector<double>& v) {
  SeedStats s;
  s.lo = *std::min_element(v.begin(), v.end());
  s.hi = *std::max_element(v.begin(), v.end());
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  return s;
}

inline std::string two_digits(int v) {
  std::string s = std::to_string(v);
  return s.size() < 2 ? "0" + s : s;
}

}  // namespace detail

// Runs every grid point of the experiment; a failing point is recorded and
// the rest still run. Points come back sorted by key, so downstream CSVs
// are reproducible independent of execution order.
inline ExperimentResult run_experiment(const ExperimentSpec& spec) {
  ExperimentResult result;
  result.kind = spec.kind;
  result.ideal_kind = "delay_free_run";

  auto guarded = [&result](const std::string& key, auto&& fn) {
    PointResult pr;
    pr.key = key;
    try {
      pr.values = fn();
    } catch (const std::exception& e) {
      pr.ok = false;
      pr.error = e.what();
      result.partial_failure = true;
    }
    result.points.push_back(std::move(pr));
  };

  // mean RSS over the seeded repetitions of cfg, against one shared ideal
  auto seeded_rss = [&spec](ScenarioConfig cfg,
                            const std::vector<TraceRecord>& ideal) {
    std::vector<double> values;
    for (int r = 0; r < spec.repetitions; ++r) {
      cfg.seed = derive_seed(spec.base.seed, "rep" + std::to_string(r));
      values.push_back(rss(run_scenario(cfg).trace, ideal));
    }
    return detail::stats_of(values);
  };

  switch (spec.kind) {
    case ExperimentKind::horizon_sweep: {
      result.columns = {"horizon", "ise", "solver_iterations_per_solve"};
      for (int n : spec.horizons) {
        guarded("N=" + detail::two_digits(n), [&, n] {
          ScenarioConfig cfg = spec.base;
          cfg.mpc.horizon = n;
          const RunResult run = run_scenario(cfg);
          const double iters =
              run.solver.solves == 0
                  ? 0.0
                  : static_cast<double>(run.solver.total_iterations) /
                        static_cast<double>(run.solver.solves);
          return std::vector<std::pair<std::string, double>>{
              {"horizon", static_cast<double>(n)},
              {"ise", ise(run.trace)},
              {"solver_iterations_per_solve", iters}};
        });
      }
      break;
    }
    case ExperimentKind::multi_step: {
      result.columns = {"step_rad", "overshoot_rad", "rise90_delay_s", "ise"};
      for (double step : spec.step_sizes) {
        guarded("step=" + format_double(step), [&, step] {
          ScenarioConfig cfg = spec.base;
          cfg.references.assign(cfg.joint_count, StepRef{step, spec.step_at_s});
          const RunResult run = run_scenario(cfg);
          return std::vector<std::pair<std::string, double>>{
              {"step_rad", step},
              {"overshoot_rad", peak_overshoot(run.trace, 0, spec.step_at_s, step)},
              {"rise90_delay_s", rise90_delay(run.trace, 0, spec.step_at_s, step)},
              {"ise", ise(run.trace)}};
        });
      }
      break;
    }
    case ExperimentKind::sine_compare: {
      result.columns = {"rss_vs_ideal", "rss_vs_reference", "ise",
                        "saturated_fraction"};
      for (ControllerKind ck : {ControllerKind::mpc, ControllerKind::pid}) {
        const bool is_mpc = ck == ControllerKind::mpc;
        guarded(is_mpc ? "mpc" : "pid", [&, ck, is_mpc] {
          ScenarioConfig cfg = spec.base;
          cfg.controller = ck;
          // the PID arm is the plain networked loop the comparison is
          // against; the rollout compensation belongs to the MPC side
          cfg.forward_prediction = is_mpc;
          const RunResult run = run_scenario(cfg);
          const RunResult ideal = run_scenario(delay_free(cfg));
          PlantConfig plant = cfg.plant;
          plant.joint_count = cfg.joint_count;
          return std::vector<std::pair<std::string, double>>{
              {"rss_vs_ideal", rss(run.trace, ideal.trace)},
              {"rss_vs_reference", rss_vs_reference(run.trace)},
              {"ise", ise(run.trace)},
              {"saturated_fraction", saturated_fraction(run.trace, plant)}};
        });
      }
      break;
    }
    case ExperimentKind::delay_split: {
      result.columns = {"fwd_ms", "bwd_ms", "rss", "ise"};
      const RunResult ideal = run_scenario(delay_free(spec.base));
      for (int i = 0; i < spec.splits; ++i) {
        const double frac =
            spec.splits == 1 ? 1.0
                             : static_cast<double>(i) / (spec.splits - 1);
        const double fwd_s = spec.rtt_s * frac;
        const double bwd_s = spec.rtt_s - fwd_s;
        const int fwd_ms = static_cast<int>(std::lround(fwd_s * 1e3));
        std::string key = "fwd_ms=" + std::to_string(fwd_ms);
        if (fwd_ms < 100) key.insert(7, fwd_ms < 10 ? "00" : "0");
        guarded(key, [&] {
          ScenarioConfig cfg = spec.base;
          cfg.fwd = delay_channel(fwd_s);
          cfg.bwd = delay_channel(bwd_s);
          const RunResult run = run_scenario(cfg);
          return std::vector<std::pair<std::string, double>>{
              {"fwd_ms", static_cast<double>(fwd_ms)},
              {"bwd_ms", static_cast<double>(std::lround(bwd_s * 1e3))},
              {"rss", rss(run.trace, ideal.trace)},
              {"ise", ise(run.trace)}};
        });
      }
      break;
    }
    case ExperimentKind::loss_sweep: {
      result.columns = {"loss_pct", "rss_mean", "rss_min", "rss_max", "is_fwd"};
      const RunResult ideal = run_scenario(delay_free(spec.base));
      for (const char* dir : {"fwd", "bwd"}) {
        const bool is_fwd = std::string(dir) == "fwd";
        for (double rate : spec.loss_rates) {
          const int pct = static_cast<int>(std::lround(rate * 100));
          guarded(std::string(dir) + "_loss=" + detail::two_digits(pct), [&] {
            ScenarioConfig cfg = spec.base;
            (is_fwd ? cfg.fwd : cfg.bwd).loss_rate = rate;
            const auto stats = seeded_rss(cfg, ideal.trace);
            return std::vector<std::pair<std::string, double>>{
                {"loss_pct", static_cast<double>(pct)},
                {"rss_mean", stats.mean},
                {"rss_min", stats.lo},
                {"rss_max", stats.hi},
                {"is_fwd", is_fwd ? 1.0 : 0.0}};
          });
        }
      }
      break;
    }
    case ExperimentKind::mixed: {
      result.columns = {"rss_mean", "rss_min", "rss_max"};
      const RunResult ideal = run_scenario(delay_free(spec.base));
      const auto run_case = [&](const std::string& key, double delay_s,
                                double loss) {
        guarded(key, [&] {
          ScenarioConfig cfg = spec.base;
          cfg.fwd = delay_channel(delay_s);
          cfg.bwd = delay_channel(delay_s);
          cfg.fwd.loss_rate = loss;
          cfg.bwd.loss_rate = loss;
          const auto stats = seeded_rss(cfg, ideal.trace);
          return std::vector<std::pair<std::string, double>>{
              {"rss_mean", stats.mean},
              {"rss_min", stats.lo},
              {"rss_max", stats.hi}};
        });
      };
      run_case("0_clean", 0.0, 0.0);
      run_case("1_delay100", 0.1, 0.0);
      run_case("2_delay100_loss5", 0.1, 0.05);
      break;
    }
  }

  std::sort(result.points.begin(), result.points.end(),
            [](const PointResult& a, const PointResult& b) { return a.key < b.key; });
  return result;
}

// Paired same-seed comparison of the two controllers on one scenario.
struct ComparisonReport {
  MetricReport mpc, pid;
};

inline ComparisonReport compare_controllers(const ScenarioConfig& base) {
  ComparisonReport rep;
  for (ControllerKind ck : {ControllerKind::mpc, ControllerKind::pid}) {
    ScenarioConfig cfg = base;
    cfg.controller = ck;
    cfg.forward_prediction = ck == ControllerKind::mpc;
    const RunResult run = run_scenario(cfg);
    const RunResult ideal = run_scenario(delay_free(cfg));
    MetricReport r = metric_report(cfg, run.trace, ideal.trace, "delay_free_run");
    (ck == ControllerKind::mpc ? rep.mpc : rep.pid) = std::move(r);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Summary CSV and plot script emission

inline std::string experiment_summary_csv(const ExperimentResult& result) {
  std::ostringstream os;
  os << "point";
  for (const auto& c : result.columns) os << ',' << c;
  os << ",status\n";
  for (const auto& p : result.points) {
    os << p.key;
    if (p.ok) {
      for (const auto& c : result.columns) {
        os << ',';
        for (const auto& [name, value] : p.values) {
          if (name == c) {
            os << format_double(value);
            break;
          }
        }
      }
      os << ",ok";
    } else {
      for (std::size_t i = 0; i < result.columns.size(); ++i) os << ',';
      os << ",failed:" << p.error;
    }
    os << "\n";
  }
  return os.str();
}

// A self-contained matplotlib script next to the CSV; running it re-draws
// the experiment's figure from the summary alone.
inline std::string experiment_plot_script(ExperimentKind kind,
                                          const std::string& csv_name) {
  std::ostringstream os;
  os << "#!/usr/bin/env python3\n"
     << "import csv\n"
     << "import os\n"
     << "import matplotlib\n"
     << "matplotlib.use(\"Agg\")\n"
     << "import matplotlib.pyplot as plt\n\n"
     << "# inputs and the rendered png live next to this script, not in the cwd\n"
     << "here = os.path.dirname(os.path.abspath(__file__))\n"
     << "rows = [r for r in csv.DictReader(open(os.path.join(here, \"" << csv_name
     << "\")))\n"
     << "        if r[\"status\"] == \"ok\"]\n"
     << "fig, ax = plt.subplots(figsize=(7, 4.5))\n";
  switch (kind) {
    case ExperimentKind::horizon_sweep:
      os << "x = [float(r[\"horizon\"]) for r in rows]\n"
         << "y = [float(r[\"ise\"]) for r in rows]\n"
         << "ax.plot(x, y, \"o-\")\n"
         << "ax.set_xlabel(\"prediction horizon N\")\n"
         << "ax.set_ylabel(\"ISE\")\n"
         << "ax.set_title(\"Tracking cost over prediction horizons\")\n";
      break;
    case ExperimentKind::multi_step:
      os << "x = [float(r[\"step_rad\"]) for r in rows]\n"
         << "ax.plot(x, [float(r[\"overshoot_rad\"]) for r in rows], \"o-\", label=\"overshoot [rad]\")\n"
         << "ax.plot(x, [float(r[\"rise90_delay_s\"]) for r in rows], \"s-\", label=\"90% rise delay [s]\")\n"
         << "ax.set_xlabel(\"step size [rad]\")\n"
         << "ax.legend()\n"
         << "ax.set_title(\"Step response vs step size\")\n";
      break;
    case ExperimentKind::sine_compare:
      os << "x = [r[\"point\"] for r in rows]\n"
         << "y = [float(r[\"rss_vs_ideal\"]) for r in rows]\n"
         << "ax.bar(x, y)\n"
         << "ax.set_ylabel(\"RSS vs delay-free run\")\n"
         << "ax.set_title(\"Controller comparison on the delayed sine\")\n";
      break;
    case ExperimentKind::delay_split:
      os << "x = [float(r[\"fwd_ms\"]) for r in rows]\n"
         << "y = [float(r[\"rss\"]) for r in rows]\n"
         << "ax.plot(x, y, \"o-\")\n"
         << "ax.set_xlabel(\"forward delay [ms] (RTT fixed)\")\n"
         << "ax.set_ylabel(\"RSS\")\n"
         << "ax.set_title(\"Delay split at constant RTT\")\n";
      break;
    case ExperimentKind::loss_sweep:
      os << "for is_fwd, label in ((1.0, \"forward loss\"), (0.0, \"backward loss\")):\n"
         << "    sel = [r for r in rows if float(r[\"is_fwd\"]) == is_fwd]\n"
         << "    x = [float(r[\"loss_pct\"]) for r in sel]\n"
         << "    y = [float(r[\"rss_mean\"]) for r in sel]\n"
         << "    ax.plot(x, y, \"o-\", label=label)\n"
         << "ax.set_xlabel(\"loss rate [%]\")\n"
         << "ax.set_ylabel(\"mean RSS\")\n"
         << "ax.legend()\n"
         << "ax.set_title(\"Per-direction packet loss\")\n";
      break;
    case ExperimentKind::mixed:
      os << "x = [r[\"point\"] for r in rows]\n"
         << "y = [float(r[\"rss_mean\"]) for r in rows]\n"
         << "ax.bar(x, y)\n"
         << "ax.set_ylabel(\"mean RSS\")\n"
         << "ax.set_title(\"Clean vs delay vs delay+loss\")\n";
      break;
  }
  os << "fig.tight_layout()\n"
     << "fig.savefig(os.path.join(here, \"" << experiment_name(kind)
     << ".png\"), dpi=150)\n"
     << "print(\"wrote " << experiment_name(kind) << ".png\")\n";
  return os.str();
}

inline void write_experiment_files(const ExperimentResult& result,
                                   const std::string& out_dir) {
  const std::string stem = out_dir + "/" + experiment_name(result.kind);
  {
    std::ofstream f(stem + "_summary.csv", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + stem + "_summary.csv");
    f << experiment_summary_csv(result);
  }
  {
    std::ofstream f(stem + "_plot.py", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + stem + "_plot.py");
    f << experiment_plot_script(result.kind, experiment_name(result.kind) +
                                                 std::string("_summary.csv"));
  }
}

}  // namespace nmpc
