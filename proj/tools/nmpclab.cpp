// Command-line front end: single runs, experiment sweeps, metric recompute,
// and the UDP endpoints (controller server, plant client, impairment proxy).
// Exit codes: 0 success, 2 invalid configuration, 3 experiment finished with
// failed grid points.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "nmpc/eval.hpp"
#include "nmpc/scenario_io.hpp"
#include "nmpc/trace_io.hpp"
#include "nmpc/transport.hpp"

namespace {

std::atomic<bool> g_stop{false};

void handle_signal(int) { g_stop.store(true); }

struct ChannelFlags {
  double fwd_delay_ms{-1.0}, bwd_delay_ms{-1.0};
  double fwd_loss{-1.0}, bwd_loss{-1.0};
  double jitter_ms{-1.0};

  void add_to(CLI::App* cmd) {
    cmd->add_option("--fwd-delay-ms", fwd_delay_ms, "forward (command) delay [ms]");
    cmd->add_option("--bwd-delay-ms", bwd_delay_ms, "backward (state) delay [ms]");
    cmd->add_option("--fwd-loss", fwd_loss, "forward loss rate in [0,1]");
    cmd->add_option("--bwd-loss", bwd_loss, "backward loss rate in [0,1]");
    cmd->add_option("--jitter-ms", jitter_ms, "uniform +/- jitter on both legs [ms]");
  }

  void apply(nmpc::ScenarioConfig& cfg) const {
    if (fwd_delay_ms >= 0.0) cfg.fwd.base_delay_s = fwd_delay_ms * 1e-3;
    if (bwd_delay_ms >= 0.0) cfg.bwd.base_delay_s = bwd_delay_ms * 1e-3;
    if (fwd_loss >= 0.0) cfg.fwd.loss_rate = fwd_loss;
    if (bwd_loss >= 0.0) cfg.bwd.loss_rate = bwd_loss;
    if (jitter_ms >= 0.0) {
      cfg.fwd.jitter_s = jitter_ms * 1e-3;
      cfg.bwd.jitter_s = jitter_ms * 1e-3;
    }
  }
};

void print_metrics_line(const std::string& label, double v) {
  std::cout << label << " = " << nmpc::format_double(v) << "\n";
}

int cmd_run(const std::string& scenario_path, const std::string& trace_path,
            nmpc::ScenarioConfig cfg) {
  using namespace nmpc;
  if (!scenario_path.empty()) cfg = load_scenario_file(scenario_path, cfg);
  validate_scenario(cfg);
  const RunResult run = run_scenario(cfg);

  const bool clean = cfg.fwd.base_delay_s == 0.0 && cfg.fwd.loss_rate == 0.0 &&
                     cfg.fwd.jitter_s == 0.0 && cfg.bwd.base_delay_s == 0.0 &&
                     cfg.bwd.loss_rate == 0.0 && cfg.bwd.jitter_s == 0.0;
  double rss_ideal = 0.0;
  if (!clean) {
    const RunResult ideal = run_scenario(delay_free(cfg));
    rss_ideal = rss(run.trace, ideal.trace);
  }

  std::cout << "scenario_hash = " << scenario_hash(cfg) << "\n"
            << "ticks = " << run.trace.size() << "\n";
  print_metrics_line("ise", ise(run.trace));
  print_metrics_line("rss_vs_delay_free", rss_ideal);
  print_metrics_line("rss_vs_reference", rss_vs_reference(run.trace));
  std::cout << "fwd sent/delivered/dropped = " << run.fwd.sent << "/"
            << run.fwd.delivered << "/" << run.fwd.dropped << "\n"
            << "bwd sent/delivered/dropped = " << run.bwd.sent << "/"
            << run.bwd.delivered << "/" << run.bwd.dropped << "\n";
  if (run.solver.solves > 0) {
    std::cout << "solver iterations/solve = "
              << format_double(static_cast<double>(run.solver.total_iterations) /
                               static_cast<double>(run.solver.solves))
              << "\n";
  }
  if (!trace_path.empty()) {
    write_trace_csv_file(trace_path, run.trace, cfg.joint_count);
    std::cout << "trace written to " << trace_path << "\n";
  }
  return 0;
}

int cmd_sweep(const std::string& spec_path, const std::string& kind_name,
              const std::string& out_dir) {
  using namespace nmpc;
  ExperimentSpec spec;
  if (!spec_path.empty()) {
    spec = load_experiment_file(spec_path);
  } else {
    const auto kind = experiment_kind_from(kind_name);
    if (!kind.has_value()) {
      throw std::invalid_argument("unknown experiment kind '" + kind_name + "'");
    }
    spec = default_experiment(*kind);
  }
  std::filesystem::create_directories(out_dir);
  const ExperimentResult result = run_experiment(spec);
  write_experiment_files(result, out_dir);
  for (const auto& p : result.points) {
    std::cout << p.key << (p.ok ? "" : "  FAILED: " + p.error) << "\n";
  }
  std::cout << experiment_name(result.kind) << "_summary.csv and "
            << experiment_name(result.kind) << "_plot.py written to " << out_dir
            << "\n";
  return result.partial_failure ? 3 : 0;
}

int cmd_compare(const std::string& scenario_path) {
  using namespace nmpc;
  ScenarioConfig base = default_experiment(ExperimentKind::sine_compare).base;
  if (!scenario_path.empty()) base = load_scenario_file(scenario_path, base);
  const ComparisonReport rep = compare_controllers(base);
  std::cout << "ideal = " << rep.mpc.ideal_kind << "\n";
  print_metrics_line("mpc rss", rep.mpc.rss);
  print_metrics_line("pid rss", rep.pid.rss);
  print_metrics_line("mpc ise", rep.mpc.ise);
  print_metrics_line("pid ise", rep.pid.ise);
  std::cout << (rep.mpc.rss < rep.pid.rss ? "mpc tracks the ideal closer\n"
                                          : "pid tracks the ideal closer\n");
  return 0;
}

int cmd_metrics(const std::string& trace_path, const std::string& ideal_path) {
  using namespace nmpc;
  const TraceFile run = read_trace_csv_file(trace_path);
  print_metrics_line("ise", ise(run.trace));
  print_metrics_line("rss_vs_reference", rss_vs_reference(run.trace));
  if (!ideal_path.empty()) {
    const TraceFile ideal = read_trace_csv_file(ideal_path);
    print_metrics_line("rss_vs_ideal", rss(run.trace, ideal.trace));
  }
  std::cout << "samples = " << run.trace.size() << ", joints = " << run.joint_count
            << "\n";
  return 0;
}

int cmd_serve(const std::string& scenario_path, const std::string& bind) {
  using namespace nmpc;
  ScenarioConfig cfg = sine_base_scenario();
  if (!scenario_path.empty()) cfg = load_scenario_file(scenario_path, cfg);
  std::atomic<uint16_t> port{0};
  std::cout << "controller server on " << bind << ", ctrl-c to stop\n";
  const ServerStats stats = run_controller_server(cfg, bind, g_stop, &port);
  std::cout << "states " << stats.states_received << ", plans " << stats.plans_sent
            << ", decode errors " << stats.decode_errors << ", stale "
            << stats.stale_dropped << "\n";
  return 0;
}

int cmd_plant(const std::string& scenario_path, const nmpc::EndpointConfig& ep,
              const std::string& trace_path) {
  using namespace nmpc;
  ScenarioConfig cfg = sine_base_scenario();
  if (!scenario_path.empty()) cfg = load_scenario_file(scenario_path, cfg);
  const RunResult run = run_plant_client(cfg, ep, &g_stop);
  print_metrics_line("ise", ise(run.trace));
  std::optional<double> last_rtt;
  for (const auto& rec : run.trace) {
    if (rec.rtt_s.has_value()) last_rtt = rec.rtt_s;
  }
  if (last_rtt.has_value()) print_metrics_line("last rtt_s", *last_rtt);
  if (!trace_path.empty()) {
    write_trace_csv_file(trace_path, run.trace, cfg.joint_count);
    std::cout << "trace written to " << trace_path << "\n";
  }
  return 0;
}

int cmd_proxy(const std::string& listen, const std::string& forward_to,
              const ChannelFlags& flags, uint64_t seed) {
  using namespace nmpc;
  ChannelConfig fwd, bwd;
  if (flags.fwd_delay_ms >= 0.0) fwd.base_delay_s = flags.fwd_delay_ms * 1e-3;
  if (flags.bwd_delay_ms >= 0.0) bwd.base_delay_s = flags.bwd_delay_ms * 1e-3;
  if (flags.fwd_loss >= 0.0) fwd.loss_rate = flags.fwd_loss;
  if (flags.bwd_loss >= 0.0) bwd.loss_rate = flags.bwd_loss;
  if (flags.jitter_ms >= 0.0) {
    fwd.jitter_s = flags.jitter_ms * 1e-3;
    bwd.jitter_s = flags.jitter_ms * 1e-3;
  }
  fwd.seed = nmpc::derive_seed(seed, "fwd");
  bwd.seed = nmpc::derive_seed(seed, "bwd");
  std::cout << "relaying " << listen << " <-> " << forward_to << ", ctrl-c to stop\n";
  const ProxyCounters c = run_impairment_proxy(listen, forward_to, fwd, bwd, g_stop);
  std::cout << "relayed fwd/bwd = " << c.relayed_fwd << "/" << c.relayed_bwd
            << ", dropped fwd/bwd = " << c.dropped_fwd << "/" << c.dropped_bwd
            << ", oversized = " << c.oversized << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);

  CLI::App app{"networked MPC lab: simulation, experiments, UDP endpoints"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "run one scenario and print metrics");
  std::string run_scenario_path, run_trace_path;
  nmpc::ScenarioConfig run_cfg = nmpc::sine_base_scenario();
  ChannelFlags run_flags;
  double run_duration = -1.0;
  int64_t run_seed = -1;
  int run_horizon = -1;
  std::string run_controller;
  bool run_no_prediction = false, run_single_control = false;
  run->add_option("--scenario", run_scenario_path, "scenario JSON file");
  run->add_option("--trace", run_trace_path, "write the tick trace CSV here");
  run->add_option("--duration", run_duration, "override duration [s]");
  run->add_option("--seed", run_seed, "override RNG seed");
  run->add_option("--horizon", run_horizon, "override MPC horizon");
  run->add_option("--controller", run_controller, "mpc or pid");
  run->add_flag("--no-prediction", run_no_prediction, "disable forward prediction");
  run->add_flag("--single-control", run_single_control,
                "send only the first planned input");
  run_flags.add_to(run);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "run an experiment grid");
  std::string sweep_spec, sweep_kind, sweep_out{"."};
  sweep->add_option("--spec", sweep_spec, "experiment JSON file");
  sweep->add_option("--kind", sweep_kind,
                    "built-in experiment: horizon_sweep multi_step sine_compare "
                    "delay_split loss_sweep mixed");
  sweep->add_option("--out", sweep_out, "output directory");

  // compare
  auto* compare = app.add_subcommand("compare", "MPC vs PID on one scenario");
  std::string compare_scenario;
  compare->add_option("--scenario", compare_scenario, "scenario JSON file");

  // metrics
  auto* metrics = app.add_subcommand("metrics", "recompute metrics from a trace CSV");
  std::string metrics_trace, metrics_ideal;
  metrics->add_option("--trace", metrics_trace, "trace CSV")->required();
  metrics->add_option("--ideal", metrics_ideal, "ideal trace CSV for RSS");

  // serve / plant / proxy
  auto* serve = app.add_subcommand("serve", "UDP controller server");
  std::string serve_scenario, serve_bind{"127.0.0.1:9000"}, serve_role;
  serve->add_option("--scenario", serve_scenario, "scenario JSON file");
  serve->add_option("--bind", serve_bind, "listen address host:port");
  serve->add_option("--role", serve_role, "must be controller-server");

  auto* plant = app.add_subcommand("plant", "UDP plant client");
  std::string plant_scenario, plant_trace, plant_role;
  nmpc::EndpointConfig plant_ep;
  plant->add_option("--scenario", plant_scenario, "scenario JSON file");
  plant->add_option("--bind", plant_ep.bind, "local address host:port");
  plant->add_option("--peer", plant_ep.peer, "server address host:port");
  plant->add_option("--rate-hz", plant_ep.rate_hz, "state send rate; 0 = every tick");
  plant->add_option("--rtf", plant_ep.real_time_factor,
                    "real-time factor; 1 = wall-clock ts");
  plant->add_option("--trace", plant_trace, "write the tick trace CSV here");
  plant->add_option("--role", plant_role, "must be plant-client");

  auto* proxy = app.add_subcommand("proxy", "UDP impairment relay");
  std::string proxy_listen, proxy_forward;
  ChannelFlags proxy_flags;
  uint64_t proxy_seed = 1;
  proxy->add_option("--listen", proxy_listen, "client-facing address")->required();
  proxy->add_option("--forward-to", proxy_forward, "server address")->required();
  proxy->add_option("--seed", proxy_seed, "impairment RNG seed");
  proxy_flags.add_to(proxy);

  try {
    app.parse(argc, argv);

    if (run->parsed()) {
      if (run_duration > 0.0) run_cfg.duration_s = run_duration;
      if (run_seed >= 0) run_cfg.seed = static_cast<uint64_t>(run_seed);
      if (run_horizon > 0) run_cfg.mpc.horizon = run_horizon;
      if (!run_controller.empty()) {
        if (run_controller == "mpc") {
          run_cfg.controller = nmpc::ControllerKind::mpc;
        } else if (run_controller == "pid") {
          run_cfg.controller = nmpc::ControllerKind::pid;
        } else {
          throw std::invalid_argument("--controller must be mpc or pid");
        }
      }
      if (run_no_prediction) run_cfg.forward_prediction = false;
      if (run_single_control) run_cfg.single_control_mode = true;
      run_flags.apply(run_cfg);
      return cmd_run(run_scenario_path, run_trace_path, run_cfg);
    }
    if (sweep->parsed()) {
      if (sweep_spec.empty() == sweep_kind.empty()) {
        throw std::invalid_argument("sweep needs exactly one of --spec or --kind");
      }
      return cmd_sweep(sweep_spec, sweep_kind, sweep_out);
    }
    if (compare->parsed()) return cmd_compare(compare_scenario);
    if (metrics->parsed()) return cmd_metrics(metrics_trace, metrics_ideal);
    if (serve->parsed()) {
      if (!serve_role.empty() && serve_role != "controller-server") {
        throw std::invalid_argument("serve runs the controller-server role");
      }
      return cmd_serve(serve_scenario, serve_bind);
    }
    if (plant->parsed()) {
      if (!plant_role.empty() && plant_role != "plant-client") {
        throw std::invalid_argument("plant runs the plant-client role");
      }
      return cmd_plant(plant_scenario, plant_ep, plant_trace);
    }
    if (proxy->parsed()) {
      return cmd_proxy(proxy_listen, proxy_forward, proxy_flags, proxy_seed);
    }
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
