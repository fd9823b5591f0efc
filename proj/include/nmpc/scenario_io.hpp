#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmpc/eval.hpp"
#include "nmpc/simloop.hpp"

namespace nmpc {

// JSON in, config structs out. Every key is optional and falls back to the
// default of whatever config the parse started from; unknown keys are
// errors, so a typo cannot silently run the default it meant to override.

namespace detail {

using nlohmann::json;

inline void check_keys(const json& obj, const std::vector<std::string>& allowed,
                       const std::string& where) {
  if (!obj.is_object()) {
    throw std::invalid_argument(where + ": expected an object");
  }
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (const auto& a : allowed) {
      if (key == a) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw std::invalid_argument(where + ": unknown key '" + key + "'");
    }
  }
}

inline ChannelConfig parse_channel(const json& obj, ChannelConfig base,
                                   const std::string& where) {
  check_keys(obj, {"base_delay_s", "jitter_s", "loss_rate"}, where);
  base.base_delay_s = obj.value("base_delay_s", base.base_delay_s);
  base.jitter_s = obj.value("jitter_s", base.jitter_s);
  base.loss_rate = obj.value("loss_rate", base.loss_rate);
  return base;
}

inline JointReferenceSpec parse_reference(const json& obj, const std::string& where) {
  if (!obj.is_object() || !obj.contains("type")) {
    throw std::invalid_argument(where + ": reference needs a type");
  }
  const std::string type = obj.at("type");
  if (type == "step") {
    check_keys(obj, {"type", "target", "at"}, where);
    StepRef r;
    r.target = obj.value("target", 0.0);
    r.at = obj.value("at", 0.0);
    return r;
  }
  if (type == "multistep") {
    check_keys(obj, {"type", "schedule"}, where);
    MultiStepRef r;
    for (const auto& entry : obj.value("schedule", json::array())) {
      if (!entry.is_array() || entry.size() != 2) {
        throw std::invalid_argument(where + ": schedule entries are [time, target]");
      }
      r.schedule.emplace_back(entry[0].get<double>(), entry[1].get<double>());
    }
    return r;
  }
  if (type == "sine") {
    check_keys(obj, {"type", "amplitude", "frequency_hz", "offset"}, where);
    SineRef r;
    r.amplitude = obj.value("amplitude", 0.0);
    r.frequency_hz = obj.value("frequency_hz", 0.0);
    r.offset = obj.value("offset", 0.0);
    return r;
  }
  throw std::invalid_argument(where + ": unknown reference type '" + type + "'");
}

}  // namespace detail

inline ScenarioConfig parse_scenario(const nlohmann::json& obj,
                                     ScenarioConfig cfg = {}) {
  using detail::check_keys;
  check_keys(obj,
             {"duration_s", "ts", "seed", "joint_count", "controller", "mpc",
              "pid", "fwd", "bwd", "references", "forward_prediction",
              "single_control_mode", "controller_period_ticks"},
             "scenario");
  cfg.duration_s = obj.value("duration_s", cfg.duration_s);
  cfg.ts = obj.value("ts", cfg.ts);
  cfg.seed = obj.value("seed", cfg.seed);
  cfg.joint_count = obj.value("joint_count", cfg.joint_count);
  if (obj.contains("controller")) {
    const std::string c = obj.at("controller");
    if (c == "mpc") {
      cfg.controller = ControllerKind::mpc;
    } else if (c == "pid") {
      cfg.controller = ControllerKind::pid;
    } else {
      throw std::invalid_argument("scenario: controller must be mpc or pid");
    }
  }
  if (obj.contains("mpc")) {
    const auto& m = obj.at("mpc");
    check_keys(m,
               {"horizon", "qx_angle", "qx_velocity", "qu",
                "state_penalty_weight", "solver_tolerance", "max_iterations"},
               "scenario.mpc");
    cfg.mpc.horizon = m.value("horizon", cfg.mpc.horizon);
    cfg.mpc.qx_angle = m.value("qx_angle", cfg.mpc.qx_angle);
    cfg.mpc.qx_velocity = m.value("qx_velocity", cfg.mpc.qx_velocity);
    cfg.mpc.qu = m.value("qu", cfg.mpc.qu);
    cfg.mpc.state_penalty_weight =
        m.value("state_penalty_weight", cfg.mpc.state_penalty_weight);
    cfg.mpc.solver_tolerance = m.value("solver_tolerance", cfg.mpc.solver_tolerance);
    cfg.mpc.max_iterations = m.value("max_iterations", cfg.mpc.max_iterations);
  }
  if (obj.contains("pid")) {
    const auto& p = obj.at("pid");
    check_keys(p, {"kp", "ki", "kd"}, "scenario.pid");
    cfg.pid.kp = p.value("kp", cfg.pid.kp);
    cfg.pid.ki = p.value("ki", cfg.pid.ki);
    cfg.pid.kd = p.value("kd", cfg.pid.kd);
  }
  if (obj.contains("fwd")) {
    cfg.fwd = detail::parse_channel(obj.at("fwd"), cfg.fwd, "scenario.fwd");
  }
  if (obj.contains("bwd")) {
    cfg.bwd = detail::parse_channel(obj.at("bwd"), cfg.bwd, "scenario.bwd");
  }
  if (obj.contains("references")) {
    cfg.references.clear();
    int idx = 0;
    for (const auto& r : obj.at("references")) {
      cfg.references.push_back(detail::parse_reference(
          r, "scenario.references[" + std::to_string(idx++) + "]"));
    }
  }
  cfg.forward_prediction = obj.value("forward_prediction", cfg.forward_prediction);
  cfg.single_control_mode = obj.value("single_control_mode", cfg.single_control_mode);
  cfg.controller_period_ticks =
      obj.value("controller_period_ticks", cfg.controller_period_ticks);
  validate_scenario(cfg);
  return cfg;
}

// Experiment files name a kind and override its defaults; "base" merges
// onto the kind's default scenario, so a file only states what differs.
inline ExperimentSpec parse_experiment(const nlohmann::json& obj) {
  detail::check_keys(obj,
                     {"kind", "base", "repetitions", "horizons", "step_sizes",
                      "step_at_s", "rtt_s", "splits", "loss_rates"},
                     "experiment");
  if (!obj.contains("kind")) {
    throw std::invalid_argument("experiment: missing kind");
  }
  const auto kind = experiment_kind_from(obj.at("kind"));
  if (!kind.has_value()) {
    throw std::invalid_argument("experiment: unknown kind '" +
                                obj.at("kind").get<std::string>() + "'");
  }
  ExperimentSpec spec = default_experiment(*kind);
  if (obj.contains("base")) {
    spec.base = parse_scenario(obj.at("base"), spec.base);
  }
  spec.repetitions = obj.value("repetitions", spec.repetitions);
  if (spec.repetitions < 1) {
    throw std::invalid_argument("experiment: repetitions must be at least 1");
  }
  if (obj.contains("horizons")) {
    spec.horizons = obj.at("horizons").get<std::vector<int>>();
  }
  if (obj.contains("step_sizes")) {
    spec.step_sizes = obj.at("step_sizes").get<std::vector<double>>();
  }
  spec.step_at_s = obj.value("step_at_s", spec.step_at_s);
  spec.rtt_s = obj.value("rtt_s", spec.rtt_s);
  spec.splits = obj.value("splits", spec.splits);
  if (obj.contains("loss_rates")) {
    spec.loss_rates = obj.at("loss_rates").get<std::vector<double>>();
  }
  if (spec.horizons.empty() || spec.step_sizes.empty() || spec.loss_rates.empty() ||
      spec.splits < 1) {
    throw std::invalid_argument("experiment: grids must be non-empty");
  }
  return spec;
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open " + path);
  nlohmann::json obj;
  try {
    f >> obj;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  return obj;
}

inline ScenarioConfig load_scenario_file(const std::string& path,
                                         ScenarioConfig base = {}) {
  return parse_scenario(load_json_file(path), std::move(base));
}

inline ExperimentSpec load_experiment_file(const std::string& path) {
  return parse_experiment(load_json_file(path));
}

}  // namespace nmpc
