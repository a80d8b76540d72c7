#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "impdiff/core.hpp"
#include "impdiff/estimators.hpp"
#include "impdiff/optimizers.hpp"
#include "impdiff/oracles.hpp"
#include "impdiff/potentials.hpp"
#include "impdiff/samplers.hpp"

namespace impdiff {

inline constexpr const char* kCodeVersion = "0.1.0";

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

// Stream id so runs of different experiments never share RNG keys.
inline std::uint64_t experiment_stream_id(const std::string& name) {
  return detail::fnv1a64(name);
}

/* Flat `key = value` lines; '#' starts a comment, blank lines are skipped.
   Values keep inner whitespace (vectors are comma-separated). */
inline ConfigMap parse_config_file(const std::string& path) {
  std::ifstream f(path);
  detail::require(bool(f), "cannot open config file: " + path);
  ConfigMap kv;
  std::string line;
  long lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string t = detail::trim(line);
    if (t.empty()) continue;
    size_t eq = t.find('=');
    detail::require(eq != std::string::npos,
                    path + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(t.substr(0, eq));
    std::string val = detail::trim(t.substr(eq + 1));
    detail::require(!key.empty(), path + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = val;
  }
  return kv;
}

inline void apply_override(ConfigMap& kv, const std::string& spec) {
  size_t eq = spec.find('=');
  detail::require(eq != std::string::npos && eq > 0, "override must look like key=value: " + spec);
  kv[detail::trim(spec.substr(0, eq))] = detail::trim(spec.substr(eq + 1));
}

struct ExperimentConfig {
  std::string experiment;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  ConfigMap kv;

  bool has(const std::string& k) const { return kv.count(k) != 0; }

  std::string str(const std::string& k, const std::string& def) const {
    auto it = kv.find(k);
    return it == kv.end() ? def : it->second;
  }

  long integer(const std::string& k, long def) const {
    auto it = kv.find(k);
    if (it == kv.end()) return def;
    size_t pos = 0;
    long v = 0;
    try {
      v = std::stol(it->second, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    detail::require(pos == it->second.size() && pos != std::string::npos,
                    "config key '" + k + "': not an integer: " + it->second);
    return v;
  }

  double real(const std::string& k, double def) const {
    auto it = kv.find(k);
    if (it == kv.end()) return def;
    size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(it->second, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    detail::require(pos == it->second.size() && pos != std::string::npos,
                    "config key '" + k + "': not a number: " + it->second);
    return v;
  }

  bool flag(const std::string& k, bool def) const {
    auto it = kv.find(k);
    if (it == kv.end()) return def;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("config key '" + k + "': not a boolean: " + v);
  }

  std::vector<double> vec(const std::string& k, std::vector<double> def) const {
    auto it = kv.find(k);
    if (it == kv.end()) return def;
    std::vector<double> out;
    std::stringstream ss(it->second);
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = detail::trim(part);
      detail::require(!part.empty(), "config key '" + k + "': empty vector entry");
      size_t pos = 0;
      double v = 0;
      try {
        v = std::stod(part, &pos);
      } catch (const std::exception&) {
        pos = std::string::npos;
      }
      detail::require(pos == part.size() && pos != std::string::npos,
                      "config key '" + k + "': not a number: " + part);
      out.push_back(v);
    }
    detail::require(!out.empty(), "config key '" + k + "': empty vector");
    return out;
  }
};

inline const std::set<std::string>& allowed_config_keys(const std::string& experiment) {
  static const std::map<std::string, std::set<std::string>> all = {
      {"langevin-reward",
       {"n", "K", "cadence", "dump_ensemble", "algorithm", "T", "lambda", "beta", "gamma_x",
        "gamma_theta", "reward", "tau", "guidance_lambda", "weight_map", "radius",
        "logistic_floor", "theta0", "theta_opt_file", "compute_loglik", "compute_kl",
        "stop_at_loglik", "write_theta_opt"}},
      {"langevin-scratch",
       {"n", "K", "cadence", "dump_ensemble", "gamma_x", "gamma_theta", "beta", "weight_map",
        "radius", "logistic_floor", "theta0", "theta_star"}},
      {"gauss1d",
       {"n", "K", "cadence", "dump_ensemble", "algorithm", "theta_target", "horizon", "M",
        "steps", "eta", "warm_start", "theta0"}},
      {"rates",
       {"n", "K", "cadence", "dump_ensemble", "schedule", "gamma_base", "eps_base", "offset",
        "lambda", "reward", "tau", "weight_map", "radius", "logistic_floor", "theta0", "fd_h"}},
      {"finite-state",
       {"n", "K", "cadence", "dump_ensemble", "m", "p", "problem_seed", "eta", "theta0"}},
  };
  auto it = all.find(experiment);
  detail::require(it != all.end(),
                  "unknown experiment '" + experiment +
                      "' (expected langevin-reward, langevin-scratch, gauss1d, rates, "
                      "finite-state)");
  return it->second;
}

inline void validate_config(const ExperimentConfig& cfg) {
  const auto& allowed = allowed_config_keys(cfg.experiment);
  for (const auto& [k, v] : cfg.kv)
    detail::require(allowed.count(k) != 0,
                    "config key '" + k + "' is not valid for experiment " + cfg.experiment);
}

/* One metrics record per cadence tick. Unused metrics stay NaN and are
   serialized as "nan"; which columns appear in the CSV is fixed per
   experiment. */
struct MetricsRow {
  long k = 0;
  long gradient_evaluations = 0;
  double mean_reward = std::numeric_limits<double>::quiet_NaN();
  double loglik_under_theta_opt = std::numeric_limits<double>::quiet_NaN();
  double kl_to_pretrained = std::numeric_limits<double>::quiet_NaN();
  double theta_error = std::numeric_limits<double>::quiet_NaN();
  double grad_norm_sq_running_avg = std::numeric_limits<double>::quiet_NaN();
  double fd_rel_err = std::numeric_limits<double>::quiet_NaN();
};

inline const std::vector<std::string>& experiment_columns(const std::string& experiment) {
  static const std::map<std::string, std::vector<std::string>> cols = {
      {"langevin-reward",
       {"k", "gradient_evaluations", "mean_reward", "loglik_under_theta_opt",
        "kl_to_pretrained"}},
      {"langevin-scratch", {"k", "gradient_evaluations", "kl_to_pretrained"}},
      {"gauss1d", {"k", "gradient_evaluations", "mean_reward", "theta_error"}},
      {"rates", {"k", "gradient_evaluations", "mean_reward", "grad_norm_sq_running_avg"}},
      {"finite-state", {"k", "gradient_evaluations", "mean_reward", "fd_rel_err"}},
  };
  auto it = cols.find(experiment);
  detail::require(it != cols.end(), "unknown experiment: " + experiment);
  return it->second;
}

inline double metrics_field(const MetricsRow& r, const std::string& name) {
  if (name == "mean_reward") return r.mean_reward;
  if (name == "loglik_under_theta_opt") return r.loglik_under_theta_opt;
  if (name == "kl_to_pretrained") return r.kl_to_pretrained;
  if (name == "theta_error") return r.theta_error;
  if (name == "grad_norm_sq_running_avg") return r.grad_norm_sq_running_avg;
  if (name == "fd_rel_err") return r.fd_rel_err;
  throw std::invalid_argument("unknown metrics column: " + name);
}

// Shortest decimal that round-trips; NaN spelled "nan".
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct RunResult {
  std::vector<std::string> columns;
  std::vector<MetricsRow> rows;
  nlohmann::ordered_json manifest;
  ParamVector final_theta;
  ParticleEnsemble final_ensemble;
  long gradient_evaluations = 0;
};

inline void write_theta_file(const std::string& path, const ParamVector& theta) {
  nlohmann::ordered_json j;
  j["theta"] = theta;
  std::ofstream f(path, std::ios::binary);
  detail::require(bool(f), "cannot write " + path);
  f << j.dump(2) << "\n";
}

inline ParamVector read_theta_file(const std::string& path) {
  std::ifstream f(path);
  detail::require(bool(f), "cannot open theta file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("bad theta file " + path + ": " + e.what());
  }
  detail::require(j.contains("theta") && j["theta"].is_array(),
                  "theta file " + path + " must contain an array field 'theta'");
  return j["theta"].get<ParamVector>();
}

namespace detail {

inline WeightMap parse_weight_map(const std::string& s) {
  if (s == "softmax") return WeightMap::kSoftmax;
  if (s == "shifted-logistic") return WeightMap::kShiftedLogistic;
  throw std::invalid_argument("weight_map must be softmax or shifted-logistic, got: " + s);
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  return schedule_kind_from_string(s);
}

inline double batch_mean_reward(const RewardSpec& reward, const ParticleEnsemble& ens) {
  double s = 0.0;
  for (int i = 0; i < ens.size(); ++i) s += reward.eval(ens.row(i), ens.dim());
  return s / ens.size();
}

// Mean log-density -V(x, theta) - log_z; pass a quadrature log_z for the
// normalized law.
inline double batch_loglik(const Potential& pot, const ParamVector& theta,
                           const ParticleEnsemble& ens, double log_z) {
  std::vector<double> x(std::size_t(ens.dim()));
  double s = 0.0;
  for (int i = 0; i < ens.size(); ++i) {
    const double* r = ens.row(i);
    x.assign(r, r + ens.dim());
    s += -pot.value(x.data(), theta) - log_z;
  }
  return s / ens.size();
}

inline nlohmann::ordered_json config_echo(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["experiment"] = cfg.experiment;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  nlohmann::ordered_json keys;
  for (const auto& [k, v] : cfg.kv) keys[k] = v;
  j["keys"] = std::move(keys);
  return j;
}

inline std::string golden_file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return "absent";
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();
  char buf[32];
  std::snprintf(buf, sizeof(buf), "fnv1a64:%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

inline constexpr std::uint64_t kRefBatchSlot = 1000000;  // clear of driver slot keys

}  // namespace detail

// ---------------------------------------------------------------------------
// langevin-reward: hexagon target, six algorithm choices, reward/loglik traces.
// ---------------------------------------------------------------------------

inline RunResult run_langevin_reward(const ExperimentConfig& cfg) {
  const int n = int(cfg.integer("n", 1000));
  const long K = cfg.integer("K", 5000);
  const long cadence = std::max(1l, cfg.integer("cadence", 10));
  const std::string algo = cfg.str("algorithm", "implicit");
  static const std::set<std::string> kAlgos = {"langevin-theta0", "langevin-theta-opt",
                                               "implicit",        "nested",
                                               "guided",          "unroll"};
  detail::require(kAlgos.count(algo) != 0, "langevin-reward: unknown algorithm " + algo);
  const double gamma_x = cfg.real("gamma_x", 0.05);
  const double gamma_theta = cfg.real("gamma_theta", 0.5);
  const double lambda = cfg.real("lambda", 1.0);
  const double beta = cfg.real("beta", 0.0);
  const double tau = cfg.real("tau", 0.1);
  const double guidance_lambda = cfg.real("guidance_lambda", 1.0);
  const double radius = cfg.real("radius", 2.0);
  const double lfloor = cfg.real("logistic_floor", 0.2);
  const bool needs_grad = algo == "guided" || algo == "unroll";
  const std::string rkind = cfg.str("reward", needs_grad ? "smoothed" : "indicator");
  detail::require(rkind == "indicator" || rkind == "smoothed",
                  "langevin-reward: reward must be indicator or smoothed, got " + rkind);
  const int T = int(cfg.integer("T", algo == "nested" ? 10 : 1));
  ParamVector theta0 = cfg.vec("theta0", {1, 0, 1, 0, 1, 0});
  detail::require(theta0.size() == 6, "langevin-reward: theta0 must have 6 entries");

  MixturePotential pot = hexagon_mixture(
      radius, detail::parse_weight_map(cfg.str("weight_map", "softmax")), lfloor);
  RewardSpec reward =
      rkind == "smoothed" ? smoothed_gaussian_reward({1.0, 0.95}, tau) : indicator_gaussian_reward();

  const std::string theta_opt_file = cfg.str("theta_opt_file", "");
  const bool want_loglik =
      cfg.flag("compute_loglik", !theta_opt_file.empty() || algo == "langevin-theta-opt");
  std::optional<ParamVector> theta_opt;
  double opt_log_z = 0.0;
  if (want_loglik || algo == "langevin-theta-opt") {
    detail::require(!theta_opt_file.empty(),
                    "langevin-reward: a theta_opt-dependent metric or algorithm was requested "
                    "but theta_opt_file is not set");
    theta_opt = read_theta_file(theta_opt_file);
    detail::require(theta_opt->size() == 6, "theta_opt must have 6 entries");
    opt_log_z = stationary_quadrature(pot, *theta_opt).log_z;
  }
  const bool want_kl = cfg.flag("compute_kl", false);
  std::optional<double> stop;
  if (cfg.has("stop_at_loglik")) {
    detail::require(bool(theta_opt), "stop_at_loglik needs theta_opt_file");
    stop = cfg.real("stop_at_loglik", 0.0);
  }

  std::optional<StationaryGrid> pretrained;
  if (want_kl) pretrained = stationary_quadrature(pot, theta0);

  RngStream rng(cfg.seed, experiment_stream_id("langevin-reward"));
  EnsembleInit init = [n](const RngStream& r) { return gaussian_ensemble(n, 2, 0.0, 1.0, r); };
  ObjectiveSpec obj;
  obj.lambda = lambda;
  obj.beta = beta;
  obj.reward = reward;
  GradientEstimator gfn = [&pot, &obj](const ParticleEnsemble& e, const ParamVector& th) {
    return gamma_combined(e, nullptr, th, pot, obj);
  };

  RunResult res;
  res.columns = experiment_columns("langevin-reward");
  std::map<std::string, std::optional<long>> crossings;
  const double kThresholds[2] = {-5.8, -2.0};
  for (double t : kThresholds) crossings[format_double(t)] = std::nullopt;

  StepCallback cb = [&](long k, const ParticleEnsemble& ens, const ParamVector&, long evals) {
    if (k % cadence != 0 && k != K - 1) return true;
    MetricsRow row;
    row.k = k;
    row.gradient_evaluations = evals;
    row.mean_reward = detail::batch_mean_reward(reward, ens);
    if (theta_opt)
      row.loglik_under_theta_opt = detail::batch_loglik(pot, *theta_opt, ens, opt_log_z);
    if (pretrained) {
      GridDistribution sm = smooth_ensemble_to_grid(ens, pretrained->grid);
      row.kl_to_pretrained = grid_kl(pretrained->grid, sm);
    }
    res.rows.push_back(row);
    if (theta_opt)
      for (double t : kThresholds) {
        auto& slot = crossings[format_double(t)];
        if (!slot && row.loglik_under_theta_opt >= t) slot = evals;
      }
    if (stop && row.loglik_under_theta_opt >= *stop) return false;
    return true;
  };

  const auto t_start = std::chrono::steady_clock::now();
  RunTrace trace;
  const int te = int(cadence);
  if (algo == "langevin-theta0") {
    trace = run_guided_langevin(theta0, init, K, pot, reward, 0.0, gamma_x, rng, te, cb);
  } else if (algo == "langevin-theta-opt") {
    trace = run_guided_langevin(*theta_opt, init, K, pot, reward, 0.0, gamma_x, rng, te, cb);
  } else if (algo == "guided") {
    trace = run_guided_langevin(theta0, init, K, pot, reward, guidance_lambda, gamma_x, rng, te,
                                cb);
  } else if (algo == "implicit") {
    StepSchedule sched;
    sched.gamma_base = gamma_x;
    StepSampler samp = [&pot](ParticleEnsemble& e, const ParamVector& th, double g,
                              const RngStream& r) { langevin_step(e, pot, th, g, r); };
    trace = run_implicit_infinite(theta0, init, K, samp, gfn, sched, rng,
                                  gamma_theta / gamma_x, te, cb);
  } else if (algo == "nested") {
    SlotSampler samp = [&pot, gamma_x](ParticleEnsemble& e, const ParamVector& th, int,
                                       const RngStream& r) {
      langevin_step(e, pot, th, gamma_x, r);
    };
    trace = run_nested_loop(theta0, init, T, K, samp, gfn, gamma_theta, rng, te, cb);
  } else {  // unroll
    trace = run_unroll_last_step(theta0, init, T, K, pot, reward, gamma_x,
                                 2.0 * gamma_theta / gamma_x, rng, te, cb);
  }
  const double wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
          .count();

  if (algo == "implicit" && cfg.flag("write_theta_opt", true)) {
    std::filesystem::create_directories(cfg.out_dir);
    write_theta_file(cfg.out_dir + "/theta_opt.json", trace.final_theta);
  }

  res.final_theta = trace.final_theta;
  res.final_ensemble = std::move(trace.final_ensemble);
  res.gradient_evaluations = trace.gradient_evaluations;
  res.manifest = detail::config_echo(cfg);
  res.manifest["algorithm"] = algo;
  res.manifest["code_version"] = kCodeVersion;
  res.manifest["golden_hash"] = detail::golden_file_hash("goldens/oracle_reference.json");
  res.manifest["gradient_evaluations"] = res.gradient_evaluations;
  res.manifest["parallel_depth"] = trace.parallel_depth;
  res.manifest["final_theta"] = res.final_theta;
  if (!res.rows.empty()) res.manifest["final_mean_reward"] = res.rows.back().mean_reward;
  if (theta_opt) {
    nlohmann::ordered_json cj;
    for (double t : kThresholds) {
      const auto& slot = crossings[format_double(t)];
      cj[format_double(t)] = slot ? nlohmann::ordered_json(*slot) : nlohmann::ordered_json();
    }
    res.manifest["loglik_crossings"] = std::move(cj);
  }
  res.manifest["total_wall_ms"] = wall_ms;
  return res;
}

// ---------------------------------------------------------------------------
// langevin-scratch: 7-well target learned from reference samples only.
// ---------------------------------------------------------------------------

inline RunResult run_langevin_scratch(const ExperimentConfig& cfg) {
  const int n = int(cfg.integer("n", 1000));
  const long K = cfg.integer("K", 40000);
  const long cadence = std::max(1l, cfg.integer("cadence", 2000));
  const double gamma_x = cfg.real("gamma_x", 0.05);
  const double gamma_theta = cfg.real("gamma_theta", 0.5);
  const double beta = cfg.real("beta", 1.0);
  const double radius = cfg.real("radius", 2.0);
  const double lfloor = cfg.real("logistic_floor", 0.2);
  ParamVector theta0 = cfg.vec("theta0", {-7, -7, -7, -7, -7, -7, 11});
  ParamVector theta_star = cfg.vec("theta_star", {1.5, 0, 1.5, 0, 1.5, 0, 0});
  detail::require(theta0.size() == 7 && theta_star.size() == 7,
                  "langevin-scratch: theta0/theta_star must have 7 entries");

  MixturePotential pot = hexagon_with_center_mixture(
      radius, detail::parse_weight_map(cfg.str("weight_map", "softmax")), lfloor);
  StationaryGrid target = stationary_quadrature(pot, theta_star);

  RngStream rng(cfg.seed, experiment_stream_id("langevin-scratch"));
  ParticleEnsemble ref = sample_from_grid(target.grid, n, rng.at(detail::kRefBatchSlot, 0));

  ObjectiveSpec obj;
  obj.lambda = 0.0;
  obj.beta = beta;
  obj.ref_ensemble = &ref;
  GradientEstimator gfn = [&pot, &obj](const ParticleEnsemble& e, const ParamVector& th) {
    return gamma_combined(e, nullptr, th, pot, obj);
  };
  EnsembleInit init = [n](const RngStream& r) { return gaussian_ensemble(n, 2, 0.0, 1.0, r); };
  StepSampler samp = [&pot](ParticleEnsemble& e, const ParamVector& th, double g,
                            const RngStream& r) { langevin_step(e, pot, th, g, r); };

  RunResult res;
  res.columns = experiment_columns("langevin-scratch");
  StepCallback cb = [&](long k, const ParticleEnsemble& ens, const ParamVector&, long evals) {
    if (k % cadence != 0 && k != K - 1) return true;
    MetricsRow row;
    row.k = k;
    row.gradient_evaluations = evals;
    GridDistribution sm = smooth_ensemble_to_grid(ens, target.grid);
    row.kl_to_pretrained = grid_kl(target.grid, sm);
    res.rows.push_back(row);
    return true;
  };

  StepSchedule sched;
  sched.gamma_base = gamma_x;
  const auto t_start = std::chrono::steady_clock::now();
  RunTrace trace = run_implicit_infinite(theta0, init, K, samp, gfn, sched, rng,
                                         gamma_theta / gamma_x, int(cadence), cb);
  const double wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
          .count();

  res.final_theta = trace.final_theta;
  res.final_ensemble = std::move(trace.final_ensemble);
  res.gradient_evaluations = trace.gradient_evaluations;
  res.manifest = detail::config_echo(cfg);
  res.manifest["code_version"] = kCodeVersion;
  res.manifest["golden_hash"] = detail::golden_file_hash("goldens/oracle_reference.json");
  res.manifest["gradient_evaluations"] = res.gradient_evaluations;
  res.manifest["theta_star"] = theta_star;
  res.manifest["final_theta"] = res.final_theta;
  if (!res.rows.empty()) {
    res.manifest["initial_kl"] = res.rows.front().kl_to_pretrained;
    res.manifest["terminal_kl"] = res.rows.back().kl_to_pretrained;
  }
  res.manifest["total_wall_ms"] = wall_ms;
  return res;
}

// ---------------------------------------------------------------------------
// gauss1d: queue drivers on the 1-d diffusion sampler, tracked against the
// closed-form parameter path.
// ---------------------------------------------------------------------------

inline RunResult run_gauss1d(const ExperimentConfig& cfg) {
  const int n = int(cfg.integer("n", 20000));
  const std::string algo = cfg.str("algorithm", "queue");
  detail::require(algo == "queue" || algo == "double-queue",
                  "gauss1d: algorithm must be queue or double-queue, got " + algo);
  const double theta_target = cfg.real("theta_target", 1.0);
  const double horizon = cfg.real("horizon", 3.0);
  const int M = int(cfg.integer("M", 96));
  const int steps = int(cfg.integer("steps", M));
  const double eta = cfg.real("eta", 1.0);
  const bool warm_start = cfg.flag("warm_start", false);
  const long K = cfg.integer("K", algo == "double-queue" ? 3l * M : 2l * M);
  const long cadence = std::max(1l, cfg.integer("cadence", 1));
  const double theta_start = cfg.real("theta0", 0.0);
  detail::require(M >= 1 && steps >= M && steps % M == 0,
                  "gauss1d: M must divide steps and both must be >= 1");
  const double h = horizon / steps;
  const double eta_disc = eta * horizon / M;  // one queue step advances time T/M

  Diffusion1dDrift drift(horizon);
  RngStream rng(cfg.seed, experiment_stream_id("gauss1d"));
  EnsembleInit init = [n](const RngStream& r) { return gaussian_ensemble(n, 1, 0.0, 1.0, r); };
  SlotSampler samp = [horizon, h](ParticleEnsemble& e, const ParamVector& th, int slot,
                                  const RngStream& r) {
    const double tau = slot * h, sd = std::sqrt(2.0 * h);
    const double pull = 2.0 * th[0] * std::exp(-(horizon - tau));  // state-free drift part
    for (int i = 0; i < e.size(); ++i) {
      double& y = e.at(i, 0);
      y += h * (pull - y) + sd * r.gaussian(std::uint64_t(i), 0);
      detail::guard_particle(y, i, "gauss1d sampler");
    }
  };
  GradientEstimator gfn = [theta_target, horizon](const ParticleEnsemble& e, const ParamVector&) {
    return ParamVector{gamma_diffusion1d(e, theta_target, horizon)};
  };

  RunResult res;
  res.columns = experiment_columns("gauss1d");
  StepCallback cb = [&](long k, const ParticleEnsemble& ens, const ParamVector& th, long evals) {
    if (k % cadence != 0 && k != K - 1) return true;
    MetricsRow row;
    row.k = k;
    row.gradient_evaluations = evals;
    row.mean_reward = ens.size() > 0 ? ens.mean(0) : std::numeric_limits<double>::quiet_NaN();
    row.theta_error = std::abs(th[0] - theta_target);
    res.rows.push_back(row);
    return true;
  };

  const auto t_start = std::chrono::steady_clock::now();
  RunTrace trace;
  if (algo == "double-queue") {
    RewardSpec quad;
    quad.eval = [theta_target](const double* x, int) {
      const double d = x[0] - theta_target;
      return -0.5 * d * d;
    };
    quad.differentiable = true;
    quad.grad = [theta_target](const double* x, int, double* out) {
      out[0] = -(x[0] - theta_target);
    };
    detail::require(steps == M, "gauss1d: double-queue needs steps == M");
    trace = run_double_queue_adjoint({theta_start}, M, K, drift, quad, eta_disc, n, rng,
                                     int(cadence), cb);
  } else if (steps == M) {
    trace = run_implicit_finite_queue({theta_start}, init, M, K, samp, gfn, eta_disc, rng,
                                      warm_start, int(cadence), cb);
  } else {
    trace = run_queue_m_divides_t({theta_start}, init, M, steps, K, samp, gfn, eta_disc, rng,
                                  warm_start, int(cadence), cb);
  }
  const double wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
          .count();

  CoupledOdeSolution oracle = diffusion1d_theta_path(theta_start, theta_target, eta, horizon);
  const double oracle_terminal = oracle.theta(2.0 * horizon);

  res.final_theta = trace.final_theta;
  res.final_ensemble = std::move(trace.final_ensemble);
  res.gradient_evaluations = trace.gradient_evaluations;
  res.manifest = detail::config_echo(cfg);
  res.manifest["algorithm"] = algo;
  res.manifest["code_version"] = kCodeVersion;
  res.manifest["golden_hash"] = detail::golden_file_hash("goldens/oracle_reference.json");
  res.manifest["gradient_evaluations"] = res.gradient_evaluations;
  res.manifest["parallel_depth"] = trace.parallel_depth;
  res.manifest["final_theta"] = res.final_theta;
  res.manifest["oracle_theta_terminal"] = oracle_terminal;
  res.manifest["terminal_oracle_deviation"] = std::abs(res.final_theta[0] - oracle_terminal);
  res.manifest["terminal_target_error"] = std::abs(res.final_theta[0] - theta_target);
  res.manifest["total_wall_ms"] = wall_ms;
  return res;
}

// ---------------------------------------------------------------------------
// rates: decaying two-timescale schedule with a quadrature gradient oracle
// sampled at cadence ticks.
// ---------------------------------------------------------------------------

inline RunResult run_rates(const ExperimentConfig& cfg) {
  const int n = int(cfg.integer("n", 1000));
  const long K = cfg.integer("K", 4096);
  const long cadence = std::max(1l, cfg.integer("cadence", 64));
  const double radius = cfg.real("radius", 2.0);
  const double lfloor = cfg.real("logistic_floor", 0.2);
  const double lambda = cfg.real("lambda", 1.0);
  const double tau = cfg.real("tau", 0.1);
  const double fd_h = cfg.real("fd_h", 1e-4);
  const std::string rkind = cfg.str("reward", "indicator");
  ParamVector theta0 = cfg.vec("theta0", {1, 0, 1, 0, 1, 0});
  detail::require(theta0.size() == 6, "rates: theta0 must have 6 entries");

  StepSchedule sched;
  sched.kind = detail::parse_schedule_kind(cfg.str("schedule", "inv-sqrt-both"));
  sched.gamma_base = cfg.real("gamma_base", 0.45);
  sched.eps_base = cfg.real("eps_base", 1.0);
  sched.offset = cfg.integer("offset", 1);

  MixturePotential pot = hexagon_mixture(
      radius, detail::parse_weight_map(cfg.str("weight_map", "shifted-logistic")), lfloor);
  RewardSpec reward =
      rkind == "smoothed" ? smoothed_gaussian_reward({1.0, 0.95}, tau) : indicator_gaussian_reward();
  ObjectiveSpec obj;
  obj.lambda = lambda;
  obj.beta = 0.0;
  obj.reward = reward;

  RngStream rng(cfg.seed, experiment_stream_id("rates"));
  EnsembleInit init = [n](const RngStream& r) { return gaussian_ensemble(n, 2, 0.0, 1.0, r); };
  StepSampler samp = [&pot](ParticleEnsemble& e, const ParamVector& th, double g,
                            const RngStream& r) { langevin_step(e, pot, th, g, r); };
  GradientEstimator gfn = [&pot, &obj](const ParticleEnsemble& e, const ParamVector& th) {
    return gamma_combined(e, nullptr, th, pot, obj);
  };
  auto loss_fn = [&pot, &obj](const ParamVector& th) { return quadrature_loss(pot, th, obj); };

  RunResult res;
  res.columns = experiment_columns("rates");
  long ticks = 0;
  double grad_sum = 0.0;
  StepCallback cb = [&](long k, const ParticleEnsemble& ens, const ParamVector& th, long evals) {
    if (k % cadence != 0 && k != K - 1) return true;
    ParamVector g = finite_difference_grad(loss_fn, th, fd_h);
    double gns = 0.0;
    for (double v : g) gns += v * v;
    ++ticks;
    grad_sum += gns;
    MetricsRow row;
    row.k = k;
    row.gradient_evaluations = evals;
    row.mean_reward = detail::batch_mean_reward(reward, ens);
    row.grad_norm_sq_running_avg = grad_sum / ticks;
    res.rows.push_back(row);
    return true;
  };

  const auto t_start = std::chrono::steady_clock::now();
  RunTrace trace =
      run_implicit_infinite(theta0, init, K, samp, gfn, sched, rng, 1.0, int(cadence), cb);
  const double wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
          .count();

  res.final_theta = trace.final_theta;
  res.final_ensemble = std::move(trace.final_ensemble);
  res.gradient_evaluations = trace.gradient_evaluations;
  res.manifest = detail::config_echo(cfg);
  res.manifest["code_version"] = kCodeVersion;
  res.manifest["golden_hash"] = detail::golden_file_hash("goldens/oracle_reference.json");
  res.manifest["gradient_evaluations"] = res.gradient_evaluations;
  res.manifest["schedule"] = to_string(sched.kind);
  res.manifest["final_theta"] = res.final_theta;
  if (!res.rows.empty()) {
    const double avg = res.rows.back().grad_norm_sq_running_avg;
    res.manifest["terminal_grad_norm_sq_running_avg"] = avg;
    res.manifest["terminal_rate_ratio"] = avg / (std::log(double(K)) * std::pow(double(K), -1.0 / 3.0));
  }
  {
    StationaryGrid st = stationary_quadrature(pot, res.final_theta);
    GridDistribution sm = smooth_ensemble_to_grid(res.final_ensemble, st.grid);
    res.manifest["terminal_kl_to_stationary"] = grid_kl(sm, st.grid);
  }
  res.manifest["total_wall_ms"] = wall_ms;
  return res;
}

// ---------------------------------------------------------------------------
// finite-state: exact implicit gradient descent with an FD agreement column.
// ---------------------------------------------------------------------------

inline RunResult run_finite_state(const ExperimentConfig& cfg) {
  const int m = int(cfg.integer("m", 5));
  const int p = int(cfg.integer("p", 3));
  const std::uint64_t problem_seed = std::uint64_t(cfg.integer("problem_seed", 7));
  const double eta = cfg.real("eta", 0.5);
  const long K = cfg.integer("K", 200);
  const long cadence = std::max(1l, cfg.integer("cadence", 10));
  FiniteStateProblem prob = random_finite_state_problem(m, p, problem_seed);
  ParamVector theta = cfg.vec("theta0", ParamVector(std::size_t(p), 0.0));
  detail::require(int(theta.size()) == p, "finite-state: theta0 must have p entries");

  auto loss_fn = [&prob](const ParamVector& th) { return finite_state_loss(prob, th); };

  RunResult res;
  res.columns = experiment_columns("finite-state");
  const auto t_start = std::chrono::steady_clock::now();
  long evals = 0;
  for (long k = 0; k < K; ++k) {
    ParamVector grad = finite_state_implicit_gradient(prob, theta);
    ++evals;
    if (k % cadence == 0 || k == K - 1) {
      ParamVector fd = finite_difference_grad(loss_fn, theta, 1e-4);
      double dinf = 0.0, finf = 0.0;
      for (std::size_t j = 0; j < grad.size(); ++j) {
        dinf = std::max(dinf, std::abs(grad[j] - fd[j]));
        finf = std::max(finf, std::abs(fd[j]));
      }
      MetricsRow row;
      row.k = k;
      row.gradient_evaluations = evals;
      row.mean_reward = finite_state_loss(prob, theta);
      row.fd_rel_err = dinf / std::max(finf, 1e-12);
      res.rows.push_back(row);
    }
    for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= eta * grad[j];
  }
  const double wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
          .count();

  res.final_theta = theta;
  res.gradient_evaluations = evals;
  res.manifest = detail::config_echo(cfg);
  res.manifest["code_version"] = kCodeVersion;
  res.manifest["golden_hash"] = detail::golden_file_hash("goldens/oracle_reference.json");
  res.manifest["gradient_evaluations"] = evals;
  res.manifest["final_theta"] = theta;
  res.manifest["final_loss"] = finite_state_loss(prob, theta);
  res.manifest["total_wall_ms"] = wall_ms;
  return res;
}

inline RunResult run_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  if (cfg.experiment == "langevin-reward") return run_langevin_reward(cfg);
  if (cfg.experiment == "langevin-scratch") return run_langevin_scratch(cfg);
  if (cfg.experiment == "gauss1d") return run_gauss1d(cfg);
  if (cfg.experiment == "rates") return run_rates(cfg);
  if (cfg.experiment == "finite-state") return run_finite_state(cfg);
  throw std::invalid_argument("unknown experiment: " + cfg.experiment);
}

// ---------------------------------------------------------------------------
// emission
// ---------------------------------------------------------------------------

inline void write_metrics_csv(const RunResult& res, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  detail::require(bool(f), "cannot write " + path);
  for (std::size_t c = 0; c < res.columns.size(); ++c)
    f << (c ? "," : "") << res.columns[c];
  f << "\n";
  for (const MetricsRow& r : res.rows) {
    for (std::size_t c = 0; c < res.columns.size(); ++c) {
      if (c) f << ",";
      const std::string& name = res.columns[c];
      if (name == "k")
        f << r.k;
      else if (name == "gradient_evaluations")
        f << r.gradient_evaluations;
      else
        f << format_double(metrics_field(r, name));
    }
    f << "\n";
  }
}

inline void write_manifest(const RunResult& res, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  detail::require(bool(f), "cannot write " + path);
  nlohmann::ordered_json j = res.manifest;
  j["columns"] = res.columns;
  j["rows"] = res.rows.size();
  f << j.dump(2) << "\n";
}

inline void write_ensemble_csv(const ParticleEnsemble& ens, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  detail::require(bool(f), "cannot write " + path);
  for (int j = 0; j < ens.dim(); ++j) f << (j ? "," : "") << "x" << j;
  f << "\n";
  for (int i = 0; i < ens.size(); ++i) {
    for (int j = 0; j < ens.dim(); ++j) f << (j ? "," : "") << format_double(ens.at(i, j));
    f << "\n";
  }
}

// ---------------------------------------------------------------------------
// golden oracle values, regenerated via the CLI and pinned by tests
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json golden_reference() {
  nlohmann::ordered_json g;
  g["format"] = 1;
  {
    nlohmann::ordered_json m;
    for (long s : {1l, 5l, 20l, 100l}) {
      Moments mo = example1_moments(s, 0.1, 0.0, 3.0, 4.0);
      m["s" + std::to_string(s)] = {mo.mean, mo.variance};
    }
    g["gaussian_recursion_moments"] = std::move(m);
  }
  {
    MixturePotential pot = hexagon_mixture(2.0, WeightMap::kShiftedLogistic, 0.2);
    ParamVector th = {1, 0, 1, 0, 1, 0};
    ObjectiveSpec obj;
    obj.reward = indicator_gaussian_reward();
    g["hexagon_loss_at_start"] = quadrature_loss(pot, th, obj);
    StationaryGrid st = stationary_quadrature(pot, th);
    g["hexagon_stationary"] = {{"log_z", st.log_z},
                               {"mean", {st.grid.mean(0), st.grid.mean(1)}},
                               {"variance", {st.grid.variance(0), st.grid.variance(1)}}};
  }
  {
    nlohmann::ordered_json p;
    for (int T : {2, 4, 6}) {
      CoupledOdeSolution sol = diffusion1d_theta_path(0.0, 1.0, 1.0, double(T));
      p["T" + std::to_string(T)] = {
          {"theta_terminal", sol.theta(2.0 * T)},
          {"fixed_point", {sol.fixed_point[0], sol.fixed_point[1]}}};
    }
    g["theta_path"] = std::move(p);
  }
  g["path_kl_unit_gap_T3"] = analytic_path_kl_1d(1.0, 0.0, 3.0);
  {
    FiniteStateProblem prob = random_finite_state_problem(5, 3, 7);
    ParamVector th(3, 0.3);
    g["finite_state"] = {{"loss", finite_state_loss(prob, th)},
                         {"grad", finite_state_implicit_gradient(prob, th)}};
  }
  return g;
}

inline void write_golden(const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary);
  detail::require(bool(f), "cannot write " + path);
  f << golden_reference().dump(2) << "\n";
}

}  // namespace impdiff
