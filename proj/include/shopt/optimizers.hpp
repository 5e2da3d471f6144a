#ifndef SHOPT_OPTIMIZERS_HPP
#define SHOPT_OPTIMIZERS_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "shopt/common.hpp"
#include "shopt/history.hpp"
#include "shopt/linalg.hpp"
#include "shopt/problems.hpp"
#include "shopt/sampling.hpp"

namespace shopt {

enum class ScheduleKind { constant, inv_sqrt, inv_cbrt };

struct Schedule {
  ScheduleKind kind = ScheduleKind::constant;
  double base = 0.1;  // eta
};

/// eta_t for epoch t >= 1: eta, eta * t^{-1/2} or eta * t^{-1/3}.
inline double step_size(const Schedule& s, int t) {
  if (t < 1) throw EpochError("step_size: epoch index starts at 1");
  if (s.base < 0.0) throw ConfigError("step_size: base step must not be negative");
  switch (s.kind) {
    case ScheduleKind::constant:
      return s.base;
    case ScheduleKind::inv_sqrt:
      return s.base / std::sqrt(static_cast<double>(t));
    case ScheduleKind::inv_cbrt:
      return s.base * std::pow(static_cast<double>(t), -1.0 / 3.0);
  }
  throw ConfigError("step_size: unknown schedule kind");
}

enum class Sampling { shuffled, uniform };
enum class Method { shadagrad, adagrad_f, sgd };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::inv_sqrt: return "inv_sqrt";
    case ScheduleKind::inv_cbrt: return "inv_cbrt";
  }
  return "?";
}

inline std::string to_string(Sampling s) {
  return s == Sampling::shuffled ? "shuffled" : "uniform";
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::shadagrad: return "shadagrad";
    case Method::adagrad_f: return "adagrad_f";
    case Method::sgd: return "sgd";
  }
  return "?";
}

struct GateConfig {
  bool enabled = false;
  double divisor = 8.0;  // threshold c_sigma^2 m^2 / (divisor * n)
  std::optional<double> c_sigma;  // resolved before an epoch runs
  int max_attempts = 100;
};

struct OptimizerConfig {
  Schedule schedule;
  int batches = 1;  // m
  double gamma = 1.0;
  Sampling sampling = Sampling::shuffled;
  GateConfig gate;
  std::optional<double> fixed_delta;  // constant-perturbation mode
  bool per_epoch_lowrank = false;
  Eigen::Index max_columns = 0;  // 0 -> history default
  bool theory_mode = false;      // warn when step/gamma leave the analyzed regime
  bool gaussian_init = true;
  double init_scale = 0.5;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"schedule", {{"kind", to_string(schedule.kind)},
                                      {"base", schedule.base}}},
                        {"batches", batches},
                        {"gamma", gamma},
                        {"sampling", to_string(sampling)},
                        {"per_epoch_lowrank", per_epoch_lowrank},
                        {"max_columns", max_columns},
                        {"theory_mode", theory_mode},
                        {"gaussian_init", gaussian_init},
                        {"init_scale", init_scale},
                        {"gate", {{"enabled", gate.enabled},
                                  {"divisor", gate.divisor},
                                  {"max_attempts", gate.max_attempts}}}};
    if (gate.c_sigma) j["gate"]["c_sigma"] = *gate.c_sigma;
    if (fixed_delta) j["fixed_delta"] = *fixed_delta;
    return j;
  }
};

/// Everything one epoch produced; diagnostics replay runs from these.
struct EpochTrace {
  int t = 0;
  Vector x_start;
  std::vector<Vector> grads;     // mini-batch gradients at the moving iterates
  std::vector<Vector> iterates;  // x_1 .. x_{m+1}
  double eta = 0.0;
  double delta_before = 0.0;
  double delta_after = 0.0;
  EpochPartition partition;
  int gate_attempts = 0;  // partition draws consumed; 0 when the gate is off
  double sigma_p = 0.0;
  std::vector<Vector> grads_at_start;  // batch gradients at x_start, if known
};

struct OptimizerState {
  Vector x;
  std::optional<GradientHistory> history;
  int t = 0;  // completed epochs
  Rng rng;
};

namespace detail {

inline EpochPartition draw_partition(const FiniteSumProblem& p, int m,
                                     Sampling mode, Rng& rng) {
  return mode == Sampling::shuffled ? shuffle_partition(p.n(), m, rng)
                                    : uniform_batches(p.n(), m, rng);
}

inline void check_shape(const FiniteSumProblem& p, const OptimizerConfig& cfg) {
  if (cfg.batches < 1 || p.n() % cfg.batches != 0)
    throw ConfigError("optimizer: batches must divide the instance count");
  if (cfg.gamma <= 0.0) throw ConfigError("optimizer: gamma must be positive");
}

inline EpochTrace preconditioned_epoch(const FiniteSumProblem& p,
                                       OptimizerState& st,
                                       const OptimizerConfig& cfg,
                                       bool gated) {
  check_shape(p, cfg);
  if (!st.history) throw ConfigError("optimizer: history required");
  const int m = cfg.batches;
  const int t = st.t + 1;

  EpochTrace tr;
  tr.t = t;
  tr.x_start = st.x;
  tr.eta = step_size(cfg.schedule, t);
  tr.delta_before = st.history->delta();

  if (gated) {
    if (!cfg.gate.c_sigma)
      throw ConfigError("optimizer: gate needs c_sigma (set it or estimate it)");
    const double cs = *cfg.gate.c_sigma;
    const double threshold =
        cs * cs * m * m / (cfg.gate.divisor * static_cast<double>(p.n()));
    GateResult gr = rejection_gate(
        [&](const std::vector<int>& batch) { return p.batch_grad(batch, st.x); },
        [&]() { return draw_partition(p, m, cfg.sampling, st.rng); }, threshold,
        cfg.gate.max_attempts);
    tr.partition = std::move(gr.partition);
    tr.gate_attempts = gr.attempts;
    tr.sigma_p = gr.sigma_p;
    tr.grads_at_start = std::move(gr.grads_at_start);
  } else {
    tr.partition = draw_partition(p, m, cfg.sampling, st.rng);
  }

  tr.iterates.push_back(st.x);
  for (int i = 0; i < m; ++i) {
    Vector g = p.batch_grad(tr.partition.batches[static_cast<std::size_t>(i)], st.x);
    st.history->push_gradient(g);
    st.x -= tr.eta * st.history->precondition(g);
#ifndef NDEBUG
    // every preconditioned step is a contraction of the raw step length
    assert((st.x - tr.iterates.back()).norm() <= tr.eta * (1.0 + 1e-9) + 1e-9);
#endif
    tr.grads.push_back(std::move(g));
    tr.iterates.push_back(st.x);
  }
  st.history->seal_epoch();
  tr.delta_after = st.history->delta();
  st.t = t;
  return tr;
}

}  // namespace detail

/// One gated epoch with the adaptive perturbation: resample the partition
/// until the summed squared batch-gradient norms at the start point clear the
/// threshold, then step through the batches with the accumulated
/// inverse-square-root preconditioner.
inline EpochTrace shadagrad_epoch(const FiniteSumProblem& p, OptimizerState& st,
                                  const OptimizerConfig& cfg) {
  if (st.history && st.history->has_fixed_delta())
    throw ConfigError("shadagrad_epoch: history must use the adaptive delta");
  return detail::preconditioned_epoch(p, st, cfg, cfg.gate.enabled);
}

/// Same update loop with a constant perturbation and no gate.
inline EpochTrace adagrad_f_epoch(const FiniteSumProblem& p, OptimizerState& st,
                                  const OptimizerConfig& cfg) {
  if (cfg.gate.enabled)
    throw ConfigError("adagrad_f_epoch: the gate applies to shadagrad only");
  if (!st.history || !st.history->has_fixed_delta())
    throw ConfigError("adagrad_f_epoch: history must carry a fixed delta");
  return detail::preconditioned_epoch(p, st, cfg, false);
}

/// Plain stochastic gradient steps over the epoch's batches.
inline EpochTrace sgd_epoch(const FiniteSumProblem& p, OptimizerState& st,
                            const OptimizerConfig& cfg) {
  if (cfg.gate.enabled)
    throw ConfigError("sgd_epoch: the gate applies to shadagrad only");
  detail::check_shape(p, cfg);
  const int m = cfg.batches;
  const int t = st.t + 1;

  EpochTrace tr;
  tr.t = t;
  tr.x_start = st.x;
  tr.eta = step_size(cfg.schedule, t);
  tr.partition = detail::draw_partition(p, m, cfg.sampling, st.rng);
  tr.iterates.push_back(st.x);
  for (int i = 0; i < m; ++i) {
    Vector g = p.batch_grad(tr.partition.batches[static_cast<std::size_t>(i)], st.x);
    st.x -= tr.eta * g;
    tr.grads.push_back(std::move(g));
    tr.iterates.push_back(st.x);
  }
  st.t = t;
  return tr;
}

struct EpochRow {
  int t = 0;
  double eta = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;        // full gradient at the epoch start
  double rgps_norm = 0.0;        // epoch mean of the moving-iterate gradients
  double weighted_metric = 0.0;  // running t^{-1/2}-weighted mean, normalized
  double delta = 0.0;
  double kappa = 0.0;  // condition number of the epoch's gradient Gram
  int gate_attempts = 0;
  long long grad_evals = 0;  // cumulative batch-gradient evaluations
};

struct RunRecord {
  Method method = Method::sgd;
  std::uint64_t seed = 0;
  OptimizerConfig config;
  nlohmann::json manifest;
  std::vector<EpochRow> rows;
  bool complete = true;
  std::string failure;
  long long total_grad_evals = 0;
  std::vector<EpochTrace> traces;  // only populated on request

  double final_weighted_metric() const {
    return rows.empty() ? std::numeric_limits<double>::quiet_NaN()
                        : rows.back().weighted_metric;
  }
};

namespace detail {

inline Vector mean_of(const std::vector<Vector>& vs) {
  Vector s = Vector::Zero(vs.front().size());
  for (const Vector& v : vs) s += v;
  return s / static_cast<double>(vs.size());
}

inline double epoch_kappa(const EpochTrace& tr, Eigen::Index dim) {
  GradMatrix h(dim);
  for (const Vector& g : tr.grads) h.push_col(g);
  try {
    return condition_number(h);
  } catch (const RankDeficientError&) {
    return std::numeric_limits<double>::infinity();
  }
}

inline constexpr std::uint64_t kInitSalt = 0x1A17;
inline constexpr std::uint64_t kSampleSalt = 0x5A3F;
inline constexpr std::uint64_t kEstimateSalt = 0xE57A;

}  // namespace detail

/// Executes T epochs of the chosen method, recording per-epoch diagnostics
/// and the t^{-1/2}-weighted gradient metric. The evaluation counter charges
/// the update loop (m per epoch) plus m per gate attempt; out-of-band
/// diagnostic evaluations (loss, full gradients, metric gradients) are free.
/// A gate-exhausted epoch ends the run gracefully with a partial record.
inline RunRecord run(const FiniteSumProblem& p, Method method,
                     const OptimizerConfig& config, int T, std::uint64_t seed,
                     bool keep_traces = false) {
  if (T < 1) throw ConfigError("run: T must be >= 1");
  detail::check_shape(p, config);
  if (method != Method::shadagrad && config.gate.enabled)
    throw ConfigError("run: the gate applies to shadagrad only");
  if (method == Method::adagrad_f && !config.fixed_delta)
    throw ConfigError("run: adagrad_f needs fixed_delta");

  OptimizerConfig cfg = config;
  const int m = cfg.batches;

  // Resolve constants only when something needs them.
  std::optional<EstimatedConstants> est;
  const bool need_gate_sigma =
      method == Method::shadagrad && cfg.gate.enabled && !cfg.gate.c_sigma;
  if (need_gate_sigma || cfg.theory_mode) {
    Rng est_rng(Rng::mix(seed, detail::kEstimateSalt));
    est = estimate_constants(p, 32, est_rng);
  }
  if (need_gate_sigma) cfg.gate.c_sigma = est->sigma_lower;

  std::vector<std::string> warnings;
  if (cfg.theory_mode) {
    const double L = p.smoothness && p.smoothness->declared ? p.smoothness->value
                                                            : est->smoothness;
    const double G = p.grad_bound && p.grad_bound->declared ? p.grad_bound->value
                                                            : est->grad_bound;
    const double cs = cfg.gate.c_sigma.value_or(est->sigma_lower);
    const double eta_cap = cs * cs / (16.0 * p.n() * L * G);
    if (cfg.schedule.base > eta_cap)
      warnings.push_back("step size " + std::to_string(cfg.schedule.base) +
                         " above analyzed cap " + std::to_string(eta_cap));
    if (cfg.gamma < m || cfg.gamma > p.n())
      warnings.push_back("gamma " + std::to_string(cfg.gamma) +
                         " outside [m, n] = [" + std::to_string(m) + ", " +
                         std::to_string(p.n()) + "]");
  }

  OptimizerState st{Vector{}, std::nullopt, 0, Rng(Rng::mix(seed, detail::kSampleSalt))};
  {
    Rng init_rng(Rng::mix(seed, detail::kInitSalt));
    st.x = cfg.gaussian_init ? Vector(cfg.init_scale * init_rng.normal_vector(p.dim()))
                             : Vector(Vector::Zero(p.dim()));
  }
  GradientHistory::Options hopt;
  hopt.dim = p.dim();
  hopt.batches_per_epoch = m;
  hopt.gamma = cfg.gamma;
  hopt.per_epoch_lowrank = cfg.per_epoch_lowrank;
  hopt.max_columns = cfg.max_columns;
  if (method == Method::shadagrad) {
    st.history.emplace(hopt);
  } else if (method == Method::adagrad_f) {
    st.history.emplace(FixedPerturbHistory(hopt, *cfg.fixed_delta));
  }

  RunRecord rec;
  rec.method = method;
  rec.seed = seed;
  rec.config = cfg;

  double weight_sum = 0.0;
  double weighted_grad_sum = 0.0;
  long long evals = 0;

  for (int t = 1; t <= T; ++t) {
    const double loss = p.value(st.x);
    const double grad_norm = p.grad(st.x).norm();

    EpochTrace tr;
    try {
      switch (method) {
        case Method::shadagrad: tr = shadagrad_epoch(p, st, cfg); break;
        case Method::adagrad_f: tr = adagrad_f_epoch(p, st, cfg); break;
        case Method::sgd: tr = sgd_epoch(p, st, cfg); break;
      }
    } catch (const GateExhaustedError& e) {
      rec.complete = false;
      rec.failure = e.what();
      evals += static_cast<long long>(m) * e.attempts;
      rec.manifest["failed_epoch"] = t;
      rec.manifest["best_sigma_p"] = e.best_sigma;
      break;
    }

    evals += m + static_cast<long long>(m) * tr.gate_attempts;

    if (tr.grads_at_start.empty()) {
      tr.grads_at_start.reserve(static_cast<std::size_t>(m));
      for (const auto& batch : tr.partition.batches)
        tr.grads_at_start.push_back(p.batch_grad(batch, tr.x_start));
    }
    const double metric_norm = detail::mean_of(tr.grads_at_start).norm();
    const double w = 1.0 / std::sqrt(static_cast<double>(t));
    weight_sum += w;
    weighted_grad_sum += w * metric_norm;

    EpochRow row;
    row.t = t;
    row.eta = tr.eta;
    row.loss = loss;
    row.grad_norm = grad_norm;
    row.rgps_norm = detail::mean_of(tr.grads).norm();
    row.weighted_metric = weighted_grad_sum / weight_sum;
    row.delta = tr.delta_after;
    row.kappa = detail::epoch_kappa(tr, p.dim());
    row.gate_attempts = tr.gate_attempts;
    row.grad_evals = evals;
    rec.rows.push_back(row);

    if (keep_traces) rec.traces.push_back(std::move(tr));
  }

  rec.total_grad_evals = evals;
  rec.manifest["method"] = to_string(method);
  rec.manifest["seed"] = seed;
  rec.manifest["epochs"] = T;
  rec.manifest["problem"] = p.spec();
  rec.manifest["optimizer"] = cfg.to_json();
  rec.manifest["complete"] = rec.complete;
  if (!rec.failure.empty()) rec.manifest["failure"] = rec.failure;
  if (!warnings.empty()) rec.manifest["warnings"] = warnings;
  if (est) {
    rec.manifest["estimated_constants"] = {{"L", est->smoothness},
                                           {"G", est->grad_bound},
                                           {"c_sigma", est->sigma_lower}};
  }
  nlohmann::json summary;
  summary["total_grad_evals"] = evals;
  if (!rec.rows.empty()) {
    summary["final_loss"] = rec.rows.back().loss;
    summary["final_weighted_metric"] = rec.rows.back().weighted_metric;
    double min_grad = std::numeric_limits<double>::infinity();
    for (const auto& r : rec.rows) min_grad = std::min(min_grad, r.grad_norm);
    summary["min_grad_norm"] = min_grad;
  }
  rec.manifest["summary"] = std::move(summary);
  return rec;
}

}  // namespace shopt

#endif  // SHOPT_OPTIMIZERS_HPP
