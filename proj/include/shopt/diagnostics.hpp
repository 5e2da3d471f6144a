#ifndef SHOPT_DIAGNOSTICS_HPP
#define SHOPT_DIAGNOSTICS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shopt/common.hpp"
#include "shopt/history.hpp"
#include "shopt/linalg.hpp"
#include "shopt/optimizers.hpp"
#include "shopt/problems.hpp"

namespace shopt {

/// Outcome of one verifier over a recorded run. Margins are signed with
/// positive meaning satisfied; worst_margin is the minimum over instances.
struct CheckReport {
  std::string check;
  int instances = 0;
  int violations = 0;
  double worst_margin = 0.0;
  bool not_applicable = false;
  bool informational = false;  // never drives an exit status

  nlohmann::json to_json() const {
    return {{"check", check},
            {"instances", instances},
            {"violations", violations},
            {"worst_margin", std::isfinite(worst_margin) ? worst_margin : -1e300},
            {"not_applicable", not_applicable}};
  }
};

/// Constants feeding the inequality checks. The gradient bound means the
/// declared value when the problem carries one, otherwise the largest batch
/// gradient norm observed in the run (the tightest certified substitute).
struct RunConstants {
  double smoothness = 0.0;   // L
  double grad_bound = 0.0;   // G
  double sigma_lower = 0.0;  // c_sigma
  double kappa_bound = 1.0;  // observed max condition number
  int n = 0;
  int m = 0;
  double gamma = 1.0;
  Eigen::Index d = 0;
};

namespace detail {

constexpr double kCheckTol = 1e-8;

inline void fold(CheckReport& rep, double margin, bool violated) {
  if (rep.instances == 0) rep.worst_margin = margin;
  rep.worst_margin = std::min(rep.worst_margin, margin);
  ++rep.instances;
  if (violated) ++rep.violations;
}

inline double observed_grad_bound(const RunRecord& rec) {
  double g = 0.0;
  for (const auto& tr : rec.traces)
    for (const auto& col : tr.grads) g = std::max(g, col.norm());
  return g;
}

inline double observed_kappa_bound(const RunRecord& rec, Eigen::Index d) {
  double k = 1.0;
  for (const auto& tr : rec.traces) {
    GradMatrix h(d);
    for (const auto& col : tr.grads) h.push_col(col);
    try {
      k = std::max(k, condition_number(h));
    } catch (const RankDeficientError&) {
      // handled by the condition-number check itself
    }
  }
  return k;
}

/// Walks a recorded run and hands each epoch its dense accumulated matrices.
/// G(i) is the matrix right after the epoch's i-th push (i = 0: none yet).
class EpochMatrices {
 public:
  EpochMatrices(const EpochTrace& tr, Matrix acc_start, double delta_start,
                double gamma, bool adaptive)
      : tr_(tr), acc_(std::move(acc_start)), delta_start_(delta_start),
        gamma_(gamma), adaptive_(adaptive) {
    partial_.reserve(tr.grads.size() + 1);
    partial_.push_back(acc_);
    for (const auto& g : tr.grads) {
      acc_ += g * g.transpose();
      partial_.push_back(acc_);
    }
  }

  int m() const { return static_cast<int>(tr_.grads.size()); }

  double delta_at(int i) const {
    if (!adaptive_) return delta_start_;
    double d = delta_start_;
    for (int j = 0; j < i; ++j) d += tr_.grads[static_cast<std::size_t>(j)].squaredNorm();
    return d;
  }

  DenseSym matrix_at(int i) const {
    Matrix m = partial_[static_cast<std::size_t>(i)];
    m.diagonal().array() += delta_at(i) / gamma_;
    return DenseSym::from_matrix(std::move(m));
  }

  const Matrix& acc_end() const { return acc_; }

 private:
  const EpochTrace& tr_;
  Matrix acc_;
  double delta_start_;
  double gamma_;
  bool adaptive_;
  std::vector<Matrix> partial_;
};

template <typename Visitor>
void replay_epochs(const RunRecord& rec, Eigen::Index d, Visitor&& visit) {
  Matrix acc = Matrix::Zero(d, d);
  double delta = rec.config.fixed_delta.value_or(0.0);
  const bool adaptive = !rec.config.fixed_delta.has_value();
  for (const auto& tr : rec.traces) {
    EpochMatrices em(tr, rec.config.per_epoch_lowrank ? Matrix(Matrix::Zero(d, d))
                                                      : acc,
                     adaptive ? tr.delta_before : delta, rec.config.gamma,
                     adaptive);
    visit(tr, em);
    if (!rec.config.per_epoch_lowrank) acc = em.acc_end();
    else acc += em.acc_end();  // unused in this mode, kept for symmetry
  }
}

inline double quad_form(const DenseSym& inv_sqrt, const Vector& v) {
  return v.dot(inv_sqrt.apply(v));
}

}  // namespace detail

inline RunConstants resolve_constants(const FiniteSumProblem& p,
                                      const RunRecord& rec) {
  RunConstants c;
  c.n = p.n();
  c.m = rec.config.batches;
  c.gamma = rec.config.gamma;
  c.d = p.dim();

  std::optional<EstimatedConstants> est;
  const auto estimated = [&]() -> const EstimatedConstants& {
    if (!est) {
      Rng rng(Rng::mix(rec.seed, detail::kEstimateSalt));
      est = estimate_constants(p, 32, rng);
    }
    return *est;
  };

  c.smoothness = p.smoothness && p.smoothness->declared ? p.smoothness->value
                                                        : estimated().smoothness;
  c.grad_bound = p.grad_bound && p.grad_bound->declared
                     ? p.grad_bound->value
                     : detail::observed_grad_bound(rec);
  if (rec.config.gate.c_sigma)
    c.sigma_lower = *rec.config.gate.c_sigma;
  else if (p.sigma_lower && p.sigma_lower->declared)
    c.sigma_lower = p.sigma_lower->value;
  else
    c.sigma_lower = estimated().sigma_lower;
  c.kappa_bound = detail::observed_kappa_bound(rec, p.dim());
  return c;
}

/// Condition numbers of the per-epoch gradient Gram matrices: flags epochs
/// above `kappa_threshold`, counts rank-deficient epochs as violations, and
/// adds one growth instance comparing the max over the run's second half
/// against twice the max over the first half.
inline CheckReport check_condition_number(const RunRecord& rec, Eigen::Index d,
                                          double kappa_threshold) {
  CheckReport rep;
  rep.check = "condition_number";
  if (rec.config.batches < 2 || rec.traces.empty()) {
    rep.not_applicable = true;
    return rep;
  }
  std::vector<double> kappas;
  for (const auto& tr : rec.traces) {
    GradMatrix h(d);
    for (const auto& col : tr.grads) h.push_col(col);
    double kappa;
    try {
      kappa = condition_number(h);
    } catch (const RankDeficientError&) {
      kappa = std::numeric_limits<double>::infinity();
    }
    kappas.push_back(kappa);
    detail::fold(rep, kappa_threshold - kappa, !(kappa <= kappa_threshold));
  }
  if (kappas.size() >= 2) {
    const std::size_t half = kappas.size() / 2;
    const double first = *std::max_element(kappas.begin(), kappas.begin() + half);
    const double second = *std::max_element(kappas.begin() + half, kappas.end());
    detail::fold(rep, 2.0 * first - second, second > 2.0 * first);
  }
  return rep;
}

/// Gap between the epoch-mean gradient sequence and the full gradient at the
/// epoch start, against the smoothness drift bound L * eta * (m - 1) / 2.
inline CheckReport check_rgps_gap(const RunRecord& rec,
                                  const FiniteSumProblem& p, double smoothness) {
  CheckReport rep;
  rep.check = "rgps_gap";
  for (const auto& tr : rec.traces) {
    const int m = static_cast<int>(tr.grads.size());
    Vector s = Vector::Zero(p.dim());
    for (const auto& g : tr.grads) s += g;
    s /= static_cast<double>(m);
    const double gap = (p.grad(tr.x_start) - s).norm();
    const double bound = smoothness * tr.eta * (m - 1) / 2.0 + 1e-9;
    detail::fold(rep, bound - gap, gap > bound);
  }
  rep.not_applicable = rep.instances == 0;
  return rep;
}

/// Per-epoch sufficient-descent inequality: the preconditioned quadratic form
/// of the summed epoch gradients, scaled by eta / (4 m), must not exceed the
/// loss drop plus the two explicit remainder terms. Epochs whose step size
/// exceeds the analyzed cap c_sigma^2 / (16 n L G) are skipped.
inline CheckReport check_sufficient_descent(const RunRecord& rec,
                                            const FiniteSumProblem& p,
                                            const RunConstants& c) {
  CheckReport rep;
  rep.check = "sufficient_descent";
  const double cap =
      c.sigma_lower * c.sigma_lower / (16.0 * c.n * c.smoothness * c.grad_bound);
  detail::replay_epochs(rec, p.dim(), [&](const EpochTrace& tr,
                                          const detail::EpochMatrices& em) {
    if (tr.eta > cap) return;
    const int m = em.m();
    Vector v = Vector::Zero(p.dim());
    for (const auto& g : tr.grads) v += g;

    const DenseSym gm = em.matrix_at(m);
    const DenseSym g1 = em.matrix_at(1);
    const double lhs =
        tr.eta / (4.0 * m) * detail::quad_form(psd_inv_sqrt_dense(gm, 0.0), v);

    const double lam1 = lambda_min(g1);
    const double lamm = lambda_min(gm);
    const double eta = tr.eta;
    const double L = c.smoothness;
    const double G = c.grad_bound;
    const double m3 = static_cast<double>(m) * m * m;
    const double m15 = std::pow(static_cast<double>(m), 1.5);
    const double term1 =
        std::min(2.0 * eta * eta * eta * L * L * G * G * m3 /
                     (3.0 * std::pow(lam1, 1.5)),
                 2.0 * eta * eta * eta * L * L * m3 / (3.0 * std::sqrt(lamm)));
    const double term2 = std::min(3.0 * eta * m15 * G * G * G /
                                      (std::sqrt(2.0) * lam1),
                                  3.0 * eta * m15 * G / std::sqrt(2.0));
    const double rhs =
        p.value(tr.x_start) - p.value(tr.iterates.back()) + term1 + term2;
    const double margin = rhs - lhs;
    detail::fold(rep, margin,
                 margin < -detail::kCheckTol * (1.0 + std::abs(rhs) + std::abs(lhs)));
  });
  rep.not_applicable = rep.instances == 0;
  return rep;
}

/// Quadratic-form chain on the summed epoch gradients: (a) the accumulated
/// matrix transfers the lower bound from the one-epoch increment matrix with
/// factor beta = sqrt(delta_inc / (4 G^2 t m d Gamma)); (b) the increment
/// form dominates sqrt(m / (2 kappa^2)) times the gradient-sum norm; (c) the
/// composite of both. Needs Gamma >= m; rank-deficient epochs are skipped.
inline CheckReport check_quadform_lower_bounds(const RunRecord& rec,
                                               const FiniteSumProblem& p,
                                               const RunConstants& c) {
  CheckReport rep;
  rep.check = "quadform_lower_bounds";
  if (c.gamma < c.m) {
    rep.not_applicable = true;
    return rep;
  }
  detail::replay_epochs(rec, p.dim(), [&](const EpochTrace& tr,
                                          const detail::EpochMatrices& em) {
    const int m = em.m();
    Vector v = Vector::Zero(p.dim());
    for (const auto& g : tr.grads) v += g;
    const double vnorm = v.norm();
    if (vnorm == 0.0) {
      // every quadratic form vanishes; the chain holds with equality
      for (int k = 0; k < 3; ++k) detail::fold(rep, 0.0, false);
      return;
    }
    GradMatrix h(p.dim());
    for (const auto& g : tr.grads) h.push_col(g);
    try {
      condition_number(h);
    } catch (const RankDeficientError&) {
      return;  // full-column-rank hypothesis does not hold this epoch
    }

    const double delta_inc = em.delta_at(m) - em.delta_at(0);
    const double G = c.grad_bound;
    const double t = static_cast<double>(tr.t);
    if (em.delta_at(m) > t * m * G * G * (1.0 + 1e-12)) return;  // hypothesis

    const DenseSym gm = em.matrix_at(m);
    const DenseSym inc = gm.minus(em.matrix_at(0));
    const double q_acc = detail::quad_form(psd_inv_sqrt_dense(gm, 0.0), v);
    const double q_inc = detail::quad_form(psd_inv_sqrt_dense(inc, 0.0), v);
    const double beta =
        std::sqrt(delta_inc / (4.0 * G * G * t * m * p.dim() * c.gamma));
    const double root_term =
        std::sqrt(m / (2.0 * c.kappa_bound * c.kappa_bound)) * vnorm;

    const double m_a = q_acc - beta * q_inc;
    detail::fold(rep, m_a, m_a < -detail::kCheckTol * (1.0 + q_acc));
    const double m_b = q_inc - root_term;
    detail::fold(rep, m_b, m_b < -detail::kCheckTol * (1.0 + q_inc));
    const double m_c = q_acc - beta * root_term;
    detail::fold(rep, m_c, m_c < -detail::kCheckTol * (1.0 + q_acc));
  });
  rep.not_applicable = rep.instances == 0;
  return rep;
}

/// Within-epoch matrix-root growth and iterate-distance bounds: for i <= j,
/// sqrt(G_j) <= sqrt(G_i) + sqrt(2 m) G I; every step moves at most
/// eta * min(1, G / sqrt(lambda_min(G_1))) and the drift from the epoch start
/// scales with the iteration count.
inline CheckReport check_loewner_lemmas(const RunRecord& rec,
                                        const FiniteSumProblem& p,
                                        const RunConstants& c) {
  CheckReport rep;
  rep.check = "loewner_monotonicity";
  if (c.gamma < 1.0) {
    rep.not_applicable = true;
    return rep;
  }
  const double G = c.grad_bound;
  detail::replay_epochs(rec, p.dim(), [&](const EpochTrace& tr,
                                          const detail::EpochMatrices& em) {
    const int m = em.m();
    for (const auto& g : tr.grads)
      if (g.squaredNorm() > G * G * (1.0 + 1e-12)) return;  // increment cap

    std::vector<DenseSym> roots;
    roots.reserve(static_cast<std::size_t>(m));
    for (int i = 1; i <= m; ++i) roots.push_back(psd_sqrt_dense(em.matrix_at(i)));
    const double shift = std::sqrt(2.0 * m) * G;
    const int stride = m <= 8 ? 1 : m / 8;
    for (int i = 1; i <= m; i += stride) {
      for (int j = i; j <= m; j += stride) {
        const DenseSym bound = roots[static_cast<std::size_t>(i - 1)].plus_ridge(shift);
        const DenseSym diff = bound.minus(roots[static_cast<std::size_t>(j - 1)]);
        const double margin = lambda_min(diff);
        detail::fold(rep, margin,
                     !loewner_leq(roots[static_cast<std::size_t>(j - 1)], bound,
                                  detail::kCheckTol));
      }
    }

    const double lam1 = lambda_min(em.matrix_at(1));
    const double step_cap =
        tr.eta * tr.eta * std::min(1.0, G * G / lam1) + detail::kCheckTol;
    for (int i = 0; i < m; ++i) {
      const double step = (tr.iterates[static_cast<std::size_t>(i + 1)] -
                           tr.iterates[static_cast<std::size_t>(i)])
                              .squaredNorm();
      detail::fold(rep, step_cap - step, step > step_cap);
      const double drift = (tr.iterates[static_cast<std::size_t>(i)] -
                            tr.iterates[0])
                               .squaredNorm();
      const double drift_cap =
          tr.eta * tr.eta * i * i * std::min(1.0, G * G / lam1) + detail::kCheckTol;
      detail::fold(rep, drift_cap - drift, drift > drift_cap);
    }
  });
  rep.not_applicable = rep.instances == 0;
  return rep;
}

/// Monte-Carlo acceptance frequency of the shuffle gate at the 16n-threshold
/// against its analytic lower bound 1 - exp(-m^2 c_sigma^4 / (32 n^2 G^4)).
inline CheckReport check_gate_probability(const FiniteSumProblem& p,
                                          const Vector& x, int m, int trials,
                                          Rng& rng, const RunConstants& c) {
  if (trials < 100)
    throw ConfigError("check_gate_probability: need at least 100 trials");
  CheckReport rep;
  rep.check = "gate_probability";
  const double threshold =
      c.sigma_lower * c.sigma_lower * m * m / (16.0 * p.n());
  int hits = 0;
  for (int trial = 0; trial < trials; ++trial) {
    const EpochPartition part = shuffle_partition(p.n(), m, rng);
    double sigma = 0.0;
    for (const auto& batch : part.batches)
      sigma += p.batch_grad(batch, x).squaredNorm();
    if (sigma >= threshold) ++hits;
  }
  const double freq = static_cast<double>(hits) / trials;
  const double g4 = std::pow(c.grad_bound, 4.0);
  const double bound =
      1.0 - std::exp(-static_cast<double>(m) * m * std::pow(c.sigma_lower, 4.0) /
                     (32.0 * static_cast<double>(p.n()) * p.n() * g4));
  detail::fold(rep, freq - bound, freq < bound);
  return rep;
}

/// Informational ceiling on the weighted gradient metric from the explicit
/// convergence constants; loose by design, reported but never failing.
inline CheckReport check_metric_ceiling(const RunRecord& rec,
                                        const FiniteSumProblem& p,
                                        const RunConstants& c) {
  CheckReport rep;
  rep.check = "metric_ceiling_info";
  rep.informational = true;
  const double eta = rec.config.schedule.base;
  const double cap =
      c.sigma_lower * c.sigma_lower / (16.0 * c.n * c.smoothness * c.grad_bound);
  if (rec.config.schedule.kind != ScheduleKind::constant || eta > cap ||
      c.gamma < c.m || c.gamma > c.n || rec.rows.empty() || rec.traces.empty()) {
    rep.not_applicable = true;
    return rep;
  }
  const double T = static_cast<double>(rec.rows.size());
  const double L = c.smoothness, G = c.grad_bound, cs = c.sigma_lower;
  const double ck = c.kappa_bound;
  const double n = c.n, m = c.m, d = static_cast<double>(c.d), gam = c.gamma;
  const double f_gap =
      p.value(rec.traces.front().x_start) - p.value(rec.traces.back().iterates.back());

  const double c0 = 48.0 * G * ck * f_gap / cs * std::sqrt(n) / m * std::sqrt(d) *
                    std::sqrt(gam);
  const double c1 =
      72.0 * std::sqrt(2.0) * G * G * ck / cs * std::sqrt(n * m * d * gam);
  const double c2 = L * m;
  const double c3 = 128.0 * G * L * L * ck / (cs * cs) * n * m * std::sqrt(d) * gam +
                    3.0 * 2048.0 * G * G * G * ck / std::pow(cs, 4.0) * n * n / m *
                        std::sqrt(d) * gam * gam;
  const double c4 = 9.0 * 256.0 * std::sqrt(2.0) * std::pow(G, 4.0) * ck /
                    std::pow(cs, 3.0) * std::pow(n, 1.5) * std::pow(m, -1.5) *
                    std::sqrt(d) * std::pow(gam, 1.5);
  const double c5 = 4.0 * L * G / cs * std::sqrt(n * gam * d);

  const double bound = c0 / (eta * std::sqrt(T)) + c1 / std::sqrt(T) +
                       c2 * eta / std::sqrt(T) + c3 * eta * eta / std::sqrt(T) +
                       c4 * std::log(T) / std::sqrt(T) +
                       c5 * eta * std::log(T) / std::sqrt(T);
  const double realized = rec.rows.back().weighted_metric;
  detail::fold(rep, bound - realized, realized > bound);
  return rep;
}

}  // namespace shopt

#endif  // SHOPT_DIAGNOSTICS_HPP
