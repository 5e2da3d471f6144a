#ifndef SHOPT_PROBLEMS_HPP
#define SHOPT_PROBLEMS_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "shopt/common.hpp"
#include "shopt/linalg.hpp"
#include "shopt/sampling.hpp"

namespace shopt {

using json = nlohmann::json;

/// A problem constant together with where it came from.
struct ConstantInfo {
  double value = 0.0;
  bool declared = false;  // false: estimated
};

/// Finite-sum objective f(x) = (1/n) sum_i f_i(x) with per-instance value and
/// gradient oracles. Instances are immutable after construction; evaluation is
/// pure and safe to call concurrently.
class FiniteSumProblem {
 public:
  using ValueFn = std::function<double(int, const Vector&)>;
  using GradFn = std::function<Vector(int, const Vector&)>;

  FiniteSumProblem(int n, Eigen::Index dim, ValueFn value, GradFn grad, json spec)
      : n_(n), dim_(dim), value_(std::move(value)), grad_(std::move(grad)),
        spec_(std::move(spec)) {
    if (n_ < 1) throw ConfigError("FiniteSumProblem: n must be >= 1");
    if (dim_ < 1) throw ConfigError("FiniteSumProblem: dim must be >= 1");
  }

  int n() const { return n_; }
  Eigen::Index dim() const { return dim_; }
  const json& spec() const { return spec_; }

  double component_value(int i, const Vector& x) const {
    check_index(i);
    check_point(x);
    return value_(i, x);
  }

  Vector component_grad(int i, const Vector& x) const {
    check_index(i);
    check_point(x);
    return grad_(i, x);
  }

  double value(const Vector& x) const {
    check_point(x);
    double s = 0.0;
    for (int i = 0; i < n_; ++i) s += value_(i, x);
    return s / n_;
  }

  Vector grad(const Vector& x) const {
    check_point(x);
    Vector g = Vector::Zero(dim_);
    for (int i = 0; i < n_; ++i) g += grad_(i, x);
    return g / n_;
  }

  /// Arithmetic mean of component gradients over the batch. Summation runs
  /// in sorted index order so a batch covering all instances reproduces the
  /// full gradient bit for bit.
  Vector batch_grad(const std::vector<int>& batch, const Vector& x) const {
    if (batch.empty()) throw ShapeError("batch_grad: empty batch");
    check_point(x);
    std::vector<int> order(batch);
    std::sort(order.begin(), order.end());
    Vector g = Vector::Zero(dim_);
    for (int i : order) {
      check_index(i);
      g += grad_(i, x);
    }
    return g / static_cast<double>(order.size());
  }

  std::optional<ConstantInfo> smoothness;   // L
  std::optional<ConstantInfo> grad_bound;   // G
  std::optional<ConstantInfo> sigma_lower;  // c_sigma

 private:
  void check_index(int i) const {
    if (i < 0 || i >= n_)
      throw ShapeError("FiniteSumProblem: instance index out of range");
  }
  void check_point(const Vector& x) const {
    if (x.size() != dim_) throw ShapeError("FiniteSumProblem: point length mismatch");
  }

  int n_;
  Eigen::Index dim_;
  ValueFn value_;
  GradFn grad_;
  json spec_;
};

namespace detail {

inline double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline double softplus(double t) {
  return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

}  // namespace detail

/// Non-convex testbed with globally bounded, Lipschitz component gradients:
/// f_i(x) = z^2 / (1 + z^2) with z = a_i.x - b_i and |a_i| <= 1. The saturating
/// shape gives |phi'| <= 0.65 and |phi''| <= 2, so bounds on G and L come for
/// free from the construction, no clipping involved.
inline FiniteSumProblem make_quartic_sigmoid(int n, Eigen::Index d,
                                             std::uint64_t seed,
                                             int distinct = 0) {
  if (distinct <= 0 || distinct > n) distinct = n;
  Rng rng(Rng::mix(seed, 0x5157u));
  auto features = std::make_shared<std::vector<Vector>>();
  auto offsets = std::make_shared<std::vector<double>>();
  double max_norm = 0.0;
  for (int i = 0; i < n; ++i) {
    if (i >= distinct) {
      // duplicated instances (degenerate test problems)
      features->push_back((*features)[static_cast<std::size_t>(i % distinct)]);
      offsets->push_back((*offsets)[static_cast<std::size_t>(i % distinct)]);
      continue;
    }
    Vector a = rng.normal_vector(d);
    const double target = 0.5 + 0.5 * rng.unit();  // norm in [0.5, 1]
    a *= target / std::max(a.norm(), 1e-300);
    max_norm = std::max(max_norm, a.norm());
    features->push_back(std::move(a));
    offsets->push_back(0.8 * rng.normal());
  }

  json spec = {{"name", "quartic_sigmoid"}, {"n", n}, {"d", d}, {"seed", seed}};
  if (distinct < n) spec["distinct"] = distinct;
  FiniteSumProblem p(
      n, d,
      [features, offsets](int i, const Vector& x) {
        const double z = (*features)[static_cast<std::size_t>(i)].dot(x) -
                         (*offsets)[static_cast<std::size_t>(i)];
        return z * z / (1.0 + z * z);
      },
      [features, offsets](int i, const Vector& x) -> Vector {
        const Vector& a = (*features)[static_cast<std::size_t>(i)];
        const double z = a.dot(x) - (*offsets)[static_cast<std::size_t>(i)];
        const double w = 1.0 + z * z;
        return (2.0 * z / (w * w)) * a;
      },
      std::move(spec));
  p.grad_bound = ConstantInfo{0.65 * max_norm, true};
  p.smoothness = ConstantInfo{2.0 * max_norm * max_norm, true};
  return p;
}

/// Convex sanity problem f_i(x) = (a_i.x - b_i)^2 / 2 with exact component
/// smoothness constant max_i |a_i|^2.
inline FiniteSumProblem make_least_squares(int n, Eigen::Index d,
                                           std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x1E57u));
  auto features = std::make_shared<std::vector<Vector>>();
  auto targets = std::make_shared<std::vector<double>>();
  const Vector ground_truth = rng.normal_vector(d);
  double max_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    Vector a = rng.normal_vector(d) / std::sqrt(static_cast<double>(d));
    max_sq = std::max(max_sq, a.squaredNorm());
    targets->push_back(a.dot(ground_truth) + 0.1 * rng.normal());
    features->push_back(std::move(a));
  }

  json spec = {{"name", "least_squares"}, {"n", n}, {"d", d}, {"seed", seed}};
  FiniteSumProblem p(
      n, d,
      [features, targets](int i, const Vector& x) {
        const double r = (*features)[static_cast<std::size_t>(i)].dot(x) -
                         (*targets)[static_cast<std::size_t>(i)];
        return 0.5 * r * r;
      },
      [features, targets](int i, const Vector& x) -> Vector {
        const Vector& a = (*features)[static_cast<std::size_t>(i)];
        const double r = a.dot(x) - (*targets)[static_cast<std::size_t>(i)];
        return r * a;
      },
      std::move(spec));
  p.smoothness = ConstantInfo{max_sq, true};
  return p;
}

/// Two-layer tanh perceptron on synthetic two-class data, per-example
/// cross-entropy, hand-coded backprop. Class clusters overlap on purpose so
/// per-instance gradients keep disagreeing even at a minimizer. Parameter
/// layout: [W1 row-major (hidden x d_in), b1, w2, b2].
inline FiniteSumProblem make_toy_mlp(int n, Eigen::Index d_in, int hidden,
                                     std::uint64_t seed) {
  if (hidden < 1) throw ConfigError("make_toy_mlp: hidden must be >= 1");
  Rng rng(Rng::mix(seed, 0x317Bu));
  Vector direction = rng.normal_vector(d_in);
  direction /= std::max(direction.norm(), 1e-300);

  auto inputs = std::make_shared<std::vector<Vector>>();
  auto labels = std::make_shared<std::vector<double>>();
  for (int i = 0; i < n; ++i) {
    const double y = static_cast<double>(i % 2);
    Vector x = rng.normal_vector(d_in) + (y > 0.5 ? 0.5 : -0.5) * direction;
    inputs->push_back(std::move(x));
    labels->push_back(y);
  }

  const Eigen::Index d = hidden * (d_in + 1) + hidden + 1;
  const Eigen::Index h = hidden;
  const auto w1_at = [d_in](Eigen::Index j) { return j * d_in; };
  const Eigen::Index b1_off = h * d_in;
  const Eigen::Index w2_off = b1_off + h;
  const Eigen::Index b2_off = w2_off + h;

  auto forward = [=](const Vector& theta, const Vector& x, Vector* act) {
    Vector hid(h);
    for (Eigen::Index j = 0; j < h; ++j)
      hid(j) = std::tanh(theta.segment(w1_at(j), d_in).dot(x) + theta(b1_off + j));
    const double logit = theta.segment(w2_off, h).dot(hid) + theta(b2_off);
    if (act) *act = hid;
    return logit;
  };

  json spec = {{"name", "toy_mlp"}, {"n", n}, {"d_in", d_in},
               {"hidden", hidden}, {"seed", seed}};
  return FiniteSumProblem(
      n, d,
      [=](int i, const Vector& theta) {
        const double o =
            forward(theta, (*inputs)[static_cast<std::size_t>(i)], nullptr);
        return detail::softplus(o) - (*labels)[static_cast<std::size_t>(i)] * o;
      },
      [=](int i, const Vector& theta) -> Vector {
        const Vector& x = (*inputs)[static_cast<std::size_t>(i)];
        Vector hid;
        const double o = forward(theta, x, &hid);
        const double go = detail::sigmoid(o) - (*labels)[static_cast<std::size_t>(i)];
        Vector g = Vector::Zero(theta.size());
        g(b2_off) = go;
        g.segment(w2_off, h) = go * hid;
        for (Eigen::Index j = 0; j < h; ++j) {
          const double gpre = go * theta(w2_off + j) * (1.0 - hid(j) * hid(j));
          g.segment(w1_at(j), d_in) = gpre * x;
          g(b1_off + j) = gpre;
        }
        return g;
      },
      std::move(spec));
}

inline FiniteSumProblem problem_from_json(const json& spec) {
  const std::string name = spec.at("name").get<std::string>();
  if (name == "quartic_sigmoid")
    return make_quartic_sigmoid(spec.at("n").get<int>(),
                                spec.at("d").get<Eigen::Index>(),
                                spec.at("seed").get<std::uint64_t>(),
                                spec.value("distinct", 0));
  if (name == "least_squares")
    return make_least_squares(spec.at("n").get<int>(),
                              spec.at("d").get<Eigen::Index>(),
                              spec.at("seed").get<std::uint64_t>());
  if (name == "toy_mlp")
    return make_toy_mlp(spec.at("n").get<int>(), spec.at("d_in").get<Eigen::Index>(),
                        spec.at("hidden").get<int>(),
                        spec.at("seed").get<std::uint64_t>());
  throw ConfigError("problem_from_json: unknown problem '" + name + "'");
}

/// Central-difference check of the analytic gradient. Returns the largest
/// coordinate-wise relative error with denominator max(1, |fd value|).
inline double fd_check(const FiniteSumProblem& p, const Vector& x,
                       double h = 1e-5) {
  if (h <= 0.0) throw ConfigError("fd_check: h must be positive");
  const Vector g = p.grad(x);
  double worst = 0.0;
  Vector probe = x;
  for (Eigen::Index j = 0; j < p.dim(); ++j) {
    probe(j) = x(j) + h;
    const double fp = p.value(probe);
    probe(j) = x(j) - h;
    const double fm = p.value(probe);
    probe(j) = x(j);
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - g(j)) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

struct EstimatedConstants {
  double smoothness = 0.0;   // L
  double grad_bound = 0.0;   // G
  double sigma_lower = 0.0;  // c_sigma
};

/// Sampled estimates: G from the max per-instance gradient norm, L from
/// difference quotients over probe pairs, c_sigma from the smallest observed
/// per-instance gradient variance (the assumption bounds variance from below,
/// so the minimum over probes is the faithful direction).
inline EstimatedConstants estimate_constants(const FiniteSumProblem& p,
                                             int samples, Rng& rng) {
  if (samples < 2)
    throw InsufficientSamplesError("estimate_constants: need at least 2 samples");
  std::vector<Vector> probes;
  probes.reserve(static_cast<std::size_t>(samples));
  for (int s = 0; s < samples; ++s) probes.push_back(rng.normal_vector(p.dim()));

  EstimatedConstants est;
  double min_var = std::numeric_limits<double>::infinity();
  std::vector<Vector> grads(static_cast<std::size_t>(p.n()));
  for (const Vector& x : probes) {
    Vector mean = Vector::Zero(p.dim());
    for (int i = 0; i < p.n(); ++i) {
      grads[static_cast<std::size_t>(i)] = p.component_grad(i, x);
      est.grad_bound =
          std::max(est.grad_bound, grads[static_cast<std::size_t>(i)].norm());
      mean += grads[static_cast<std::size_t>(i)];
    }
    mean /= p.n();
    double var = 0.0;
    for (int i = 0; i < p.n(); ++i)
      var += (grads[static_cast<std::size_t>(i)] - mean).squaredNorm();
    min_var = std::min(min_var, var / p.n());
  }
  est.sigma_lower = std::sqrt(min_var);

  for (std::size_t k = 0; k + 1 < probes.size(); ++k) {
    // one far pair and one short-range pair per probe
    const Vector& x = probes[k];
    Vector dir = rng.normal_vector(p.dim());
    dir /= std::max(dir.norm(), 1e-300);
    for (const Vector& y : {Vector(probes[k + 1]), Vector(x + 1e-3 * dir)}) {
      const double dist = (x - y).norm();
      if (dist <= 0.0) continue;
      for (int i = 0; i < p.n(); ++i) {
        const double ratio =
            (p.component_grad(i, x) - p.component_grad(i, y)).norm() / dist;
        est.smoothness = std::max(est.smoothness, ratio);
      }
    }
  }
  return est;
}

}  // namespace shopt

#endif  // SHOPT_PROBLEMS_HPP
