#ifndef SHOPT_HISTORY_HPP
#define SHOPT_HISTORY_HPP

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "shopt/common.hpp"
#include "shopt/linalg.hpp"

namespace shopt {

/// Accumulated gradient history: per-epoch column blocks, the adaptive
/// perturbation delta (running sum of squared gradient norms), the scaling
/// gamma, and a factorization of the implied outer-product-plus-ridge matrix
/// kept in sync on every push.
///
/// The factorization takes the thin Gram route while the column count stays
/// below the dimension and switches to a dense eigendecomposition of the
/// d-by-d accumulator afterwards, so long runs keep working. Single-owner
/// mutable state; not safe for concurrent mutation.
class GradientHistory {
 public:
  struct Options {
    Eigen::Index dim = 0;
    int batches_per_epoch = 0;  // m
    double gamma = 1.0;
    // Literal one-epoch reading of the update rule: only the live epoch's
    // columns enter the factorization (delta still accumulates globally).
    bool per_epoch_lowrank = false;
    Eigen::Index max_columns = 0;  // 0 -> 10 * dim
  };

  explicit GradientHistory(Options opt) : GradientHistory(opt, std::nullopt) {}

  void push_gradient(const Vector& g) {
    if (g.size() != dim_) throw ShapeError("push_gradient: length mismatch");
    if (!g.allFinite()) throw NumericError("push_gradient: non-finite gradient");
    if (live_count() >= m_)
      throw EpochError("push_gradient: epoch already holds " +
                       std::to_string(m_) + " columns; seal it first");
    if (cols_.cols() + 1 > max_columns_)
      throw CapacityError("push_gradient: column cap " +
                          std::to_string(max_columns_) +
                          " reached; raise Options::max_columns");
    cols_.push_col(g);
    if (!fixed_delta_) delta_ += g.squaredNorm();
    outer_sum_ += g * g.transpose();
    refresh_factorization();
#ifndef NDEBUG
    debug_check_factorization();
#endif
  }

  /// Applies the inverse square root of the current accumulated matrix
  /// (including any gradient already pushed this iteration).
  Vector precondition(const Vector& g) const {
    if (ridge() <= 0.0)
      throw SingularError("precondition: delta is zero, matrix singular");
    return apply_inv_sqrt(*fact_, g);
  }

  void seal_epoch() {
    if (live_count() != m_)
      throw EpochError("seal_epoch: live epoch has " +
                       std::to_string(live_count()) + " of " +
                       std::to_string(m_) + " columns");
    ++sealed_;
    if (per_epoch_lowrank_) {
      outer_sum_.setZero();
      refresh_factorization();
    }
  }

  Eigen::Index dim() const { return dim_; }
  int batches_per_epoch() const { return m_; }
  double gamma() const { return gamma_; }
  double delta() const { return delta_; }
  double ridge() const { return delta_ / gamma_; }
  bool has_fixed_delta() const { return fixed_delta_; }
  bool per_epoch_lowrank() const { return per_epoch_lowrank_; }
  Eigen::Index max_columns() const { return max_columns_; }
  int sealed_epochs() const { return sealed_; }
  int total_columns() const { return cols_.cols(); }
  int live_count() const { return cols_.cols() - sealed_ * m_; }
  const GradMatrix& all_columns() const { return cols_; }

  /// Columns of sealed epoch t (1-based).
  GradMatrix epoch_columns(int t) const {
    if (t < 1 || t > sealed_) throw EpochError("epoch_columns: index out of range");
    GradMatrix out(dim_);
    for (int j = (t - 1) * m_; j < t * m_; ++j) out.push_col(cols_.col(j));
    return out;
  }

  GradMatrix live_columns() const {
    GradMatrix out(dim_);
    for (int j = sealed_ * m_; j < cols_.cols(); ++j) out.push_col(cols_.col(j));
    return out;
  }

  /// Sum of squared gradient norms recorded in sealed epoch t; equals the
  /// delta increase across that epoch under the adaptive schedule.
  double epoch_delta_increment(int t) const {
    if (t < 1 || t > sealed_)
      throw EpochError("epoch_delta_increment: index out of range");
    double s = 0.0;
    for (int j = (t - 1) * m_; j < t * m_; ++j) s += cols_.col(j).squaredNorm();
    return s;
  }

  const LowRankPsd& factorization() const {
    if (!fact_) throw SingularError("factorization: delta is zero");
    return *fact_;
  }

  nlohmann::json to_json() const {
    nlohmann::json cols = nlohmann::json::array();
    for (int j = 0; j < cols_.cols(); ++j) {
      const Vector& c = cols_.col(j);
      cols.push_back(std::vector<double>(c.data(), c.data() + c.size()));
    }
    return {{"dim", dim_},
            {"m", m_},
            {"gamma", gamma_},
            {"delta", delta_},
            {"delta_mode", fixed_delta_ ? "fixed" : "adaptive"},
            {"per_epoch_lowrank", per_epoch_lowrank_},
            {"max_columns", max_columns_},
            {"sealed_epochs", sealed_},
            {"columns", std::move(cols)}};
  }

  static GradientHistory from_json(const nlohmann::json& j);

 protected:
  GradientHistory(Options opt, std::optional<double> fixed_delta)
      : dim_(opt.dim),
        m_(opt.batches_per_epoch),
        gamma_(opt.gamma),
        per_epoch_lowrank_(opt.per_epoch_lowrank),
        max_columns_(opt.max_columns > 0 ? opt.max_columns : 10 * opt.dim),
        fixed_delta_(fixed_delta.has_value()),
        delta_(fixed_delta.value_or(0.0)),
        cols_(opt.dim),
        outer_sum_(Matrix::Zero(opt.dim, opt.dim)) {
    if (dim_ < 1) throw ConfigError("GradientHistory: dim must be >= 1");
    if (m_ < 1) throw ConfigError("GradientHistory: batches_per_epoch must be >= 1");
    if (gamma_ <= 0.0) throw ConfigError("GradientHistory: gamma must be positive");
    if (delta_ < 0.0) throw ConfigError("GradientHistory: delta must be >= 0");
    refresh_factorization();
  }

 private:
  void refresh_factorization() {
    const double c = ridge();
    if (c <= 0.0) {
      fact_.reset();
      return;
    }
    const int k = per_epoch_lowrank_ ? live_count() : cols_.cols();
    if (k < dim_) {
      if (per_epoch_lowrank_) {
        fact_ = gram_factorize(live_columns(), c);
      } else {
        fact_ = gram_factorize(cols_, c);
      }
    } else {
      fact_ = dense_factorize(c);
    }
  }

  LowRankPsd dense_factorize(double c) const {
    SymEig eig = sym_eig(DenseSym::from_matrix(outer_sum_));
    const double clamp = 1e-12 * std::max(eig.eigvals(0), 0.0);
    Eigen::Index kept = 0;
    while (kept < dim_ && eig.eigvals(kept) > clamp) ++kept;
    return LowRankPsd(dim_, eig.eigvecs.leftCols(kept), eig.eigvals.head(kept), c);
  }

#ifndef NDEBUG
  void debug_check_factorization() const {
    if (!fact_ || dim_ > 128) return;
    Matrix ref = outer_sum_;
    ref.diagonal().array() += ridge();
    const double err = (fact_->densify().mat() - ref).norm();
    assert(err <= 1e-8 * (1.0 + ref.norm()));
  }
#endif

  Eigen::Index dim_;
  int m_;
  double gamma_;
  bool per_epoch_lowrank_;
  Eigen::Index max_columns_;
  bool fixed_delta_;
  double delta_;
  GradMatrix cols_;
  Matrix outer_sum_;  // columns feeding the factorization only
  int sealed_ = 0;
  std::optional<LowRankPsd> fact_;
};

/// History whose perturbation is frozen at construction; pushes still record
/// columns but never move delta.
class FixedPerturbHistory : public GradientHistory {
 public:
  FixedPerturbHistory(Options opt, double delta0)
      : GradientHistory(opt, delta0) {}
};

inline GradientHistory GradientHistory::from_json(const nlohmann::json& j) {
  Options opt;
  opt.dim = j.at("dim").get<Eigen::Index>();
  opt.batches_per_epoch = j.at("m").get<int>();
  opt.gamma = j.at("gamma").get<double>();
  opt.per_epoch_lowrank = j.at("per_epoch_lowrank").get<bool>();
  opt.max_columns = j.at("max_columns").get<Eigen::Index>();
  const bool fixed = j.at("delta_mode").get<std::string>() == "fixed";
  GradientHistory hist(opt, fixed ? std::optional<double>(j.at("delta").get<double>())
                                  : std::nullopt);
  const int sealed = j.at("sealed_epochs").get<int>();
  int pushed = 0;
  for (const auto& col : j.at("columns")) {
    const auto values = col.get<std::vector<double>>();
    hist.push_gradient(Eigen::Map<const Vector>(values.data(),
                                                static_cast<Eigen::Index>(values.size())));
    ++pushed;
    if (hist.live_count() == opt.batches_per_epoch && hist.sealed_epochs() < sealed)
      hist.seal_epoch();
  }
  (void)pushed;
  return hist;
}

/// Column mean of one epoch's gradients (the epoch-mean perturbation
/// sequence).
inline Vector rgps(const GradMatrix& epoch_grads, int m) {
  if (epoch_grads.cols() != m)
    throw ShapeError("rgps: expected " + std::to_string(m) + " columns, got " +
                     std::to_string(epoch_grads.cols()));
  Vector s = Vector::Zero(epoch_grads.dim());
  for (int j = 0; j < m; ++j) s += epoch_grads.col(j);
  return s / static_cast<double>(m);
}

}  // namespace shopt

#endif  // SHOPT_HISTORY_HPP
