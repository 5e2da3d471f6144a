#ifndef SHOPT_LINALG_HPP
#define SHOPT_LINALG_HPP

#include <Eigen/Dense>
#include <cassert>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "shopt/common.hpp"

namespace shopt {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Symmetric dense matrix. Construction enforces symmetry bit-for-bit;
/// asymmetric input is rejected, never silently symmetrized.
class DenseSym {
 public:
  static DenseSym identity(Eigen::Index d) {
    check_dim(d);
    return DenseSym(Matrix::Identity(d, d));
  }

  static DenseSym zero(Eigen::Index d) {
    check_dim(d);
    return DenseSym(Matrix::Zero(d, d));
  }

  static DenseSym diagonal(const Vector& diag) {
    check_dim(diag.size());
    Matrix m = Matrix::Zero(diag.size(), diag.size());
    m.diagonal() = diag;
    return DenseSym(std::move(m));
  }

  /// Validates exact symmetry; throws ShapeError otherwise.
  static DenseSym from_matrix(Matrix m) {
    if (m.rows() != m.cols()) throw ShapeError("DenseSym: matrix not square");
    check_dim(m.rows());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < i; ++j)
        if (m(i, j) != m(j, i))
          throw ShapeError("DenseSym: matrix not exactly symmetric");
    return DenseSym(std::move(m));
  }

  /// Mirrors the lower triangle of m into the upper one.
  static DenseSym from_lower(const Matrix& m) {
    if (m.rows() != m.cols()) throw ShapeError("DenseSym: matrix not square");
    check_dim(m.rows());
    Matrix s(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      s(i, i) = m(i, i);
      for (Eigen::Index j = 0; j < i; ++j) s(i, j) = s(j, i) = m(i, j);
    }
    return DenseSym(std::move(s));
  }

  /// v v^T (exactly symmetric: scalar products commute).
  static DenseSym outer(const Vector& v) {
    check_dim(v.size());
    return DenseSym(Matrix(v * v.transpose()));
  }

  /// A A^T, mirrored from the lower triangle.
  static DenseSym gram(const Matrix& a) {
    check_dim(a.rows());
    return from_lower(Matrix(a * a.transpose()));
  }

  Eigen::Index dim() const { return m_.rows(); }
  const Matrix& mat() const { return m_; }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }

  DenseSym plus(const DenseSym& other) const {
    require_same_dim(other);
    return DenseSym(Matrix(m_ + other.m_));
  }

  DenseSym minus(const DenseSym& other) const {
    require_same_dim(other);
    return DenseSym(Matrix(m_ - other.m_));
  }

  DenseSym scaled(double a) const { return DenseSym(Matrix(a * m_)); }

  DenseSym plus_ridge(double c) const {
    Matrix m = m_;
    m.diagonal().array() += c;
    return DenseSym(std::move(m));
  }

  Vector apply(const Vector& v) const {
    if (v.size() != dim()) throw ShapeError("DenseSym::apply: length mismatch");
    return m_ * v;
  }

  double frobenius() const { return m_.norm(); }

  void require_same_dim(const DenseSym& other) const {
    if (other.dim() != dim()) throw ShapeError("DenseSym: dimension mismatch");
  }

 private:
  explicit DenseSym(Matrix m) : m_(std::move(m)) {}
  static void check_dim(Eigen::Index d) {
    if (d < 1) throw ShapeError("DenseSym: dimension must be >= 1");
  }
  Matrix m_;
};

/// Ordered gradient columns; one column per recorded iteration.
class GradMatrix {
 public:
  explicit GradMatrix(Eigen::Index dim) : dim_(dim) {
    if (dim < 1) throw ShapeError("GradMatrix: dimension must be >= 1");
  }

  void push_col(const Vector& g) {
    if (g.size() != dim_) throw ShapeError("GradMatrix: column length mismatch");
    cols_.push_back(g);
  }

  Eigen::Index dim() const { return dim_; }
  int cols() const { return static_cast<int>(cols_.size()); }
  const Vector& col(int j) const { return cols_.at(static_cast<std::size_t>(j)); }
  const std::vector<Vector>& columns() const { return cols_; }

  Matrix as_matrix() const {
    Matrix a(dim_, cols());
    for (int j = 0; j < cols(); ++j) a.col(j) = cols_[static_cast<std::size_t>(j)];
    return a;
  }

  double sum_squared_norms() const {
    double s = 0.0;
    for (const auto& c : cols_) s += c.squaredNorm();
    return s;
  }

 private:
  Eigen::Index dim_;
  std::vector<Vector> cols_;
};

struct SymEig {
  Vector eigvals;  // descending
  Matrix eigvecs;  // columns match eigvals
};

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
inline SymEig sym_eig(const DenseSym& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m.mat());
  if (es.info() != Eigen::Success)
    throw NumericError("sym_eig: eigensolver failed to converge at dim " +
                       std::to_string(m.dim()));
  SymEig out;
  out.eigvals = es.eigenvalues().reverse();
  out.eigvecs = es.eigenvectors().rowwise().reverse();
  return out;
}

inline double lambda_max(const DenseSym& m) { return sym_eig(m).eigvals(0); }
inline double lambda_min(const DenseSym& m) {
  return sym_eig(m).eigvals(m.dim() - 1);
}

namespace detail {

inline DenseSym spectral_map(const DenseSym& m, double floor,
                             double (*f)(double), const char* who) {
  SymEig eig = sym_eig(m);
  const double lmax = std::max(eig.eigvals(0), 0.0);
  Vector w(m.dim());
  bool any_live = false;
  for (Eigen::Index i = 0; i < m.dim(); ++i) {
    double lam = eig.eigvals(i);
    if (lam < -kPsdRelTol * lmax)
      throw NotPsdError(std::string(who) + ": eigenvalue " +
                        std::to_string(lam) + " below PSD tolerance");
    lam = std::max(lam, 0.0);
    if (lam > floor) {
      w(i) = f(lam);
      any_live = true;
    } else {
      w(i) = 0.0;
    }
  }
  if (!any_live && floor == 0.0)
    throw SingularError(std::string(who) + ": all eigenvalues at zero");
  return DenseSym::from_lower(
      Matrix(eig.eigvecs * w.asDiagonal() * eig.eigvecs.transpose()));
}

}  // namespace detail

/// M^{-1/2} on the eigenspace above `floor`; modes at or below the floor are
/// dropped (pseudo-inverse semantics).
inline DenseSym psd_inv_sqrt_dense(const DenseSym& m, double floor) {
  assert(floor >= 0.0);
  return detail::spectral_map(
      m, floor, [](double lam) { return 1.0 / std::sqrt(lam); },
      "psd_inv_sqrt_dense");
}

/// Principal square root with negative eigenvalues (within tolerance) clamped
/// to zero.
inline DenseSym psd_sqrt_dense(const DenseSym& m) {
  SymEig eig = sym_eig(m);
  const double lmax = std::max(eig.eigvals(0), 0.0);
  Vector w(m.dim());
  for (Eigen::Index i = 0; i < m.dim(); ++i) {
    double lam = eig.eigvals(i);
    if (lam < -kPsdRelTol * lmax)
      throw NotPsdError("psd_sqrt_dense: eigenvalue below PSD tolerance");
    w(i) = std::sqrt(std::max(lam, 0.0));
  }
  return DenseSym::from_lower(
      Matrix(eig.eigvecs * w.asDiagonal() * eig.eigvecs.transpose()));
}

/// Factorized PSD matrix U diag(s) U^T + c I with column-orthonormal U.
class LowRankPsd {
 public:
  LowRankPsd(Eigen::Index dim, Matrix basis, Vector eigs, double ridge)
      : dim_(dim), basis_(std::move(basis)), eigs_(std::move(eigs)), ridge_(ridge) {
    if (ridge_ <= 0.0) throw InvalidRidgeError("LowRankPsd: ridge must be positive");
    if (dim_ < 1) throw ShapeError("LowRankPsd: dimension must be >= 1");
    if (basis_.rows() != dim_ || basis_.cols() != eigs_.size() || eigs_.size() > dim_)
      throw ShapeError("LowRankPsd: basis/eigenvalue shape mismatch");
    for (Eigen::Index i = 0; i < eigs_.size(); ++i) {
      if (eigs_(i) < 0.0) throw NotPsdError("LowRankPsd: negative eigenvalue");
      if (i > 0 && eigs_(i) > eigs_(i - 1))
        throw ShapeError("LowRankPsd: eigenvalues not descending");
    }
    assert(basis_.cols() == 0 ||
           (basis_.transpose() * basis_ -
            Matrix::Identity(basis_.cols(), basis_.cols()))
                   .norm() < 1e-10);
  }

  Eigen::Index dim() const { return dim_; }
  Eigen::Index rank() const { return eigs_.size(); }
  double ridge() const { return ridge_; }
  const Matrix& basis() const { return basis_; }
  const Vector& eigs() const { return eigs_; }

  DenseSym densify() const {
    Matrix m = Matrix::Zero(dim_, dim_);
    if (rank() > 0) m = basis_ * eigs_.asDiagonal() * basis_.transpose();
    m.diagonal().array() += ridge_;
    return DenseSym::from_lower(m);
  }

 private:
  Eigen::Index dim_;
  Matrix basis_;
  Vector eigs_;
  double ridge_;
};

/// Factorizes A A^T + c I through the k-by-k Gram matrix A^T A; never forms a
/// d-by-d intermediate. Gram eigenvalues at or below 1e-12 * max fold into the
/// ridge subspace.
inline LowRankPsd gram_factorize(const GradMatrix& a, double c) {
  if (c <= 0.0) throw InvalidRidgeError("gram_factorize: ridge must be positive");
  const int k = a.cols();
  if (k == 0) return LowRankPsd(a.dim(), Matrix(a.dim(), 0), Vector(0), c);

  Matrix gram(k, k);
  for (int i = 0; i < k; ++i) {
    gram(i, i) = a.col(i).squaredNorm();
    for (int j = 0; j < i; ++j) gram(i, j) = gram(j, i) = a.col(i).dot(a.col(j));
  }
  SymEig eig = sym_eig(DenseSym::from_matrix(std::move(gram)));
  const double smax = std::max(eig.eigvals(0), 0.0);
  const double clamp = 1e-12 * smax;

  int kept = 0;
  while (kept < k && eig.eigvals(kept) > clamp) ++kept;

  Matrix basis(a.dim(), kept);
  Vector s(kept);
  const Matrix cols = a.as_matrix();
  for (int i = 0; i < kept; ++i) {
    s(i) = eig.eigvals(i);
    basis.col(i) = cols * eig.eigvecs.col(i) / std::sqrt(s(i));
  }
  // Gram eigenvalues near the clamp leave the mapped columns slightly
  // non-orthonormal; two Gram-Schmidt sweeps restore the basis invariant
  // while perturbing the represented matrix only at roundoff level.
  for (int pass = 0; pass < 2; ++pass) {
    for (int i = 0; i < kept; ++i) {
      for (int j = 0; j < i; ++j)
        basis.col(i) -= basis.col(j).dot(basis.col(i)) * basis.col(j);
      basis.col(i).normalize();
    }
  }
  return LowRankPsd(a.dim(), std::move(basis), std::move(s), c);
}

/// (U diag(s) U^T + c I)^{-1/2} v, exact for the represented matrix:
/// v / sqrt(c) + U [((s + c)^{-1/2} - c^{-1/2}) .* (U^T v)].
inline Vector apply_inv_sqrt(const LowRankPsd& p, const Vector& v) {
  if (v.size() != p.dim()) throw ShapeError("apply_inv_sqrt: length mismatch");
  const double rc = 1.0 / std::sqrt(p.ridge());
  Vector out = rc * v;
  if (p.rank() > 0) {
    Vector proj = p.basis().transpose() * v;
    for (Eigen::Index i = 0; i < p.rank(); ++i)
      proj(i) *= 1.0 / std::sqrt(p.eigs()(i) + p.ridge()) - rc;
    out += p.basis() * proj;
  }
  return out;
}

/// Loewner test M <= N: smallest eigenvalue of N - M must clear
/// -tol * (1 + spectral norm of the difference).
inline bool loewner_leq(const DenseSym& m, const DenseSym& n, double tol) {
  m.require_same_dim(n);
  SymEig eig = sym_eig(n.minus(m));
  const double lmin = eig.eigvals(eig.eigvals.size() - 1);
  const double lmax = eig.eigvals(0);
  const double scale = std::max(std::abs(lmin), std::abs(lmax));
  return lmin >= -tol * (1.0 + scale);
}

/// Inverse of (M + u v^T) given M^{-1}, by the rank-one correction formula.
/// The result is symmetric (and accepted) when u == v or either vector is 0.
inline DenseSym sherman_morrison_apply(const DenseSym& minv, const Vector& u,
                                       const Vector& v) {
  if (u.size() != minv.dim() || v.size() != minv.dim())
    throw ShapeError("sherman_morrison_apply: length mismatch");
  const Vector w = minv.mat() * u;
  const Vector z = minv.mat() * v;
  const double den = 1.0 + v.dot(w);
  if (std::abs(den) <= 1e-12)
    throw SingularError("sherman_morrison_apply: update denominator near zero");
  Matrix r = minv.mat() - (w * z.transpose()) / den;
  return DenseSym::from_matrix(std::move(r));
}

/// lambda_max / lambda_min of A^T A. Numerically rank-deficient input
/// (lambda_min <= 1e-10 * lambda_max) is rejected.
inline double condition_number(const GradMatrix& a) {
  const int k = a.cols();
  if (k < 1) throw ShapeError("condition_number: no columns");
  Matrix gram(k, k);
  for (int i = 0; i < k; ++i) {
    gram(i, i) = a.col(i).squaredNorm();
    for (int j = 0; j < i; ++j) gram(i, j) = gram(j, i) = a.col(i).dot(a.col(j));
  }
  SymEig eig = sym_eig(DenseSym::from_matrix(std::move(gram)));
  const double lmax = eig.eigvals(0);
  const double lmin = eig.eigvals(k - 1);
  if (lmin <= kRankRelTol * lmax || lmax <= 0.0)
    throw RankDeficientError("condition_number: columns numerically dependent");
  return lmax / lmin;
}

}  // namespace shopt

#endif  // SHOPT_LINALG_HPP
