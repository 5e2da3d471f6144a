#ifndef SHOPT_SAMPLING_HPP
#define SHOPT_SAMPLING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "shopt/common.hpp"
#include "shopt/linalg.hpp"

namespace shopt {

/// Deterministic random stream. Draw helpers avoid std::*_distribution so the
/// stream is reproducible across standard libraries, not just across runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Unbiased uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  /// Uniform double in [0, 1).
  double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; one spare value cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = unit();
    while (u1 <= 0.0) u1 = unit();
    const double u2 = unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  Vector normal_vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  /// Derived independent stream; `salt` separates uses of one seed.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed ^ (salt + 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// m index batches over n instances. Shuffled partitions are pairwise disjoint
/// and cover {0..n-1}; uniform batches are drawn with replacement and waive
/// disjointness.
struct EpochPartition {
  int n = 0;
  int m = 0;
  std::vector<std::vector<int>> batches;

  bool disjoint_cover() const {
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    std::size_t total = 0;
    for (const auto& b : batches) {
      total += b.size();
      for (int i : b) {
        if (i < 0 || i >= n || seen[static_cast<std::size_t>(i)]) return false;
        seen[static_cast<std::size_t>(i)] = true;
      }
    }
    return total == static_cast<std::size_t>(n);
  }
};

namespace detail {
inline void check_divides(int n, int m) {
  if (n < 1 || m < 1) throw ConfigError("partition: n and m must be positive");
  if (n % m != 0)
    throw ConfigError("partition: batch count " + std::to_string(m) +
                      " does not divide instance count " + std::to_string(n));
}
}  // namespace detail

/// Fisher-Yates permutation of {0..n-1} split into m consecutive blocks.
inline EpochPartition shuffle_partition(int n, int m, Rng& rng) {
  detail::check_divides(n, m);
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  EpochPartition part;
  part.n = n;
  part.m = m;
  const int bs = n / m;
  part.batches.resize(static_cast<std::size_t>(m));
  for (int b = 0; b < m; ++b)
    part.batches[static_cast<std::size_t>(b)].assign(
        perm.begin() + static_cast<std::ptrdiff_t>(b) * bs,
        perm.begin() + static_cast<std::ptrdiff_t>(b + 1) * bs);
  return part;
}

/// m batches of size n/m sampled i.i.d. uniformly with replacement.
inline EpochPartition uniform_batches(int n, int m, Rng& rng) {
  detail::check_divides(n, m);
  EpochPartition part;
  part.n = n;
  part.m = m;
  const int bs = n / m;
  part.batches.resize(static_cast<std::size_t>(m));
  for (auto& batch : part.batches) {
    batch.resize(static_cast<std::size_t>(bs));
    for (int& idx : batch)
      idx = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
  }
  return part;
}

struct GateResult {
  EpochPartition partition;
  int attempts = 0;
  double sigma_p = 0.0;
  std::vector<Vector> grads_at_start;  // batch gradients backing sigma_p
};

/// Resamples partitions until the summed squared batch-gradient norms at the
/// epoch's start point clear `threshold`. Each attempt costs one gradient
/// evaluation per batch.
inline GateResult rejection_gate(
    const std::function<Vector(const std::vector<int>&)>& grad_at_start,
    const std::function<EpochPartition()>& partition_source, double threshold,
    int max_attempts) {
  if (threshold < 0.0) throw ConfigError("rejection_gate: negative threshold");
  if (max_attempts < 1) throw ConfigError("rejection_gate: max_attempts must be >= 1");
  double best = -1.0;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    GateResult res;
    res.partition = partition_source();
    res.attempts = attempt;
    res.sigma_p = 0.0;
    res.grads_at_start.reserve(res.partition.batches.size());
    for (const auto& batch : res.partition.batches) {
      res.grads_at_start.push_back(grad_at_start(batch));
      res.sigma_p += res.grads_at_start.back().squaredNorm();
    }
    if (res.sigma_p >= threshold) return res;
    best = std::max(best, res.sigma_p);
  }
  throw GateExhaustedError(
      "rejection_gate: no partition cleared threshold " +
          std::to_string(threshold) + " in " + std::to_string(max_attempts) +
          " attempts (best " + std::to_string(best) + ")",
      best, max_attempts);
}

}  // namespace shopt

#endif  // SHOPT_SAMPLING_HPP
