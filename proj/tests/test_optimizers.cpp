#include <catch2/catch_amalgamated.hpp>

#include "shopt/optimizers.hpp"
#include "test_util.hpp"

using namespace shopt;

namespace {

FiniteSumProblem half_square() {
  // single instance f(x) = x^2 / 2 in one dimension
  return FiniteSumProblem(
      1, 1, [](int, const Vector& x) { return 0.5 * x(0) * x(0); },
      [](int, const Vector& x) -> Vector { return x; },
      json{{"name", "half_square"}});
}

OptimizerState make_state(Vector x, std::optional<GradientHistory> hist,
                          std::uint64_t seed) {
  return OptimizerState{std::move(x), std::move(hist), 0, Rng(seed)};
}

GradientHistory::Options hist_opts(Eigen::Index d, int m, double gamma) {
  GradientHistory::Options o;
  o.dim = d;
  o.batches_per_epoch = m;
  o.gamma = gamma;
  return o;
}

// Dense reference: forms the accumulated matrix explicitly and preconditions
// through a full eigendecomposition, independently of the history machinery.
std::vector<Vector> dense_reference_epoch(const FiniteSumProblem& p,
                                          const EpochPartition& part,
                                          const Vector& x0, double eta,
                                          double gamma, Matrix& acc,
                                          double& delta, bool adaptive) {
  std::vector<Vector> iterates{x0};
  Vector x = x0;
  for (const auto& batch : part.batches) {
    const Vector g = p.batch_grad(batch, x);
    acc += g * g.transpose();
    if (adaptive) delta += g.squaredNorm();
    Matrix m = acc + (delta / gamma) * Matrix::Identity(x.size(), x.size());
    Eigen::SelfAdjointEigenSolver<Matrix> es(m);
    Matrix inv_sqrt = es.eigenvectors() *
                      es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                      es.eigenvectors().transpose();
    x -= eta * (inv_sqrt * g);
    iterates.push_back(x);
  }
  return iterates;
}

}  // namespace

TEST_CASE("step_size schedules") {
  CHECK(step_size({ScheduleKind::inv_sqrt, 0.1}, 4) == Catch::Approx(0.05));
  CHECK(step_size({ScheduleKind::inv_cbrt, 1.0}, 8) == Catch::Approx(0.5));
  CHECK(step_size({ScheduleKind::constant, 0.1}, 999) == 0.1);
  CHECK_THROWS_AS(step_size({ScheduleKind::constant, 0.1}, 0), EpochError);
  CHECK_THROWS_AS(step_size({ScheduleKind::constant, -0.1}, 1), ConfigError);
}

TEST_CASE("shadagrad single-step hand computation") {
  const auto p = half_square();
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 1.0};
  cfg.batches = 1;
  cfg.gamma = 1.0;
  Vector x0(1);
  x0 << 2.0;
  auto st = make_state(x0, GradientHistory(hist_opts(1, 1, 1.0)), 5);
  const EpochTrace tr = shadagrad_epoch(p, st, cfg);
  // g = 2, delta = 4, accumulated matrix = 4 + 4 = 8
  CHECK(st.x(0) == Catch::Approx(2.0 - 2.0 / std::sqrt(8.0)));
  CHECK(tr.delta_after == Catch::Approx(4.0));
  CHECK(st.t == 1);
  CHECK(tr.grads.size() == 1);
  CHECK(tr.iterates.size() == 2);
}

TEST_CASE("shadagrad with zero step still accumulates") {
  const auto p = half_square();
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 0.0};
  cfg.batches = 1;
  Vector x0(1);
  x0 << 2.0;
  auto st = make_state(x0, GradientHistory(hist_opts(1, 1, 1.0)), 5);
  shadagrad_epoch(p, st, cfg);
  CHECK(st.x(0) == 2.0);
  CHECK(st.history->delta() == Catch::Approx(4.0));
}

TEST_CASE("shadagrad trajectory matches the dense reference") {
  const auto p = make_quartic_sigmoid(8, 5, 201);
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 0.05};
  cfg.batches = 4;
  cfg.gamma = 4.0;
  Rng rng(202);
  Vector x0 = rng.normal_vector(5);

  auto st = make_state(x0, GradientHistory(hist_opts(5, 4, 4.0)), 203);
  Matrix acc = Matrix::Zero(5, 5);
  double delta = 0.0;
  for (int e = 0; e < 3; ++e) {
    const Vector before = st.x;
    const EpochTrace tr = shadagrad_epoch(p, st, cfg);
    const auto ref = dense_reference_epoch(p, tr.partition, before, tr.eta,
                                           cfg.gamma, acc, delta, true);
    REQUIRE(ref.size() == tr.iterates.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK((ref[i] - tr.iterates[i]).norm() <= 1e-8 * (1.0 + ref[i].norm()));
  }
}

TEST_CASE("adagrad_f limit of a huge perturbation is rescaled sgd") {
  const auto p = make_quartic_sigmoid(4, 3, 204);
  const double delta0 = 1e12;
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 0.5};
  cfg.batches = 2;
  cfg.gamma = 1.0;
  cfg.fixed_delta = delta0;
  Rng rng(205);
  const Vector x0 = rng.normal_vector(3);

  auto st = make_state(x0, FixedPerturbHistory(hist_opts(3, 2, 1.0), delta0), 206);
  const EpochTrace tr = adagrad_f_epoch(p, st, cfg);

  // replay as plain sgd with the rescaled rate over the same partition
  Vector x = x0;
  const double rescale = 0.5 / std::sqrt(delta0);
  for (const auto& batch : tr.partition.batches)
    x -= rescale * p.batch_grad(batch, x);
  CHECK((x - st.x).norm() <= 1e-6);
}

TEST_CASE("adagrad_f single-step hand computation") {
  const auto p = half_square();
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 1.0};
  cfg.batches = 1;
  cfg.fixed_delta = 1.0;
  Vector x0(1);
  x0 << 2.0;
  auto st = make_state(x0, FixedPerturbHistory(hist_opts(1, 1, 1.0), 1.0), 5);
  adagrad_f_epoch(p, st, cfg);
  // g = 2, matrix = 4 + 1 = 5
  CHECK(st.x(0) == Catch::Approx(2.0 - 2.0 / std::sqrt(5.0)));
}

TEST_CASE("adagrad_f matches the dense reference") {
  const auto p = make_quartic_sigmoid(6, 4, 207);
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 0.1};
  cfg.batches = 3;
  cfg.gamma = 2.0;
  cfg.fixed_delta = 0.7;
  Rng rng(208);
  const Vector x0 = rng.normal_vector(4);
  auto st = make_state(x0, FixedPerturbHistory(hist_opts(4, 3, 2.0), 0.7), 209);
  Matrix acc = Matrix::Zero(4, 4);
  double delta = 0.7;
  for (int e = 0; e < 2; ++e) {
    const Vector before = st.x;
    const EpochTrace tr = adagrad_f_epoch(p, st, cfg);
    const auto ref = dense_reference_epoch(p, tr.partition, before, tr.eta,
                                           cfg.gamma, acc, delta, false);
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK((ref[i] - tr.iterates[i]).norm() <= 1e-8 * (1.0 + ref[i].norm()));
  }
}

TEST_CASE("adagrad_f requires a fixed delta and no gate") {
  const auto p = half_square();
  OptimizerConfig cfg;
  cfg.batches = 1;
  auto st = make_state(Vector::Ones(1), GradientHistory(hist_opts(1, 1, 1.0)), 5);
  CHECK_THROWS_AS(adagrad_f_epoch(p, st, cfg), ConfigError);
  cfg.gate.enabled = true;
  CHECK_THROWS_AS(sgd_epoch(p, st, cfg), ConfigError);
}

TEST_CASE("sgd steps") {
  const auto p = half_square();
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 0.5};
  cfg.batches = 1;
  auto st = make_state(Vector::Ones(1), std::nullopt, 5);
  sgd_epoch(p, st, cfg);
  CHECK(st.x(0) == Catch::Approx(0.5));

  cfg.schedule.base = 0.0;
  auto st2 = make_state(Vector::Ones(1), std::nullopt, 5);
  sgd_epoch(p, st2, cfg);
  CHECK(st2.x(0) == 1.0);
}

TEST_CASE("single-batch shuffled sgd is deterministic gradient descent") {
  const auto p = make_least_squares(5, 3, 210);
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 0.2};
  cfg.batches = 1;
  auto st = make_state(Vector::Zero(3), std::nullopt, 211);
  Vector x = Vector::Zero(3);
  for (int e = 0; e < 10; ++e) {
    sgd_epoch(p, st, cfg);
    x -= 0.2 * p.grad(x);
    CHECK((st.x - x).norm() == 0.0);
  }
}

TEST_CASE("run executes T epochs with exact evaluation accounting") {
  const auto p = make_quartic_sigmoid(8, 4, 212);
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 0.05};
  cfg.batches = 4;
  cfg.gamma = 4.0;
  cfg.gate.enabled = true;
  cfg.gate.divisor = 8.0;

  const RunRecord rec = run(p, Method::shadagrad, cfg, 5, 303);
  REQUIRE(rec.complete);
  REQUIRE(rec.rows.size() == 5);
  long long attempts = 0;
  for (const auto& r : rec.rows) {
    CHECK(r.gate_attempts >= 1);
    attempts += r.gate_attempts;
  }
  CHECK(rec.total_grad_evals == 5 * 4 + 4 * attempts);

  OptimizerConfig plain = cfg;
  plain.gate = GateConfig{};
  const RunRecord sgd_rec = run(p, Method::sgd, plain, 5, 303);
  CHECK(sgd_rec.total_grad_evals == 5 * 4);
}

TEST_CASE("run is deterministic") {
  const auto p = make_quartic_sigmoid(8, 4, 213);
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 0.1};
  cfg.batches = 2;
  cfg.gamma = 2.0;
  const RunRecord a = run(p, Method::shadagrad, cfg, 4, 99);
  const RunRecord b = run(p, Method::shadagrad, cfg, 4, 99);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].loss == b.rows[i].loss);
    CHECK(a.rows[i].grad_norm == b.rows[i].grad_norm);
    CHECK(a.rows[i].rgps_norm == b.rows[i].rgps_norm);
    CHECK(a.rows[i].weighted_metric == b.rows[i].weighted_metric);
    CHECK(a.rows[i].delta == b.rows[i].delta);
    CHECK(a.rows[i].kappa == b.rows[i].kappa);
  }
}

TEST_CASE("weighted metric of a constant-gradient problem is the constant") {
  // linear objective: every batch gradient equals v
  Vector v(2);
  v << 3.0, 4.0;
  const auto p = FiniteSumProblem(
      4, 2, [v](int, const Vector& x) { return v.dot(x); },
      [v](int, const Vector&) -> Vector { return v; }, json{{"name", "lin"}});
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 0.01};
  cfg.batches = 2;
  const RunRecord rec = run(p, Method::sgd, cfg, 6, 7);
  for (const auto& r : rec.rows)
    CHECK(r.weighted_metric == Catch::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("run records step and drift bounds") {
  const auto p = make_quartic_sigmoid(8, 4, 214);
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::inv_sqrt, 0.2};
  cfg.batches = 4;
  cfg.gamma = 4.0;
  const RunRecord rec = run(p, Method::shadagrad, cfg, 6, 31, true);
  REQUIRE(rec.traces.size() == 6);
  for (const auto& tr : rec.traces) {
    for (std::size_t i = 0; i + 1 < tr.iterates.size(); ++i) {
      CHECK((tr.iterates[i + 1] - tr.iterates[i]).norm() <= tr.eta + 1e-9);
      CHECK((tr.iterates[i] - tr.iterates[0]).norm() <=
            tr.eta * static_cast<double>(i) + 1e-9);
    }
  }
}

TEST_CASE("rgps stays within the smoothness drift bound") {
  const auto p = make_quartic_sigmoid(8, 4, 215);
  const double L = p.smoothness->value;
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 0.01};
  cfg.batches = 4;
  cfg.gamma = 4.0;
  const RunRecord rec = run(p, Method::shadagrad, cfg, 10, 33, true);
  for (const auto& tr : rec.traces) {
    Vector s = Vector::Zero(p.dim());
    for (const auto& g : tr.grads) s += g;
    s /= static_cast<double>(tr.grads.size());
    const double gap = (p.grad(tr.x_start) - s).norm();
    CHECK(gap <= L * tr.eta * (4 - 1) / 2.0 + 1e-9);
  }
}

TEST_CASE("run config validation") {
  const auto p = make_quartic_sigmoid(8, 4, 216);
  OptimizerConfig cfg;
  cfg.batches = 3;  // does not divide 8
  CHECK_THROWS_AS(run(p, Method::sgd, cfg, 1, 1), ConfigError);
  cfg.batches = 4;
  CHECK_THROWS_AS(run(p, Method::adagrad_f, cfg, 1, 1), ConfigError);
  cfg.gate.enabled = true;
  CHECK_THROWS_AS(run(p, Method::sgd, cfg, 1, 1), ConfigError);
  CHECK_THROWS_AS(run(p, Method::sgd, cfg, 0, 1), ConfigError);
}

TEST_CASE("theory mode warns instead of failing") {
  const auto p = make_quartic_sigmoid(8, 4, 217);
  OptimizerConfig cfg;
  cfg.schedule = {ScheduleKind::constant, 1.0};  // far above the analyzed cap
  cfg.batches = 4;
  cfg.gamma = 100.0;  // outside [m, n]
  cfg.theory_mode = true;
  const RunRecord rec = run(p, Method::shadagrad, cfg, 2, 11);
  REQUIRE(rec.manifest.contains("warnings"));
  CHECK(rec.manifest["warnings"].size() == 2);
  CHECK(rec.complete);
}
