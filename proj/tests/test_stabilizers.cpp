#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "stabmoe/stabilizers.hpp"

#include <random>

using namespace stabmoe;

namespace {

Matrix random_orthonormal(Index d, std::mt19937_64& rng) {
  Eigen::HouseholderQR<Matrix> qr(oracle::random_matrix(d, d, rng));
  return qr.householderQ() * Matrix::Identity(d, d);
}

// A basis with an arbitrary split and scaling, bypassing decompose.
SpectralBasis manual_basis(const Matrix& q, Index k, const Vector& scale) {
  SpectralBasis b;
  b.k = k;
  b.v_par = q.leftCols(k);
  b.v_perp = q.rightCols(q.cols() - k);
  b.scale = scale;
  b.values = Vector::Ones(q.cols());
  b.smoothed = Vector::Ones(q.cols());
  return b;
}

double trace_inner(const Matrix& a, const Matrix& b) { return (a.array() * b.array()).sum(); }

DampedInverse exact_inverse(const Matrix& c, double mu) { return damped_inverse(decompose(c, 1.0, 3), mu); }

}  // namespace

TEST_CASE("router projection: worked examples") {
  const Matrix id = Matrix::Identity(2, 2);
  Matrix grad(1, 2);
  grad << 3, 5;
  RouterUpdatePlan plan{manual_basis(id, 1, Vector::Ones(1))};
  CHECK((project_router_gradient(grad, plan) - grad).norm() < 1e-15);
  plan.basis.scale(0) = 0.5;
  const Matrix half = project_router_gradient(grad, plan);
  CHECK(half(0, 0) == 1.5);
  CHECK(half(0, 1) == 5.0);
  CHECK_THROWS_AS(project_router_gradient(Matrix::Zero(1, 3), plan), std::invalid_argument);
}

TEST_CASE("router projection matches the dense formula") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const Index d = 2 + static_cast<Index>(rng() % 7), n = 1 + static_cast<Index>(rng() % 5);
    const Index k = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(d));
    const Matrix q = random_orthonormal(d, rng);
    const Vector g = oracle::random_matrix(k, 1, rng).cwiseAbs();
    const RouterUpdatePlan plan{manual_basis(q, k, g)};
    const Matrix grad = oracle::random_matrix(n, d, rng);

    Matrix par_dense = Matrix::Zero(d, d), perp_dense = Matrix::Zero(d, d);
    for (Index i = 0; i < k; ++i) par_dense += g(i) * q.col(i) * q.col(i).transpose();
    for (Index i = k; i < d; ++i) perp_dense += q.col(i) * q.col(i).transpose();
    const Matrix expect = grad * par_dense + grad * perp_dense;
    CHECK(oracle::rel_fro(project_router_gradient(grad, plan), expect) < 1e-12);
    CHECK((plan.parallel_matrix() - par_dense).norm() < 1e-12);

    const Matrix p = plan.perpendicular_projector();
    CHECK((p * p - p).norm() < 1e-10);

    const RouterComponents parts = split_router_gradient(grad, plan);
    CHECK(std::abs(trace_inner(parts.parallel, parts.perpendicular)) < 1e-10);
    CHECK(oracle::rel_fro(parts.combined(), expect) < 1e-12);
  }
}

TEST_CASE("router projection: identity recovery") {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 10; ++trial) {
    const Index d = 3 + static_cast<Index>(rng() % 5);
    const Matrix c = oracle::random_psd(d, rng);
    SpectralBasis b = decompose(c, 1.0, 3);
    b.scale = Vector::Ones(b.k);
    const RouterUpdatePlan plan{b};
    CHECK((plan.parallel_matrix() + plan.perpendicular_projector() - Matrix::Identity(d, d)).norm() < 1e-10);
    const Matrix grad = oracle::random_matrix(4, d, rng);
    CHECK(oracle::rel_fro(project_router_gradient(grad, plan), grad) < 1e-10);

    SpectralBasis partial = decompose(c, 0.6, 3);
    partial.scale = Vector::Ones(partial.k);
    const RouterUpdatePlan flat{partial};
    CHECK(oracle::rel_fro(project_router_gradient(grad, flat), grad) < 1e-10);
  }
}

TEST_CASE("old-task immunity") {
  std::mt19937_64 rng(33);
  const Matrix q = random_orthonormal(5, rng);
  const SpectralBasis b = manual_basis(q, 2, Vector::Ones(2));
  const Matrix update = oracle::random_matrix(3, 5, rng);
  const Vector in_par = q.col(0) * 1.3 - q.col(1) * 0.4;
  const Vector in_perp = q.col(3) * 2.0 + q.col(4);
  CHECK(old_task_immunity_check(update, in_par, b) <= 1e-10);
  CHECK(parallel_response(update, in_perp, b) <= 1e-10);
  CHECK(old_task_immunity_check(update, in_perp, b) > 0.1);
  CHECK_THROWS_AS(old_task_immunity_check(update, Vector::Zero(4), b), std::invalid_argument);
}

TEST_CASE("old-task immunity: energy bound over historical samples") {
  std::mt19937_64 rng(34);
  const Index d = 8;
  // Strongly anisotropic history: a few dominant directions.
  const Matrix q = random_orthonormal(d, rng);
  Vector sd(d);
  sd << 5, 3, 2, 0.2, 0.1, 0.05, 0.05, 0.02;
  Matrix samples(400, d);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Index r = 0; r < samples.rows(); ++r) {
    Vector z(d);
    for (Index i = 0; i < d; ++i) z(i) = sd(i) * n(rng);
    samples.row(r) = (q * z).transpose();
  }
  StreamingCovariance cov(d);
  cov.ingest(samples);
  const SpectralBasis b = decompose(cov, 0.99, 3);
  const Matrix update = oracle::random_matrix(4, d, rng);
  double mean_sq = 0.0;
  for (Index r = 0; r < samples.rows(); ++r) {
    const double v = old_task_immunity_check(update, samples.row(r).transpose(), b);
    mean_sq += v * v;
  }
  mean_sq /= static_cast<double>(samples.rows());
  Eigen::JacobiSVD<Matrix> svd(update);
  const double op2 = svd.singularValues()(0) * svd.singularValues()(0);
  const double bound = op2 * (1.0 - 0.99) * cov.trace();
  CHECK(mean_sq <= bound * (1 + 1e-10));
  CHECK(mean_sq > 0.0);
}

TEST_CASE("expert preconditioning: worked examples") {
  Matrix c(2, 2);
  c << 4, 0, 0, 1;
  const DampedInverse inv = exact_inverse(c, 0.01);
  Matrix g(1, 2);
  g << 1, 1;
  const Matrix step = precondition_expert_gradient(g, &inv, 1.0);
  CHECK(step(0, 0) == doctest::Approx(-1.0 / 4.01).epsilon(1e-14));
  CHECK(step(0, 1) == doctest::Approx(-1.0 / 1.01).epsilon(1e-14));
  CHECK(precondition_expert_gradient(Matrix::Zero(3, 2), &inv, 0.5).isZero(0.0));
  CHECK((precondition_expert_gradient(g, nullptr, 0.1) + 0.1 * g).norm() == 0.0);
  CHECK_THROWS_AS(precondition_expert_gradient(g, &inv, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(precondition_expert_gradient(Matrix::Zero(1, 3), &inv, 0.1), std::invalid_argument);
}

TEST_CASE("expert preconditioning satisfies stationarity") {
  std::mt19937_64 rng(35);
  for (int trial = 0; trial < 20; ++trial) {
    const Index d = 2 + static_cast<Index>(rng() % 8);
    const Matrix c = oracle::random_psd(d, rng, 1 + static_cast<Index>(rng() % d));
    const double mu = relative_damping(c, 1e-2);
    const DampedInverse inv = damped_inverse(decompose(c, 0.9, 3), mu);
    const double eta = 0.01 + 0.5 * std::uniform_real_distribution<double>(0, 1)(rng);
    const Matrix g = oracle::random_matrix(3, d, rng);
    const Matrix step = precondition_expert_gradient(g, &inv, eta);
    const Matrix residual = g + 2.0 * coupled_lambda(eta) * step * inv.dense_inverse();
    CHECK(residual.norm() < 1e-8 * std::max(1.0, g.norm()));
  }
}

TEST_CASE("expert preconditioning minimizes degradation for a fixed loss decrease") {
  std::mt19937_64 rng(36);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index d = 2 + static_cast<Index>(rng() % 5), out = 1 + static_cast<Index>(rng() % 3);
    const Matrix c = oracle::random_psd(d, rng);
    const DampedInverse inv = exact_inverse(c, relative_damping(c, 1e-3));
    const Matrix metric = inv.dense_inverse();
    const Matrix g = oracle::random_matrix(out, d, rng);
    const Matrix step = precondition_expert_gradient(g, &inv, 0.3);
    const double target = trace_inner(g, step);
    const Matrix best = oracle::min_degradation_step(g, metric, target);
    const double got = degradation(step, metric), opt = degradation(best, metric);
    CHECK(got >= opt * (1 - 1e-9));
    worst = std::max(worst, (got - opt) / opt);
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("expert preconditioning damps high-variance directions") {
  Matrix c(2, 2);
  c << 100.0, 0, 0, 0.01;
  const DampedInverse inv = exact_inverse(c, relative_damping(c, 1e-3));
  Matrix g(1, 2);
  g << 1, 1;
  const Matrix step = precondition_expert_gradient(g, &inv, 0.1);
  CHECK(std::abs(step(0, 0)) < std::abs(step(0, 1)));
}

TEST_CASE("LoRA chain update") {
  std::mt19937_64 rng(37);
  ModelShape shape;
  shape.input_dim = 6;
  shape.width = 6;
  shape.n_experts = 3;
  shape.rank = 2;
  MoeModel m = make_model(shape, 5);
  MoeLayer& layer = m.layers[0];
  for (auto& e : layer.experts) {
    e.a = oracle::random_matrix(2, 6, rng);
    e.b = oracle::random_matrix(6, 2, rng);
  }
  const ExpertMask open(3, false);
  const Matrix ga = oracle::random_matrix(2, 6, rng), gb = oracle::random_matrix(6, 2, rng);

  const LoraStep plain = lora_chain_update(layer, 1, ga, gb, nullptr, 0.2, open);
  CHECK((plain.a - (layer.experts[1].a - 0.2 * ga)).norm() == 0.0);
  CHECK((plain.b - (layer.experts[1].b - 0.2 * gb)).norm() == 0.0);

  const LoraStep still = lora_chain_update(layer, 0, Matrix::Zero(2, 6), Matrix::Zero(6, 2), nullptr, 0.2, open);
  CHECK(still.a == layer.experts[0].a);
  CHECK(still.b == layer.experts[0].b);

  const Matrix c = oracle::random_psd(6, rng);
  const DampedInverse inv = damped_inverse(decompose(c, 0.9, 3), relative_damping(c, 0.1));
  const double eta = 1e-6;
  const Expert& e = layer.experts[2];
  const LoraStep s = lora_chain_update(layer, 2, ga, gb, &inv, eta, open);
  CHECK((s.b - (e.b - eta * gb)).norm() == 0.0);
  const Matrix first_order = (-eta * gb) * e.a + e.b * (-eta * (ga * inv.dense()));
  const Matrix actual = s.b * s.a - e.b * e.a;
  CHECK(oracle::rel_fro(actual, first_order) < 1e-5);

  ExpertMask frozen = open;
  frozen[2] = true;
  CHECK_THROWS_AS(lora_chain_update(layer, 2, ga, gb, &inv, eta, frozen), std::logic_error);
  CHECK_THROWS_AS(lora_chain_update(layer, 7, ga, gb, &inv, eta, open), std::invalid_argument);
}

TEST_CASE("degradation: closed forms and the empirical-moment identity") {
  std::mt19937_64 rng(38);
  const Matrix dw = oracle::random_matrix(3, 4, rng);
  CHECK(degradation(Matrix::Zero(3, 4), Matrix::Identity(4, 4)) == 0.0);
  CHECK(degradation(dw, Matrix::Identity(4, 4)) == doctest::Approx(dw.squaredNorm()).epsilon(1e-14));

  const Matrix xs = oracle::random_matrix(50, 4, rng, 1.7);
  const Matrix moment = oracle::pooled_moment({xs});
  double mc = 0.0;
  for (Index r = 0; r < xs.rows(); ++r) mc += (dw * xs.row(r).transpose()).squaredNorm();
  mc /= static_cast<double>(xs.rows());
  CHECK(std::abs(degradation(dw, moment) - mc) < 1e-10 * std::max(1.0, mc));

  Matrix skew = Matrix::Identity(4, 4);
  skew(0, 1) = 1.0;
  CHECK_THROWS_AS(degradation(dw, skew), std::domain_error);
  CHECK_THROWS_AS(degradation(dw, Matrix::Identity(3, 3)), std::invalid_argument);
}

TEST_CASE("realized epsilon") {
  std::mt19937_64 rng(39);
  const Matrix c = oracle::random_psd(5, rng);
  const DampedInverse inv = exact_inverse(c, 1e-10);
  const Matrix g = oracle::random_matrix(2, 5, rng);
  CHECK(realized_epsilon(Matrix::Zero(2, 5), &inv, 0.1) == 0.0);
  CHECK(realized_epsilon(g, &inv, 0.0) == 0.0);
  for (double eta : {1e-3, 0.05, 0.7}) {
    const double eps = realized_epsilon(g, &inv, eta);
    const double deg = degradation(precondition_expert_gradient(g, &inv, eta), c);
    CHECK(std::abs(eps - deg) <= 1e-6 * deg);
  }
  CHECK(realized_epsilon(g, nullptr, 0.5) == doctest::Approx(0.25 * g.squaredNorm()).epsilon(1e-14));
}

TEST_CASE("dual variable coupling") {
  std::mt19937_64 rng(40);
  std::uniform_real_distribution<double> u(1e-6, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double eta = u(rng);
    // One rounding in the reciprocal and one in the product.
    CHECK(std::abs(coupled_lambda(eta) * eta - 0.5) <= std::numeric_limits<double>::epsilon());
  }
  CHECK_THROWS_AS(coupled_lambda(0.0), std::invalid_argument);
}

TEST_CASE("drift log") {
  DriftLog log(2, 3);
  log.record({1, 0, 0, 0.1, coupled_lambda(0.1), 0.02});
  log.record({1, 0, 1, 0.1, coupled_lambda(0.1), 0.0});
  log.add_degradation(1, 2, 0.5);
  log.add_degradation(1, 2, 0.25);
  CHECK(log.rows().size() == 2);
  CHECK(log.cumulative_degradation(1, 2) == 0.75);
  CHECK(log.cumulative_degradation(0, 0) == 0.0);
  for (const auto& r : log.rows()) CHECK(std::abs(r.lambda * r.eta - 0.5) <= std::numeric_limits<double>::epsilon());
  CHECK_THROWS_AS(log.record({1, 1, 0, 0.1, 5.0, -1.0}), std::domain_error);
  CHECK_THROWS_AS(log.add_degradation(0, 0, std::numeric_limits<double>::infinity()), std::domain_error);
  CHECK_THROWS_AS(log.add_degradation(0, 0, -0.1), std::domain_error);
}
