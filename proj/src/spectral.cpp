#include "stabmoe/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace stabmoe {

StreamingCovariance::StreamingCovariance(Index dim) {
  if (dim < 1) throw std::invalid_argument("covariance dimension must be >= 1");
  moment_ = Matrix::Zero(dim, dim);
}

StreamingCovariance StreamingCovariance::from_state(Matrix moment, double count) {
  if (moment.rows() != moment.cols() || moment.rows() < 1)
    throw std::invalid_argument("covariance state must be a non-empty square matrix");
  if (!(count >= 0.0) || !std::isfinite(count))
    throw std::invalid_argument("covariance count must be finite and nonnegative");
  StreamingCovariance out(moment.rows());
  out.moment_ = std::move(moment);
  out.count_ = count;
  return out;
}

void StreamingCovariance::reset() {
  moment_.setZero();
  count_ = 0.0;
}

void StreamingCovariance::ingest(const Eigen::Ref<const Matrix>& batch) {
  if (batch.cols() != dim())
    throw std::invalid_argument("batch has " + std::to_string(batch.cols()) +
                                " columns, covariance expects " + std::to_string(dim()));
  if (batch.rows() < 1) throw std::invalid_argument("empty batch");
  if (!batch.allFinite()) throw std::domain_error("batch contains non-finite entries");

  const double n = static_cast<double>(batch.rows());
  const double total = count_ + n;
  Matrix outer = batch.transpose() * batch;
  // Fold as (count * C + sum x x^T) / total and re-symmetrize.
  moment_ = (count_ * moment_ + outer) / total;
  moment_ = 0.5 * (moment_ + moment_.transpose()).eval();
  count_ = total;
}

Vector smooth_values(const Eigen::Ref<const Vector>& values, int window) {
  if (values.size() == 0) throw std::invalid_argument("smooth_values: empty input");
  if (window < 1) throw std::invalid_argument("smooth_values: window must be >= 1");
  const Index n = values.size();
  Vector out(n);
  double running = 0.0;
  for (Index i = 0; i < n; ++i) {
    running += values(i);
    if (i >= window) running -= values(i - window);
    const Index width = std::min<Index>(i + 1, window);
    out(i) = running / static_cast<double>(width);
  }
  return out;
}

Vector scaling_profile(const Eigen::Ref<const Vector>& values,
                       const Eigen::Ref<const Vector>& smoothed) {
  if (values.size() != smoothed.size())
    throw std::invalid_argument("scaling_profile: length mismatch");
  for (Index i = 0; i < smoothed.size(); ++i) {
    if (!(smoothed(i) > 0.0))
      throw std::domain_error("scaling_profile: degenerate spectrum (zero smoothed value)");
  }
  return values.cwiseQuotient(smoothed);
}

Index energy_truncation_index(const Eigen::Ref<const Vector>& descending, double delta) {
  const double total = descending.sum();
  if (!(total > 0.0)) throw std::domain_error("energy_truncation_index: zero total energy");
  const double target = delta * total * (1.0 - kEnergyTolerance);
  double cumulative = 0.0;
  for (Index i = 0; i < descending.size(); ++i) {
    cumulative += descending(i);
    if (cumulative >= target) return i + 1;
  }
  return descending.size();
}

SpectralBasis decompose(const Eigen::Ref<const Matrix>& moment, double delta, int window) {
  if (moment.rows() != moment.cols() || moment.rows() < 1)
    throw std::invalid_argument("decompose: moment must be a non-empty square matrix");
  if (!(delta > 0.0 && delta <= 1.0))
    throw std::invalid_argument("decompose: delta must lie in (0, 1]");
  if (window < 1) throw std::invalid_argument("decompose: window must be >= 1");
  if (!moment.allFinite()) throw std::domain_error("decompose: non-finite moment");

  const Index d = moment.rows();
  SpectralBasis out;
  out.energy_threshold = delta;

  Eigen::SelfAdjointEigenSolver<Matrix> solver(moment);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("decompose: eigensolver failed to converge");

  // Eigen returns ascending order.
  out.values = solver.eigenvalues().reverse().cwiseMax(0.0);
  const Matrix vectors = solver.eigenvectors().rowwise().reverse();

  if (!(out.values.sum() > 0.0)) {
    out.degenerate = true;
    out.k = 1;
    const Matrix eye = Matrix::Identity(d, d);
    out.v_par = eye.leftCols(1);
    out.v_perp = eye.rightCols(d - 1);
    out.smoothed = Vector::Ones(1);
    out.scale = Vector::Ones(1);
    return out;
  }

  out.k = energy_truncation_index(out.values, delta);
  out.v_par = vectors.leftCols(out.k);
  out.v_perp = vectors.rightCols(d - out.k);
  // The trailing window only looks backwards, so smoothing the head is enough.
  out.smoothed = smooth_values(out.values.head(out.k), window);
  out.scale = scaling_profile(out.values.head(out.k), out.smoothed);
  return out;
}

SpectralBasis decompose(const StreamingCovariance& state, double delta, int window) {
  if (!(state.count() > 0.0)) throw std::domain_error("decompose: covariance has no data");
  return decompose(state.moment(), delta, window);
}

DampedInverse::DampedInverse(Matrix basis, const Eigen::Ref<const Vector>& values,
                             double damping)
    : basis_(std::move(basis)), damping_(damping) {
  if (!(damping > 0.0) || !std::isfinite(damping))
    throw std::invalid_argument("damped inverse: mu must be positive");
  if (values.size() != basis_.cols())
    throw std::invalid_argument("damped inverse: value count does not match basis rank");
  inv_values_ = (values.array().cwiseMax(0.0) + damping).inverse().matrix();
}

Vector DampedInverse::apply(const Eigen::Ref<const Vector>& x) const {
  if (x.size() != dim()) throw std::invalid_argument("damped inverse: dimension mismatch");
  const Vector coeff = basis_.transpose() * x;
  const Vector adjusted = coeff.cwiseProduct(inv_values_) - coeff / damping_;
  return x / damping_ + basis_ * adjusted;
}

Matrix DampedInverse::apply_right(const Eigen::Ref<const Matrix>& grad) const {
  if (grad.cols() != dim())
    throw std::invalid_argument("apply_right_inverse: gradient has " +
                                std::to_string(grad.cols()) + " columns, expected " +
                                std::to_string(dim()));
  // G Op = G / mu + (G V)(diag(1/(s+mu)) - 1/mu) V^T
  const Matrix projected = grad * basis_;
  const Vector correction = inv_values_.array() - 1.0 / damping_;
  return grad / damping_ + (projected * correction.asDiagonal()) * basis_.transpose();
}

Matrix DampedInverse::dense() const {
  const Index d = dim();
  const Vector correction = inv_values_.array() - 1.0 / damping_;
  return Matrix::Identity(d, d) / damping_ +
         basis_ * correction.asDiagonal() * basis_.transpose();
}

Matrix DampedInverse::dense_inverse() const {
  const Index d = dim();
  const Vector values = inv_values_.cwiseInverse();
  const Vector correction = values.array() - damping_;
  return Matrix::Identity(d, d) * damping_ +
         basis_ * correction.asDiagonal() * basis_.transpose();
}

DampedInverse damped_inverse(const SpectralBasis& basis, double mu) {
  return DampedInverse(basis.v_par, basis.values.head(basis.k), mu);
}

Matrix apply_right_inverse(const Eigen::Ref<const Matrix>& grad, const DampedInverse& inv) {
  return inv.apply_right(grad);
}

double relative_damping(const Eigen::Ref<const Matrix>& moment, double mu_rel) {
  if (!(mu_rel > 0.0)) throw std::invalid_argument("mu_rel must be positive");
  const double mean_eigenvalue = moment.trace() / static_cast<double>(moment.rows());
  return mean_eigenvalue > 0.0 ? mu_rel * mean_eigenvalue : mu_rel;
}

}  // namespace stabmoe
