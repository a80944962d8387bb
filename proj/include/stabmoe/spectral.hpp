#pragma once

// Streaming input statistics and the spectral objects derived from them:
// the energy-truncated subspace split, the rescaling profile applied inside
// the retained subspace, and the damped pseudo-inverse used to precondition
// expert updates.

#include <Eigen/Dense>

#include <cstddef>
#include <optional>

namespace stabmoe {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Relative slack used when comparing a cumulative energy fraction against
/// the threshold, so that analytically exact splits survive eigen-solver
/// round-off.
inline constexpr double kEnergyTolerance = 1e-12;

/// Uncentered second moment E[x x^T] accumulated over a stream of batches.
class StreamingCovariance {
 public:
  explicit StreamingCovariance(Index dim);

  /// Folds a batch (one sample per row) into the running moment.
  void ingest(const Eigen::Ref<const Matrix>& batch);
  void reset();

  [[nodiscard]] Index dim() const { return moment_.rows(); }
  [[nodiscard]] const Matrix& moment() const { return moment_; }
  [[nodiscard]] double count() const { return count_; }
  [[nodiscard]] double trace() const { return moment_.trace(); }

  /// Rebuilds a tracker from persisted state (used by snapshots).
  static StreamingCovariance from_state(Matrix moment, double count);

 private:
  Matrix moment_;
  double count_ = 0.0;
};

struct SpectralBasis {
  Vector values;  // descending, clamped to >= 0
  Index k = 0;
  Matrix v_par;   // d x k
  Matrix v_perp;  // d x (d - k)
  Vector smoothed;
  Vector scale;
  double energy_threshold = 1.0;
  bool degenerate = false;

  [[nodiscard]] Index dim() const { return v_par.rows(); }
};

/// Trailing mean over `window` entries, truncated at the start of the range.
Vector smooth_values(const Eigen::Ref<const Vector>& values, int window);

/// Element-wise values / smoothed.
Vector scaling_profile(const Eigen::Ref<const Vector>& values,
                       const Eigen::Ref<const Vector>& smoothed);

/// Smallest k whose leading eigenvalue mass reaches `delta` of the total.
/// Requires a positive total.
Index energy_truncation_index(const Eigen::Ref<const Vector>& descending, double delta);

SpectralBasis decompose(const Eigen::Ref<const Matrix>& moment, double delta, int window);
SpectralBasis decompose(const StreamingCovariance& state, double delta, int window);

/// Operator V_k (S_k + mu I)^-1 V_k^T + (1/mu)(I - V_k V_k^T), kept factored.
class DampedInverse {
 public:
  DampedInverse(Matrix basis, const Eigen::Ref<const Vector>& values, double damping);

  [[nodiscard]] Index dim() const { return basis_.rows(); }
  [[nodiscard]] Index rank() const { return basis_.cols(); }
  [[nodiscard]] double damping() const { return damping_; }
  [[nodiscard]] const Matrix& basis() const { return basis_; }
  [[nodiscard]] const Vector& inv_values() const { return inv_values_; }

  [[nodiscard]] Vector apply(const Eigen::Ref<const Vector>& x) const;
  /// grad * Op, for grad with dim() columns.
  [[nodiscard]] Matrix apply_right(const Eigen::Ref<const Matrix>& grad) const;
  /// Dense d x d form of the operator; diagnostics and tests only.
  [[nodiscard]] Matrix dense() const;
  /// Dense form of the operator's inverse, V_k (S_k + mu) V_k^T + mu (I - V_k V_k^T).
  [[nodiscard]] Matrix dense_inverse() const;

 private:
  Matrix basis_;
  Vector inv_values_;
  double damping_;
};

DampedInverse damped_inverse(const SpectralBasis& basis, double mu);

Matrix apply_right_inverse(const Eigen::Ref<const Matrix>& grad, const DampedInverse& inv);

/// Absolute damping mu = mu_rel * trace / d, falling back to mu_rel for an
/// all-zero moment.
double relative_damping(const Eigen::Ref<const Matrix>& moment, double mu_rel);

}  // namespace stabmoe
