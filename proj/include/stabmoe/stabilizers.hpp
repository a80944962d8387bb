#pragma once

// Gradient transforms applied before parameter updates:
//  * router: split the raw gradient along the energy-truncated subspace of the
//    layer-input second moment, rescale inside the retained subspace, recombine;
//  * experts: right-precondition the input-facing LoRA factor with the damped
//    inverse of the historical second moment.
// Also the drift bookkeeping that pairs each step's learning rate with its
// dual variable and the degradation it realizes.

#include "stabmoe/moe.hpp"
#include "stabmoe/spectral.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace stabmoe {

struct RouterUpdatePlan {
  SpectralBasis basis;

  /// V_par diag(scale) V_par^T; tests and diagnostics only.
  [[nodiscard]] Matrix parallel_matrix() const;
  /// V_perp V_perp^T; tests and diagnostics only.
  [[nodiscard]] Matrix perpendicular_projector() const;
};

struct RouterComponents {
  Matrix parallel;
  Matrix perpendicular;
  [[nodiscard]] Matrix combined() const { return parallel + perpendicular; }
};

RouterComponents split_router_gradient(const Eigen::Ref<const Matrix>& grad,
                                       const RouterUpdatePlan& plan);

/// grad V_par g V_par^T + grad V_perp V_perp^T, via the factored forms.
Matrix project_router_gradient(const Eigen::Ref<const Matrix>& grad,
                               const RouterUpdatePlan& plan);

/// ||update V_perp V_perp^T x_old||: the routing-logit change an old input
/// sees through the perpendicular component.
double old_task_immunity_check(const Eigen::Ref<const Matrix>& update,
                               const Eigen::Ref<const Vector>& x_old,
                               const SpectralBasis& basis);
/// Same through the parallel component, ||update V_par V_par^T x||.
double parallel_response(const Eigen::Ref<const Matrix>& update,
                         const Eigen::Ref<const Vector>& x, const SpectralBasis& basis);

/// -eta * grad * Op(inv); a null `inv` means the preconditioner is bypassed.
Matrix precondition_expert_gradient(const Eigen::Ref<const Matrix>& grad,
                                    const DampedInverse* inv, double eta);

struct LoraStep {
  Matrix a;
  Matrix b;
};

/// A' = A - eta grad_A Op(inv), B' = B - eta grad_B.
LoraStep lora_chain_update(const MoeLayer& layer, std::size_t expert_index,
                           const Eigen::Ref<const Matrix>& grad_a,
                           const Eigen::Ref<const Matrix>& grad_b, const DampedInverse* inv,
                           double eta, const ExpertMask& frozen);

/// tr(dW C dW^T).
double degradation(const Eigen::Ref<const Matrix>& delta_w, const Eigen::Ref<const Matrix>& moment);

/// eta^2 tr(grad Op grad^T).
double realized_epsilon(const Eigen::Ref<const Matrix>& grad, const DampedInverse* inv, double eta);

/// lambda_t = 1 / (2 eta_t).
double coupled_lambda(double eta);

struct DriftRecord {
  std::size_t task = 0;   // 1-based
  std::size_t step = 0;   // global optimizer step
  std::size_t layer = 0;
  double eta = 0.0;
  double lambda = 0.0;
  double epsilon = 0.0;   // summed over the layer's trainable experts
};

class DriftLog {
 public:
  explicit DriftLog(std::size_t layers = 0, std::size_t experts = 0);

  void record(const DriftRecord& row);
  void add_degradation(std::size_t layer, std::size_t expert, double value);

  [[nodiscard]] const std::vector<DriftRecord>& rows() const { return rows_; }
  [[nodiscard]] double cumulative_degradation(std::size_t layer, std::size_t expert) const;
  [[nodiscard]] const std::vector<std::vector<double>>& degradation_table() const {
    return cumulative_;
  }

 private:
  std::vector<DriftRecord> rows_;
  std::vector<std::vector<double>> cumulative_;
};

}  // namespace stabmoe
