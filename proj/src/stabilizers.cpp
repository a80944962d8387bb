#include "stabmoe/stabilizers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace stabmoe {

namespace {

void require_columns(const Eigen::Ref<const Matrix>& grad, Index d, const char* where) {
  if (grad.cols() != d)
    throw std::invalid_argument(std::string(where) + ": gradient has " +
                                std::to_string(grad.cols()) + " columns, expected " +
                                std::to_string(d));
}

}  // namespace

Matrix RouterUpdatePlan::parallel_matrix() const {
  return basis.v_par * basis.scale.asDiagonal() * basis.v_par.transpose();
}

Matrix RouterUpdatePlan::perpendicular_projector() const {
  return basis.v_perp * basis.v_perp.transpose();
}

RouterComponents split_router_gradient(const Eigen::Ref<const Matrix>& grad,
                                       const RouterUpdatePlan& plan) {
  const auto& b = plan.basis;
  require_columns(grad, b.dim(), "project_router_gradient");
  RouterComponents out;
  out.parallel = ((grad * b.v_par) * b.scale.asDiagonal()) * b.v_par.transpose();
  out.perpendicular = (grad * b.v_perp) * b.v_perp.transpose();
  return out;
}

Matrix project_router_gradient(const Eigen::Ref<const Matrix>& grad,
                               const RouterUpdatePlan& plan) {
  return split_router_gradient(grad, plan).combined();
}

double old_task_immunity_check(const Eigen::Ref<const Matrix>& update,
                               const Eigen::Ref<const Vector>& x_old,
                               const SpectralBasis& basis) {
  require_columns(update, basis.dim(), "old_task_immunity_check");
  if (x_old.size() != basis.dim())
    throw std::invalid_argument("old_task_immunity_check: input dimension mismatch");
  return (update * (basis.v_perp * (basis.v_perp.transpose() * x_old))).norm();
}

double parallel_response(const Eigen::Ref<const Matrix>& update,
                         const Eigen::Ref<const Vector>& x, const SpectralBasis& basis) {
  require_columns(update, basis.dim(), "parallel_response");
  if (x.size() != basis.dim())
    throw std::invalid_argument("parallel_response: input dimension mismatch");
  return (update * (basis.v_par * (basis.v_par.transpose() * x))).norm();
}

Matrix precondition_expert_gradient(const Eigen::Ref<const Matrix>& grad,
                                    const DampedInverse* inv, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("precondition_expert_gradient: eta must be > 0");
  if (inv == nullptr) return -eta * grad;
  require_columns(grad, inv->dim(), "precondition_expert_gradient");
  return -eta * inv->apply_right(grad);
}

LoraStep lora_chain_update(const MoeLayer& layer, std::size_t expert_index,
                           const Eigen::Ref<const Matrix>& grad_a,
                           const Eigen::Ref<const Matrix>& grad_b, const DampedInverse* inv,
                           double eta, const ExpertMask& frozen) {
  if (expert_index >= layer.n_experts())
    throw std::invalid_argument("lora_chain_update: expert index out of range");
  if (!frozen.empty() && frozen.at(expert_index))
    throw std::logic_error("lora_chain_update: expert " + std::to_string(expert_index) +
                           " is frozen");
  const auto& e = layer.experts[expert_index];
  if (grad_a.rows() != e.a.rows() || grad_a.cols() != e.a.cols() ||
      grad_b.rows() != e.b.rows() || grad_b.cols() != e.b.cols())
    throw std::invalid_argument("lora_chain_update: gradient shape mismatch");
  LoraStep out;
  out.a = e.a + precondition_expert_gradient(grad_a, inv, eta);
  out.b = e.b - eta * grad_b;
  return out;
}

double degradation(const Eigen::Ref<const Matrix>& delta_w,
                   const Eigen::Ref<const Matrix>& moment) {
  if (moment.rows() != moment.cols() || delta_w.cols() != moment.rows())
    throw std::invalid_argument("degradation: shape mismatch");
  const double scale = std::max(moment.norm(), 1e-300);
  if ((moment - moment.transpose()).norm() > 1e-10 * scale)
    throw std::domain_error("degradation: moment is not symmetric");
  const double value = (delta_w * moment).cwiseProduct(delta_w).sum();
  return std::max(0.0, value);
}

double realized_epsilon(const Eigen::Ref<const Matrix>& grad, const DampedInverse* inv,
                        double eta) {
  if (eta == 0.0) return 0.0;
  const double quad = inv == nullptr ? grad.squaredNorm()
                                     : inv->apply_right(grad).cwiseProduct(grad).sum();
  return eta * eta * std::max(0.0, quad);
}

double coupled_lambda(double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("coupled_lambda: eta must be > 0");
  return 1.0 / (2.0 * eta);
}

DriftLog::DriftLog(std::size_t layers, std::size_t experts)
    : cumulative_(layers, std::vector<double>(experts, 0.0)) {}

void DriftLog::record(const DriftRecord& row) {
  if (!std::isfinite(row.epsilon) || row.epsilon < 0.0 || !(row.lambda > 0.0))
    throw std::domain_error("DriftLog: invalid entry");
  rows_.push_back(row);
}

void DriftLog::add_degradation(std::size_t layer, std::size_t expert, double value) {
  if (!std::isfinite(value) || value < 0.0)
    throw std::domain_error("DriftLog: invalid degradation");
  cumulative_.at(layer).at(expert) += value;
}

double DriftLog::cumulative_degradation(std::size_t layer, std::size_t expert) const {
  return cumulative_.at(layer).at(expert);
}

}  // namespace stabmoe
