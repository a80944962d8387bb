#include "stabmoe/gating.hpp"

#include <cmath>
#include <stdexcept>

namespace stabmoe {

ExpertStats::ExpertStats(std::size_t n_experts) {
  if (n_experts == 0) throw std::invalid_argument("ExpertStats: need at least one expert");
  const auto n = static_cast<Index>(n_experts);
  utilization_ = Vector::Zero(n);
  sensitivity_cur_ = Vector::Zero(n);
  sensitivity_pre_ = Vector::Zero(n);
  frozen_.assign(n_experts, false);
}

void ExpertStats::begin_task() {
  utilization_.setZero();
  util_count_ = 0;
  sensitivity_cur_ = sensitivity_pre_;
  frozen_.assign(n_experts(), false);
}

void ExpertStats::ingest(const Eigen::Ref<const Matrix>& omegas,
                         const Eigen::Ref<const Vector>& sq_norms) {
  const auto n = static_cast<Index>(n_experts());
  if (omegas.cols() != n) throw std::invalid_argument("ExpertStats::ingest: expert count mismatch");
  if (omegas.rows() < 1) throw std::invalid_argument("ExpertStats::ingest: empty batch");
  if (sq_norms.size() != omegas.rows())
    throw std::invalid_argument("ExpertStats::ingest: one squared norm per sample required");
  if ((sq_norms.array() < 0.0).any() || !sq_norms.allFinite())
    throw std::invalid_argument("ExpertStats::ingest: squared norms must be finite and >= 0");

  const double m = static_cast<double>(omegas.rows());
  const double uc = static_cast<double>(util_count_);
  const double sc = static_cast<double>(sens_count_);
  const Vector weight_sum = omegas.colwise().sum().transpose();
  const Vector energy_sum = omegas.transpose() * sq_norms;
  utilization_ = (uc * utilization_ + weight_sum) / (uc + m);
  sensitivity_cur_ = (sc * sensitivity_cur_ + energy_sum) / (sc + m);
  util_count_ += static_cast<std::uint64_t>(omegas.rows());
  sens_count_ += static_cast<std::uint64_t>(omegas.rows());
}

void ExpertStats::end_task() {
  sensitivity_pre_ = sensitivity_cur_;
  frozen_.assign(n_experts(), false);
}

void ExpertStats::set_frozen(ExpertMask mask) {
  if (mask.size() != n_experts()) throw std::invalid_argument("ExpertStats: mask size mismatch");
  frozen_ = std::move(mask);
}

Vector normalize_minmax(const Eigen::Ref<const Vector>& values) {
  if (values.size() == 0) throw std::invalid_argument("normalize_minmax: empty input");
  const double lo = values.minCoeff();
  const double hi = values.maxCoeff();
  if (!(hi > lo)) return Vector::Constant(values.size(), 0.5);
  return ((values.array() - lo) / (hi - lo)).matrix();
}

Vector activation_scores(const ExpertStats& stats) {
  if (stats.util_count() == 0)
    throw std::logic_error("activation_scores: no samples ingested this task");
  return normalize_minmax(stats.utilization()) - normalize_minmax(stats.sensitivity_pre());
}

ExpertMask freeze_decide(const ExpertStats& stats, double tau_score, std::size_t task_index) {
  ExpertMask mask(stats.n_experts(), false);
  if (task_index < 2) return mask;
  const Vector scores = activation_scores(stats);
  bool any_active = false;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = scores(static_cast<Index>(i)) < tau_score;
    any_active = any_active || !mask[i];
  }
  if (!any_active) {
    Index best = 0;
    scores.maxCoeff(&best);
    mask[static_cast<std::size_t>(best)] = false;
  }
  return mask;
}

AgopCheck agop_proxy_check(const Expert& expert, const Eigen::Ref<const Matrix>& inputs) {
  if (inputs.rows() < 1) throw std::invalid_argument("agop_proxy_check: empty batch");
  const Matrix w = expert.b * expert.a;
  if (inputs.cols() != w.cols()) throw std::invalid_argument("agop_proxy_check: width mismatch");
  const double d_out = static_cast<double>(w.rows());
  constexpr double step = 1e-3;  // the map is linear in W, so only round-off matters

  AgopCheck out;
  for (Index s = 0; s < inputs.rows(); ++s) {
    const Vector x = inputs.row(s).transpose();
    out.proxy += d_out * x.squaredNorm();
    double frob = 0.0;
    Matrix perturbed = w;
    for (Index c = 0; c < w.cols(); ++c) {
      for (Index r = 0; r < w.rows(); ++r) {
        const double saved = perturbed(r, c);
        perturbed(r, c) = saved + step;
        const Vector up = perturbed * x;
        perturbed(r, c) = saved - step;
        const Vector down = perturbed * x;
        perturbed(r, c) = saved;
        frob += ((up - down) / (2.0 * step)).squaredNorm();
      }
    }
    out.exact += frob;
  }
  const double m = static_cast<double>(inputs.rows());
  out.proxy /= m;
  out.exact /= m;
  return out;
}

}  // namespace stabmoe
