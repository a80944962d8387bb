#pragma once

// Per-layer expert bookkeeping for task-level freezing: per-task utilization,
// routing-weighted input energy carried across tasks as historical importance,
// and the activation score that decides which experts sit out a task.

#include "stabmoe/moe.hpp"
#include "stabmoe/spectral.hpp"

#include <cstddef>
#include <cstdint>
#include <utility>

namespace stabmoe {

class ExpertStats {
 public:
  explicit ExpertStats(std::size_t n_experts);

  void begin_task();
  /// omegas: m x n routing weights; sq_norms: m squared input norms.
  void ingest(const Eigen::Ref<const Matrix>& omegas, const Eigen::Ref<const Vector>& sq_norms);
  void end_task();

  [[nodiscard]] std::size_t n_experts() const { return static_cast<std::size_t>(utilization_.size()); }
  [[nodiscard]] const Vector& utilization() const { return utilization_; }
  [[nodiscard]] std::uint64_t util_count() const { return util_count_; }
  [[nodiscard]] const Vector& sensitivity_cur() const { return sensitivity_cur_; }
  [[nodiscard]] const Vector& sensitivity_pre() const { return sensitivity_pre_; }
  /// Persists across tasks so the carried-forward importance keeps averaging.
  [[nodiscard]] std::uint64_t sens_count() const { return sens_count_; }
  [[nodiscard]] const ExpertMask& frozen() const { return frozen_; }
  void set_frozen(ExpertMask mask);

 private:
  Vector utilization_;
  std::uint64_t util_count_ = 0;
  Vector sensitivity_cur_;
  Vector sensitivity_pre_;
  std::uint64_t sens_count_ = 0;
  ExpertMask frozen_;
};

/// (v - min) / (max - min); a constant vector maps to all 0.5.
Vector normalize_minmax(const Eigen::Ref<const Vector>& values);

/// normalized U minus normalized F_pre, in [-1, 1].
Vector activation_scores(const ExpertStats& stats);

/// Score < tau for task_index >= 2 (1-based), nothing on task 1. If every
/// expert would freeze, the highest-scoring one stays trainable.
ExpertMask freeze_decide(const ExpertStats& stats, double tau_score, std::size_t task_index);

struct AgopCheck {
  double proxy = 0.0;  // d_out * mean ||x||^2
  double exact = 0.0;  // mean ||d(Wx)/d vec(W)||_F^2 by central differences
};

AgopCheck agop_proxy_check(const Expert& expert, const Eigen::Ref<const Matrix>& inputs);

}  // namespace stabmoe
