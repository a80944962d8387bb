#pragma once

// Continual training over a task stream with the three stabilizers switchable
// independently, plus evaluation, routing diagnostics and the re-routing probe
// (experts and readout frozen, router re-trained on the first task).

#include "stabmoe/gating.hpp"
#include "stabmoe/metrics.hpp"
#include "stabmoe/moe.hpp"
#include "stabmoe/spectral.hpp"
#include "stabmoe/stabilizers.hpp"
#include "stabmoe/stream.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

namespace stabmoe {

struct Toggles {
  bool router_stabilizer = true;
  bool expert_stabilizer = true;
  bool activation_gate = true;
};

struct TrainConfig {
  double eta_peak = 0.05;
  double warmup_ratio = 0.03;
  /// Cosine decay floor as a fraction of eta_peak.
  double min_lr_ratio = 0.1;
  double delta = 0.99;
  int window = 3;
  double mu_rel = 1e-3;
  double tau_score = -0.25;
  std::size_t epochs_per_task = 1;
  std::size_t batch_size = 16;
  /// Fraction of a task's batches observed before the freeze decision.
  double freeze_warmup_fraction = 0.1;
  /// Re-decide the frozen set every batch after warm-up instead of once.
  bool freeze_per_batch = false;
  std::size_t decompose_stride = 1;
  /// Inference-time routing restriction; 0 keeps dense routing.
  std::size_t top_k = 0;
  std::size_t probe_epochs = 1;
  Toggles toggles;
  std::uint64_t seed = 1;
};

/// Per-task learning rate: linear warm-up, then cosine decay to min_lr_ratio * peak.
double scheduled_eta(const TrainConfig& config, std::size_t step, std::size_t total_steps);
std::size_t batches_per_task(const TrainConfig& config, const TaskSpec& spec);

struct FreezeEvent {
  std::size_t task = 0;
  std::size_t layer = 0;
  std::size_t expert = 0;
  std::size_t frozen_at_batch = 0;
  std::uint64_t checksum_at_freeze = 0;
  std::uint64_t checksum_at_release = 0;
};

struct GatingRow {
  std::size_t task = 0;
  std::size_t layer = 0;
  Vector utilization;
  Vector sensitivity_pre;
  Vector scores;
  ExpertMask frozen;
};

struct TaskReport {
  std::size_t task = 0;
  std::size_t batches = 0;
  std::vector<double> batch_losses;
  std::vector<std::size_t> frozen_counts;  // per layer, at the freeze decision
  std::uint64_t skipped_expert_grads = 0;  // counted inside backward
  /// Sum over batches of the number of frozen experts in force during backward.
  std::uint64_t frozen_expert_batches = 0;
  std::size_t post_freeze_batches = 0;
  std::vector<FreezeEvent> freeze_events;
  std::vector<GatingRow> gating;
};

class ContinualLearner {
 public:
  ContinualLearner(MoeModel model, TrainConfig config);

  /// Trains the next task in order (1-based index = tasks_done() + 1).
  TaskReport train_task(const TaskSpec& spec);

  [[nodiscard]] const MoeModel& model() const { return model_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }
  [[nodiscard]] std::size_t tasks_done() const { return tasks_done_; }
  [[nodiscard]] const DriftLog& drift_log() const { return drift_; }
  [[nodiscard]] const StreamingCovariance& covariance(std::size_t layer) const {
    return covariances_.at(layer);
  }
  [[nodiscard]] const ExpertStats& stats(std::size_t layer) const { return stats_.at(layer); }
  [[nodiscard]] const std::vector<std::uint64_t>& base_checksums() const { return base_checksums_; }

 private:
  void begin_task();
  void end_task();

  MoeModel model_;
  TrainConfig config_;
  std::size_t tasks_done_ = 0;
  std::size_t global_step_ = 0;
  std::vector<StreamingCovariance> covariances_;
  std::vector<Matrix> history_moments_;               // C^{t-1}, frozen at task start
  std::vector<std::optional<DampedInverse>> inverses_;  // from history_moments_
  std::vector<std::optional<RouterUpdatePlan>> plans_;
  std::vector<ExpertStats> stats_;
  DriftLog drift_;
  std::vector<std::uint64_t> base_checksums_;
};

/// Test-split accuracy of each spec in order.
std::vector<double> evaluate(const MoeModel& model, const std::vector<TaskSpec>& specs,
                             std::size_t top_k = 0);
double accuracy(const MoeModel& model, const LabeledBatch& data, std::size_t top_k = 0);

double routing_drift(const MoeModel& model, const Eigen::Ref<const Vector>& reference_hist,
                     const Eigen::Ref<const Matrix>& probe_inputs, std::size_t layer);

struct ProbeResult {
  double accuracy = 0.0;
  /// Mean-over-layers normalized routing entropy on the probe test inputs,
  /// before re-training and after each epoch.
  std::vector<double> entropy_trace;
  std::size_t steps = 0;
};

/// Re-trains only the router of `snapshot_model` on the first task's training
/// split (stabilizers off, experts and readout frozen) and evaluates on its
/// test split.
ProbeResult rerouting_probe(const MoeModel& snapshot_model, const TaskSpec& task1,
                            const TrainConfig& config, std::size_t epochs);

struct RunSpec {
  StreamConfig stream;
  ModelShape model;
  TrainConfig train;
  bool probe_every_task = true;
  bool keep_snapshots = true;
};

struct RunMetrics {
  AccuracyMatrix accuracy;
  double final_average = 0.0;
  /// routing_histograms[checkpoint][probe_task][layer], probe_task <= checkpoint.
  std::vector<std::vector<std::vector<Vector>>> routing_histograms;
  /// entropy_trace[checkpoint][layer]: normalized entropy of task-1 routing.
  std::vector<std::vector<double>> entropy_trace;
  /// drift_trace[checkpoint][layer]: JS divergence of task-1 routing vs checkpoint 1.
  std::vector<std::vector<double>> drift_trace;
  DriftLog drift_log;
  std::vector<TaskReport> tasks;
  /// probes[checkpoint]; empty entries when not probed.
  std::vector<std::optional<ProbeResult>> probes;
  bool base_unchanged = true;

  /// Task-1 routing drift after the final task, averaged over layers.
  [[nodiscard]] double final_task1_drift() const;
};

struct RunResult {
  RunMetrics metrics;
  std::vector<std::vector<std::uint8_t>> snapshots;  // one per task
  std::vector<TaskSpec> specs;
};

RunResult run_stream(const RunSpec& spec);

}  // namespace stabmoe
