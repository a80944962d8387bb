#pragma once

// Deterministic synthetic continual-task stream: every task is a Gaussian
// mixture over a shared pool of class centroids, rotated by a task-specific
// orthogonal matrix whose angle grows with the shift strength.

#include "stabmoe/spectral.hpp"

#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

namespace stabmoe {

/// SplitMix64 as a standard uniform random bit generator; cheap to seed per
/// sample, which keeps sampling random-access.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

struct StreamConfig {
  std::size_t n_tasks = 4;
  Index input_dim = 16;
  Index classes = 4;
  double shift_strength = 0.7;
  double noise_std = 0.15;
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  /// Norm of every pool centroid.
  double centroid_radius = 1.0;
  /// Largest principal rotation angle (radians) at shift_strength = 1.
  double max_angle = std::numbers::pi / 2.0;
  std::uint64_t seed = 1;
};

enum class Split { Train, Test };

struct TaskSpec {
  std::size_t task_id = 0;  // 1-based
  Index classes = 0;
  Index input_dim = 0;
  Matrix centroids;  // classes x d, already rotated
  Matrix rotation;   // d x d orthogonal
  double noise_std = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t split_size(Split split) const {
    return split == Split::Train ? train_size : test_size;
  }
};

struct LabeledBatch {
  Matrix inputs;  // m x d
  std::vector<Index> labels;

  [[nodiscard]] std::size_t size() const { return labels.size(); }
};

std::vector<TaskSpec> make_stream(const StreamConfig& config);

/// Samples [cursor, cursor + batch_size) of a split, clipped at the split end.
LabeledBatch sample(const TaskSpec& spec, Split split, std::size_t batch_size,
                    std::size_t cursor);
LabeledBatch full_split(const TaskSpec& spec, Split split);

/// arccos(tr(Ra^T Rb) / d): an average rotation angle between two frames.
double rotation_angle(const Eigen::Ref<const Matrix>& ra, const Eigen::Ref<const Matrix>& rb);
double mean_consecutive_angle(const std::vector<TaskSpec>& specs);

}  // namespace stabmoe
