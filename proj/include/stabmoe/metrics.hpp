#pragma once

#include "stabmoe/spectral.hpp"

#include <cstddef>
#include <vector>

namespace stabmoe {

/// A(s, t): accuracy on task s after training through task t (0-based
/// storage, populated only for s <= t; the rest is NaN).
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks = 0);

  void set(std::size_t probe_task, std::size_t after_task, double value);
  [[nodiscard]] double at(std::size_t probe_task, std::size_t after_task) const;
  [[nodiscard]] bool populated(std::size_t probe_task, std::size_t after_task) const;
  [[nodiscard]] std::size_t tasks() const { return tasks_; }
  [[nodiscard]] std::size_t populated_count() const;
  /// Mean of the final column, A(s, T) over s.
  [[nodiscard]] double final_average() const;

 private:
  std::size_t tasks_;
  Matrix values_;
};

/// Base-2 Jensen-Shannon divergence, in [0, 1].
double js_divergence(const Eigen::Ref<const Vector>& p, const Eigen::Ref<const Vector>& q);

/// Shannon entropy divided by log(n), with 0 log 0 = 0.
double normalized_entropy(const Eigen::Ref<const Vector>& hist);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1)
};

MeanStd mean_std(const std::vector<double>& values);

}  // namespace stabmoe
