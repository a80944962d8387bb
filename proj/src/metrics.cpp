#include "stabmoe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace stabmoe {

AccuracyMatrix::AccuracyMatrix(std::size_t tasks)
    : tasks_(tasks),
      values_(Matrix::Constant(static_cast<Index>(tasks), static_cast<Index>(tasks),
                               std::numeric_limits<double>::quiet_NaN())) {}

void AccuracyMatrix::set(std::size_t probe_task, std::size_t after_task, double value) {
  if (probe_task > after_task || after_task >= tasks_)
    throw std::out_of_range("AccuracyMatrix: entry defined only for probe <= after < T");
  values_(static_cast<Index>(probe_task), static_cast<Index>(after_task)) = value;
}

double AccuracyMatrix::at(std::size_t probe_task, std::size_t after_task) const {
  if (probe_task >= tasks_ || after_task >= tasks_)
    throw std::out_of_range("AccuracyMatrix: index out of range");
  return values_(static_cast<Index>(probe_task), static_cast<Index>(after_task));
}

bool AccuracyMatrix::populated(std::size_t probe_task, std::size_t after_task) const {
  return probe_task < tasks_ && after_task < tasks_ && !std::isnan(at(probe_task, after_task));
}

std::size_t AccuracyMatrix::populated_count() const {
  std::size_t count = 0;
  for (Index i = 0; i < values_.size(); ++i) count += std::isnan(values_.data()[i]) ? 0 : 1;
  return count;
}

double AccuracyMatrix::final_average() const {
  if (tasks_ == 0) throw std::logic_error("AccuracyMatrix: no tasks");
  double total = 0.0;
  for (std::size_t s = 0; s < tasks_; ++s) {
    if (!populated(s, tasks_ - 1)) throw std::logic_error("AccuracyMatrix: final row incomplete");
    total += at(s, tasks_ - 1);
  }
  return total / static_cast<double>(tasks_);
}

namespace {

void require_simplex(const Eigen::Ref<const Vector>& p, const char* where) {
  if (p.size() == 0 || (p.array() < -1e-12).any() || std::abs(p.sum() - 1.0) > 1e-9)
    throw std::invalid_argument(std::string(where) + ": input is not on the probability simplex");
}

double plogp2(double p) { return p > 0.0 ? p * std::log2(p) : 0.0; }

}  // namespace

double js_divergence(const Eigen::Ref<const Vector>& p, const Eigen::Ref<const Vector>& q) {
  require_simplex(p, "js_divergence");
  require_simplex(q, "js_divergence");
  if (p.size() != q.size()) throw std::invalid_argument("js_divergence: length mismatch");
  double js = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    const double pi = std::max(p(i), 0.0);
    const double qi = std::max(q(i), 0.0);
    const double mi = 0.5 * (pi + qi);
    js += 0.5 * (plogp2(pi) + plogp2(qi)) - plogp2(mi);
  }
  return std::clamp(js, 0.0, 1.0);
}

double normalized_entropy(const Eigen::Ref<const Vector>& hist) {
  require_simplex(hist, "normalized_entropy");
  if (hist.size() == 1) return 0.0;
  double h = 0.0;
  for (Index i = 0; i < hist.size(); ++i) h -= plogp2(std::max(hist(i), 0.0));
  return std::clamp(h / std::log2(static_cast<double>(hist.size())), 0.0, 1.0);
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(ss / (n - 1.0));
  }
  return out;
}

}  // namespace stabmoe
