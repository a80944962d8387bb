#include "stabmoe/stream.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace stabmoe {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  SplitMix64 g(a ^ (b * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
  g();
  return g();
}

namespace {

Matrix gaussian(Index rows, Index cols, SplitMix64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

// Cayley map of a skew-symmetric generator scaled so the largest principal
// angle equals `angle`.
Matrix random_rotation(Index d, double angle, SplitMix64& rng) {
  const Matrix eye = Matrix::Identity(d, d);
  if (angle == 0.0 || d < 2) return eye;
  const Matrix g = gaussian(d, d, rng);
  const Matrix skew = 0.5 * (g - g.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(skew.transpose() * skew, Eigen::EigenvaluesOnly);
  const double spectral = std::sqrt(std::max(solver.eigenvalues().maxCoeff(), 0.0));
  if (!(spectral > 0.0)) return eye;
  const Matrix s = (std::tan(angle / 2.0) / spectral) * skew;
  return (eye - s).partialPivLu().solve(eye + s);
}

}  // namespace

std::vector<TaskSpec> make_stream(const StreamConfig& config) {
  if (config.n_tasks < 1) throw std::invalid_argument("make_stream: n_tasks must be >= 1");
  if (config.input_dim < 1) throw std::invalid_argument("make_stream: input_dim must be >= 1");
  if (config.classes < 2) throw std::invalid_argument("make_stream: classes must be >= 2");
  if (!(config.shift_strength >= 0.0 && config.shift_strength <= 1.0))
    throw std::invalid_argument("make_stream: shift_strength must lie in [0, 1]");
  if (!(config.noise_std >= 0.0)) throw std::invalid_argument("make_stream: noise_std must be >= 0");
  if (config.train_size < 1 || config.test_size < 1)
    throw std::invalid_argument("make_stream: split sizes must be >= 1");
  if (!(config.centroid_radius > 0.0))
    throw std::invalid_argument("make_stream: centroid_radius must be > 0");
  if (!(config.max_angle >= 0.0 && config.max_angle < std::numbers::pi))
    throw std::invalid_argument("make_stream: max_angle must lie in [0, pi)");

  SplitMix64 rng(mix_seed(config.seed, 0x5EED));
  Matrix pool = gaussian(config.classes, config.input_dim, rng);
  for (Index j = 0; j < pool.rows(); ++j)
    pool.row(j) *= config.centroid_radius / pool.row(j).norm();

  const double angle = config.shift_strength * config.max_angle;
  std::vector<TaskSpec> specs;
  for (std::size_t t = 0; t < config.n_tasks; ++t) {
    TaskSpec spec;
    spec.task_id = t + 1;
    spec.classes = config.classes;
    spec.input_dim = config.input_dim;
    spec.rotation = random_rotation(config.input_dim, angle, rng);
    spec.centroids = pool * spec.rotation.transpose();
    spec.noise_std = config.noise_std;
    spec.train_size = config.train_size;
    spec.test_size = config.test_size;
    spec.seed = mix_seed(config.seed, 1000 + t);
    specs.push_back(std::move(spec));
  }
  return specs;
}

LabeledBatch sample(const TaskSpec& spec, Split split, std::size_t batch_size,
                    std::size_t cursor) {
  const std::size_t size = spec.split_size(split);
  if (cursor >= size)
    throw std::out_of_range("sample: cursor " + std::to_string(cursor) + " past split size " +
                            std::to_string(size));
  if (batch_size < 1) throw std::invalid_argument("sample: batch_size must be >= 1");
  const std::size_t m = std::min(batch_size, size - cursor);
  const std::uint64_t split_seed = mix_seed(spec.seed, split == Split::Train ? 0x7A1 : 0x7E57);

  LabeledBatch batch;
  batch.inputs.resize(static_cast<Index>(m), spec.input_dim);
  batch.labels.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    SplitMix64 g(mix_seed(split_seed, cursor + j));
    std::uniform_int_distribution<Index> pick(0, spec.classes - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Index label = pick(g);
    batch.labels[j] = label;
    for (Index c = 0; c < spec.input_dim; ++c)
      batch.inputs(static_cast<Index>(j), c) = spec.centroids(label, c) + spec.noise_std * normal(g);
  }
  return batch;
}

LabeledBatch full_split(const TaskSpec& spec, Split split) {
  return sample(spec, split, spec.split_size(split), 0);
}

double rotation_angle(const Eigen::Ref<const Matrix>& ra, const Eigen::Ref<const Matrix>& rb) {
  if (ra.rows() != rb.rows() || ra.cols() != rb.cols())
    throw std::invalid_argument("rotation_angle: shape mismatch");
  const double c = (ra.transpose() * rb).trace() / static_cast<double>(ra.rows());
  return std::acos(std::clamp(c, -1.0, 1.0));
}

double mean_consecutive_angle(const std::vector<TaskSpec>& specs) {
  if (specs.size() < 2) return 0.0;
  double total = 0.0;
  for (std::size_t t = 1; t < specs.size(); ++t)
    total += rotation_angle(specs[t - 1].rotation, specs[t].rotation);
  return total / static_cast<double>(specs.size() - 1);
}

}  // namespace stabmoe
