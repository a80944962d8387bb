#pragma once

// Stack of MoE-LoRA blocks over frozen base weights:
//   h = W0 x + sum_i w_i B_i A_i x,   w = softmax(W_G x)
// with an elementwise nonlinearity between blocks and a linear readout to
// class logits. Backward is analytic, including the routing softmax.

#include "stabmoe/spectral.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stabmoe {

using ExpertMask = std::vector<bool>;

enum class Activation : std::uint32_t { Tanh = 0, Identity = 1 };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation act);

struct Expert {
  Matrix a;  // rank x in
  Matrix b;  // out x rank
};

struct MoeLayer {
  Matrix base;    // out x in, frozen
  std::vector<Expert> experts;
  Matrix router;  // n x in

  [[nodiscard]] Index in_dim() const { return base.cols(); }
  [[nodiscard]] Index out_dim() const { return base.rows(); }
  [[nodiscard]] std::size_t n_experts() const { return experts.size(); }
  [[nodiscard]] Index rank() const { return experts.empty() ? 0 : experts.front().a.rows(); }
};

struct ModelShape {
  Index input_dim = 16;
  Index width = 16;
  std::size_t n_experts = 8;
  Index rank = 2;
  std::size_t layers = 2;
  Index classes = 4;
  Activation activation = Activation::Tanh;
  double readout_init_std = 0.01;
};

struct MoeModel {
  std::vector<MoeLayer> layers;
  Matrix readout;  // classes x width
  Activation activation = Activation::Tanh;
  /// Bumped on every parameter mutation; tapes carry the value they saw.
  std::uint64_t revision = 0;

  [[nodiscard]] Index input_dim() const { return layers.front().in_dim(); }
  [[nodiscard]] Index classes() const { return readout.rows(); }
  [[nodiscard]] std::size_t n_experts() const { return layers.front().n_experts(); }
};

/// Seeded initialization: W0 and A ~ N(0, 1/in), B = 0, W_G = 0, readout small normal.
MoeModel make_model(const ModelShape& shape, std::uint64_t seed);

/// Masks that leave every expert trainable.
std::vector<ExpertMask> no_frozen(const MoeModel& model);

double activate(Activation act, double v);
double activate_derivative(Activation act, double v);

/// Dense softmax with max subtraction.
Vector softmax(const Eigen::Ref<const Vector>& logits);

/// Keeps the top_k largest weights and renormalizes; top_k == 0 or >= n is dense.
Vector restrict_top_k(const Eigen::Ref<const Vector>& omega, std::size_t top_k);

struct LayerOutput {
  Vector h;
  Vector omega;
};

/// Frozen experts still take part in the mixture; the mask only has to match n.
LayerOutput layer_forward(const MoeLayer& layer, const Eigen::Ref<const Vector>& x,
                          const ExpertMask& frozen, std::size_t top_k = 0);

struct LayerCache {
  Vector input;
  Vector omega;
  std::vector<Vector> low_rank;  // A_i x
  std::vector<Vector> expert_out;  // B_i A_i x
  Vector pre_activation;
};

struct LayerTape {
  std::vector<LayerCache> layers;
  Vector features;
  Vector logits;
  std::uint64_t revision = 0;
  std::size_t top_k = 0;
};

struct ForwardResult {
  Vector logits;
  LayerTape tape;
};

ForwardResult model_forward(const MoeModel& model, const Eigen::Ref<const Vector>& x,
                            std::size_t top_k = 0);
Vector model_logits(const MoeModel& model, const Eigen::Ref<const Vector>& x,
                    std::size_t top_k = 0);

double cross_entropy(const Eigen::Ref<const Vector>& logits, Index target);

struct LayerGradients {
  Matrix router;
  std::vector<Matrix> a;
  std::vector<Matrix> b;
  /// Gradient with respect to the effective weight B_i A_i; feeds the
  /// realized-drift accounting.
  std::vector<Matrix> effective;
};

struct GradientSet {
  std::vector<LayerGradients> layers;
  Matrix readout;
  double loss = 0.0;
  std::size_t samples = 0;
  /// Expert parameter-gradient evaluations skipped because of the frozen mask,
  /// one per frozen expert per backward call.
  std::uint64_t skipped_expert_grads = 0;

  static GradientSet zeros_like(const MoeModel& model);
  void accumulate(const GradientSet& other);
  void scale(double factor);
};

/// Mean cross-entropy gradients over a batch of tapes. A frozen expert's
/// parameter gradients are skipped (left exactly zero) and counted once per call
/// in skipped_expert_grads; its contribution still flows to lower layers.
GradientSet batch_backward(const MoeModel& model, std::span<const LayerTape> tapes,
                           std::span<const Index> labels, std::span<const ExpertMask> frozen = {});

/// Single-sample form of batch_backward.
GradientSet model_backward(const MoeModel& model, const LayerTape& tape, Index target_class,
                           std::span<const ExpertMask> frozen = {});

/// Mean routing weight per expert at `layer_index` over the rows of `inputs`.
Vector routing_histogram(const MoeModel& model, const Eigen::Ref<const Matrix>& inputs,
                         std::size_t layer_index, std::size_t top_k = 0);

/// Byte image of the model: see docs/formats.md.
std::vector<std::uint8_t> snapshot(const MoeModel& model);
MoeModel restore(std::span<const std::uint8_t> bytes);

/// FNV-1a over the raw bytes of a matrix, for immutability checks.
std::uint64_t tensor_checksum(const Matrix& m);
std::uint64_t expert_checksum(const Expert& e);

bool parameters_equal(const MoeModel& lhs, const MoeModel& rhs);

}  // namespace stabmoe
