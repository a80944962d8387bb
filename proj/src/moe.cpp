#include "stabmoe/moe.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace stabmoe {

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "identity") return Activation::Identity;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation act) {
  switch (act) {
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
  }
  return "unknown";
}

double activate(Activation act, double v) {
  return act == Activation::Tanh ? std::tanh(v) : v;
}

double activate_derivative(Activation act, double v) {
  if (act == Activation::Identity) return 1.0;
  const double t = std::tanh(v);
  return 1.0 - t * t;
}

namespace {

Matrix gaussian(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  // Fill row-major so the draw order is independent of Eigen's storage order.
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

}  // namespace

MoeModel make_model(const ModelShape& shape, std::uint64_t seed) {
  if (shape.input_dim < 1 || shape.width < 1 || shape.n_experts < 1 || shape.rank < 1 ||
      shape.layers < 1 || shape.classes < 2)
    throw std::invalid_argument("make_model: invalid shape");
  std::mt19937_64 rng(seed);
  MoeModel model;
  model.activation = shape.activation;
  Index in = shape.input_dim;
  for (std::size_t l = 0; l < shape.layers; ++l) {
    MoeLayer layer;
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    layer.base = gaussian(shape.width, in, scale, rng);
    for (std::size_t i = 0; i < shape.n_experts; ++i) {
      Expert e;
      e.a = gaussian(shape.rank, in, scale, rng);
      e.b = Matrix::Zero(shape.width, shape.rank);
      layer.experts.push_back(std::move(e));
    }
    layer.router = Matrix::Zero(static_cast<Index>(shape.n_experts), in);
    model.layers.push_back(std::move(layer));
    in = shape.width;
  }
  model.readout = gaussian(shape.classes, shape.width, shape.readout_init_std, rng);
  return model;
}

std::vector<ExpertMask> no_frozen(const MoeModel& model) {
  std::vector<ExpertMask> masks;
  masks.reserve(model.layers.size());
  for (const auto& layer : model.layers) masks.emplace_back(layer.n_experts(), false);
  return masks;
}

Vector softmax(const Eigen::Ref<const Vector>& logits) {
  const double peak = logits.maxCoeff();
  Vector out = (logits.array() - peak).exp().matrix();
  const double total = out.sum();
  if (!std::isfinite(total) || !(total > 0.0))
    throw std::domain_error("softmax: non-finite logits");
  return out / total;
}

Vector restrict_top_k(const Eigen::Ref<const Vector>& omega, std::size_t top_k) {
  const auto n = static_cast<std::size_t>(omega.size());
  if (top_k == 0 || top_k >= n) return omega;
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index l, Index r) { return omega(l) > omega(r); });
  Vector out = Vector::Zero(omega.size());
  for (std::size_t j = 0; j < top_k; ++j) out(order[j]) = omega(order[j]);
  return out / out.sum();
}

LayerOutput layer_forward(const MoeLayer& layer, const Eigen::Ref<const Vector>& x,
                          const ExpertMask& frozen, std::size_t top_k) {
  if (x.size() != layer.in_dim())
    throw std::invalid_argument("layer_forward: input width mismatch");
  if (frozen.size() != layer.n_experts())
    throw std::invalid_argument("layer_forward: frozen mask size mismatch");
  if (!x.allFinite()) throw std::domain_error("layer_forward: non-finite input");
  LayerOutput out;
  out.omega = restrict_top_k(softmax(layer.router * x), top_k);
  out.h = layer.base * x;
  for (std::size_t i = 0; i < layer.n_experts(); ++i) {
    const double w = out.omega(static_cast<Index>(i));
    if (w == 0.0) continue;
    const auto& e = layer.experts[i];
    out.h.noalias() += w * (e.b * (e.a * x));
  }
  if (!out.h.allFinite()) throw std::domain_error("layer_forward: non-finite output");
  return out;
}

ForwardResult model_forward(const MoeModel& model, const Eigen::Ref<const Vector>& x,
                            std::size_t top_k) {
  if (x.size() != model.input_dim())
    throw std::invalid_argument("model_forward: input has width " + std::to_string(x.size()) +
                                ", model expects " + std::to_string(model.input_dim()));
  ForwardResult result;
  auto& tape = result.tape;
  tape.revision = model.revision;
  tape.top_k = top_k;
  tape.layers.reserve(model.layers.size());
  Vector current = x;
  for (const auto& layer : model.layers) {
    if (current.size() != layer.in_dim())
      throw std::invalid_argument("model_forward: layer widths do not chain");
    LayerCache cache;
    cache.input = current;
    cache.omega = restrict_top_k(softmax(layer.router * current), top_k);
    cache.pre_activation = layer.base * current;
    cache.low_rank.reserve(layer.n_experts());
    cache.expert_out.reserve(layer.n_experts());
    for (std::size_t i = 0; i < layer.n_experts(); ++i) {
      const auto& e = layer.experts[i];
      Vector u = e.a * current;
      Vector out = e.b * u;
      cache.pre_activation.noalias() += cache.omega(static_cast<Index>(i)) * out;
      cache.low_rank.push_back(std::move(u));
      cache.expert_out.push_back(std::move(out));
    }
    current = cache.pre_activation.unaryExpr(
        [act = model.activation](double v) { return activate(act, v); });
    tape.layers.push_back(std::move(cache));
  }
  if (current.size() != model.readout.cols())
    throw std::invalid_argument("model_forward: readout width mismatch");
  tape.features = current;
  tape.logits = model.readout * current;
  if (!tape.logits.allFinite()) throw std::domain_error("model_forward: non-finite logits");
  result.logits = tape.logits;
  return result;
}

Vector model_logits(const MoeModel& model, const Eigen::Ref<const Vector>& x,
                    std::size_t top_k) {
  return model_forward(model, x, top_k).logits;
}

double cross_entropy(const Eigen::Ref<const Vector>& logits, Index target) {
  if (target < 0 || target >= logits.size())
    throw std::invalid_argument("cross_entropy: target class out of range");
  const double peak = logits.maxCoeff();
  const double lse = peak + std::log((logits.array() - peak).exp().sum());
  return lse - logits(target);
}

GradientSet GradientSet::zeros_like(const MoeModel& model) {
  GradientSet g;
  for (const auto& layer : model.layers) {
    LayerGradients lg;
    lg.router = Matrix::Zero(layer.router.rows(), layer.router.cols());
    for (const auto& e : layer.experts) {
      lg.a.push_back(Matrix::Zero(e.a.rows(), e.a.cols()));
      lg.b.push_back(Matrix::Zero(e.b.rows(), e.b.cols()));
      lg.effective.push_back(Matrix::Zero(layer.out_dim(), layer.in_dim()));
    }
    g.layers.push_back(std::move(lg));
  }
  g.readout = Matrix::Zero(model.readout.rows(), model.readout.cols());
  return g;
}

void GradientSet::accumulate(const GradientSet& other) {
  if (other.layers.size() != layers.size())
    throw std::invalid_argument("GradientSet::accumulate: layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& dst = layers[l];
    const auto& src = other.layers[l];
    dst.router += src.router;
    for (std::size_t i = 0; i < dst.a.size(); ++i) {
      dst.a[i] += src.a[i];
      dst.b[i] += src.b[i];
      dst.effective[i] += src.effective[i];
    }
  }
  readout += other.readout;
  loss += other.loss;
  samples += other.samples;
  skipped_expert_grads += other.skipped_expert_grads;
}

void GradientSet::scale(double factor) {
  for (auto& lg : layers) {
    lg.router *= factor;
    for (std::size_t i = 0; i < lg.a.size(); ++i) {
      lg.a[i] *= factor;
      lg.b[i] *= factor;
      lg.effective[i] *= factor;
    }
  }
  readout *= factor;
  loss *= factor;
}

GradientSet batch_backward(const MoeModel& model, std::span<const LayerTape> tapes,
                           std::span<const Index> labels, std::span<const ExpertMask> frozen) {
  if (tapes.empty()) throw std::invalid_argument("model_backward: empty batch");
  if (labels.size() != tapes.size())
    throw std::invalid_argument("model_backward: one label per tape required");
  if (!frozen.empty() && frozen.size() != model.layers.size())
    throw std::invalid_argument("model_backward: one frozen mask per layer required");
  for (const auto& tape : tapes) {
    if (tape.revision != model.revision || tape.layers.size() != model.layers.size())
      throw std::logic_error("model_backward: stale tape (parameters changed since forward)");
    if (tape.top_k != 0 && tape.top_k < model.n_experts())
      throw std::invalid_argument("model_backward: gradients require dense routing");
  }
  for (auto label : labels)
    if (label < 0 || label >= model.classes())
      throw std::invalid_argument("model_backward: target class out of range");

  const auto m = static_cast<Index>(tapes.size());
  const std::size_t n_layers = model.layers.size();
  GradientSet grads = GradientSet::zeros_like(model);
  grads.samples = tapes.size();

  // Output-side gradient dL/dh of every layer, one row per sample.
  std::vector<Matrix> dh_rows(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) dh_rows[l].resize(m, model.layers[l].out_dim());

  for (Index s = 0; s < m; ++s) {
    const auto& tape = tapes[static_cast<std::size_t>(s)];
    const Index target = labels[static_cast<std::size_t>(s)];
    grads.loss += cross_entropy(tape.logits, target);

    Vector dlogits = softmax(tape.logits);
    dlogits(target) -= 1.0;
    grads.readout.noalias() += dlogits * tape.features.transpose();
    Vector dfeat = model.readout.transpose() * dlogits;

    for (std::size_t l = n_layers; l-- > 0;) {
      const auto& layer = model.layers[l];
      const auto& cache = tape.layers[l];
      const Vector dh = dfeat.cwiseProduct(cache.pre_activation.unaryExpr(
          [act = model.activation](double v) { return activate_derivative(act, v); }));
      dh_rows[l].row(s) = dh.transpose();

      const auto n = static_cast<Index>(layer.n_experts());
      Vector domega(n);
      Vector dx = layer.base.transpose() * dh;
      for (Index i = 0; i < n; ++i) {
        const auto& e = layer.experts[static_cast<std::size_t>(i)];
        domega(i) = dh.dot(cache.expert_out[static_cast<std::size_t>(i)]);
        dx.noalias() += e.a.transpose() * (cache.omega(i) * (e.b.transpose() * dh));
      }
      // Softmax Jacobian: ds_i = w_i (g_i - sum_j w_j g_j)
      const double mean = cache.omega.dot(domega);
      const Vector drouter = cache.omega.cwiseProduct((domega.array() - mean).matrix());
      grads.layers[l].router.noalias() += drouter * cache.input.transpose();
      dx.noalias() += layer.router.transpose() * drouter;
      dfeat = std::move(dx);
    }
  }

  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& layer = model.layers[l];
    auto& lg = grads.layers[l];
    Matrix inputs(m, layer.in_dim());
    for (Index s = 0; s < m; ++s)
      inputs.row(s) = tapes[static_cast<std::size_t>(s)].layers[l].input.transpose();
    for (std::size_t i = 0; i < layer.n_experts(); ++i) {
      if (!frozen.empty() && frozen[l][i]) {
        ++grads.skipped_expert_grads;
        continue;
      }
      Vector weights(m);
      for (Index s = 0; s < m; ++s)
        weights(s) = tapes[static_cast<std::size_t>(s)].layers[l].omega(static_cast<Index>(i));
      const auto& e = layer.experts[i];
      // dL/dW_i = sum_s w_si dh_s x_s^T; the factor gradients follow by the chain rule.
      lg.effective[i].noalias() = (weights.asDiagonal() * dh_rows[l]).transpose() * inputs;
      lg.a[i].noalias() = e.b.transpose() * lg.effective[i];
      lg.b[i].noalias() = lg.effective[i] * e.a.transpose();
    }
  }

  grads.scale(1.0 / static_cast<double>(m));
  return grads;
}

GradientSet model_backward(const MoeModel& model, const LayerTape& tape, Index target_class,
                           std::span<const ExpertMask> frozen) {
  return batch_backward(model, std::span<const LayerTape>(&tape, 1),
                        std::span<const Index>(&target_class, 1), frozen);
}

Vector routing_histogram(const MoeModel& model, const Eigen::Ref<const Matrix>& inputs,
                         std::size_t layer_index, std::size_t top_k) {
  if (inputs.rows() < 1) throw std::invalid_argument("routing_histogram: empty input set");
  if (layer_index >= model.layers.size())
    throw std::invalid_argument("routing_histogram: layer index out of range");
  Vector hist = Vector::Zero(static_cast<Index>(model.layers[layer_index].n_experts()));
  for (Index r = 0; r < inputs.rows(); ++r) {
    const auto fwd = model_forward(model, inputs.row(r).transpose(), top_k);
    hist += fwd.tape.layers[layer_index].omega;
  }
  return hist / static_cast<double>(inputs.rows());
}

std::uint64_t tensor_checksum(const Matrix& m) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  const std::size_t len = static_cast<std::size_t>(m.size()) * sizeof(double);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t expert_checksum(const Expert& e) {
  return tensor_checksum(e.a) * 31ULL ^ tensor_checksum(e.b);
}

bool parameters_equal(const MoeModel& lhs, const MoeModel& rhs) {
  auto same = [](const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::equal(a.data(), a.data() + a.size(), b.data(),
                      [](double x, double y) {
                        return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
                      });
  };
  if (lhs.layers.size() != rhs.layers.size() || lhs.activation != rhs.activation) return false;
  for (std::size_t l = 0; l < lhs.layers.size(); ++l) {
    const auto& a = lhs.layers[l];
    const auto& b = rhs.layers[l];
    if (!same(a.base, b.base) || !same(a.router, b.router) ||
        a.experts.size() != b.experts.size())
      return false;
    for (std::size_t i = 0; i < a.experts.size(); ++i)
      if (!same(a.experts[i].a, b.experts[i].a) || !same(a.experts[i].b, b.experts[i].b))
        return false;
  }
  return same(lhs.readout, rhs.readout);
}

}  // namespace stabmoe
