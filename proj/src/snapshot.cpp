// Snapshot byte layout (all integers and floats little-endian):
//   "SAME-SNAP"                       9 bytes magic
//   u32 version
//   u32 layers, u32 experts, u32 rank, u32 classes, u32 activation
//   per layer: u32 in, u32 out
//   per layer: base, router, then A_i, B_i for each expert   (f64, row-major)
//   readout                                                   (f64, row-major)
//   u64 FNV-1a of every preceding byte

#include "stabmoe/moe.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <stdexcept>
#include <string_view>

namespace stabmoe {

namespace {

constexpr std::string_view kMagic = "SAME-SNAP";
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "snapshot codec assumes a little-endian host");

class Writer {
 public:
  void bytes(const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + len);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void matrix(const Matrix& m) {
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) {
        const double v = m(r, c);
        bytes(&v, sizeof v);
      }
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void bytes(void* dst, std::size_t len) {
    if (pos_ + len > in_.size()) throw std::runtime_error("snapshot: truncated payload");
    std::memcpy(dst, in_.data() + pos_, len);
    pos_ += len;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  Matrix matrix(Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) {
        double v;
        bytes(&v, sizeof v);
        m(r, c) = v;
      }
    return m;
  }
  [[nodiscard]] std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a(std::span<const std::uint8_t> data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto b : data) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::vector<std::uint8_t> snapshot(const MoeModel& model) {
  if (model.layers.empty()) throw std::invalid_argument("snapshot: model has no layers");
  Writer w;
  w.bytes(kMagic.data(), kMagic.size());
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(model.layers.size()));
  w.u32(static_cast<std::uint32_t>(model.n_experts()));
  w.u32(static_cast<std::uint32_t>(model.layers.front().rank()));
  w.u32(static_cast<std::uint32_t>(model.classes()));
  w.u32(static_cast<std::uint32_t>(model.activation));
  for (const auto& layer : model.layers) {
    w.u32(static_cast<std::uint32_t>(layer.in_dim()));
    w.u32(static_cast<std::uint32_t>(layer.out_dim()));
  }
  for (const auto& layer : model.layers) {
    w.matrix(layer.base);
    w.matrix(layer.router);
    for (const auto& e : layer.experts) {
      w.matrix(e.a);
      w.matrix(e.b);
    }
  }
  w.matrix(model.readout);
  const auto checksum = fnv1a(w.buffer());
  w.u64(checksum);
  return std::move(w.buffer());
}

MoeModel restore(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() ||
      std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
    throw std::runtime_error("snapshot: bad magic");

  Reader r(bytes);
  std::array<char, kMagic.size()> magic{};
  r.bytes(magic.data(), magic.size());
  const auto version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("snapshot: unsupported format version " + std::to_string(version));

  const auto n_layers = r.u32();
  const auto n_experts = r.u32();
  const auto rank = r.u32();
  const auto classes = r.u32();
  const auto activation = r.u32();
  if (n_layers == 0 || n_experts == 0 || rank == 0 || classes == 0 || activation > 1)
    throw std::runtime_error("snapshot: invalid header");

  std::vector<std::pair<Index, Index>> dims;
  std::size_t doubles = 0;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    const Index in = r.u32();
    const Index out = r.u32();
    dims.emplace_back(in, out);
    doubles += static_cast<std::size_t>(out * in + n_experts * in +
                                        n_experts * (rank * in + out * rank));
  }
  doubles += static_cast<std::size_t>(classes * dims.back().second);
  const std::size_t expected = r.position() + doubles * sizeof(double) + sizeof(std::uint64_t);
  if (bytes.size() < expected) throw std::runtime_error("snapshot: truncated payload");
  if (bytes.size() > expected) throw std::runtime_error("snapshot: trailing bytes");

  const auto body = bytes.first(expected - sizeof(std::uint64_t));
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof stored);
  if (stored != fnv1a(body)) throw std::runtime_error("snapshot: checksum mismatch");

  MoeModel model;
  model.activation = static_cast<Activation>(activation);
  for (const auto& [in, out] : dims) {
    MoeLayer layer;
    layer.base = r.matrix(out, in);
    layer.router = r.matrix(n_experts, in);
    for (std::uint32_t i = 0; i < n_experts; ++i) {
      Expert e;
      e.a = r.matrix(rank, in);
      e.b = r.matrix(out, rank);
      layer.experts.push_back(std::move(e));
    }
    model.layers.push_back(std::move(layer));
  }
  model.readout = r.matrix(classes, dims.back().second);
  return model;
}

}  // namespace stabmoe
