#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "debias/autodiff.hpp"
#include "debias/rng.hpp"
#include "debias/tensor.hpp"

namespace debias {

/// Ordered collection of named parameter tensors.
template <typename T>
class ParamSet {
 public:
  struct Item {
    std::string name;
    Tensor<T> tensor;
  };

  void add(std::string name, Tensor<T> tensor) {
    items_.push_back({std::move(name), std::move(tensor)});
  }

  Tensor<T>& at(const std::string& name) {
    for (auto& it : items_) {
      if (it.name == name) return it.tensor;
    }
    throw std::invalid_argument("params: unknown parameter " + name);
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamSet*>(this)->at(name);
  }

  std::vector<Item>& items() { return items_; }
  const std::vector<Item>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  bool operator==(const ParamSet& other) const {
    if (items_.size() != other.items_.size()) return false;
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (items_[i].name != other.items_[i].name) return false;
      if (items_[i].tensor.shape() != other.items_[i].tensor.shape()) return false;
      if (items_[i].tensor.values() != other.items_[i].tensor.values()) return false;
    }
    return true;
  }

 private:
  std::vector<Item> items_;
};

/// (name, shape) pairs defining an architecture's parameter layout.
using ParamSchema = std::vector<std::pair<std::string, std::vector<std::size_t>>>;

/// Miniature U-net over 1x16x16 images: two pooling levels, skip
/// concatenations, widths 8/16/32, sigmoid output head.
template <typename T>
struct UNetParams {
  ParamSet<T> params;
};

/// Two-headed (or, for per-attribute classifiers, single-headed) miniature
/// convolutional classifier. head_width 2 means (h1, h2) = (P(y=1), P(s=1)).
template <typename T>
struct ClassifierParams {
  ParamSet<T> params;
  std::size_t head_width = 2;
  bool frozen = false;
};

inline ParamSchema unet_schema() {
  return {
      {"enc1.conv1.w", {8, 1, 3, 3}},       {"enc1.conv1.b", {8}},
      {"enc1.conv2.w", {8, 8, 3, 3}},       {"enc1.conv2.b", {8}},
      {"enc2.conv1.w", {16, 8, 3, 3}},      {"enc2.conv1.b", {16}},
      {"enc2.conv2.w", {16, 16, 3, 3}},     {"enc2.conv2.b", {16}},
      {"bottleneck.conv1.w", {32, 16, 3, 3}}, {"bottleneck.conv1.b", {32}},
      {"bottleneck.conv2.w", {32, 32, 3, 3}}, {"bottleneck.conv2.b", {32}},
      {"dec2.up.w", {16, 32, 3, 3}},        {"dec2.up.b", {16}},
      {"dec2.conv1.w", {16, 32, 3, 3}},     {"dec2.conv1.b", {16}},
      {"dec2.conv2.w", {16, 16, 3, 3}},     {"dec2.conv2.b", {16}},
      {"dec1.up.w", {8, 16, 3, 3}},         {"dec1.up.b", {8}},
      {"dec1.conv1.w", {8, 16, 3, 3}},      {"dec1.conv1.b", {8}},
      {"dec1.conv2.w", {8, 8, 3, 3}},       {"dec1.conv2.b", {8}},
      {"head.w", {1, 8, 1, 1}},             {"head.b", {1}},
  };
}

inline ParamSchema classifier_schema(std::size_t head_width) {
  return {
      {"conv1.w", {8, 1, 3, 3}},   {"conv1.b", {8}},
      {"conv2.w", {16, 8, 3, 3}},  {"conv2.b", {16}},
      {"dense1.w", {256, 32}},     {"dense1.b", {32}},
      {"head.w", {32, head_width}}, {"head.b", {head_width}},
  };
}

namespace detail {

// He-style init: weights ~ N(0, 2/fan_in), biases zero. fan_in is I*Kh*Kw for
// conv weights and F for FxG dense weights; bias tensors are detected by rank.
template <typename T>
ParamSet<T> init_params(const ParamSchema& schema, std::uint64_t seed) {
  RandomStream rng(seed);
  ParamSet<T> out;
  for (const auto& [name, shape] : schema) {
    Tensor<T> t(shape);
    if (shape.size() > 1) {
      std::size_t fan_in = 1;
      if (shape.size() == 4) {
        fan_in = shape[1] * shape[2] * shape[3];
      } else {
        fan_in = shape[0];
      }
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = static_cast<T>(rng.normal(0.0, sd));
      }
    }
    out.add(name, std::move(t));
  }
  return out;
}

}  // namespace detail

template <typename T>
UNetParams<T> init_unet(std::uint64_t seed) {
  return {detail::init_params<T>(unet_schema(), seed)};
}

/// Precision conversion, e.g. for verifying float-trained nets in double.
template <typename To, typename From>
ParamSet<To> cast_params(const ParamSet<From>& params) {
  ParamSet<To> out;
  for (const auto& item : params.items()) {
    out.add(item.name, item.tensor.template cast<To>());
  }
  return out;
}

template <typename To, typename From>
UNetParams<To> cast_unet(const UNetParams<From>& unet) {
  return {cast_params<To>(unet.params)};
}

template <typename To, typename From>
ClassifierParams<To> cast_classifier(const ClassifierParams<From>& cls) {
  return {cast_params<To>(cls.params), cls.head_width, cls.frozen};
}

template <typename T>
ClassifierParams<T> init_classifier(std::uint64_t seed, std::size_t head_width = 2) {
  if (head_width != 1 && head_width != 2) {
    throw std::invalid_argument("init_classifier: head width must be 1 or 2");
  }
  return {detail::init_params<T>(classifier_schema(head_width), seed), head_width, false};
}

/// Parameter tensors registered on a tape, either as tracked parameters
/// (trainable) or plain leaves (frozen).
template <typename T>
struct BoundParams {
  std::map<std::string, Var<T>> vars;

  Var<T> operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) {
      throw std::invalid_argument("bound params: unknown parameter " + name);
    }
    return it->second;
  }
};

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ParamSet<T>& params, bool trainable) {
  BoundParams<T> out;
  for (const auto& item : params.items()) {
    out.vars[item.name] = trainable ? tape.param(item.name, item.tensor)
                                    : tape.leaf(item.tensor);
  }
  return out;
}

namespace detail {

template <typename T>
void check_image_batch(const Tensor<T>& t, const char* who) {
  if (t.rank() != 4 || t.dim(1) != 1 || t.dim(2) != 16 || t.dim(3) != 16) {
    throw std::invalid_argument(std::string(who) +
                                ": expects an Nx1x16x16 batch, got " +
                                Tensor<T>::shape_str(t.shape()));
  }
}

template <typename T>
Var<T> conv_block(Var<T> x, const BoundParams<T>& p, const std::string& prefix) {
  return relu(conv2d(x, p[prefix + ".w"], p[prefix + ".b"], 1));
}

}  // namespace detail

/// Contracting path, bottleneck, and expansive path with skip concatenations.
/// Output is sigmoid-bounded to (0,1) and has the input's shape.
template <typename T>
Var<T> unet_forward(Tape<T>& tape, const BoundParams<T>& p, Var<T> batch) {
  detail::check_image_batch(tape.value(batch), "unet_forward");
  auto e1 = detail::conv_block(batch, p, "enc1.conv1");
  e1 = detail::conv_block(e1, p, "enc1.conv2");            // N x 8 x 16 x 16
  auto e2 = detail::conv_block(maxpool2d(e1), p, "enc2.conv1");
  e2 = detail::conv_block(e2, p, "enc2.conv2");            // N x 16 x 8 x 8
  auto b = detail::conv_block(maxpool2d(e2), p, "bottleneck.conv1");
  b = detail::conv_block(b, p, "bottleneck.conv2");        // N x 32 x 4 x 4
  auto d2 = detail::conv_block(upsample_nearest(b), p, "dec2.up");
  d2 = detail::conv_block(concat_channels(d2, e2), p, "dec2.conv1");
  d2 = detail::conv_block(d2, p, "dec2.conv2");            // N x 16 x 8 x 8
  auto d1 = detail::conv_block(upsample_nearest(d2), p, "dec1.up");
  d1 = detail::conv_block(concat_channels(d1, e1), p, "dec1.conv1");
  d1 = detail::conv_block(d1, p, "dec1.conv2");            // N x 8 x 16 x 16
  return sigmoid(conv2d(d1, p["head.w"], p["head.b"], 0));
}

/// conv-relu-pool twice, flatten to 256, dense-relu, dense head, per-head
/// sigmoid. Returns one probability vector per head.
template <typename T>
std::vector<Var<T>> classifier_heads(Tape<T>& tape, const BoundParams<T>& p,
                                     std::size_t head_width, Var<T> batch) {
  detail::check_image_batch(tape.value(batch), "classifier_forward");
  const std::size_t n = tape.value(batch).dim(0);
  auto c1 = maxpool2d(detail::conv_block(batch, p, "conv1"));   // N x 8 x 8 x 8
  auto c2 = maxpool2d(detail::conv_block(c1, p, "conv2"));      // N x 16 x 4 x 4
  auto flat = reshape(c2, {n, 256});
  auto d1 = relu(affine(flat, p["dense1.w"], p["dense1.b"]));
  auto logits = affine(d1, p["head.w"], p["head.b"]);
  std::vector<Var<T>> heads;
  for (std::size_t j = 0; j < head_width; ++j) {
    heads.push_back(sigmoid(column(logits, j)));
  }
  return heads;
}

template <typename T>
std::pair<Var<T>, Var<T>> classifier_forward(Tape<T>& tape, const BoundParams<T>& p,
                                             Var<T> batch) {
  auto heads = classifier_heads(tape, p, 2, batch);
  return {heads[0], heads[1]};
}

/// Pure-function variants that run on an internal tape.
template <typename T>
Tensor<T> unet_apply(const UNetParams<T>& unet, const Tensor<T>& batch) {
  Tape<T> tape;
  auto p = bind_params(tape, unet.params, false);
  return tape.value(unet_forward(tape, p, tape.leaf(batch)));
}

template <typename T>
std::vector<Tensor<T>> classifier_apply(const ClassifierParams<T>& cls,
                                        const Tensor<T>& batch) {
  Tape<T> tape;
  auto p = bind_params(tape, cls.params, false);
  auto heads = classifier_heads(tape, p, cls.head_width, tape.leaf(batch));
  std::vector<Tensor<T>> out;
  for (auto h : heads) out.push_back(tape.value(h));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
// Layout: magic "DBIAS1", u32 tensor count, then per tensor: u32 name length,
// name bytes, u32 rank, rank u32 dims, dims-product f32 values. All integers
// and floats little-endian.

namespace detail {

inline void put_u32(std::ofstream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::ifstream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error("checkpoint: truncated file");
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

constexpr char kCheckpointMagic[6] = {'D', 'B', 'I', 'A', 'S', '1'};

template <typename T>
void save_checkpoint(const ParamSet<T>& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, 6);
  detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& item : params.items()) {
    detail::put_u32(os, static_cast<std::uint32_t>(item.name.size()));
    os.write(item.name.data(), static_cast<std::streamsize>(item.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(item.tensor.rank()));
    for (std::size_t d : item.tensor.shape()) {
      detail::put_u32(os, static_cast<std::uint32_t>(d));
    }
    for (std::size_t i = 0; i < item.tensor.size(); ++i) {
      detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(item.tensor[i])));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

/// Loads a checkpoint and validates it against an expected architecture.
template <typename T>
ParamSet<T> load_checkpoint(const std::filesystem::path& path,
                            const ParamSchema& expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[6];
  if (!is.read(magic, 6) || !std::equal(magic, magic + 6, kCheckpointMagic)) {
    throw std::runtime_error("checkpoint: bad magic string in " + path.string());
  }
  const std::uint32_t count = detail::get_u32(is);
  if (count != expected.size()) {
    throw std::runtime_error("checkpoint: tensor count mismatch against expected architecture");
  }
  std::vector<Tensor<T>> slots(expected.size());
  std::vector<bool> seen(expected.size(), false);
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = detail::get_u32(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw std::runtime_error("checkpoint: truncated file");
    }
    std::size_t slot = expected.size();
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (expected[i].first == name) {
        slot = i;
        break;
      }
    }
    if (slot == expected.size()) {
      throw std::runtime_error("checkpoint: unknown parameter name " + name);
    }
    if (seen[slot]) throw std::runtime_error("checkpoint: duplicate parameter " + name);
    seen[slot] = true;
    const std::uint32_t rank = detail::get_u32(is);
    std::vector<std::size_t> shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) shape[d] = detail::get_u32(is);
    if (shape != expected[slot].second) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    }
    Tensor<T> tensor(shape);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      tensor[i] = static_cast<T>(std::bit_cast<float>(detail::get_u32(is)));
    }
    slots[slot] = std::move(tensor);
  }
  is.peek();
  if (!is.eof()) throw std::runtime_error("checkpoint: trailing bytes in " + path.string());
  // Re-assemble in schema order so a re-save is byte-identical.
  ParamSet<T> out;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    out.add(expected[i].first, std::move(slots[i]));
  }
  return out;
}

template <typename T>
void save_checkpoint(const UNetParams<T>& unet, const std::filesystem::path& path) {
  save_checkpoint(unet.params, path);
}

template <typename T>
void save_checkpoint(const ClassifierParams<T>& cls, const std::filesystem::path& path) {
  save_checkpoint(cls.params, path);
}

template <typename T>
UNetParams<T> load_unet_checkpoint(const std::filesystem::path& path) {
  return {load_checkpoint<T>(path, unet_schema())};
}

template <typename T>
ClassifierParams<T> load_classifier_checkpoint(const std::filesystem::path& path,
                                               std::size_t head_width = 2) {
  return {load_checkpoint<T>(path, classifier_schema(head_width)), head_width, true};
}

}  // namespace debias
