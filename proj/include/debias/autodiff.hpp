#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "debias/hsic.hpp"
#include "debias/tensor.hpp"

namespace debias {

template <typename T>
class Tape;

/// Handle to a node on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;
};

/// Record of executed tensor operations. Nodes are appended in execution
/// order, which is a topological order; backward() walks them in reverse.
/// Single-threaded per tape; independent tapes may live on separate threads.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int self)>;

  /// Untracked leaf (input or constant).
  Var<T> leaf(Tensor<T> value) { return emplace(std::move(value), {}, nullptr); }

  /// Named parameter leaf; its gradient appears in backward()'s result map.
  Var<T> param(const std::string& name, Tensor<T> value) {
    for (int id : params_) {
      if (nodes_[static_cast<std::size_t>(id)].name == name) {
        throw std::invalid_argument("tape: duplicate parameter name " + name);
      }
    }
    Var<T> v = emplace(std::move(value), {}, nullptr);
    nodes_[static_cast<std::size_t>(v.id)].name = name;
    params_.push_back(v.id);
    return v;
  }

  Var<T> emplace(Tensor<T> value, std::vector<int> parents, BackFn back) {
    if (!value.all_finite()) {
      throw std::runtime_error("tape: non-finite value produced by an operation");
    }
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(back), {}});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return node_value(check(v)); }

  const Tensor<T>& node_value(int id) const {
    return nodes_[static_cast<std::size_t>(id)].value;
  }

  /// Gradient accumulator of a node; valid during and after backward().
  Tensor<T>& node_grad(int id) {
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (slot.size() == 0 && nodes_[static_cast<std::size_t>(id)].value.size() != 0) {
      slot = Tensor<T>(nodes_[static_cast<std::size_t>(id)].value.shape());
    }
    engaged_[static_cast<std::size_t>(id)] = 1;
    return slot;
  }

  const Tensor<T>& grad(Var<T> v) {
    return node_grad(check(v));
  }

  /// Reverse pass from a scalar loss. Returns gradients for every registered
  /// parameter, keyed by name; parameters the loss never touched map to zero.
  std::map<std::string, Tensor<T>> backward(Var<T> loss) {
    const int loss_id = check(loss);
    if (nodes_[static_cast<std::size_t>(loss_id)].value.size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar node");
    }
    grads_.assign(nodes_.size(), Tensor<T>());
    engaged_.assign(nodes_.size(), 0);
    node_grad(loss_id)[0] = T(1);
    for (int id = loss_id; id >= 0; --id) {
      auto& node = nodes_[static_cast<std::size_t>(id)];
      if (!engaged_[static_cast<std::size_t>(id)] || !node.back) continue;
      node.back(*this, id);
    }
    std::map<std::string, Tensor<T>> out;
    for (int pid : params_) {
      auto& node = nodes_[static_cast<std::size_t>(pid)];
      if (engaged_[static_cast<std::size_t>(pid)]) {
        out[node.name] = grads_[static_cast<std::size_t>(pid)];
      } else {
        out[node.name] = Tensor<T>(node.value.shape());
      }
    }
    return out;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<int> parents;
    BackFn back;
    std::string name;
  };

  int check(Var<T> v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
      throw std::invalid_argument("tape: variable does not belong to this tape");
    }
    return v.id;
  }

  // deque: node references stay valid while later operations append.
  std::deque<Node> nodes_;
  std::vector<int> params_;
  std::vector<Tensor<T>> grads_;
  std::vector<char> engaged_;
};

namespace detail {

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument("op: arguments must live on the same tape");
  }
  return *a.tape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Structural operations
// ---------------------------------------------------------------------------

/// 2-d convolution over NCHW input with OIKhKw weights, stride 1.
/// Output spatial size is in + 2*padding - k + 1.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weights, Var<T> bias, int padding) {
  Tape<T>& tape = detail::same_tape(input, weights);
  detail::same_tape(input, bias);
  const Tensor<T>& in = tape.value(input);
  const Tensor<T>& w = tape.value(weights);
  const Tensor<T>& b = tape.value(bias);
  if (in.rank() != 4 || w.rank() != 4 || b.rank() != 1) {
    throw std::invalid_argument("conv2d: expects NCHW input, OIKhKw weights, O bias");
  }
  const std::size_t n = in.dim(0), ci = in.dim(1), h = in.dim(2), wd = in.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ci) {
    throw std::invalid_argument("conv2d: input channels do not match weights");
  }
  if (w.dim(3) != k || (k != 1 && k != 3)) {
    throw std::invalid_argument("conv2d: kernel must be 1x1 or 3x3");
  }
  if (b.dim(0) != co) throw std::invalid_argument("conv2d: bias size mismatch");
  if (padding != 0 && padding != 1) {
    throw std::invalid_argument("conv2d: padding must be 0 or 1");
  }
  const long oh = static_cast<long>(h) + 2 * padding - static_cast<long>(k) + 1;
  const long ow = static_cast<long>(wd) + 2 * padding - static_cast<long>(k) + 1;
  if (oh <= 0 || ow <= 0) {
    throw std::invalid_argument("conv2d: non-positive output size");
  }

  Tensor<T> out({n, co, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  const std::size_t ohs = static_cast<std::size_t>(oh), ows = static_cast<std::size_t>(ow);
  for (std::size_t bn = 0; bn < n; ++bn) {
    for (std::size_t o = 0; o < co; ++o) {
      T* outp = &out.at4(bn, o, 0, 0);
      const T bo = b[o];
      for (std::size_t i = 0; i < ohs * ows; ++i) outp[i] = bo;
    }
  }
  // Shift-and-scale formulation: each (o,i,kh,kw) adds a scaled, shifted copy
  // of an input plane to an output plane, so the inner loop is contiguous.
  const int p = padding;
  for (std::size_t bn = 0; bn < n; ++bn) {
    for (std::size_t o = 0; o < co; ++o) {
      for (std::size_t i = 0; i < ci; ++i) {
        for (std::size_t kh = 0; kh < k; ++kh) {
          for (std::size_t kw = 0; kw < k; ++kw) {
            const T wv = w.at4(o, i, kh, kw);
            const long ylo = std::max<long>(0, p - static_cast<long>(kh));
            const long yhi = std::min<long>(oh, static_cast<long>(h) + p - static_cast<long>(kh));
            const long xlo = std::max<long>(0, p - static_cast<long>(kw));
            const long xhi = std::min<long>(ow, static_cast<long>(wd) + p - static_cast<long>(kw));
            for (long oy = ylo; oy < yhi; ++oy) {
              const T* inrow = &in.at4(bn, i, static_cast<std::size_t>(oy + kh - p),
                                       static_cast<std::size_t>(xlo + static_cast<long>(kw) - p));
              T* outrow = &out.at4(bn, o, static_cast<std::size_t>(oy),
                                   static_cast<std::size_t>(xlo));
              for (long ox = 0; ox < xhi - xlo; ++ox) outrow[ox] += wv * inrow[ox];
            }
          }
        }
      }
    }
  }

  const int in_id = input.id, w_id = weights.id, b_id = bias.id;
  return tape.emplace(
      std::move(out), {in_id, w_id, b_id},
      [in_id, w_id, b_id, padding](Tape<T>& t, int self) {
        const Tensor<T>& gout = t.node_grad(self);
        const Tensor<T>& in = t.node_value(in_id);
        const Tensor<T>& w = t.node_value(w_id);
        Tensor<T>& gin = t.node_grad(in_id);
        Tensor<T>& gw = t.node_grad(w_id);
        Tensor<T>& gb = t.node_grad(b_id);
        const std::size_t n = in.dim(0), ci = in.dim(1), h = in.dim(2), wd = in.dim(3);
        const std::size_t co = w.dim(0), k = w.dim(2);
        const long oh = static_cast<long>(gout.dim(2)), ow = static_cast<long>(gout.dim(3));
        const int p = padding;
        for (std::size_t bn = 0; bn < n; ++bn) {
          for (std::size_t o = 0; o < co; ++o) {
            const T* gp = &gout.at4(bn, o, 0, 0);
            T acc = T(0);
            for (long i = 0; i < oh * ow; ++i) acc += gp[i];
            gb[o] += acc;
          }
        }
        for (std::size_t bn = 0; bn < n; ++bn) {
          for (std::size_t o = 0; o < co; ++o) {
            for (std::size_t i = 0; i < ci; ++i) {
              for (std::size_t kh = 0; kh < k; ++kh) {
                for (std::size_t kw = 0; kw < k; ++kw) {
                  const long ylo = std::max<long>(0, p - static_cast<long>(kh));
                  const long yhi = std::min<long>(oh, static_cast<long>(h) + p - static_cast<long>(kh));
                  const long xlo = std::max<long>(0, p - static_cast<long>(kw));
                  const long xhi = std::min<long>(ow, static_cast<long>(wd) + p - static_cast<long>(kw));
                  const T wv = w.at4(o, i, kh, kw);
                  T wacc = T(0);
                  for (long oy = ylo; oy < yhi; ++oy) {
                    const T* grow = &gout.at4(bn, o, static_cast<std::size_t>(oy),
                                              static_cast<std::size_t>(xlo));
                    const T* inrow = &in.at4(bn, i, static_cast<std::size_t>(oy + kh - p),
                                             static_cast<std::size_t>(xlo + static_cast<long>(kw) - p));
                    T* ginrow = &gin.at4(bn, i, static_cast<std::size_t>(oy + kh - p),
                                         static_cast<std::size_t>(xlo + static_cast<long>(kw) - p));
                    for (long ox = 0; ox < xhi - xlo; ++ox) {
                      wacc += grow[ox] * inrow[ox];
                      ginrow[ox] += wv * grow[ox];
                    }
                  }
                  gw.at4(o, i, kh, kw) += wacc;
                }
              }
            }
          }
        }
      });
}

/// 2x2 max pooling. Ties route the gradient to the first position in
/// row-major order.
template <typename T>
Var<T> maxpool2d(Var<T> input) {
  Tape<T>& tape = *input.tape;
  const Tensor<T>& in = tape.value(input);
  if (in.rank() != 4) throw std::invalid_argument("maxpool2d: expects NCHW input");
  const std::size_t n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw std::invalid_argument("maxpool2d: spatial extents must be divisible by 2");
  }
  Tensor<T> out({n, c, h / 2, w / 2});
  std::vector<std::size_t> argmax(out.size());
  std::size_t oi = 0;
  for (std::size_t bn = 0; bn < n; ++bn) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t oy = 0; oy < h / 2; ++oy) {
        for (std::size_t ox = 0; ox < w / 2; ++ox, ++oi) {
          const std::size_t base = ((bn * c + ch) * h + 2 * oy) * w + 2 * ox;
          const std::size_t idx[4] = {base, base + 1, base + w, base + w + 1};
          std::size_t best = idx[0];
          T bv = in[idx[0]];
          for (int j = 1; j < 4; ++j) {
            if (in[idx[j]] > bv) {
              bv = in[idx[j]];
              best = idx[j];
            }
          }
          out[oi] = bv;
          argmax[oi] = best;
        }
      }
    }
  }
  const int in_id = input.id;
  return tape.emplace(std::move(out), {in_id},
                      [in_id, argmax = std::move(argmax)](Tape<T>& t, int self) {
                        const Tensor<T>& gout = t.node_grad(self);
                        Tensor<T>& gin = t.node_grad(in_id);
                        for (std::size_t i = 0; i < gout.size(); ++i) {
                          gin[argmax[i]] += gout[i];
                        }
                      });
}

/// Nearest-neighbor 2x upsampling; each source pixel becomes a 2x2 block.
template <typename T>
Var<T> upsample_nearest(Var<T> input) {
  Tape<T>& tape = *input.tape;
  const Tensor<T>& in = tape.value(input);
  if (in.rank() != 4) throw std::invalid_argument("upsample_nearest: expects NCHW input");
  const std::size_t n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
  Tensor<T> out({n, c, 2 * h, 2 * w});
  for (std::size_t bn = 0; bn < n; ++bn) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const T v = in.at4(bn, ch, y, x);
          out.at4(bn, ch, 2 * y, 2 * x) = v;
          out.at4(bn, ch, 2 * y, 2 * x + 1) = v;
          out.at4(bn, ch, 2 * y + 1, 2 * x) = v;
          out.at4(bn, ch, 2 * y + 1, 2 * x + 1) = v;
        }
      }
    }
  }
  const int in_id = input.id;
  return tape.emplace(std::move(out), {in_id}, [in_id](Tape<T>& t, int self) {
    const Tensor<T>& gout = t.node_grad(self);
    Tensor<T>& gin = t.node_grad(in_id);
    const std::size_t n = gin.dim(0), c = gin.dim(1), h = gin.dim(2), w = gin.dim(3);
    for (std::size_t bn = 0; bn < n; ++bn) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            gin.at4(bn, ch, y, x) += gout.at4(bn, ch, 2 * y, 2 * x) +
                                     gout.at4(bn, ch, 2 * y, 2 * x + 1) +
                                     gout.at4(bn, ch, 2 * y + 1, 2 * x) +
                                     gout.at4(bn, ch, 2 * y + 1, 2 * x + 1);
          }
        }
      }
    }
  });
}

/// Concatenate along the channel axis; channels of a precede channels of b.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& ta = tape.value(a);
  const Tensor<T>& tb = tape.value(b);
  if (ta.rank() != 4 || tb.rank() != 4) {
    throw std::invalid_argument("concat_channels: expects NCHW inputs");
  }
  if (ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(2) || ta.dim(3) != tb.dim(3)) {
    throw std::invalid_argument("concat_channels: batch or spatial mismatch");
  }
  const std::size_t n = ta.dim(0), c1 = ta.dim(1), c2 = tb.dim(1);
  const std::size_t h = ta.dim(2), w = ta.dim(3), plane = h * w;
  Tensor<T> out({n, c1 + c2, h, w});
  for (std::size_t bn = 0; bn < n; ++bn) {
    std::copy_n(ta.data() + bn * c1 * plane, c1 * plane,
                out.data() + bn * (c1 + c2) * plane);
    std::copy_n(tb.data() + bn * c2 * plane, c2 * plane,
                out.data() + (bn * (c1 + c2) + c1) * plane);
  }
  const int a_id = a.id, b_id = b.id;
  return tape.emplace(std::move(out), {a_id, b_id},
                      [a_id, b_id, c1, c2, plane](Tape<T>& t, int self) {
                        const Tensor<T>& gout = t.node_grad(self);
                        Tensor<T>& ga = t.node_grad(a_id);
                        Tensor<T>& gb = t.node_grad(b_id);
                        const std::size_t n = gout.dim(0);
                        for (std::size_t bn = 0; bn < n; ++bn) {
                          const T* src = gout.data() + bn * (c1 + c2) * plane;
                          for (std::size_t i = 0; i < c1 * plane; ++i) {
                            ga[bn * c1 * plane + i] += src[i];
                          }
                          for (std::size_t i = 0; i < c2 * plane; ++i) {
                            gb[bn * c2 * plane + i] += src[c1 * plane + i];
                          }
                        }
                      });
}

/// out = input . weights + bias, for N x F input and F x G weights.
template <typename T>
Var<T> affine(Var<T> input, Var<T> weights, Var<T> bias) {
  Tape<T>& tape = detail::same_tape(input, weights);
  detail::same_tape(input, bias);
  const Tensor<T>& in = tape.value(input);
  const Tensor<T>& w = tape.value(weights);
  const Tensor<T>& b = tape.value(bias);
  if (in.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
    throw std::invalid_argument("affine: expects NxF input, FxG weights, G bias");
  }
  const std::size_t n = in.dim(0), f = in.dim(1), g = w.dim(1);
  if (w.dim(0) != f || b.dim(0) != g) {
    throw std::invalid_argument("affine: dimension mismatch");
  }
  Tensor<T> out({n, g});
  for (std::size_t bn = 0; bn < n; ++bn) {
    T* outrow = &out.at2(bn, 0);
    for (std::size_t j = 0; j < g; ++j) outrow[j] = b[j];
    for (std::size_t i = 0; i < f; ++i) {
      const T x = in.at2(bn, i);
      const T* wrow = &w.at2(i, 0);
      for (std::size_t j = 0; j < g; ++j) outrow[j] += x * wrow[j];
    }
  }
  const int in_id = input.id, w_id = weights.id, b_id = bias.id;
  return tape.emplace(std::move(out), {in_id, w_id, b_id},
                      [in_id, w_id, b_id](Tape<T>& t, int self) {
                        const Tensor<T>& gout = t.node_grad(self);
                        const Tensor<T>& in = t.node_value(in_id);
                        const Tensor<T>& w = t.node_value(w_id);
                        Tensor<T>& gin = t.node_grad(in_id);
                        Tensor<T>& gw = t.node_grad(w_id);
                        Tensor<T>& gb = t.node_grad(b_id);
                        const std::size_t n = in.dim(0), f = in.dim(1), g = w.dim(1);
                        for (std::size_t bn = 0; bn < n; ++bn) {
                          const T* grow = &gout.at2(bn, 0);
                          for (std::size_t j = 0; j < g; ++j) gb[j] += grow[j];
                          for (std::size_t i = 0; i < f; ++i) {
                            const T* wrow = &w.at2(i, 0);
                            T acc = T(0);
                            for (std::size_t j = 0; j < g; ++j) acc += grow[j] * wrow[j];
                            gin.at2(bn, i) += acc;
                            T* gwrow = &gw.at2(i, 0);
                            const T x = in.at2(bn, i);
                            for (std::size_t j = 0; j < g; ++j) gwrow[j] += x * grow[j];
                          }
                        }
                      });
}

/// View with a new shape; total element count must be unchanged.
template <typename T>
Var<T> reshape(Var<T> input, std::vector<std::size_t> shape) {
  Tape<T>& tape = *input.tape;
  const Tensor<T>& in = tape.value(input);
  Tensor<T> out(std::move(shape), in.values());
  const int in_id = input.id;
  return tape.emplace(std::move(out), {in_id}, [in_id](Tape<T>& t, int self) {
    const Tensor<T>& gout = t.node_grad(self);
    Tensor<T>& gin = t.node_grad(in_id);
    for (std::size_t i = 0; i < gout.size(); ++i) gin[i] += gout[i];
  });
}

/// Extract column j of an N x G matrix as a length-N vector.
template <typename T>
Var<T> column(Var<T> input, std::size_t j) {
  Tape<T>& tape = *input.tape;
  const Tensor<T>& in = tape.value(input);
  if (in.rank() != 2 || j >= in.dim(1)) {
    throw std::invalid_argument("column: index out of range");
  }
  const std::size_t n = in.dim(0), g = in.dim(1);
  Tensor<T> out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = in[i * g + j];
  const int in_id = input.id;
  return tape.emplace(std::move(out), {in_id}, [in_id, j, g](Tape<T>& t, int self) {
    const Tensor<T>& gout = t.node_grad(self);
    Tensor<T>& gin = t.node_grad(in_id);
    for (std::size_t i = 0; i < gout.size(); ++i) gin[i * g + j] += gout[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> relu(Var<T> input) {
  Tape<T>& tape = *input.tape;
  const Tensor<T>& in = tape.value(input);
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  const int in_id = input.id;
  // Subgradient at 0 is 0.
  return tape.emplace(std::move(out), {in_id}, [in_id](Tape<T>& t, int self) {
    const Tensor<T>& gout = t.node_grad(self);
    const Tensor<T>& in = t.node_value(in_id);
    Tensor<T>& gin = t.node_grad(in_id);
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (in[i] > T(0)) gin[i] += gout[i];
    }
  });
}

namespace detail {

// Inputs are clamped to [-30, 30] before exponentiation and outputs to
// [1e-7, 1 - 1e-7] so that float-mode sigmoids stay strictly inside (0, 1).
template <typename T>
T sigmoid_scalar(T z) {
  double x = static_cast<double>(z);
  x = std::clamp(x, -30.0, 30.0);
  const double y = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                            : std::exp(x) / (1.0 + std::exp(x));
  return static_cast<T>(std::clamp(y, 1e-7, 1.0 - 1e-7));
}

}  // namespace detail

template <typename T>
Var<T> sigmoid(Var<T> input) {
  Tape<T>& tape = *input.tape;
  const Tensor<T>& in = tape.value(input);
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = detail::sigmoid_scalar(in[i]);
  const int in_id = input.id;
  return tape.emplace(std::move(out), {in_id}, [in_id](Tape<T>& t, int self) {
    const Tensor<T>& gout = t.node_grad(self);
    const Tensor<T>& y = t.node_value(self);
    Tensor<T>& gin = t.node_grad(in_id);
    for (std::size_t i = 0; i < gout.size(); ++i) {
      gin[i] += gout[i] * y[i] * (T(1) - y[i]);
    }
  });
}

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Var<T> binary_ew(Var<T> a, Var<T> b, const char* name, Fwd fwd, Bwd bwd) {
  Tape<T>& tape = same_tape(a, b);
  const Tensor<T>& ta = tape.value(a);
  const Tensor<T>& tb = tape.value(b);
  if (!ta.same_shape(tb)) {
    throw std::invalid_argument(std::string(name) + ": shape mismatch");
  }
  Tensor<T> out(ta.shape());
  for (std::size_t i = 0; i < ta.size(); ++i) out[i] = fwd(ta[i], tb[i]);
  const int a_id = a.id, b_id = b.id;
  return tape.emplace(std::move(out), {a_id, b_id},
                      [a_id, b_id, bwd](Tape<T>& t, int self) {
                        const Tensor<T>& gout = t.node_grad(self);
                        const Tensor<T>& ta = t.node_value(a_id);
                        const Tensor<T>& tb = t.node_value(b_id);
                        Tensor<T>& ga = t.node_grad(a_id);
                        Tensor<T>& gb = t.node_grad(b_id);
                        for (std::size_t i = 0; i < gout.size(); ++i) {
                          bwd(gout[i], ta[i], tb[i], ga[i], gb[i]);
                        }
                      });
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary_ew(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T g, T, T, T& ga, T& gb) {
        ga += g;
        gb += g;
      });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary_ew(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T g, T, T, T& ga, T& gb) {
        ga += g;
        gb -= g;
      });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary_ew(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T g, T x, T y, T& ga, T& gb) {
        ga += g * y;
        gb += g * x;
      });
}

/// Multiply by a plain constant.
template <typename T>
Var<T> scale(Var<T> input, T c) {
  Tape<T>& tape = *input.tape;
  const Tensor<T>& in = tape.value(input);
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * c;
  const int in_id = input.id;
  return tape.emplace(std::move(out), {in_id}, [in_id, c](Tape<T>& t, int self) {
    const Tensor<T>& gout = t.node_grad(self);
    Tensor<T>& gin = t.node_grad(in_id);
    for (std::size_t i = 0; i < gout.size(); ++i) gin[i] += gout[i] * c;
  });
}

/// Sum of all elements, as a scalar node.
template <typename T>
Var<T> sum(Var<T> input) {
  Tape<T>& tape = *input.tape;
  const Tensor<T>& in = tape.value(input);
  T acc = T(0);
  for (std::size_t i = 0; i < in.size(); ++i) acc += in[i];
  const int in_id = input.id;
  return tape.emplace(Tensor<T>::scalar(acc), {in_id}, [in_id](Tape<T>& t, int self) {
    const T g = t.node_grad(self)[0];
    Tensor<T>& gin = t.node_grad(in_id);
    for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += g;
  });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared error over all elements: (1/count) * sum (pred - label)^2.
template <typename T>
Var<T> mse_loss(Var<T> pred, Var<T> label) {
  Tape<T>& tape = detail::same_tape(pred, label);
  const Tensor<T>& p = tape.value(pred);
  const Tensor<T>& l = tape.value(label);
  if (!p.same_shape(l)) throw std::invalid_argument("mse_loss: shape mismatch");
  const T inv = T(1) / static_cast<T>(p.size());
  T acc = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p[i] - l[i];
    acc += d * d;
  }
  const int p_id = pred.id, l_id = label.id;
  return tape.emplace(Tensor<T>::scalar(acc * inv), {p_id, l_id},
                      [p_id, l_id, inv](Tape<T>& t, int self) {
                        const T g = t.node_grad(self)[0];
                        const Tensor<T>& p = t.node_value(p_id);
                        const Tensor<T>& l = t.node_value(l_id);
                        Tensor<T>& gp = t.node_grad(p_id);
                        Tensor<T>& gl = t.node_grad(l_id);
                        for (std::size_t i = 0; i < p.size(); ++i) {
                          const T d = T(2) * (p[i] - l[i]) * inv * g;
                          gp[i] += d;
                          gl[i] -= d;
                        }
                      });
}

/// Mean binary cross-entropy; probabilities clamped into [1e-7, 1 - 1e-7].
/// Labels must be exactly 0 or 1 and receive no gradient.
template <typename T>
Var<T> bce_loss(Var<T> prob, Var<T> label) {
  Tape<T>& tape = detail::same_tape(prob, label);
  const Tensor<T>& p = tape.value(prob);
  const Tensor<T>& l = tape.value(label);
  if (!p.same_shape(l)) throw std::invalid_argument("bce_loss: shape mismatch");
  const double eps = 1e-7;
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double y = static_cast<double>(l[i]);
    if (y != 0.0 && y != 1.0) {
      throw std::invalid_argument("bce_loss: labels must be 0 or 1");
    }
    const double pc = std::clamp(static_cast<double>(p[i]), eps, 1.0 - eps);
    acc -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
  }
  const T val = static_cast<T>(acc / static_cast<double>(p.size()));
  const int p_id = prob.id, l_id = label.id;
  return tape.emplace(Tensor<T>::scalar(val), {p_id, l_id},
                      [p_id, l_id, eps](Tape<T>& t, int self) {
                        const T g = t.node_grad(self)[0];
                        const Tensor<T>& p = t.node_value(p_id);
                        const Tensor<T>& l = t.node_value(l_id);
                        Tensor<T>& gp = t.node_grad(p_id);
                        const double inv = 1.0 / static_cast<double>(p.size());
                        for (std::size_t i = 0; i < p.size(); ++i) {
                          const double pv = static_cast<double>(p[i]);
                          if (pv <= eps || pv >= 1.0 - eps) continue;  // clamped: zero slope
                          const double y = static_cast<double>(l[i]);
                          const double d = (-(y / pv) + (1.0 - y) / (1.0 - pv)) * inv;
                          gp[i] += static_cast<T>(d) * g;
                        }
                      });
}

/// Biased HSIC between two length-N sample vectors as a differentiable scalar
/// node. Bandwidths are constants; the kernel statistic and its gradient are
/// evaluated in double regardless of T.
template <typename T>
Var<T> hsic_node(Var<T> a, Var<T> b, double sigma_a, double sigma_b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& ta = tape.value(a);
  const Tensor<T>& tb = tape.value(b);
  if (ta.rank() != 1 || tb.rank() != 1 || ta.size() != tb.size()) {
    throw std::invalid_argument("hsic_node: expects two length-N vectors");
  }
  std::vector<double> av(ta.size()), bv(tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) av[i] = static_cast<double>(ta[i]);
  for (std::size_t i = 0; i < tb.size(); ++i) bv[i] = static_cast<double>(tb[i]);
  const kernel::HsicResult res = kernel::hsic_biased(av, bv, sigma_a, sigma_b);
  const int a_id = a.id, b_id = b.id;
  return tape.emplace(
      Tensor<T>::scalar(static_cast<T>(res.value)), {a_id, b_id},
      [a_id, b_id, sigma_a, sigma_b](Tape<T>& t, int self) {
        const T g = t.node_grad(self)[0];
        const Tensor<T>& ta = t.node_value(a_id);
        const Tensor<T>& tb = t.node_value(b_id);
        std::vector<double> av(ta.size()), bv(tb.size());
        for (std::size_t i = 0; i < ta.size(); ++i) av[i] = static_cast<double>(ta[i]);
        for (std::size_t i = 0; i < tb.size(); ++i) bv[i] = static_cast<double>(tb[i]);
        const kernel::HsicGradient hg =
            kernel::hsic_with_gradient(av, bv, sigma_a, sigma_b);
        Tensor<T>& ga = t.node_grad(a_id);
        Tensor<T>& gb = t.node_grad(b_id);
        for (std::size_t i = 0; i < ga.size(); ++i) {
          ga[i] += g * static_cast<T>(hg.grad_a[i][0]);
          gb[i] += g * static_cast<T>(hg.grad_b[i][0]);
        }
      });
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename F>
double eval_scalar(F&& f, const Tensor<T>& x) {
  Tape<T> tape;
  Var<T> v = tape.leaf(x);
  Var<T> out = f(tape, v);
  const Tensor<T>& val = tape.value(out);
  if (val.size() != 1) {
    throw std::invalid_argument("finite_difference_check: f must return a scalar");
  }
  const double s = static_cast<double>(val[0]);
  if (!std::isfinite(s)) {
    throw std::runtime_error("finite_difference_check: non-finite evaluation");
  }
  return s;
}

}  // namespace detail

/// Central-difference check of backward() for the selected coordinates of x.
/// f maps (tape, var) to a scalar var. Returns the max relative error with a
/// max(1, |analytic|) denominator.
template <typename T, typename F>
double finite_difference_check(F&& f, const Tensor<T>& x, double epsilon,
                               const std::vector<std::size_t>& coords) {
  if (epsilon < 1e-7 || epsilon > 1e-3) {
    throw std::invalid_argument("finite_difference_check: epsilon outside [1e-7, 1e-3]");
  }
  Tape<T> tape;
  Var<T> v = tape.leaf(x);
  Var<T> out = f(tape, v);
  if (tape.value(out).size() != 1) {
    throw std::invalid_argument("finite_difference_check: f must return a scalar");
  }
  tape.backward(out);
  const Tensor<T> analytic = tape.grad(v);

  double max_err = 0.0;
  for (std::size_t i : coords) {
    Tensor<T> xp = x;
    Tensor<T> xm = x;
    xp[i] += static_cast<T>(epsilon);
    xm[i] -= static_cast<T>(epsilon);
    const double fp = detail::eval_scalar(f, xp);
    const double fm = detail::eval_scalar(f, xm);
    const double fd = (fp - fm) / (2.0 * epsilon);
    const double an = static_cast<double>(analytic[i]);
    const double err = std::abs(fd - an) / std::max(1.0, std::abs(an));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

/// Full-coordinate variant.
template <typename T, typename F>
double finite_difference_check(F&& f, const Tensor<T>& x, double epsilon) {
  std::vector<std::size_t> coords(x.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  return finite_difference_check(std::forward<F>(f), x, epsilon, coords);
}

}  // namespace debias
