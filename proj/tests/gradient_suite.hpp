#pragma once

// Finite-difference verification of every differentiable operation, the HSIC
// node, and the full composite loss, in 64-bit mode at eps = 1e-4. Shared by
// the unit tests (few seeds) and the acceptance suite (>= 10 seeds).

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "debias/autodiff.hpp"
#include "debias/networks.hpp"
#include "debias/rng.hpp"
#include "debias/tensor.hpp"
#include "debias/training.hpp"

namespace testutil {

using debias::RandomStream;
using debias::Tape;
using debias::Tensor;
using debias::Var;
using TD = Tensor<double>;

inline TD random_tensor(std::vector<std::size_t> shape, RandomStream& rng,
                        double lo = -1.0, double hi = 1.0) {
  TD t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Values separated by at least `gap` so central differences never straddle a
// relu kink or a maxpool argmax switch.
inline TD random_tensor_spaced(std::vector<std::size_t> shape, RandomStream& rng,
                               double gap = 0.01) {
  TD t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    double v;
    do {
      v = rng.uniform(-1.0, 1.0);
    } while (std::abs(v) < gap);
    t[i] = v;
  }
  // Nudge near-duplicates apart (matters for maxpool windows).
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(t[i] - t[j]) < gap) t[i] += 3.0 * gap;
    }
  }
  return t;
}

struct GradCase {
  std::string name;
  double max_err = 0.0;
};

/// Runs the op-level suite over `seeds` seeded inputs; appends the worst
/// error per op. kEps matches the verification contract.
inline constexpr double kEps = 1e-4;

inline std::vector<GradCase> op_gradient_suite(int seeds) {
  std::vector<GradCase> cases;
  auto record = [&](const std::string& name, double err) {
    for (auto& c : cases) {
      if (c.name == name) {
        c.max_err = std::max(c.max_err, err);
        return;
      }
    }
    cases.push_back({name, err});
  };

  for (int seed = 0; seed < seeds; ++seed) {
    RandomStream rng(static_cast<std::uint64_t>(seed) * 7919 + 17);

    {  // conv2d w.r.t. input, weights, bias (3x3 pad 1 and 1x1 pad 0)
      const TD x = random_tensor({2, 2, 4, 4}, rng);
      const TD w = random_tensor({3, 2, 3, 3}, rng);
      const TD b = random_tensor({3}, rng);
      const TD label = random_tensor({2, 3, 4, 4}, rng);
      auto via_input = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(conv2d(v, t.leaf(w), t.leaf(b), 1), t.leaf(label));
      };
      record("conv2d/input", finite_difference_check(via_input, x, kEps));
      auto via_weights = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(conv2d(t.leaf(x), v, t.leaf(b), 1), t.leaf(label));
      };
      record("conv2d/weights", finite_difference_check(via_weights, w, kEps));
      auto via_bias = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(conv2d(t.leaf(x), t.leaf(w), v, 1), t.leaf(label));
      };
      record("conv2d/bias", finite_difference_check(via_bias, b, kEps));

      const TD w1 = random_tensor({3, 2, 1, 1}, rng);
      const TD label1 = random_tensor({2, 3, 4, 4}, rng);
      auto via_w1 = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(conv2d(t.leaf(x), v, t.leaf(b), 0), t.leaf(label1));
      };
      record("conv2d/1x1", finite_difference_check(via_w1, w1, kEps));
    }

    {  // maxpool2d
      const TD x = random_tensor_spaced({1, 2, 4, 4}, rng);
      const TD label = random_tensor({1, 2, 2, 2}, rng);
      auto f = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(maxpool2d(v), t.leaf(label));
      };
      record("maxpool2d", finite_difference_check(f, x, kEps));
    }

    {  // upsample_nearest
      const TD x = random_tensor({1, 2, 3, 3}, rng);
      const TD label = random_tensor({1, 2, 6, 6}, rng);
      auto f = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(upsample_nearest(v), t.leaf(label));
      };
      record("upsample_nearest", finite_difference_check(f, x, kEps));
    }

    {  // concat_channels (both slots)
      const TD a = random_tensor({2, 2, 3, 3}, rng);
      const TD b = random_tensor({2, 1, 3, 3}, rng);
      const TD label = random_tensor({2, 3, 3, 3}, rng);
      auto via_a = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(concat_channels(v, t.leaf(b)), t.leaf(label));
      };
      record("concat_channels/a", finite_difference_check(via_a, a, kEps));
      auto via_b = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(concat_channels(t.leaf(a), v), t.leaf(label));
      };
      record("concat_channels/b", finite_difference_check(via_b, b, kEps));
    }

    {  // affine w.r.t. all three arguments
      const TD x = random_tensor({3, 4}, rng);
      const TD w = random_tensor({4, 2}, rng);
      const TD b = random_tensor({2}, rng);
      const TD label = random_tensor({3, 2}, rng);
      auto via_x = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(affine(v, t.leaf(w), t.leaf(b)), t.leaf(label));
      };
      record("affine/input", finite_difference_check(via_x, x, kEps));
      auto via_w = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(affine(t.leaf(x), v, t.leaf(b)), t.leaf(label));
      };
      record("affine/weights", finite_difference_check(via_w, w, kEps));
      auto via_b = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(affine(t.leaf(x), t.leaf(w), v), t.leaf(label));
      };
      record("affine/bias", finite_difference_check(via_b, b, kEps));
    }

    {  // elementwise family
      const TD x = random_tensor_spaced({2, 5}, rng);
      const TD other = random_tensor({2, 5}, rng);
      const TD label = random_tensor({2, 5}, rng);
      auto f_relu = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(relu(v), t.leaf(label));
      };
      record("relu", finite_difference_check(f_relu, x, kEps));
      auto f_sig = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(sigmoid(v), t.leaf(label));
      };
      record("sigmoid", finite_difference_check(f_sig, x, kEps));
      auto f_add = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(add(v, t.leaf(other)), t.leaf(label));
      };
      record("add", finite_difference_check(f_add, x, kEps));
      auto f_sub = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(sub(v, t.leaf(other)), t.leaf(label));
      };
      record("sub", finite_difference_check(f_sub, x, kEps));
      auto f_mul = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(mul(v, t.leaf(other)), t.leaf(label));
      };
      record("mul", finite_difference_check(f_mul, x, kEps));
      auto f_scale = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(scale(v, 1.7), t.leaf(label));
      };
      record("scale", finite_difference_check(f_scale, x, kEps));
      auto f_sum = [&](Tape<double>&, Var<double> v) { return sum(mul(v, v)); };
      record("sum", finite_difference_check(f_sum, x, kEps));
    }

    {  // reshape and column
      const TD x = random_tensor({2, 6}, rng);
      const TD label = random_tensor({3, 4}, rng);
      auto f_reshape = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(reshape(v, {3, 4}), t.leaf(label));
      };
      record("reshape", finite_difference_check(f_reshape, x, kEps));
      const TD collabel = random_tensor({2}, rng);
      auto f_col = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(column(v, 1), t.leaf(collabel));
      };
      record("column", finite_difference_check(f_col, x, kEps));
    }

    {  // mse gradient at pred
      const TD pred = random_tensor({2, 4}, rng);
      const TD label = random_tensor({2, 4}, rng);
      auto f = [&](Tape<double>& t, Var<double> v) {
        return mse_loss(v, t.leaf(label));
      };
      record("mse_loss", finite_difference_check(f, pred, kEps));
    }

    {  // bce gradient at prob
      TD prob = random_tensor({6}, rng, 0.05, 0.95);
      TD label({6});
      for (std::size_t i = 0; i < 6; ++i) label[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      auto f = [&](Tape<double>& t, Var<double> v) {
        return bce_loss(v, t.leaf(label));
      };
      record("bce_loss", finite_difference_check(f, prob, kEps));
    }

    {  // hsic node w.r.t. both sample vectors, n = 16 scalars
      const TD a = random_tensor({16}, rng);
      const TD b = random_tensor({16}, rng);
      const double sa = 0.8, sb = 1.1;
      auto via_a = [&](Tape<double>& t, Var<double> v) {
        return hsic_node(v, t.leaf(b), sa, sb);
      };
      record("hsic/a", finite_difference_check(via_a, a, kEps));
      auto via_b = [&](Tape<double>& t, Var<double> v) {
        return hsic_node(t.leaf(a), v, sa, sb);
      };
      record("hsic/b", finite_difference_check(via_b, b, kEps));
    }
  }
  return cases;
}

/// Composite-loss check: gradient of the total loss w.r.t. every U-net
/// parameter tensor on an N-sample batch, over a seeded random subset of
/// coordinates per tensor (all coordinates for small tensors). The training
/// step treats the median-heuristic bandwidths as constants, so they are
/// computed once at the base point and held fixed while differencing. The
/// classifier is pretrained, as it always is when this loss runs: an
/// untrained classifier collapses the head spread and with it the bandwidth,
/// which blows up the curvature and with it the central-difference
/// truncation error.
inline double composite_loss_gradient_check(int seeds, std::size_t batch_n,
                                            std::size_t coords_per_tensor) {
  debias::GenConfig gen;
  gen.n_train = 192;
  gen.n_test = 2;
  gen.seed = 7;
  const debias::Dataset pretrain_data = debias::synth_generate(gen).first;
  debias::Hyperparams pre_hyper;
  pre_hyper.epochs = 3;
  pre_hyper.batch_size = 32;
  pre_hyper.seed = 7;
  const auto cls = debias::cast_classifier<double>(
      debias::pretrain_classifier(pretrain_data, pre_hyper));

  double worst = 0.0;
  for (int seed = 0; seed < seeds; ++seed) {
    RandomStream rng(static_cast<std::uint64_t>(seed) * 104729 + 3);
    const auto unet = debias::init_unet<double>(static_cast<std::uint64_t>(seed));
    TD batch({batch_n, 1, 16, 16});
    for (std::size_t i = 0; i < batch_n; ++i) {
      const debias::Example& ex =
          pretrain_data.examples[rng.uniform_int(pretrain_data.size())];
      for (std::size_t px = 0; px < 256; ++px) {
        batch[i * 256 + px] = static_cast<double>(ex.image[px]);
      }
    }
    const double lambda = 0.07;

    double sigma_a = 0.0, sigma_b = 0.0;
    {
      Tape<double> tape;
      auto up = debias::bind_params(tape, unet.params, false);
      auto cp = debias::bind_params(tape, cls.params, false);
      auto x = tape.leaf(batch);
      auto recon = unet_forward(tape, up, x);
      auto [h1, h2] = classifier_forward(tape, cp, recon);
      const auto base = debias::composite_loss(tape, x, recon, h1, h2, lambda);
      sigma_a = base.sigma_a;
      sigma_b = base.sigma_b;
    }

    for (const auto& item : unet.params.items()) {
      auto f = [&](Tape<double>& tape, Var<double> v) {
        debias::BoundParams<double> up;
        for (const auto& it : unet.params.items()) {
          up.vars[it.name] = (it.name == item.name) ? v : tape.leaf(it.tensor);
        }
        auto cp = debias::bind_params(tape, cls.params, false);
        auto x = tape.leaf(batch);
        auto recon = unet_forward(tape, up, x);
        auto [h1, h2] = classifier_forward(tape, cp, recon);
        return debias::composite_loss(tape, x, recon, h1, h2, lambda, sigma_a, sigma_b)
            .total;
      };
      std::vector<std::size_t> coords;
      if (item.tensor.size() <= coords_per_tensor) {
        for (std::size_t i = 0; i < item.tensor.size(); ++i) coords.push_back(i);
      } else {
        for (std::size_t c = 0; c < coords_per_tensor; ++c) {
          coords.push_back(static_cast<std::size_t>(rng.uniform_int(item.tensor.size())));
        }
      }
      worst = std::max(worst,
                       finite_difference_check(f, item.tensor, kEps, coords));
    }
  }
  return worst;
}

}  // namespace testutil
