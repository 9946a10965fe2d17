#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "debias/autodiff.hpp"
#include "debias/data.hpp"
#include "debias/hsic.hpp"
#include "debias/io.hpp"
#include "debias/networks.hpp"

namespace debias {

/// Optimizer schedule and loss weighting. learning_rate/momentum/step/gamma
/// and the 5-epoch, lambda = 0.07 defaults follow the reference recipe; the
/// batch size default of 64 is the desk-scale choice (reference value 128).
struct Hyperparams {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  int lr_step = 7;
  double lr_gamma = 0.1;
  int epochs = 5;
  std::size_t batch_size = 64;
  double lambda = 0.07;
  std::uint64_t seed = 0;

  void validate() const {
    if (learning_rate <= 0.0 || momentum < 0.0 || lr_step <= 0 || lr_gamma <= 0.0 ||
        epochs <= 0 || batch_size < 2) {
      throw std::invalid_argument("hyperparams: schedule values must be positive");
    }
    if (lambda < 0.0) throw std::invalid_argument("hyperparams: lambda must be >= 0");
  }
};

/// Step decay: lr = base * gamma^floor(epoch / step).
inline double step_lr(int epoch, double base_lr, int step, double gamma) {
  if (epoch < 0) throw std::invalid_argument("step_lr: epoch must be >= 0");
  return base_lr * std::pow(gamma, static_cast<double>(epoch / step));
}

/// Per-parameter momentum buffers, zero-initialized on first use.
template <typename T>
struct OptimState {
  std::map<std::string, Tensor<T>> velocity;
};

/// Classic momentum: v <- momentum * v + g; p <- p - lr * v.
template <typename T>
void sgd_step(ParamSet<T>& params, const std::map<std::string, Tensor<T>>& grads,
              OptimState<T>& state, double lr, double momentum) {
  for (auto& item : params.items()) {
    const auto git = grads.find(item.name);
    if (git == grads.end()) {
      throw std::invalid_argument("sgd_step: no gradient for " + item.name);
    }
    const Tensor<T>& g = git->second;
    if (!g.same_shape(item.tensor)) {
      throw std::invalid_argument("sgd_step: gradient shape mismatch for " + item.name);
    }
    Tensor<T>& v = state.velocity[item.name];
    if (v.size() == 0) v = Tensor<T>(item.tensor.shape());
    const T mu = static_cast<T>(momentum);
    const T eta = static_cast<T>(lr);
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = mu * v[i] + g[i];
      item.tensor[i] -= eta * v[i];
    }
  }
}

/// The composite objective: pixel MSE plus lambda times the HSIC between the
/// two classifier heads, with per-batch median-heuristic bandwidths.
template <typename T>
struct CompositeLoss {
  Var<T> total;
  Var<T> mse;
  Var<T> hsic;
  double sigma_a = 0.0;
  double sigma_b = 0.0;
  double mse_value = 0.0;
  double hsic_value = 0.0;
  double total_value = 0.0;
};

/// Fixed-bandwidth variant; this is the exact function whose gradient each
/// training step follows (no gradient flows through the bandwidths).
template <typename T>
CompositeLoss<T> composite_loss(Tape<T>& tape, Var<T> batch, Var<T> recon,
                                Var<T> h1, Var<T> h2, double lambda,
                                double sigma_a, double sigma_b) {
  const Tensor<T>& h1v = tape.value(h1);
  const Tensor<T>& h2v = tape.value(h2);
  if (h1v.size() < 2) {
    throw std::invalid_argument("composite_loss: need at least 2 samples");
  }
  if (h1v.size() != h2v.size()) {
    throw std::invalid_argument("composite_loss: head length mismatch");
  }
  CompositeLoss<T> out;
  out.sigma_a = sigma_a;
  out.sigma_b = sigma_b;
  out.mse = mse_loss(recon, batch);
  out.hsic = hsic_node(h1, h2, sigma_a, sigma_b);
  out.total = add(out.mse, scale(out.hsic, static_cast<T>(lambda)));
  out.mse_value = static_cast<double>(tape.value(out.mse)[0]);
  out.hsic_value = static_cast<double>(tape.value(out.hsic)[0]);
  out.total_value = static_cast<double>(tape.value(out.total)[0]);
  return out;
}

/// Bandwidths from the per-batch median heuristic over the current head values.
template <typename T>
CompositeLoss<T> composite_loss(Tape<T>& tape, Var<T> batch, Var<T> recon,
                                Var<T> h1, Var<T> h2, double lambda) {
  const Tensor<T>& h1v = tape.value(h1);
  const Tensor<T>& h2v = tape.value(h2);
  if (h1v.size() < 2) {
    throw std::invalid_argument("composite_loss: need at least 2 samples");
  }
  if (h1v.size() != h2v.size()) {
    throw std::invalid_argument("composite_loss: head length mismatch");
  }
  std::vector<double> a(h1v.size()), b(h2v.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<double>(h1v[i]);
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<double>(h2v[i]);
  return composite_loss(tape, batch, recon, h1, h2, lambda,
                        kernel::median_bandwidth(a), kernel::median_bandwidth(b));
}

struct TrainRecord {
  int epoch = 0;
  int batch = 0;
  double mse = 0.0;
  double hsic = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  // Final-epoch means.
  double final_mse = 0.0;
  double final_hsic = 0.0;
  double final_total = 0.0;

  void finalize(int last_epoch) {
    double m = 0.0, h = 0.0, t = 0.0;
    std::size_t count = 0;
    for (const auto& r : records) {
      if (r.epoch != last_epoch) continue;
      m += r.mse;
      h += r.hsic;
      t += r.total;
      ++count;
    }
    if (count > 0) {
      final_mse = m / static_cast<double>(count);
      final_hsic = h / static_cast<double>(count);
      final_total = t / static_cast<double>(count);
    }
  }
};

inline std::string train_log_csv(const TrainLog& log) {
  std::string out = "epoch,batch,mse,hsic,total,lr\n";
  for (const auto& r : log.records) {
    out += std::to_string(r.epoch) + "," + std::to_string(r.batch) + "," +
           format_sig9(r.mse) + "," + format_sig9(r.hsic) + "," +
           format_sig9(r.total) + "," + format_sig9(r.lr) + "\n";
  }
  return out;
}

inline void write_train_log(const TrainLog& log, const std::filesystem::path& path) {
  atomic_write_text(path, train_log_csv(log));
}

namespace detail {

inline void require_both_classes(const TensorF& labels, const std::string& what) {
  bool has0 = false, has1 = false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (labels[i] > 0.5f ? has1 : has0) = true;
  }
  if (!has0 || !has1) {
    throw std::invalid_argument("pretrain: " + what +
                                " labels are single-class; training is ill-posed");
  }
}

inline TensorF all_labels(const Dataset& ds, LabelKind kind, std::size_t aux_index) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return batch_labels(ds, idx, kind, aux_index);
}

}  // namespace detail

/// Supervised pre-training of the frozen classifier: minimizes
/// bce(h1, y) + bce(h2, s) with SGD momentum under the step-decay schedule.
inline ClassifierParams<float> pretrain_classifier(const Dataset& train,
                                                   const Hyperparams& hyper) {
  hyper.validate();
  if (train.size() == 0) throw std::invalid_argument("pretrain: empty dataset");
  detail::require_both_classes(detail::all_labels(train, LabelKind::Target, 0), "target");
  detail::require_both_classes(detail::all_labels(train, LabelKind::Protected, 0),
                               "protected");
  ClassifierParams<float> cls = init_classifier<float>(hyper.seed, 2);
  OptimState<float> state;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const double lr = step_lr(epoch, hyper.learning_rate, hyper.lr_step, hyper.lr_gamma);
    const auto batches = batch_iter(train, hyper.batch_size,
                                    hyper.seed + static_cast<std::uint64_t>(epoch));
    for (const auto& idx : batches) {
      Tape<float> tape;
      auto bound = bind_params(tape, cls.params, true);
      auto x = tape.leaf(batch_images(train, idx));
      auto [h1, h2] = classifier_forward(tape, bound, x);
      auto y = tape.leaf(batch_labels(train, idx, LabelKind::Target));
      auto s = tape.leaf(batch_labels(train, idx, LabelKind::Protected));
      auto loss = add(bce_loss(h1, y), bce_loss(h2, s));
      const auto grads = tape.backward(loss);
      sgd_step(cls.params, grads, state, lr, hyper.momentum);
    }
  }
  cls.frozen = true;
  return cls;
}

/// Single-head variant predicting one auxiliary attribute.
inline ClassifierParams<float> pretrain_attribute_classifier(const Dataset& train,
                                                             std::size_t aux_index,
                                                             const Hyperparams& hyper) {
  hyper.validate();
  if (aux_index >= train.aux_names.size()) {
    throw std::invalid_argument("pretrain: aux index out of range");
  }
  detail::require_both_classes(detail::all_labels(train, LabelKind::Aux, aux_index),
                               train.aux_names[aux_index]);
  ClassifierParams<float> cls = init_classifier<float>(hyper.seed, 1);
  OptimState<float> state;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const double lr = step_lr(epoch, hyper.learning_rate, hyper.lr_step, hyper.lr_gamma);
    const auto batches = batch_iter(train, hyper.batch_size,
                                    hyper.seed + static_cast<std::uint64_t>(epoch));
    for (const auto& idx : batches) {
      Tape<float> tape;
      auto bound = bind_params(tape, cls.params, true);
      auto x = tape.leaf(batch_images(train, idx));
      auto heads = classifier_heads(tape, bound, 1, x);
      auto a = tape.leaf(batch_labels(train, idx, LabelKind::Aux, aux_index));
      auto loss = bce_loss(heads[0], a);
      const auto grads = tape.backward(loss);
      sgd_step(cls.params, grads, state, lr, hyper.momentum);
    }
  }
  cls.frozen = true;
  return cls;
}

/// HSIC-regularized reconstruction training. Only the U-net parameters are
/// updated; the classifier is bound as constants and gradients flow through
/// it to the reconstructor.
inline std::pair<UNetParams<float>, TrainLog> train_debiaser(
    const Dataset& train, const ClassifierParams<float>& classifier,
    const Hyperparams& hyper) {
  hyper.validate();
  if (!classifier.frozen) {
    throw std::invalid_argument("train_debiaser: classifier must be frozen");
  }
  if (classifier.head_width != 2) {
    throw std::invalid_argument("train_debiaser: classifier must be two-headed");
  }
  UNetParams<float> unet = init_unet<float>(hyper.seed);
  OptimState<float> state;
  TrainLog log;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const double lr = step_lr(epoch, hyper.learning_rate, hyper.lr_step, hyper.lr_gamma);
    const auto batches = batch_iter(train, hyper.batch_size,
                                    hyper.seed + static_cast<std::uint64_t>(epoch));
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Tape<float> tape;
      auto ubound = bind_params(tape, unet.params, true);
      auto cbound = bind_params(tape, classifier.params, false);
      auto x = tape.leaf(batch_images(train, batches[bi]));
      auto recon = unet_forward(tape, ubound, x);
      auto [h1, h2] = classifier_forward(tape, cbound, recon);
      const auto loss = composite_loss(tape, x, recon, h1, h2, hyper.lambda);
      const auto grads = tape.backward(loss.total);
      sgd_step(unet.params, grads, state, lr, hyper.momentum);
      log.records.push_back({epoch, static_cast<int>(bi), loss.mse_value,
                             loss.hsic_value, loss.total_value, lr});
    }
  }
  log.finalize(hyper.epochs - 1);
  return {std::move(unet), std::move(log)};
}

}  // namespace debias
