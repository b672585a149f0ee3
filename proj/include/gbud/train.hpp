#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gbud/error.hpp"
#include "gbud/image_ops.hpp"
#include "gbud/model.hpp"
#include "gbud/random.hpp"
#include "gbud/synth.hpp"
#include "gbud/tape.hpp"
#include "json.hpp"

namespace gbud {

struct TrainConfig {
  ModelKind kind = ModelKind::kPlain;
  int epochs = 20;
  int batch = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  double dropout_p = 0.2;
  // Random horizontal flips of training pairs; off by default so flip
  // consistency at test time is not something the model was trained for.
  bool flip_augment = false;
  // Workers computing per-sample gradients; 0 picks the hardware count.
  // Results do not depend on this value.
  int threads = 0;

  void validate() const {
    if (epochs <= 0) throw UsageError("epochs must be positive");
    if (batch <= 0) throw UsageError("batch size must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw UsageError("Adam betas must lie in [0,1)");
    if (!(eps > 0.0)) throw UsageError("Adam epsilon must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw UsageError("dropout probability must lie in [0,1)");
    if (threads < 0) throw UsageError("threads must be >= 0");
  }

  int worker_count() const {
    if (threads > 0) return threads;
    return std::max(1u, std::thread::hardware_concurrency());
  }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)}, {"epochs", epochs},   {"batch", batch},
            {"lr", lr},                {"beta1", beta1},     {"beta2", beta2},
            {"eps", eps},              {"seed", seed},       {"dropout_p", dropout_p},
            {"flip_augment", flip_augment}};
  }
};

// ---- losses ---------------------------------------------------------------

namespace detail {

inline Tensor mask_weights(const ValidityMask& mask, const Shape& shape) {
  if (mask.size() != element_count(shape)) throw ShapeError("size", "mask does not match map size");
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  if (n == 0) throw UsageError("loss: mask selects no pixels");
  std::vector<float> w(mask.size());
  const float inv = static_cast<float>(1.0 / static_cast<double>(n));
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? inv : 0.0f;
  return Tensor(shape, std::move(w));
}

}  // namespace detail

/// Mean over masked pixels of (d - y)^2, recorded on `tape`.
template <typename T>
NodeId loss_l2(BasicTape<T>& tape, NodeId d, NodeId y, const ValidityMask& mask) {
  const auto& shape = tape.value(d).shape();
  if (tape.value(y).shape() != shape) throw ShapeError("shape", "loss_l2: prediction and target shapes differ");
  const NodeId w = tape.leaf(detail::mask_weights(mask, shape).template cast<T>());
  return tape.sum(tape.mul(tape.unary(UnaryKind::kSquare, tape.sub(d, y)), w));
}

/// Mean over masked pixels of 0.5 (d - y)^2 / var + 0.5 ln var.
template <typename T>
NodeId loss_gaussian_nll(BasicTape<T>& tape, NodeId d, NodeId var, NodeId y, const ValidityMask& mask) {
  const auto& shape = tape.value(d).shape();
  if (tape.value(y).shape() != shape || tape.value(var).shape() != shape) {
    throw ShapeError("shape", "loss_gaussian_nll: prediction, variance and target shapes differ");
  }
  for (T v : tape.value(var).data()) {
    if (!(v > T{0})) throw NumericError("loss_gaussian_nll: variance must be positive");
  }
  const NodeId w = tape.leaf(detail::mask_weights(mask, shape).template cast<T>());
  const NodeId fit = tape.div(tape.unary(UnaryKind::kSquare, tape.sub(d, y)), var);
  const NodeId per_pixel = tape.affine(tape.add(fit, tape.unary(UnaryKind::kLog, var)), 0.5, 0.0);
  return tape.sum(tape.mul(per_pixel, w));
}

inline double loss_l2(const Tensor& d, const Tensor& y, const ValidityMask& mask) {
  Tape t;
  const NodeId dn = t.leaf(d);
  const NodeId yn = t.leaf(y);
  return t.value(loss_l2(t, dn, yn, mask)).item();
}

inline double loss_gaussian_nll(const Tensor& d, const Tensor& var, const Tensor& y, const ValidityMask& mask) {
  Tape t;
  const NodeId dn = t.leaf(d);
  const NodeId vn = t.leaf(var);
  const NodeId yn = t.leaf(y);
  return t.value(loss_gaussian_nll(t, dn, vn, yn, mask)).item();
}

// ---- optimisation ---------------------------------------------------------

/// Flat gradient buffers, two per layer (weight, then bias).
using ParamGrads = std::vector<std::vector<float>>;

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

inline ParamGrads zero_grads(const DepthNet& net) {
  ParamGrads g;
  for (const auto& l : net.layers) {
    g.emplace_back(l.weight.size(), 0.0f);
    g.emplace_back(l.bias.size(), 0.0f);
  }
  return g;
}

struct SampleLoss {
  double loss = 0.0;
  ParamGrads grads;
};

/// Loss of one training pair under `kind`'s objective plus its weight
/// gradients. `dropout_seed` drives the dropout mask for dropout models.
inline SampleLoss sample_gradients(const DepthNet& net, const Sample& s, ModelKind kind, double dropout_p,
                                   std::uint64_t dropout_seed, bool want_grads = true) {
  ForwardOptions opts;
  opts.trainable = want_grads;
  Rng rng(dropout_seed);
  if (kind == ModelKind::kDropout) {
    opts.dropout_active = true;
    opts.dropout_p = dropout_p;
  }
  Prediction p = forward(net, s.image, opts, &rng);
  auto& tape = p.tape;
  const NodeId y = tape.leaf(s.depth);
  NodeId loss;
  if (kind == ModelKind::kLog) {
    if (!p.variance) throw UsageError("log objective needs a variance head");
    loss = loss_gaussian_nll(tape, p.depth, *p.variance, y, s.mask);
  } else {
    loss = loss_l2(tape, p.depth, y, s.mask);
  }
  SampleLoss out;
  out.loss = tape.value(loss).item();
  if (!want_grads) return out;
  const auto gmap = backward(tape, loss);
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    out.grads.push_back(gmap.raw(p.weight_nodes[l]));
    out.grads.push_back(gmap.raw(p.bias_nodes[l]));
    for (int k = 0; k < 2; ++k) {
      auto& g = out.grads[out.grads.size() - 2 + static_cast<std::size_t>(k)];
      if (g.empty()) g.assign(k == 0 ? net.layers[l].weight.size() : net.layers[l].bias.size(), 0.0f);
    }
  }
  return out;
}

struct BatchGradients {
  double loss = 0.0;  // mean of per-sample losses
  ParamGrads grads;   // mean of per-sample gradients
};

/// Per-sample gradients are computed independently (in parallel when
/// `threads` > 1) and then averaged in sample order, so the result is the
/// same for any thread count.
inline BatchGradients batch_gradients(const DepthNet& net, const std::vector<const Sample*>& batch, ModelKind kind,
                                      double dropout_p, const std::vector<std::uint64_t>& dropout_seeds, int threads) {
  if (batch.empty()) throw UsageError("batch_gradients: empty batch");
  if (dropout_seeds.size() != batch.size()) throw UsageError("batch_gradients: one dropout seed per sample required");
  std::vector<SampleLoss> per(batch.size());
  std::vector<std::exception_ptr> errors(batch.size());
  auto work = [&](std::size_t i) {
    try {
      per[i] = sample_gradients(net, *batch[i], kind, dropout_p, dropout_seeds[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), batch.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < batch.size(); i += workers) work(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  BatchGradients out;
  out.grads = zero_grads(net);
  const double inv = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& s : per) loss += s.loss;
  out.loss = loss * inv;
  for (std::size_t p = 0; p < out.grads.size(); ++p) {
    auto& g = out.grads[p];
    for (std::size_t k = 0; k < g.size(); ++k) {
      double acc = 0.0;
      for (const auto& s : per) acc += s.grads[p][k];
      g[k] = static_cast<float>(acc * inv);
    }
  }
  return out;
}

/// One bias-corrected Adam update of every weight and bias.
inline void adam_step(DepthNet& net, AdamState& state, const ParamGrads& grads, const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& g : grads) {
      state.m.emplace_back(g.size(), 0.0);
      state.v.emplace_back(g.size(), 0.0);
    }
  }
  if (grads.size() != state.m.size() || grads.size() != 2 * net.layers.size()) {
    throw UsageError("adam_step: gradient layout does not match the network");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < grads.size(); ++p) {
    const auto& param = (p % 2 == 0) ? net.layers[p / 2].weight : net.layers[p / 2].bias;
    std::vector<float> w(param.data().begin(), param.data().end());
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = grads[p][k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      const double step = cfg.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
      w[k] = static_cast<float>(w[k] - step);
      if (!std::isfinite(w[k])) throw NumericError("training diverged: non-finite weight after update");
    }
    Tensor updated(param.shape(), std::move(w));
    if (p % 2 == 0) {
      net.layers[p / 2].weight = std::move(updated);
    } else {
      net.layers[p / 2].bias = std::move(updated);
    }
  }
}

/// Mean objective (no dropout, no gradients) over a set of samples.
inline double mean_loss(const DepthNet& net, const std::vector<Sample>& samples, ModelKind kind) {
  if (samples.empty()) throw UsageError("mean_loss: no samples");
  const ModelKind objective = kind == ModelKind::kLog ? ModelKind::kLog : ModelKind::kPlain;
  double acc = 0.0;
  for (const auto& s : samples) acc += sample_gradients(net, s, objective, 0.0, 0, false).loss;
  return acc / static_cast<double>(samples.size());
}

// ---- training loop --------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  DepthNet net;
  double initial_val_loss = 0.0;
  std::vector<EpochLog> log;
};

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, {0x73687566ull, static_cast<std::uint64_t>(epoch)}));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                         const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw UsageError("train: empty training split");
  if (val_set.empty()) throw UsageError("train: empty validation split");
  ArchConfig arch = ArchConfig::for_kind(cfg.kind);
  arch.dropout_p = cfg.dropout_p;

  TrainResult result;
  result.net = build_model(arch, cfg.seed);
  result.initial_val_loss = mean_loss(result.net, val_set, cfg.kind);
  AdamState adam;
  const int threads = cfg.worker_count();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(train_set.size(), cfg.seed, epoch);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<Sample> flipped;
      std::vector<const Sample*> batch;
      std::vector<std::uint64_t> seeds;
      if (cfg.flip_augment) flipped.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const std::uint64_t s = derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), order[k]});
        const Sample* src = &train_set[order[k]];
        if (cfg.flip_augment && (s & 1u)) {
          Sample f = *src;
          f.image = flip_horizontal(src->image);
          f.depth = flip_horizontal(src->depth);
          f.mask = flip_horizontal(src->mask, src->depth.dim(1), src->depth.dim(2));
          flipped.push_back(std::move(f));
          src = &flipped.back();
        }
        batch.push_back(src);
        seeds.push_back(s);
      }
      BatchGradients bg;
      try {
        bg = batch_gradients(result.net, batch, cfg.kind, cfg.dropout_p, seeds, threads);
      } catch (const NumericError& e) {
        throw NumericError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (!std::isfinite(bg.loss)) throw NumericError("training diverged in epoch " + std::to_string(epoch));
      adam_step(result.net, adam, bg.grads, cfg);
      epoch_loss += bg.loss;
      ++batches;
    }
    EpochLog row{epoch, epoch_loss / static_cast<double>(batches), mean_loss(result.net, val_set, cfg.kind)};
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

inline std::vector<Sample> load_split(const Dataset& data, const std::string& split) {
  const auto r = data.split(split);
  std::vector<Sample> out;
  out.reserve(r.size());
  for (std::size_t i = r.begin; i < r.end; ++i) out.push_back(data.load(i));
  return out;
}

inline TrainResult train(const Dataset& data, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  return train(load_split(data, "train"), load_split(data, "val"), cfg, on_epoch);
}

inline std::string format_training_log(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss\n";
  out << std::fixed << std::setprecision(6);
  for (const auto& r : log) out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << '\n';
  return out.str();
}

inline void write_training_log(const std::vector<EpochLog>& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write " + path);
  out << format_training_log(log);
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed for " + path);
}

}  // namespace gbud
