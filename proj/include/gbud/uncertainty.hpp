#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gbud/error.hpp"
#include "gbud/image_ops.hpp"
#include "gbud/model.hpp"
#include "gbud/random.hpp"
#include "gbud/tape.hpp"
#include "json.hpp"

namespace gbud {

// ---- configuration --------------------------------------------------------

/// How the reference depth for the auxiliary loss is produced.
enum class AuxTransform { kFlip, kGt, kGray, kNoise, kRot5, kRot10, kRot20 };

inline const char* to_string(AuxTransform t) {
  switch (t) {
    case AuxTransform::kFlip: return "flip";
    case AuxTransform::kGt: return "gt";
    case AuxTransform::kGray: return "gray";
    case AuxTransform::kNoise: return "noise";
    case AuxTransform::kRot5: return "rot5";
    case AuxTransform::kRot10: return "rot10";
    case AuxTransform::kRot20: return "rot20";
  }
  return "flip";
}

inline AuxTransform parse_aux_transform(const std::string& s) {
  for (AuxTransform t : {AuxTransform::kFlip, AuxTransform::kGt, AuxTransform::kGray, AuxTransform::kNoise,
                         AuxTransform::kRot5, AuxTransform::kRot10, AuxTransform::kRot20}) {
    if (s == to_string(t)) return t;
  }
  throw UsageError("unknown transform '" + s + "' (expected flip|gt|gray|noise|rot5|rot10|rot20)");
}

inline double rotation_degrees(AuxTransform t) {
  switch (t) {
    case AuxTransform::kRot5: return 5.0;
    case AuxTransform::kRot10: return 10.0;
    case AuxTransform::kRot20: return 20.0;
    default: return 0.0;
  }
}

inline constexpr double kNoiseStd = 0.05;
inline constexpr int kDropoutPasses = 8;
inline constexpr double kInferenceDropout = 0.2;

struct UncertConfig {
  int layer = 6;
  double lambda = 2.0;
  AuxTransform transform = AuxTransform::kFlip;
  // Channel max over |g| (true) or signed g (false).
  bool use_abs = true;
  // Exponent of the variance term in the Bayesian auxiliary loss.
  int variance_power = 1;
  std::uint64_t seed = 0;
  int dropout_passes = kDropoutPasses;
  double dropout_p = kInferenceDropout;

  void validate(int decoder_layers = 6) const {
    if (layer < 1 || layer > decoder_layers) {
      throw UsageError("layer must lie in 1.." + std::to_string(decoder_layers) + ", got " + std::to_string(layer));
    }
    if (!std::isfinite(lambda) || lambda < 0.0) throw UsageError("lambda must be finite and >= 0");
    if (variance_power != 1 && variance_power != 2) throw UsageError("variance_power must be 1 or 2");
    if (dropout_passes < 1) throw UsageError("dropout passes must be >= 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw UsageError("dropout probability must lie in [0,1)");
  }

  nlohmann::json to_json() const {
    return {{"layer", layer},
            {"lambda", lambda},
            {"loss", to_string(transform)},
            {"abs", use_abs},
            {"variance_power", variance_power},
            {"seed", seed},
            {"dropout_passes", dropout_passes},
            {"dropout_p", dropout_p}};
  }
};

// ---- pass accounting ------------------------------------------------------

struct PassCounts {
  int forwards = 0;
  int backwards = 0;
  friend bool operator==(const PassCounts&, const PassCounts&) = default;
};

/// Read-only view of a network that counts every forward and backward pass
/// run through it.
class CountingNet {
 public:
  explicit CountingNet(const DepthNet& net) : net_(net) {}

  const DepthNet& net() const { return net_; }
  const PassCounts& counts() const { return counts_; }

  Prediction forward(const Tensor& x, const ForwardOptions& opts = {}, Rng* rng = nullptr) {
    ++counts_.forwards;
    return gbud::forward(net_, x, opts, rng);
  }

  GradientMap backward(const Tape& tape, NodeId loss, NodeId lowest = 0) {
    ++counts_.backwards;
    return gbud::backward(tape, loss, lowest);
  }

 private:
  const DepthNet& net_;
  PassCounts counts_;
};

// ---- transforms -----------------------------------------------------------

struct MaskedMap {
  Tensor value;
  ValidityMask valid;
};

inline ValidityMask all_valid_mask(const Tensor& t) { return ValidityMask(t.dim(t.rank() - 2) * t.dim(t.rank() - 1), 1); }

/// Image-side transform T(x). `gt` has no image transform.
inline MaskedMap transform_apply(AuxTransform kind, const Tensor& x, std::uint64_t seed) {
  require_chw(x, "transform_apply");
  switch (kind) {
    case AuxTransform::kFlip: return {flip_horizontal(x), all_valid_mask(x)};
    case AuxTransform::kGray: return {to_gray(x), all_valid_mask(x)};
    case AuxTransform::kNoise: return {add_gaussian_noise(x, kNoiseStd, seed), all_valid_mask(x)};
    case AuxTransform::kRot5:
    case AuxTransform::kRot10:
    case AuxTransform::kRot20: {
      auto [img, ok] = rotate_nearest(x, all_valid_mask(x), rotation_degrees(kind));
      return {std::move(img), std::move(ok)};
    }
    case AuxTransform::kGt: break;
  }
  throw UsageError("transform_apply: '" + std::string(to_string(kind)) + "' is not an image transform");
}

/// Maps a prediction made in the transformed frame back to the original one.
inline MaskedMap transform_invert(AuxTransform kind, const Tensor& map, const ValidityMask& valid) {
  require_chw(map, "transform_invert");
  switch (kind) {
    case AuxTransform::kFlip: return {flip_horizontal(map), flip_horizontal(valid, map.dim(1), map.dim(2))};
    case AuxTransform::kGray:
    case AuxTransform::kNoise: return {map, valid};
    case AuxTransform::kRot5:
    case AuxTransform::kRot10:
    case AuxTransform::kRot20: {
      auto [img, ok] = rotate_nearest(map, valid, -rotation_degrees(kind));
      return {std::move(img), std::move(ok)};
    }
    case AuxTransform::kGt: break;
  }
  throw UsageError("transform_invert: '" + std::string(to_string(kind)) + "' is not an image transform");
}

/// d_r: the depth predicted for T(x), mapped back by T^-1; for `gt` the
/// supplied ground truth. Returned as a plain tensor, so it never carries
/// gradients.
inline MaskedMap reference_depth(CountingNet& net, const Tensor& x, AuxTransform kind, std::uint64_t seed,
                                 const Tensor* gt = nullptr) {
  if (kind == AuxTransform::kGt) {
    if (gt == nullptr) throw UsageError("reference_depth: transform gt requires a ground-truth depth map");
    return {*gt, all_valid_mask(*gt)};
  }
  const auto t = transform_apply(kind, x, seed);
  const auto pred = net.forward(t.value);
  return transform_invert(kind, pred.depth_map(), t.valid);
}

// ---- auxiliary losses -----------------------------------------------------

namespace detail {

inline Tensor indicator(const ValidityMask& valid, const Shape& shape) {
  if (valid.size() != element_count(shape)) throw ShapeError("size", "validity mask does not match map size");
  bool any = false;
  std::vector<float> w(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) {
    w[i] = valid[i] ? 1.0f : 0.0f;
    any = any || valid[i];
  }
  if (!any) throw UsageError("auxiliary loss: no valid pixels");
  return Tensor(shape, std::move(w));
}

}  // namespace detail

/// Sum over valid pixels of (d - d_r)^2.
template <typename T>
NodeId aux_loss_plain(BasicTape<T>& tape, NodeId d, NodeId d_ref, const ValidityMask& valid) {
  const auto& shape = tape.value(d).shape();
  if (tape.value(d_ref).shape() != shape) throw ShapeError("shape", "aux_loss_plain: depth and reference differ");
  const NodeId w = tape.leaf(detail::indicator(valid, shape).template cast<T>());
  return tape.sum(tape.mul(tape.unary(UnaryKind::kSquare, tape.sub(d, d_ref)), w));
}

/// aux_loss_plain + lambda * sum over valid pixels of var^power.
template <typename T>
NodeId aux_loss_bayes(BasicTape<T>& tape, NodeId d, NodeId d_ref, NodeId var, double lambda,
                      const ValidityMask& valid, int power = 1) {
  if (power != 1 && power != 2) throw UsageError("aux_loss_bayes: power must be 1 or 2");
  for (T v : tape.value(var).data()) {
    if (!(v > T{0})) throw NumericError("aux_loss_bayes: variance must be positive");
  }
  const NodeId plain = aux_loss_plain(tape, d, d_ref, valid);
  const NodeId w = tape.leaf(detail::indicator(valid, tape.value(var).shape()).template cast<T>());
  const NodeId v = power == 2 ? tape.unary(UnaryKind::kSquare, var) : var;
  return tape.add(plain, tape.affine(tape.sum(tape.mul(v, w)), lambda, 0.0));
}

inline double aux_loss_plain(const Tensor& d, const Tensor& d_ref, const ValidityMask& valid) {
  Tape t;
  const NodeId a = t.leaf(d);
  const NodeId b = t.leaf(d_ref);
  return t.value(aux_loss_plain(t, a, b, valid)).item();
}

inline double aux_loss_bayes(const Tensor& d, const Tensor& d_ref, const Tensor& var, double lambda,
                             const ValidityMask& valid, int power = 1) {
  Tape t;
  const NodeId a = t.leaf(d);
  const NodeId b = t.leaf(d_ref);
  const NodeId v = t.leaf(var);
  return t.value(aux_loss_bayes(t, a, b, v, lambda, valid, power)).item();
}

// ---- gradient map to uncertainty -----------------------------------------

/// Per-pixel maximum over channels of |g| (use_abs) or g.
inline Tensor channel_reduce_max(const Tensor& g, bool use_abs) {
  require_chw(g, "channel_reduce_max");
  const std::size_t c = g.dim(0), n = g.dim(1) * g.dim(2);
  if (c == 0) throw ShapeError("channels", "channel_reduce_max: need at least one channel");
  const auto src = g.data();
  std::vector<float> out(n, -std::numeric_limits<float>::infinity());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < n; ++i) {
      const float v = use_abs ? std::abs(src[ch * n + i]) : src[ch * n + i];
      out[i] = std::max(out[i], v);
    }
  return Tensor(Shape{1, g.dim(1), g.dim(2)}, std::move(out));
}

/// Nearest-neighbour upsampling of a [1,h,w] map.
inline Tensor upsample_map(const Tensor& m, int factor) {
  require_chw(m, "upsample_map");
  if (m.dim(0) != 1) throw ShapeError("channels", "upsample_map: expected one channel");
  if (factor < 1) throw UsageError("upsample_map: factor must be >= 1");
  const std::size_t f = static_cast<std::size_t>(factor), H = m.dim(1) * f, W = m.dim(2) * f;
  std::vector<float> up(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) up[y * W + x] = m.at(0, y / f, x / f);
  return Tensor(Shape{1, H, W}, std::move(up));
}

/// Nearest-neighbour upsampling by `factor`, then (v - min) / (max - min)
/// with min and max over valid pixels. A constant map becomes all zeros.
/// Invalid pixels are set to 0.
inline Tensor normalize_upsample(const Tensor& g_max, int factor, const ValidityMask* valid = nullptr) {
  if (g_max.empty()) throw ShapeError("size", "normalize_upsample: empty map");
  const Tensor upt = upsample_map(g_max, factor);
  const auto up = upt.data();
  if (valid != nullptr && valid->size() != up.size()) throw ShapeError("size", "normalize_upsample: mask size mismatch");

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < up.size(); ++i) {
    if (valid != nullptr && !(*valid)[i]) continue;
    lo = std::min(lo, static_cast<double>(up[i]));
    hi = std::max(hi, static_cast<double>(up[i]));
  }
  std::vector<float> out(up.size(), 0.0f);
  if (hi > lo) {
    const double span = hi - lo;
    for (std::size_t i = 0; i < up.size(); ++i) {
      if (valid != nullptr && !(*valid)[i]) continue;
      out[i] = static_cast<float>((static_cast<double>(up[i]) - lo) / span);
    }
  }
  return Tensor(upt.shape(), std::move(out));
}

// ---- estimators -----------------------------------------------------------

enum class Method { kGrad, kPost, kVar, kInDrop, kMcDrop, kLog, kConst };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::kGrad: return "grad";
    case Method::kPost: return "post";
    case Method::kVar: return "var";
    case Method::kInDrop: return "indrop";
    case Method::kMcDrop: return "mcdrop";
    case Method::kLog: return "log";
    case Method::kConst: return "const";
  }
  return "grad";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::kGrad, Method::kPost, Method::kVar, Method::kInDrop, Method::kMcDrop, Method::kLog,
                   Method::kConst}) {
    if (s == to_string(m)) return m;
  }
  throw UsageError("unknown method '" + s + "' (expected grad|post|var|indrop|mcdrop|log|const)");
}

struct UncertaintyMap {
  Tensor u;             // [1,h,w] in [0,1]
  Tensor raw;           // [1,h,w] pre-normalisation score at full resolution
  ValidityMask valid;   // pixels with a defined uncertainty
  Tensor depth;         // the prediction this uncertainty accompanies
  std::string method;
  PassCounts passes;

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }
};

namespace detail {

inline UncertaintyMap finish(Method m, Tensor raw, ValidityMask valid, Tensor depth, const CountingNet& net) {
  UncertaintyMap out;
  out.u = normalize_upsample(raw, 1, &valid);
  out.raw = std::move(raw);
  out.valid = std::move(valid);
  out.depth = std::move(depth);
  out.method = to_string(m);
  out.passes = net.counts();
  return out;
}

// Population variance per pixel over the maps whose mask is set; pixels
// covered by no map get variance 0 and are reported invalid.
inline std::pair<Tensor, ValidityMask> pixel_variance(const std::vector<MaskedMap>& maps) {
  const std::size_t n = maps.front().value.size();
  std::vector<float> var(n, 0.0f);
  ValidityMask ok(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    int k = 0;
    for (const auto& m : maps) {
      if (!m.valid[i]) continue;
      sum += m.value[i];
      ++k;
    }
    if (k == 0) continue;
    const double mean = sum / k;
    double ss = 0.0;
    for (const auto& m : maps) {
      if (!m.valid[i]) continue;
      const double d = m.value[i] - mean;
      ss += d * d;
    }
    var[i] = static_cast<float>(ss / k);
    ok[i] = 1;
  }
  return {Tensor(maps.front().value.shape(), std::move(var)), std::move(ok)};
}

inline Tensor pixel_mean(const std::vector<Tensor>& maps) {
  std::vector<float> mean(maps.front().size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    double s = 0.0;
    for (const auto& m : maps) s += m[i];
    mean[i] = static_cast<float>(s / static_cast<double>(maps.size()));
  }
  return Tensor(maps.front().shape(), std::move(mean));
}

}  // namespace detail

/// Gradient-based uncertainty: forward x recording decoder layer i, build
/// the reference depth, evaluate the auxiliary loss (Bayesian form when the
/// network has a variance head), backpropagate to a_i, take the channel max
/// and normalise.
inline UncertaintyMap grad_uncertainty(const DepthNet& net, const Tensor& x, const UncertConfig& cfg,
                                       const Tensor* gt = nullptr) {
  cfg.validate(net.config.decoder_layers());
  CountingNet counted(net);
  ForwardOptions opts;
  opts.record_layer = cfg.layer;
  Prediction pred = counted.forward(x, opts);
  const MaskedMap ref = reference_depth(counted, x, cfg.transform, derive_seed(cfg.seed, {1}), gt);

  auto& tape = pred.tape;
  const NodeId d_ref = tape.leaf(ref.value);
  const NodeId loss = pred.variance ? aux_loss_bayes(tape, pred.depth, d_ref, *pred.variance, cfg.lambda, ref.valid,
                                                     cfg.variance_power)
                                    : aux_loss_plain(tape, pred.depth, d_ref, ref.valid);
  const auto gmap = counted.backward(tape, loss, pred.features);
  const Tensor g = gmap.grad_of(pred.features);
  const Tensor g_max = channel_reduce_max(g, cfg.use_abs);

  const int factor = net.config.decoder_scale(cfg.layer);
  UncertaintyMap out;
  out.u = normalize_upsample(g_max, factor, &ref.valid);
  out.raw = upsample_map(g_max, factor);
  out.valid = ref.valid;
  out.depth = pred.depth_map();
  out.method = to_string(Method::kGrad);
  out.passes = counted.counts();
  return out;
}

/// Post: squared half-difference between the prediction and the back-flipped
/// prediction of the flipped image.
inline UncertaintyMap baseline_post(const DepthNet& net, const Tensor& x) {
  CountingNet counted(net);
  const Tensor d = counted.forward(x).depth_map();
  const Tensor flipped = flip_horizontal(counted.forward(flip_horizontal(x)).depth_map());
  std::vector<float> raw(d.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double diff = static_cast<double>(d[i]) - flipped[i];
    raw[i] = static_cast<float>(diff * diff / 4.0);
  }
  return detail::finish(Method::kPost, Tensor(d.shape(), std::move(raw)), all_valid_mask(d), d, counted);
}

/// Var: per-pixel variance over predictions for the original, flipped, gray,
/// noisy and 5-degree rotated image (each mapped back to the original frame).
inline UncertaintyMap baseline_var(const DepthNet& net, const Tensor& x, std::uint64_t seed,
                                   std::vector<MaskedMap>* samples = nullptr) {
  CountingNet counted(net);
  const Tensor d = counted.forward(x).depth_map();
  std::vector<MaskedMap> maps{{d, all_valid_mask(d)}};
  for (AuxTransform t : {AuxTransform::kFlip, AuxTransform::kGray, AuxTransform::kNoise, AuxTransform::kRot5}) {
    maps.push_back(reference_depth(counted, x, t, derive_seed(seed, {2, static_cast<std::uint64_t>(t)})));
  }
  auto [var, ok] = detail::pixel_variance(maps);
  if (samples != nullptr) *samples = maps;
  return detail::finish(Method::kVar, std::move(var), std::move(ok), d, counted);
}

/// In-Drop: one clean forward for the depth, then the variance over N
/// forwards with inference-only dropout.
inline UncertaintyMap baseline_indrop(const DepthNet& net, const Tensor& x, std::uint64_t seed, int passes = kDropoutPasses,
                                      double p = kInferenceDropout, std::vector<MaskedMap>* samples = nullptr) {
  if (passes < 1) throw UsageError("indrop: passes must be >= 1");
  CountingNet counted(net);
  const Tensor d = counted.forward(x).depth_map();
  ForwardOptions opts;
  opts.dropout_active = true;
  opts.dropout_p = p;
  std::vector<MaskedMap> maps;
  for (int k = 0; k < passes; ++k) {
    Rng rng(derive_seed(seed, {3, static_cast<std::uint64_t>(k)}));
    maps.push_back({counted.forward(x, opts, &rng).depth_map(), all_valid_mask(d)});
  }
  auto [var, ok] = detail::pixel_variance(maps);
  if (samples != nullptr) *samples = maps;
  return detail::finish(Method::kInDrop, std::move(var), std::move(ok), d, counted);
}

/// MC dropout on a dropout-trained network: mean and variance over N passes.
inline UncertaintyMap baseline_mcdrop(const DepthNet& net, const Tensor& x, std::uint64_t seed,
                                      int passes = kDropoutPasses, std::vector<MaskedMap>* samples = nullptr) {
  if (passes < 1) throw UsageError("mcdrop: passes must be >= 1");
  if (!net.config.dropout) throw UsageError("mcdrop requires a dropout-trained checkpoint");
  CountingNet counted(net);
  ForwardOptions opts;
  opts.dropout_active = true;
  std::vector<MaskedMap> maps;
  std::vector<Tensor> depths;
  for (int k = 0; k < passes; ++k) {
    Rng rng(derive_seed(seed, {4, static_cast<std::uint64_t>(k)}));
    depths.push_back(counted.forward(x, opts, &rng).depth_map());
    maps.push_back({depths.back(), all_valid_mask(depths.back())});
  }
  auto [var, ok] = detail::pixel_variance(maps);
  if (samples != nullptr) *samples = maps;
  return detail::finish(Method::kMcDrop, std::move(var), std::move(ok), detail::pixel_mean(depths), counted);
}

/// Log: the predicted variance of a Bayesian network.
inline UncertaintyMap baseline_log(const DepthNet& net, const Tensor& x) {
  if (!net.config.bayesian) throw UsageError("log requires a checkpoint with a variance head");
  CountingNet counted(net);
  const auto p = counted.forward(x);
  return detail::finish(Method::kLog, *p.variance_map(), all_valid_mask(p.depth_map()), p.depth_map(), counted);
}

/// Constant uncertainty: no ranking information at all.
inline UncertaintyMap baseline_const(const DepthNet& net, const Tensor& x) {
  CountingNet counted(net);
  const Tensor d = counted.forward(x).depth_map();
  return detail::finish(Method::kConst, Tensor(d.shape(), 0.0f), all_valid_mask(d), d, counted);
}

/// Dispatches to the estimator for `method`. `net` must be the dropout-trained
/// network for mcdrop and a Bayesian network for log.
inline UncertaintyMap estimate(Method method, const DepthNet& net, const Tensor& x, const UncertConfig& cfg,
                               const Tensor* gt = nullptr) {
  cfg.validate(net.config.decoder_layers());
  switch (method) {
    case Method::kGrad: return grad_uncertainty(net, x, cfg, gt);
    case Method::kPost: return baseline_post(net, x);
    case Method::kVar: return baseline_var(net, x, cfg.seed);
    case Method::kInDrop: return baseline_indrop(net, x, cfg.seed, cfg.dropout_passes, cfg.dropout_p);
    case Method::kMcDrop: return baseline_mcdrop(net, x, cfg.seed, cfg.dropout_passes);
    case Method::kLog: return baseline_log(net, x);
    case Method::kConst: return baseline_const(net, x);
  }
  throw UsageError("unknown method");
}

/// JSON sidecar describing an uncertainty map.
inline nlohmann::json sidecar_json(const UncertaintyMap& m, const UncertConfig& cfg) {
  const std::size_t valid = m.valid_count();
  return {{"method", m.method},
          {"config", cfg.to_json()},
          {"pass_counts", {{"forwards", m.passes.forwards}, {"backwards", m.passes.backwards}}},
          {"validity", {{"valid_pixels", valid},
                        {"total_pixels", m.valid.size()},
                        {"valid_fraction", static_cast<double>(valid) / static_cast<double>(m.valid.size())}}}};
}

}  // namespace gbud
