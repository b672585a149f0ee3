#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gbud/error.hpp"
#include "gbud/hash.hpp"
#include "gbud/random.hpp"
#include "gbud/tape.hpp"
#include "gbud/tensor.hpp"
#include "json.hpp"

namespace gbud {

enum class ModelKind { kPlain, kLog, kDropout };

inline const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kPlain: return "plain";
    case ModelKind::kLog: return "log";
    case ModelKind::kDropout: return "dropout";
  }
  return "plain";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "plain") return ModelKind::kPlain;
  if (s == "log") return ModelKind::kLog;
  if (s == "dropout") return ModelKind::kDropout;
  throw UsageError("unknown model kind '" + s + "' (expected plain|log|dropout)");
}

struct LayerSpec {
  std::string name;
  int out_channels;
  int in_channels;
  int kernel;
  int stride;
};

/// Encoder-decoder topology. The encoder is a chain of 3x3 convolutions; the
/// decoder has two 3x3 convolutions per encoder downsampling: the first at
/// the coarse resolution, then 2x nearest upsampling, concatenation with the
/// matching encoder skip, and the second convolution. A 1x1 head produces a
/// depth logit (and a log-variance channel for Bayesian models).
struct ArchConfig {
  static constexpr int kMaxExtent = 4096;

  int in_channels = 3;
  int height = 64;
  int width = 64;
  std::vector<int> encoder_widths{16, 32, 64, 128};
  std::vector<int> encoder_strides{1, 2, 2, 2};
  std::vector<int> decoder_widths{64, 64, 32, 32, 16, 16};
  int kernel = 3;
  bool bayesian = false;
  double depth_min = 0.5;
  double depth_max = 10.0;
  bool dropout = false;
  double dropout_p = 0.2;

  static ArchConfig for_kind(ModelKind kind) {
    ArchConfig cfg;
    cfg.bayesian = kind == ModelKind::kLog;
    cfg.dropout = kind == ModelKind::kDropout;
    return cfg;
  }

  ModelKind kind() const {
    if (bayesian) return ModelKind::kLog;
    return dropout ? ModelKind::kDropout : ModelKind::kPlain;
  }

  int encoder_levels() const { return static_cast<int>(encoder_widths.size()); }
  int decoder_layers() const { return static_cast<int>(decoder_widths.size()); }
  int head_channels() const { return bayesian ? 2 : 1; }

  void validate() const {
    auto fail = [](const std::string& why) { throw UsageError("invalid architecture: " + why); };
    if (in_channels <= 0 || height <= 0 || width <= 0) fail("input extents must be positive");
    if (in_channels > kMaxExtent || height > kMaxExtent || width > kMaxExtent) fail("input extents too large");
    if (encoder_widths.size() < 2 || encoder_widths.size() > 8) fail("need two to eight encoder levels");
    if (encoder_widths.size() != encoder_strides.size()) fail("encoder widths/strides length mismatch");
    if (encoder_strides[0] != 1) fail("first encoder stride must be 1");
    for (std::size_t i = 1; i < encoder_strides.size(); ++i) {
      if (encoder_strides[i] != 2) fail("encoder strides after the first must be 2");
    }
    for (int w : encoder_widths) {
      if (w <= 0 || w > kMaxExtent) fail("encoder widths must lie in 1..4096");
    }
    if (decoder_widths.size() != 2 * (encoder_widths.size() - 1)) {
      fail("decoder needs exactly two layers per encoder downsampling");
    }
    for (int w : decoder_widths) {
      if (w <= 0 || w > kMaxExtent) fail("decoder widths must lie in 1..4096");
    }
    const int down = 1 << (encoder_levels() - 1);
    if (height % down != 0 || width % down != 0) fail("input size must be divisible by the total stride");
    if (kernel < 1 || kernel > 15 || kernel % 2 == 0) fail("kernel must be odd and at most 15");
    if (!(depth_min > 0.0 && depth_min < depth_max)) fail("depth range must satisfy 0 < min < max");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout probability must lie in [0,1)");
  }

  std::vector<LayerSpec> layers() const {
    std::vector<LayerSpec> out;
    int prev = in_channels;
    for (int i = 0; i < encoder_levels(); ++i) {
      out.push_back({"enc" + std::to_string(i + 1), encoder_widths[i], prev, kernel, encoder_strides[i]});
      prev = encoder_widths[i];
    }
    const int stages = encoder_levels() - 1;
    for (int s = 0; s < stages; ++s) {
      const int a = decoder_widths[2 * s];
      const int b = decoder_widths[2 * s + 1];
      const int skip = encoder_widths[encoder_levels() - 2 - s];
      out.push_back({"dec" + std::to_string(2 * s + 1), a, prev, kernel, 1});
      out.push_back({"dec" + std::to_string(2 * s + 2), b, a + skip, kernel, 1});
      prev = b;
    }
    out.push_back({"head", head_channels(), prev, 1, 1});
    return out;
  }

  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& l : layers()) {
      n += static_cast<std::size_t>(l.out_channels) * l.in_channels * l.kernel * l.kernel + l.out_channels;
    }
    return n;
  }

  /// Upsampling factor from decoder layer `layer` (1-based) to full resolution.
  int decoder_scale(int layer) const {
    if (layer < 1 || layer > decoder_layers()) throw UsageError("decoder layer out of range");
    const int stage = (layer - 1) / 2;
    const int level = (layer % 2 == 1) ? encoder_levels() - 1 - stage : encoder_levels() - 2 - stage;
    return 1 << level;
  }

  nlohmann::json to_json() const {
    return {{"in_channels", in_channels},
            {"height", height},
            {"width", width},
            {"encoder_widths", encoder_widths},
            {"encoder_strides", encoder_strides},
            {"decoder_widths", decoder_widths},
            {"kernel", kernel},
            {"bayesian", bayesian},
            {"depth_min", depth_min},
            {"depth_max", depth_max},
            {"dropout", dropout},
            {"dropout_p", dropout_p}};
  }

  static ArchConfig from_json(const nlohmann::json& j) {
    ArchConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    c.encoder_widths = j.at("encoder_widths").get<std::vector<int>>();
    c.encoder_strides = j.at("encoder_strides").get<std::vector<int>>();
    c.decoder_widths = j.at("decoder_widths").get<std::vector<int>>();
    c.kernel = j.at("kernel").get<int>();
    c.bayesian = j.at("bayesian").get<bool>();
    c.depth_min = j.at("depth_min").get<double>();
    c.depth_max = j.at("depth_max").get<double>();
    c.dropout = j.at("dropout").get<bool>();
    c.dropout_p = j.at("dropout_p").get<double>();
    return c;
  }
};

struct ConvParams {
  std::string name;
  Tensor weight;  // [co, ci, k, k]
  Tensor bias;    // [co]
  int stride = 1;
};

/// Depth network weights plus the architecture they instantiate.
struct DepthNet {
  ArchConfig config;
  std::vector<ConvParams> layers;

  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Fingerprint of all weight bytes in declared order.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (const auto& l : layers) {
      h = fnv1a64_values(l.weight.data(), h);
      h = fnv1a64_values(l.bias.data(), h);
    }
    return h;
  }
};

/// He (fan-in) normal initialization with zero biases.
inline DepthNet build_model(const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DepthNet net;
  net.config = cfg;
  Rng rng(derive_seed(seed, {0x6d6f64656cull}));
  for (const auto& spec : cfg.layers()) {
    const std::size_t fan_in = static_cast<std::size_t>(spec.in_channels) * spec.kernel * spec.kernel;
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<float> w(static_cast<std::size_t>(spec.out_channels) * fan_in);
    for (auto& v : w) v = static_cast<float>(normal(rng, 0.0, stddev));
    const Shape ws{static_cast<std::size_t>(spec.out_channels), static_cast<std::size_t>(spec.in_channels),
                   static_cast<std::size_t>(spec.kernel), static_cast<std::size_t>(spec.kernel)};
    net.layers.push_back({spec.name, Tensor(ws, std::move(w)),
                          Tensor(Shape{static_cast<std::size_t>(spec.out_channels)}, 0.0f), spec.stride});
  }
  return net;
}

/// Same topology with every weight and bias set to zero.
inline DepthNet zero_model(const ArchConfig& cfg) {
  DepthNet net = build_model(cfg, 0);
  for (auto& l : net.layers) {
    l.weight = Tensor(l.weight.shape(), 0.0f);
    l.bias = Tensor(l.bias.shape(), 0.0f);
  }
  return net;
}

struct ForwardOptions {
  int record_layer = 6;
  bool dropout_active = false;
  /// Overrides the architecture's dropout probability (inference-only dropout).
  std::optional<double> dropout_p;
  /// Record weights as gradient-requiring leaves (training).
  bool trainable = false;
};

template <typename T>
struct BasicPrediction {
  BasicTape<T> tape;
  NodeId depth = 0;
  NodeId logit = 0;
  std::optional<NodeId> variance;
  NodeId features = 0;
  int layer = 0;
  std::vector<NodeId> decoder_features;
  std::vector<NodeId> weight_nodes;
  std::vector<NodeId> bias_nodes;

  const BasicTensor<T>& depth_map() const { return tape.value(depth); }
  std::optional<BasicTensor<T>> variance_map() const {
    if (!variance) return std::nullopt;
    return tape.value(*variance);
  }
  const BasicTensor<T>& feature_map() const { return tape.value(features); }
};

using Prediction = BasicPrediction<float>;

/// Runs the network on a [c,h,w] image in [0,1] on a fresh tape. Decoder
/// feature maps are recorded after their ELU activation; dropout (when
/// active) follows every decoder convolution except the head.
template <typename T>
BasicPrediction<T> forward(const DepthNet& net, const BasicTensor<T>& x, const ForwardOptions& opts = {},
                           Rng* rng = nullptr) {
  const auto& cfg = net.config;
  const Shape expected{static_cast<std::size_t>(cfg.in_channels), static_cast<std::size_t>(cfg.height),
                       static_cast<std::size_t>(cfg.width)};
  if (x.shape() != expected) {
    throw ShapeError("input", "forward: expected input " + shape_string(expected) + ", got " + shape_string(x.shape()));
  }
  if (opts.record_layer < 1 || opts.record_layer > cfg.decoder_layers()) {
    throw UsageError("forward: record_layer must lie in 1.." + std::to_string(cfg.decoder_layers()));
  }
  for (T v : x.data()) {
    if (!(v >= T{0} && v <= T{1})) throw UsageError("forward: input values must lie in [0,1]");
  }
  const double p = opts.dropout_p.value_or(cfg.dropout_p);
  if (opts.dropout_active && rng == nullptr && p > 0.0) throw UsageError("forward: dropout requires an rng");
  if (net.layers.size() != cfg.layers().size()) throw UsageError("forward: layer count does not match architecture");

  BasicPrediction<T> pred;
  auto& tape = pred.tape;
  for (const auto& l : net.layers) {
    if constexpr (std::is_same_v<T, float>) {
      pred.weight_nodes.push_back(tape.leaf(l.weight, opts.trainable));
      pred.bias_nodes.push_back(tape.leaf(l.bias, opts.trainable));
    } else {
      pred.weight_nodes.push_back(tape.leaf(l.weight.template cast<T>(), opts.trainable));
      pred.bias_nodes.push_back(tape.leaf(l.bias.template cast<T>(), opts.trainable));
    }
  }
  auto conv = [&](NodeId in, std::size_t layer) {
    const auto& spec = net.layers[layer];
    const int k = static_cast<int>(spec.weight.dim(2));
    return tape.conv2d(in, pred.weight_nodes[layer], pred.bias_nodes[layer], spec.stride, (k - 1) / 2);
  };

  NodeId h = tape.leaf(x, false);
  std::vector<NodeId> skips;
  const int levels = cfg.encoder_levels();
  for (int i = 0; i < levels; ++i) {
    h = tape.unary(UnaryKind::kElu, conv(h, static_cast<std::size_t>(i)));
    skips.push_back(h);
  }
  std::size_t layer = static_cast<std::size_t>(levels);
  auto decoder_conv = [&](NodeId in) {
    NodeId a = tape.unary(UnaryKind::kElu, conv(in, layer++));
    pred.decoder_features.push_back(a);
    if (opts.dropout_active && p > 0.0) a = tape.dropout(a, p, *rng);
    return a;
  };
  for (int s = 0; s < levels - 1; ++s) {
    h = decoder_conv(h);
    h = tape.upsample_nearest(h, 2);
    h = tape.concat_channels(h, skips[static_cast<std::size_t>(levels - 2 - s)]);
    h = decoder_conv(h);
  }
  const NodeId head = conv(h, layer);
  const T span = static_cast<T>(cfg.depth_max - cfg.depth_min);
  if (cfg.bayesian) {
    pred.logit = tape.slice_channels(head, 0, 1);
    pred.variance = tape.unary(UnaryKind::kExpClamped, tape.slice_channels(head, 1, 1));
  } else {
    pred.logit = head;
  }
  pred.depth = tape.affine(tape.unary(UnaryKind::kSigmoid, pred.logit), span, cfg.depth_min);
  pred.layer = opts.record_layer;
  pred.features = pred.decoder_features[static_cast<std::size_t>(opts.record_layer - 1)];
  return pred;
}

inline Prediction forward(const DepthNet& net, const Tensor& x, const ForwardOptions& opts = {},
                          Rng* rng = nullptr) {
  return forward<float>(net, x, opts, rng);
}

}  // namespace gbud
