#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "gbud/error.hpp"
#include "gbud/synth.hpp"
#include "gbud/uncertainty.hpp"

namespace gbud {

enum class Metric { kAbsRel, kRmse, kDelta, kMae };

inline const char* to_string(Metric m) {
  switch (m) {
    case Metric::kAbsRel: return "abs_rel";
    case Metric::kRmse: return "rmse";
    case Metric::kDelta: return "delta";
    case Metric::kMae: return "mae";
  }
  return "rmse";
}

inline Metric parse_metric(const std::string& s) {
  for (Metric m : {Metric::kAbsRel, Metric::kRmse, Metric::kDelta, Metric::kMae}) {
    if (s == to_string(m)) return m;
  }
  throw UsageError("unknown metric '" + s + "'");
}

/// The metrics reported per method. MAE exists for illustration and tests.
inline constexpr Metric kReportedMetrics[] = {Metric::kAbsRel, Metric::kRmse, Metric::kDelta};

inline constexpr int kDefaultBins = 50;

/// Per-pixel error surrogates over the valid pixels of one image, in
/// ascending pixel order.
struct PixelErrors {
  std::vector<double> abs_rel;
  std::vector<double> sq_err;
  std::vector<double> delta_bad;
  std::vector<double> abs_err;

  std::size_t size() const { return sq_err.size(); }

  const std::vector<double>& surrogate(Metric m) const {
    switch (m) {
      case Metric::kAbsRel: return abs_rel;
      case Metric::kRmse: return sq_err;
      case Metric::kDelta: return delta_bad;
      case Metric::kMae: return abs_err;
    }
    return sq_err;
  }

  void push(double d, double y) {
    const double diff = d - y;
    abs_rel.push_back(std::abs(diff) / y);
    sq_err.push_back(diff * diff);
    delta_bad.push_back(std::max(d / y, y / d) >= 1.25 ? 1.0 : 0.0);
    abs_err.push_back(std::abs(diff));
  }

  void append(const PixelErrors& o) {
    abs_rel.insert(abs_rel.end(), o.abs_rel.begin(), o.abs_rel.end());
    sq_err.insert(sq_err.end(), o.sq_err.begin(), o.sq_err.end());
    delta_bad.insert(delta_bad.end(), o.delta_bad.begin(), o.delta_bad.end());
    abs_err.insert(abs_err.end(), o.abs_err.begin(), o.abs_err.end());
  }
};

/// Errors of prediction d against label y on pixels where mask is set.
inline PixelErrors pixel_errors(const Tensor& d, const Tensor& y, const ValidityMask& mask) {
  if (d.shape() != y.shape()) throw ShapeError("shape", "pixel_errors: prediction and label shapes differ");
  if (mask.size() != d.size()) throw ShapeError("size", "pixel_errors: mask size mismatch");
  PixelErrors e;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    if (!(y[i] > 0.0f)) throw UsageError("pixel_errors: label must be positive on valid pixels");
    if (!(d[i] > 0.0f)) throw UsageError("pixel_errors: prediction must be positive on valid pixels");
    e.push(d[i], y[i]);
  }
  if (e.size() == 0) throw UsageError("pixel_errors: empty mask");
  return e;
}

namespace detail {

inline double finalize_metric(Metric m, double sum, std::size_t n) {
  const double mean = sum / static_cast<double>(n);
  return m == Metric::kRmse ? std::sqrt(mean) : mean;
}

}  // namespace detail

/// Metric over the pixels whose `keep` flag is set (all pixels when empty),
/// summed in ascending pixel order.
inline double set_metric(Metric m, const PixelErrors& e, const std::vector<std::uint8_t>& keep = {}) {
  const auto& v = e.surrogate(m);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!keep.empty() && !keep[i]) continue;
    sum += v[i];
    ++n;
  }
  if (n == 0) throw UsageError("set_metric: no pixels");
  return detail::finalize_metric(m, sum, n);
}

/// Pixel indices from most to least uncertain: score descending, index
/// ascending on ties.
inline std::vector<std::size_t> rank_by_scores(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// The error-aware ranking that minimises the metric after every removal:
/// the metric's own surrogate, with delta ties broken by squared error.
inline std::vector<std::size_t> oracle_order(const PixelErrors& e, Metric m) {
  std::vector<std::size_t> order(e.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& s = e.surrogate(m);
  if (m == Metric::kDelta) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (s[a] != s[b]) return s[a] > s[b];
      return e.sq_err[a] > e.sq_err[b];
    });
  } else {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  }
  return order;
}

/// M(f_j) for j = 0..bins-1: drop the floor(j*N/bins) first pixels of
/// `order` and evaluate the metric on the rest.
inline std::vector<double> sparsification_curve(const PixelErrors& e, const std::vector<std::size_t>& order, Metric m,
                                                int bins = kDefaultBins) {
  const std::size_t n = e.size();
  if (bins < 1) throw UsageError("sparsification: bins must be >= 1");
  if (order.size() != n) throw ShapeError("size", "sparsification: ranking length differs from pixel count");
  if (n < static_cast<std::size_t>(bins)) {
    throw UsageError("sparsification: " + std::to_string(n) + " valid pixels is fewer than " + std::to_string(bins) +
                     " bins");
  }
  const auto& v = e.surrogate(m);
  std::vector<std::uint8_t> keep(n, 1);
  std::vector<double> curve;
  curve.reserve(static_cast<std::size_t>(bins));
  std::size_t removed = 0;
  for (int j = 0; j < bins; ++j) {
    const std::size_t target = static_cast<std::size_t>(j) * n / static_cast<std::size_t>(bins);
    for (; removed < target; ++removed) keep[order[removed]] = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (keep[i]) sum += v[i];
    }
    curve.push_back(detail::finalize_metric(m, sum, n - removed));
  }
  return curve;
}

inline std::vector<double> sparsification_curve(const PixelErrors& e, std::span<const double> scores, Metric m,
                                                int bins = kDefaultBins) {
  if (scores.size() != e.size()) throw ShapeError("size", "sparsification: ranking length differs from pixel count");
  return sparsification_curve(e, rank_by_scores(scores), m, bins);
}

struct Sparsification {
  std::vector<double> curve;
  std::vector<double> oracle;
  double ause = 0.0;
  double aurg = 0.0;
};

inline Sparsification sparsify(const PixelErrors& e, std::span<const double> scores, Metric m, int bins = kDefaultBins) {
  Sparsification s;
  s.curve = sparsification_curve(e, scores, m, bins);
  s.oracle = sparsification_curve(e, oracle_order(e, m), m, bins);
  double gap = 0.0, gain = 0.0;
  for (int j = 0; j < bins; ++j) {
    gap += s.curve[static_cast<std::size_t>(j)] - s.oracle[static_cast<std::size_t>(j)];
    gain += s.curve.front() - s.curve[static_cast<std::size_t>(j)];
  }
  s.ause = gap / bins;
  s.aurg = gain / bins;
  return s;
}

inline double ause(const PixelErrors& e, std::span<const double> scores, Metric m, int bins = kDefaultBins) {
  return sparsify(e, scores, m, bins).ause;
}

inline double aurg(const PixelErrors& e, std::span<const double> scores, Metric m, int bins = kDefaultBins) {
  return sparsify(e, scores, m, bins).aurg;
}

// ---- test-set evaluation -------------------------------------------------

/// Networks available to an evaluation. `primary` drives every method except
/// mcdrop (needs `dropout`) and log (uses `bayes`, or `primary` when it has a
/// variance head).
struct ModelSet {
  const DepthNet* primary = nullptr;
  const DepthNet* dropout = nullptr;
  const DepthNet* bayes = nullptr;

  const DepthNet& for_method(Method m) const {
    if (m == Method::kMcDrop) {
      if (dropout == nullptr) throw UsageError("method mcdrop needs a dropout-trained checkpoint");
      return *dropout;
    }
    if (m == Method::kLog) {
      if (bayes != nullptr) return *bayes;
      if (primary != nullptr && primary->config.bayesian) return *primary;
      throw UsageError("method log needs a checkpoint with a variance head");
    }
    if (primary == nullptr) throw UsageError("no checkpoint given");
    return *primary;
  }
};

struct EvalOptions {
  int bins = kDefaultBins;
  // Sparsify all test pixels jointly instead of per image.
  bool pooled = false;
  unsigned threads = 1;
};

struct MethodSpec {
  std::string label;  // name in the result tables
  Method method = Method::kGrad;
  UncertConfig config;
};

struct MetricResult {
  std::string method;
  Metric metric = Metric::kRmse;
  std::vector<double> curve;
  std::vector<double> oracle;
  double ause = 0.0;
  double aurg = 0.0;
};

struct EvalResult {
  int bins = kDefaultBins;
  std::size_t images = 0;
  std::vector<MetricResult> rows;  // method-major, metrics in kReportedMetrics order

  const MetricResult& at(const std::string& method, Metric m) const {
    for (const auto& r : rows) {
      if (r.method == method && r.metric == m) return r;
    }
    throw UsageError("no result for " + method + "/" + to_string(m));
  }
};

struct ImageInput {
  Tensor image;
  Tensor depth;
  ValidityMask mask;
};

namespace detail {

struct ImageScores {
  PixelErrors errors;
  std::vector<double> scores;
};

inline ImageScores score_image(const ModelSet& models, const MethodSpec& spec, const ImageInput& in) {
  const Tensor* gt = spec.config.transform == AuxTransform::kGt ? &in.depth : nullptr;
  const UncertaintyMap u = estimate(spec.method, models.for_method(spec.method), in.image, spec.config, gt);
  ValidityMask valid(in.mask.size());
  for (std::size_t i = 0; i < valid.size(); ++i) valid[i] = static_cast<std::uint8_t>(in.mask[i] && u.valid[i]);
  ImageScores out;
  out.errors = pixel_errors(u.depth, in.depth, valid);
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i]) out.scores.push_back(u.u[i]);
  }
  return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
// failure by index.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

/// Sparsification results for each method over a set of images. Per-image
/// curves, AUSE and AURG are averaged in image order; with `pooled` all
/// pixels are ranked jointly instead.
inline EvalResult evaluate_images(const ModelSet& models, const std::vector<ImageInput>& images,
                                  const std::vector<MethodSpec>& methods, const EvalOptions& opts = {}) {
  if (images.empty()) throw UsageError("evaluate: no images");
  if (methods.empty()) throw UsageError("evaluate: no methods");
  if (opts.bins < 1) throw UsageError("evaluate: bins must be >= 1");
  EvalResult result;
  result.bins = opts.bins;
  result.images = images.size();
  const auto bins = static_cast<std::size_t>(opts.bins);

  for (const auto& spec : methods) {
    std::vector<detail::ImageScores> per_image(images.size());
    detail::parallel_for(images.size(), opts.threads,
                         [&](std::size_t i) { per_image[i] = detail::score_image(models, spec, images[i]); });

    for (Metric m : kReportedMetrics) {
      MetricResult row;
      row.method = spec.label;
      row.metric = m;
      if (opts.pooled) {
        detail::ImageScores all;
        for (const auto& s : per_image) {
          all.errors.append(s.errors);
          all.scores.insert(all.scores.end(), s.scores.begin(), s.scores.end());
        }
        auto sp = sparsify(all.errors, all.scores, m, opts.bins);
        row.curve = std::move(sp.curve);
        row.oracle = std::move(sp.oracle);
        row.ause = sp.ause;
        row.aurg = sp.aurg;
      } else {
        row.curve.assign(bins, 0.0);
        row.oracle.assign(bins, 0.0);
        for (const auto& s : per_image) {
          const auto sp = sparsify(s.errors, s.scores, m, opts.bins);
          for (std::size_t j = 0; j < bins; ++j) {
            row.curve[j] += sp.curve[j];
            row.oracle[j] += sp.oracle[j];
          }
          row.ause += sp.ause;
          row.aurg += sp.aurg;
        }
        const double n = static_cast<double>(per_image.size());
        for (std::size_t j = 0; j < bins; ++j) {
          row.curve[j] /= n;
          row.oracle[j] /= n;
        }
        row.ause /= n;
        row.aurg /= n;
      }
      result.rows.push_back(std::move(row));
    }
  }
  return result;
}

/// Loads samples sorted by index, so the caller's order never matters.
inline std::vector<ImageInput> load_images(const Dataset& data, std::vector<std::size_t> indices) {
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  std::vector<ImageInput> images;
  images.reserve(indices.size());
  for (std::size_t i : indices) {
    Sample s = data.load(i);
    images.push_back({std::move(s.image), std::move(s.depth), std::move(s.mask)});
  }
  return images;
}

inline EvalResult evaluate_methods(const ModelSet& models, const Dataset& data, std::vector<std::size_t> indices,
                                   const std::vector<MethodSpec>& methods, const EvalOptions& opts = {}) {
  return evaluate_images(models, load_images(data, std::move(indices)), methods, opts);
}

inline std::vector<std::size_t> split_indices(const Dataset& data, const std::string& split) {
  const auto r = data.split(split);
  std::vector<std::size_t> out(r.size());
  std::iota(out.begin(), out.end(), r.begin);
  return out;
}

}  // namespace gbud
