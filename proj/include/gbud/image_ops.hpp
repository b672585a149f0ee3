#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "gbud/error.hpp"
#include "gbud/random.hpp"
#include "gbud/tensor.hpp"

namespace gbud {

using ValidityMask = std::vector<std::uint8_t>;

inline void require_chw(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw ShapeError("rank", std::string(what) + ": expected [c,h,w], got " + shape_string(t.shape()));
}

/// Left-right mirror of every channel.
inline Tensor flip_horizontal(const Tensor& t) {
  require_chw(t, "flip_horizontal");
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  std::vector<float> out(t.size());
  const auto src = t.data();
  for (std::size_t p = 0; p < c * h; ++p)
    for (std::size_t x = 0; x < w; ++x) out[p * w + x] = src[p * w + (w - 1 - x)];
  return Tensor(t.shape(), std::move(out));
}

inline ValidityMask flip_horizontal(const ValidityMask& m, std::size_t h, std::size_t w) {
  ValidityMask out(m.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = m[y * w + (w - 1 - x)];
  return out;
}

/// Luminance 0.299 R + 0.587 G + 0.114 B replicated into three channels.
inline Tensor to_gray(const Tensor& rgb) {
  require_chw(rgb, "to_gray");
  if (rgb.dim(0) != 3) throw ShapeError("channels", "to_gray: expected 3 channels");
  const std::size_t n = rgb.dim(1) * rgb.dim(2);
  const auto src = rgb.data();
  std::vector<float> out(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = src[i], g = src[n + i], b = src[2 * n + i];
    // Equal channels must map to themselves exactly, which the weighted sum
    // does not guarantee in floating point.
    const float l = (r == g && g == b) ? src[i] : static_cast<float>(0.299 * r + 0.587 * g + 0.114 * b);
    out[i] = out[n + i] = out[2 * n + i] = l;
  }
  return Tensor(rgb.shape(), std::move(out));
}

/// x + N(0, stddev^2) per element, clamped to [0,1].
inline Tensor add_gaussian_noise(const Tensor& x, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> out(x.size());
  const auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(std::clamp(src[i] + normal(rng, 0.0, stddev), 0.0, 1.0));
  }
  return Tensor(x.shape(), std::move(out));
}

/// Rotation by `degrees` about the pixel-grid center ((w-1)/2, (h-1)/2) with
/// nearest-neighbour sampling; rotating by -degrees undoes it up to
/// resampling. Each output pixel p takes the source pixel nearest to
/// R(degrees)(p - c) + c. Output pixels whose source falls outside the image,
/// or whose source is itself invalid, are zero and marked invalid.
inline std::pair<Tensor, ValidityMask> rotate_nearest(const Tensor& t, const ValidityMask& valid, double degrees) {
  require_chw(t, "rotate_nearest");
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  if (valid.size() != h * w) throw ShapeError("size", "rotate_nearest: validity mask does not match image");
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  std::vector<float> out(t.size(), 0.0f);
  ValidityMask ok(h * w, 0);
  const auto src = t.data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      const long ix = std::lround(sx), iy = std::lround(sy);
      if (ix < 0 || iy < 0 || ix >= static_cast<long>(w) || iy >= static_cast<long>(h)) continue;
      const std::size_t s = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
      if (!valid[s]) continue;
      ok[y * w + x] = 1;
      for (std::size_t ch = 0; ch < c; ++ch) out[(ch * h + y) * w + x] = src[ch * h * w + s];
    }
  }
  return {Tensor(t.shape(), std::move(out)), std::move(ok)};
}

}  // namespace gbud
