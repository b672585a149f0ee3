#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "gbud/error.hpp"
#include "gbud/image_io.hpp"
#include "gbud/random.hpp"
#include "gbud/tensor.hpp"
#include "json.hpp"

namespace gbud {

struct Rect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool contains(int px, int py) const { return px >= x && px < x + w && py >= y && py < y + h; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

/// Distribution parameters of the procedural scenes: a fronto-parallel
/// background whose depth ramps from far (top) to near (bottom), occluding
/// rectangles, and "noisy patches" whose depth labels carry Gaussian noise.
/// Patches are marked in the image by a fine checker glint, the synthetic
/// counterpart of a reflective material.
struct SceneConfig {
  int height = 64;
  int width = 64;
  double background_far = 9.0;
  double background_near = 4.0;
  int min_rects = 3;
  int max_rects = 8;
  double rect_depth_min = 1.5;
  double rect_depth_max = 8.0;
  int rect_min_size = 8;
  int rect_max_size = 28;
  int max_noisy_patches = 3;
  int patch_min_size = 8;
  int patch_max_size = 16;
  double label_noise_std = 0.5;
  double texture_noise = 0.04;
  double glint_amplitude = 0.12;
  double depth_floor = 1.0;
  double depth_ceil = 9.0;

  void validate() const {
    auto fail = [](const std::string& why) { throw UsageError("invalid scene config: " + why); };
    if (height <= 0 || width <= 0) fail("image extents must be positive");
    if (min_rects < 0 || max_rects < min_rects) fail("rectangle count range");
    if (max_noisy_patches < 0) fail("noisy patch count must be >= 0");
    if (rect_min_size < 1 || rect_max_size < rect_min_size || rect_max_size > std::min(height, width)) {
      fail("rectangle size range");
    }
    if (patch_min_size < 1 || patch_max_size < patch_min_size || patch_max_size > std::min(height, width)) {
      fail("patch size range");
    }
    if (label_noise_std < 0.0) fail("label noise must be >= 0");
  }

  /// Expected fraction of pixels covered by noisy patches, ignoring overlap
  /// between patches of the same image.
  double expected_patch_fraction() const {
    const double mean_count = 0.5 * max_noisy_patches;
    const double mean_side = 0.5 * (patch_min_size + patch_max_size);
    return mean_count * mean_side * mean_side / (static_cast<double>(height) * width);
  }

  nlohmann::json to_json() const {
    return {{"height", height},
            {"width", width},
            {"background_far", background_far},
            {"background_near", background_near},
            {"min_rects", min_rects},
            {"max_rects", max_rects},
            {"rect_depth_min", rect_depth_min},
            {"rect_depth_max", rect_depth_max},
            {"rect_min_size", rect_min_size},
            {"rect_max_size", rect_max_size},
            {"max_noisy_patches", max_noisy_patches},
            {"patch_min_size", patch_min_size},
            {"patch_max_size", patch_max_size},
            {"label_noise_std", label_noise_std},
            {"texture_noise", texture_noise},
            {"glint_amplitude", glint_amplitude}};
  }
};

struct Sample {
  Tensor image;       // [3,h,w] in [0,1]
  Tensor depth;       // [1,h,w] label, noise included
  Tensor clean_depth; // [1,h,w] occlusion-consistent depth before label noise
  std::vector<std::uint8_t> mask;  // evaluable pixels (all true for synthetic scenes)
  std::uint64_t seed = 0;
  std::vector<Rect> patches;

  /// 1 where the pixel lies inside any noisy patch.
  std::vector<std::uint8_t> patch_mask() const {
    const int h = static_cast<int>(depth.dim(1)), w = static_cast<int>(depth.dim(2));
    std::vector<std::uint8_t> m(static_cast<std::size_t>(h * w), 0);
    for (const auto& r : patches)
      for (int y = r.y; y < r.y + r.h; ++y)
        for (int x = r.x; x < r.x + r.w; ++x) m[static_cast<std::size_t>(y * w + x)] = 1;
    return m;
  }
};

inline std::uint64_t sample_seed(std::uint64_t master_seed, std::uint64_t index) {
  return derive_seed(master_seed, {index});
}

namespace detail {

// Smooth depth-coded colour; brightness is applied separately per surface.
inline std::array<double, 3> albedo_for_depth(double depth) {
  const double t = std::clamp((depth - 1.0) / 8.0, 0.0, 1.0);
  return {0.1 + 0.8 * (1.0 - t), 0.1 + 0.8 * (0.5 + 0.5 * std::sin(3.0 * std::numbers::pi * t)), 0.1 + 0.8 * t};
}

inline Rect random_rect(Rng& rng, int min_size, int max_size, int height, int width) {
  Rect r;
  r.w = uniform_int(rng, min_size, max_size);
  r.h = uniform_int(rng, min_size, max_size);
  r.x = uniform_int(rng, 0, width - r.w);
  r.y = uniform_int(rng, 0, height - r.h);
  return r;
}

}  // namespace detail

/// Renders one scene; a pure function of (config, seed).
inline Sample generate_sample(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int h = cfg.height, w = cfg.width;
  const std::size_t n = static_cast<std::size_t>(h * w);

  struct Surface {
    Rect rect;
    double depth;
    double brightness;
  };
  const int k = uniform_int(rng, cfg.min_rects, cfg.max_rects);
  std::vector<Surface> surfaces;
  for (int i = 0; i < k; ++i) {
    Surface s;
    s.rect = detail::random_rect(rng, cfg.rect_min_size, cfg.rect_max_size, h, w);
    s.depth = uniform(rng, cfg.rect_depth_min, cfg.rect_depth_max);
    s.brightness = uniform(rng, 0.75, 1.0);
    surfaces.push_back(s);
  }
  const double background_brightness = uniform(rng, 0.75, 1.0);

  // Per-pixel nearest surface; -1 is the background plane.
  std::vector<double> clean(n);
  std::vector<int> owner(n, -1);
  for (int y = 0; y < h; ++y) {
    const double ramp = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      clean[i] = cfg.background_far + (cfg.background_near - cfg.background_far) * ramp;
      for (int s = 0; s < k; ++s) {
        if (surfaces[s].rect.contains(x, y) && surfaces[s].depth < clean[i]) {
          clean[i] = surfaces[s].depth;
          owner[i] = s;
        }
      }
    }
  }

  const int m = uniform_int(rng, 0, cfg.max_noisy_patches);
  std::vector<Rect> patches;
  for (int i = 0; i < m; ++i) patches.push_back(detail::random_rect(rng, cfg.patch_min_size, cfg.patch_max_size, h, w));
  std::vector<std::uint8_t> in_patch(n, 0);
  for (const auto& r : patches)
    for (int y = r.y; y < r.y + r.h; ++y)
      for (int x = r.x; x < r.x + r.w; ++x) in_patch[static_cast<std::size_t>(y * w + x)] = 1;

  std::vector<float> image(3 * n);
  std::vector<float> label(n);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      const double brightness = owner[i] < 0 ? background_brightness : surfaces[owner[i]].brightness;
      const auto albedo = detail::albedo_for_depth(clean[i]);
      const double glint = in_patch[i] ? ((x + y) % 2 == 0 ? cfg.glint_amplitude : -cfg.glint_amplitude) : 0.0;
      for (int c = 0; c < 3; ++c) {
        const double v = albedo[c] * brightness + glint + uniform(rng, -cfg.texture_noise, cfg.texture_noise);
        image[static_cast<std::size_t>(c) * n + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      double d = clean[i];
      if (in_patch[i]) d += normal(rng, 0.0, cfg.label_noise_std);
      label[i] = static_cast<float>(std::clamp(d, cfg.depth_floor, cfg.depth_ceil));
    }
  }

  Sample s;
  const auto uh = static_cast<std::size_t>(h), uw = static_cast<std::size_t>(w);
  s.image = Tensor(Shape{3, uh, uw}, std::move(image));
  s.depth = Tensor(Shape{1, uh, uw}, std::move(label));
  std::vector<float> clean_f(clean.begin(), clean.end());
  s.clean_depth = Tensor(Shape{1, uh, uw}, std::move(clean_f));
  s.mask.assign(n, 1);
  s.seed = seed;
  s.patches = std::move(patches);
  return s;
}

struct SplitRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

/// Fixed 80/10/10 split by index.
inline std::array<SplitRange, 3> split_ranges(std::size_t count) {
  const std::size_t train = count * 8 / 10;
  const std::size_t val = count / 10;
  return {SplitRange{0, train}, SplitRange{train, train + val}, SplitRange{train + val, count}};
}

inline std::string sample_image_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rgb_%05zu.ppm", i);
  return buf;
}

inline std::string sample_depth_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "depth_%05zu.pfm", i);
  return buf;
}

inline constexpr const char* kManifestName = "manifest.json";

/// Writes `count` samples plus manifest.json into `out_dir`.
inline nlohmann::json generate_dataset(std::size_t count, std::uint64_t master_seed, const std::string& out_dir,
                                       const SceneConfig& cfg = {}) {
  if (count < 1) throw UsageError("generate_dataset: count must be >= 1");
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw FormatError(FormatErrorKind::kIo, "cannot create dataset directory " + out_dir);
  }
  const std::filesystem::path dir(out_dir);
  nlohmann::json seeds = nlohmann::json::array();
  nlohmann::json patches = nlohmann::json::array();
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < count; ++i) {
    const auto seed = sample_seed(master_seed, i);
    const Sample s = generate_sample(cfg, seed);
    write_ppm(s.image, (dir / sample_image_name(i)).string());
    write_pfm(s.depth, (dir / sample_depth_name(i)).string());
    seeds.push_back(seed);
    nlohmann::json rects = nlohmann::json::array();
    for (const auto& r : s.patches) rects.push_back({r.x, r.y, r.w, r.h});
    patches.push_back(rects);
    files.push_back({{"image", sample_image_name(i)}, {"depth", sample_depth_name(i)}});
  }
  const auto ranges = split_ranges(count);
  const char* names[3] = {"train", "val", "test"};
  nlohmann::json splits;
  for (int k = 0; k < 3; ++k) splits[names[k]] = {{"begin", ranges[k].begin}, {"end", ranges[k].end}};
  nlohmann::json manifest = {{"version", 1},
                             {"count", count},
                             {"master_seed", master_seed},
                             {"scene", cfg.to_json()},
                             {"seeds", seeds},
                             {"splits", splits},
                             {"patches", patches},
                             {"files", files}};
  std::ofstream out(dir / kManifestName, std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write manifest in " + out_dir);
  out << manifest.dump(1) << '\n';
  if (!out) throw FormatError(FormatErrorKind::kIo, "manifest write failed in " + out_dir);
  return manifest;
}

/// Read-only view of a generated dataset directory.
class Dataset {
 public:
  explicit Dataset(std::string dir) : dir_(std::move(dir)) {
    const auto path = std::filesystem::path(dir_) / kManifestName;
    std::ifstream in(path);
    if (!in) throw FormatError(FormatErrorKind::kIo, "missing manifest " + path.string());
    try {
      manifest_ = nlohmann::json::parse(in);
      count_ = manifest_.at("count").get<std::size_t>();
      if (manifest_.at("version").get<int>() != 1) {
        throw FormatError(FormatErrorKind::kVersionMismatch, "unsupported manifest version");
      }
      if (manifest_.at("files").size() != count_ || manifest_.at("patches").size() != count_) {
        throw FormatError(FormatErrorKind::kBadDescriptor, "manifest lists do not match count");
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(FormatErrorKind::kBadDescriptor, std::string("manifest: ") + e.what());
    }
  }

  std::size_t size() const { return count_; }
  const std::string& dir() const { return dir_; }
  const nlohmann::json& manifest() const { return manifest_; }

  SplitRange split(const std::string& name) const {
    try {
      const auto& s = manifest_.at("splits").at(name);
      return {s.at("begin").get<std::size_t>(), s.at("end").get<std::size_t>()};
    } catch (const nlohmann::json::exception&) {
      throw UsageError("unknown split '" + name + "'");
    }
  }

  std::string image_path(std::size_t i) const {
    return (std::filesystem::path(dir_) / manifest_.at("files").at(i).at("image").get<std::string>()).string();
  }
  std::string depth_path(std::size_t i) const {
    return (std::filesystem::path(dir_) / manifest_.at("files").at(i).at("depth").get<std::string>()).string();
  }

  Sample load(std::size_t i) const {
    if (i >= count_) throw UsageError("sample index out of range");
    Sample s;
    s.image = read_ppm(image_path(i));
    s.depth = read_pfm(depth_path(i));
    s.clean_depth = s.depth;  // only the noisy label is stored on disk
    s.mask.assign(s.depth.size(), 1);
    s.seed = manifest_.at("seeds").at(i).get<std::uint64_t>();
    for (const auto& r : manifest_.at("patches").at(i)) {
      s.patches.push_back({r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<int>(), r.at(3).get<int>()});
    }
    return s;
  }

 private:
  std::string dir_;
  nlohmann::json manifest_;
  std::size_t count_ = 0;
};

}  // namespace gbud
