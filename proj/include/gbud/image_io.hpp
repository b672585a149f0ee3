#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gbud/error.hpp"
#include "gbud/hash.hpp"
#include "gbud/tensor.hpp"

namespace gbud {

namespace detail {

inline constexpr std::size_t kMaxImageExtent = 1 << 14;

// Minimal reader for whitespace-separated netpbm header tokens.
class HeaderCursor {
 public:
  explicit HeaderCursor(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::optional<std::string> token(bool allow_comments) {
    skip_space(allow_comments);
    std::string out;
    while (pos_ < bytes_.size() && !is_space(at(pos_)) && out.size() < 32) out.push_back(at(pos_++));
    if (out.empty()) return std::nullopt;
    return out;
  }

  // Consumes the single whitespace byte that terminates the header.
  bool single_space() {
    if (pos_ >= bytes_.size() || !is_space(at(pos_))) return false;
    ++pos_;
    return true;
  }

  std::size_t position() const { return pos_; }

 private:
  static bool is_space(char c) { return c == ' ' || c == '\n' || c == '\r' || c == '\t'; }
  char at(std::size_t i) const { return static_cast<char>(bytes_[i]); }

  void skip_space(bool allow_comments) {
    while (pos_ < bytes_.size()) {
      const char c = at(pos_);
      if (is_space(c)) {
        ++pos_;
      } else if (allow_comments && c == '#') {
        while (pos_ < bytes_.size() && at(pos_) != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

inline std::size_t parse_extent(const std::optional<std::string>& tok, const char* what) {
  if (!tok) throw FormatError(FormatErrorKind::kTruncated, std::string(what) + " missing");
  std::size_t v = 0;
  for (char c : *tok) {
    if (!std::isdigit(static_cast<unsigned char>(c))) {
      throw FormatError(FormatErrorKind::kBadHeader, std::string(what) + " is not a positive integer");
    }
    v = v * 10 + static_cast<std::size_t>(c - '0');
    if (v > kMaxImageExtent) throw FormatError(FormatErrorKind::kBadHeader, std::string(what) + " too large");
  }
  if (v == 0) throw FormatError(FormatErrorKind::kBadHeader, std::string(what) + " must be positive");
  return v;
}

inline void write_bytes(const std::string& path, const std::string& header, std::span<const std::byte> body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write " + path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed for " + path);
}

}  // namespace detail

/// Binary P6 bytes for a [3,h,w] image in [0,1]; values are rounded half-up
/// after clamping.
inline std::vector<std::byte> encode_ppm(const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("channels", "ppm: image must be [3,h,w]");
  const std::size_t h = rgb.dim(1), w = rgb.dim(2);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::byte> out(header.size() + 3 * h * w);
  for (std::size_t i = 0; i < header.size(); ++i) out[i] = static_cast<std::byte>(header[i]);
  std::size_t o = header.size();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(rgb.at(c, y, x)), 0.0, 1.0);
        out[o++] = static_cast<std::byte>(static_cast<unsigned>(std::floor(v * 255.0 + 0.5)));
      }
  return out;
}

inline Tensor decode_ppm(std::span<const std::byte> bytes) {
  detail::HeaderCursor cur(bytes);
  const auto magic = cur.token(false);
  if (!magic || *magic != "P6") throw FormatError(FormatErrorKind::kBadMagic, "ppm: expected P6");
  const std::size_t w = detail::parse_extent(cur.token(true), "ppm width");
  const std::size_t h = detail::parse_extent(cur.token(true), "ppm height");
  const auto maxval = cur.token(true);
  if (!maxval) throw FormatError(FormatErrorKind::kTruncated, "ppm maxval missing");
  if (*maxval != "255") throw FormatError(FormatErrorKind::kUnsupported, "ppm: only maxval 255 is supported");
  if (!cur.single_space()) throw FormatError(FormatErrorKind::kTruncated, "ppm: header not terminated");
  const std::size_t need = 3 * w * h;
  const std::size_t body = bytes.size() - cur.position();
  if (body < need) throw FormatError(FormatErrorKind::kTruncated, "ppm: pixel data cut short");
  if (body > need) throw FormatError(FormatErrorKind::kTrailingData, "ppm: bytes after pixel data");
  std::vector<float> out(3 * w * h);
  std::size_t o = cur.position();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out[(c * h + y) * w + x] = static_cast<float>(std::to_integer<unsigned>(bytes[o++])) / 255.0f;
  return Tensor(Shape{3, h, w}, std::move(out));
}

inline void write_ppm(const Tensor& rgb, const std::string& path) {
  const auto bytes = encode_ppm(rgb);
  detail::write_bytes(path, "", bytes);
}

inline Tensor read_ppm(const std::string& path) { return decode_ppm(read_file_bytes(path)); }

/// Grayscale little-endian PFM ("Pf", scale -1.0). Rows are stored bottom to
/// top, so image row 0 is the last row in the file.
inline std::vector<std::byte> encode_pfm(const Tensor& map) {
  if (!(map.rank() == 3 && map.dim(0) == 1) && map.rank() != 2) {
    throw ShapeError("channels", "pfm: map must be [1,h,w] or [h,w]");
  }
  const std::size_t h = map.dim(map.rank() - 2), w = map.dim(map.rank() - 1);
  const std::string header = "Pf\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1.0\n";
  std::vector<std::byte> out(header.size() + 4 * h * w);
  for (std::size_t i = 0; i < header.size(); ++i) out[i] = static_cast<std::byte>(header[i]);
  std::size_t o = header.size();
  const auto src = map.data();
  for (std::size_t row = 0; row < h; ++row) {
    const std::size_t y = h - 1 - row;
    for (std::size_t x = 0; x < w; ++x) {
      const auto bits = std::bit_cast<std::uint32_t>(src[y * w + x]);
      for (int b = 0; b < 4; ++b) out[o++] = static_cast<std::byte>((bits >> (8 * b)) & 0xFFu);
    }
  }
  return out;
}

inline Tensor decode_pfm(std::span<const std::byte> bytes) {
  detail::HeaderCursor cur(bytes);
  const auto magic = cur.token(false);
  if (!magic || *magic != "Pf") throw FormatError(FormatErrorKind::kBadMagic, "pfm: expected Pf");
  const std::size_t w = detail::parse_extent(cur.token(false), "pfm width");
  const std::size_t h = detail::parse_extent(cur.token(false), "pfm height");
  const auto scale_tok = cur.token(false);
  if (!scale_tok) throw FormatError(FormatErrorKind::kTruncated, "pfm scale missing");
  double scale = 0.0;
  try {
    std::size_t used = 0;
    scale = std::stod(*scale_tok, &used);
    if (used != scale_tok->size()) throw std::invalid_argument("junk");
  } catch (const std::exception&) {
    throw FormatError(FormatErrorKind::kBadHeader, "pfm: scale is not a number");
  }
  if (!(scale < 0.0)) {
    throw FormatError(FormatErrorKind::kUnsupported, "pfm: only little-endian (negative scale) files are supported");
  }
  if (!cur.single_space()) throw FormatError(FormatErrorKind::kTruncated, "pfm: header not terminated");
  const std::size_t need = 4 * w * h;
  const std::size_t body = bytes.size() - cur.position();
  if (body < need) throw FormatError(FormatErrorKind::kTruncated, "pfm: pixel data cut short");
  if (body > need) throw FormatError(FormatErrorKind::kTrailingData, "pfm: bytes after pixel data");
  std::vector<float> out(w * h);
  std::size_t o = cur.position();
  for (std::size_t row = 0; row < h; ++row) {
    const std::size_t y = h - 1 - row;
    for (std::size_t x = 0; x < w; ++x) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::to_integer<std::uint32_t>(bytes[o++]) << (8 * b);
      out[y * w + x] = std::bit_cast<float>(bits);
    }
  }
  return Tensor(Shape{1, h, w}, std::move(out));
}

inline void write_pfm(const Tensor& map, const std::string& path) {
  const auto bytes = encode_pfm(map);
  detail::write_bytes(path, "", bytes);
}

inline Tensor read_pfm(const std::string& path) { return decode_pfm(read_file_bytes(path)); }

}  // namespace gbud
