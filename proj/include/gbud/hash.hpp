#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "gbud/error.hpp"

namespace gbud {

/// FNV-1a 64-bit over raw bytes. Used as a content fingerprint, not for security.
inline std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t h = 0xCBF29CE484222325ull) {
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001B3ull;
  }
  return h;
}

template <typename T>
std::uint64_t fnv1a64_values(std::span<const T> values, std::uint64_t h = 0xCBF29CE484222325ull) {
  return fnv1a64(std::as_bytes(values), h);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::vector<std::byte> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open " + path);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<std::byte>(raw[i]);
  return out;
}

inline std::string file_hash(const std::string& path) {
  auto bytes = read_file_bytes(path);
  return hex64(fnv1a64(bytes));
}

}  // namespace gbud
