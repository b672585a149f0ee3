#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "gbud/error.hpp"
#include "gbud/hash.hpp"
#include "gbud/model.hpp"
#include "json.hpp"

namespace gbud {

// Layout: "GBUD" | u32 version | u32 descriptor length | descriptor (UTF-8
// JSON) | float32 weights, every multi-byte field little-endian. Weights are
// stored layer by layer in declared order, weight tensor then bias.
inline constexpr char kCheckpointMagic[4] = {'G', 'B', 'U', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(std::span<const std::byte> in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[offset + i]) << (8 * i);
  return v;
}

inline void put_f32(std::vector<std::byte>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(std::span<const std::byte> in, std::size_t offset) {
  return std::bit_cast<float>(get_u32(in, offset));
}

}  // namespace detail

inline nlohmann::json checkpoint_descriptor(const DepthNet& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers) layers.push_back({{"name", l.name}, {"shape", l.weight.shape()}});
  return {{"format", "gbud-depthnet"},
          {"model_kind", to_string(net.config.kind())},
          {"arch", net.config.to_json()},
          {"layers", layers},
          {"weight_count", net.weight_count()}};
}

inline std::vector<std::byte> serialize_checkpoint(const DepthNet& net) {
  const std::string desc = checkpoint_descriptor(net).dump();
  std::vector<std::byte> out;
  out.reserve(12 + desc.size() + 4 * net.weight_count());
  for (char c : kCheckpointMagic) out.push_back(static_cast<std::byte>(c));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(desc.size()));
  for (char c : desc) out.push_back(static_cast<std::byte>(c));
  for (const auto& l : net.layers) {
    for (float v : l.weight.data()) detail::put_f32(out, v);
    for (float v : l.bias.data()) detail::put_f32(out, v);
  }
  return out;
}

inline DepthNet deserialize_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < 4) throw FormatError(FormatErrorKind::kTruncated, "checkpoint shorter than magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError(FormatErrorKind::kBadMagic, "checkpoint does not start with GBUD");
  }
  if (bytes.size() < 12) throw FormatError(FormatErrorKind::kTruncated, "checkpoint header incomplete");
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch,
                      "checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const std::uint32_t desc_len = detail::get_u32(bytes, 8);
  if (bytes.size() - 12 < desc_len) throw FormatError(FormatErrorKind::kTruncated, "descriptor cut short");
  const std::string desc(reinterpret_cast<const char*>(bytes.data() + 12), desc_len);

  ArchConfig cfg;
  std::size_t declared = 0;
  try {
    const auto j = nlohmann::json::parse(desc);
    cfg = ArchConfig::from_json(j.at("arch"));
    declared = j.at("weight_count").get<std::size_t>();
    cfg.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kBadDescriptor, std::string("descriptor: ") + e.what());
  } catch (const UsageError& e) {
    throw FormatError(FormatErrorKind::kBadDescriptor, e.what());
  }
  if (declared != cfg.weight_count()) {
    throw FormatError(FormatErrorKind::kBadDescriptor,
                      "declared weight count " + std::to_string(declared) + " != architecture count " +
                          std::to_string(cfg.weight_count()));
  }
  const std::size_t payload = bytes.size() - 12 - desc_len;
  if (payload < 4 * declared) throw FormatError(FormatErrorKind::kTruncated, "weight payload cut short");
  if (payload > 4 * declared) throw FormatError(FormatErrorKind::kTrailingData, "bytes after weight payload");

  DepthNet net;
  net.config = cfg;
  std::size_t offset = 12 + desc_len;
  for (const auto& spec : cfg.layers()) {
    const Shape ws{static_cast<std::size_t>(spec.out_channels), static_cast<std::size_t>(spec.in_channels),
                   static_cast<std::size_t>(spec.kernel), static_cast<std::size_t>(spec.kernel)};
    std::vector<float> w(element_count(ws));
    for (auto& v : w) {
      v = detail::get_f32(bytes, offset);
      offset += 4;
    }
    std::vector<float> b(static_cast<std::size_t>(spec.out_channels));
    for (auto& v : b) {
      v = detail::get_f32(bytes, offset);
      offset += 4;
    }
    const Shape bs{b.size()};
    net.layers.push_back({spec.name, Tensor(ws, std::move(w)), Tensor(bs, std::move(b)), spec.stride});
  }
  return net;
}

inline void save_checkpoint(const DepthNet& net, const std::string& path) {
  const auto bytes = serialize_checkpoint(net);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed for " + path);
}

inline DepthNet load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file_bytes(path)); }

}  // namespace gbud
