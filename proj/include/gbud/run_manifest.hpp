#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gbud/hash.hpp"
#include "gbud/report.hpp"
#include "gbud/synth.hpp"
#include "json.hpp"

#ifndef GBUD_VERSION
#define GBUD_VERSION "dev"
#endif

namespace gbud {

/// FNV-1a over the dataset manifest and every listed file, in index order.
inline std::string dataset_hash(const Dataset& data) {
  std::uint64_t h = fnv1a64(read_file_bytes((std::filesystem::path(data.dir()) / kManifestName).string()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    h = fnv1a64(read_file_bytes(data.image_path(i)), h);
    h = fnv1a64(read_file_bytes(data.depth_path(i)), h);
  }
  return hex64(h);
}

/// Record of one command invocation: everything needed to rerun it and to
/// check that its inputs are the same. Deliberately free of timestamps so
/// identical runs produce identical manifests.
struct RunManifest {
  std::string command;
  nlohmann::json flags = nlohmann::json::object();
  nlohmann::json seeds = nlohmann::json::object();
  std::vector<std::pair<std::string, std::string>> inputs;  // path, content hash
  std::vector<std::string> outputs;

  void add_input_file(const std::string& path) { inputs.emplace_back(path, file_hash(path)); }
  void add_input_dataset(const Dataset& data) { inputs.emplace_back(data.dir(), dataset_hash(data)); }

  nlohmann::json to_json() const {
    nlohmann::json in = nlohmann::json::array();
    for (const auto& [path, hash] : inputs) in.push_back({{"path", path}, {"fnv1a64", hash}});
    return {{"command", command}, {"tool_version", GBUD_VERSION}, {"flags", flags},
            {"seeds", seeds},     {"inputs", in},                 {"outputs", outputs}};
  }

  void write(const std::string& path) const { write_text_file(path, to_json().dump(2) + "\n"); }
};

}  // namespace gbud
