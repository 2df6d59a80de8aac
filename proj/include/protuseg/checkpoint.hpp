#pragma once

// PCKP checkpoint container, version 1:
//
//   offset  size  field
//   0       4     magic "PCKP"
//   4       2     u16 format version (1)
//   6       4     u32 header length H
//   10      H     JSON header: {"version", "networks": {prefix: NetworkConfig},
//                 "params": [{"name", "shape", "dtype"}], "extra"}
//   10+H    ...   f32 LE parameter values in "params" order, then the
//                 momentum buffers in the same order
//
// Parameter names are "<prefix>/<layer>.<weight|bias>".

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "protuseg/nn/network.hpp"

namespace protuseg {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointTensor {
  nn::Shape shape{};
  std::vector<float> value;
  std::vector<float> momentum;
};

struct Checkpoint {
  std::map<std::string, nn::NetworkConfig> networks;
  std::map<std::string, CheckpointTensor> tensors;
  nlohmann::json extra = nlohmann::json::object();

  bool has(const std::string& prefix) const { return networks.count(prefix) != 0; }

  /// Copies the network's parameters and momentum in under `prefix`.
  void store(const std::string& prefix, const nn::Network<float>& net);
  /// Rebuilds the network saved under `prefix`.
  nn::Network<float> load(const std::string& prefix) const;
  /// Overwrites net's parameters and momentum. Throws std::invalid_argument
  /// when the prefix is missing or the configs differ.
  void restore(const std::string& prefix, nn::Network<float>& net) const;
};

std::string encode_checkpoint(const Checkpoint& c);
/// Throws FormatError on a malformed container.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace protuseg
