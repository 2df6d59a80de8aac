#pragma once

// 3D U-Net variant shared by the base, protuberance and fusion networks.
//
// Encoder, for depth D and base width C (level l has C * 2^l channels):
//   level 0      stem 3^3 conv + 3^3 conv
//   level 1      stride-2 3^3 conv + 3^3 conv
//   level 2..D   2x max-pool + two 3^3 convs
// Decoder, for l = D-1 .. 0: trilinear 2x upsample, concatenate the level-l
// skip, one 3^3 conv (two if single_conv_decoder is off).
// Head: 1^3 conv to the output channels followed by a sigmoid.
// ReLU after every 3^3 conv; no normalisation layers.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "protuseg/nn/tensor.hpp"
#include "protuseg/random.hpp"

namespace protuseg::nn {

struct NetworkConfig {
  int base_channels = 16;
  int num_downsamplings = 5;
  int input_channels = 1;
  int output_channels = 2;
  bool single_conv_decoder = true;
  std::vector<std::string> output_names{"kidney", "tumor"};

  /// Kidney + tumor heads from the image.
  static NetworkConfig base();
  /// Protruded-region head from a kidney probability map.
  static NetworkConfig protuberance();
  /// Final tumor head from (image, clipped tumor + protuberance map).
  static NetworkConfig fusion();

  void validate() const;
  /// Throws std::invalid_argument unless every extent is divisible by 2^depth.
  void validate_grid(int nz, int ny, int nx) const;
  int grid_multiple() const { return 1 << num_downsamplings; }

  bool operator==(const NetworkConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> momentum;
  bool frozen = false;
};

template <typename T>
class ParamSet {
 public:
  /// Names must be unique.
  Parameter<T>& add(std::string name, Tensor<T> value);

  Parameter<T>& at(const std::string& name);
  const Parameter<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  /// Frozen parameters stop requiring gradients and are skipped by the optimizer.
  void set_frozen(bool frozen);
  /// 64-bit FNV-1a over names and parameter bytes.
  std::uint64_t hash() const;

 private:
  std::vector<Parameter<T>> params_;
};

template <typename T>
class Network {
 public:
  /// He-normal kernels (std = sqrt(2 / fan_in)), zero biases.
  Network(const NetworkConfig& cfg, Rng& rng);

  const NetworkConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  /// input: (batch, input_channels, z, y, x). Returns sigmoid maps of shape
  /// (batch, output_channels, z, y, x), channel order as in output_names.
  /// Throws NumericFault naming the first layer whose output is not finite.
  Tensor<T> forward(const Tensor<T>& input) const;

  /// Output channel for `name`.
  Tensor<T> output(const Tensor<T>& outputs, const std::string& name) const;

 private:
  struct Conv {
    std::string name;
    int stride = 1;
  };
  void add_conv(const std::string& name, int in, int out, int k, Rng& rng);
  Tensor<T> apply(const Conv& conv, const Tensor<T>& x, bool activate) const;

  NetworkConfig cfg_;
  ParamSet<T> params_;
  std::vector<std::vector<Conv>> encoder_;  // per level
  std::vector<std::vector<Conv>> decoder_;  // per level, applied deepest first
  Conv head_;
};

extern template class ParamSet<float>;
extern template class ParamSet<double>;
extern template class Network<float>;
extern template class Network<double>;

}  // namespace protuseg::nn
