#include "protuseg/nn/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "protuseg/nn/ops.hpp"

namespace protuseg::nn {

NetworkConfig NetworkConfig::base() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::protuberance() {
  NetworkConfig c;
  c.base_channels = 8;
  c.output_channels = 1;
  c.output_names = {"protuberance"};
  return c;
}

NetworkConfig NetworkConfig::fusion() {
  NetworkConfig c;
  c.input_channels = 2;
  c.output_channels = 1;
  c.output_names = {"tumor"};
  return c;
}

void NetworkConfig::validate() const {
  if (base_channels < 1 || num_downsamplings < 1 || input_channels < 1 || output_channels < 1) {
    throw std::invalid_argument("network config: all counts must be >= 1");
  }
  if (num_downsamplings > 10) throw std::invalid_argument("network config: depth above 10 is not supported");
  if (static_cast<int>(output_names.size()) != output_channels) {
    throw std::invalid_argument("network config: need one output name per output channel");
  }
}

void NetworkConfig::validate_grid(int nz, int ny, int nx) const {
  const int m = grid_multiple();
  if (nz % m || ny % m || nx % m) {
    throw std::invalid_argument("grid (" + std::to_string(nz) + ", " + std::to_string(ny) + ", " +
                                std::to_string(nx) + ") is not divisible by 2^" + std::to_string(num_downsamplings));
  }
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"base_channels", c.base_channels},
                     {"num_downsamplings", c.num_downsamplings},
                     {"input_channels", c.input_channels},
                     {"output_channels", c.output_channels},
                     {"single_conv_decoder", c.single_conv_decoder},
                     {"output_names", c.output_names}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  NetworkConfig d = c;
  c.base_channels = j.value("base_channels", d.base_channels);
  c.num_downsamplings = j.value("num_downsamplings", d.num_downsamplings);
  c.input_channels = j.value("input_channels", d.input_channels);
  c.output_channels = j.value("output_channels", d.output_channels);
  c.single_conv_decoder = j.value("single_conv_decoder", d.single_conv_decoder);
  c.output_names = j.value("output_names", d.output_names);
  c.validate();
}

template <typename T>
Parameter<T>& ParamSet<T>::add(std::string name, Tensor<T> value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name " + name);
  value.set_requires_grad(true);
  Parameter<T> p{std::move(name), value, std::vector<T>(value.numel(), T{0}), false};
  params_.push_back(std::move(p));
  return params_.back();
}

template <typename T>
Parameter<T>& ParamSet<T>::at(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw std::invalid_argument("unknown parameter " + name);
}

template <typename T>
const Parameter<T>& ParamSet<T>::at(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw std::invalid_argument("unknown parameter " + name);
}

template <typename T>
bool ParamSet<T>::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p.name == name; });
}

template <typename T>
std::size_t ParamSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
void ParamSet<T>::set_frozen(bool frozen) {
  for (auto& p : params_) {
    p.frozen = frozen;
    p.value.set_requires_grad(!frozen);
  }
}

template <typename T>
std::uint64_t ParamSet<T>::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params_) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data().data(), p.value.numel() * sizeof(T));
  }
  return h;
}

template <typename T>
Network<T>::Network(const NetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int depth = cfg_.num_downsamplings;
  auto width = [&](int level) { return cfg_.base_channels << level; };

  encoder_.resize(depth + 1);
  for (int l = 0; l <= depth; ++l) {
    const std::string prefix = "enc" + std::to_string(l);
    const int in = l == 0 ? cfg_.input_channels : width(l - 1);
    const int stride = l == 1 ? 2 : 1;
    add_conv(prefix + ".conv1", in, width(l), 3, rng);
    encoder_[l].push_back({prefix + ".conv1", stride});
    add_conv(prefix + ".conv2", width(l), width(l), 3, rng);
    encoder_[l].push_back({prefix + ".conv2", 1});
  }

  decoder_.resize(depth);
  for (int l = depth - 1; l >= 0; --l) {
    const std::string prefix = "dec" + std::to_string(l);
    add_conv(prefix + ".conv1", width(l + 1) + width(l), width(l), 3, rng);
    decoder_[l].push_back({prefix + ".conv1", 1});
    if (!cfg_.single_conv_decoder) {
      add_conv(prefix + ".conv2", width(l), width(l), 3, rng);
      decoder_[l].push_back({prefix + ".conv2", 1});
    }
  }

  add_conv("head", width(0), cfg_.output_channels, 1, rng);
  head_ = {"head", 1};
}

template <typename T>
void Network<T>::add_conv(const std::string& name, int in, int out, int k, Rng& rng) {
  const int fan_in = in * k * k * k;
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  std::vector<T> w(static_cast<std::size_t>(out) * fan_in);
  for (auto& v : w) v = static_cast<T>(normal(rng));
  params_.add(name + ".weight", Tensor<T>(Shape{out, in, k, k, k}, std::move(w)));
  params_.add(name + ".bias", Tensor<T>(Shape{1, out, 1, 1, 1}, T{0}));
}

template <typename T>
Tensor<T> Network<T>::apply(const Conv& conv, const Tensor<T>& x, bool activate) const {
  auto y = conv3d(x, params_.at(conv.name + ".weight").value, params_.at(conv.name + ".bias").value, conv.stride);
  if (activate) y = relu(y);
  check_finite(y, conv.name);
  return y;
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& input) const {
  if (input.channels() != cfg_.input_channels) {
    throw std::invalid_argument("network expects " + std::to_string(cfg_.input_channels) + " input channels, got " +
                                std::to_string(input.channels()));
  }
  cfg_.validate_grid(input.depth(), input.height(), input.width());
  check_finite(input, "input");

  const int depth = cfg_.num_downsamplings;
  std::vector<Tensor<T>> skips(depth + 1);
  Tensor<T> x = input;
  for (int l = 0; l <= depth; ++l) {
    if (l >= 2) x = maxpool2(x);
    for (const auto& conv : encoder_[l]) x = apply(conv, x, true);
    skips[l] = x;
  }
  for (int l = depth - 1; l >= 0; --l) {
    x = concat_channels(upsample2(x), skips[l]);
    for (const auto& conv : decoder_[l]) x = apply(conv, x, true);
  }
  auto out = sigmoid(apply(head_, x, false));
  check_finite(out, "head.sigmoid");
  return out;
}

template <typename T>
Tensor<T> Network<T>::output(const Tensor<T>& outputs, const std::string& name) const {
  const auto it = std::find(cfg_.output_names.begin(), cfg_.output_names.end(), name);
  if (it == cfg_.output_names.end()) throw std::invalid_argument("network has no output named " + name);
  return slice_channels(outputs, static_cast<int>(it - cfg_.output_names.begin()), 1);
}

template class ParamSet<float>;
template class ParamSet<double>;
template class Network<float>;
template class Network<double>;

}  // namespace protuseg::nn
