#include "protuseg/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "protuseg/errors.hpp"
#include "protuseg/pvol_io.hpp"

namespace protuseg {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'K', 'P'};
constexpr std::size_t kPreamble = 10;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void put_floats(std::string& out, const std::vector<float>& values) {
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

std::string qualified(const std::string& prefix, const std::string& name) { return prefix + "/" + name; }

}  // namespace

void Checkpoint::store(const std::string& prefix, const nn::Network<float>& net) {
  networks[prefix] = net.config();
  for (const auto& p : net.params()) {
    CheckpointTensor t;
    t.shape = p.value.shape();
    t.value.assign(p.value.data().begin(), p.value.data().end());
    t.momentum = p.momentum;
    t.momentum.resize(t.value.size(), 0.0f);
    tensors[qualified(prefix, p.name)] = std::move(t);
  }
}

nn::Network<float> Checkpoint::load(const std::string& prefix) const {
  auto it = networks.find(prefix);
  if (it == networks.end()) throw std::invalid_argument("checkpoint has no network '" + prefix + "'");
  Rng unused(0);
  nn::Network<float> net(it->second, unused);
  restore(prefix, net);
  return net;
}

void Checkpoint::restore(const std::string& prefix, nn::Network<float>& net) const {
  auto it = networks.find(prefix);
  if (it == networks.end()) throw std::invalid_argument("checkpoint has no network '" + prefix + "'");
  if (!(it->second == net.config())) {
    throw std::invalid_argument("checkpoint config for '" + prefix + "' does not match the network");
  }
  for (auto& p : net.params()) {
    auto t = tensors.find(qualified(prefix, p.name));
    if (t == tensors.end()) throw std::invalid_argument("checkpoint is missing " + qualified(prefix, p.name));
    if (t->second.shape != p.value.shape()) {
      throw std::invalid_argument("checkpoint shape mismatch for " + qualified(prefix, p.name));
    }
    std::copy(t->second.value.begin(), t->second.value.end(), p.value.data().begin());
    p.momentum = t->second.momentum;
  }
}

std::string encode_checkpoint(const Checkpoint& c) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["networks"] = nlohmann::json::object();
  for (const auto& [prefix, cfg] : c.networks) header["networks"][prefix] = cfg;
  header["params"] = nlohmann::json::array();
  for (const auto& [name, t] : c.tensors) {
    header["params"].push_back({{"name", name}, {"shape", t.shape}, {"dtype", "f32"}});
  }
  header["extra"] = c.extra;
  const std::string text = header.dump();

  std::string out(kMagic, 4);
  put_u16(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& [name, t] : c.tensors) put_floats(out, t.value);
  for (const auto& [name, t] : c.tensors) put_floats(out, t.momentum);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kPreamble || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto version = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[4]) |
                                                  (static_cast<unsigned char>(bytes[5]) << 8));
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const std::size_t header_len = get_u32(bytes, 6);
  if (bytes.size() < kPreamble + header_len) throw FormatError("checkpoint: truncated header");

  Checkpoint c;
  std::vector<std::string> order;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(kPreamble, header_len));
    for (const auto& [prefix, cfg] : header.at("networks").items()) c.networks[prefix] = cfg.get<nn::NetworkConfig>();
    for (const auto& p : header.at("params")) {
      if (p.at("dtype").get<std::string>() != "f32") throw FormatError("checkpoint: unsupported dtype");
      CheckpointTensor t;
      t.shape = p.at("shape").get<nn::Shape>();
      const auto name = p.at("name").get<std::string>();
      order.push_back(name);
      c.tensors[name] = std::move(t);
    }
    c.extra = header.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: bad network config: ") + e.what());
  }

  std::size_t total = 0;
  for (const auto& name : order) total += nn::numel(c.tensors[name].shape);
  if (bytes.size() != kPreamble + header_len + 8 * total) throw FormatError("checkpoint: payload size mismatch");

  std::size_t pos = kPreamble + header_len;
  auto read = [&](std::vector<float>& dst, std::size_t n) {
    dst.resize(n);
    for (auto& f : dst) {
      f = std::bit_cast<float>(get_u32(bytes, pos));
      pos += 4;
    }
  };
  for (const auto& name : order) read(c.tensors[name].value, nn::numel(c.tensors[name].shape));
  for (const auto& name : order) read(c.tensors[name].momentum, nn::numel(c.tensors[name].shape));
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace protuseg
