#include "protuseg/pvol_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "protuseg/errors.hpp"

namespace protuseg {

namespace {

constexpr char kMagic[4] = {'P', 'V', 'O', 'L'};
constexpr std::size_t kHeaderSize = 31;

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }

template <typename U>
U get_le(const std::string& in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

float get_f32(const std::string& in, std::size_t pos) { return std::bit_cast<float>(get_le<std::uint32_t>(in, pos)); }

std::string header(PvolDtype dtype, const Dims& d, const Spacing& s) {
  std::string out(kMagic, 4);
  put_le<std::uint16_t>(out, kPvolVersion);
  out.push_back(static_cast<char>(dtype));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.nz));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.ny));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.nx));
  put_f32(out, static_cast<float>(s.sz));
  put_f32(out, static_cast<float>(s.sy));
  put_f32(out, static_cast<float>(s.sx));
  return out;
}

}  // namespace

std::string encode_pvol(const Volume& v) {
  std::string out = header(PvolDtype::kFloat32, v.dims(), v.spacing());
  out.reserve(kHeaderSize + 4 * v.size());
  for (float x : v.values()) put_f32(out, x);
  return out;
}

std::string encode_pvol(const Mask& m) {
  std::string out = header(PvolDtype::kMask, m.dims(), m.spacing());
  out.append(reinterpret_cast<const char*>(m.values().data()), m.size());
  return out;
}

std::variant<Volume, Mask> decode_pvol(const std::string& bytes) {
  if (bytes.size() < kHeaderSize) throw FormatError("pvol: truncated header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("pvol: bad magic");
  const auto version = get_le<std::uint16_t>(bytes, 4);
  if (version != kPvolVersion) throw FormatError("pvol: unsupported version " + std::to_string(version));
  const auto dtype = static_cast<std::uint8_t>(bytes[6]);
  const auto nz = get_le<std::uint32_t>(bytes, 7), ny = get_le<std::uint32_t>(bytes, 11),
             nx = get_le<std::uint32_t>(bytes, 15);
  constexpr std::uint32_t kMaxExtent = 1u << 16;
  if (nz == 0 || ny == 0 || nx == 0 || nz > kMaxExtent || ny > kMaxExtent || nx > kMaxExtent) {
    throw FormatError("pvol: invalid dims");
  }
  const Dims dims{static_cast<int>(nz), static_cast<int>(ny), static_cast<int>(nx)};
  const Spacing spacing{get_f32(bytes, 19), get_f32(bytes, 23), get_f32(bytes, 27)};
  if (!(spacing.sz > 0 && spacing.sy > 0 && spacing.sx > 0)) throw FormatError("pvol: invalid spacing");

  const std::size_t n = dims.size();
  if (dtype == static_cast<std::uint8_t>(PvolDtype::kFloat32)) {
    if (bytes.size() != kHeaderSize + 4 * n) throw FormatError("pvol: payload size mismatch");
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = get_f32(bytes, kHeaderSize + 4 * i);
    return Volume(dims, spacing, std::move(data));
  }
  if (dtype == static_cast<std::uint8_t>(PvolDtype::kMask)) {
    if (bytes.size() != kHeaderSize + n) throw FormatError("pvol: payload size mismatch");
    std::vector<std::uint8_t> data(bytes.begin() + kHeaderSize, bytes.end());
    for (auto v : data) {
      if (v > 1) throw FormatError("pvol: mask payload contains values other than 0/1");
    }
    return Mask(dims, spacing, std::move(data));
  }
  throw FormatError("pvol: unknown dtype " + std::to_string(dtype));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename to " + path.string() + " failed: " + ec.message());
}

void write_pvol(const std::filesystem::path& path, const Volume& v) { write_file(path, encode_pvol(v)); }
void write_pvol(const std::filesystem::path& path, const Mask& m) { write_file(path, encode_pvol(m)); }

Volume read_volume(const std::filesystem::path& path) {
  auto decoded = decode_pvol(read_file(path));
  if (auto* v = std::get_if<Volume>(&decoded)) return std::move(*v);
  throw FormatError(path.string() + ": expected f32 volume, found mask");
}

Mask read_mask(const std::filesystem::path& path) {
  auto decoded = decode_pvol(read_file(path));
  if (auto* m = std::get_if<Mask>(&decoded)) return std::move(*m);
  throw FormatError(path.string() + ": expected mask, found f32 volume");
}

}  // namespace protuseg
