#pragma once

// PVOL container, version 1. All integers and floats little-endian:
//
//   offset  size  field
//   0       4     magic "PVOL"
//   4       2     u16 format version (1)
//   6       1     u8 dtype (0 = f32 volume, 1 = u8 mask)
//   7       12    u32 nz, ny, nx
//   19      12    f32 sz, sy, sx (mm)
//   31      ...   voxel payload, x fastest

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>

#include "protuseg/volume.hpp"

namespace protuseg {

inline constexpr std::uint16_t kPvolVersion = 1;

enum class PvolDtype : std::uint8_t { kFloat32 = 0, kMask = 1 };

std::string encode_pvol(const Volume& v);
std::string encode_pvol(const Mask& m);

/// Throws FormatError on bad magic, unknown version or dtype, or a truncated payload.
std::variant<Volume, Mask> decode_pvol(const std::string& bytes);

void write_pvol(const std::filesystem::path& path, const Volume& v);
void write_pvol(const std::filesystem::path& path, const Mask& m);

Volume read_volume(const std::filesystem::path& path);
Mask read_mask(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary file and rename.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace protuseg
