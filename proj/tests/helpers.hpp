#pragma once

#include <filesystem>
#include <string>

#include "protuseg/random.hpp"
#include "protuseg/volume.hpp"

namespace testutil {

inline protuseg::Mask random_mask(protuseg::Rng& rng, protuseg::Dims d, double density) {
  protuseg::Mask m(d);
  for (auto& v : m.data()) v = protuseg::bernoulli(rng, density) ? 1 : 0;
  return m;
}

inline protuseg::Mask sphere(int grid, double radius, double cz, double cy, double cx) {
  protuseg::Mask m({grid, grid, grid});
  for (int z = 0; z < grid; ++z)
    for (int y = 0; y < grid; ++y)
      for (int x = 0; x < grid; ++x) {
        const double dz = z - cz, dy = y - cy, dx = x - cx;
        if (dz * dz + dy * dy + dx * dx <= radius * radius) m(z, y, x) = 1;
      }
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("protuseg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
