#pragma once

// Dense 3D grids and the geometric / filtering primitives built on them.
//
// Voxel storage order is x-fastest: index(z, y, x) = (z * ny + y) * nx + x.
// Every file format and test oracle in the project relies on this order.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace protuseg {

struct Dims {
  int nz = 1;
  int ny = 1;
  int nx = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(nz) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nx);
  }
  bool operator==(const Dims&) const = default;
};

/// Millimetres per voxel along (z, y, x).
struct Spacing {
  double sz = 1.0;
  double sy = 1.0;
  double sx = 1.0;

  bool operator==(const Spacing&) const = default;
};

/// Integer voxel coordinate or offset, ordered (z, y, x).
using Index3 = std::array<int, 3>;

std::string to_string(const Dims& d);

template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;

  explicit Grid(Dims dims, Spacing spacing = {}, T fill = T{})
      : dims_(dims), spacing_(spacing) {
    validate_geometry();
    data_.assign(dims_.size(), fill);
    validate_values();
  }

  Grid(Dims dims, Spacing spacing, std::vector<T> data)
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    validate_geometry();
    if (data_.size() != dims_.size()) {
      throw std::invalid_argument("grid data length " + std::to_string(data_.size()) +
                                  " does not match dims " + to_string(dims_));
    }
    validate_values();
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * dims_.ny + y) * dims_.nx + x;
  }
  bool contains(int z, int y, int x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < dims_.nz && y < dims_.ny && x < dims_.nx;
  }

  T operator()(int z, int y, int x) const { return data_[index(z, y, x)]; }
  T& operator()(int z, int y, int x) { return data_[index(z, y, x)]; }
  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  T value_or(int z, int y, int x, T fill) const { return contains(z, y, x) ? (*this)(z, y, x) : fill; }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& values() const { return data_; }

  bool same_geometry(const Grid& other) const { return dims_ == other.dims_; }

  bool operator==(const Grid&) const = default;

 private:
  void validate_geometry() const {
    if (dims_.nz < 1 || dims_.ny < 1 || dims_.nx < 1) {
      throw std::invalid_argument("grid dims must be >= 1, got " + to_string(dims_));
    }
    if (!(spacing_.sz > 0.0 && spacing_.sy > 0.0 && spacing_.sx > 0.0)) {
      throw std::invalid_argument("grid spacing must be > 0");
    }
  }
  void validate_values() const {
    if constexpr (std::is_same_v<T, std::uint8_t>) {
      for (auto v : data_) {
        if (v > 1) throw std::invalid_argument("mask values must be 0 or 1");
      }
    }
  }

  Dims dims_{};
  Spacing spacing_{};
  std::vector<T> data_;
};

/// Scalar intensity or probability grid.
using Volume = Grid<float>;
/// Binary label grid, values exactly {0, 1}.
using Mask = Grid<std::uint8_t>;
using LabelGrid = Grid<std::int32_t>;

/// Intrinsic z-y-x Euler angles in degrees, right-handed.
/// The combined rotation is R = Rz(z) * Ry(y) * Rx(x) acting on (x, y, z) vectors.
struct EulerAngles {
  double z = 0.0;
  double y = 0.0;
  double x = 0.0;
};

using Mat3 = std::array<std::array<double, 3>, 3>;
/// Point in voxel index space, ordered (z, y, x).
using Point3 = std::array<double, 3>;

Mat3 rotation_matrix(const EulerAngles& angles);

/// Mean foreground index; grid center when the mask is empty.
Point3 centroid(const Mask& m);

/// Nearest-neighbour warp. Output voxel o samples the input at
/// center + inverse_linear * (o - center), computed in millimetres.
/// Samples that land outside the input take `fill`.
template <typename T>
Grid<T> warp_nearest(const Grid<T>& in, const Mat3& inverse_linear, const Point3& center, T fill);

/// Rotation about the foreground centroid, nearest-neighbour sampling.
Mask rotate_mask(const Mask& m, const EulerAngles& angles);
/// Isotropic scaling about the foreground centroid. factor must lie in [0.1, 10].
Mask scale_mask(const Mask& m, double factor);
/// Shift by `offset` voxels (z, y, x); voxels leaving the grid are dropped.
Mask translate_mask(const Mask& m, const Index3& offset);

/// Rotation followed by scaling about `center`, in a single nearest-neighbour pass.
template <typename T>
Grid<T> rotate_scale(const Grid<T>& in, const EulerAngles& angles, double factor, const Point3& center, T fill);

Mask mask_union(const Mask& a, const Mask& b);
Mask mask_intersection(const Mask& a, const Mask& b);
/// a AND NOT b.
Mask mask_difference(const Mask& a, const Mask& b);
std::size_t count(const Mask& m);

enum class Connectivity { k6 = 6, k26 = 26 };

struct Components {
  LabelGrid labels;  // 0 background, 1..count foreground
  int count = 0;
};

/// Raster-order labelling; ids are assigned in order of first appearance.
Components connected_components(const Mask& m, Connectivity connectivity = Connectivity::k26);

/// Keeps only the largest component (ties go to the lowest label).
Mask largest_component(const Mask& m, Connectivity connectivity = Connectivity::k26);

/// Separable Gaussian blur with replicate boundaries. Kernel truncated at
/// ceil(3 sigma) and renormalised to unit sum. sigma == 0 is the identity.
Volume gaussian_blur(const Volume& v, double sigma);

/// Normalised 1D Gaussian taps, index 0 is offset -radius.
std::vector<double> gaussian_kernel(double sigma);

/// Resample to isotropic `target_spacing` mm. New extent per axis is
/// round(n * spacing / target), at least 1. Output voxel i samples input
/// coordinate (i + 0.5) * target / spacing - 0.5, clamped to the grid.
Volume resample(const Volume& v, double target_spacing);  // trilinear
Mask resample(const Mask& m, double target_spacing);      // nearest

/// Sub-grid of `size` starting at `origin` (may be negative). Voxels outside
/// the source are filled with `pad`. The box must overlap the source.
template <typename T>
Grid<T> crop(const Grid<T>& in, const Index3& origin, const Dims& size, T pad = T{});

Volume to_volume(const Mask& m);
/// value >= threshold becomes foreground.
Mask binarize(const Volume& v, float threshold = 0.5f);

}  // namespace protuseg
