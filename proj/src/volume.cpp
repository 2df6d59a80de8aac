#include "protuseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace protuseg {

std::string to_string(const Dims& d) {
  return "(" + std::to_string(d.nz) + ", " + std::to_string(d.ny) + ", " + std::to_string(d.nx) + ")";
}

namespace {

void require_same_dims(const Mask& a, const Mask& b, const char* op) {
  if (a.dims() != b.dims()) {
    throw std::invalid_argument(std::string(op) + ": dims mismatch " + to_string(a.dims()) + " vs " +
                                to_string(b.dims()));
  }
}

int round_index(double v) { return static_cast<int>(std::floor(v + 0.5)); }

Mat3 transpose(const Mat3& m) {
  Mat3 t{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[i][j] = m[j][i];
  return t;
}

}  // namespace

Mat3 rotation_matrix(const EulerAngles& angles) {
  constexpr double kDeg = std::numbers::pi / 180.0;
  const double cz = std::cos(angles.z * kDeg), sz = std::sin(angles.z * kDeg);
  const double cy = std::cos(angles.y * kDeg), sy = std::sin(angles.y * kDeg);
  const double cx = std::cos(angles.x * kDeg), sx = std::sin(angles.x * kDeg);

  // (x, y, z) ordered matrices.
  const Mat3 rz{{{cz, -sz, 0.0}, {sz, cz, 0.0}, {0.0, 0.0, 1.0}}};
  const Mat3 ry{{{cy, 0.0, sy}, {0.0, 1.0, 0.0}, {-sy, 0.0, cy}}};
  const Mat3 rx{{{1.0, 0.0, 0.0}, {0.0, cx, -sx}, {0.0, sx, cx}}};
  auto mul = [](const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    return r;
  };
  const Mat3 xyz = mul(mul(rz, ry), rx);

  // Re-index to the (z, y, x) order used everywhere else.
  Mat3 zyx{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) zyx[i][j] = xyz[2 - i][2 - j];
  return zyx;
}

Point3 centroid(const Mask& m) {
  const auto& d = m.dims();
  double sz = 0, sy = 0, sx = 0;
  std::size_t n = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (m(z, y, x)) {
          sz += z;
          sy += y;
          sx += x;
          ++n;
        }
      }
  if (n == 0) return {(d.nz - 1) / 2.0, (d.ny - 1) / 2.0, (d.nx - 1) / 2.0};
  return {sz / n, sy / n, sx / n};
}

template <typename T>
Grid<T> warp_nearest(const Grid<T>& in, const Mat3& inverse_linear, const Point3& center, T fill) {
  const auto& d = in.dims();
  const auto& s = in.spacing();
  const std::array<double, 3> sp{s.sz, s.sy, s.sx};

  // Index-space matrix: diag(1/s) * A * diag(s).
  Mat3 a{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) a[i][j] = inverse_linear[i][j] * sp[j] / sp[i];

  Grid<T> out(d, s, fill);
  for (int z = 0; z < d.nz; ++z) {
    const double dz = z - center[0];
    for (int y = 0; y < d.ny; ++y) {
      const double dy = y - center[1];
      for (int x = 0; x < d.nx; ++x) {
        const double dx = x - center[2];
        const int iz = round_index(a[0][0] * dz + a[0][1] * dy + a[0][2] * dx + center[0]);
        const int iy = round_index(a[1][0] * dz + a[1][1] * dy + a[1][2] * dx + center[1]);
        const int ix = round_index(a[2][0] * dz + a[2][1] * dy + a[2][2] * dx + center[2]);
        if (in.contains(iz, iy, ix)) out(z, y, x) = in(iz, iy, ix);
      }
    }
  }
  return out;
}

Mask rotate_mask(const Mask& m, const EulerAngles& angles) {
  return warp_nearest<std::uint8_t>(m, transpose(rotation_matrix(angles)), centroid(m), 0);
}

Mask scale_mask(const Mask& m, double factor) {
  if (!(factor >= 0.1 && factor <= 10.0)) {
    throw std::invalid_argument("scale_mask: factor must lie in [0.1, 10], got " + std::to_string(factor));
  }
  const double inv = 1.0 / factor;
  const Mat3 a{{{inv, 0, 0}, {0, inv, 0}, {0, 0, inv}}};
  return warp_nearest<std::uint8_t>(m, a, centroid(m), 0);
}

template <typename T>
Grid<T> rotate_scale(const Grid<T>& in, const EulerAngles& angles, double factor, const Point3& center, T fill) {
  if (!(factor > 0.0)) throw std::invalid_argument("rotate_scale: factor must be > 0");
  Mat3 inv = transpose(rotation_matrix(angles));
  for (auto& row : inv)
    for (auto& v : row) v /= factor;
  return warp_nearest<T>(in, inv, center, fill);
}

Mask translate_mask(const Mask& m, const Index3& offset) {
  const auto& d = m.dims();
  Mask out(d, m.spacing());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (!m(z, y, x)) continue;
        const int tz = z + offset[0], ty = y + offset[1], tx = x + offset[2];
        if (out.contains(tz, ty, tx)) out(tz, ty, tx) = 1;
      }
  return out;
}

Mask mask_union(const Mask& a, const Mask& b) {
  require_same_dims(a, b, "union");
  Mask out(a.dims(), a.spacing());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] | b[i];
  return out;
}

Mask mask_intersection(const Mask& a, const Mask& b) {
  require_same_dims(a, b, "intersection");
  Mask out(a.dims(), a.spacing());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] & b[i];
  return out;
}

Mask mask_difference(const Mask& a, const Mask& b) {
  require_same_dims(a, b, "difference");
  Mask out(a.dims(), a.spacing());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] & (1 - b[i]);
  return out;
}

std::size_t count(const Mask& m) {
  return static_cast<std::size_t>(std::count(m.values().begin(), m.values().end(), std::uint8_t{1}));
}

namespace {

class UnionFind {
 public:
  std::int32_t make() {
    parent_.push_back(static_cast<std::int32_t>(parent_.size()));
    return parent_.back();
  }
  std::int32_t find(std::int32_t i) {
    while (parent_[i] != i) {
      parent_[i] = parent_[parent_[i]];
      i = parent_[i];
    }
    return i;
  }
  void unite(std::int32_t a, std::int32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent_[a] = b;
  }

 private:
  std::vector<std::int32_t> parent_;
};

}  // namespace

Components connected_components(const Mask& m, Connectivity connectivity) {
  const auto& d = m.dims();

  // Neighbours preceding the current voxel in raster order.
  std::vector<Index3> back;
  for (int dz = -1; dz <= 0; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const bool before = dz < 0 || (dz == 0 && dy < 0) || (dz == 0 && dy == 0 && dx < 0);
        if (!before) continue;
        const int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (connectivity == Connectivity::k6 && manhattan != 1) continue;
        back.push_back({dz, dy, dx});
      }

  LabelGrid provisional(d, m.spacing(), -1);
  UnionFind uf;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (!m(z, y, x)) continue;
        std::int32_t label = -1;
        for (const auto& o : back) {
          const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (!provisional.contains(nz, ny, nx)) continue;
          const std::int32_t nl = provisional(nz, ny, nx);
          if (nl < 0) continue;
          if (label < 0) {
            label = nl;
          } else {
            uf.unite(label, nl);
          }
        }
        if (label < 0) label = uf.make();
        provisional(z, y, x) = label;
      }

  Components out{LabelGrid(d, m.spacing(), 0), 0};
  std::vector<std::int32_t> final_id;
  for (std::size_t i = 0; i < provisional.size(); ++i) {
    const std::int32_t p = provisional[i];
    if (p < 0) continue;
    const std::int32_t root = uf.find(p);
    if (static_cast<std::size_t>(root) >= final_id.size()) final_id.resize(root + 1, 0);
    if (final_id[root] == 0) final_id[root] = ++out.count;
    out.labels[i] = final_id[root];
  }
  return out;
}

Mask largest_component(const Mask& m, Connectivity connectivity) {
  const auto cc = connected_components(m, connectivity);
  if (cc.count <= 1) return m;
  std::vector<std::size_t> sizes(cc.count + 1, 0);
  for (auto l : cc.labels.values()) ++sizes[l];
  sizes[0] = 0;
  const auto keep = static_cast<std::int32_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  Mask out(m.dims(), m.spacing());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = cc.labels[i] == keep ? 1 : 0;
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be >= 0");
  if (sigma == 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  const double sum = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& w : k) w /= sum;
  return k;
}

Volume gaussian_blur(const Volume& v, double sigma) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_blur: sigma must be >= 0");
  if (sigma == 0.0) return v;
  const auto kernel = gaussian_kernel(sigma);
  const int radius = static_cast<int>(kernel.size() / 2);
  const auto& d = v.dims();
  const std::array<int, 3> extent{d.nz, d.ny, d.nx};
  const std::array<std::size_t, 3> stride{static_cast<std::size_t>(d.ny) * d.nx, static_cast<std::size_t>(d.nx), 1};

  std::vector<double> cur(v.values().begin(), v.values().end());
  std::vector<double> next(cur.size());
  for (int axis = 2; axis >= 0; --axis) {
    const int n = extent[axis];
    const std::size_t st = stride[axis];
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const int pos = static_cast<int>((i / st) % n);
      const std::size_t base = i - static_cast<std::size_t>(pos) * st;
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const int p = std::clamp(pos + k, 0, n - 1);
        acc += kernel[k + radius] * cur[base + static_cast<std::size_t>(p) * st];
      }
      next[i] = acc;
    }
    std::swap(cur, next);
  }
  std::vector<float> out(cur.size());
  std::transform(cur.begin(), cur.end(), out.begin(), [](double x) { return static_cast<float>(x); });
  return Volume(d, v.spacing(), std::move(out));
}

namespace {

struct AxisMap {
  std::vector<int> i0, i1, nearest;
  std::vector<double> frac;
};

AxisMap map_axis(int n_in, double spacing_in, double target, int n_out) {
  AxisMap m;
  m.i0.resize(n_out);
  m.i1.resize(n_out);
  m.nearest.resize(n_out);
  m.frac.resize(n_out);
  const double ratio = target / spacing_in;
  for (int i = 0; i < n_out; ++i) {
    const double src = std::clamp((i + 0.5) * ratio - 0.5, 0.0, static_cast<double>(n_in - 1));
    const int lo = static_cast<int>(std::floor(src));
    m.i0[i] = lo;
    m.i1[i] = std::min(lo + 1, n_in - 1);
    m.frac[i] = src - lo;
    m.nearest[i] = std::clamp(round_index(src), 0, n_in - 1);
  }
  return m;
}

int resampled_extent(int n, double spacing, double target) {
  return std::max(1, static_cast<int>(std::llround(n * spacing / target)));
}

double lerp(double a, double b, double f) { return a + f * (b - a); }

}  // namespace

Volume resample(const Volume& v, double target_spacing) {
  if (!(target_spacing > 0.0)) throw std::invalid_argument("resample: target spacing must be > 0");
  const auto& d = v.dims();
  const auto& s = v.spacing();
  const Dims od{resampled_extent(d.nz, s.sz, target_spacing), resampled_extent(d.ny, s.sy, target_spacing),
                resampled_extent(d.nx, s.sx, target_spacing)};
  const auto mz = map_axis(d.nz, s.sz, target_spacing, od.nz);
  const auto my = map_axis(d.ny, s.sy, target_spacing, od.ny);
  const auto mx = map_axis(d.nx, s.sx, target_spacing, od.nx);

  Volume out(od, Spacing{target_spacing, target_spacing, target_spacing});
  for (int z = 0; z < od.nz; ++z)
    for (int y = 0; y < od.ny; ++y)
      for (int x = 0; x < od.nx; ++x) {
        auto row = [&](int iz, int iy) {
          return lerp(v(iz, iy, mx.i0[x]), v(iz, iy, mx.i1[x]), mx.frac[x]);
        };
        auto plane = [&](int iz) { return lerp(row(iz, my.i0[y]), row(iz, my.i1[y]), my.frac[y]); };
        out(z, y, x) = static_cast<float>(lerp(plane(mz.i0[z]), plane(mz.i1[z]), mz.frac[z]));
      }
  return out;
}

Mask resample(const Mask& m, double target_spacing) {
  if (!(target_spacing > 0.0)) throw std::invalid_argument("resample: target spacing must be > 0");
  const auto& d = m.dims();
  const auto& s = m.spacing();
  const Dims od{resampled_extent(d.nz, s.sz, target_spacing), resampled_extent(d.ny, s.sy, target_spacing),
                resampled_extent(d.nx, s.sx, target_spacing)};
  const auto mz = map_axis(d.nz, s.sz, target_spacing, od.nz);
  const auto my = map_axis(d.ny, s.sy, target_spacing, od.ny);
  const auto mx = map_axis(d.nx, s.sx, target_spacing, od.nx);

  Mask out(od, Spacing{target_spacing, target_spacing, target_spacing});
  for (int z = 0; z < od.nz; ++z)
    for (int y = 0; y < od.ny; ++y)
      for (int x = 0; x < od.nx; ++x) out(z, y, x) = m(mz.nearest[z], my.nearest[y], mx.nearest[x]);
  return out;
}

template <typename T>
Grid<T> crop(const Grid<T>& in, const Index3& origin, const Dims& size, T pad) {
  if (size.nz < 1 || size.ny < 1 || size.nx < 1) {
    throw std::invalid_argument("crop: size must be >= 1, got " + to_string(size));
  }
  const auto& d = in.dims();
  const std::array<int, 3> extent{d.nz, d.ny, d.nx};
  const std::array<int, 3> sz{size.nz, size.ny, size.nx};
  for (int a = 0; a < 3; ++a) {
    if (origin[a] + sz[a] <= 0 || origin[a] >= extent[a]) {
      throw std::invalid_argument("crop: box at origin (" + std::to_string(origin[0]) + ", " +
                                  std::to_string(origin[1]) + ", " + std::to_string(origin[2]) + ") of size " +
                                  to_string(size) + " does not overlap grid " + to_string(d));
    }
  }
  Grid<T> out(size, in.spacing(), pad);
  for (int z = 0; z < size.nz; ++z)
    for (int y = 0; y < size.ny; ++y)
      for (int x = 0; x < size.nx; ++x) out(z, y, x) = in.value_or(z + origin[0], y + origin[1], x + origin[2], pad);
  return out;
}

Volume to_volume(const Mask& m) {
  std::vector<float> data(m.values().begin(), m.values().end());
  return Volume(m.dims(), m.spacing(), std::move(data));
}

Mask binarize(const Volume& v, float threshold) {
  Mask out(v.dims(), v.spacing());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] >= threshold ? 1 : 0;
  return out;
}

template Grid<float> warp_nearest(const Grid<float>&, const Mat3&, const Point3&, float);
template Grid<std::uint8_t> warp_nearest(const Grid<std::uint8_t>&, const Mat3&, const Point3&, std::uint8_t);
template Grid<float> rotate_scale(const Grid<float>&, const EulerAngles&, double, const Point3&, float);
template Grid<std::uint8_t> rotate_scale(const Grid<std::uint8_t>&, const EulerAngles&, double, const Point3&,
                                         std::uint8_t);
template Grid<float> crop(const Grid<float>&, const Index3&, const Dims&, float);
template Grid<std::uint8_t> crop(const Grid<std::uint8_t>&, const Index3&, const Dims&, std::uint8_t);
template Grid<std::int32_t> crop(const Grid<std::int32_t>&, const Index3&, const Dims&, std::int32_t);

}  // namespace protuseg
