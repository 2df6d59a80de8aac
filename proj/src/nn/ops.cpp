#include "protuseg/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "protuseg/errors.hpp"
#include "protuseg/parallel.hpp"

namespace protuseg::nn {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

// Upper bound on im2col buffer elements; larger outputs are processed in z slabs.
constexpr std::size_t kMaxColumnElements = std::size_t{1} << 17;

struct ConvGeometry {
  int in_c, out_c, k, stride, pad;
  int iz, iy, ix;
  int oz, oy, ox;
  std::size_t rows() const { return static_cast<std::size_t>(in_c) * k * k * k; }
  std::size_t in_spatial() const { return static_cast<std::size_t>(iz) * iy * ix; }
  std::size_t out_plane() const { return static_cast<std::size_t>(oy) * ox; }
  std::size_t out_spatial() const { return static_cast<std::size_t>(oz) * out_plane(); }
  bool pointwise() const { return k == 1 && stride == 1; }
  int slab_planes() const {
    const std::size_t per_plane = rows() * out_plane();
    return static_cast<int>(std::clamp<std::size_t>(kMaxColumnElements / std::max<std::size_t>(per_plane, 1), 1,
                                                    static_cast<std::size_t>(oz)));
  }
};

// Valid output range [lo, hi) along one axis for kernel tap `tap`.
inline void valid_range(int out_n, int in_n, int stride, int pad, int tap, int& lo, int& hi) {
  // in = o * stride + tap - pad must lie in [0, in_n).
  const int shift = tap - pad;
  lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  const int last = in_n - 1 - shift;
  hi = last < 0 ? 0 : std::min(out_n, last / stride + 1);
  if (hi < lo) hi = lo;
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, int z0, int z1, T* col) {
  const std::size_t n_cols = static_cast<std::size_t>(z1 - z0) * g.out_plane();
  for (int c = 0; c < g.in_c; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * g.in_spatial();
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          const std::size_t row = ((static_cast<std::size_t>(c) * g.k + kz) * g.k + ky) * g.k + kx;
          T* dst = col + row * n_cols;
          int xlo, xhi, ylo, yhi;
          valid_range(g.ox, g.ix, g.stride, g.pad, kx, xlo, xhi);
          valid_range(g.oy, g.iy, g.stride, g.pad, ky, ylo, yhi);
          for (int oz = z0; oz < z1; ++oz) {
            T* dz = dst + static_cast<std::size_t>(oz - z0) * g.out_plane();
            const int iz = oz * g.stride + kz - g.pad;
            if (iz < 0 || iz >= g.iz) {
              std::fill(dz, dz + g.out_plane(), T{0});
              continue;
            }
            for (int oy = 0; oy < g.oy; ++oy) {
              T* d = dz + static_cast<std::size_t>(oy) * g.ox;
              if (oy < ylo || oy >= yhi) {
                std::fill(d, d + g.ox, T{0});
                continue;
              }
              const int iy = oy * g.stride + ky - g.pad;
              const T* src = xc + (static_cast<std::size_t>(iz) * g.iy + iy) * g.ix;
              std::fill(d, d + xlo, T{0});
              if (g.stride == 1) {
                std::memcpy(d + xlo, src + xlo + kx - g.pad, sizeof(T) * (xhi - xlo));
              } else {
                for (int ox = xlo; ox < xhi; ++ox) d[ox] = src[ox * g.stride + kx - g.pad];
              }
              std::fill(d + xhi, d + g.ox, T{0});
            }
          }
        }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, int z0, int z1, T* dx) {
  const std::size_t n_cols = static_cast<std::size_t>(z1 - z0) * g.out_plane();
  for (int c = 0; c < g.in_c; ++c) {
    T* xc = dx + static_cast<std::size_t>(c) * g.in_spatial();
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          const std::size_t row = ((static_cast<std::size_t>(c) * g.k + kz) * g.k + ky) * g.k + kx;
          const T* srow = col + row * n_cols;
          int xlo, xhi, ylo, yhi;
          valid_range(g.ox, g.ix, g.stride, g.pad, kx, xlo, xhi);
          valid_range(g.oy, g.iy, g.stride, g.pad, ky, ylo, yhi);
          for (int oz = z0; oz < z1; ++oz) {
            const int iz = oz * g.stride + kz - g.pad;
            if (iz < 0 || iz >= g.iz) continue;
            const T* sz = srow + static_cast<std::size_t>(oz - z0) * g.out_plane();
            for (int oy = ylo; oy < yhi; ++oy) {
              const int iy = oy * g.stride + ky - g.pad;
              const T* s = sz + static_cast<std::size_t>(oy) * g.ox;
              T* d = xc + (static_cast<std::size_t>(iz) * g.iy + iy) * g.ix;
              for (int ox = xlo; ox < xhi; ++ox) d[ox * g.stride + kx - g.pad] += s[ox];
            }
          }
        }
  }
}

ConvGeometry transposed_geometry(const ConvGeometry& g) {
  ConvGeometry t = g;
  std::swap(t.in_c, t.out_c);
  t.iz = g.oz;
  t.iy = g.oy;
  t.ix = g.ox;
  t.oz = g.iz;
  t.oy = g.iy;
  t.ox = g.ix;
  return t;
}

// (out, in, k, k, k) -> (in, out, k, k, k) with every spatial axis reversed.
template <typename T>
std::vector<T> flip_kernel(const std::vector<T>& w, const ConvGeometry& g) {
  const int k = g.k, k3 = k * k * k;
  std::vector<T> out(w.size());
  for (int o = 0; o < g.out_c; ++o)
    for (int i = 0; i < g.in_c; ++i)
      for (int t = 0; t < k3; ++t)
        out[(static_cast<std::size_t>(i) * g.out_c + o) * k3 + (k3 - 1 - t)] =
            w[(static_cast<std::size_t>(o) * g.in_c + i) * k3 + t];
  return out;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                                to_string(b.shape()));
  }
}

// Elementwise unary op with derivative expressed through input and output.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& input, const char* name, Fwd fwd, Deriv deriv) {
  std::vector<T> out(input.numel());
  const auto in = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return Tensor<T>::make_result(input.shape(), std::move(out), {input}, name, [deriv](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, int stride) {
  const auto& ks = kernel.shape();
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv3d: stride must be 1 or 2");
  if (ks[2] != ks[3] || ks[2] != ks[4] || ks[2] % 2 == 0) {
    throw std::invalid_argument("conv3d: kernel must be cubic with odd extent, got " + to_string(ks));
  }
  if (ks[1] != input.channels()) {
    throw std::invalid_argument("conv3d: kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
                                std::to_string(input.channels()));
  }
  if (bias.shape() != Shape{1, ks[0], 1, 1, 1}) {
    throw std::invalid_argument("conv3d: bias shape " + to_string(bias.shape()) + " does not match kernel");
  }

  ConvGeometry g{};
  g.in_c = ks[1];
  g.out_c = ks[0];
  g.k = ks[2];
  g.stride = stride;
  g.pad = g.k / 2;
  g.iz = input.depth();
  g.iy = input.height();
  g.ix = input.width();
  g.oz = (g.iz + 2 * g.pad - g.k) / stride + 1;
  g.oy = (g.iy + 2 * g.pad - g.k) / stride + 1;
  g.ox = (g.ix + 2 * g.pad - g.k) / stride + 1;

  const int batch = input.batch();
  const Shape out_shape{batch, g.out_c, g.oz, g.oy, g.ox};
  std::vector<T> out(numel(out_shape));
  const std::size_t in_sample = static_cast<std::size_t>(g.in_c) * g.in_spatial();
  const std::size_t out_sample = static_cast<std::size_t>(g.out_c) * g.out_spatial();
  const int slab = g.slab_planes();
  const auto x_all = input.data();
  const auto w_all = kernel.data();
  const auto b_all = bias.data();

  parallel_for(batch, [&](int n) {
    const T* x = x_all.data() + n * in_sample;
    T* y = out.data() + n * out_sample;
    Eigen::Map<const MatR<T>> w(w_all.data(), g.out_c, static_cast<Eigen::Index>(g.rows()));
    if (g.pointwise()) {
      Eigen::Map<const MatR<T>> xin(x, g.in_c, static_cast<Eigen::Index>(g.in_spatial()));
      Eigen::Map<MatR<T>> ym(y, g.out_c, static_cast<Eigen::Index>(g.out_spatial()));
      ym.noalias() = w * xin;
    } else {
      std::vector<T> col(g.rows() * slab * g.out_plane());
      for (int z0 = 0; z0 < g.oz; z0 += slab) {
        const int z1 = std::min(g.oz, z0 + slab);
        const auto n_cols = static_cast<Eigen::Index>((z1 - z0) * g.out_plane());
        im2col(x, g, z0, z1, col.data());
        Eigen::Map<const MatR<T>> cm(col.data(), static_cast<Eigen::Index>(g.rows()), n_cols);
        StridedMap<T> ym(y + z0 * g.out_plane(), g.out_c, n_cols,
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(g.out_spatial())));
        ym.noalias() = w * cm;
      }
    }
    for (int c = 0; c < g.out_c; ++c) {
      T* yc = y + c * g.out_spatial();
      const T b = b_all[c];
      for (std::size_t i = 0; i < g.out_spatial(); ++i) yc[i] += b;
    }
  });

  return Tensor<T>::make_result(out_shape, std::move(out), {input, kernel, bias}, "conv3d",
                                [g, batch, in_sample, out_sample, slab](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    const std::size_t w_size = wn.data.size();
    std::vector<std::vector<T>> dw(batch), db(batch);
    T* dx_all = xn.requires_grad ? xn.ensure_grad().data() : nullptr;
    std::vector<T> w_flipped;
    if (dx_all && g.stride == 1 && !g.pointwise()) w_flipped = flip_kernel(wn.data, g);

    parallel_for(batch, [&](int n) {
      const T* x = xn.data.data() + n * in_sample;
      const T* dy = self.grad.data() + n * out_sample;
      Eigen::Map<const MatR<T>> w(wn.data.data(), g.out_c, static_cast<Eigen::Index>(g.rows()));
      if (wn.requires_grad) dw[n].assign(w_size, T{0});
      if (bn.requires_grad) {
        db[n].assign(g.out_c, T{0});
        for (int c = 0; c < g.out_c; ++c) {
          T acc{0};
          const T* d = dy + c * g.out_spatial();
          for (std::size_t i = 0; i < g.out_spatial(); ++i) acc += d[i];
          db[n][c] = acc;
        }
      }
      if (g.pointwise()) {
        ConstStridedMap<T> dym(dy, g.out_c, static_cast<Eigen::Index>(g.out_spatial()),
                               Eigen::OuterStride<>(static_cast<Eigen::Index>(g.out_spatial())));
        if (wn.requires_grad) {
          Eigen::Map<const MatR<T>> xin(x, g.in_c, static_cast<Eigen::Index>(g.in_spatial()));
          Eigen::Map<MatR<T>> dwm(dw[n].data(), g.out_c, g.in_c);
          dwm.noalias() = dym * xin.transpose();
        }
        if (dx_all) {
          Eigen::Map<MatR<T>> dxm(dx_all + n * in_sample, g.in_c, static_cast<Eigen::Index>(g.in_spatial()));
          dxm.noalias() += w.transpose() * dym;
        }
        return;
      }
      std::vector<T> col(g.rows() * slab * g.out_plane());
      const bool transposed_dx = dx_all && g.stride == 1;
      std::vector<T> dcol(dx_all && !transposed_dx ? col.size() : 0);
      for (int z0 = 0; z0 < g.oz; z0 += slab) {
        const int z1 = std::min(g.oz, z0 + slab);
        const auto n_cols = static_cast<Eigen::Index>((z1 - z0) * g.out_plane());
        ConstStridedMap<T> dym(dy + z0 * g.out_plane(), g.out_c, n_cols,
                               Eigen::OuterStride<>(static_cast<Eigen::Index>(g.out_spatial())));
        if (wn.requires_grad) {
          im2col(x, g, z0, z1, col.data());
          Eigen::Map<const MatR<T>> cm(col.data(), static_cast<Eigen::Index>(g.rows()), n_cols);
          Eigen::Map<MatR<T>> dwm(dw[n].data(), g.out_c, static_cast<Eigen::Index>(g.rows()));
          dwm.noalias() += dym * cm.transpose();
        }
        if (dx_all && !transposed_dx) {
          Eigen::Map<MatR<T>> dcm(dcol.data(), static_cast<Eigen::Index>(g.rows()), n_cols);
          dcm.noalias() = w.transpose() * dym;
          col2im_add(dcol.data(), g, z0, z1, dx_all + n * in_sample);
        }
      }
      if (transposed_dx) {
        // Stride 1: the input gradient is a same-padded correlation of dy
        // with the channel-swapped, spatially flipped kernel.
        const ConvGeometry gt = transposed_geometry(g);
        const int tslab = gt.slab_planes();
        std::vector<T> tcol(gt.rows() * tslab * gt.out_plane());
        Eigen::Map<const MatR<T>> wt(w_flipped.data(), gt.out_c, static_cast<Eigen::Index>(gt.rows()));
        T* dx = dx_all + n * in_sample;
        for (int z0 = 0; z0 < gt.oz; z0 += tslab) {
          const int z1 = std::min(gt.oz, z0 + tslab);
          const auto n_cols = static_cast<Eigen::Index>((z1 - z0) * gt.out_plane());
          im2col(dy, gt, z0, z1, tcol.data());
          Eigen::Map<const MatR<T>> cm(tcol.data(), static_cast<Eigen::Index>(gt.rows()), n_cols);
          StridedMap<T> dxm(dx + z0 * gt.out_plane(), gt.out_c, n_cols,
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(gt.out_spatial())));
          dxm.noalias() += wt * cm;
        }
      }
    });

    // Fixed-order reduction keeps results independent of the worker count.
    if (wn.requires_grad) {
      auto& gw = wn.ensure_grad();
      for (int n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < w_size; ++i) gw[i] += dw[n][i];
    }
    if (bn.requires_grad) {
      auto& gb = bn.ensure_grad();
      for (int n = 0; n < batch; ++n)
        for (int c = 0; c < g.out_c; ++c) gb[c] += db[n][c];
    }
  });
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input) {
  const auto& s = input.shape();
  if (s[2] % 2 || s[3] % 2 || s[4] % 2) {
    throw std::invalid_argument("maxpool2: spatial extents must be even, got " + to_string(s));
  }
  const Shape os{s[0], s[1], s[2] / 2, s[3] / 2, s[4] / 2};
  std::vector<T> out(numel(os));
  std::vector<std::uint32_t> arg(out.size());
  const auto in = input.data();
  const int planes = s[0] * s[1];
  const std::size_t in_plane = static_cast<std::size_t>(s[2]) * s[3] * s[4];
  const std::size_t out_plane = static_cast<std::size_t>(os[2]) * os[3] * os[4];

  parallel_for(planes, [&](int p) {
    const std::size_t ib = p * in_plane, ob = p * out_plane;
    std::size_t o = ob;
    for (int z = 0; z < os[2]; ++z)
      for (int y = 0; y < os[3]; ++y)
        for (int x = 0; x < os[4]; ++x, ++o) {
          std::size_t best = ib + (static_cast<std::size_t>(2 * z) * s[3] + 2 * y) * s[4] + 2 * x;
          T best_v = in[best];
          // Window scanned in increasing linear index; strict > keeps the first maximum.
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t i = ib + (static_cast<std::size_t>(2 * z + dz) * s[3] + 2 * y + dy) * s[4] + 2 * x + dx;
                if (in[i] > best_v) {
                  best_v = in[i];
                  best = i;
                }
              }
          out[o] = best_v;
          arg[o] = static_cast<std::uint32_t>(best);
        }
  });

  return Tensor<T>::make_result(os, std::move(out), {input}, "maxpool2",
                                [arg = std::move(arg)](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  });
}

namespace {

struct UpsampleAxis {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

UpsampleAxis upsample_axis(int n) {
  UpsampleAxis a;
  const int m = 2 * n;
  a.lo.resize(m);
  a.hi.resize(m);
  a.frac.resize(m);
  for (int i = 0; i < m; ++i) {
    const double src = std::clamp((i + 0.5) / 2.0 - 0.5, 0.0, static_cast<double>(n - 1));
    const int lo = static_cast<int>(std::floor(src));
    a.lo[i] = lo;
    a.hi[i] = std::min(lo + 1, n - 1);
    a.frac[i] = src - lo;
  }
  return a;
}

// Interpolates along one axis of a (planes, outer, n, inner) block into
// (planes, outer, 2n, inner).
template <typename T>
void upsample_pass(const T* in, T* out, int planes, std::size_t outer, int n, std::size_t inner,
                   const UpsampleAxis& ax) {
  const int m = 2 * n;
  for (std::size_t po = 0; po < static_cast<std::size_t>(planes) * outer; ++po) {
    const T* src = in + po * n * inner;
    T* dst = out + po * m * inner;
    for (int i = 0; i < m; ++i) {
      const T f = static_cast<T>(ax.frac[i]);
      const T* lo = src + static_cast<std::size_t>(ax.lo[i]) * inner;
      const T* hi = src + static_cast<std::size_t>(ax.hi[i]) * inner;
      T* d = dst + static_cast<std::size_t>(i) * inner;
      for (std::size_t k = 0; k < inner; ++k) d[k] = lo[k] + f * (hi[k] - lo[k]);
    }
  }
}

// Adjoint of upsample_pass: scatters a fine gradient back onto the coarse axis.
template <typename T>
void upsample_pass_adjoint(const T* fine_grad, T* coarse_grad, int planes, std::size_t outer, int n,
                           std::size_t inner, const UpsampleAxis& ax) {
  const int m = 2 * n;
  for (std::size_t po = 0; po < static_cast<std::size_t>(planes) * outer; ++po) {
    T* dst = coarse_grad + po * n * inner;
    const T* src = fine_grad + po * m * inner;
    for (int i = 0; i < m; ++i) {
      const T f = static_cast<T>(ax.frac[i]);
      T* lo = dst + static_cast<std::size_t>(ax.lo[i]) * inner;
      T* hi = dst + static_cast<std::size_t>(ax.hi[i]) * inner;
      const T* g = src + static_cast<std::size_t>(i) * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        lo[k] += (T{1} - f) * g[k];
        hi[k] += f * g[k];
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> upsample2(const Tensor<T>& input) {
  const auto& s = input.shape();
  const Shape os{s[0], s[1], 2 * s[2], 2 * s[3], 2 * s[4]};
  const int planes = s[0] * s[1];
  const auto az = upsample_axis(s[2]), ay = upsample_axis(s[3]), ax = upsample_axis(s[4]);

  // x, then y, then z.
  std::vector<T> t1(static_cast<std::size_t>(planes) * s[2] * s[3] * os[4]);
  std::vector<T> t2(static_cast<std::size_t>(planes) * s[2] * os[3] * os[4]);
  std::vector<T> out(numel(os));
  upsample_pass(input.data().data(), t1.data(), planes, static_cast<std::size_t>(s[2]) * s[3], s[4], 1, ax);
  upsample_pass(t1.data(), t2.data(), planes, static_cast<std::size_t>(s[2]), s[3], static_cast<std::size_t>(os[4]),
                ay);
  upsample_pass(t2.data(), out.data(), planes, 1, s[2], static_cast<std::size_t>(os[3]) * os[4], az);

  return Tensor<T>::make_result(os, std::move(out), {input}, "upsample2",
                                [s, os, planes, az, ay, ax](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    std::vector<T> g2(static_cast<std::size_t>(planes) * s[2] * os[3] * os[4], T{0});
    std::vector<T> g1(static_cast<std::size_t>(planes) * s[2] * s[3] * os[4], T{0});
    upsample_pass_adjoint(self.grad.data(), g2.data(), planes, 1, s[2], static_cast<std::size_t>(os[3]) * os[4], az);
    upsample_pass_adjoint(g2.data(), g1.data(), planes, static_cast<std::size_t>(s[2]), s[3],
                          static_cast<std::size_t>(os[4]), ay);
    upsample_pass_adjoint(g1.data(), p.ensure_grad().data(), planes, static_cast<std::size_t>(s[2]) * s[3], s[4], 1,
                          ax);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  return unary<T>(input, "relu", [](T x) { return x > T{0} ? x : T{0}; },
                  [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  return unary<T>(
      input, "sigmoid",
      [](T x) {
        if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Tensor<T> clamp01(const Tensor<T>& input) {
  return unary<T>(input, "clamp01", [](T x) { return std::clamp(x, T{0}, T{1}); },
                  [](T x, T) { return (x > T{0} && x < T{1}) ? T{1} : T{0}; });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, "add", [](detail::Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] || sa[4] != sb[4]) {
    throw std::invalid_argument("concat_channels: shape mismatch " + to_string(sa) + " vs " + to_string(sb));
  }
  const Shape os{sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]};
  const std::size_t sp = a.spatial_size();
  const std::size_t na = sa[1] * sp, nb = sb[1] * sp;
  std::vector<T> out(numel(os));
  for (int n = 0; n < sa[0]; ++n) {
    std::copy_n(a.data().data() + n * na, na, out.data() + n * (na + nb));
    std::copy_n(b.data().data() + n * nb, nb, out.data() + n * (na + nb) + na);
  }
  return Tensor<T>::make_result(os, std::move(out), {a, b}, "concat_channels",
                                [batch = sa[0], na, nb](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (int n = 0; n < batch; ++n) {
      const T* g = self.grad.data() + n * (na + nb);
      if (pa.requires_grad) {
        T* d = pa.ensure_grad().data() + n * na;
        for (std::size_t i = 0; i < na; ++i) d[i] += g[i];
      }
      if (pb.requires_grad) {
        T* d = pb.ensure_grad().data() + n * nb;
        for (std::size_t i = 0; i < nb; ++i) d[i] += g[na + i];
      }
    }
  });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, int first, int count) {
  const auto& s = input.shape();
  if (first < 0 || count < 1 || first + count > s[1]) {
    throw std::invalid_argument("slice_channels: range [" + std::to_string(first) + ", " +
                                std::to_string(first + count) + ") outside " + std::to_string(s[1]) + " channels");
  }
  const Shape os{s[0], count, s[2], s[3], s[4]};
  const std::size_t sp = input.spatial_size();
  std::vector<T> out(numel(os));
  for (int n = 0; n < s[0]; ++n)
    std::copy_n(input.data().data() + (static_cast<std::size_t>(n) * s[1] + first) * sp, count * sp,
                out.data() + static_cast<std::size_t>(n) * count * sp);
  return Tensor<T>::make_result(os, std::move(out), {input}, "slice_channels",
                                [s, first, count, sp](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (int n = 0; n < s[0]; ++n) {
      T* d = g.data() + (static_cast<std::size_t>(n) * s[1] + first) * sp;
      const T* src = self.grad.data() + static_cast<std::size_t>(n) * count * sp;
      for (std::size_t i = 0; i < count * sp; ++i) d[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> linear_combination(const std::vector<Tensor<T>>& terms, const std::vector<T>& weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw std::invalid_argument("linear_combination: need one weight per term");
  }
  for (const auto& t : terms) require_same_shape(terms[0], t, "linear_combination");
  std::vector<T> out(terms[0].numel(), T{0});
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const auto d = terms[k].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[k] * d[i];
  }
  return Tensor<T>::make_result(terms[0].shape(), std::move(out), terms, "linear_combination",
                                [weights](detail::Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += weights[k] * self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> dot_constant(const Tensor<T>& input, const std::vector<T>& probe) {
  if (probe.size() != input.numel()) throw std::invalid_argument("dot_constant: probe length mismatch");
  T acc{0};
  const auto d = input.data();
  for (std::size_t i = 0; i < probe.size(); ++i) acc += d[i] * probe[i];
  return Tensor<T>::make_result(Shape{1, 1, 1, 1, 1}, {acc}, {input}, "dot_constant",
                                [probe](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * probe[i];
  });
}

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& where) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NumericFault(where, "non-finite value in output of shape " + to_string(t.shape()));
  }
}

#define PROTUSEG_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int);          \
  template Tensor<T> maxpool2(const Tensor<T>&);                                                 \
  template Tensor<T> upsample2(const Tensor<T>&);                                                \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
  template Tensor<T> clamp01(const Tensor<T>&);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);                                 \
  template Tensor<T> linear_combination(const std::vector<Tensor<T>>&, const std::vector<T>&);   \
  template Tensor<T> dot_constant(const Tensor<T>&, const std::vector<T>&);                      \
  template void check_finite(const Tensor<T>&, const std::string&);

PROTUSEG_INSTANTIATE_OPS(float)
PROTUSEG_INSTANTIATE_OPS(double)

}  // namespace protuseg::nn
