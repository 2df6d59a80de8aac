#include "protuseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "protuseg/nn/ops.hpp"

namespace protuseg {

using nn::Tensor;

void LossConfig::validate() const {
  if (dice_weight < 0 || ce_weight < 0) throw std::invalid_argument("loss weights must be >= 0");
  if (!(smoothing >= 0.0 && smoothing < 0.5)) throw std::invalid_argument("label smoothing must lie in [0, 0.5)");
  if (!(dice_delta > 0.0)) throw std::invalid_argument("dice delta must be > 0");
}

namespace {

template <typename T>
void require_match(const Tensor<T>& pred, const Tensor<T>& target, const char* name) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument(std::string(name) + ": shape mismatch " + nn::to_string(pred.shape()) + " vs " +
                                nn::to_string(target.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double delta, bool squared) {
  require_match(pred, target, "dice_loss");
  const int batch = pred.batch(), channels = pred.channels();
  const std::size_t sp = pred.spatial_size();
  const auto p = pred.data(), t = target.data();

  // Per channel: intersection, denominator.
  std::vector<double> inter(channels, 0.0), denom(channels, delta);
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * sp;
      double i_acc = 0.0, d_acc = 0.0;
      for (std::size_t i = 0; i < sp; ++i) {
        const double pv = p[base + i], tv = t[base + i];
        i_acc += pv * tv;
        d_acc += squared ? pv * pv + tv * tv : pv + tv;
      }
      inter[c] += i_acc;
      denom[c] += d_acc;
    }
  double loss = 0.0;
  for (int c = 0; c < channels; ++c) loss += 1.0 - (2.0 * inter[c] + delta) / denom[c];
  loss /= channels;

  return Tensor<T>::make_result(nn::Shape{1, 1, 1, 1, 1}, {static_cast<T>(loss)}, {pred}, "dice_loss",
                                [inter, denom, delta, squared, target, batch, channels, sp](nn::detail::Node<T>& self) {
    auto& pn = *self.parents[0];
    if (!pn.requires_grad) return;
    auto& g = pn.ensure_grad();
    const double upstream = self.grad[0] / channels;
    const auto tv = target.data();
    for (int c = 0; c < channels; ++c) {
      const double num = 2.0 * inter[c] + delta;
      const double u = denom[c];
      for (int n = 0; n < batch; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * sp;
        for (std::size_t i = 0; i < sp; ++i) {
          const double pv = pn.data[base + i];
          const double dden = squared ? 2.0 * pv : 1.0;
          const double d = -(2.0 * tv[base + i] * u - num * dden) / (u * u);
          g[base + i] += static_cast<T>(upstream * d);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& pred, const Tensor<T>& target, double eps) {
  require_match(pred, target, "ce_loss");
  if (!(eps >= 0.0 && eps < 0.5)) throw std::invalid_argument("ce_loss: smoothing must lie in [0, 0.5)");
  const double tiny = std::numeric_limits<T>::epsilon();
  const auto p = pred.data(), t = target.data();
  const std::size_t m = pred.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double pv = std::clamp(static_cast<double>(p[i]), tiny, 1.0 - tiny);
    const double ts = t[i] * (1.0 - eps) + eps / 2.0;
    acc -= ts * std::log(pv) + (1.0 - ts) * std::log(1.0 - pv);
  }
  const double loss = acc / static_cast<double>(m);

  return Tensor<T>::make_result(nn::Shape{1, 1, 1, 1, 1}, {static_cast<T>(loss)}, {pred}, "ce_loss",
                                [target, eps, tiny, m](nn::detail::Node<T>& self) {
    auto& pn = *self.parents[0];
    if (!pn.requires_grad) return;
    auto& g = pn.ensure_grad();
    const auto tv = target.data();
    const double scale = self.grad[0] / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double pv = std::clamp(static_cast<double>(pn.data[i]), tiny, 1.0 - tiny);
      const double ts = tv[i] * (1.0 - eps) + eps / 2.0;
      g[i] += static_cast<T>(scale * (pv - ts) / (pv * (1.0 - pv)));
    }
  });
}

namespace {

template <typename T>
Tensor<T> dice_ce(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg, double eps) {
  return nn::linear_combination<T>({dice_loss(pred, target, cfg.dice_delta, cfg.squared_dice), ce_loss(pred, target, eps)},
                                   {static_cast<T>(cfg.dice_weight), static_cast<T>(cfg.ce_weight)});
}

}  // namespace

template <typename T>
Tensor<T> step1_loss(const Tensor<T>& base_out, const Tensor<T>& kidney_target, const Tensor<T>& tumor_target,
                     const LossConfig& cfg) {
  if (base_out.channels() != 2) throw std::invalid_argument("step1_loss: base output must have 2 channels");
  const auto kidney = nn::slice_channels(base_out, 0, 1);
  const auto tumor = nn::slice_channels(base_out, 1, 1);
  return nn::linear_combination<T>({dice_ce(kidney, kidney_target, cfg, 0.0), dice_ce(tumor, tumor_target, cfg, 0.0)},
                                   {T{1}, T{1}});
}

template <typename T>
Tensor<T> step2_loss(const Tensor<T>& prot_out, const Tensor<T>& target, const LossConfig& cfg) {
  return ce_loss(prot_out, target, cfg.smoothing);
}

template <typename T>
Tensor<T> step3_loss(const Tensor<T>& fusion_out, const Tensor<T>& base_out, const Tensor<T>& kidney_target,
                     const Tensor<T>& tumor_target, const LossConfig& cfg) {
  return nn::linear_combination<T>(
      {dice_ce(fusion_out, tumor_target, cfg, 0.0), step1_loss(base_out, kidney_target, tumor_target, cfg)},
      {T{1}, T{1}});
}

#define PROTUSEG_INSTANTIATE_LOSSES(T)                                                                     \
  template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, double, bool);                          \
  template Tensor<T> ce_loss(const Tensor<T>&, const Tensor<T>&, double);                                  \
  template Tensor<T> step1_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const LossConfig&);  \
  template Tensor<T> step2_loss(const Tensor<T>&, const Tensor<T>&, const LossConfig&);                    \
  template Tensor<T> step3_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                const LossConfig&);

PROTUSEG_INSTANTIATE_LOSSES(float)
PROTUSEG_INSTANTIATE_LOSSES(double)

}  // namespace protuseg
