#pragma once

// Scalar reference implementations used by unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "protuseg/losses.hpp"
#include "protuseg/random.hpp"

namespace oracle {

using protuseg::nn::Shape;
using protuseg::nn::Tensor;

inline double at(const Tensor<double>& t, int n, int c, int z, int y, int x) {
  const Shape& s = t.shape();
  return t.data()[(((static_cast<std::size_t>(n) * s[1] + c) * s[2] + z) * s[3] + y) * s[4] + x];
}

inline double dice(const Tensor<double>& p, const Tensor<double>& t, double delta, bool squared) {
  const Shape& s = p.shape();
  double total = 0.0;
  for (int c = 0; c < s[1]; ++c) {
    double num = 0.0, den = 0.0;
    for (int n = 0; n < s[0]; ++n)
      for (int z = 0; z < s[2]; ++z)
        for (int y = 0; y < s[3]; ++y)
          for (int x = 0; x < s[4]; ++x) {
            const double a = at(p, n, c, z, y, x), b = at(t, n, c, z, y, x);
            num += a * b;
            den += squared ? a * a + b * b : a + b;
          }
    total += 1.0 - (2.0 * num + delta) / (den + delta);
  }
  return total / s[1];
}

inline double ce(const Tensor<double>& p, const Tensor<double>& t, double eps) {
  const Shape& s = p.shape();
  const double tiny = std::numeric_limits<double>::epsilon();
  double sum = 0.0;
  long count = 0;
  for (int n = 0; n < s[0]; ++n)
    for (int c = 0; c < s[1]; ++c)
      for (int z = 0; z < s[2]; ++z)
        for (int y = 0; y < s[3]; ++y)
          for (int x = 0; x < s[4]; ++x) {
            const double a = std::clamp(at(p, n, c, z, y, x), tiny, 1.0 - tiny);
            const double b = at(t, n, c, z, y, x) * (1.0 - eps) + eps / 2.0;
            sum += -(b * std::log(a) + (1.0 - b) * std::log(1.0 - a));
            ++count;
          }
  return sum / count;
}

inline Tensor<double> channel(const Tensor<double>& t, int c) {
  const Shape& s = t.shape();
  Tensor<double> out(Shape{s[0], 1, s[2], s[3], s[4]});
  auto d = out.data();
  std::size_t i = 0;
  for (int n = 0; n < s[0]; ++n)
    for (int z = 0; z < s[2]; ++z)
      for (int y = 0; y < s[3]; ++y)
        for (int x = 0; x < s[4]; ++x) d[i++] = at(t, n, c, z, y, x);
  return out;
}

inline double dice_ce(const Tensor<double>& p, const Tensor<double>& t, const protuseg::LossConfig& cfg) {
  return cfg.dice_weight * dice(p, t, cfg.dice_delta, cfg.squared_dice) + cfg.ce_weight * ce(p, t, 0.0);
}

inline double step1(const Tensor<double>& base, const Tensor<double>& kidney, const Tensor<double>& tumor,
                    const protuseg::LossConfig& cfg) {
  return dice_ce(channel(base, 0), kidney, cfg) + dice_ce(channel(base, 1), tumor, cfg);
}

inline double step2(const Tensor<double>& p, const Tensor<double>& t, const protuseg::LossConfig& cfg) {
  return ce(p, t, cfg.smoothing);
}

inline double step3(const Tensor<double>& fusion, const Tensor<double>& base, const Tensor<double>& kidney,
                    const Tensor<double>& tumor, const protuseg::LossConfig& cfg) {
  return dice_ce(fusion, tumor, cfg) + step1(base, kidney, tumor, cfg);
}

inline Tensor<double> random_probs(protuseg::Rng& rng, const Shape& s) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = protuseg::uniform(rng, 0.0, 1.0);
  return t;
}

inline Tensor<double> random_binary(protuseg::Rng& rng, const Shape& s, double density) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = protuseg::bernoulli(rng, density) ? 1.0 : 0.0;
  return t;
}

/// Largest absolute difference over 50 random cases of every loss against its
/// oracle. Shapes vary in batch, channels and extent.
inline double max_loss_error(std::uint64_t seed, int cases = 50) {
  protuseg::Rng rng(seed);
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    const int n = protuseg::uniform_int(rng, 1, 3);
    const int z = protuseg::uniform_int(rng, 1, 5), y = protuseg::uniform_int(rng, 1, 5),
              x = protuseg::uniform_int(rng, 1, 5);
    const double density = protuseg::uniform(rng, 0.0, 0.6);
    protuseg::LossConfig cfg;
    cfg.squared_dice = i % 3 != 0;
    const Shape one{n, 1, z, y, x}, two{n, 2, z, y, x};
    const auto p1 = random_probs(rng, one), f = random_probs(rng, one), p2 = random_probs(rng, two);
    const auto t1 = random_binary(rng, one, density), k1 = random_binary(rng, one, density);
    const double eps = protuseg::uniform(rng, 0.0, 0.2);
    auto track = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
    track(protuseg::dice_loss(p1, t1, cfg.dice_delta, cfg.squared_dice).item(),
          dice(p1, t1, cfg.dice_delta, cfg.squared_dice));
    const auto t2 = random_binary(rng, two, density);
    track(protuseg::dice_loss(p2, t2, cfg.dice_delta, cfg.squared_dice).item(),
          dice(p2, t2, cfg.dice_delta, cfg.squared_dice));
    track(protuseg::ce_loss(p1, t1, eps).item(), ce(p1, t1, eps));
    track(protuseg::step1_loss(p2, k1, t1, cfg).item(), step1(p2, k1, t1, cfg));
    track(protuseg::step2_loss(p1, t1, cfg).item(), step2(p1, t1, cfg));
    track(protuseg::step3_loss(f, p2, k1, t1, cfg).item(), step3(f, p2, k1, t1, cfg));
  }
  return worst;
}

}  // namespace oracle
