#include "protuseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "protuseg/losses.hpp"
#include "protuseg/nn/network.hpp"
#include "protuseg/nn/ops.hpp"
#include "protuseg/training.hpp"

namespace protuseg {

using nn::Tensor;
using Inputs = std::vector<Tensor<double>>;

namespace {

double rel_error(double a, double n) {
  const double diff = std::abs(a - n);
  if (diff < 1e-9) return 0.0;
  return diff / std::max(std::abs(a), std::abs(n));
}

Tensor<double> random_tensor(const nn::Shape& shape, Rng& rng, double lo, double hi, bool grad = true) {
  Tensor<double> t(shape, 0.0, grad);
  for (auto& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

Tensor<double> binary_tensor(const nn::Shape& shape, Rng& rng) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = bernoulli(rng, 0.5) ? 1.0 : 0.0;
  return t;
}

// Values bounded away from 0 so that kinks are never crossed by a probe.
Tensor<double> signed_tensor(const nn::Shape& shape, Rng& rng) {
  Tensor<double> t(shape, 0.0, true);
  for (auto& v : t.data()) v = (bernoulli(rng, 0.5) ? 1.0 : -1.0) * uniform(rng, 0.05, 1.0);
  return t;
}

std::vector<double> random_probe(std::size_t n, Rng& rng) {
  std::vector<double> p(n);
  for (auto& v : p) v = uniform(rng, -1.0, 1.0);
  return p;
}

// f reduced to a scalar through a fixed random projection.
ScalarFn projected(std::function<Tensor<double>(const Inputs&)> op, std::vector<double> probe) {
  return [op = std::move(op), probe = std::move(probe)](const Inputs& in) {
    return nn::dot_constant(op(in), probe);
  };
}

}  // namespace

GradCheckResult check_gradients(const std::string& name, const Inputs& inputs, const ScalarFn& f,
                                int probes_per_input, double tolerance, Rng& rng, double step) {
  GradCheckResult r{name, 0.0, tolerance, 0, false};
  for (auto t : inputs) {
    if (t.requires_grad()) t.zero_grad();
  }
  const Tensor<double> out = f(inputs);
  nn::backward(out);

  nn::NoGradGuard no_grad;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    Tensor<double> t = in;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(probes_per_input)));
    for (std::size_t i : idx) {
      const double saved = t.data()[i];
      t.data()[i] = saved + step;
      const double up = f(inputs).item();
      t.data()[i] = saved - step;
      const double down = f(inputs).item();
      t.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      r.max_rel_error = std::max(r.max_rel_error, rel_error(analytic[i], numeric));
      ++r.probes;
    }
  }
  r.passed = r.probes > 0 && r.max_rel_error < tolerance;
  return r;
}

std::vector<GradCheckResult> run_grad_checks(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;
  constexpr double kOpTol = 1e-4;
  constexpr double kNetTol = 1e-3;
  constexpr int kProbes = 40;

  auto check_op = [&](const std::string& name, Inputs inputs, std::function<Tensor<double>(const Inputs&)> op,
                      std::size_t out_numel) {
    results.push_back(check_gradients(name, inputs, projected(std::move(op), random_probe(out_numel, rng)), kProbes,
                                      kOpTol, rng));
  };
  auto check_scalar = [&](const std::string& name, Inputs inputs, ScalarFn f) {
    results.push_back(check_gradients(name, inputs, f, kProbes, kOpTol, rng));
  };

  const nn::Shape x8{1, 4, 8, 8, 8};
  {
    Inputs in{random_tensor(x8, rng, -1, 1), random_tensor({3, 4, 3, 3, 3}, rng, -0.5, 0.5),
              random_tensor({1, 3, 1, 1, 1}, rng, -0.5, 0.5)};
    check_op("conv3d_k3_s1", in, [](const Inputs& v) { return nn::conv3d(v[0], v[1], v[2], 1); }, 3 * 512);
  }
  {
    Inputs in{random_tensor({2, 4, 8, 8, 8}, rng, -1, 1), random_tensor({3, 4, 3, 3, 3}, rng, -0.5, 0.5),
              random_tensor({1, 3, 1, 1, 1}, rng, -0.5, 0.5)};
    check_op("conv3d_k3_s2", in, [](const Inputs& v) { return nn::conv3d(v[0], v[1], v[2], 2); }, 2 * 3 * 64);
  }
  {
    Inputs in{random_tensor(x8, rng, -1, 1), random_tensor({2, 4, 1, 1, 1}, rng, -0.5, 0.5),
              random_tensor({1, 2, 1, 1, 1}, rng, -0.5, 0.5)};
    check_op("conv3d_k1", in, [](const Inputs& v) { return nn::conv3d(v[0], v[1], v[2], 1); }, 2 * 512);
  }
  check_op("maxpool2", {random_tensor(x8, rng, -1, 1)}, [](const Inputs& v) { return nn::maxpool2(v[0]); }, 4 * 64);
  check_op("upsample2", {random_tensor({1, 2, 4, 4, 4}, rng, -1, 1)},
           [](const Inputs& v) { return nn::upsample2(v[0]); }, 2 * 512);
  check_op("relu", {signed_tensor(x8, rng)}, [](const Inputs& v) { return nn::relu(v[0]); }, 4 * 512);
  check_op("sigmoid", {random_tensor(x8, rng, -4, 4)}, [](const Inputs& v) { return nn::sigmoid(v[0]); }, 4 * 512);
  {
    // Keep every value at least 0.05 from the clip points.
    Tensor<double> t(x8, 0.0, true);
    for (auto& v : t.data()) {
      const int band = uniform_int(rng, 0, 2);
      v = band == 0 ? uniform(rng, -1.0, -0.05) : band == 1 ? uniform(rng, 0.05, 0.95) : uniform(rng, 1.05, 2.0);
    }
    check_op("clamp01", {t}, [](const Inputs& v) { return nn::clamp01(v[0]); }, 4 * 512);
  }
  check_op("add", {random_tensor(x8, rng, -1, 1), random_tensor(x8, rng, -1, 1)},
           [](const Inputs& v) { return nn::add(v[0], v[1]); }, 4 * 512);
  check_op("concat_channels", {random_tensor({1, 2, 4, 4, 4}, rng, -1, 1), random_tensor({1, 3, 4, 4, 4}, rng, -1, 1)},
           [](const Inputs& v) { return nn::concat_channels(v[0], v[1]); }, 5 * 64);
  check_op("slice_channels", {random_tensor({2, 3, 4, 4, 4}, rng, -1, 1)},
           [](const Inputs& v) { return nn::slice_channels(v[0], 1, 2); }, 2 * 2 * 64);
  check_op("linear_combination", {random_tensor(x8, rng, -1, 1), random_tensor(x8, rng, -1, 1)},
           [](const Inputs& v) { return nn::linear_combination<double>({v[0], v[1]}, {0.3, -1.7}); }, 4 * 512);
  {
    Inputs in{random_tensor({1, 1, 4, 4, 4}, rng, 0.05, 0.95), random_tensor({1, 1, 4, 4, 4}, rng, 0.05, 0.95),
              random_tensor({1, 1, 4, 4, 4}, rng, -1, 1)};
    check_op("fuse", in, [](const Inputs& v) { return fuse(v[0], v[1], v[2]); }, 2 * 64);
  }

  const nn::Shape p2{2, 2, 4, 4, 4};
  const nn::Shape p1{2, 1, 4, 4, 4};
  {
    const Tensor<double> t = binary_tensor(p2, rng);
    check_scalar("dice_loss", {random_tensor(p2, rng, 0.02, 0.98)},
                 [t](const Inputs& v) { return dice_loss(v[0], t); });
    check_scalar("dice_loss_plain", {random_tensor(p2, rng, 0.02, 0.98)},
                 [t](const Inputs& v) { return dice_loss(v[0], t, 1e-5, false); });
    check_scalar("ce_loss", {random_tensor(p2, rng, 0.02, 0.98)},
                 [t](const Inputs& v) { return ce_loss(v[0], t, 0.01); });
  }
  {
    const Tensor<double> k = binary_tensor(p1, rng);
    const Tensor<double> tu = binary_tensor(p1, rng);
    check_scalar("step1_loss", {random_tensor(p2, rng, 0.02, 0.98)},
                 [k, tu](const Inputs& v) { return step1_loss(v[0], k, tu); });
    check_scalar("step2_loss", {random_tensor(p1, rng, 0.02, 0.98)},
                 [tu](const Inputs& v) { return step2_loss(v[0], tu); });
    check_scalar("step3_loss", {random_tensor(p1, rng, 0.02, 0.98), random_tensor(p2, rng, 0.02, 0.98)},
                 [k, tu](const Inputs& v) { return step3_loss(v[0], v[1], k, tu); });
  }

  // Desk network: 10 random parameters on each of 5 random inputs.
  nn::NetworkConfig cfg = nn::NetworkConfig::fusion();
  cfg.base_channels = 4;
  cfg.num_downsamplings = 2;
  Rng init(derive_seed(seed, 1));
  nn::Network<double> net(cfg, init);
  std::vector<std::pair<Tensor<double>, std::size_t>> scalars;
  for (auto& p : net.params()) {
    for (std::size_t i = 0; i < p.value.numel(); ++i) scalars.emplace_back(p.value, i);
  }
  GradCheckResult total{"network_desk", 0.0, kNetTol, 0, false};
  const nn::Shape xs{1, 2, 8, 8, 8};
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor<double> x = random_tensor(xs, rng, -1, 1, false);
    const std::vector<double> probe = random_probe(8 * 8 * 8, rng);
    auto loss = [&] { return nn::dot_constant(net.forward(x), probe); };
    net.params().zero_grad();
    nn::backward(loss());
    nn::NoGradGuard no_grad;
    for (int k = 0; k < 10; ++k) {
      auto& [t, i] = scalars[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(scalars.size()) - 1))];
      const double analytic = t.grad()[i];
      const double saved = t.data()[i];
      constexpr double h = 1e-6;
      t.data()[i] = saved + h;
      const double up = loss().item();
      t.data()[i] = saved - h;
      const double down = loss().item();
      t.data()[i] = saved;
      total.max_rel_error = std::max(total.max_rel_error, rel_error(analytic, (up - down) / (2 * h)));
      ++total.probes;
    }
  }
  total.passed = total.max_rel_error < kNetTol;
  results.push_back(total);
  return results;
}

}  // namespace protuseg
