#pragma once

// Central finite-difference checks of the reverse-mode gradients (64-bit).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "protuseg/nn/tensor.hpp"
#include "protuseg/random.hpp"

namespace protuseg {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  int probes = 0;
  bool passed = false;
};

/// Scalar function of the listed inputs.
using ScalarFn = std::function<nn::Tensor<double>(const std::vector<nn::Tensor<double>>&)>;

/// Compares backward() against (f(x + h) - f(x - h)) / 2h on up to
/// `probes_per_input` random elements of each input that requires grad.
/// Error per element is |a - n| / max(|a|, |n|), or 0 when |a - n| < 1e-9.
GradCheckResult check_gradients(const std::string& name, const std::vector<nn::Tensor<double>>& inputs,
                                const ScalarFn& f, int probes_per_input, double tolerance, Rng& rng,
                                double step = 1e-6);

/// Every differentiable op and loss at tolerance 1e-4, then the desk network
/// (base 4, depth 2, two inputs) at 1e-3 with 10 parameters on each of 5
/// random inputs.
std::vector<GradCheckResult> run_grad_checks(std::uint64_t seed);

}  // namespace protuseg
