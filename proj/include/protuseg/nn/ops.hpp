#pragma once

#include <string>
#include <vector>

#include "protuseg/nn/tensor.hpp"

namespace protuseg::nn {

/// Cross-correlation with "same" padding (k / 2). kernel is (out, in, k, k, k)
/// with odd k, bias is (1, out, 1, 1, 1). stride 2 halves even extents.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, int stride = 1);

/// 2x2x2 max pooling, stride 2. Extents must be even. Gradient goes to the
/// window maximum; ties resolve to the lowest linear index.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input);

/// Doubles every spatial extent. Output index i samples input coordinate
/// (i + 0.5) / 2 - 0.5, clamped at the borders.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& input);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

/// Clip to [0, 1]; gradient passes only where the input is strictly inside.
template <typename T>
Tensor<T> clamp01(const Tensor<T>& input);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Stacks b's channels after a's.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, int first, int count);

/// sum_i weights[i] * terms[i]; all terms share one shape.
template <typename T>
Tensor<T> linear_combination(const std::vector<Tensor<T>>& terms, const std::vector<T>& weights);

/// Scalar sum_i input[i] * probe[i]. probe is a constant.
template <typename T>
Tensor<T> dot_constant(const Tensor<T>& input, const std::vector<T>& probe);

/// Throws NumericFault naming `where` if any value is NaN or infinite.
template <typename T>
void check_finite(const Tensor<T>& t, const std::string& where);

}  // namespace protuseg::nn
