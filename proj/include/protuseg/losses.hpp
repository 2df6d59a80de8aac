#pragma once

// Segmentation objectives for the three training steps. Predictions are
// sigmoid probabilities, targets are {0, 1} tensors of the same shape.

#include "protuseg/nn/tensor.hpp"

namespace protuseg {

struct LossConfig {
  double dice_weight = 0.5;
  double ce_weight = 0.5;
  /// Label smoothing applied to the Step-2 cross-entropy.
  double smoothing = 0.01;
  /// Additive guard in the dice numerator and denominator.
  double dice_delta = 1e-5;
  /// V-Net form (sum p^2 + sum t^2) when true, sum p + sum t otherwise.
  bool squared_dice = true;

  void validate() const;
};

/// Per channel over batch and voxels:
///   1 - (2 sum p t + delta) / (sum p^2 + sum t^2 + delta)
/// then averaged over channels.
template <typename T>
nn::Tensor<T> dice_loss(const nn::Tensor<T>& pred, const nn::Tensor<T>& target, double delta = 1e-5,
                        bool squared = true);

/// Binary cross-entropy against t' = t (1 - eps) + eps / 2, averaged over all
/// elements. Probabilities are clipped one machine epsilon away from 0 and 1.
template <typename T>
nn::Tensor<T> ce_loss(const nn::Tensor<T>& pred, const nn::Tensor<T>& target, double eps);

/// Base network objective. base_out channel 0 is the kidney head, trained
/// against kidney_target; channel 1 is the tumor head. Each channel
/// contributes dice_weight * dice + ce_weight * ce (no smoothing) and the two
/// channel terms are summed.
template <typename T>
nn::Tensor<T> step1_loss(const nn::Tensor<T>& base_out, const nn::Tensor<T>& kidney_target,
                         const nn::Tensor<T>& tumor_target, const LossConfig& cfg = {});

/// Protuberance network objective: smoothed cross-entropy only.
template <typename T>
nn::Tensor<T> step2_loss(const nn::Tensor<T>& prot_out, const nn::Tensor<T>& target, const LossConfig& cfg = {});

/// Joint objective: weighted dice + ce on the fusion tumor output plus the
/// unchanged Step-1 loss on the base outputs (intermediate supervision).
template <typename T>
nn::Tensor<T> step3_loss(const nn::Tensor<T>& fusion_out, const nn::Tensor<T>& base_out,
                         const nn::Tensor<T>& kidney_target, const nn::Tensor<T>& tumor_target,
                         const LossConfig& cfg = {});

}  // namespace protuseg
