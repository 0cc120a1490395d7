#pragma once

#include "flowsurrogate/tensor.hpp"

namespace flowsurrogate {

inline constexpr double kBinarizeThreshold = 1e-8;
inline constexpr double kProbabilityClamp = 1e-7;

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;  // d value / d prediction
};

/// Pixel-wise indicator: 1 where sg > threshold, else 0.
template <typename T>
Tensor<T> binarize(const Tensor<T>& saturation, double threshold = kBinarizeThreshold);

/// Squared L2 error summed over every channel and pixel of a sample, averaged
/// over the leading (sample) axis.
template <typename T>
LossResult<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target);

/// Binary cross entropy, averaged over pixels and then over samples. The
/// probabilities are clamped to [clamp, 1 - clamp] before the logarithm; the
/// gradient is evaluated at the clamped value.
template <typename T>
LossResult<T> bce_loss(const Tensor<T>& probability, const Tensor<T>& mask, double clamp = kProbabilityClamp);

}  // namespace flowsurrogate
