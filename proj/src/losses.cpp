#include "flowsurrogate/losses.hpp"

#include <algorithm>
#include <cmath>

namespace flowsurrogate {

template <typename T>
Tensor<T> binarize(const Tensor<T>& saturation, double threshold) {
  Tensor<T> mask(saturation.shape());
  for (std::size_t i = 0; i < saturation.size(); ++i) mask[i] = saturation[i] > threshold ? T{1} : T{0};
  return mask;
}

template <typename T>
LossResult<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
  require_same_shape(prediction.shape(), target.shape(), "mse_loss");
  if (prediction.rank() == 0 || prediction.dim(0) == 0) throw ShapeError("mse_loss: empty batch");
  const double n = static_cast<double>(prediction.dim(0));
  LossResult<T> out{0.0, Tensor<T>(prediction.shape())};
  double sum = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = static_cast<double>(prediction[i]) - static_cast<double>(target[i]);
    sum += d * d;
    out.grad[i] = static_cast<T>(2.0 * d / n);
  }
  out.value = sum / n;
  return out;
}

template <typename T>
LossResult<T> bce_loss(const Tensor<T>& probability, const Tensor<T>& mask, double clamp) {
  require_same_shape(probability.shape(), mask.shape(), "bce_loss");
  if (probability.rank() == 0 || probability.dim(0) == 0) throw ShapeError("bce_loss: empty batch");
  const double count = static_cast<double>(probability.size());
  LossResult<T> out{0.0, Tensor<T>(probability.shape())};
  double sum = 0.0;
  for (std::size_t i = 0; i < probability.size(); ++i) {
    const double p = std::clamp(static_cast<double>(probability[i]), clamp, 1.0 - clamp);
    const double z = mask[i];
    sum -= z * std::log(p) + (1.0 - z) * std::log(1.0 - p);
    out.grad[i] = static_cast<T>((p - z) / (p * (1.0 - p)) / count);
  }
  out.value = sum / count;
  return out;
}

template Tensor<float> binarize(const Tensor<float>&, double);
template Tensor<double> binarize(const Tensor<double>&, double);
template LossResult<float> mse_loss(const Tensor<float>&, const Tensor<float>&);
template LossResult<double> mse_loss(const Tensor<double>&, const Tensor<double>&);
template LossResult<float> bce_loss(const Tensor<float>&, const Tensor<float>&, double);
template LossResult<double> bce_loss(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace flowsurrogate
