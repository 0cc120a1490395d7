#include "flowsurrogate/metrics.hpp"

#include <cmath>

#include "flowsurrogate/error.hpp"

namespace flowsurrogate {

void MetricAccumulator::add_sample(const double* prediction, const double* target, std::size_t length) {
  if (count_ == 0) {
    mean_.assign(length, 0.0);
    m2_.assign(length, 0.0);
  } else if (mean_.size() != length) {
    throw ShapeError("MetricAccumulator: sample length changed");
  }
  for (std::size_t i = 0; i < length; ++i) {
    const double d = target[i] - prediction[i];
    squared_error_ += d * d;
  }
  ++count_;
  const double n = static_cast<double>(count_);
  for (std::size_t i = 0; i < length; ++i) {
    const double delta = target[i] - mean_[i];
    mean_[i] += delta / n;
    m2_[i] += delta * (target[i] - mean_[i]);
  }
}

template <typename T>
void MetricAccumulator::add(const Tensor<T>& prediction, const Tensor<T>& target) {
  require_same_shape(prediction.shape(), target.shape(), "metrics");
  if (prediction.rank() == 0) throw ShapeError("metrics: scalar input");
  const std::size_t n = prediction.dim(0);
  const std::size_t length = n == 0 ? 0 : prediction.size() / n;
  std::vector<double> p(length), y(length);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < length; ++i) {
      p[i] = prediction[s * length + i];
      y[i] = target[s * length + i];
    }
    add_sample(p.data(), y.data(), length);
  }
}

RegressionMetrics MetricAccumulator::result() const {
  RegressionMetrics m;
  m.samples = count_;
  if (count_ == 0) return m;
  const double n = static_cast<double>(count_);
  m.rmse = std::sqrt(squared_error_ / n);
  double spread = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < mean_.size(); ++i) {
    spread += m2_[i];
    scale += mean_[i] * mean_[i];
  }
  if (count_ >= 2 && spread > 1e-14 * n * scale && spread > 0.0) m.r2 = 1.0 - squared_error_ / spread;
  return m;
}

template <typename T>
RegressionMetrics r2_rmse(const Tensor<T>& prediction, const Tensor<T>& target) {
  MetricAccumulator acc;
  acc.add(prediction, target);
  return acc.result();
}

template <typename T>
double mask_iou(const Tensor<T>& predicted, const Tensor<T>& truth) {
  require_same_shape(predicted.shape(), truth.shape(), "mask_iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool a = predicted[i] > T{0.5}, b = truth[i] > T{0.5};
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

template void MetricAccumulator::add(const Tensor<float>&, const Tensor<float>&);
template void MetricAccumulator::add(const Tensor<double>&, const Tensor<double>&);
template RegressionMetrics r2_rmse(const Tensor<float>&, const Tensor<float>&);
template RegressionMetrics r2_rmse(const Tensor<double>&, const Tensor<double>&);
template double mask_iou(const Tensor<float>&, const Tensor<float>&);
template double mask_iou(const Tensor<double>&, const Tensor<double>&);

}  // namespace flowsurrogate
