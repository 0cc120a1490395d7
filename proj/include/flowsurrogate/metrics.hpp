#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "flowsurrogate/tensor.hpp"

namespace flowsurrogate {

struct RegressionMetrics {
  std::optional<double> r2;  // empty when the targets have no spread
  double rmse = 0.0;
  std::size_t samples = 0;
};

/// Streaming R^2 / RMSE over samples of equal shape. Each sample is one
/// flattened field y (all channels and pixels); |.| is the L2 norm over it.
///   R^2  = 1 - sum |y - yhat|^2 / sum |y - ybar|^2,  ybar the mean field
///   RMSE = sqrt(sum |y - yhat|^2 / N)
class MetricAccumulator {
 public:
  /// Leading axis of `prediction` and `target` indexes samples.
  template <typename T>
  void add(const Tensor<T>& prediction, const Tensor<T>& target);
  void add_sample(const double* prediction, const double* target, std::size_t length);

  RegressionMetrics result() const;
  std::size_t samples() const { return count_; }

 private:
  std::size_t count_ = 0;
  double squared_error_ = 0.0;
  std::vector<double> mean_;  // per-element running mean of the targets
  std::vector<double> m2_;    // per-element sum of squared deviations
};

template <typename T>
RegressionMetrics r2_rmse(const Tensor<T>& prediction, const Tensor<T>& target);

/// Intersection over union of two binary masks; 1 when both are empty.
template <typename T>
double mask_iou(const Tensor<T>& predicted, const Tensor<T>& truth);

}  // namespace flowsurrogate
