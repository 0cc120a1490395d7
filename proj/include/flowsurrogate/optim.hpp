#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "flowsurrogate/network.hpp"

namespace flowsurrogate {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> first;
  std::vector<Tensor<T>> second;
  std::size_t step = 0;

  static AdamState init(const NetworkState<T>& state);
};

/// Bias-corrected Adam update of every parameter from its current gradient.
template <typename T>
void adam_step(NetworkState<T>& state, AdamState<T>& adam, const AdamOptions& options);

/// Adds alpha * theta to every gradient and returns (alpha / 2) theta^T theta.
template <typename T>
double add_weight_decay(NetworkState<T>& state, double alpha);

struct PlateauOptions {
  double factor = 0.1;
  std::size_t patience = 10;
  double min_delta = 1e-4;  // absolute improvement that resets the count
  double min_learning_rate = 1e-6;
};

/// Divides the learning rate by 1/factor once the monitored value has gone
/// `patience` consecutive epochs without improving on the best by min_delta.
class PlateauScheduler {
 public:
  PlateauScheduler() = default;
  PlateauScheduler(double learning_rate, const PlateauOptions& options);

  /// Feeds one epoch's metric and returns the learning rate for the next.
  double step(double metric);

  double learning_rate() const { return learning_rate_; }
  double best() const { return best_; }
  std::size_t bad_epochs() const { return bad_epochs_; }
  const PlateauOptions& options() const { return options_; }

  void restore(double learning_rate, double best, std::size_t bad_epochs);

 private:
  PlateauOptions options_;
  double learning_rate_ = 1e-3;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs_ = 0;
};

}  // namespace flowsurrogate
