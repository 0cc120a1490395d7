#include "flowsurrogate/optim.hpp"

#include <algorithm>
#include <cmath>

namespace flowsurrogate {

template <typename T>
AdamState<T> AdamState<T>::init(const NetworkState<T>& state) {
  AdamState adam;
  for (const auto& p : state.params) {
    adam.first.emplace_back(p.value.shape());
    adam.second.emplace_back(p.value.shape());
  }
  return adam;
}

template <typename T>
void adam_step(NetworkState<T>& state, AdamState<T>& adam, const AdamOptions& options) {
  if (adam.first.size() != state.params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  ++adam.step;
  const double t = static_cast<double>(adam.step);
  const double c1 = 1.0 - std::pow(options.beta1, t);
  const double c2 = 1.0 - std::pow(options.beta2, t);
  const double b1 = options.beta1, b2 = options.beta2;
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    auto& p = state.params[i];
    auto& m = adam.first[i];
    auto& v = adam.second[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = options.learning_rate * (mj / c1) / (std::sqrt(vj / c2) + options.epsilon);
      p.value[j] = static_cast<T>(p.value[j] - update);
    }
  }
}

template <typename T>
double add_weight_decay(NetworkState<T>& state, double alpha) {
  if (alpha == 0.0) return 0.0;
  double sum = 0.0;
  for (auto& p : state.params) {
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double v = p.value[j];
      sum += v * v;
      p.grad[j] = static_cast<T>(p.grad[j] + alpha * v);
    }
  }
  return 0.5 * alpha * sum;
}

PlateauScheduler::PlateauScheduler(double learning_rate, const PlateauOptions& options)
    : options_(options), learning_rate_(learning_rate) {}

double PlateauScheduler::step(double metric) {
  if (metric < best_ - options_.min_delta) {
    best_ = metric;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= options_.patience) {
    learning_rate_ = std::max(learning_rate_ * options_.factor, options_.min_learning_rate);
    bad_epochs_ = 0;
  }
  return learning_rate_;
}

void PlateauScheduler::restore(double learning_rate, double best, std::size_t bad_epochs) {
  learning_rate_ = learning_rate;
  best_ = best;
  bad_epochs_ = bad_epochs;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(NetworkState<float>&, AdamState<float>&, const AdamOptions&);
template void adam_step(NetworkState<double>&, AdamState<double>&, const AdamOptions&);
template double add_weight_decay(NetworkState<float>&, double);
template double add_weight_decay(NetworkState<double>&, double);

}  // namespace flowsurrogate
