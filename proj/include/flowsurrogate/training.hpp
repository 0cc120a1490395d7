#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "flowsurrogate/checkpoint.hpp"
#include "flowsurrogate/metrics.hpp"
#include "flowsurrogate/network.hpp"
#include "flowsurrogate/optim.hpp"

namespace flowsurrogate {

/// Output channel layout of the surrogate and of the training targets.
inline constexpr std::size_t kPressureChannel = 0;
inline constexpr std::size_t kSaturationChannel = 1;
inline constexpr std::size_t kMaskChannel = 2;
inline constexpr std::size_t kOutputChannels = 3;

/// (x^i, t_j; y^{i,j}, zeta^{i,j}) records. Record m = i * n_t + j.
struct SurrogateData {
  Tensor<float> inputs;      // [N, d_x, H, W]
  std::vector<float> times;  // [n_t], network time inputs
  Tensor<float> outputs;     // [N, n_t, 3, H, W]: P', Sg, zeta

  std::size_t samples() const { return inputs.rank() == 4 ? inputs.dim(0) : 0; }
  std::size_t time_count() const { return times.size(); }
  std::size_t records() const { return samples() * time_count(); }
  /// Throws ShapeError when the three members disagree.
  void validate() const;

  /// Copies the given records into x [M, d_x, H, W], t [M], y [M, 3, H, W].
  void gather(std::span<const std::size_t> records, Tensor<float>& x, std::vector<float>& t, Tensor<float>& y) const;
  /// Keeps only the listed time instances.
  SurrogateData select_times(const std::vector<std::size_t>& keep) const;
};

enum class TrainMode { mse_only, two_stage };

const char* to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& text);

struct TrainConfig {
  TrainMode mode = TrainMode::two_stage;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double weight_decay = 5e-4;
  double bce_weight = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double plateau_factor = 0.1;
  std::size_t plateau_patience = 10;
  double plateau_min_delta = 1e-4;
  double min_learning_rate_ratio = 1e-3;
  std::size_t test_interval = 1;  // epochs between test evaluations; 0 disables
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
};

/// Loss pieces of one objective evaluation. `total` is what gets differentiated.
struct ObjectiveValue {
  double mse = 0.0;
  double bce = 0.0;           // unweighted
  double weighted_bce = 0.0;  // w * bce
  double decay = 0.0;         // (alpha / 2) theta^T theta
  double total = 0.0;
};

/// Evaluates J = L_MSE + w L_BCE + (alpha / 2) theta^T theta on one batch
/// (w = 0 gives the stage-one objective) and accumulates dJ/dtheta into the
/// parameter gradients. `output`, when non-null, receives the predictions.
/// The MSE acts on the P' and Sg channels, the BCE on the zeta channel.
template <typename T>
ObjectiveValue objective_and_gradient(DenseEncoderDecoder<T>& net, const Tensor<T>& x, std::span<const T> times,
                                      const Tensor<T>& targets, double bce_weight, double weight_decay, Mode mode,
                                      Tensor<T>* output = nullptr);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_rmse = 0.0;
  double test_rmse = 0.0;  // NaN when not evaluated
  double mse_loss = 0.0;
  double weighted_bce_loss = 0.0;
  double learning_rate = 0.0;
};

struct TrainRecord {
  std::vector<EpochRecord> epochs;

  /// Header plus one comma-separated row per epoch.
  void write_csv(std::ostream& out) const;
  static TrainRecord read_csv(std::istream& in);
  bool operator==(const TrainRecord&) const;
};

/// Algorithm driver: owns optimizer and scheduler state for one network.
class Trainer {
 public:
  Trainer(DenseEncoderDecoder<float>& net, const TrainConfig& config);

  /// One pass over shuffled minibatches of `train`. `test` may be null.
  const EpochRecord& run_epoch(const SurrogateData& train, const SurrogateData* test);
  /// Runs until config.epochs epochs have completed in total. The callback
  /// runs after every epoch.
  const TrainRecord& run(const SurrogateData& train, const SurrogateData* test,
                         const std::function<void(const Trainer&)>& after_epoch = {});

  const TrainRecord& record() const { return record_; }
  std::size_t epochs_done() const { return record_.epochs.size(); }
  std::size_t optimizer_steps() const { return optimizer_steps_; }
  double learning_rate() const { return scheduler_.learning_rate(); }
  const TrainConfig& config() const { return config_; }
  DenseEncoderDecoder<float>& network() { return net_; }

  /// Network, optimizer, scheduler and record; enough to resume exactly.
  Checkpoint to_checkpoint() const;
  void restore(const Checkpoint& checkpoint);

 private:
  DenseEncoderDecoder<float>& net_;
  TrainConfig config_;
  AdamState<float> adam_;
  PlateauScheduler scheduler_;
  TrainRecord record_;
  std::size_t optimizer_steps_ = 0;
};

/// Seeded permutation of [0, n) for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

/// Batched eval-mode predictions [records, 3, H, W] for every record.
Tensor<float> predict_all(DenseEncoderDecoder<float>& net, const SurrogateData& data, std::size_t batch_size = 32);

/// RMSE / R^2 of the P', Sg channels over every record of `data`.
RegressionMetrics evaluate(DenseEncoderDecoder<float>& net, const SurrogateData& data, std::size_t batch_size = 32);

TrainRecord train_two_stage(DenseEncoderDecoder<float>& net, const SurrogateData& train, const SurrogateData* test,
                            TrainConfig config);
TrainRecord mse_only_train(DenseEncoderDecoder<float>& net, const SurrogateData& train, const SurrogateData* test,
                           TrainConfig config);

}  // namespace flowsurrogate
