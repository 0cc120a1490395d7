#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "flowsurrogate/config.hpp"
#include "flowsurrogate/dataset.hpp"
#include "flowsurrogate/network.hpp"
#include "flowsurrogate/training.hpp"
#include "flowsurrogate/uq.hpp"

namespace flowsurrogate {

/// Predicted Sg above this value counts as invaded when scoring front masks.
inline constexpr double kFrontThreshold = 0.1;

/// Predicted front mask from the saturation channel of [M, 3, H, W] outputs.
Tensor<float> predicted_front_mask(const Tensor<float>& outputs);

struct TimeMetrics {
  double days = 0.0;
  bool trained = false;  // time instance present in the training set
  RegressionMetrics metrics;
  double mean_iou = 0.0;
  double median_iou = 0.0;
};

struct EvalReport {
  std::string split;
  RegressionMetrics overall;
  double median_iou = 0.0;
  std::vector<TimeMetrics> per_time;

  /// Mean R^2 over trained instances minus R^2 at the first untrained one.
  std::optional<double> interpolation_gap() const;
  void write_csv(std::ostream& out) const;
};

EvalReport evaluate_dataset(DenseEncoderDecoder<float>& net, const Dataset& dataset,
                            const std::vector<double>& train_times_days);

/// Surrogate and simulator Monte Carlo on one freshly sampled realization set.
struct UqReport {
  std::vector<double> times_days;
  std::vector<Probe> probes;
  MonteCarloResult surrogate;
  MonteCarloResult oracle;
  UqComparison comparison;
};

/// [n_t, 2, H, W] fields (P', Sg) from the simulator.
Evaluator simulator_evaluator(const RunConfig& config, const std::vector<double>& days);
/// [n_t, 2, H, W] fields (P', Sg) from the network; not thread-safe.
Evaluator surrogate_evaluator(DenseEncoderDecoder<float>& net, const std::vector<double>& days,
                              double time_scale_days);

std::vector<PermeabilityField> uq_realizations(const RunConfig& config);
std::vector<Probe> uq_probes(const RunConfig& config);
UqReport run_uq(DenseEncoderDecoder<float>& net, const RunConfig& config);
/// Moment maps (float32), PDFs and comparison tables plus a checksummed
/// manifest. Returns the manifest text.
std::string write_uq_bundle(const UqReport& report, const RunConfig& config, const std::filesystem::path& dir);

// Command entry points. Paths default to locations under config.out.

struct TrainCommandOptions {
  TrainMode mode = TrainMode::two_stage;
  std::optional<std::filesystem::path> resume;
  std::size_t checkpoint_every = 0;  // epochs; 0 keeps only the final checkpoint
};

std::filesystem::path data_dir(const RunConfig& config, const std::string& split);
std::filesystem::path model_dir(const RunConfig& config, TrainMode mode);

void cmd_generate(const RunConfig& config, std::ostream& log);
TrainRecord cmd_train(const RunConfig& config, const TrainCommandOptions& options, std::ostream& log);
EvalReport cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& dataset, std::size_t dump_records, std::ostream& log);
UqReport cmd_uq(const RunConfig& config, const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir,
                std::ostream& log);

/// Network built from a checkpoint's recorded architecture.
DenseEncoderDecoder<float> load_network(const std::filesystem::path& checkpoint);

}  // namespace flowsurrogate
