#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowsurrogate/grf.hpp"
#include "flowsurrogate/tensor.hpp"

namespace flowsurrogate {

/// Output fields of one realization, [n_t, F, H, W].
using Evaluator = std::function<Tensor<double>(const PermeabilityField&)>;

/// Single-pass per-element mean and sum of squared deviations (Welford), with
/// the pairwise merge of Chan et al. for combining partial results.
class MomentAccumulator {
 public:
  void add(const Tensor<double>& sample);
  void merge(const MomentAccumulator& other);

  std::size_t count() const { return count_; }
  const Tensor<double>& mean() const { return mean_; }
  /// Unbiased (N - 1) variance; requires count() >= 2.
  Tensor<double> variance() const;

 private:
  std::size_t count_ = 0;
  Tensor<double> mean_;
  Tensor<double> m2_;
};

struct MomentFields {
  Tensor<double> mean;      // [n_t, F, H, W]
  Tensor<double> variance;  // [n_t, F, H, W], unbiased
  std::size_t count = 0;
};

/// A pixel of one output field at one time index.
struct Probe {
  std::size_t field = 0;
  std::size_t time_index = 0;
  std::size_t row = 0;
  std::size_t col = 0;
};

struct MonteCarloResult {
  MomentFields moments;
  std::vector<std::size_t> used;                   // realization indices that evaluated
  std::vector<std::string> failures;               // "index: message" for the rest
  std::vector<std::vector<double>> probe_samples;  // per probe, ordered as `used`
};

/// Evaluates every realization (in parallel when threads != 1), drops and
/// records failures, and accumulates moments in a fixed chunk order so the
/// result does not depend on the thread count.
MonteCarloResult run_monte_carlo(const Evaluator& evaluator, std::span<const PermeabilityField> inputs,
                                 std::span<const Probe> probes = {}, std::size_t threads = 1);

/// Moments only. Throws NumericalError when fewer than two realizations succeed.
MomentFields mc_moments(const Evaluator& evaluator, std::span<const PermeabilityField> inputs,
                        std::size_t threads = 1);

inline constexpr std::size_t kMinHistogramBins = 20;
inline constexpr std::size_t kMaxHistogramBins = 400;
inline constexpr double kBimodalMinMass = 0.05;

struct PdfEstimate {
  Probe probe;
  std::vector<double> edges;    // bins + 1 increasing values
  std::vector<double> density;  // integrates to 1 over the edges
  std::size_t count = 0;
  bool spike = false;    // every sample identical
  bool bimodal = false;  // two modes separated by an empty bin

  double bin_width(std::size_t i) const { return edges[i + 1] - edges[i]; }
  /// Mean of the histogram (bin midpoints weighted by mass).
  double mean() const;
};

/// Freedman-Diaconis bin count, never fewer than kMinHistogramBins.
std::size_t freedman_diaconis_bins(std::span<const double> samples);

/// Normalized histogram of `samples`; `edges` fixes the bins when given.
PdfEstimate histogram_pdf(std::span<const double> samples, const std::optional<std::vector<double>>& edges = {});

/// Two groups of non-empty bins, each holding at least kBimodalMinMass of
/// the probability, with at least one empty bin between them.
bool has_separated_modes(const PdfEstimate& pdf, double min_mass = kBimodalMinMass);

/// Histogram of one pixel across realizations. Needs at least 30 samples.
PdfEstimate mc_pdf(const Evaluator& evaluator, std::span<const PermeabilityField> inputs, const Probe& probe,
                   std::size_t threads = 1);
PdfEstimate pdf_from_samples(std::span<const double> samples, const Probe& probe);

struct FieldComparison {
  std::size_t field = 0;
  std::size_t time_index = 0;
  double mean_error = 0.0;      // |mu_s - mu_o|_2 / |mu_o|_2
  double variance_error = 0.0;  // same for the variance maps
};

struct PdfComparison {
  Probe probe;
  double l1_distance = 0.0;  // integral |p_s - p_o| on shared bins
  bool surrogate_bimodal = false;
  bool oracle_bimodal = false;
};

struct UqComparison {
  std::vector<FieldComparison> fields;
  std::vector<PdfComparison> pdfs;

  void write_csv(std::ostream& fields_out, std::ostream& pdfs_out) const;
};

/// Relative L2 distance; 0 when both vanish, infinity when only the reference does.
double relative_l2(std::span<const double> estimate, std::span<const double> reference);

/// Both results must cover the same realization set (identical `used`).
UqComparison compare_uq(const MonteCarloResult& surrogate, const MonteCarloResult& oracle,
                        std::span<const Probe> probes = {});

}  // namespace flowsurrogate
