#pragma once

#include <cstddef>
#include <cstdint>

#include <Eigen/Core>

#include "flowsurrogate/tensor.hpp"

namespace flowsurrogate {

/// Regular 2-D grid: `height` rows by `width` columns of square cells.
struct GridSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  double cell_size = 10.0;  // m

  std::size_t cells() const { return height * width; }
};

struct Location {
  double x = 0.0;
  double y = 0.0;
};

/// Center of cell (row, col) in meters; column index runs along x.
Location cell_center(const GridSpec& grid, std::size_t row, std::size_t col);

/// Log-Gaussian permeability model.
struct GrfParams {
  double mean = 0.0;
  double variance = 0.5;
  double correlation_length = 100.0;  // m
  std::uint64_t seed = 0;
};

inline constexpr double kReferencePermeability = 2.5e-13;  // m^2

struct PermeabilityField {
  Tensor<double> log_values;  // G(s), [H, W]
  Tensor<double> values;      // k(s) = k_ref exp(G(s)), [H, W], m^2
  double k_ref = kReferencePermeability;
};

/// sigma^2 exp(-|s - s'| / lambda).
double covariance(const Location& a, const Location& b, const GrfParams& params);

/// Builds the dense covariance over cell centers once and draws realizations
/// G = m + L xi from its Cholesky factor L.
class GrfSampler {
 public:
  GrfSampler(const GridSpec& grid, const GrfParams& params, double k_ref = kReferencePermeability);

  PermeabilityField sample(std::uint64_t seed) const;

  const GridSpec& grid() const { return grid_; }
  const GrfParams& params() const { return params_; }
  /// Diagonal jitter that made the covariance factorizable (0 if none needed).
  double jitter() const { return jitter_; }

 private:
  GridSpec grid_;
  GrfParams params_;
  double k_ref_;
  double jitter_ = 0.0;
  Eigen::MatrixXd factor_;  // lower triangular; empty when variance == 0
};

/// One realization with `params.seed`.
PermeabilityField sample_field(const GridSpec& grid, const GrfParams& params, double k_ref = kReferencePermeability);

/// Field from given log values (G), e.g. read back from a dataset.
PermeabilityField field_from_log(Tensor<double> log_values, double k_ref = kReferencePermeability);

}  // namespace flowsurrogate
