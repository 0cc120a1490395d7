#include "flowsurrogate/grf.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <random>
#include <sstream>

namespace flowsurrogate {

Location cell_center(const GridSpec& grid, std::size_t row, std::size_t col) {
  return {(static_cast<double>(col) + 0.5) * grid.cell_size, (static_cast<double>(row) + 0.5) * grid.cell_size};
}

double covariance(const Location& a, const Location& b, const GrfParams& params) {
  const double d = std::hypot(a.x - b.x, a.y - b.y);
  return params.variance * std::exp(-d / params.correlation_length);
}

GrfSampler::GrfSampler(const GridSpec& grid, const GrfParams& params, double k_ref)
    : grid_(grid), params_(params), k_ref_(k_ref) {
  if (grid.height == 0 || grid.width == 0 || !(grid.cell_size > 0.0)) {
    throw ConfigError("grid must have positive extents and cell size");
  }
  if (params.variance < 0.0) throw ConfigError("GRF variance must be non-negative");
  if (!(params.correlation_length > 0.0)) throw ConfigError("GRF correlation length must be positive");
  if (!(k_ref > 0.0)) throw ConfigError("reference permeability must be positive");
  if (params.variance == 0.0) return;

  const std::size_t n = grid.cells();
  Eigen::MatrixXd cov(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const Location a = cell_center(grid, i / grid.width, i % grid.width);
    for (std::size_t j = 0; j <= i; ++j) {
      const Location b = cell_center(grid, j / grid.width, j % grid.width);
      cov(i, j) = cov(j, i) = covariance(a, b, params);
    }
  }

  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  double jitter = 1e-10 * params.variance;
  const double max_jitter = 1e-6 * params.variance;
  while (llt.info() != Eigen::Success) {
    if (jitter > max_jitter) {
      std::ostringstream msg;
      msg << "covariance Cholesky failed for " << n << " cells (variance " << params.variance
          << ", correlation length " << params.correlation_length << ") after jitter up to " << max_jitter;
      throw NumericalError(msg.str());
    }
    Eigen::MatrixXd jittered = cov;
    jittered.diagonal().array() += jitter;
    llt.compute(jittered);
    jitter_ = jitter;
    jitter *= 2.0;
  }
  factor_ = llt.matrixL();
}

PermeabilityField GrfSampler::sample(std::uint64_t seed) const {
  const std::size_t n = grid_.cells();
  Tensor<double> log_values({grid_.height, grid_.width}, params_.mean);
  if (factor_.size() != 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd xi(n);
    for (std::size_t i = 0; i < n; ++i) xi[i] = normal(rng);
    const Eigen::VectorXd g = factor_.triangularView<Eigen::Lower>() * xi;
    for (std::size_t i = 0; i < n; ++i) log_values[i] += g[i];
  }
  return field_from_log(std::move(log_values), k_ref_);
}

PermeabilityField sample_field(const GridSpec& grid, const GrfParams& params, double k_ref) {
  return GrfSampler(grid, params, k_ref).sample(params.seed);
}

PermeabilityField field_from_log(Tensor<double> log_values, double k_ref) {
  Tensor<double> values(log_values.shape());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = k_ref * std::exp(log_values[i]);
  return {std::move(log_values), std::move(values), k_ref};
}

}  // namespace flowsurrogate
