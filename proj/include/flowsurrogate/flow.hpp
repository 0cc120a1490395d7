#pragma once

// Incompressible, immiscible two-phase flow on a regular grid (IMPES).
//
// An injected phase enters through every cell face on the left boundary at a
// fixed volumetric rate, the right boundary is held at constant pressure, and
// the top and bottom boundaries are closed. Relative permeabilities follow a
// Corey power law; capillarity and gravity are neglected, which keeps the
// saturation front a sharp shock.

#include <cstddef>
#include <vector>

#include "flowsurrogate/grf.hpp"
#include "flowsurrogate/tensor.hpp"

namespace flowsurrogate {

inline constexpr double kSecondsPerDay = 86400.0;

struct PressureScaling {
  double scale = 1e7;   // Pa
  double offset = 1.2;  // P' = P / scale - offset
};

/// P / 1e7 - 1.2 with the default scaling.
double rescale_pressure(double pressure, const PressureScaling& scaling = {});

struct SimConfig {
  GridSpec grid;
  double porosity = 0.2;
  double thickness = 1.0;                  // m
  double injection_rate = 1.0e-5;          // m^3/s per left-boundary cell
  double right_boundary_pressure = 1.2e7;  // Pa
  double total_time = 200.0 * kSecondsPerDay;
  std::vector<double> snapshot_times;      // s, strictly increasing
  double corey_exponent = 2.0;
  double mobility_ratio = 2.0;             // resident viscosity / injected viscosity
  double resident_viscosity = 2e-3;        // Pa s
  double residual_resident = 0.2;
  double residual_injected = 0.05;
  double cfl_safety = 0.5;
  double cg_tolerance = 1e-10;
  std::size_t cg_max_iterations = 20000;
  PressureScaling pressure_scaling;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

/// Corey relative permeabilities and the derived mobilities.
class FluidModel {
 public:
  explicit FluidModel(const SimConfig& config);

  double effective_saturation(double s) const;
  double injected_mobility(double s) const;
  double resident_mobility(double s) const;
  double total_mobility(double s) const { return injected_mobility(s) + resident_mobility(s); }
  /// Fraction of the total flux carried by the injected phase.
  double fractional_flow(double s) const;
  /// max over s of d(fractional_flow)/ds, sampled finely.
  double max_fractional_flow_slope() const { return max_slope_; }
  double max_saturation() const { return 1.0 - residual_resident_; }

 private:
  double exponent_;
  double injected_viscosity_;
  double resident_viscosity_;
  double residual_resident_;
  double residual_injected_;
  double max_slope_ = 0.0;
};

/// Volumetric face fluxes (m^3/s), positive along +x / +y.
/// `x` is [H, W+1]: column j is the face on the left of cell column j, so
/// column 0 is the injection boundary and column W the outflow boundary.
/// `y` is [H+1, W]: row i is the face above cell row i; rows 0 and H are
/// closed and stay zero.
struct Fluxes {
  Tensor<double> x;
  Tensor<double> y;
};

struct PressureSolution {
  Tensor<double> pressure;  // [H, W], Pa
  Fluxes fluxes;
  std::size_t iterations = 0;
  double relative_residual = 0.0;
};

/// Solves div(k lambda_t(S) grad P) = q with harmonic-mean face
/// permeabilities and arithmetic-mean face mobilities. `initial_guess`, when
/// given, warm-starts the conjugate-gradient iteration.
PressureSolution solve_pressure(const PermeabilityField& k, const Tensor<double>& saturation, const SimConfig& config,
                                const Tensor<double>* initial_guess = nullptr);

Fluxes face_fluxes(const Tensor<double>& pressure, const PermeabilityField& k, const Tensor<double>& saturation,
                   const SimConfig& config);

/// Largest dt for which the explicit upwind update is monotone.
double max_stable_time_step(const Fluxes& fluxes, const SimConfig& config);

/// Injected-phase volume leaving through the right boundary per second.
double injected_outflow_rate(const Tensor<double>& saturation, const Fluxes& fluxes, const SimConfig& config);

/// Explicit first-order upwind transport step. Throws NumericalError when dt
/// exceeds max_stable_time_step.
Tensor<double> advance_saturation(const Tensor<double>& saturation, const Fluxes& fluxes, double dt,
                                  const SimConfig& config);
Tensor<double> advance_saturation(const Tensor<double>& saturation, const Tensor<double>& pressure,
                                  const PermeabilityField& k, double dt, const SimConfig& config);

struct Snapshot {
  double time = 0.0;                 // s
  Tensor<double> pressure;           // Pa
  Tensor<double> rescaled_pressure;  // P'
  Tensor<double> saturation;         // injected-phase saturation
  Tensor<double> mask;               // binarized saturation
  double injected_volume = 0.0;      // cumulative, m^3
  double outflow_volume = 0.0;       // cumulative injected phase leaving, m^3
  double stored_volume = 0.0;        // injected phase in the domain, m^3
};

struct SimulationStats {
  std::size_t steps = 0;
  std::size_t cg_iterations = 0;
};

std::vector<Snapshot> simulate(const PermeabilityField& k, const SimConfig& config, SimulationStats* stats = nullptr);

}  // namespace flowsurrogate
