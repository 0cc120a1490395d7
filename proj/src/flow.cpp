#include "flowsurrogate/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "flowsurrogate/losses.hpp"

namespace flowsurrogate {

double rescale_pressure(double pressure, const PressureScaling& scaling) {
  return pressure / scaling.scale - scaling.offset;
}

void SimConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("simulator: " + msg); };
  if (grid.height == 0 || grid.width == 0 || !(grid.cell_size > 0.0)) fail("grid must be non-empty");
  if (!(porosity > 0.0 && porosity <= 1.0)) fail("porosity must lie in (0, 1]");
  if (!(thickness > 0.0)) fail("thickness must be positive");
  if (!(injection_rate >= 0.0)) fail("injection rate must be non-negative");
  if (!(total_time > 0.0)) fail("total time must be positive");
  if (snapshot_times.empty()) fail("at least one snapshot time is required");
  for (std::size_t i = 0; i < snapshot_times.size(); ++i) {
    if (snapshot_times[i] < 0.0 || snapshot_times[i] > total_time) fail("snapshot times must lie in [0, total_time]");
    if (i > 0 && !(snapshot_times[i] > snapshot_times[i - 1])) fail("snapshot times must be strictly increasing");
  }
  if (!(corey_exponent >= 1.0)) fail("Corey exponent must be >= 1");
  if (!(mobility_ratio > 0.0) || !(resident_viscosity > 0.0)) fail("viscosities must be positive");
  if (residual_resident < 0.0 || residual_injected < 0.0 || residual_resident + residual_injected >= 1.0) {
    fail("residual saturations must be non-negative with sum < 1");
  }
  if (!(cfl_safety > 0.0 && cfl_safety <= 1.0)) fail("CFL safety factor must lie in (0, 1]");
  if (!(cg_tolerance > 0.0)) fail("CG tolerance must be positive");
}

// ---------------------------------------------------------------- fluid model

FluidModel::FluidModel(const SimConfig& config)
    : exponent_(config.corey_exponent),
      injected_viscosity_(config.resident_viscosity / config.mobility_ratio),
      resident_viscosity_(config.resident_viscosity),
      residual_resident_(config.residual_resident),
      residual_injected_(config.residual_injected) {
  constexpr int kSamples = 20000;
  const double top = max_saturation();
  const double h = top / kSamples;
  double prev = fractional_flow(0.0);
  for (int i = 1; i <= kSamples; ++i) {
    const double cur = fractional_flow(i * h);
    max_slope_ = std::max(max_slope_, (cur - prev) / h);
    prev = cur;
  }
  // the sampled secant slightly underestimates the peak tangent slope
  max_slope_ *= 1.01;
}

double FluidModel::effective_saturation(double s) const {
  const double se = (s - residual_injected_) / (1.0 - residual_injected_ - residual_resident_);
  return std::clamp(se, 0.0, 1.0);
}

double FluidModel::injected_mobility(double s) const {
  return std::pow(effective_saturation(s), exponent_) / injected_viscosity_;
}

double FluidModel::resident_mobility(double s) const {
  return std::pow(1.0 - effective_saturation(s), exponent_) / resident_viscosity_;
}

double FluidModel::fractional_flow(double s) const {
  const double a = injected_mobility(s);
  return a / (a + resident_mobility(s));
}

// ---------------------------------------------------------------- pressure

namespace {

struct Transmissibilities {
  Tensor<double> x;  // [H, W+1]; column 0 unused (flux boundary), column W Dirichlet
  Tensor<double> y;  // [H+1, W]; rows 0 and H zero
};

double harmonic(double a, double b) { return 2.0 * a * b / (a + b); }

Transmissibilities transmissibilities(const PermeabilityField& k, const Tensor<double>& s, const SimConfig& cfg,
                                      const FluidModel& fluid) {
  const std::size_t h = cfg.grid.height, w = cfg.grid.width;
  // Square cells: face area dx*thickness over center distance dx.
  const double geom = cfg.thickness;
  Transmissibilities t{Tensor<double>({h, w + 1}), Tensor<double>({h + 1, w})};
  std::vector<double> mob(h * w);
  for (std::size_t i = 0; i < h * w; ++i) mob[i] = fluid.total_mobility(s[i]);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 1; c < w; ++c) {
      const std::size_t a = r * w + c - 1, b = r * w + c;
      t.x(r, c) = geom * harmonic(k.values[a], k.values[b]) * 0.5 * (mob[a] + mob[b]);
    }
    const std::size_t last = r * w + w - 1;
    t.x(r, w) = geom * 2.0 * k.values[last] * mob[last];
  }
  for (std::size_t r = 1; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t a = (r - 1) * w + c, b = r * w + c;
      t.y(r, c) = geom * harmonic(k.values[a], k.values[b]) * 0.5 * (mob[a] + mob[b]);
    }
  }
  return t;
}

// y = A u for the overpressure u = P - P_right.
void apply_operator(const Transmissibilities& t, std::size_t h, std::size_t w, const std::vector<double>& u,
                    std::vector<double>& y) {
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      double acc = t.x(r, c + 1) * u[i];  // right face (Dirichlet at c == w-1)
      if (c + 1 < w) acc -= t.x(r, c + 1) * u[i + 1];
      if (c > 0) acc += t.x(r, c) * (u[i] - u[i - 1]);
      if (r > 0) acc += t.y(r, c) * (u[i] - u[i - w]);
      if (r + 1 < h) acc += t.y(r + 1, c) * (u[i] - u[i + w]);
      y[i] = acc;
    }
  }
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

Fluxes face_fluxes(const Tensor<double>& pressure, const PermeabilityField& k, const Tensor<double>& saturation,
                   const SimConfig& config) {
  const FluidModel fluid(config);
  const auto t = transmissibilities(k, saturation, config, fluid);
  const std::size_t h = config.grid.height, w = config.grid.width;
  Fluxes f{Tensor<double>({h, w + 1}), Tensor<double>({h + 1, w})};
  for (std::size_t r = 0; r < h; ++r) {
    f.x(r, 0) = config.injection_rate;
    for (std::size_t c = 1; c < w; ++c) f.x(r, c) = t.x(r, c) * (pressure(r, c - 1) - pressure(r, c));
    f.x(r, w) = t.x(r, w) * (pressure(r, w - 1) - config.right_boundary_pressure);
  }
  for (std::size_t r = 1; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) f.y(r, c) = t.y(r, c) * (pressure(r - 1, c) - pressure(r, c));
  }
  return f;
}

namespace {

PressureSolution pressure_solve(const PermeabilityField& k, const Tensor<double>& saturation, const SimConfig& config,
                                const Tensor<double>* initial_guess, const FluidModel& fluid) {
  const std::size_t h = config.grid.height, w = config.grid.width, n = h * w;
  require_same_shape(k.values.shape(), {h, w}, "solve_pressure permeability");
  require_same_shape(saturation.shape(), {h, w}, "solve_pressure saturation");
  for (double v : k.values.values()) {
    if (!(v > 0.0)) throw NumericalError("solve_pressure: permeability must be positive everywhere");
  }
  const auto t = transmissibilities(k, saturation, config, fluid);

  std::vector<double> b(n, 0.0);
  for (std::size_t r = 0; r < h; ++r) b[r * w] = config.injection_rate;
  std::vector<double> diag(n);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double d = t.x(r, c + 1) + t.y(r, c) + t.y(r + 1, c);
      if (c > 0) d += t.x(r, c);
      diag[r * w + c] = d;
    }
  }

  std::vector<double> u(n, 0.0);
  if (initial_guess != nullptr) {
    require_same_shape(initial_guess->shape(), {h, w}, "solve_pressure initial guess");
    for (std::size_t i = 0; i < n; ++i) u[i] = (*initial_guess)[i] - config.right_boundary_pressure;
  }

  PressureSolution sol;
  const double bnorm = std::sqrt(dot(b, b));
  if (bnorm == 0.0) {
    std::fill(u.begin(), u.end(), 0.0);
  } else {
    // Jacobi-preconditioned conjugate gradients on the SPD system A u = q.
    std::vector<double> r(n), z(n), p(n), ap(n);
    apply_operator(t, h, w, u, ap);
    for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - ap[i];
    for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / diag[i];
    p = z;
    double rz = dot(r, z);
    double rel = std::sqrt(dot(r, r)) / bnorm;
    std::size_t it = 0;
    while (rel > config.cg_tolerance) {
      if (it >= config.cg_max_iterations) {
        std::ostringstream msg;
        msg << "pressure CG did not converge: relative residual " << rel << " after " << it << " iterations";
        throw NumericalError(msg.str());
      }
      apply_operator(t, h, w, p, ap);
      const double alpha = rz / dot(p, ap);
      for (std::size_t i = 0; i < n; ++i) {
        u[i] += alpha * p[i];
        r[i] -= alpha * ap[i];
      }
      rel = std::sqrt(dot(r, r)) / bnorm;
      for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / diag[i];
      const double rz_next = dot(r, z);
      const double beta = rz_next / rz;
      rz = rz_next;
      for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
      ++it;
    }
    sol.iterations = it;
    sol.relative_residual = rel;
  }

  sol.pressure = Tensor<double>({h, w});
  for (std::size_t i = 0; i < n; ++i) sol.pressure[i] = config.right_boundary_pressure + u[i];
  sol.fluxes = Fluxes{Tensor<double>({h, w + 1}), Tensor<double>({h + 1, w})};
  for (std::size_t r = 0; r < h; ++r) {
    sol.fluxes.x(r, 0) = config.injection_rate;
    for (std::size_t c = 1; c < w; ++c) sol.fluxes.x(r, c) = t.x(r, c) * (u[r * w + c - 1] - u[r * w + c]);
    sol.fluxes.x(r, w) = t.x(r, w) * u[r * w + w - 1];
  }
  for (std::size_t r = 1; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) sol.fluxes.y(r, c) = t.y(r, c) * (u[(r - 1) * w + c] - u[r * w + c]);
  }
  return sol;
}

}  // namespace

PressureSolution solve_pressure(const PermeabilityField& k, const Tensor<double>& saturation, const SimConfig& config,
                                const Tensor<double>* initial_guess) {
  return pressure_solve(k, saturation, config, initial_guess, FluidModel(config));
}

// ---------------------------------------------------------------- transport

namespace {

double stable_step(const Fluxes& fluxes, const SimConfig& config, const FluidModel& fluid) {
  const std::size_t h = config.grid.height, w = config.grid.width;
  const double pore = config.porosity * config.grid.cell_size * config.grid.cell_size * config.thickness;
  double worst = 0.0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double out = std::max(fluxes.x(r, c + 1), 0.0) + std::max(-fluxes.x(r, c), 0.0) +
                   std::max(fluxes.y(r + 1, c), 0.0) + std::max(-fluxes.y(r, c), 0.0);
      worst = std::max(worst, out);
    }
  }
  if (worst == 0.0) return std::numeric_limits<double>::infinity();
  return pore / (fluid.max_fractional_flow_slope() * worst);
}

double outflow_rate(const Tensor<double>& saturation, const Fluxes& fluxes, const SimConfig& config,
                    const FluidModel& fluid) {
  const std::size_t h = config.grid.height, w = config.grid.width;
  double rate = 0.0;
  for (std::size_t r = 0; r < h; ++r) {
    const double f = fluxes.x(r, w);
    if (f > 0.0) rate += f * fluid.fractional_flow(saturation(r, w - 1));
  }
  return rate;
}

Tensor<double> upwind_step(const Tensor<double>& saturation, const Fluxes& fluxes, double dt, const SimConfig& config,
                           const FluidModel& fluid) {
  const std::size_t h = config.grid.height, w = config.grid.width;
  require_same_shape(saturation.shape(), {h, w}, "advance_saturation saturation");
  require_same_shape(fluxes.x.shape(), {h, w + 1}, "advance_saturation x fluxes");
  require_same_shape(fluxes.y.shape(), {h + 1, w}, "advance_saturation y fluxes");
  if (dt < 0.0) throw NumericalError("advance_saturation: negative time step");
  const double limit = stable_step(fluxes, config, fluid);
  if (dt > limit * (1.0 + 1e-12)) {
    std::ostringstream msg;
    msg << "advance_saturation: dt " << dt << " s violates CFL bound " << limit << " s";
    throw NumericalError(msg.str());
  }
  std::vector<double> f(h * w);
  for (std::size_t i = 0; i < h * w; ++i) f[i] = fluid.fractional_flow(saturation[i]);
  auto cell_f = [&](std::size_t r, std::size_t c) { return f[r * w + c]; };

  // Injected-phase flux through every face, upwinded; each interior face is
  // evaluated once and applied with opposite signs to its two cells.
  Tensor<double> fx({h, w + 1});
  Tensor<double> fy({h + 1, w});
  for (std::size_t r = 0; r < h; ++r) {
    fx(r, 0) = fluxes.x(r, 0) >= 0.0 ? fluxes.x(r, 0) : fluxes.x(r, 0) * cell_f(r, 0);
    for (std::size_t c = 1; c < w; ++c) {
      const double q = fluxes.x(r, c);
      fx(r, c) = q * (q >= 0.0 ? cell_f(r, c - 1) : cell_f(r, c));
    }
    const double q = fluxes.x(r, w);
    fx(r, w) = q >= 0.0 ? q * cell_f(r, w - 1) : 0.0;  // resident phase re-enters from the right
  }
  for (std::size_t r = 1; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double q = fluxes.y(r, c);
      fy(r, c) = q * (q >= 0.0 ? cell_f(r - 1, c) : cell_f(r, c));
    }
  }

  const double pore = config.porosity * config.grid.cell_size * config.grid.cell_size * config.thickness;
  const double factor = dt / pore;
  Tensor<double> next = saturation;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double net = fx(r, c) - fx(r, c + 1) + fy(r, c) - fy(r + 1, c);
      next(r, c) += factor * net;
    }
  }
  return next;
}

}  // namespace

double max_stable_time_step(const Fluxes& fluxes, const SimConfig& config) {
  return stable_step(fluxes, config, FluidModel(config));
}

double injected_outflow_rate(const Tensor<double>& saturation, const Fluxes& fluxes, const SimConfig& config) {
  return outflow_rate(saturation, fluxes, config, FluidModel(config));
}

Tensor<double> advance_saturation(const Tensor<double>& saturation, const Fluxes& fluxes, double dt,
                                  const SimConfig& config) {
  return upwind_step(saturation, fluxes, dt, config, FluidModel(config));
}

Tensor<double> advance_saturation(const Tensor<double>& saturation, const Tensor<double>& pressure,
                                  const PermeabilityField& k, double dt, const SimConfig& config) {
  return advance_saturation(saturation, face_fluxes(pressure, k, saturation, config), dt, config);
}

// ---------------------------------------------------------------- driver

std::vector<Snapshot> simulate(const PermeabilityField& k, const SimConfig& config, SimulationStats* stats) {
  config.validate();
  const std::size_t h = config.grid.height, w = config.grid.width;
  require_same_shape(k.values.shape(), {h, w}, "simulate permeability");
  const double pore = config.porosity * config.grid.cell_size * config.grid.cell_size * config.thickness;
  const double total_rate = config.injection_rate * static_cast<double>(h);
  const FluidModel fluid(config);

  Tensor<double> saturation({h, w}, 0.0);
  Tensor<double> pressure({h, w}, config.right_boundary_pressure);
  double t = 0.0, injected = 0.0, outflow = 0.0;
  std::size_t next = 0;
  std::vector<Snapshot> snapshots;
  snapshots.reserve(config.snapshot_times.size());
  SimulationStats local;

  while (true) {
    PressureSolution sol = pressure_solve(k, saturation, config, &pressure, fluid);
    local.cg_iterations += sol.iterations;
    pressure = sol.pressure;
    while (next < config.snapshot_times.size() && t == config.snapshot_times[next]) {
      Snapshot snap;
      snap.time = t;
      snap.pressure = pressure;
      snap.rescaled_pressure = Tensor<double>({h, w});
      for (std::size_t i = 0; i < h * w; ++i) {
        snap.rescaled_pressure[i] = rescale_pressure(pressure[i], config.pressure_scaling);
      }
      snap.saturation = saturation;
      // round-off from the CG residual can leave |S| ~ 1e-16 outside bounds
      for (auto& s : snap.saturation.values()) s = std::clamp(s, 0.0, fluid.max_saturation());
      snap.mask = binarize(snap.saturation);
      snap.injected_volume = injected;
      snap.outflow_volume = outflow;
      double stored = 0.0;
      for (double s : saturation.values()) stored += s * pore;
      snap.stored_volume = stored;
      snapshots.push_back(std::move(snap));
      ++next;
    }
    if (next == config.snapshot_times.size()) break;

    const double target = config.snapshot_times[next];
    const double stable = config.cfl_safety * stable_step(sol.fluxes, config, fluid);
    const bool lands = stable >= target - t;
    const double dt = lands ? target - t : stable;
    const double out_rate = outflow_rate(saturation, sol.fluxes, config, fluid);
    saturation = upwind_step(saturation, sol.fluxes, dt, config, fluid);
    injected += total_rate * dt;
    outflow += out_rate * dt;
    t = lands ? target : t + dt;
    ++local.steps;
  }
  if (stats != nullptr) *stats = local;
  return snapshots;
}

}  // namespace flowsurrogate
