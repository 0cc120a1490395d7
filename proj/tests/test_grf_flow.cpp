#include <gtest/gtest.h>

#include <cmath>

#include "buckley_leverett.hpp"
#include "flowsurrogate/error.hpp"
#include "flowsurrogate/flow.hpp"
#include "flowsurrogate/grf.hpp"
#include "flowsurrogate/losses.hpp"

using namespace flowsurrogate;

namespace {

SimConfig desk_sim(std::vector<double> days = {100, 120, 140, 160, 180, 200}) {
  SimConfig c;
  for (double d : days) c.snapshot_times.push_back(d * kSecondsPerDay);
  c.total_time = c.snapshot_times.back();
  return c;
}

PermeabilityField homogeneous(const GridSpec& grid) {
  return field_from_log(Tensor<double>({grid.height, grid.width}, 0.0));
}

PermeabilityField random_field(const GridSpec& grid, std::uint64_t seed) {
  GrfParams p;
  p.seed = seed;
  return sample_field(grid, p);
}

}  // namespace

// ---------------------------------------------------------------- GRF

TEST(Covariance, ExponentialKernelValues) {
  GrfParams p;
  const Location a{0, 0};
  EXPECT_DOUBLE_EQ(covariance(a, a, p), 0.5);
  EXPECT_NEAR(covariance(a, {100, 0}, p), 0.5 * std::exp(-1.0), 1e-15);
  EXPECT_NEAR(covariance(a, {60, 80}, p), 0.5 * std::exp(-1.0), 1e-15);
  double prev = covariance(a, a, p);
  for (double d = 10; d <= 5000; d *= 1.5) {
    const double c = covariance(a, {d, 0}, p);
    EXPECT_LT(c, prev);
    prev = c;
  }
  EXPECT_LT(prev, 1e-15);
}

TEST(Grf, CellCentersAndPositivePermeability) {
  GridSpec g;
  const auto c = cell_center(g, 2, 5);
  EXPECT_DOUBLE_EQ(c.x, 55.0);
  EXPECT_DOUBLE_EQ(c.y, 25.0);
  auto f = random_field(g, 3);
  ASSERT_EQ(f.values.shape(), (Shape{32, 32}));
  for (std::size_t i = 0; i < f.values.size(); ++i) {
    EXPECT_GT(f.values[i], 0.0);
    EXPECT_NEAR(f.values[i], kReferencePermeability * std::exp(f.log_values[i]), 1e-25);
  }
}

TEST(Grf, ZeroVarianceGivesReferencePermeability) {
  GrfParams p;
  p.variance = 0.0;
  auto f = sample_field(GridSpec{}, p);
  for (double v : f.values.values()) EXPECT_EQ(v, 2.5e-13);
}

TEST(Grf, LongCorrelationIsNearlyConstant) {
  GrfParams p;
  p.correlation_length = 1e8;
  p.seed = 7;
  auto f = sample_field(GridSpec{}, p);
  double lo = 1e9, hi = -1e9;
  for (double v : f.log_values.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_LT(hi - lo, 0.01);
}

TEST(Grf, SameSeedSameField) {
  GridSpec g{16, 16, 10.0};
  GrfSampler s(g, GrfParams{});
  EXPECT_EQ(s.sample(5).log_values, s.sample(5).log_values);
  EXPECT_NE(s.sample(5).log_values, s.sample(6).log_values);
}

TEST(Grf, EmpiricalVarianceMatchesModel) {
  GridSpec g{16, 16, 10.0};
  GrfSampler sampler(g, GrfParams{});
  constexpr std::size_t kDraws = 10000;
  std::vector<double> sum(g.cells(), 0.0), sum2(g.cells(), 0.0);
  for (std::size_t d = 0; d < kDraws; ++d) {
    auto f = sampler.sample(1000 + d);
    for (std::size_t i = 0; i < g.cells(); ++i) {
      sum[i] += f.log_values[i];
      sum2[i] += f.log_values[i] * f.log_values[i];
    }
  }
  for (std::size_t i = 0; i < g.cells(); ++i) {
    const double m = sum[i] / kDraws;
    const double v = (sum2[i] - kDraws * m * m) / (kDraws - 1);
    EXPECT_GE(v, 0.46) << "pixel " << i;
    EXPECT_LE(v, 0.54) << "pixel " << i;
  }
}

TEST(Grf, InvalidParametersThrow) {
  GrfParams p;
  p.correlation_length = 0.0;
  EXPECT_THROW(GrfSampler(GridSpec{}, p), ConfigError);
  p = {};
  p.variance = -1.0;
  EXPECT_THROW(GrfSampler(GridSpec{}, p), ConfigError);
}

// ---------------------------------------------------------------- simulator configuration

TEST(SimConfig, ValidationRejectsBadValues) {
  auto c = desk_sim();
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.snapshot_times = {10.0, 5.0};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.snapshot_times.push_back(c.total_time * 2);
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.residual_injected = 0.5;
  bad.residual_resident = 0.5;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(PressureScaling, RescaleValues) {
  EXPECT_DOUBLE_EQ(rescale_pressure(1.2e7), 0.0);
  EXPECT_DOUBLE_EQ(rescale_pressure(2.2e7), 1.0);
  EXPECT_DOUBLE_EQ(rescale_pressure(1.7e7), 0.5);
}

TEST(Binarize, IndicatorBranches) {
  Tensor<double> s({1, 3}, std::vector<double>{0.0, 0.3, 1e-3});
  auto m = binarize(s);
  EXPECT_EQ(m[0], 0.0);
  EXPECT_EQ(m[1], 1.0);
  EXPECT_EQ(m[2], 1.0);
  Tensor<double> z({4, 4}, 0.0);
  const auto zm = binarize(z);
  for (double v : zm.values()) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------- pressure

TEST(Pressure, NoInjectionGivesBoundaryPressure) {
  auto c = desk_sim();
  c.injection_rate = 0.0;
  auto k = random_field(c.grid, 1);
  auto sol = solve_pressure(k, Tensor<double>({32, 32}, 0.3), c);
  for (double p : sol.pressure.values()) EXPECT_NEAR(p, c.right_boundary_pressure, 1e-6);
}

TEST(Pressure, HomogeneousCaseVariesOnlyAlongX) {
  auto c = desk_sim();
  auto sol = solve_pressure(homogeneous(c.grid), Tensor<double>({32, 32}, 0.0), c);
  for (std::size_t j = 0; j < 32; ++j) {
    const double ref = sol.pressure(0, j);
    for (std::size_t i = 1; i < 32; ++i) EXPECT_NEAR(sol.pressure(i, j), ref, 1e-8 * std::abs(ref));
  }
  for (std::size_t j = 1; j < 32; ++j) EXPECT_GT(sol.pressure(0, j - 1), sol.pressure(0, j));
}

TEST(Pressure, FluxesAreDivergenceFree) {
  auto c = desk_sim();
  auto k = random_field(c.grid, 2);
  Tensor<double> s({32, 32}, 0.0);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 10; ++j) s(i, j) = 0.6;
  auto sol = solve_pressure(k, s, c);
  const auto& fx = sol.fluxes.x;
  const auto& fy = sol.fluxes.y;
  for (std::size_t i = 0; i < 32; ++i) {
    EXPECT_NEAR(fx(i, 0), c.injection_rate, 1e-12 * c.injection_rate);
    for (std::size_t j = 0; j < 32; ++j) {
      const double div = fx(i, j + 1) - fx(i, j) + fy(i + 1, j) - fy(i, j);
      EXPECT_LE(std::abs(div), 1e-8 * c.injection_rate) << i << "," << j;
    }
  }
  for (std::size_t j = 0; j < 32; ++j) {
    EXPECT_EQ(fy(0, j), 0.0);
    EXPECT_EQ(fy(32, j), 0.0);
  }
}

// ---------------------------------------------------------------- transport

TEST(Transport, ZeroFluxLeavesSaturation) {
  auto c = desk_sim();
  Fluxes f{Tensor<double>({32, 33}), Tensor<double>({33, 32})};
  Tensor<double> s({32, 32}, 0.4);
  EXPECT_EQ(advance_saturation(s, f, 1e5, c), s);
}

TEST(Transport, StepConservesVolume) {
  auto c = desk_sim();
  auto k = random_field(c.grid, 4);
  Tensor<double> s({32, 32}, 0.0);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 32; ++j) s(i, j) = 0.7 * (1.0 - j / 40.0);
  auto sol = solve_pressure(k, s, c);
  const double dt = 0.5 * max_stable_time_step(sol.fluxes, c);
  auto next = advance_saturation(s, sol.fluxes, dt, c);
  const double pore = c.porosity * c.grid.cell_size * c.grid.cell_size * c.thickness;
  double before = 0, after = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    before += s[i] * pore;
    after += next[i] * pore;
  }
  const double in = 32 * c.injection_rate * dt;
  const double out = injected_outflow_rate(s, sol.fluxes, c) * dt;
  EXPECT_GT(out, 0.0);
  EXPECT_NEAR(after - before, in - out, 1e-10 * in);
}

TEST(Transport, UnstableStepThrows) {
  auto c = desk_sim();
  auto k = homogeneous(c.grid);
  Tensor<double> s({32, 32}, 0.0);
  auto sol = solve_pressure(k, s, c);
  const double dt = max_stable_time_step(sol.fluxes, c);
  EXPECT_NO_THROW(advance_saturation(s, sol.fluxes, dt, c));
  EXPECT_THROW(advance_saturation(s, sol.fluxes, 1.5 * dt, c), NumericalError);
}

// ---------------------------------------------------------------- full runs

TEST(Simulate, SnapshotsAtConfiguredTimes) {
  auto c = desk_sim();
  auto snaps = simulate(random_field(c.grid, 5), c);
  ASSERT_EQ(snaps.size(), 6u);
  double prev = -1.0;
  for (std::size_t i = 0; i < snaps.size(); ++i) {
    EXPECT_EQ(snaps[i].time, c.snapshot_times[i]);
    EXPECT_GE(snaps[i].injected_volume, prev);
    prev = snaps[i].injected_volume;
    EXPECT_EQ(snaps[i].mask, binarize(snaps[i].saturation));
    for (double v : snaps[i].saturation.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0 - c.residual_resident);
    }
  }
}

TEST(Simulate, VolumeBalanceOverRun) {
  auto c = desk_sim();
  for (std::uint64_t seed : {6u, 7u}) {
    auto snaps = simulate(random_field(c.grid, seed), c);
    for (const auto& s : snaps) {
      EXPECT_LE(std::abs(s.injected_volume - s.stored_volume - s.outflow_volume), 1e-6 * s.injected_volume);
    }
  }
}

TEST(Simulate, DeterministicForSameInput) {
  auto c = desk_sim({100, 200});
  auto k = random_field(c.grid, 8);
  auto a = simulate(k, c);
  auto b = simulate(k, c);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].pressure, b[i].pressure);
    EXPECT_EQ(a[i].saturation, b[i].saturation);
  }
}

TEST(Simulate, UninvadedRegionIsAttachedToRightBoundary) {
  auto c = desk_sim();
  auto snaps = simulate(homogeneous(c.grid), c);
  for (const auto& s : snaps) {
    for (std::size_t i = 0; i < 32; ++i) {
      ASSERT_EQ(s.saturation(i, 31), 0.0) << "breakthrough before the last snapshot";
      // zero cells form one run ending at the right boundary
      std::size_t first_zero = 32;
      for (std::size_t j = 32; j-- > 0;) {
        if (s.saturation(i, j) != 0.0) break;
        first_zero = j;
      }
      for (std::size_t j = 0; j < first_zero; ++j) EXPECT_GT(s.saturation(i, j), 0.0);
      EXPECT_GT(first_zero, 0u);
    }
  }
}

TEST(Simulate, FrontJumpsAtMaskBoundary) {
  auto c = desk_sim({150});
  auto snaps = simulate(homogeneous(c.grid), c);
  const auto& s = snaps[0];
  // the mask edge sits where saturation jumps from the shock value to zero
  for (std::size_t i = 0; i < 32; ++i) {
    std::size_t last = 0;
    for (std::size_t j = 0; j < 32; ++j)
      if (s.mask(i, j) > 0.5) last = j;
    EXPECT_EQ(s.mask(i, last + 1), 0.0);
    EXPECT_GT(s.saturation(i, last > 0 ? last - 1 : 0), 0.2);
  }
}

TEST(Simulate, BuckleyLeverettFrontPosition) {
  SimConfig c = desk_sim({400});
  c.grid = GridSpec{1, 64, 10.0};
  auto snaps = simulate(homogeneous(c.grid), c);
  const auto& s = snaps[0].saturation;

  testing_support::CoreyFluid fluid;
  fluid.exponent = c.corey_exponent;
  fluid.resident_viscosity = c.resident_viscosity;
  fluid.injected_viscosity = c.resident_viscosity / c.mobility_ratio;
  fluid.residual_injected = c.residual_injected;
  fluid.residual_resident = c.residual_resident;
  const auto front = testing_support::welge_front(fluid);
  const double u = c.injection_rate / (c.grid.cell_size * c.thickness);
  const double analytic = testing_support::front_distance(front, u, c.porosity, c.total_time) / c.grid.cell_size;
  ASSERT_GT(analytic, 10.0);
  ASSERT_LT(analytic, 54.0);

  // numerical front: where the profile crosses half the shock saturation
  const double half = 0.5 * front.saturation;
  double numeric = -1.0;
  for (std::size_t j = 1; j < 64; ++j) {
    if (s(0, j - 1) >= half && s(0, j) < half) {
      const double t = (s(0, j - 1) - half) / (s(0, j - 1) - s(0, j));
      numeric = (j - 0.5) + t;
      break;
    }
  }
  ASSERT_GE(numeric, 0.0);
  EXPECT_LE(std::abs(numeric - analytic), 2.0) << "numeric " << numeric << " analytic " << analytic;
}
