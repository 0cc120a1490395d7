#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "flowsurrogate/error.hpp"
#include "flowsurrogate/uq.hpp"
#include "support.hpp"

using namespace flowsurrogate;
using testing_support::random_tensor;

namespace {

std::vector<PermeabilityField> fields(std::size_t n, std::uint64_t seed) {
  GrfSampler sampler(GridSpec{6, 6, 10.0}, GrfParams{});
  std::vector<PermeabilityField> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(sampler.sample(seed + i));
  return out;
}

// [2 times, 1 field, 6, 6]: a cheap deterministic function of the input.
Tensor<double> toy_evaluator(const PermeabilityField& k) {
  Tensor<double> out({2, 1, 6, 6});
  for (std::size_t i = 0; i < 36; ++i) {
    out[i] = std::tanh(k.log_values[i]);
    out[36 + i] = k.log_values[i] * k.log_values[(i + 1) % 36];
  }
  return out;
}

}  // namespace

TEST(Moments, StreamingMatchesTwoPass) {
  std::vector<Tensor<double>> samples;
  for (std::uint64_t s = 0; s < 100; ++s) samples.push_back(random_tensor<double>({2, 3, 4}, s, -5.0, 7.0));
  MomentAccumulator acc;
  for (const auto& s : samples) acc.add(s);
  const auto var = acc.variance();
  for (std::size_t i = 0; i < 24; ++i) {
    double mean = 0.0;
    for (const auto& s : samples) mean += s[i];
    mean /= 100.0;
    double ss = 0.0;
    for (const auto& s : samples) ss += (s[i] - mean) * (s[i] - mean);
    EXPECT_NEAR(acc.mean()[i], mean, 1e-10);
    EXPECT_NEAR(var[i], ss / 99.0, 1e-10);
  }
}

TEST(Moments, MergeMatchesSinglePass) {
  MomentAccumulator all, a, b;
  for (std::uint64_t s = 0; s < 37; ++s) {
    const auto t = random_tensor<double>({5}, s);
    all.add(t);
    (s < 11 ? a : b).add(t);
  }
  a.merge(b);
  EXPECT_EQ(a.count(), 37u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(a.mean()[i], all.mean()[i], 1e-14);
    EXPECT_NEAR(a.variance()[i], all.variance()[i], 1e-13);
  }
}

TEST(Moments, TwoSamplesAndRepeats) {
  Tensor<double> a({3}, std::vector<double>{1.0, -2.0, 4.0});
  Tensor<double> b({3}, std::vector<double>{3.0, 2.0, 4.0});
  MomentAccumulator acc;
  acc.add(a);
  acc.add(b);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(acc.mean()[i], 0.5 * (a[i] + b[i]));
    EXPECT_DOUBLE_EQ(acc.variance()[i], 0.5 * (a[i] - b[i]) * (a[i] - b[i]));
  }
  MomentAccumulator same;
  for (int i = 0; i < 10; ++i) same.add(a);
  const auto flat = same.variance();
  for (double v : flat.values()) EXPECT_EQ(v, 0.0);
  MomentAccumulator one;
  one.add(a);
  EXPECT_THROW(one.variance(), NumericalError);
}

TEST(MonteCarlo, ThreadCountDoesNotChangeResult) {
  const auto inputs = fields(40, 10);
  const std::vector<Probe> probes = {{0, 1, 2, 3}};
  const auto one = run_monte_carlo(toy_evaluator, inputs, probes, 1);
  const auto four = run_monte_carlo(toy_evaluator, inputs, probes, 4);
  EXPECT_EQ(one.moments.mean, four.moments.mean);
  EXPECT_EQ(one.moments.variance, four.moments.variance);
  EXPECT_EQ(one.probe_samples, four.probe_samples);
  EXPECT_EQ(one.moments.count, 40u);
  ASSERT_EQ(one.probe_samples[0].size(), 40u);
  EXPECT_EQ(one.probe_samples[0][5], toy_evaluator(inputs[5])(1, 0, 2, 3));
  for (double v : one.moments.variance.values()) EXPECT_GE(v, 0.0);
}

TEST(MonteCarlo, FailuresAreRecordedAndExcluded) {
  const auto inputs = fields(10, 20);
  std::size_t calls = 0;
  Evaluator flaky = [&](const PermeabilityField& k) {
    if (++calls % 4 == 0) throw NumericalError("solver diverged");
    return toy_evaluator(k);
  };
  const auto r = run_monte_carlo(flaky, inputs);
  EXPECT_EQ(r.used.size() + r.failures.size(), 10u);
  EXPECT_EQ(r.failures.size(), 2u);
  EXPECT_NE(r.failures[0].find("solver diverged"), std::string::npos);
  EXPECT_EQ(r.moments.count, r.used.size());
  Evaluator broken = [](const PermeabilityField&) -> Tensor<double> { throw NumericalError("no"); };
  EXPECT_THROW(mc_moments(broken, inputs), NumericalError);
}

TEST(MonteCarlo, StandardErrorShrinksWithSampleCount) {
  // the spread of independent mean estimates falls by about sqrt(2) when N doubles
  auto spread_of_means = [](std::size_t n) {
    std::vector<double> means;
    for (std::uint64_t rep = 0; rep < 40; ++rep) {
      const auto m = mc_moments(toy_evaluator, fields(n, 1000 * rep + n));
      means.push_back(m.mean[7]);
    }
    double mu = 0.0;
    for (double v : means) mu += v;
    mu /= means.size();
    double ss = 0.0;
    for (double v : means) ss += (v - mu) * (v - mu);
    return std::sqrt(ss / (means.size() - 1));
  };
  const double ratio = spread_of_means(32) / spread_of_means(64);
  EXPECT_GT(ratio, 1.0);
  EXPECT_LT(ratio, 2.0);
}

TEST(Pdf, NormalSamplesRecoverMean) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(2.0, 0.5);
  std::vector<double> s(4000);
  for (auto& v : s) v = normal(rng);
  const auto pdf = pdf_from_samples(s, Probe{});
  double integral = 0.0;
  for (std::size_t i = 0; i < pdf.density.size(); ++i) {
    EXPECT_GE(pdf.density[i], 0.0);
    integral += pdf.density[i] * pdf.bin_width(i);
  }
  EXPECT_NEAR(integral, 1.0, 1e-6);
  EXPECT_GE(pdf.density.size(), kMinHistogramBins);
  EXPECT_LT(std::abs(pdf.mean() - 2.0), 3.0 * 0.5 / std::sqrt(4000.0));
  EXPECT_FALSE(pdf.bimodal);
  EXPECT_FALSE(pdf.spike);
}

TEST(Pdf, IdenticalSamplesAreASpike) {
  std::vector<double> s(50, 0.3);
  const auto pdf = pdf_from_samples(s, Probe{});
  EXPECT_TRUE(pdf.spike);
  EXPECT_FALSE(pdf.bimodal);
  double integral = 0.0;
  for (std::size_t i = 0; i < pdf.density.size(); ++i) integral += pdf.density[i] * pdf.bin_width(i);
  EXPECT_NEAR(integral, 1.0, 1e-6);
}

TEST(Pdf, SeparatedClustersAreBimodal) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 0.05);
  std::vector<double> s;
  for (int i = 0; i < 300; ++i) s.push_back(u(rng));
  for (int i = 0; i < 200; ++i) s.push_back(0.6 + u(rng));
  EXPECT_TRUE(pdf_from_samples(s, Probe{}).bimodal);
  // a small outlier group does not count as a mode
  std::vector<double> t(s.begin(), s.begin() + 300);
  t.push_back(0.9);
  EXPECT_FALSE(pdf_from_samples(t, Probe{}).bimodal);
}

TEST(Pdf, NeedsEnoughSamples) {
  std::vector<double> s(10, 1.0);
  EXPECT_THROW(pdf_from_samples(s, Probe{}), DataError);
}

TEST(Pdf, FreedmanDiaconisFloor) {
  std::vector<double> s = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  EXPECT_EQ(freedman_diaconis_bins(s), kMinHistogramBins);
}

TEST(Compare, OracleAgainstItselfIsExact) {
  const auto inputs = fields(60, 30);
  const std::vector<Probe> probes = {{0, 0, 1, 1}, {0, 1, 4, 4}};
  const auto a = run_monte_carlo(toy_evaluator, inputs, probes);
  const auto b = run_monte_carlo(toy_evaluator, inputs, probes);
  const auto c = compare_uq(a, b, probes);
  ASSERT_EQ(c.fields.size(), 2u);
  for (const auto& f : c.fields) {
    EXPECT_EQ(f.mean_error, 0.0);
    EXPECT_EQ(f.variance_error, 0.0);
  }
  for (const auto& p : c.pdfs) EXPECT_EQ(p.l1_distance, 0.0);
  std::ostringstream fo, po;
  c.write_csv(fo, po);
  EXPECT_NE(fo.str().find("mean_rel_l2"), std::string::npos);
}

TEST(Compare, MismatchedRealizationSetsThrow) {
  const auto a = run_monte_carlo(toy_evaluator, fields(20, 40));
  const auto b = run_monte_carlo(toy_evaluator, fields(21, 40));
  EXPECT_THROW(compare_uq(a, b), DataError);
}

TEST(RelativeL2, Values) {
  std::vector<double> ref = {3.0, 4.0}, est = {3.0, 4.5};
  EXPECT_DOUBLE_EQ(relative_l2(est, ref), 0.1);
  std::vector<double> zero = {0.0, 0.0};
  EXPECT_EQ(relative_l2(zero, zero), 0.0);
  EXPECT_TRUE(std::isinf(relative_l2(ref, zero)));
}
