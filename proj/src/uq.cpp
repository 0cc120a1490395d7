#include "flowsurrogate/uq.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "flowsurrogate/error.hpp"
#include "flowsurrogate/parallel.hpp"

namespace flowsurrogate {

namespace {

constexpr std::size_t kMinPdfSamples = 30;
constexpr std::size_t kChunk = 64;

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::size_t probe_offset(const Shape& shape, const Probe& p) {
  if (p.time_index >= shape[0] || p.field >= shape[1] || p.row >= shape[2] || p.col >= shape[3]) {
    throw ShapeError("probe outside the output fields");
  }
  return ((p.time_index * shape[1] + p.field) * shape[2] + p.row) * shape[3] + p.col;
}

}  // namespace

// ---------------------------------------------------------------- moments

void MomentAccumulator::add(const Tensor<double>& sample) {
  if (count_ == 0) {
    mean_ = Tensor<double>(sample.shape());
    m2_ = Tensor<double>(sample.shape());
  } else {
    require_same_shape(sample.shape(), mean_.shape(), "moment sample");
  }
  ++count_;
  const double n = static_cast<double>(count_);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double delta = sample[i] - mean_[i];
    mean_[i] += delta / n;
    m2_[i] += delta * (sample[i] - mean_[i]);
  }
}

void MomentAccumulator::merge(const MomentAccumulator& other) {
  if (other.count_ == 0) return;
  if (count_ == 0) {
    *this = other;
    return;
  }
  require_same_shape(other.mean_.shape(), mean_.shape(), "moment merge");
  const double na = static_cast<double>(count_), nb = static_cast<double>(other.count_), n = na + nb;
  for (std::size_t i = 0; i < mean_.size(); ++i) {
    const double delta = other.mean_[i] - mean_[i];
    mean_[i] += delta * nb / n;
    m2_[i] += other.m2_[i] + delta * delta * na * nb / n;
  }
  count_ += other.count_;
}

Tensor<double> MomentAccumulator::variance() const {
  if (count_ < 2) throw NumericalError("variance needs at least two samples");
  Tensor<double> v(m2_.shape());
  const double d = static_cast<double>(count_ - 1);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(0.0, m2_[i] / d);
  return v;
}

MonteCarloResult run_monte_carlo(const Evaluator& evaluator, std::span<const PermeabilityField> inputs,
                                 std::span<const Probe> probes, std::size_t threads) {
  MonteCarloResult result;
  result.probe_samples.resize(probes.size());
  MomentAccumulator acc;
  std::vector<std::optional<Tensor<double>>> slots;
  std::vector<std::string> errors;
  for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
    const std::size_t m = std::min(kChunk, inputs.size() - start);
    slots.assign(m, std::nullopt);
    errors.assign(m, {});
    parallel_for(m, threads, [&](std::size_t k) {
      try {
        slots[k] = evaluator(inputs[start + k]);
        for (double v : slots[k]->values()) {
          if (!std::isfinite(v)) throw NumericalError("non-finite output");
        }
      } catch (const std::exception& e) {
        slots[k].reset();
        errors[k] = e.what();
      }
    });
    for (std::size_t k = 0; k < m; ++k) {
      if (!slots[k]) {
        result.failures.push_back(std::to_string(start + k) + ": " + errors[k]);
        continue;
      }
      if (slots[k]->rank() != 4) throw ShapeError("evaluator must return [n_t, F, H, W]");
      acc.add(*slots[k]);
      result.used.push_back(start + k);
      for (std::size_t p = 0; p < probes.size(); ++p) {
        result.probe_samples[p].push_back((*slots[k])[probe_offset(slots[k]->shape(), probes[p])]);
      }
    }
  }
  result.moments.count = acc.count();
  if (acc.count() >= 2) {
    result.moments.mean = acc.mean();
    result.moments.variance = acc.variance();
  }
  return result;
}

MomentFields mc_moments(const Evaluator& evaluator, std::span<const PermeabilityField> inputs, std::size_t threads) {
  auto result = run_monte_carlo(evaluator, inputs, {}, threads);
  if (result.moments.count < 2) {
    throw NumericalError("Monte Carlo moments need at least two successful realizations, got " +
                         std::to_string(result.moments.count));
  }
  return std::move(result.moments);
}

// ---------------------------------------------------------------- densities

double PdfEstimate::mean() const {
  double m = 0.0;
  for (std::size_t i = 0; i < density.size(); ++i) m += 0.5 * (edges[i] + edges[i + 1]) * density[i] * bin_width(i);
  return m;
}

std::size_t freedman_diaconis_bins(std::span<const double> samples) {
  if (samples.size() < 2) return kMinHistogramBins;
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double range = sorted.back() - sorted.front();
  const double width = 2.0 * (quantile(sorted, 0.75) - quantile(sorted, 0.25)) /
                       std::cbrt(static_cast<double>(sorted.size()));
  if (!(range > 0.0) || !(width > 0.0)) return kMinHistogramBins;
  const double bins = std::ceil(range / width);
  return static_cast<std::size_t>(std::clamp(bins, static_cast<double>(kMinHistogramBins),
                                             static_cast<double>(kMaxHistogramBins)));
}

PdfEstimate histogram_pdf(std::span<const double> samples, const std::optional<std::vector<double>>& edges) {
  if (samples.empty()) throw DataError("histogram of an empty sample");
  PdfEstimate pdf;
  pdf.count = samples.size();
  const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *lo_it, hi = *hi_it;
  if (edges) {
    pdf.edges = *edges;
    if (pdf.edges.size() < 2 || !std::is_sorted(pdf.edges.begin(), pdf.edges.end())) {
      throw DataError("histogram edges must be increasing");
    }
  } else if (lo == hi) {
    pdf.spike = true;
    pdf.edges = {lo - 0.5, lo + 0.5};
  } else {
    const std::size_t bins = freedman_diaconis_bins(samples);
    pdf.edges.resize(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i) pdf.edges[i] = lo + (hi - lo) * static_cast<double>(i) / bins;
    pdf.edges.back() = hi;
  }
  const std::size_t bins = pdf.edges.size() - 1;
  std::vector<std::size_t> counts(bins, 0);
  std::size_t inside = 0;
  for (double v : samples) {
    if (v < pdf.edges.front() || v > pdf.edges.back()) continue;
    auto it = std::upper_bound(pdf.edges.begin(), pdf.edges.end(), v);
    std::size_t b = static_cast<std::size_t>(it - pdf.edges.begin());
    b = b == 0 ? 0 : std::min(b - 1, bins - 1);
    ++counts[b];
    ++inside;
  }
  pdf.density.assign(bins, 0.0);
  if (inside > 0) {
    for (std::size_t i = 0; i < bins; ++i) {
      pdf.density[i] = static_cast<double>(counts[i]) / (static_cast<double>(inside) * pdf.bin_width(i));
    }
  }
  pdf.spike = pdf.spike || lo == hi;
  pdf.bimodal = has_separated_modes(pdf);
  return pdf;
}

bool has_separated_modes(const PdfEstimate& pdf, double min_mass) {
  std::size_t heavy = 0;
  double run_mass = 0.0;
  bool in_run = false;
  for (std::size_t i = 0; i <= pdf.density.size(); ++i) {
    const double mass = i < pdf.density.size() ? pdf.density[i] * pdf.bin_width(i) : 0.0;
    if (mass > 0.0) {
      run_mass += mass;
      in_run = true;
    } else if (in_run) {
      heavy += run_mass >= min_mass;
      run_mass = 0.0;
      in_run = false;
    }
  }
  return heavy >= 2;
}

PdfEstimate pdf_from_samples(std::span<const double> samples, const Probe& probe) {
  if (samples.size() < kMinPdfSamples) {
    throw DataError("a pointwise PDF needs at least " + std::to_string(kMinPdfSamples) + " samples, got " +
                    std::to_string(samples.size()));
  }
  PdfEstimate pdf = histogram_pdf(samples);
  pdf.probe = probe;
  return pdf;
}

PdfEstimate mc_pdf(const Evaluator& evaluator, std::span<const PermeabilityField> inputs, const Probe& probe,
                   std::size_t threads) {
  const Probe probes[] = {probe};
  const auto result = run_monte_carlo(evaluator, inputs, probes, threads);
  return pdf_from_samples(result.probe_samples[0], probe);
}

// ---------------------------------------------------------------- comparison

double relative_l2(std::span<const double> estimate, std::span<const double> reference) {
  if (estimate.size() != reference.size()) throw ShapeError("relative_l2: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    num += (estimate[i] - reference[i]) * (estimate[i] - reference[i]);
    den += reference[i] * reference[i];
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return std::sqrt(num / den);
}

UqComparison compare_uq(const MonteCarloResult& surrogate, const MonteCarloResult& oracle,
                        std::span<const Probe> probes) {
  if (surrogate.used != oracle.used) throw DataError("compare_uq: realization sets differ");
  if (surrogate.moments.count < 2) throw DataError("compare_uq: fewer than two realizations");
  require_same_shape(surrogate.moments.mean.shape(), oracle.moments.mean.shape(), "compare_uq moments");
  const Shape& shape = oracle.moments.mean.shape();
  const std::size_t plane = shape[2] * shape[3];
  UqComparison report;
  for (std::size_t t = 0; t < shape[0]; ++t) {
    for (std::size_t f = 0; f < shape[1]; ++f) {
      const std::size_t off = (t * shape[1] + f) * plane;
      auto part = [&](const Tensor<double>& x) { return x.values().subspan(off, plane); };
      report.fields.push_back({f, t, relative_l2(part(surrogate.moments.mean), part(oracle.moments.mean)),
                               relative_l2(part(surrogate.moments.variance), part(oracle.moments.variance))});
    }
  }
  if (surrogate.probe_samples.size() < probes.size() || oracle.probe_samples.size() < probes.size()) {
    throw DataError("compare_uq: probe samples missing");
  }
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const auto& s = surrogate.probe_samples[p];
    const auto& o = oracle.probe_samples[p];
    std::vector<double> both(s.begin(), s.end());
    both.insert(both.end(), o.begin(), o.end());
    const auto [lo_it, hi_it] = std::minmax_element(both.begin(), both.end());
    PdfComparison c;
    c.probe = probes[p];
    c.surrogate_bimodal = pdf_from_samples(s, probes[p]).bimodal;
    c.oracle_bimodal = pdf_from_samples(o, probes[p]).bimodal;
    if (*lo_it < *hi_it) {
      const std::size_t bins = freedman_diaconis_bins(both);
      std::vector<double> edges(bins + 1);
      for (std::size_t i = 0; i <= bins; ++i) edges[i] = *lo_it + (*hi_it - *lo_it) * static_cast<double>(i) / bins;
      edges.back() = *hi_it;
      const auto ps = histogram_pdf(s, edges), po = histogram_pdf(o, edges);
      for (std::size_t i = 0; i < bins; ++i) c.l1_distance += std::abs(ps.density[i] - po.density[i]) * ps.bin_width(i);
    }
    report.pdfs.push_back(c);
  }
  return report;
}

void UqComparison::write_csv(std::ostream& fields_out, std::ostream& pdfs_out) const {
  char buf[256];
  fields_out << "field,time_index,mean_rel_l2,variance_rel_l2\n";
  for (const auto& f : fields) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.10g,%.10g\n", f.field, f.time_index, f.mean_error, f.variance_error);
    fields_out << buf;
  }
  pdfs_out << "field,time_index,row,col,l1_distance,surrogate_bimodal,oracle_bimodal\n";
  for (const auto& p : pdfs) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,%.10g,%d,%d\n", p.probe.field, p.probe.time_index, p.probe.row,
                  p.probe.col, p.l1_distance, p.surrogate_bimodal ? 1 : 0, p.oracle_bimodal ? 1 : 0);
    pdfs_out << buf;
  }
}

}  // namespace flowsurrogate
