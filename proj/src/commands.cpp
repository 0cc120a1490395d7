#include "flowsurrogate/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "flowsurrogate/error.hpp"
#include "flowsurrogate/losses.hpp"

namespace flowsurrogate {

using nlohmann::json;

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

void write_moments(const std::filesystem::path& path, const Tensor<double>& t) {
  std::vector<float> v(t.values().begin(), t.values().end());
  write_f32(path, v);
}

}  // namespace

Tensor<float> predicted_front_mask(const Tensor<float>& outputs) {
  const auto parts = split_channels(outputs, {1, 1, 1});
  Tensor<float> mask(parts[1].shape());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = parts[1][i] > kFrontThreshold ? 1.0f : 0.0f;
  return mask;
}

// ---------------------------------------------------------------- evaluation

std::optional<double> EvalReport::interpolation_gap() const {
  double sum = 0.0;
  std::size_t n = 0;
  std::optional<double> withheld;
  for (const auto& t : per_time) {
    if (!t.metrics.r2) continue;
    if (t.trained) {
      sum += *t.metrics.r2;
      ++n;
    } else if (!withheld) {
      withheld = *t.metrics.r2;
    }
  }
  if (n == 0 || !withheld) return std::nullopt;
  return sum / static_cast<double>(n) - *withheld;
}

void EvalReport::write_csv(std::ostream& out) const {
  char buf[256];
  out << "days,trained,r2,rmse,mean_iou,median_iou\n";
  for (const auto& t : per_time) {
    std::snprintf(buf, sizeof buf, "%g,%d,%.10g,%.10g,%.10g,%.10g\n", t.days, t.trained ? 1 : 0,
                  t.metrics.r2.value_or(std::nan("")), t.metrics.rmse, t.mean_iou, t.median_iou);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "all,-,%.10g,%.10g,-,%.10g\n", overall.r2.value_or(std::nan("")), overall.rmse,
                median_iou);
  out << buf;
}

EvalReport evaluate_dataset(DenseEncoderDecoder<float>& net, const Dataset& dataset,
                            const std::vector<double>& train_times_days) {
  const auto& m = dataset.manifest;
  const auto& data = dataset.data;
  if (net.config().height != m.grid.height || net.config().width != m.grid.width) {
    throw DataError("checkpoint geometry " + std::to_string(net.config().height) + "x" +
                    std::to_string(net.config().width) + " does not match dataset " + std::to_string(m.grid.height) +
                    "x" + std::to_string(m.grid.width));
  }
  const Tensor<float> pred = predict_all(net, data);
  const std::size_t nt = data.time_count(), hw = m.grid.height * m.grid.width;
  const std::size_t rec_len = kOutputChannels * hw;

  EvalReport report;
  report.split = m.split;
  std::vector<MetricAccumulator> per_time(nt);
  std::vector<std::vector<double>> ious(nt);
  MetricAccumulator overall;
  std::vector<double> p(2 * hw), y(2 * hw), all_ious;
  Tensor<float> pm({1, 1, m.grid.height, m.grid.width}), tm({1, 1, m.grid.height, m.grid.width});
  for (std::size_t r = 0; r < data.records(); ++r) {
    const float* pr = pred.data() + r * rec_len;
    const float* tr = data.outputs.data() + r * rec_len;
    for (std::size_t i = 0; i < 2 * hw; ++i) {
      p[i] = pr[i];
      y[i] = tr[i];
    }
    per_time[r % nt].add_sample(p.data(), y.data(), 2 * hw);
    overall.add_sample(p.data(), y.data(), 2 * hw);
    for (std::size_t i = 0; i < hw; ++i) {
      pm[i] = pr[kSaturationChannel * hw + i] > kFrontThreshold ? 1.0f : 0.0f;
      tm[i] = tr[kMaskChannel * hw + i];
    }
    const double iou = mask_iou(pm, tm);
    ious[r % nt].push_back(iou);
    all_ious.push_back(iou);
  }
  report.overall = overall.result();
  report.median_iou = median(all_ious);
  for (std::size_t j = 0; j < nt; ++j) {
    TimeMetrics t;
    t.days = m.times_days[j];
    t.trained = std::find(train_times_days.begin(), train_times_days.end(), t.days) != train_times_days.end();
    t.metrics = per_time[j].result();
    double sum = 0.0;
    for (double v : ious[j]) sum += v;
    t.mean_iou = ious[j].empty() ? 0.0 : sum / static_cast<double>(ious[j].size());
    t.median_iou = median(ious[j]);
    report.per_time.push_back(t);
  }
  return report;
}

// ---------------------------------------------------------------- uq

Evaluator simulator_evaluator(const RunConfig& config, const std::vector<double>& days) {
  const SimConfig sim = config.simulator_for(days);
  return [sim](const PermeabilityField& field) {
    const auto snaps = simulate(field, sim);
    const std::size_t h = sim.grid.height, w = sim.grid.width, hw = h * w;
    Tensor<double> out({snaps.size(), 2, h, w});
    for (std::size_t t = 0; t < snaps.size(); ++t) {
      std::copy_n(snaps[t].rescaled_pressure.data(), hw, out.data() + (2 * t) * hw);
      std::copy_n(snaps[t].saturation.data(), hw, out.data() + (2 * t + 1) * hw);
    }
    return out;
  };
}

Evaluator surrogate_evaluator(DenseEncoderDecoder<float>& net, const std::vector<double>& days,
                              double time_scale_days) {
  std::vector<float> times;
  for (double d : days) times.push_back(network_time(d, time_scale_days));
  return [&net, times](const PermeabilityField& field) {
    const std::size_t h = field.log_values.dim(0), w = field.log_values.dim(1), hw = h * w, nt = times.size();
    Tensor<float> x({nt, 1, h, w});
    for (std::size_t t = 0; t < nt; ++t) {
      for (std::size_t i = 0; i < hw; ++i) x[t * hw + i] = static_cast<float>(field.log_values[i]);
    }
    const Tensor<float> y = net.forward(x, times, Mode::eval);
    Tensor<double> out({nt, 2, h, w});
    for (std::size_t t = 0; t < nt; ++t) {
      for (std::size_t i = 0; i < 2 * hw; ++i) out[t * 2 * hw + i] = y[t * kOutputChannels * hw + i];
    }
    return out;
  };
}

std::vector<PermeabilityField> uq_realizations(const RunConfig& config) {
  const GrfSampler sampler(config.grid, config.grf);
  std::vector<PermeabilityField> fields;
  fields.reserve(config.uq.realizations);
  for (std::size_t i = 0; i < config.uq.realizations; ++i) fields.push_back(sampler.sample(derive_seed(config.seed, "uq", i)));
  return fields;
}

std::vector<Probe> uq_probes(const RunConfig& config) {
  std::vector<Probe> probes;
  for (std::size_t t = 0; t < config.uq.times_days.size(); ++t) {
    for (std::size_t f = 0; f < 2; ++f) {
      for (const auto& p : config.uq.probes) probes.push_back({f, t, p.row, p.col});
    }
  }
  return probes;
}

UqReport run_uq(DenseEncoderDecoder<float>& net, const RunConfig& config) {
  UqReport report;
  report.times_days = config.uq.times_days;
  report.probes = uq_probes(config);
  const auto fields = uq_realizations(config);
  report.oracle = run_monte_carlo(simulator_evaluator(config, report.times_days), fields, report.probes, config.threads);
  report.surrogate = run_monte_carlo(surrogate_evaluator(net, report.times_days, config.data.time_scale_days), fields,
                                     report.probes, 1);
  report.comparison = compare_uq(report.surrogate, report.oracle, report.probes);
  return report;
}

std::string write_uq_bundle(const UqReport& report, const RunConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> files;
  auto add = [&](const std::string& name) { files.push_back(name); };

  write_moments(dir / "surrogate_mean.f32", report.surrogate.moments.mean);
  write_moments(dir / "surrogate_variance.f32", report.surrogate.moments.variance);
  write_moments(dir / "oracle_mean.f32", report.oracle.moments.mean);
  write_moments(dir / "oracle_variance.f32", report.oracle.moments.variance);
  for (const char* n : {"surrogate_mean.f32", "surrogate_variance.f32", "oracle_mean.f32", "oracle_variance.f32"}) add(n);

  {
    std::ofstream fields_out(dir / "comparison_fields.csv"), pdfs_out(dir / "comparison_pdfs.csv");
    report.comparison.write_csv(fields_out, pdfs_out);
  }
  add("comparison_fields.csv");
  add("comparison_pdfs.csv");

  {
    std::ofstream out(dir / "pdfs.csv");
    out << "source,field,time_index,row,col,left,right,density,spike,bimodal\n";
    char buf[256];
    for (std::size_t p = 0; p < report.probes.size(); ++p) {
      for (const auto* mc : {&report.surrogate, &report.oracle}) {
        const PdfEstimate pdf = pdf_from_samples(mc->probe_samples[p], report.probes[p]);
        const char* source = mc == &report.surrogate ? "surrogate" : "oracle";
        for (std::size_t b = 0; b < pdf.density.size(); ++b) {
          std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%zu,%.10g,%.10g,%.10g,%d,%d\n", source, pdf.probe.field,
                        pdf.probe.time_index, pdf.probe.row, pdf.probe.col, pdf.edges[b], pdf.edges[b + 1],
                        pdf.density[b], pdf.spike ? 1 : 0, pdf.bimodal ? 1 : 0);
          out << buf;
        }
      }
    }
  }
  add("pdfs.csv");
  RunConfig recorded = config;
  recorded.out.clear();  // keeps bundle checksums independent of the location
  write_text(dir / "config.json", recorded.to_json());
  add("config.json");

  json manifest;
  manifest["format"] = "flowsurrogate-uq";
  manifest["times_days"] = report.times_days;
  manifest["fields"] = {"pressure_rescaled", "saturation"};
  manifest["moment_layout"] = "[time, field, H, W] float32 little-endian";
  manifest["grid"] = {config.grid.height, config.grid.width};
  manifest["realizations"] = report.oracle.used.size();
  manifest["surrogate_failures"] = report.surrogate.failures;
  manifest["oracle_failures"] = report.oracle.failures;
  json entries = json::array();
  for (const auto& f : files) entries.push_back({{"file", f}, {"crc32", hex32(file_crc32(dir / f))}});
  manifest["files"] = entries;
  const std::string text = manifest.dump(2) + "\n";
  write_text(dir / "manifest.json", text);
  return text;
}

// ---------------------------------------------------------------- commands

std::filesystem::path data_dir(const RunConfig& config, const std::string& split) {
  return config.out / "data" / split;
}

std::filesystem::path model_dir(const RunConfig& config, TrainMode mode) {
  return config.out / "models" / to_string(mode);
}

void cmd_generate(const RunConfig& config, std::ostream& log) {
  std::filesystem::create_directories(config.out / "data");
  write_text(config.out / "data" / "config.json", config.to_json());
  for (const std::string split : {"train", "test"}) {
    const std::size_t n = split == "train" ? config.data.train_samples : config.data.test_samples;
    if (n == 0) continue;
    const auto m = generate_dataset(config, split, data_dir(config, split));
    log << split << ": " << m.samples << " samples x " << m.times_days.size() << " times = " << m.records()
        << " records in " << data_dir(config, split).string() << '\n';
    for (const auto& f : m.failures) log << "  failed " << f << '\n';
  }
}

DenseEncoderDecoder<float> load_network(const std::filesystem::path& checkpoint) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  const auto arch = ckpt.meta_value("architecture");
  if (!arch) throw DataError(checkpoint.string() + " carries no architecture");
  DenseEncoderDecoder<float> net(NetworkConfig::parse(*arch), 0);
  net.load_checkpoint(ckpt);
  return net;
}

TrainRecord cmd_train(const RunConfig& config, const TrainCommandOptions& options, std::ostream& log) {
  const Dataset train = load_dataset(data_dir(config, "train"));
  if (train.manifest.split != "train") throw DataError("training data must come from a train split");
  std::optional<Dataset> test;
  if (std::filesystem::exists(data_dir(config, "test") / "manifest.json")) test = load_dataset(data_dir(config, "test"));
  if (train.manifest.grid.height != config.grid.height || train.manifest.grid.width != config.grid.width) {
    throw DataError("dataset grid does not match the configured grid");
  }

  TrainConfig tc = config.training;
  tc.mode = options.mode;
  tc.seed = derive_seed(config.seed, "shuffle");
  DenseEncoderDecoder<float> net(config.network, derive_seed(config.seed, "network"));
  Trainer trainer(net, tc);
  if (options.resume) {
    trainer.restore(read_checkpoint(*options.resume));
    log << "resumed after epoch " << trainer.epochs_done() << '\n';
  }
  const auto dir = model_dir(config, options.mode);
  std::filesystem::create_directories(dir);
  write_text(dir / "config.json", config.to_json());
  log << "training " << to_string(options.mode) << ": " << train.data.records() << " records, "
      << net.state().parameter_count() << " parameters\n";

  trainer.run(train.data, test ? &test->data : nullptr, [&](const Trainer& t) {
    const auto& r = t.record().epochs.back();
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %3zu  train_rmse %.5f  test_rmse %.5f  mse %.5f  wbce %.5f  lr %.1e\n",
                  r.epoch, r.train_rmse, r.test_rmse, r.mse_loss, r.weighted_bce_loss, r.learning_rate);
    log << buf << std::flush;
    if (options.checkpoint_every > 0 && r.epoch % options.checkpoint_every == 0) {
      std::snprintf(buf, sizeof buf, "epoch-%04zu.ckpt", r.epoch);
      write_checkpoint(dir / buf, t.to_checkpoint());
    }
  });
  write_checkpoint(dir / "model.ckpt", trainer.to_checkpoint());
  std::ofstream record_out(dir / "record.csv", std::ios::trunc);
  trainer.record().write_csv(record_out);
  log << "optimizer steps: " << trainer.optimizer_steps() << "\nwrote " << (dir / "model.ckpt").string() << '\n';
  return trainer.record();
}

EvalReport cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& dataset_dir, std::size_t dump_records, std::ostream& log) {
  auto net = load_network(checkpoint);
  const Dataset ds = load_dataset(dataset_dir);
  if (ds.manifest.split == "train") log << "warning: evaluating on the training split\n";
  const EvalReport report = evaluate_dataset(net, ds, config.data.train_times_days);
  const auto out_dir = checkpoint.parent_path() / ("eval-" + ds.manifest.split);
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream out(out_dir / "metrics.csv", std::ios::trunc);
    report.write_csv(out);
  }
  if (dump_records > 0) {
    const Tensor<float> pred = predict_all(net, ds.data);
    const std::size_t len = kOutputChannels * ds.manifest.grid.height * ds.manifest.grid.width;
    for (std::size_t r = 0; r < std::min(dump_records, ds.data.records()); ++r) {
      char name[48];
      std::snprintf(name, sizeof name, "prediction-%05zu.f32", r);
      write_f32(out_dir / name, std::span<const float>(pred.data() + r * len, len));
    }
  }
  char buf[160];
  log << "days   trained  R2        RMSE      IoU(median)\n";
  for (const auto& t : report.per_time) {
    std::snprintf(buf, sizeof buf, "%6g %-8s %-9.5f %-9.5f %.4f\n", t.days, t.trained ? "yes" : "no",
                  t.metrics.r2.value_or(std::nan("")), t.metrics.rmse, t.median_iou);
    log << buf;
  }
  std::snprintf(buf, sizeof buf, "all             %-9.5f %-9.5f %.4f\n", report.overall.r2.value_or(std::nan("")),
                report.overall.rmse, report.median_iou);
  log << buf << "wrote " << (out_dir / "metrics.csv").string() << '\n';
  return report;
}

UqReport cmd_uq(const RunConfig& config, const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir,
                std::ostream& log) {
  auto net = load_network(checkpoint);
  if (net.config().height != config.grid.height || net.config().width != config.grid.width) {
    throw DataError("checkpoint geometry does not match the configured grid");
  }
  log << "Monte Carlo over " << config.uq.realizations << " realizations\n";
  UqReport report = run_uq(net, config);
  write_uq_bundle(report, config, out_dir);
  char buf[160];
  log << "days    field  mean_rel_l2  var_rel_l2\n";
  for (const auto& f : report.comparison.fields) {
    std::snprintf(buf, sizeof buf, "%6g  %-5s  %-11.5f  %.5f\n", report.times_days[f.time_index],
                  f.field == 0 ? "P'" : "Sg", f.mean_error, f.variance_error);
    log << buf;
  }
  std::size_t bimodal = 0;
  for (const auto& p : report.comparison.pdfs) bimodal += p.probe.field == 1 && p.surrogate_bimodal;
  log << "bimodal saturation PDFs (surrogate): " << bimodal << '\n';
  log << "wrote " << out_dir.string() << '\n';
  return report;
}

}  // namespace flowsurrogate
