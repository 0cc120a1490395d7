#include "flowsurrogate/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "flowsurrogate/losses.hpp"

namespace flowsurrogate {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw DataError("bad number '" + s + "'");
  }
}

bool same_value(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

std::string csv_row(const EpochRecord& r) {
  std::ostringstream os;
  os << r.epoch << ',' << format_double(r.train_rmse) << ',' << format_double(r.test_rmse) << ','
     << format_double(r.mse_loss) << ',' << format_double(r.weighted_bce_loss) << ','
     << format_double(r.learning_rate);
  return os.str();
}

EpochRecord parse_row(const std::string& line) {
  std::vector<std::string> cells;
  std::istringstream is(line);
  std::string cell;
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (cells.size() != 6) throw DataError("train record row has " + std::to_string(cells.size()) + " fields");
  EpochRecord r;
  r.epoch = static_cast<std::size_t>(parse_double(cells[0]));
  r.train_rmse = parse_double(cells[1]);
  r.test_rmse = parse_double(cells[2]);
  r.mse_loss = parse_double(cells[3]);
  r.weighted_bce_loss = parse_double(cells[4]);
  r.learning_rate = parse_double(cells[5]);
  return r;
}

constexpr const char* kCsvHeader = "epoch,train_rmse,test_rmse,mse_loss,wbce_loss,lr";

}  // namespace

// ---------------------------------------------------------------- data

void SurrogateData::validate() const {
  if (inputs.rank() != 4) throw ShapeError("inputs must be [N, d_x, H, W]");
  const std::size_t n = inputs.dim(0), h = inputs.dim(2), w = inputs.dim(3);
  require_same_shape(outputs.shape(), {n, times.size(), kOutputChannels, h, w}, "surrogate outputs");
}

void SurrogateData::gather(std::span<const std::size_t> records, Tensor<float>& x, std::vector<float>& t,
                           Tensor<float>& y) const {
  const std::size_t nt = time_count();
  const std::size_t dx = inputs.dim(1), h = inputs.dim(2), w = inputs.dim(3);
  const std::size_t in_len = dx * h * w, out_len = kOutputChannels * h * w;
  const std::size_t m = records.size();
  x = Tensor<float>({m, dx, h, w});
  y = Tensor<float>({m, kOutputChannels, h, w});
  t.resize(m);
  for (std::size_t b = 0; b < m; ++b) {
    const std::size_t r = records[b];
    const std::size_t i = r / nt, j = r % nt;
    if (i >= samples()) throw ShapeError("record index out of range");
    std::copy_n(inputs.data() + i * in_len, in_len, x.data() + b * in_len);
    std::copy_n(outputs.data() + r * out_len, out_len, y.data() + b * out_len);
    t[b] = times[j];
  }
}

SurrogateData SurrogateData::select_times(const std::vector<std::size_t>& keep) const {
  SurrogateData out;
  out.inputs = inputs;
  const std::size_t n = samples(), nt = time_count();
  const std::size_t h = inputs.dim(2), w = inputs.dim(3), len = kOutputChannels * h * w;
  out.outputs = Tensor<float>({n, keep.size(), kOutputChannels, h, w});
  for (std::size_t j : keep) {
    if (j >= nt) throw ShapeError("select_times: time index out of range");
    out.times.push_back(times[j]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < keep.size(); ++k) {
      std::copy_n(outputs.data() + (i * nt + keep[k]) * len, len, out.outputs.data() + (i * keep.size() + k) * len);
    }
  }
  return out;
}

// ---------------------------------------------------------------- config

const char* to_string(TrainMode mode) { return mode == TrainMode::mse_only ? "mse" : "mse-bce"; }

TrainMode parse_train_mode(const std::string& text) {
  if (text == "mse") return TrainMode::mse_only;
  if (text == "mse-bce") return TrainMode::two_stage;
  throw ConfigError("unknown training mode '" + text + "' (expected mse or mse-bce)");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("training.epochs must be positive");
  if (batch_size == 0) throw ConfigError("training.batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("training.learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("training.weight_decay must be non-negative");
  if (!(bce_weight >= 0.0)) throw ConfigError("training.bce_weight must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("plateau factor must lie in (0, 1)");
  if (plateau_patience == 0) throw ConfigError("plateau patience must be positive");
  if (!(min_learning_rate_ratio > 0.0 && min_learning_rate_ratio <= 1.0)) {
    throw ConfigError("min learning-rate ratio must lie in (0, 1]");
  }
}

// ---------------------------------------------------------------- objective

template <typename T>
ObjectiveValue objective_and_gradient(DenseEncoderDecoder<T>& net, const Tensor<T>& x, std::span<const T> times,
                                      const Tensor<T>& targets, double bce_weight, double weight_decay, Mode mode,
                                      Tensor<T>* output) {
  NetworkTape<T> tape;
  Tensor<T> out = net.forward(x, times, mode, &tape);
  require_same_shape(targets.shape(), out.shape(), "training targets");
  auto pred = split_channels(out, {2, 1});
  auto truth = split_channels(targets, {2, 1});
  auto mse = mse_loss(pred[0], truth[0]);
  auto bce = bce_loss(pred[1], truth[1]);
  if (bce_weight == 0.0) {
    bce.grad.fill(T{0});
  } else {
    bce.grad *= static_cast<T>(bce_weight);
  }
  auto grad = concat_channels<T>({&mse.grad, &bce.grad});
  net.backward(std::move(tape), grad.output);

  ObjectiveValue v;
  v.mse = mse.value;
  v.bce = bce.value;
  v.weighted_bce = bce_weight * bce.value;
  v.decay = add_weight_decay(net.state(), weight_decay);
  v.total = v.mse + v.weighted_bce + v.decay;
  if (output != nullptr) *output = std::move(out);
  return v;
}

template ObjectiveValue objective_and_gradient(DenseEncoderDecoder<float>&, const Tensor<float>&,
                                               std::span<const float>, const Tensor<float>&, double, double, Mode,
                                               Tensor<float>*);
template ObjectiveValue objective_and_gradient(DenseEncoderDecoder<double>&, const Tensor<double>&,
                                               std::span<const double>, const Tensor<double>&, double, double, Mode,
                                               Tensor<double>*);

// ---------------------------------------------------------------- record

void TrainRecord::write_csv(std::ostream& out) const {
  out << kCsvHeader << '\n';
  for (const auto& r : epochs) out << csv_row(r) << '\n';
}

TrainRecord TrainRecord::read_csv(std::istream& in) {
  TrainRecord record;
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw DataError("train record: missing header");
  while (std::getline(in, line)) {
    if (!line.empty()) record.epochs.push_back(parse_row(line));
  }
  return record;
}

bool TrainRecord::operator==(const TrainRecord& other) const {
  if (epochs.size() != other.epochs.size()) return false;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto &a = epochs[i], &b = other.epochs[i];
    if (a.epoch != b.epoch || !same_value(a.train_rmse, b.train_rmse) || !same_value(a.test_rmse, b.test_rmse) ||
        !same_value(a.mse_loss, b.mse_loss) || !same_value(a.weighted_bce_loss, b.weighted_bce_loss) ||
        !same_value(a.learning_rate, b.learning_rate)) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------- trainer

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Trainer::Trainer(DenseEncoderDecoder<float>& net, const TrainConfig& config)
    : net_(net),
      config_(config),
      adam_(AdamState<float>::init(net.state())),
      scheduler_(config.learning_rate, PlateauOptions{config.plateau_factor, config.plateau_patience,
                                                      config.plateau_min_delta,
                                                      config.learning_rate * config.min_learning_rate_ratio}) {
  config_.validate();
}

const EpochRecord& Trainer::run_epoch(const SurrogateData& train, const SurrogateData* test) {
  train.validate();
  if (train.records() == 0) throw DataError("empty training set");
  const std::size_t epoch = record_.epochs.size() + 1;
  const auto order = epoch_order(train.records(), config_.seed, epoch);
  const AdamOptions adam{scheduler_.learning_rate(), config_.beta1, config_.beta2, 1e-8};
  const std::size_t hw = train.inputs.dim(2) * train.inputs.dim(3);

  double squared_error = 0.0, mse_sum = 0.0, wbce_sum = 0.0;
  Tensor<float> x, y, out;
  std::vector<float> t;
  auto check = [&](const ObjectiveValue& v, std::size_t batch, const char* stage) {
    if (!std::isfinite(v.total)) {
      std::ostringstream os;
      os << "non-finite " << stage << " objective at epoch " << epoch << ", batch " << batch << ": mse=" << v.mse
         << " bce=" << v.bce << " decay=" << v.decay;
      throw NumericalError(os.str());
    }
  };
  for (std::size_t start = 0, batch = 1; start < order.size(); start += config_.batch_size, ++batch) {
    const std::size_t m = std::min(config_.batch_size, order.size() - start);
    train.gather(std::span(order).subspan(start, m), x, t, y);

    net_.state().zero_grad();
    const auto v1 = objective_and_gradient<float>(net_, x, t, y, 0.0, config_.weight_decay, Mode::train, &out);
    check(v1, batch, "stage-one");
    adam_step(net_.state(), adam_, adam);
    ++optimizer_steps_;

    for (std::size_t s = 0; s < m; ++s) {
      const std::size_t base = s * kOutputChannels * hw;
      for (std::size_t i = 0; i < 2 * hw; ++i) {
        const double d = static_cast<double>(out[base + i]) - static_cast<double>(y[base + i]);
        squared_error += d * d;
      }
    }
    mse_sum += v1.mse * static_cast<double>(m);
    wbce_sum += config_.bce_weight * v1.bce * static_cast<double>(m);

    if (config_.mode == TrainMode::two_stage) {
      net_.state().zero_grad();
      const auto v2 =
          objective_and_gradient<float>(net_, x, t, y, config_.bce_weight, config_.weight_decay, Mode::train);
      check(v2, batch, "stage-two");
      adam_step(net_.state(), adam_, adam);
      ++optimizer_steps_;
    }
  }

  const double n = static_cast<double>(train.records());
  EpochRecord r;
  r.epoch = epoch;
  r.train_rmse = std::sqrt(squared_error / n);
  r.mse_loss = mse_sum / n;
  r.weighted_bce_loss = wbce_sum / n;
  r.learning_rate = scheduler_.learning_rate();
  r.test_rmse = std::numeric_limits<double>::quiet_NaN();
  if (test != nullptr && config_.test_interval > 0 && epoch % config_.test_interval == 0) {
    r.test_rmse = evaluate(net_, *test).rmse;
  }
  scheduler_.step(r.train_rmse);
  record_.epochs.push_back(r);
  return record_.epochs.back();
}

const TrainRecord& Trainer::run(const SurrogateData& train, const SurrogateData* test,
                                const std::function<void(const Trainer&)>& after_epoch) {
  while (record_.epochs.size() < config_.epochs) {
    run_epoch(train, test);
    if (after_epoch) after_epoch(*this);
  }
  return record_;
}

Checkpoint Trainer::to_checkpoint() const {
  Checkpoint ckpt = net_.to_checkpoint();
  ckpt.set_meta("trainer.mode", to_string(config_.mode));
  ckpt.set_meta("trainer.adam_step", std::to_string(adam_.step));
  ckpt.set_meta("trainer.optimizer_steps", std::to_string(optimizer_steps_));
  ckpt.set_meta("trainer.learning_rate", format_double(scheduler_.learning_rate()));
  ckpt.set_meta("trainer.best", format_double(scheduler_.best()));
  ckpt.set_meta("trainer.bad_epochs", std::to_string(scheduler_.bad_epochs()));
  ckpt.set_meta("trainer.epochs", std::to_string(record_.epochs.size()));
  for (std::size_t i = 0; i < record_.epochs.size(); ++i) {
    ckpt.set_meta("trainer.record." + std::to_string(i), csv_row(record_.epochs[i]));
  }
  const auto& params = net_.state().params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt.tensors.push_back({"adam.first." + params[i].name, adam_.first[i]});
    ckpt.tensors.push_back({"adam.second." + params[i].name, adam_.second[i]});
  }
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  auto need = [&](const std::string& key) {
    auto v = ckpt.meta_value(key);
    if (!v) throw DataError("training checkpoint lacks " + key);
    return *v;
  };
  if (parse_train_mode(need("trainer.mode")) != config_.mode) {
    throw DataError("training checkpoint was written in a different mode");
  }
  net_.load_checkpoint(ckpt);
  const auto& params = net_.state().params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_.first[i] = ckpt.tensor("adam.first." + params[i].name);
    adam_.second[i] = ckpt.tensor("adam.second." + params[i].name);
    require_same_shape(adam_.first[i].shape(), params[i].value.shape(), "adam moment");
    require_same_shape(adam_.second[i].shape(), params[i].value.shape(), "adam moment");
  }
  adam_.step = static_cast<std::size_t>(std::stoull(need("trainer.adam_step")));
  optimizer_steps_ = static_cast<std::size_t>(std::stoull(need("trainer.optimizer_steps")));
  scheduler_.restore(parse_double(need("trainer.learning_rate")), parse_double(need("trainer.best")),
                     static_cast<std::size_t>(std::stoull(need("trainer.bad_epochs"))));
  const auto epochs = static_cast<std::size_t>(std::stoull(need("trainer.epochs")));
  record_.epochs.clear();
  for (std::size_t i = 0; i < epochs; ++i) record_.epochs.push_back(parse_row(need("trainer.record." + std::to_string(i))));
}

// ---------------------------------------------------------------- evaluation

Tensor<float> predict_all(DenseEncoderDecoder<float>& net, const SurrogateData& data, std::size_t batch_size) {
  data.validate();
  const std::size_t h = data.inputs.dim(2), w = data.inputs.dim(3), len = kOutputChannels * h * w;
  Tensor<float> all({data.records(), kOutputChannels, h, w});
  Tensor<float> x, y;
  std::vector<float> t;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.records(); start += batch_size) {
    const std::size_t m = std::min(batch_size, data.records() - start);
    idx.resize(m);
    std::iota(idx.begin(), idx.end(), start);
    data.gather(idx, x, t, y);
    const Tensor<float> out = net.forward(x, t, Mode::eval);
    std::copy_n(out.data(), m * len, all.data() + start * len);
  }
  return all;
}

RegressionMetrics evaluate(DenseEncoderDecoder<float>& net, const SurrogateData& data, std::size_t batch_size) {
  const Tensor<float> pred = predict_all(net, data, batch_size);
  const std::size_t hw = data.inputs.dim(2) * data.inputs.dim(3);
  MetricAccumulator acc;
  std::vector<double> p(2 * hw), y(2 * hw);
  for (std::size_t r = 0; r < data.records(); ++r) {
    for (std::size_t i = 0; i < 2 * hw; ++i) {
      p[i] = pred[r * kOutputChannels * hw + i];
      y[i] = data.outputs[r * kOutputChannels * hw + i];
    }
    acc.add_sample(p.data(), y.data(), 2 * hw);
  }
  return acc.result();
}

TrainRecord train_two_stage(DenseEncoderDecoder<float>& net, const SurrogateData& train, const SurrogateData* test,
                            TrainConfig config) {
  config.mode = TrainMode::two_stage;
  Trainer trainer(net, config);
  return trainer.run(train, test);
}

TrainRecord mse_only_train(DenseEncoderDecoder<float>& net, const SurrogateData& train, const SurrogateData* test,
                           TrainConfig config) {
  config.mode = TrainMode::mse_only;
  Trainer trainer(net, config);
  return trainer.run(train, test);
}

}  // namespace flowsurrogate
