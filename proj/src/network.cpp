#include "flowsurrogate/network.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace flowsurrogate {

namespace {

constexpr std::size_t kMinLatentSize = 2;

std::size_t checked_conv_size(const std::string& stage, std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  try {
    return conv_output_size(in, k, s, p);
  } catch (const GeometryError& e) {
    throw GeometryError("stage " + stage + ": " + e.what());
  }
}

// Kernel of the s2p1 transposed convolution mapping `in` to `target`.
std::size_t upsampling_kernel(const std::string& stage, std::size_t in, std::size_t target) {
  const long k = static_cast<long>(target) - 2 * static_cast<long>(in) + 4;
  if (k != 3 && k != 4) {
    throw GeometryError("stage " + stage + ": no k3s2p1/k4s2p1 transposed convolution maps " + std::to_string(in) +
                        " to " + std::to_string(target));
  }
  return static_cast<std::size_t>(k);
}

struct Plan {
  std::vector<StageInfo> stages;
  std::vector<std::size_t> heights, widths;  // input, after first conv, after each encoder
};

Plan plan_architecture(const NetworkConfig& c) {
  if (c.block_layers.empty() || c.block_layers.size() % 2 == 0) {
    throw GeometryError("block_layers must have odd length (the middle block is the latent block)");
  }
  if (c.in_channels == 0 || c.out_channels == 0 || c.initial_features == 0 || c.growth_rate == 0 || c.height == 0 ||
      c.width == 0) {
    throw GeometryError("channel counts, growth rate and input size must be positive");
  }
  const std::size_t m = (c.block_layers.size() - 1) / 2;
  Plan plan;
  std::size_t h = c.height, w = c.width;
  plan.heights.push_back(h);
  plan.widths.push_back(w);

  h = checked_conv_size("conv", h, 7, 2, 3);
  w = checked_conv_size("conv", w, 7, 2, 3);
  std::size_t ch = c.initial_features;
  plan.stages.push_back({"conv", ch, h, w});
  plan.heights.push_back(h);
  plan.widths.push_back(w);

  for (std::size_t e = 0; e < m; ++e) {
    ch = dense_block_channels(ch, c.growth_rate, c.block_layers[e]);
    plan.stages.push_back({"dense_block" + std::to_string(e + 1), ch, h, w});
    const std::string name = "encoding" + std::to_string(e + 1);
    ch /= 2;
    if (ch == 0) throw GeometryError("stage " + name + ": channel count reduced to zero");
    h = checked_conv_size(name, h, 3, 2, 1);
    w = checked_conv_size(name, w, 3, 2, 1);
    plan.stages.push_back({name, ch, h, w});
    plan.heights.push_back(h);
    plan.widths.push_back(w);
  }
  if (h < kMinLatentSize || w < kMinLatentSize) {
    throw GeometryError("latent feature maps are " + std::to_string(h) + "x" + std::to_string(w) +
                        "; at least " + std::to_string(kMinLatentSize) + " required");
  }
  ch += 1;
  plan.stages.push_back({"time", ch, h, w});
  ch = dense_block_channels(ch, c.growth_rate, c.block_layers[m]);
  plan.stages.push_back({"dense_block" + std::to_string(m + 1), ch, h, w});

  for (std::size_t d = 0; d <= m; ++d) {
    const std::string name = "decoding" + std::to_string(d + 1);
    const std::size_t th = plan.heights[m - d], tw = plan.widths[m - d];
    if (upsampling_kernel(name, h, th) != upsampling_kernel(name, w, tw)) {
      throw GeometryError("stage " + name + ": height and width need different upsampling kernels");
    }
    if (ch / 2 == 0) throw GeometryError("stage " + name + ": channel count reduced to zero");
    ch = d == m ? c.out_channels : ch / 2;
    h = th;
    w = tw;
    plan.stages.push_back({name, ch, h, w});
    if (d < m) {
      ch = dense_block_channels(ch, c.growth_rate, c.block_layers[m + 1 + d]);
      plan.stages.push_back({"dense_block" + std::to_string(m + 2 + d), ch, h, w});
    }
  }
  return plan;
}

}  // namespace

// ---------------------------------------------------------------- config

NetworkConfig NetworkConfig::paper() {
  NetworkConfig c;
  c.height = c.width = 50;
  c.initial_features = 48;
  c.growth_rate = 24;
  c.block_layers = {4, 9, 4};
  return c;
}

NetworkConfig NetworkConfig::desk() { return NetworkConfig{}; }

std::string NetworkConfig::describe() const {
  std::ostringstream os;
  os << "in=" << in_channels << ",out=" << out_channels << ",height=" << height << ",width=" << width
     << ",features=" << initial_features << ",growth=" << growth_rate << ",blocks=";
  for (std::size_t i = 0; i < block_layers.size(); ++i) os << (i ? "-" : "") << block_layers[i];
  return os.str();
}

NetworkConfig NetworkConfig::parse(const std::string& description) {
  NetworkConfig c;
  c.block_layers.clear();
  std::istringstream is(description);
  std::string item;
  auto number = [&](const std::string& v) -> std::size_t {
    try {
      return static_cast<std::size_t>(std::stoull(v));
    } catch (const std::exception&) {
      throw DataError("bad architecture value '" + v + "' in '" + description + "'");
    }
  };
  while (std::getline(is, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw DataError("bad architecture description: " + description);
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    if (key == "in") c.in_channels = number(value);
    else if (key == "out") c.out_channels = number(value);
    else if (key == "height") c.height = number(value);
    else if (key == "width") c.width = number(value);
    else if (key == "features") c.initial_features = number(value);
    else if (key == "growth") c.growth_rate = number(value);
    else if (key == "blocks") {
      std::istringstream bs(value);
      std::string b;
      while (std::getline(bs, b, '-')) c.block_layers.push_back(number(b));
    } else {
      throw DataError("unknown architecture key '" + key + "'");
    }
  }
  return c;
}

std::size_t dense_block_channels(std::size_t in_channels, std::size_t growth_rate, std::size_t layers) {
  return in_channels + layers * growth_rate;
}

std::vector<StageInfo> architecture_stages(const NetworkConfig& config) { return plan_architecture(config).stages; }

// ---------------------------------------------------------------- state

template <typename T>
void NetworkState<T>::zero_grad() {
  for (auto& p : params) p.grad.fill(T{0});
}

template <typename T>
std::size_t NetworkState<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

template <typename T>
double NetworkState<T>::squared_norm() const {
  double s = 0.0;
  for (const auto& p : params) {
    for (T v : p.value.values()) s += static_cast<double>(v) * static_cast<double>(v);
  }
  return s;
}

// ---------------------------------------------------------------- construction

template <typename T>
DenseEncoderDecoder<T>::DenseEncoderDecoder(const NetworkConfig& config, std::uint64_t seed) : config_(config) {
  const Plan plan = plan_architecture(config);
  stages_ = plan.stages;
  std::mt19937_64 rng(seed);

  auto add_weight = [&](const std::string& name, Shape shape, double stddev) {
    Tensor<T> value(shape);
    std::normal_distribution<double> normal(0.0, stddev);
    for (auto& v : value.values()) v = static_cast<T>(normal(rng));
    state_.params.push_back({name, std::move(value), Tensor<T>(shape)});
    return state_.params.size() - 1;
  };
  auto conv_unit = [&](const std::string& name, ConvSpec spec, bool transpose, bool output_layer) {
    const double k2 = static_cast<double>(spec.kernel * spec.kernel);
    const double s2 = transpose ? static_cast<double>(spec.stride * spec.stride) : 1.0;
    const double fan_in = static_cast<double>(spec.in_channels) * k2 / s2;
    const double fan_out = static_cast<double>(spec.out_channels) * k2 / s2;
    const double stddev = output_layer ? std::sqrt(2.0 / (fan_in + fan_out)) : std::sqrt(2.0 / fan_in);
    const Shape shape = transpose ? conv_transpose_weight_shape(spec) : conv_weight_shape(spec);
    return detail::ConvUnit{spec, transpose, add_weight(name + ".weight", shape, stddev)};
  };
  auto preact = [&](const std::string& name, ConvSpec spec, bool transpose, bool output_layer) {
    detail::PreActUnit u;
    const std::size_t c = spec.in_channels;
    state_.params.push_back({name + ".bn.scale", Tensor<T>({c}, T{1}), Tensor<T>({c})});
    u.scale = state_.params.size() - 1;
    state_.params.push_back({name + ".bn.shift", Tensor<T>({c}, T{0}), Tensor<T>({c})});
    u.shift = state_.params.size() - 1;
    state_.stat_names.push_back(name + ".bn");
    state_.stats.push_back(RunningStats<T>::init(c));
    u.stats = state_.stats.size() - 1;
    u.conv = conv_unit(name + ".conv", spec, transpose, output_layer);
    return u;
  };
  auto dense_block = [&](std::size_t index, std::size_t channels, std::size_t layers) {
    std::vector<detail::PreActUnit> block;
    for (std::size_t l = 0; l < layers; ++l) {
      const ConvSpec spec{3, 1, 1, channels + l * config.growth_rate, config.growth_rate};
      block.push_back(preact("block" + std::to_string(index + 1) + ".layer" + std::to_string(l + 1), spec, false,
                             false));
    }
    layout_.blocks.push_back(std::move(block));
  };

  const std::size_t m = (config.block_layers.size() - 1) / 2;
  layout_.first = conv_unit("conv", ConvSpec{7, 2, 3, config.in_channels, config.initial_features}, false, false);
  std::size_t ch = config.initial_features;
  for (std::size_t e = 0; e < m; ++e) {
    dense_block(e, ch, config.block_layers[e]);
    ch = dense_block_channels(ch, config.growth_rate, config.block_layers[e]);
    const std::string name = "encoding" + std::to_string(e + 1);
    detail::TransitionUnit t;
    t.reduce = preact(name + ".reduce", ConvSpec{1, 1, 0, ch, ch / 2}, false, false);
    ch /= 2;
    t.resize = preact(name + ".resize", ConvSpec{3, 2, 1, ch, ch}, false, false);
    layout_.encoders.push_back(t);
  }
  ch += 1;
  dense_block(m, ch, config.block_layers[m]);
  ch = dense_block_channels(ch, config.growth_rate, config.block_layers[m]);
  std::size_t h = plan.heights.back();
  for (std::size_t d = 0; d <= m; ++d) {
    const std::string name = "decoding" + std::to_string(d + 1);
    const bool last = d == m;
    detail::TransitionUnit t;
    t.reduce = preact(name + ".reduce", ConvSpec{1, 1, 0, ch, ch / 2}, false, false);
    ch /= 2;
    const std::size_t target = plan.heights[m - d];
    const std::size_t kernel = upsampling_kernel(name, h, target);
    const std::size_t out = last ? config.out_channels : ch;
    t.resize = preact(name + ".resize", ConvSpec{kernel, 2, 1, ch, out}, true, last);
    ch = out;
    h = target;
    layout_.decoders.push_back(t);
    if (!last) {
      dense_block(m + 1 + d, ch, config.block_layers[m + 1 + d]);
      ch = dense_block_channels(ch, config.growth_rate, config.block_layers[m + 1 + d]);
    }
  }
}

// ---------------------------------------------------------------- forward / backward

template <typename T>
Tensor<T> DenseEncoderDecoder<T>::preact_forward(const detail::PreActUnit& unit, const Tensor<T>& x, Mode mode,
                                                 PreActTape<T>* tape) {
  auto bn = batch_norm_forward(x, state_.params[unit.scale].value, state_.params[unit.shift].value,
                               state_.stats[unit.stats], mode);
  Tensor<T> act = std::move(bn.output);
  for (auto& v : act.values()) v = v > T{0} ? v : T{0};
  const auto& w = state_.params[unit.conv.weight].value;
  auto conv = unit.conv.transpose ? conv2d_transpose_forward(std::move(act), unit.conv.spec, w)
                                  : conv2d_forward(std::move(act), unit.conv.spec, w);
  if (tape != nullptr) {
    tape->bn = std::move(bn.tape);
    tape->conv = std::move(conv.tape);
  }
  return std::move(conv.output);
}

template <typename T>
Tensor<T> DenseEncoderDecoder<T>::preact_backward(const detail::PreActUnit& unit, PreActTape<T>&& tape,
                                                  const Tensor<T>& grad) {
  auto& wp = state_.params[unit.conv.weight];
  auto cg = unit.conv.transpose ? conv2d_transpose_backward(std::move(tape.conv), unit.conv.spec, wp.value, grad)
                                : conv2d_backward(std::move(tape.conv), unit.conv.spec, wp.value, grad);
  wp.grad += cg.weight;
  // ReLU mask recomputed from the saved normalized input.
  Tensor<T> g = std::move(cg.input);
  const Tensor<T>& xh = tape.bn.saved.at(0);
  const auto& gamma = state_.params[unit.scale].value;
  const auto& beta = state_.params[unit.shift].value;
  const std::size_t n = g.dim(0), c = g.dim(1), plane = g.dim(2) * g.dim(3);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      const T gm = gamma[ch], bt = beta[ch];
      for (std::size_t i = 0; i < plane; ++i) {
        if (gm * xh[off + i] + bt <= T{0}) g[off + i] = T{0};
      }
    }
  }
  auto bg = batch_norm_backward(std::move(tape.bn), state_.params[unit.scale].value, g);
  state_.params[unit.scale].grad += bg.scale;
  state_.params[unit.shift].grad += bg.shift;
  return std::move(bg.input);
}

template <typename T>
Tensor<T> DenseEncoderDecoder<T>::block_forward(const std::vector<detail::PreActUnit>& block, Tensor<T> x, Mode mode,
                                                DenseBlockTape<T>* tape) {
  for (const auto& unit : block) {
    PreActTape<T> unit_tape;
    Tensor<T> y = preact_forward(unit, x, mode, tape ? &unit_tape : nullptr);
    auto cat = concat_channels<T>({&x, &y});
    if (tape != nullptr) {
      tape->layers.push_back(std::move(unit_tape));
      tape->concats.push_back(std::move(cat.tape));
    }
    x = std::move(cat.output);
  }
  return x;
}

template <typename T>
Tensor<T> DenseEncoderDecoder<T>::block_backward(const std::vector<detail::PreActUnit>& block,
                                                 DenseBlockTape<T>&& tape, Tensor<T> grad) {
  for (std::size_t l = block.size(); l-- > 0;) {
    auto parts = concat_channels_backward(std::move(tape.concats[l]), grad);
    parts[0] += preact_backward(block[l], std::move(tape.layers[l]), parts[1]);
    grad = std::move(parts[0]);
  }
  return grad;
}

template <typename T>
Tensor<T> DenseEncoderDecoder<T>::forward(const Tensor<T>& x, std::span<const T> times, Mode mode,
                                          NetworkTape<T>* tape) {
  require_same_shape(x.shape(), {x.rank() == 4 ? x.dim(0) : 0, config_.in_channels, config_.height, config_.width},
                     "network input");
  const std::size_t n = x.dim(0);
  if (times.size() != n) {
    throw ShapeError("network forward: " + std::to_string(times.size()) + " time values for batch of " +
                     std::to_string(n));
  }
  for (T t : times) {
    if (!std::isfinite(static_cast<double>(t))) throw NumericalError("network forward: non-finite time input");
  }
  if (tape != nullptr) {
    *tape = NetworkTape<T>{};
    tape->batch = n;
    tape->mode = mode;
  }
  observed_.clear();
  auto record = [&](const std::string& name, const Tensor<T>& h) {
    observed_.push_back({name, h.dim(1), h.dim(2), h.dim(3)});
  };
  auto transition = [&](const detail::TransitionUnit& t, const Tensor<T>& h) {
    PreActTape<T> a, b;
    Tensor<T> r = preact_forward(t.reduce, h, mode, tape ? &a : nullptr);
    Tensor<T> out = preact_forward(t.resize, r, mode, tape ? &b : nullptr);
    if (tape != nullptr) {
      tape->transitions.push_back(std::move(a));
      tape->transitions.push_back(std::move(b));
    }
    return out;
  };
  auto block = [&](std::size_t index, Tensor<T> h) {
    DenseBlockTape<T> bt;
    Tensor<T> out = block_forward(layout_.blocks[index], std::move(h), mode, tape ? &bt : nullptr);
    if (tape != nullptr) tape->blocks.push_back(std::move(bt));
    record("dense_block" + std::to_string(index + 1), out);
    return out;
  };

  const std::size_t m = layout_.encoders.size();
  auto first = conv2d_forward(x, layout_.first.spec, state_.params[layout_.first.weight].value);
  if (tape != nullptr) tape->first_conv = std::move(first.tape);
  Tensor<T> h = std::move(first.output);
  record("conv", h);
  for (std::size_t e = 0; e < m; ++e) {
    h = block(e, std::move(h));
    h = transition(layout_.encoders[e], h);
    record("encoding" + std::to_string(e + 1), h);
  }

  Tensor<T> time_map({n, 1, h.dim(2), h.dim(3)});
  const std::size_t plane = h.dim(2) * h.dim(3);
  for (std::size_t b = 0; b < n; ++b) std::fill_n(time_map.data() + b * plane, plane, times[b]);
  auto cat = concat_channels<T>({&h, &time_map});
  if (tape != nullptr) tape->time_concat = std::move(cat.tape);
  h = std::move(cat.output);
  record("time", h);
  h = block(m, std::move(h));

  for (std::size_t d = 0; d <= m; ++d) {
    h = transition(layout_.decoders[d], h);
    record("decoding" + std::to_string(d + 1), h);
    if (d < m) h = block(m + 1 + d, std::move(h));
  }
  auto out = sigmoid_forward(h);
  if (tape != nullptr) {
    tape->output = std::move(out.tape);
    tape->armed = true;
  }
  return std::move(out.output);
}

template <typename T>
InputGrads<T> DenseEncoderDecoder<T>::backward(NetworkTape<T>&& tape, const Tensor<T>& grad_output) {
  if (!tape.armed) throw Error("network backward called without a forward tape");
  tape.armed = false;
  require_same_shape(grad_output.shape(), {tape.batch, config_.out_channels, config_.height, config_.width},
                     "network output gradient");
  const std::size_t m = layout_.encoders.size();
  auto pop_transition = [&](const detail::TransitionUnit& t, Tensor<T> g) {
    PreActTape<T> b = std::move(tape.transitions.back());
    tape.transitions.pop_back();
    PreActTape<T> a = std::move(tape.transitions.back());
    tape.transitions.pop_back();
    g = preact_backward(t.resize, std::move(b), g);
    return preact_backward(t.reduce, std::move(a), g);
  };
  auto pop_block = [&](std::size_t index, Tensor<T> g) {
    DenseBlockTape<T> bt = std::move(tape.blocks.back());
    tape.blocks.pop_back();
    return block_backward(layout_.blocks[index], std::move(bt), std::move(g));
  };

  Tensor<T> g = sigmoid_backward(std::move(tape.output), grad_output);
  for (std::size_t d = m + 1; d-- > 0;) {
    if (d < m) g = pop_block(m + 1 + d, std::move(g));
    g = pop_transition(layout_.decoders[d], std::move(g));
  }
  g = pop_block(m, std::move(g));

  auto parts = concat_channels_backward(std::move(tape.time_concat), g);
  InputGrads<T> result;
  const std::size_t plane = parts[1].dim(2) * parts[1].dim(3);
  result.time.assign(tape.batch, T{0});
  for (std::size_t b = 0; b < tape.batch; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += parts[1][b * plane + i];
    result.time[b] = static_cast<T>(s);
  }
  g = std::move(parts[0]);
  for (std::size_t e = m; e-- > 0;) {
    g = pop_transition(layout_.encoders[e], std::move(g));
    g = pop_block(e, std::move(g));
  }
  auto& wp = state_.params[layout_.first.weight];
  auto cg = conv2d_backward(std::move(tape.first_conv), layout_.first.spec, wp.value, g);
  wp.grad += cg.weight;
  result.input = std::move(cg.input);
  return result;
}

// ---------------------------------------------------------------- persistence

template <typename T>
Checkpoint DenseEncoderDecoder<T>::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.set_meta("architecture", config_.describe());
  ckpt.set_meta("output_channels", "rescaled_pressure,saturation,front_probability");
  for (const auto& p : state_.params) ckpt.tensors.push_back({p.name, p.value.template cast<float>()});
  for (std::size_t i = 0; i < state_.stats.size(); ++i) {
    ckpt.tensors.push_back({state_.stat_names[i] + ".running_mean", state_.stats[i].mean.template cast<float>()});
    ckpt.tensors.push_back({state_.stat_names[i] + ".running_var", state_.stats[i].var.template cast<float>()});
  }
  return ckpt;
}

template <typename T>
void DenseEncoderDecoder<T>::load_checkpoint(const Checkpoint& ckpt) {
  const auto arch = ckpt.meta_value("architecture");
  if (!arch) throw DataError("checkpoint carries no architecture");
  if (NetworkConfig::parse(*arch) != config_) {
    throw DataError("checkpoint architecture " + *arch + " does not match network " + config_.describe());
  }
  for (auto& p : state_.params) {
    const auto& t = ckpt.tensor(p.name);
    require_same_shape(t.shape(), p.value.shape(), p.name.c_str());
    p.value = t.template cast<T>();
  }
  for (std::size_t i = 0; i < state_.stats.size(); ++i) {
    state_.stats[i].mean = ckpt.tensor(state_.stat_names[i] + ".running_mean").template cast<T>();
    state_.stats[i].var = ckpt.tensor(state_.stat_names[i] + ".running_var").template cast<T>();
  }
}

template <typename T>
template <typename U>
DenseEncoderDecoder<U> DenseEncoderDecoder<T>::converted() const {
  DenseEncoderDecoder<U> out;
  out.config_ = config_;
  out.stages_ = stages_;
  out.layout_ = layout_;
  for (const auto& p : state_.params) {
    out.state_.params.push_back({p.name, p.value.template cast<U>(), p.grad.template cast<U>()});
  }
  out.state_.stat_names = state_.stat_names;
  for (const auto& s : state_.stats) out.state_.stats.push_back({s.mean.template cast<U>(), s.var.template cast<U>()});
  return out;
}

template struct NetworkState<float>;
template struct NetworkState<double>;
template class DenseEncoderDecoder<float>;
template class DenseEncoderDecoder<double>;
template DenseEncoderDecoder<double> DenseEncoderDecoder<float>::converted<double>() const;
template DenseEncoderDecoder<float> DenseEncoderDecoder<double>::converted<float>() const;
template DenseEncoderDecoder<float> DenseEncoderDecoder<float>::converted<float>() const;
template DenseEncoderDecoder<double> DenseEncoderDecoder<double>::converted<double>() const;

}  // namespace flowsurrogate
