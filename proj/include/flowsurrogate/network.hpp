#pragma once

// Dense convolutional encoder-decoder with a broadcast time input.
//
//   input -> conv k7s2p3 -> [dense block -> encoding layer] x m
//         -> concat(time map) -> latent dense block
//         -> [decoding layer -> dense block] x m -> decoding layer -> sigmoid
//
// Dense-block layers, encoding layers and decoding layers are built from
// pre-activation units (batch norm, ReLU, convolution). Encoding layers halve
// the channel count with a 1x1 convolution and then halve the spatial size
// with a k3s2p1 convolution; decoding layers halve the channels and then
// upsample with a s2p1 transposed convolution whose kernel (3 or 4) is picked
// so the output size mirrors the matching encoder stage.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowsurrogate/checkpoint.hpp"
#include "flowsurrogate/layers.hpp"
#include "flowsurrogate/tensor.hpp"

namespace flowsurrogate {

struct NetworkConfig {
  std::size_t in_channels = 1;
  std::size_t out_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t initial_features = 32;
  std::size_t growth_rate = 16;
  std::vector<std::size_t> block_layers = {3, 5, 3};

  /// 50x50 input, 48 initial maps, K = 24, L = (4, 9, 4).
  static NetworkConfig paper();
  /// 32x32 input, 32 initial maps, K = 16, L = (3, 5, 3).
  static NetworkConfig desk();

  std::string describe() const;
  static NetworkConfig parse(const std::string& description);
  bool operator==(const NetworkConfig&) const = default;
};

/// C_in + L * K.
std::size_t dense_block_channels(std::size_t in_channels, std::size_t growth_rate, std::size_t layers);

struct StageInfo {
  std::string name;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Stage-by-stage (channels, size) of the architecture. Throws GeometryError
/// naming the failing stage when the configuration cannot be realized.
std::vector<StageInfo> architecture_stages(const NetworkConfig& config);

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

template <typename T>
struct NetworkState {
  std::vector<Parameter<T>> params;
  std::vector<std::string> stat_names;
  std::vector<RunningStats<T>> stats;

  void zero_grad();
  std::size_t parameter_count() const;
  /// theta^T theta over every learnable parameter.
  double squared_norm() const;
};

namespace detail {

struct ConvUnit {
  ConvSpec spec;
  bool transpose = false;
  std::size_t weight = 0;  // index into NetworkState::params
};

/// Batch norm -> ReLU -> convolution.
struct PreActUnit {
  std::size_t scale = 0;
  std::size_t shift = 0;
  std::size_t stats = 0;  // index into NetworkState::stats
  ConvUnit conv;
};

struct TransitionUnit {
  PreActUnit reduce;
  PreActUnit resize;
};

struct NetworkLayout {
  ConvUnit first;
  std::vector<std::vector<PreActUnit>> blocks;
  std::vector<TransitionUnit> encoders;
  std::vector<TransitionUnit> decoders;
};

}  // namespace detail

template <typename T>
struct PreActTape {
  LayerTape<T> bn, conv;
};

template <typename T>
struct DenseBlockTape {
  std::vector<PreActTape<T>> layers;
  std::vector<LayerTape<T>> concats;
};

template <typename T>
struct NetworkTape {
  LayerTape<T> first_conv;
  std::vector<DenseBlockTape<T>> blocks;
  std::vector<PreActTape<T>> transitions;  // two units per encoding/decoding layer
  LayerTape<T> time_concat;
  LayerTape<T> output;
  std::size_t batch = 0;
  Mode mode = Mode::train;
  bool armed = false;
};

template <typename T>
struct InputGrads {
  Tensor<T> input;
  std::vector<T> time;
};

template <typename T>
class DenseEncoderDecoder {
 public:
  /// Builds the layer graph and initializes parameters (He-normal for
  /// ReLU-fed convolutions, Xavier-normal for the output convolution, unit
  /// batch-norm scale, zero shift).
  DenseEncoderDecoder(const NetworkConfig& config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }
  const std::vector<StageInfo>& stages() const { return stages_; }
  NetworkState<T>& state() { return state_; }
  const NetworkState<T>& state() const { return state_; }

  /// x: [N, in_channels, H, W]; times: one value per sample. Returns
  /// [N, out_channels, H, W] in (0, 1). When `tape` is non-null it receives
  /// what backward needs.
  Tensor<T> forward(const Tensor<T>& x, std::span<const T> times, Mode mode, NetworkTape<T>* tape = nullptr);

  /// Accumulates parameter gradients into state().params[i].grad and returns
  /// the gradients with respect to the input image and the time values.
  InputGrads<T> backward(NetworkTape<T>&& tape, const Tensor<T>& grad_output);

  /// Parameters and running statistics, with the architecture in the header.
  Checkpoint to_checkpoint() const;
  /// Throws DataError when the checkpoint architecture differs.
  void load_checkpoint(const Checkpoint& checkpoint);

  /// Same architecture and values in another precision.
  template <typename U>
  DenseEncoderDecoder<U> converted() const;

  /// Stage outputs recorded on the most recent forward (channels, size).
  const std::vector<StageInfo>& last_forward_stages() const { return observed_; }

 private:
  template <typename>
  friend class DenseEncoderDecoder;

  DenseEncoderDecoder() = default;

  Tensor<T> preact_forward(const detail::PreActUnit& unit, const Tensor<T>& x, Mode mode, PreActTape<T>* tape);
  Tensor<T> preact_backward(const detail::PreActUnit& unit, PreActTape<T>&& tape, const Tensor<T>& grad);
  Tensor<T> block_forward(const std::vector<detail::PreActUnit>& block, Tensor<T> x, Mode mode,
                          DenseBlockTape<T>* tape);
  Tensor<T> block_backward(const std::vector<detail::PreActUnit>& block, DenseBlockTape<T>&& tape, Tensor<T> grad);

  NetworkConfig config_;
  std::vector<StageInfo> stages_;
  NetworkState<T> state_;
  detail::NetworkLayout layout_;
  std::vector<StageInfo> observed_;
};

extern template class DenseEncoderDecoder<float>;
extern template class DenseEncoderDecoder<double>;

}  // namespace flowsurrogate
