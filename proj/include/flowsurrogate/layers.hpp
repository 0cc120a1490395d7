#pragma once

// Differentiable layer primitives on [N, C, H, W] tensors.
//
// Every forward returns the output together with a LayerTape holding what the
// matching backward needs. Backward consumes the tape (it takes it by rvalue),
// so a tape can be differentiated at most once per forward.

#include <cstddef>
#include <vector>

#include "flowsurrogate/tensor.hpp"

namespace flowsurrogate {

enum class Mode { train, eval };

/// Square-kernel convolution geometry. Convolutions carry no bias.
struct ConvSpec {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
};

/// floor((in + 2p - k) / s) + 1. Throws GeometryError when in + 2p < k.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

/// (in - 1) s - 2p + k, i.e. the size whose strided convolution maps back to
/// `in`. Throws GeometryError when no positive size exists.
std::size_t conv_transpose_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                       std::size_t padding);

/// Weight shape for a convolution: (out, in, k, k).
Shape conv_weight_shape(const ConvSpec& spec);
/// Weight shape for a transposed convolution: (in, out, k, k). This is the
/// weight of the convolution out->in whose adjoint the layer computes.
Shape conv_transpose_weight_shape(const ConvSpec& spec);

template <typename T>
struct LayerTape {
  std::vector<Tensor<T>> saved;
  std::vector<std::size_t> sizes;
  Mode mode = Mode::train;
  bool armed = false;
};

template <typename T>
struct Forward {
  Tensor<T> output;
  LayerTape<T> tape;
};

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
};

template <typename T>
Forward<T> conv2d_forward(Tensor<T> input, const ConvSpec& spec, const Tensor<T>& weight);
template <typename T>
ConvGrads<T> conv2d_backward(LayerTape<T>&& tape, const ConvSpec& spec, const Tensor<T>& weight,
                             const Tensor<T>& grad_output);

template <typename T>
Forward<T> conv2d_transpose_forward(Tensor<T> input, const ConvSpec& spec, const Tensor<T>& weight);
template <typename T>
ConvGrads<T> conv2d_transpose_backward(LayerTape<T>&& tape, const ConvSpec& spec, const Tensor<T>& weight,
                                       const Tensor<T>& grad_output);

struct BatchNormOptions {
  double epsilon = 1e-5;
  double momentum = 0.1;
};

template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;

  static RunningStats init(std::size_t channels) {
    return {Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{1})};
  }
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> scale;
  Tensor<T> shift;
};

/// Per-channel normalization over (N, H, W). Train mode uses batch statistics
/// and folds them into `stats` (unbiased variance); eval mode uses `stats`.
template <typename T>
Forward<T> batch_norm_forward(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                              RunningStats<T>& stats, Mode mode, const BatchNormOptions& options = {});
template <typename T>
BatchNormGrads<T> batch_norm_backward(LayerTape<T>&& tape, const Tensor<T>& scale, const Tensor<T>& grad_output);

template <typename T>
Forward<T> relu_forward(const Tensor<T>& input);
template <typename T>
Tensor<T> relu_backward(LayerTape<T>&& tape, const Tensor<T>& grad_output);

template <typename T>
Forward<T> sigmoid_forward(const Tensor<T>& input);
template <typename T>
Tensor<T> sigmoid_backward(LayerTape<T>&& tape, const Tensor<T>& grad_output);

/// Concatenate along the channel axis (axis 1).
template <typename T>
Forward<T> concat_channels(const std::vector<const Tensor<T>*>& parts);
template <typename T>
std::vector<Tensor<T>> concat_channels_backward(LayerTape<T>&& tape, const Tensor<T>& grad_output);

/// Split along the channel axis at the given channel counts.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& input, const std::vector<std::size_t>& channels);

}  // namespace flowsurrogate
