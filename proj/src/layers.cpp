#include "flowsurrogate/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>

namespace flowsurrogate {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

std::string geometry_string(const ConvSpec& s) {
  return "k" + std::to_string(s.kernel) + "s" + std::to_string(s.stride) + "p" + std::to_string(s.padding) + " " +
         std::to_string(s.in_channels) + "->" + std::to_string(s.out_channels);
}

void validate_spec(const ConvSpec& spec) {
  if (spec.kernel == 0 || spec.stride == 0 || spec.in_channels == 0 || spec.out_channels == 0) {
    throw GeometryError("convolution spec must have positive kernel, stride and channels: " + geometry_string(spec));
  }
}

template <typename T>
void require_nchw(const Tensor<T>& t, std::size_t channels, const char* what) {
  if (t.rank() != 4) throw ShapeError(std::string(what) + ": expected [N,C,H,W], got " + shape_to_string(t.shape()));
  if (t.dim(1) != channels) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(channels) + " channels, got " +
                     shape_to_string(t.shape()));
  }
}

template <typename T>
void require_armed(const LayerTape<T>& tape, const char* what) {
  if (!tape.armed) throw Error(std::string(what) + ": backward called without a forward tape (or tape reused)");
}

// Geometry of one strided window pass: image (channels, h, w) <-> columns
// (channels*k*k, oh*ow).
struct Window {
  std::size_t channels, h, w, k, s, p, oh, ow;
};

// Output columns [lo, hi) whose input column ox * s + kj - p lies inside the image.
std::pair<std::size_t, std::size_t> valid_columns(const Window& g, std::size_t kj) {
  const std::size_t lo = std::min(g.ow, kj >= g.p ? 0 : (g.p - kj + g.s - 1) / g.s);
  const std::size_t end = g.p + g.w;
  const std::size_t hi = kj >= end ? 0 : std::min(g.ow, (end - kj + g.s - 1) / g.s);
  return {lo, std::max(lo, hi)};
}

// Row r of the column matrix starts at col + r * ld.
template <typename T>
void im2col(const T* image, const Window& g, T* col, std::size_t ld) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t ki = 0; ki < g.k; ++ki) {
    // output rows [ylo, yhi) read image rows inside the input
    const std::size_t ylo = std::min(g.oh, ki >= g.p ? 0 : (g.p - ki + g.s - 1) / g.s);
    const std::size_t yhi = std::max(ylo, ki >= g.p + g.h ? 0 : std::min(g.oh, (g.p + g.h - ki + g.s - 1) / g.s));
    for (std::size_t kj = 0; kj < g.k; ++kj) {
      const auto [lo, hi] = valid_columns(g, kj);
      const bool padded = ylo > 0 || yhi < g.oh || lo > 0 || hi < g.ow;
      for (std::size_t c = 0; c < g.channels; ++c) {
        const T* src = image + c * g.h * g.w;
        T* row = col + ((c * g.k + ki) * g.k + kj) * ld;
        if (padded) std::fill(row, row + plane, T{0});
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const T* line = src + (oy * g.s + ki - g.p) * g.w;
          T* dst = row + oy * g.ow;
          if (g.s == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = line[ox + kj - g.p];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = line[ox * g.s + kj - g.p];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into a zero-initialized image.
template <typename T>
void col2im(const T* col, const Window& g, T* image, std::size_t ld) {
  for (std::size_t ki = 0; ki < g.k; ++ki) {
    const std::size_t ylo = std::min(g.oh, ki >= g.p ? 0 : (g.p - ki + g.s - 1) / g.s);
    const std::size_t yhi = std::max(ylo, ki >= g.p + g.h ? 0 : std::min(g.oh, (g.p + g.h - ki + g.s - 1) / g.s));
    for (std::size_t kj = 0; kj < g.k; ++kj) {
      const auto [lo, hi] = valid_columns(g, kj);
      for (std::size_t c = 0; c < g.channels; ++c) {
        T* dst = image + c * g.h * g.w;
        const T* row = col + ((c * g.k + ki) * g.k + kj) * ld;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          T* line = dst + (oy * g.s + ki - g.p) * g.w;
          const T* src = row + oy * g.ow;
          if (g.s == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) line[ox + kj - g.p] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) line[ox * g.s + kj - g.p] += src[ox];
          }
        }
      }
    }
  }
}

// Samples [b0, b0 + nb) of an [N, C, plane] tensor as a [C, nb * plane] matrix and back.
template <typename T>
void gather_samples(const T* src, std::size_t b0, std::size_t nb, std::size_t channels, std::size_t plane, T* dst) {
  const std::size_t ld = nb * plane;
  for (std::size_t j = 0; j < nb; ++j) {
    const T* s = src + (b0 + j) * channels * plane;
    for (std::size_t c = 0; c < channels; ++c) std::copy_n(s + c * plane, plane, dst + c * ld + j * plane);
  }
}

template <typename T>
void scatter_samples(const T* src, std::size_t b0, std::size_t nb, std::size_t channels, std::size_t plane, T* dst) {
  const std::size_t ld = nb * plane;
  for (std::size_t j = 0; j < nb; ++j) {
    T* d = dst + (b0 + j) * channels * plane;
    for (std::size_t c = 0; c < channels; ++c) std::copy_n(src + c * ld + j * plane, plane, d + c * plane);
  }
}

// Samples per GEMM: enough columns to keep the matrix kernels efficient.
constexpr std::size_t kGemmColumns = 256;

std::size_t samples_per_chunk(std::size_t plane, std::size_t n) {
  return std::clamp<std::size_t>((kGemmColumns + plane - 1) / plane, 1, std::max<std::size_t>(n, 1));
}

template <typename T>
using Buffer = std::vector<T, DefaultInitAllocator<T>>;

bool is_pointwise(const Window& g) { return g.k == 1 && g.s == 1 && g.p == 0; }

// Column matrix of samples [b0, b0 + nb); a single pointwise sample is used in place.
template <typename T>
const T* columns(const T* images, const Window& g, std::size_t b0, std::size_t nb, T* col) {
  const std::size_t image = g.channels * g.h * g.w, plane = g.oh * g.ow;
  if (nb == 1 && is_pointwise(g)) return images + b0 * image;
  for (std::size_t j = 0; j < nb; ++j) im2col(images + (b0 + j) * image, g, col + j * plane, nb * plane);
  return col;
}

// [C, nb * plane] view of samples [b0, b0 + nb); a single sample is used in place.
template <typename T>
const T* gathered(const T* src, std::size_t b0, std::size_t nb, std::size_t channels, std::size_t plane, T* buffer) {
  if (nb == 1) return src + b0 * channels * plane;
  gather_samples(src, b0, nb, channels, plane, buffer);
  return buffer;
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (kernel == 0 || stride == 0) throw GeometryError("kernel and stride must be positive");
  if (in == 0 || in + 2 * padding < kernel) {
    throw GeometryError("invalid convolution geometry: input " + std::to_string(in) + " with padding " +
                        std::to_string(padding) + " is smaller than kernel " + std::to_string(kernel));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

std::size_t conv_transpose_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (kernel == 0 || stride == 0 || in == 0) throw GeometryError("kernel, stride and input must be positive");
  const long out = static_cast<long>((in - 1) * stride + kernel) - 2 * static_cast<long>(padding);
  if (out < 1) {
    throw GeometryError("invalid transposed convolution geometry: input " + std::to_string(in) + " k" +
                        std::to_string(kernel) + "s" + std::to_string(stride) + "p" + std::to_string(padding));
  }
  return static_cast<std::size_t>(out);
}

Shape conv_weight_shape(const ConvSpec& spec) {
  return {spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
}

Shape conv_transpose_weight_shape(const ConvSpec& spec) {
  return {spec.in_channels, spec.out_channels, spec.kernel, spec.kernel};
}

// ---------------------------------------------------------------- conv2d

template <typename T>
Forward<T> conv2d_forward(Tensor<T> input, const ConvSpec& spec, const Tensor<T>& weight) {
  validate_spec(spec);
  require_nchw(input, spec.in_channels, "conv2d");
  require_same_shape(weight.shape(), conv_weight_shape(spec), "conv2d weight");
  const std::size_t n = input.dim(0), h = input.dim(2), w = input.dim(3);
  const Window g{spec.in_channels, h, w, spec.kernel, spec.stride, spec.padding,
                 conv_output_size(h, spec.kernel, spec.stride, spec.padding),
                 conv_output_size(w, spec.kernel, spec.stride, spec.padding)};
  const std::size_t rows = spec.in_channels * spec.kernel * spec.kernel;
  const std::size_t plane = g.oh * g.ow;
  const std::size_t chunk = samples_per_chunk(plane, n);

  Tensor<T> out({n, spec.out_channels, g.oh, g.ow}, uninitialized);
  ConstMatMap<T> wmat(weight.data(), spec.out_channels, rows);
  Buffer<T> col(rows * chunk * plane), y(spec.out_channels * chunk * plane);
  for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
    const std::size_t nb = std::min(chunk, n - b0), cols = nb * plane;
    const T* c = columns(input.data(), g, b0, nb, col.data());
    T* dst = nb == 1 ? out.data() + b0 * spec.out_channels * plane : y.data();
    MatMap<T>(dst, spec.out_channels, cols).noalias() = wmat * ConstMatMap<T>(c, rows, cols);
    if (nb > 1) scatter_samples(y.data(), b0, nb, spec.out_channels, plane, out.data());
  }
  LayerTape<T> tape;
  tape.saved.push_back(std::move(input));
  tape.armed = true;
  return {std::move(out), std::move(tape)};
}

template <typename T>
ConvGrads<T> conv2d_backward(LayerTape<T>&& tape, const ConvSpec& spec, const Tensor<T>& weight,
                             const Tensor<T>& grad_output) {
  require_armed(tape, "conv2d_backward");
  Tensor<T> input = std::move(tape.saved.at(0));
  tape = {};
  const std::size_t n = input.dim(0), h = input.dim(2), w = input.dim(3);
  const Window g{spec.in_channels, h, w, spec.kernel, spec.stride, spec.padding,
                 conv_output_size(h, spec.kernel, spec.stride, spec.padding),
                 conv_output_size(w, spec.kernel, spec.stride, spec.padding)};
  require_same_shape(grad_output.shape(), {n, spec.out_channels, g.oh, g.ow}, "conv2d_backward grad");
  const std::size_t rows = spec.in_channels * spec.kernel * spec.kernel;
  const std::size_t plane = g.oh * g.ow;
  const std::size_t image = spec.in_channels * h * w;
  const std::size_t chunk = samples_per_chunk(plane, n);

  ConvGrads<T> grads{Tensor<T>(input.shape(), uninitialized), Tensor<T>(weight.shape())};
  ConstMatMap<T> wmat(weight.data(), spec.out_channels, rows);
  MatMap<T> dw(grads.weight.data(), spec.out_channels, rows);
  Buffer<T> col(rows * chunk * plane), dy(spec.out_channels * chunk * plane);
  for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
    const std::size_t nb = std::min(chunk, n - b0), cols = nb * plane;
    ConstMatMap<T> cmat(columns(input.data(), g, b0, nb, col.data()), rows, cols);
    ConstMatMap<T> dymat(gathered(grad_output.data(), b0, nb, spec.out_channels, plane, dy.data()), spec.out_channels,
                         cols);
    dw.noalias() += dymat * cmat.transpose();
    T* dimage = grads.input.data() + b0 * image;
    if (nb == 1 && is_pointwise(g)) {
      MatMap<T>(dimage, rows, cols).noalias() = wmat.transpose() * dymat;
      continue;
    }
    MatMap<T>(col.data(), rows, cols).noalias() = wmat.transpose() * dymat;
    std::fill_n(dimage, nb * image, T{0});
    for (std::size_t j = 0; j < nb; ++j) col2im(col.data() + j * plane, g, dimage + j * image, cols);
  }
  return grads;
}

// ---------------------------------------------------------------- conv2d transpose

template <typename T>
Forward<T> conv2d_transpose_forward(Tensor<T> input, const ConvSpec& spec, const Tensor<T>& weight) {
  validate_spec(spec);
  require_nchw(input, spec.in_channels, "conv2d_transpose");
  require_same_shape(weight.shape(), conv_transpose_weight_shape(spec), "conv2d_transpose weight");
  const std::size_t n = input.dim(0), ih = input.dim(2), iw = input.dim(3);
  const std::size_t oh = conv_transpose_output_size(ih, spec.kernel, spec.stride, spec.padding);
  const std::size_t ow = conv_transpose_output_size(iw, spec.kernel, spec.stride, spec.padding);
  // The output image is the "input" side of the adjoint convolution.
  const Window g{spec.out_channels, oh, ow, spec.kernel, spec.stride, spec.padding, ih, iw};
  if (conv_output_size(oh, g.k, g.s, g.p) != ih || conv_output_size(ow, g.k, g.s, g.p) != iw) {
    throw GeometryError("transposed convolution geometry not invertible: " + geometry_string(spec));
  }
  const std::size_t rows = spec.out_channels * spec.kernel * spec.kernel;
  const std::size_t plane = ih * iw;
  const std::size_t image = spec.out_channels * oh * ow;
  const std::size_t chunk = samples_per_chunk(plane, n);

  Tensor<T> out({n, spec.out_channels, oh, ow}, T{0});
  ConstMatMap<T> wmat(weight.data(), spec.in_channels, rows);
  Buffer<T> col(rows * chunk * plane), x(spec.in_channels * chunk * plane);
  for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
    const std::size_t nb = std::min(chunk, n - b0), cols = nb * plane;
    ConstMatMap<T> xmat(gathered(input.data(), b0, nb, spec.in_channels, plane, x.data()), spec.in_channels, cols);
    MatMap<T>(col.data(), rows, cols).noalias() = wmat.transpose() * xmat;
    for (std::size_t j = 0; j < nb; ++j) col2im(col.data() + j * plane, g, out.data() + (b0 + j) * image, cols);
  }
  LayerTape<T> tape;
  tape.saved.push_back(std::move(input));
  tape.armed = true;
  return {std::move(out), std::move(tape)};
}

template <typename T>
ConvGrads<T> conv2d_transpose_backward(LayerTape<T>&& tape, const ConvSpec& spec, const Tensor<T>& weight,
                                       const Tensor<T>& grad_output) {
  require_armed(tape, "conv2d_transpose_backward");
  Tensor<T> input = std::move(tape.saved.at(0));
  tape = {};
  const std::size_t n = input.dim(0), ih = input.dim(2), iw = input.dim(3);
  const std::size_t oh = conv_transpose_output_size(ih, spec.kernel, spec.stride, spec.padding);
  const std::size_t ow = conv_transpose_output_size(iw, spec.kernel, spec.stride, spec.padding);
  require_same_shape(grad_output.shape(), {n, spec.out_channels, oh, ow}, "conv2d_transpose_backward grad");
  const Window g{spec.out_channels, oh, ow, spec.kernel, spec.stride, spec.padding, ih, iw};
  const std::size_t rows = spec.out_channels * spec.kernel * spec.kernel;
  const std::size_t plane = ih * iw;
  const std::size_t chunk = samples_per_chunk(plane, n);

  ConvGrads<T> grads{Tensor<T>(input.shape(), uninitialized), Tensor<T>(weight.shape())};
  ConstMatMap<T> wmat(weight.data(), spec.in_channels, rows);
  MatMap<T> dw(grads.weight.data(), spec.in_channels, rows);
  Buffer<T> col(rows * chunk * plane), x(spec.in_channels * chunk * plane), dx(spec.in_channels * chunk * plane);
  for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
    const std::size_t nb = std::min(chunk, n - b0), cols = nb * plane;
    ConstMatMap<T> cmat(columns(grad_output.data(), g, b0, nb, col.data()), rows, cols);
    ConstMatMap<T> xmat(gathered(input.data(), b0, nb, spec.in_channels, plane, x.data()), spec.in_channels, cols);
    dw.noalias() += xmat * cmat.transpose();
    T* dst = nb == 1 ? grads.input.data() + b0 * spec.in_channels * plane : dx.data();
    MatMap<T>(dst, spec.in_channels, cols).noalias() = wmat * cmat;
    if (nb > 1) scatter_samples(dx.data(), b0, nb, spec.in_channels, plane, grads.input.data());
  }
  return grads;
}

// ---------------------------------------------------------------- batch norm

template <typename T>
Forward<T> batch_norm_forward(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                              RunningStats<T>& stats, Mode mode, const BatchNormOptions& options) {
  if (input.rank() != 4) throw ShapeError("batch_norm: expected [N,C,H,W], got " + shape_to_string(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  require_same_shape(scale.shape(), {c}, "batch_norm scale");
  require_same_shape(shift.shape(), {c}, "batch_norm shift");
  require_same_shape(stats.mean.shape(), {c}, "batch_norm running mean");
  require_same_shape(stats.var.shape(), {c}, "batch_norm running var");
  const std::size_t count = n * plane;
  if (mode == Mode::train && count == 0) throw Error("batch_norm: empty batch in train mode");

  Tensor<T> normalized(input.shape(), uninitialized);
  Tensor<T> inv_std({c});
  Tensor<T> out(input.shape(), uninitialized);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, var = 0.0;
    if (mode == Mode::train) {
      for (std::size_t b = 0; b < n; ++b) {
        const T* x = input.data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) mean += x[i];
      }
      mean /= static_cast<double>(count);
      for (std::size_t b = 0; b < n; ++b) {
        const T* x = input.data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = x[i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(count);
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      stats.mean[ch] = static_cast<T>((1.0 - options.momentum) * stats.mean[ch] + options.momentum * mean);
      stats.var[ch] = static_cast<T>((1.0 - options.momentum) * stats.var[ch] + options.momentum * unbiased);
    } else {
      mean = stats.mean[ch];
      var = stats.var[ch];
    }
    const double istd = 1.0 / std::sqrt(var + options.epsilon);
    inv_std[ch] = static_cast<T>(istd);
    const T m = static_cast<T>(mean), is = static_cast<T>(istd), gamma = scale[ch], beta = shift[ch];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * plane;
      const T* x = input.data() + off;
      T* xh = normalized.data() + off;
      T* y = out.data() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (x[i] - m) * is;
        y[i] = gamma * xh[i] + beta;
      }
    }
  }
  LayerTape<T> tape;
  tape.saved.push_back(std::move(normalized));
  tape.saved.push_back(std::move(inv_std));
  tape.mode = mode;
  tape.armed = true;
  return {std::move(out), std::move(tape)};
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(LayerTape<T>&& tape, const Tensor<T>& scale, const Tensor<T>& grad_output) {
  require_armed(tape, "batch_norm_backward");
  const Tensor<T> normalized = std::move(tape.saved.at(0));
  const Tensor<T> inv_std = std::move(tape.saved.at(1));
  const Mode mode = tape.mode;
  tape = {};
  require_same_shape(grad_output.shape(), normalized.shape(), "batch_norm_backward grad");
  const std::size_t n = normalized.dim(0), c = normalized.dim(1), plane = normalized.dim(2) * normalized.dim(3);
  const double count = static_cast<double>(n * plane);

  BatchNormGrads<T> grads{Tensor<T>(normalized.shape(), uninitialized), Tensor<T>({c}), Tensor<T>({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * plane;
      const T* dy = grad_output.data() + off;
      const T* xh = normalized.data() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xh += static_cast<double>(dy[i]) * xh[i];
      }
    }
    grads.shift[ch] = static_cast<T>(sum_dy);
    grads.scale[ch] = static_cast<T>(sum_dy_xh);
    const double k = static_cast<double>(scale[ch]) * inv_std[ch];
    const bool train = mode == Mode::train;
    const T kk = static_cast<T>(k);
    const T shift_dy = train ? static_cast<T>(k * sum_dy / count) : T{0};
    const T slope = train ? static_cast<T>(k * sum_dy_xh / count) : T{0};
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * plane;
      const T* dy = grad_output.data() + off;
      const T* xh = normalized.data() + off;
      T* dx = grads.input.data() + off;
      for (std::size_t i = 0; i < plane; ++i) dx[i] = kk * dy[i] - shift_dy - slope * xh[i];
    }
  }
  return grads;
}

// ---------------------------------------------------------------- activations

template <typename T>
Forward<T> relu_forward(const Tensor<T>& input) {
  Tensor<T> out(input.shape(), uninitialized);
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
  LayerTape<T> tape;
  tape.saved.push_back(out);
  tape.armed = true;
  return {std::move(out), std::move(tape)};
}

template <typename T>
Tensor<T> relu_backward(LayerTape<T>&& tape, const Tensor<T>& grad_output) {
  require_armed(tape, "relu_backward");
  Tensor<T> out = std::move(tape.saved.at(0));
  tape = {};
  require_same_shape(grad_output.shape(), out.shape(), "relu_backward grad");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > T{0} ? grad_output[i] : T{0};
  return out;
}

template <typename T>
Forward<T> sigmoid_forward(const Tensor<T>& input) {
  Tensor<T> out(input.shape(), uninitialized);
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T x = input[i];
    // branch keeps exp() from overflowing for large |x|
    out[i] = x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
  }
  LayerTape<T> tape;
  tape.saved.push_back(out);
  tape.armed = true;
  return {std::move(out), std::move(tape)};
}

template <typename T>
Tensor<T> sigmoid_backward(LayerTape<T>&& tape, const Tensor<T>& grad_output) {
  require_armed(tape, "sigmoid_backward");
  Tensor<T> y = std::move(tape.saved.at(0));
  tape = {};
  require_same_shape(grad_output.shape(), y.shape(), "sigmoid_backward grad");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = grad_output[i] * y[i] * (T{1} - y[i]);
  return y;
}

// ---------------------------------------------------------------- concat

template <typename T>
Forward<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Tensor<T>& first = *parts.front();
  if (first.rank() != 4) throw ShapeError("concat_channels: expected [N,C,H,W], got " + shape_to_string(first.shape()));
  const std::size_t n = first.dim(0), h = first.dim(2), w = first.dim(3);
  std::size_t total = 0;
  LayerTape<T> tape;
  for (const auto* p : parts) {
    if (p->rank() != 4 || p->dim(0) != n || p->dim(2) != h || p->dim(3) != w) {
      throw ShapeError("concat_channels: " + shape_to_string(p->shape()) + " does not match " +
                       shape_to_string(first.shape()));
    }
    tape.sizes.push_back(p->dim(1));
    total += p->dim(1);
  }
  Tensor<T> out({n, total, h, w}, uninitialized);
  const std::size_t plane = h * w;
  for (std::size_t b = 0; b < n; ++b) {
    T* dst = out.data() + b * total * plane;
    for (const auto* p : parts) {
      const std::size_t len = p->dim(1) * plane;
      std::copy_n(p->data() + b * len, len, dst);
      dst += len;
    }
  }
  tape.armed = true;
  return {std::move(out), std::move(tape)};
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& input, const std::vector<std::size_t>& channels) {
  if (input.rank() != 4) throw ShapeError("split_channels: expected [N,C,H,W], got " + shape_to_string(input.shape()));
  std::size_t total = 0;
  for (auto c : channels) total += c;
  if (total != input.dim(1)) {
    throw ShapeError("split_channels: channel counts sum to " + std::to_string(total) + " but input has " +
                     std::to_string(input.dim(1)));
  }
  const std::size_t n = input.dim(0), plane = input.dim(2) * input.dim(3);
  std::vector<Tensor<T>> out;
  out.reserve(channels.size());
  for (auto c : channels) out.emplace_back(Shape{n, c, input.dim(2), input.dim(3)}, uninitialized);
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = input.data() + b * total * plane;
    for (std::size_t k = 0; k < channels.size(); ++k) {
      const std::size_t len = channels[k] * plane;
      std::copy_n(src, len, out[k].data() + b * len);
      src += len;
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> concat_channels_backward(LayerTape<T>&& tape, const Tensor<T>& grad_output) {
  require_armed(tape, "concat_channels_backward");
  const auto sizes = std::move(tape.sizes);
  tape = {};
  return split_channels(grad_output, sizes);
}

#define FLOWSURROGATE_INSTANTIATE_LAYERS(T)                                                                    \
  template Forward<T> conv2d_forward(Tensor<T>, const ConvSpec&, const Tensor<T>&);                            \
  template ConvGrads<T> conv2d_backward(LayerTape<T>&&, const ConvSpec&, const Tensor<T>&, const Tensor<T>&);  \
  template Forward<T> conv2d_transpose_forward(Tensor<T>, const ConvSpec&, const Tensor<T>&);                  \
  template ConvGrads<T> conv2d_transpose_backward(LayerTape<T>&&, const ConvSpec&, const Tensor<T>&,           \
                                                  const Tensor<T>&);                                           \
  template Forward<T> batch_norm_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, RunningStats<T>&, \
                                         Mode, const BatchNormOptions&);                                       \
  template BatchNormGrads<T> batch_norm_backward(LayerTape<T>&&, const Tensor<T>&, const Tensor<T>&);          \
  template Forward<T> relu_forward(const Tensor<T>&);                                                          \
  template Tensor<T> relu_backward(LayerTape<T>&&, const Tensor<T>&);                                          \
  template Forward<T> sigmoid_forward(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid_backward(LayerTape<T>&&, const Tensor<T>&);                                       \
  template Forward<T> concat_channels(const std::vector<const Tensor<T>*>&);                                   \
  template std::vector<Tensor<T>> concat_channels_backward(LayerTape<T>&&, const Tensor<T>&);                  \
  template std::vector<Tensor<T>> split_channels(const Tensor<T>&, const std::vector<std::size_t>&);

FLOWSURROGATE_INSTANTIATE_LAYERS(float)
FLOWSURROGATE_INSTANTIATE_LAYERS(double)

#undef FLOWSURROGATE_INSTANTIATE_LAYERS

}  // namespace flowsurrogate
