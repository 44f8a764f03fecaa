#pragma once

// Forward and backward kernels for the dense operators used by the toy
// network. Everything here is a pure function of its arguments; the autodiff
// layer wraps these kernels and owns the bookkeeping.

#include <type_traits>
#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gun/tensor.hpp"

namespace gun {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 0;
};

template <typename T>
struct ConvParams {
  Tensor<T> kernel;               // [out_ch, in_ch, kh, kw]
  std::optional<Tensor<T>> bias;  // [out_ch]
  ConvGeometry geometry;
};

// floor((in + 2*padding - dilation*(k-1) - 1) / stride) + 1, rejected if < 1.
inline std::size_t conv_output_extent(std::size_t in, std::size_t k,
                                      const ConvGeometry& g) {
  if (g.stride == 0 || g.dilation == 0) {
    throw ShapeError("conv2d: stride and dilation must be positive");
  }
  const long long span = static_cast<long long>(in) +
                         2 * static_cast<long long>(g.padding) -
                         static_cast<long long>(g.dilation) *
                             (static_cast<long long>(k) - 1) -
                         1;
  if (span < 0) {
    throw ShapeError("conv2d: non-positive output extent (input " +
                     std::to_string(in) + ", kernel " + std::to_string(k) +
                     ", dilation " + std::to_string(g.dilation) +
                     ", padding " + std::to_string(g.padding) + ")");
  }
  return static_cast<std::size_t>(span) / g.stride + 1;
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic,
                                Eigen::RowMajor>;

struct ConvLayout {
  std::size_t batch, in_ch, in_h, in_w;
  std::size_t out_ch, kh, kw, out_h, out_w;
  ConvGeometry g;

  std::size_t patch() const { return in_ch * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && g.stride == 1 && g.padding == 0;
  }
};

template <typename T>
ConvLayout conv_layout(const Tensor<T>& input, const Tensor<T>& kernel,
                       const Tensor<T>* bias, const ConvGeometry& g) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (input.dim(1) != kernel.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) +
                     " channels but kernel expects " +
                     std::to_string(kernel.dim(1)) + " (input " +
                     to_string(input.shape()) + ", kernel " +
                     to_string(kernel.shape()) + ")");
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != kernel.dim(0))) {
    throw ShapeError("conv2d: bias shape " + to_string(bias->shape()) +
                     " does not match " + std::to_string(kernel.dim(0)) +
                     " output channels");
  }
  ConvLayout l{};
  l.batch = input.dim(0);
  l.in_ch = input.dim(1);
  l.in_h = input.dim(2);
  l.in_w = input.dim(3);
  l.out_ch = kernel.dim(0);
  l.kh = kernel.dim(2);
  l.kw = kernel.dim(3);
  l.g = g;
  l.out_h = conv_output_extent(l.in_h, l.kh, g);
  l.out_w = conv_output_extent(l.in_w, l.kw, g);
  return l;
}

// Unfold one sample into a [in_ch*kh*kw, out_h*out_w] column matrix.
template <typename T>
void im2col(const T* img, const ConvLayout& l, T* col) {
  const long pad = static_cast<long>(l.g.padding);
  const std::size_t P = l.pixels();
  for (std::size_t c = 0; c < l.in_ch; ++c) {
    const T* plane = img + c * l.in_h * l.in_w;
    for (std::size_t ky = 0; ky < l.kh; ++ky) {
      for (std::size_t kx = 0; kx < l.kw; ++kx) {
        T* row = col + ((c * l.kh + ky) * l.kw + kx) * P;
        for (std::size_t oy = 0; oy < l.out_h; ++oy) {
          const long iy = static_cast<long>(oy * l.g.stride + ky * l.g.dilation) - pad;
          T* dst = row + oy * l.out_w;
          if (iy < 0 || iy >= static_cast<long>(l.in_h)) {
            std::fill(dst, dst + l.out_w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * l.in_w;
          for (std::size_t ox = 0; ox < l.out_w; ++ox) {
            const long ix = static_cast<long>(ox * l.g.stride + kx * l.g.dilation) - pad;
            dst[ox] = (ix < 0 || ix >= static_cast<long>(l.in_w))
                          ? T{0}
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulate columns back into the image.
template <typename T>
void col2im(const T* col, const ConvLayout& l, T* img) {
  const long pad = static_cast<long>(l.g.padding);
  const std::size_t P = l.pixels();
  for (std::size_t c = 0; c < l.in_ch; ++c) {
    T* plane = img + c * l.in_h * l.in_w;
    for (std::size_t ky = 0; ky < l.kh; ++ky) {
      for (std::size_t kx = 0; kx < l.kw; ++kx) {
        const T* row = col + ((c * l.kh + ky) * l.kw + kx) * P;
        for (std::size_t oy = 0; oy < l.out_h; ++oy) {
          const long iy = static_cast<long>(oy * l.g.stride + ky * l.g.dilation) - pad;
          if (iy < 0 || iy >= static_cast<long>(l.in_h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * l.in_w;
          const T* src = row + oy * l.out_w;
          for (std::size_t ox = 0; ox < l.out_w; ++ox) {
            const long ix = static_cast<long>(ox * l.g.stride + kx * l.g.dilation) - pad;
            if (ix < 0 || ix >= static_cast<long>(l.in_w)) continue;
            dst[static_cast<std::size_t>(ix)] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation with zero padding. Accumulation order is fixed by the
// im2col layout, so results do not depend on threading.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const std::type_identity_t<Tensor<T>>* bias, const ConvGeometry& g) {
  using Mat = detail::RowMatrix<T>;
  const auto l = detail::conv_layout(input, kernel, bias, g);
  Tensor<T> out({l.batch, l.out_ch, l.out_h, l.out_w});
  const std::size_t K = l.patch(), P = l.pixels();
  std::vector<T> col(l.pointwise() ? 0 : K * P);
  Eigen::Map<const Mat> w(kernel.ptr(), l.out_ch, K);
  for (std::size_t n = 0; n < l.batch; ++n) {
    const T* img = input.ptr() + n * l.in_ch * l.in_h * l.in_w;
    const T* cols = img;
    if (!l.pointwise()) {
      detail::im2col(img, l, col.data());
      cols = col.data();
    }
    Eigen::Map<const Mat> cm(cols, K, P);
    Eigen::Map<Mat> om(out.ptr() + n * l.out_ch * P, l.out_ch, P);
    om.noalias() = w * cm;
    if (bias) {
      for (std::size_t o = 0; o < l.out_ch; ++o) {
        om.row(o).array() += (*bias)[o];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& params) {
  return conv2d(input, params.kernel,
                params.bias ? &*params.bias : nullptr, params.geometry);
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  Tensor<T> bias;  // empty when the convolution has no bias
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel,
                             bool has_bias, const ConvGeometry& g,
                             const Tensor<T>& grad_out) {
  using Mat = detail::RowMatrix<T>;
  const auto l = detail::conv_layout<T>(input, kernel, nullptr, g);
  if (grad_out.shape() != Shape{l.batch, l.out_ch, l.out_h, l.out_w}) {
    throw ShapeError("conv2d backward: gradient shape " +
                     to_string(grad_out.shape()) + " does not match output");
  }
  const std::size_t K = l.patch(), P = l.pixels();
  ConvGrads<T> grads{Tensor<T>::zeros_like(input),
                     Tensor<T>::zeros_like(kernel), Tensor<T>{}};
  if (has_bias) grads.bias = Tensor<T>({l.out_ch});

  std::vector<T> col(l.pointwise() ? 0 : K * P);
  std::vector<T> dcol(l.pointwise() ? 0 : K * P);
  Eigen::Map<const Mat> w(kernel.ptr(), l.out_ch, K);
  Eigen::Map<Mat> dw(grads.kernel.ptr(), l.out_ch, K);
  for (std::size_t n = 0; n < l.batch; ++n) {
    const T* img = input.ptr() + n * l.in_ch * l.in_h * l.in_w;
    T* dimg = grads.input.ptr() + n * l.in_ch * l.in_h * l.in_w;
    const T* cols = img;
    if (!l.pointwise()) {
      detail::im2col(img, l, col.data());
      cols = col.data();
    }
    Eigen::Map<const Mat> cm(cols, K, P);
    Eigen::Map<const Mat> go(grad_out.ptr() + n * l.out_ch * P, l.out_ch, P);
    dw.noalias() += go * cm.transpose();
    if (has_bias) {
      // Plain loop: Eigen's vectorized sum picks its order from the pointer
      // alignment, which would make reruns differ in the last bit.
      for (std::size_t o = 0; o < l.out_ch; ++o) {
        const T* row = grad_out.ptr() + (n * l.out_ch + o) * P;
        T acc = 0;
        for (std::size_t i = 0; i < P; ++i) acc += row[i];
        grads.bias[o] += acc;
      }
    }
    if (l.pointwise()) {
      Eigen::Map<Mat> dm(dimg, K, P);
      dm.noalias() = w.transpose() * go;
    } else {
      Eigen::Map<Mat> dm(dcol.data(), K, P);
      dm.noalias() = w.transpose() * go;
      detail::col2im(dcol.data(), l, dimg);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
struct ChannelStats {
  Tensor<T> mean;      // [C]
  Tensor<T> variance;  // [C], biased
};

template <typename T>
ChannelStats<T> channel_moments(const Tensor<T>& x) {
  detail::require_rank(x, 4, "channel_moments");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const T count = static_cast<T>(N * HW);
  ChannelStats<T> s{Tensor<T>({C}), Tensor<T>({C})};
  for (std::size_t c = 0; c < C; ++c) {
    T sum = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.ptr() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) sum += p[i];
    }
    const T mean = sum / count;
    T sq = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.ptr() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T d = p[i] - mean;
        sq += d * d;
      }
    }
    s.mean[c] = mean;
    s.variance[c] = sq / count;
  }
  return s;
}

// out = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
template <typename T>
Tensor<T> scale_shift_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                           const Tensor<T>& beta, const ChannelStats<T>& stats,
                           T epsilon) {
  detail::require_rank(x, 4, "scale_shift_norm");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (const Tensor<T>* t : {&gamma, &beta, &stats.mean, &stats.variance}) {
    if (t->rank() != 1 || t->dim(0) != C) {
      throw ShapeError("scale_shift_norm: per-channel parameter of shape " +
                       to_string(t->shape()) + " does not match " +
                       std::to_string(C) + " channels");
    }
  }
  Tensor<T> out(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T inv_std = T{1} / std::sqrt(stats.variance[c] + epsilon);
    const T scale = gamma[c] * inv_std;
    const T shift = beta[c] - stats.mean[c] * scale;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.ptr() + (n * C + c) * HW;
      T* q = out.ptr() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) q[i] = p[i] * scale + shift;
    }
  }
  return out;
}

template <typename T>
struct NormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

// Backward of scale_shift_norm. With batch statistics the mean and variance
// depend on the input; with frozen statistics they are constants.
template <typename T>
NormGrads<T> scale_shift_norm_backward(const Tensor<T>& x,
                                       const Tensor<T>& gamma,
                                       const ChannelStats<T>& stats,
                                       T epsilon, bool batch_statistics,
                                       const Tensor<T>& grad_out) {
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const T count = static_cast<T>(N * HW);
  NormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({C}), Tensor<T>({C})};
  for (std::size_t c = 0; c < C; ++c) {
    const T inv_std = T{1} / std::sqrt(stats.variance[c] + epsilon);
    const T mean = stats.mean[c];
    T sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.ptr() + (n * C + c) * HW;
      const T* d = grad_out.ptr() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        sum_dy += d[i];
        sum_dy_xhat += d[i] * (p[i] - mean) * inv_std;
      }
    }
    g.gamma[c] = sum_dy_xhat;
    g.beta[c] = sum_dy;
    const T k = gamma[c] * inv_std;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.ptr() + (n * C + c) * HW;
      const T* d = grad_out.ptr() + (n * C + c) * HW;
      T* q = g.input.ptr() + (n * C + c) * HW;
      if (batch_statistics) {
        for (std::size_t i = 0; i < HW; ++i) {
          const T xhat = (p[i] - mean) * inv_std;
          q[i] = k * (d[i] - sum_dy / count - xhat * sum_dy_xhat / count);
        }
      } else {
        for (std::size_t i = 0; i < HW; ++i) q[i] = k * d[i];
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise and structural operators

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] < T{0} ? T{0} : x[i];
  return out;
}

// Subgradient at 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? grad_out[i] : T{0};
  return out;
}

enum class MergeMode { sum, concat };

inline const char* to_string(MergeMode m) {
  return m == MergeMode::sum ? "sum" : "concat";
}

template <typename T>
Tensor<T> merge(const Tensor<T>& a, const Tensor<T>& b, MergeMode mode) {
  if (mode == MergeMode::sum) {
    if (a.shape() != b.shape()) {
      throw ShapeError(std::string("merge(sum): incompatible shapes ") +
                       to_string(a.shape()) + " and " + to_string(b.shape()));
    }
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
  }
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError(std::string("merge(concat): incompatible shapes ") +
                     to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::size_t HW = a.dim(2) * a.dim(3);
  Tensor<T> out({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.ptr() + n * Ca * HW, Ca * HW, out.ptr() + n * (Ca + Cb) * HW);
    std::copy_n(b.ptr() + n * Cb * HW, Cb * HW,
                out.ptr() + (n * (Ca + Cb) + Ca) * HW);
  }
  return out;
}

// Channel slice [begin, begin + count) of a 4-D tensor.
template <typename T>
Tensor<T> channel_slice(const Tensor<T>& x, std::size_t begin,
                        std::size_t count) {
  detail::require_rank(x, 4, "channel_slice");
  if (begin + count > x.dim(1) || count == 0) {
    throw ShapeError("channel_slice: range out of bounds for " +
                     to_string(x.shape()));
  }
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out({N, count, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(x.ptr() + (n * C + begin) * HW, count * HW,
                out.ptr() + n * count * HW);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plain bilinear resampling (half-pixel centers, border replication). Works
// in both directions; used for branch input subsampling, fusion upsampling
// and the baseline head.

namespace detail {

struct LinearTap {
  std::size_t i0, i1;
  double w0, w1;
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double hi = static_cast<double>(in - 1);
  for (std::size_t t = 0; t < out; ++t) {
    double s = (static_cast<double>(t) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, hi);
    const double f = std::floor(s);
    const auto i0 = static_cast<std::size_t>(f);
    taps[t] = {i0, std::min(i0 + 1, in - 1), 1.0 - (s - f), s - f};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h,
                          std::size_t out_w) {
  detail::require_rank(x, 4, "resize_bilinear");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out({N, C, out_h, out_w});
  const auto ty = detail::linear_taps(H, out_h);
  const auto tx = detail::linear_taps(W, out_w);
  std::vector<std::size_t> x0(out_w), x1(out_w);
  std::vector<T> wx0(out_w), wx1(out_w);
  for (std::size_t j = 0; j < out_w; ++j) {
    x0[j] = tx[j].i0;
    x1[j] = tx[j].i1;
    wx0[j] = static_cast<T>(tx[j].w0);
    wx1[j] = static_cast<T>(tx[j].w1);
  }
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* src = x.ptr() + nc * H * W;
    T* dst = out.ptr() + nc * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T* r0 = src + ty[i].i0 * W;
      const T* r1 = src + ty[i].i1 * W;
      const T wy0 = static_cast<T>(ty[i].w0), wy1 = static_cast<T>(ty[i].w1);
      T* row = dst + i * out_w;
      for (std::size_t j = 0; j < out_w; ++j) {
        row[j] = (r0[x0[j]] * wx0[j] + r0[x1[j]] * wx1[j]) * wy0 +
                 (r1[x0[j]] * wx0[j] + r1[x1[j]] * wx1[j]) * wy1;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> resize_bilinear_backward(const Shape& input_shape,
                                   const Tensor<T>& grad_out) {
  const std::size_t N = input_shape[0], C = input_shape[1];
  const std::size_t H = input_shape[2], W = input_shape[3];
  const std::size_t out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  Tensor<T> grad(input_shape);
  const auto ty = detail::linear_taps(H, out_h);
  const auto tx = detail::linear_taps(W, out_w);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* g = grad_out.ptr() + nc * out_h * out_w;
    T* dst = grad.ptr() + nc * H * W;
    for (std::size_t i = 0; i < out_h; ++i) {
      T* r0 = dst + ty[i].i0 * W;
      T* r1 = dst + ty[i].i1 * W;
      const T wy0 = static_cast<T>(ty[i].w0), wy1 = static_cast<T>(ty[i].w1);
      for (std::size_t j = 0; j < out_w; ++j) {
        const T v = g[i * out_w + j];
        const T a = static_cast<T>(tx[j].w0), b = static_cast<T>(tx[j].w1);
        r0[tx[j].i0] += v * a * wy0;
        r0[tx[j].i1] += v * b * wy0;
        r1[tx[j].i0] += v * a * wy1;
        r1[tx[j].i1] += v * b * wy1;
      }
    }
  }
  return grad;
}

// Plain nearest-neighbour resampling: source index floor((t + 0.5) * in / out).
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x, 4, "resize_nearest");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto index = [](std::size_t t, std::size_t in, std::size_t out) {
    return std::min(in - 1, (2 * t + 1) * in / (2 * out));
  };
  std::vector<std::size_t> sx(out_w);
  for (std::size_t j = 0; j < out_w; ++j) sx[j] = index(j, W, out_w);
  Tensor<T> out({N, C, out_h, out_w});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* src = x.ptr() + nc * H * W;
    T* dst = out.ptr() + nc * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T* row = src + index(i, H, out_h) * W;
      for (std::size_t j = 0; j < out_w; ++j) dst[i * out_w + j] = row[sx[j]];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

constexpr std::uint8_t kIgnoreLabel = 255;

template <typename T>
struct CrossEntropy {
  T loss = 0;
  std::size_t counted = 0;
  bool all_ignored = false;
  Tensor<T> probabilities;  // softmax of the logits, kept for backward
};

// Mean over non-ignored pixels of -log softmax(logits)[target]. `targets`
// holds N*H*W labels in row-major order.
template <typename T>
CrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits,
                                      std::span<const std::uint8_t> targets,
                                      std::uint8_t ignore_index = kIgnoreLabel) {
  detail::require_rank(logits, 4, "softmax_cross_entropy");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  const std::size_t HW = logits.dim(2) * logits.dim(3);
  if (C < 2) throw ValidationError("softmax_cross_entropy: need at least 2 classes");
  if (targets.size() != N * HW) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + to_string(logits.shape()));
  }
  CrossEntropy<T> r;
  r.probabilities = Tensor<T>(logits.shape());
  T total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < HW; ++i) {
      const T* l = logits.ptr() + n * C * HW + i;
      T* p = r.probabilities.ptr() + n * C * HW + i;
      T mx = l[0];
      for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, l[c * HW]);
      T z = 0;
      for (std::size_t c = 0; c < C; ++c) {
        p[c * HW] = std::exp(l[c * HW] - mx);
        z += p[c * HW];
      }
      for (std::size_t c = 0; c < C; ++c) p[c * HW] /= z;
      const std::uint8_t t = targets[n * HW + i];
      if (t == ignore_index) continue;
      if (t >= C) {
        throw ValidationError("softmax_cross_entropy: target " +
                              std::to_string(t) + " out of range for " +
                              std::to_string(C) + " classes");
      }
      total += std::log(z) + mx - l[t * HW];
      ++r.counted;
    }
  }
  r.all_ignored = r.counted == 0;
  r.loss = r.all_ignored ? T{0} : total / static_cast<T>(r.counted);
  return r;
}

template <typename T>
Tensor<T> softmax_cross_entropy_backward(const CrossEntropy<T>& ce,
                                         std::span<const std::uint8_t> targets,
                                         T grad_loss,
                                         std::uint8_t ignore_index = kIgnoreLabel) {
  const auto& p = ce.probabilities;
  Tensor<T> grad(p.shape());
  if (ce.all_ignored) return grad;
  const std::size_t N = p.dim(0), C = p.dim(1), HW = p.dim(2) * p.dim(3);
  const T scale = grad_loss / static_cast<T>(ce.counted);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < HW; ++i) {
      const std::uint8_t t = targets[n * HW + i];
      if (t == ignore_index) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t k = n * C * HW + c * HW + i;
        grad[k] = scale * (p[k] - (c == t ? T{1} : T{0}));
      }
    }
  }
  return grad;
}

}  // namespace gun
