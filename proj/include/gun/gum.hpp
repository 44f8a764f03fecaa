#pragma once

// Guided upsampling: a regular upsampling grid whose per-pixel source
// coordinates are shifted by a learned offset table before nearest or
// bilinear sampling. The same warp is applied to every channel.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <type_traits>
#include <string>
#include <vector>

#include "gun/tensor.hpp"

namespace gun {

enum class SampleMode { nearest, bilinear };

inline const char* to_string(SampleMode m) {
  return m == SampleMode::nearest ? "nearest" : "bilinear";
}

// Regular grid for upsampling by ratio f = out/in. Source coordinates are in
// source-pixel units with half-pixel centers: x_s = (x_t + 0.5) / f - 0.5.
// The grid is separable, so one coordinate per column and one per row.
struct SamplingGrid {
  std::size_t in_h = 0, in_w = 0;
  std::size_t out_h = 0, out_w = 0;
  double ratio = 1.0;
  std::vector<double> xs;  // per output column
  std::vector<double> ys;  // per output row

  double x(std::size_t xt) const { return xs[xt]; }
  double y(std::size_t yt) const { return ys[yt]; }
};

inline SamplingGrid make_regular_grid(std::size_t in_h, std::size_t in_w,
                                      std::size_t out_h, std::size_t out_w) {
  if (in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0) {
    throw ValidationError("make_regular_grid: extents must be positive");
  }
  if (out_h * in_w != out_w * in_h) {
    throw ValidationError(
        "make_regular_grid: inconsistent aspect ratio, " +
        std::to_string(out_h) + "/" + std::to_string(in_h) + " != " +
        std::to_string(out_w) + "/" + std::to_string(in_w));
  }
  if (out_h < in_h) {
    throw ValidationError("make_regular_grid: output must not be smaller than input");
  }
  SamplingGrid g;
  g.in_h = in_h;
  g.in_w = in_w;
  g.out_h = out_h;
  g.out_w = out_w;
  g.ratio = static_cast<double>(out_h) / static_cast<double>(in_h);
  g.xs.resize(out_w);
  g.ys.resize(out_h);
  for (std::size_t t = 0; t < out_w; ++t) {
    g.xs[t] = (static_cast<double>(t) + 0.5) / g.ratio - 0.5;
  }
  for (std::size_t t = 0; t < out_h; ++t) {
    g.ys[t] = (static_cast<double>(t) + 0.5) / g.ratio - 0.5;
  }
  return g;
}

namespace detail {

template <typename T>
void check_guided_shapes(const Tensor<T>& U, const SamplingGrid& grid,
                         const Tensor<T>* offsets) {
  require_rank(U, 4, "guided_sample input");
  if (U.dim(2) != grid.in_h || U.dim(3) != grid.in_w) {
    throw ShapeError("guided_sample: input " + to_string(U.shape()) +
                     " does not match grid source extents " +
                     std::to_string(grid.in_h) + "x" + std::to_string(grid.in_w));
  }
  if (offsets) {
    const Shape expected{U.dim(0), 2, grid.out_h, grid.out_w};
    if (offsets->shape() != expected) {
      throw ShapeError("guided_sample: offset table " +
                       to_string(offsets->shape()) + " expected " +
                       to_string(expected));
    }
  }
}

// One bilinear sample point: clamped coordinate, its two neighbours per axis
// and the hat weights max(0, 1 - |x - m|) evaluated at those neighbours.
template <typename T>
struct Axis {
  std::size_t i0, i1;
  T w0, w1;
  bool differentiable;  // inside the raster and off the integer kinks
};

template <typename T>
inline Axis<T> bilinear_axis(T coord, std::size_t extent) {
  const T hi = static_cast<T>(extent - 1);
  const bool inside = coord > T{0} && coord < hi;
  const T c = std::clamp(coord, T{0}, hi);
  const T f = std::floor(c);
  const auto i0 = static_cast<std::size_t>(f);
  Axis<T> a;
  a.i0 = i0;
  a.i1 = std::min(i0 + 1, extent - 1);
  a.w0 = T{1} - (c - f);
  a.w1 = T{1} - ((f + T{1}) - c);
  a.differentiable = inside && c != f;
  return a;
}

inline std::size_t nearest_index(double coord, std::size_t extent) {
  const double r = std::floor(coord + 0.5);
  if (r <= 0.0) return 0;
  const double hi = static_cast<double>(extent - 1);
  return r >= hi ? extent - 1 : static_cast<std::size_t>(r);
}

}  // namespace detail

// Guided nearest / bilinear sampling. `offsets` is [N, 2, H_out, W_out] with
// channel 0 the x offset p and channel 1 the y offset q, both in source-pixel
// units; nullptr means zero offsets. Out-of-range coordinates replicate the
// border.
template <typename T>
Tensor<T> guided_sample(const Tensor<T>& U, const SamplingGrid& grid,
                        const std::type_identity_t<Tensor<T>>* offsets, SampleMode mode) {
  detail::check_guided_shapes(U, grid, offsets);
  const std::size_t N = U.dim(0), C = U.dim(1), H = U.dim(2), W = U.dim(3);
  const std::size_t Ho = grid.out_h, Wo = grid.out_w;
  const std::size_t plane = H * W, oplane = Ho * Wo;
  Tensor<T> V({N, C, Ho, Wo});

  // Row-at-a-time: resolve taps for one output row, then sweep channels so
  // every channel plane is read sequentially.
  std::vector<std::size_t> i00(Wo), i01(Wo), i10(Wo), i11(Wo);
  std::vector<T> wx0(Wo), wx1(Wo), wy0(Wo), wy1(Wo);
  for (std::size_t n = 0; n < N; ++n) {
    const T* p = offsets ? offsets->ptr() + n * 2 * oplane : nullptr;
    const T* q = offsets ? p + oplane : nullptr;
    const T* src = U.ptr() + n * C * plane;
    T* dst = V.ptr() + n * C * oplane;
    for (std::size_t yt = 0; yt < Ho; ++yt) {
      for (std::size_t xt = 0; xt < Wo; ++xt) {
        const std::size_t k = yt * Wo + xt;
        T xs = static_cast<T>(grid.x(xt));
        T ys = static_cast<T>(grid.y(yt));
        if (offsets) {
          xs = xs + p[k];
          ys = ys + q[k];
        }
        if (mode == SampleMode::nearest) {
          i00[xt] = detail::nearest_index(ys, H) * W + detail::nearest_index(xs, W);
        } else {
          const auto ax = detail::bilinear_axis(xs, W);
          const auto ay = detail::bilinear_axis(ys, H);
          i00[xt] = ay.i0 * W + ax.i0;
          i01[xt] = ay.i0 * W + ax.i1;
          i10[xt] = ay.i1 * W + ax.i0;
          i11[xt] = ay.i1 * W + ax.i1;
          wx0[xt] = ax.w0;
          wx1[xt] = ax.w1;
          wy0[xt] = ay.w0;
          wy1[xt] = ay.w1;
        }
      }
      for (std::size_t c = 0; c < C; ++c) {
        const T* s = src + c * plane;
        T* row = dst + c * oplane + yt * Wo;
        if (mode == SampleMode::nearest) {
          for (std::size_t xt = 0; xt < Wo; ++xt) row[xt] = s[i00[xt]];
        } else {
          for (std::size_t xt = 0; xt < Wo; ++xt) {
            T v = s[i00[xt]] * wx0[xt] * wy0[xt];
            v += s[i01[xt]] * wx1[xt] * wy0[xt];
            v += s[i10[xt]] * wx0[xt] * wy1[xt];
            v += s[i11[xt]] * wx1[xt] * wy1[xt];
            row[xt] = v;
          }
        }
      }
    }
  }
  return V;
}

template <typename T>
struct GuidedGrads {
  Tensor<T> input;    // dU
  Tensor<T> offsets;  // dOffsets, [N, 2, H_out, W_out]
  // False for nearest mode: the offset path is piecewise constant and its
  // gradient is reported as zeros.
  bool offsets_differentiable = true;
};

// Adjoint of guided_sample. dU scatters dV with the forward weights. For
// bilinear mode the offset gradient uses the piecewise derivative of the hat
// function; it is 0 at integer coordinates and wherever the border clamp is
// active.
template <typename T>
GuidedGrads<T> guided_sample_backward(const Tensor<T>& grad_out,
                                      const Tensor<T>& U,
                                      const SamplingGrid& grid,
                                      const std::type_identity_t<Tensor<T>>* offsets,
                                      SampleMode mode) {
  detail::check_guided_shapes(U, grid, offsets);
  const std::size_t N = U.dim(0), C = U.dim(1), H = U.dim(2), W = U.dim(3);
  const std::size_t Ho = grid.out_h, Wo = grid.out_w;
  const std::size_t plane = H * W, oplane = Ho * Wo;
  if (grad_out.shape() != Shape{N, C, Ho, Wo}) {
    throw ShapeError("guided_sample backward: gradient shape " +
                     to_string(grad_out.shape()) + " does not match output");
  }
  GuidedGrads<T> g{Tensor<T>(U.shape()), Tensor<T>({N, 2, Ho, Wo}), true};
  g.offsets_differentiable = mode == SampleMode::bilinear;

  for (std::size_t n = 0; n < N; ++n) {
    const T* p = offsets ? offsets->ptr() + n * 2 * oplane : nullptr;
    const T* q = offsets ? p + oplane : nullptr;
    const T* src = U.ptr() + n * C * plane;
    T* dsrc = g.input.ptr() + n * C * plane;
    const T* gv = grad_out.ptr() + n * C * oplane;
    T* dp = g.offsets.ptr() + n * 2 * oplane;
    T* dq = dp + oplane;
    for (std::size_t yt = 0; yt < Ho; ++yt) {
      for (std::size_t xt = 0; xt < Wo; ++xt) {
        const std::size_t k = yt * Wo + xt;
        T xs = static_cast<T>(grid.x(xt));
        T ys = static_cast<T>(grid.y(yt));
        if (offsets) {
          xs = xs + p[k];
          ys = ys + q[k];
        }
        if (mode == SampleMode::nearest) {
          const std::size_t idx =
              detail::nearest_index(ys, H) * W + detail::nearest_index(xs, W);
          for (std::size_t c = 0; c < C; ++c) {
            dsrc[c * plane + idx] += gv[c * oplane + k];
          }
          continue;
        }
        const auto ax = detail::bilinear_axis(xs, W);
        const auto ay = detail::bilinear_axis(ys, H);
        const std::size_t a = ay.i0 * W + ax.i0, b = ay.i0 * W + ax.i1;
        const std::size_t c0 = ay.i1 * W + ax.i0, d = ay.i1 * W + ax.i1;
        T gx = 0, gy = 0;
        for (std::size_t c = 0; c < C; ++c) {
          const T v = gv[c * oplane + k];
          const T* s = src + c * plane;
          T* ds = dsrc + c * plane;
          ds[a] += v * ax.w0 * ay.w0;
          ds[b] += v * ax.w1 * ay.w0;
          ds[c0] += v * ax.w0 * ay.w1;
          ds[d] += v * ax.w1 * ay.w1;
          gx += v * (ay.w0 * (s[b] - s[a]) + ay.w1 * (s[d] - s[c0]));
          gy += v * (ax.w0 * (s[c0] - s[a]) + ax.w1 * (s[d] - s[b]));
        }
        dp[k] = ax.differentiable ? gx : T{0};
        dq[k] = ay.differentiable ? gy : T{0};
      }
    }
  }
  return g;
}

}  // namespace gun
