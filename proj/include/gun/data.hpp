#pragma once

// Synthetic segmentation scenes with thin structures, plus random-scale
// augmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "gun/metrics.hpp"
#include "gun/ops.hpp"
#include "gun/params.hpp"
#include "gun/tensor.hpp"

namespace gun {

// Bumped whenever the scene generator's output for a given (spec, seed)
// changes.
inline constexpr const char* kSceneGeneratorVersion = "mt19937_64/scene-v1";

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t classes = 5;
  std::size_t min_shapes = 4;
  std::size_t max_shapes = 9;
  bool rectangles = true;
  bool disks = true;
  bool thin_bars = true;
  std::size_t bar_width_min = 1;
  std::size_t bar_width_max = 3;
  double noise = 0.1;  // additive uniform noise amplitude

  void validate() const {
    if (classes < 2) throw ValidationError("SceneSpec: need at least 2 classes");
    if (classes > 255) throw ValidationError("SceneSpec: at most 255 classes");
    if (height == 0 || width == 0) throw ValidationError("SceneSpec: extents must be positive");
    if (min_shapes > max_shapes) throw ValidationError("SceneSpec: min_shapes > max_shapes");
    if (bar_width_min < 1 || bar_width_min > bar_width_max) {
      throw ValidationError("SceneSpec: thin-bar widths must satisfy 1 <= min <= max");
    }
    if (!(noise >= 0.0)) throw ValidationError("SceneSpec: noise must be non-negative");
    if (max_shapes > 0) {
      if (!rectangles && !disks && !thin_bars) {
        throw ValidationError("SceneSpec: shapes requested but every shape kind is disabled");
      }
      if (std::min(height, width) < 8) {
        throw ValidationError("SceneSpec: shapes cannot fit in a raster smaller than 8x8");
      }
      if (thin_bars && bar_width_max > std::min(height, width) / 4) {
        throw ValidationError("SceneSpec: thin-bar width exceeds a quarter of the raster");
      }
    }
  }
};

// Base RGB color per class; the first entries are hand-picked, the rest
// derived from a fixed hash so the palette is stable.
inline std::array<double, 3> class_color(std::size_t c) {
  static constexpr std::array<std::array<double, 3>, 8> kPalette{{
      {0.20, 0.20, 0.20},
      {0.85, 0.25, 0.20},
      {0.20, 0.70, 0.30},
      {0.25, 0.35, 0.90},
      {0.90, 0.80, 0.20},
      {0.70, 0.30, 0.80},
      {0.20, 0.80, 0.85},
      {0.95, 0.55, 0.15},
  }};
  if (c < kPalette.size()) return kPalette[c];
  std::uint64_t h = 0x9E3779B97F4A7C15ull * (c + 1);
  std::array<double, 3> rgb{};
  for (auto& v : rgb) {
    h ^= h >> 29;
    h *= 0xBF58476D1CE4E5B9ull;
    v = 0.15 + 0.8 * static_cast<double>(h >> 11) * 0x1.0p-53;
  }
  return rgb;
}

struct Scene {
  Tensor<double> image;  // [3, H, W]
  SegMap gt;
};

// Shapes are painted back to front; ground truth records the topmost shape.
// Background is class 0.
inline Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t H = spec.height, W = spec.width;
  Rng rng(seed);
  SegMap gt(H, W, 0);

  std::vector<int> kinds;
  if (spec.rectangles) kinds.push_back(0);
  if (spec.disks) kinds.push_back(1);
  if (spec.thin_bars) kinds.push_back(2);

  const auto Hi = static_cast<std::int64_t>(H), Wi = static_cast<std::int64_t>(W);
  const auto shapes = rng.integer(static_cast<std::int64_t>(spec.min_shapes),
                                  static_cast<std::int64_t>(spec.max_shapes));
  for (std::int64_t s = 0; s < shapes; ++s) {
    const int kind = kinds[static_cast<std::size_t>(
        rng.integer(0, static_cast<std::int64_t>(kinds.size()) - 1))];
    const auto cls = static_cast<std::uint8_t>(
        rng.integer(1, static_cast<std::int64_t>(spec.classes) - 1));
    if (kind == 0) {
      const auto rh = rng.integer(4, std::max<std::int64_t>(4, Hi / 2));
      const auto rw = rng.integer(4, std::max<std::int64_t>(4, Wi / 2));
      const auto y0 = rng.integer(-rh / 2, Hi - rh / 2);
      const auto x0 = rng.integer(-rw / 2, Wi - rw / 2);
      for (auto y = std::max<std::int64_t>(0, y0); y < std::min(Hi, y0 + rh); ++y) {
        for (auto x = std::max<std::int64_t>(0, x0); x < std::min(Wi, x0 + rw); ++x) {
          gt.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = cls;
        }
      }
    } else if (kind == 1) {
      const double r = rng.uniform(3.0, std::max(3.0, std::min(H, W) / 5.0));
      const double cy = rng.uniform(0.0, static_cast<double>(H));
      const double cx = rng.uniform(0.0, static_cast<double>(W));
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double dx = static_cast<double>(x) + 0.5 - cx;
          if (dx * dx + dy * dy <= r * r) gt.at(y, x) = cls;
        }
      }
    } else {
      // Thin bar: a segment of given width at an arbitrary angle.
      const double width = static_cast<double>(rng.integer(
          static_cast<std::int64_t>(spec.bar_width_min),
          static_cast<std::int64_t>(spec.bar_width_max)));
      const double length = rng.uniform(std::min(H, W) / 3.0, static_cast<double>(std::max(H, W)));
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double cy = rng.uniform(0.0, static_cast<double>(H));
      const double cx = rng.uniform(0.0, static_cast<double>(W));
      const double ux = std::cos(angle), uy = std::sin(angle);
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double dx = static_cast<double>(x) + 0.5 - cx;
          const double along = dx * ux + dy * uy;
          const double across = -dx * uy + dy * ux;
          if (std::abs(along) <= length / 2 && std::abs(across) <= width / 2) {
            gt.at(y, x) = cls;
          }
        }
      }
    }
  }

  Tensor<double> image({3, H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const auto rgb = class_color(gt.at(y, x));
      for (std::size_t c = 0; c < 3; ++c) {
        image[(c * H + y) * W + x] = rgb[c] + spec.noise * rng.uniform(-1.0, 1.0);
      }
    }
  }
  return {std::move(image), std::move(gt)};
}

// ---------------------------------------------------------------------------
// Random-scale augmentation

// Nearest-neighbour label resampling with half-pixel centers; labels never
// blend.
inline SegMap resize_nearest(const SegMap& in, std::size_t out_h, std::size_t out_w) {
  SegMap out(out_h, out_w);
  auto src_index = [](std::size_t t, std::size_t in_n, std::size_t out_n) {
    const double s = (static_cast<double>(t) + 0.5) * static_cast<double>(in_n) /
                     static_cast<double>(out_n);
    return std::min(static_cast<std::size_t>(std::floor(s)), in_n - 1);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = src_index(y, in.height, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      out.at(y, x) = in.at(sy, src_index(x, in.width, out_w));
    }
  }
  return out;
}

// Rescale by `factor` (image bilinear, labels nearest), then center-crop or
// pad back to the original extents. Padding is 0 for the image and the
// ignore label for the ground truth.
inline Scene rescale_scene(const Tensor<double>& image, const SegMap& gt, double factor) {
  detail::require_rank(image, 3, "rescale_scene image");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (gt.height != H || gt.width != W) {
    throw ShapeError("rescale_scene: image and ground truth extents differ");
  }
  const auto sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(H * factor)));
  const auto sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(W * factor)));
  const auto scaled = resize_bilinear(image.reshaped({1, C, H, W}), sh, sw);
  const auto scaled_gt = resize_nearest(gt, sh, sw);

  Scene out{Tensor<double>({C, H, W}), SegMap(H, W, kIgnoreLabel)};
  // Offsets of the original window inside the scaled raster (crop) or of the
  // scaled raster inside the original window (pad).
  const long oy = (static_cast<long>(sh) - static_cast<long>(H)) / 2;
  const long ox = (static_cast<long>(sw) - static_cast<long>(W)) / 2;
  for (std::size_t y = 0; y < H; ++y) {
    const long sy = static_cast<long>(y) + oy;
    if (sy < 0 || sy >= static_cast<long>(sh)) continue;
    for (std::size_t x = 0; x < W; ++x) {
      const long sx = static_cast<long>(x) + ox;
      if (sx < 0 || sx >= static_cast<long>(sw)) continue;
      const auto syu = static_cast<std::size_t>(sy), sxu = static_cast<std::size_t>(sx);
      for (std::size_t c = 0; c < C; ++c) {
        out.image[(c * H + y) * W + x] = scaled[(c * sh + syu) * sw + sxu];
      }
      out.gt.at(y, x) = scaled_gt.at(syu, sxu);
    }
  }
  return out;
}

// One factor drawn uniformly from [0.5, 2].
inline Scene random_scale(const Tensor<double>& image, const SegMap& gt, Rng& rng) {
  return rescale_scene(image, gt, rng.uniform(0.5, 2.0));
}

}  // namespace gun
