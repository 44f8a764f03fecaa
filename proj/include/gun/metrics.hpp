#pragma once

// Segmentation quality: confusion accumulation, class-wise IoU, exact
// Euclidean boundary distance and the trimap (boundary band) curve.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gun/ops.hpp"
#include "gun/tensor.hpp"

namespace gun {

// Integer label raster; kIgnoreLabel (255) marks unevaluated pixels.
struct SegMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  SegMap() = default;
  SegMap(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}
  SegMap(std::size_t h, std::size_t w, std::vector<std::uint8_t> values)
      : height(h), width(w), labels(std::move(values)) {
    if (labels.size() != h * w) {
      throw ShapeError("SegMap: " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(h) + "x" + std::to_string(w));
    }
  }

  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::size_t size() const { return labels.size(); }

  friend bool operator==(const SegMap&, const SegMap&) = default;
};

// Per-pixel argmax over channels of a [1, C, H, W] slice of `logits`.
inline SegMap argmax_labels(const Tensor<double>& logits, std::size_t n = 0) {
  detail::require_rank(logits, 4, "argmax_labels");
  const std::size_t C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  SegMap out(H, W);
  const double* base = logits.ptr() + n * C * H * W;
  for (std::size_t i = 0; i < H * W; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (base[c * H * W + i] > base[best * H * W + i]) best = c;
    }
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes)
      : classes_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw ValidationError("ConfusionMatrix: need at least one class");
  }

  std::size_t classes() const { return classes_; }
  std::uint64_t operator()(std::size_t gt, std::size_t pred) const {
    return counts_[gt * classes_ + pred];
  }
  std::uint64_t& operator()(std::size_t gt, std::size_t pred) {
    return counts_[gt * classes_ + pred];
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t c = 0; c < classes_; ++c) t += (*this)(c, c);
    return t;
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw ShapeError("ConfusionMatrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

// Adds every pixel with gt != ignore and mask true (no mask = all true).
inline void accumulate_confusion(ConfusionMatrix& conf, const SegMap& pred,
                                 const SegMap& gt,
                                 const std::vector<bool>* mask = nullptr) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("accumulate_confusion: prediction and ground truth extents differ");
  }
  if (mask && mask->size() != gt.size()) {
    throw ShapeError("accumulate_confusion: mask extents differ from ground truth");
  }
  const std::size_t C = conf.classes();
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::uint8_t g = gt.labels[i];
    if (g == kIgnoreLabel) continue;
    if (mask && !(*mask)[i]) continue;
    const std::uint8_t p = pred.labels[i];
    if (p >= C) {
      throw ValidationError("accumulate_confusion: predicted class " + std::to_string(p) +
                            " >= " + std::to_string(C));
    }
    if (g >= C) {
      throw ValidationError("accumulate_confusion: ground-truth class " + std::to_string(g) +
                            " >= " + std::to_string(C));
    }
    ++conf(g, p);
  }
}

inline ConfusionMatrix accumulate_confusion(const SegMap& pred, const SegMap& gt,
                                            std::size_t classes,
                                            const std::vector<bool>* mask = nullptr) {
  ConfusionMatrix conf(classes);
  accumulate_confusion(conf, pred, gt, mask);
  return conf;
}

struct IouResult {
  std::vector<std::optional<double>> per_class;  // nullopt: excluded class
  std::optional<double> miou;                    // nullopt: every class excluded
};

// IoU_c = TP / (TP + FP + FN); classes with an empty denominator are
// excluded from the mean.
inline IouResult mean_iou(const ConfusionMatrix& conf) {
  const std::size_t C = conf.classes();
  IouResult r;
  r.per_class.resize(C);
  double sum = 0;
  std::size_t included = 0;
  for (std::size_t c = 0; c < C; ++c) {
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t k = 0; k < C; ++k) {
      if (k == c) continue;
      fn += conf(c, k);
      fp += conf(k, c);
    }
    const std::uint64_t tp = conf(c, c);
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(denom);
    r.per_class[c] = iou;
    sum += iou;
    ++included;
  }
  if (included) r.miou = sum / static_cast<double>(included);
  return r;
}

// ---------------------------------------------------------------------------
// Boundary distance

struct DistanceMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> distance;  // +infinity where no differing pixel exists
  bool has_boundary = false;     // false for uniform (or fully ignored) maps

  double at(std::size_t y, std::size_t x) const { return distance[y * width + x]; }
};

namespace detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D squared distance transform by lower envelope of parabolas. Infinite
// sites are left out of the envelope.
inline void squared_distance_1d(std::span<const double> f, std::span<double> d,
                                std::vector<std::size_t>& v, std::vector<double>& z) {
  const std::size_t n = f.size();
  v.clear();
  z.clear();
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double fq = f[q] + static_cast<double>(q) * static_cast<double>(q);
    while (!v.empty()) {
      const std::size_t p = v.back();
      const double fp = f[p] + static_cast<double>(p) * static_cast<double>(p);
      const double s = (fq - fp) / (2.0 * static_cast<double>(q - p));
      if (s <= z.back()) {
        v.pop_back();
        z.pop_back();
      } else {
        v.push_back(q);
        z.push_back(s);
        break;
      }
    }
    if (v.empty()) {
      v.push_back(q);
      z.push_back(-kInf);
    }
  }
  if (v.empty()) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  std::size_t k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (k + 1 < v.size() && z[k + 1] < static_cast<double>(q)) ++k;
    const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

// Exact squared Euclidean distance to the nearest site (sites have value 0,
// everything else +inf).
inline std::vector<double> squared_distance_2d(std::vector<double> grid, std::size_t H,
                                               std::size_t W) {
  std::vector<std::size_t> v;
  std::vector<double> z;
  std::vector<double> f(std::max(H, W)), d(std::max(H, W));
  for (std::size_t x = 0; x < W; ++x) {
    for (std::size_t y = 0; y < H; ++y) f[y] = grid[y * W + x];
    squared_distance_1d(std::span(f.data(), H), std::span(d.data(), H), v, z);
    for (std::size_t y = 0; y < H; ++y) grid[y * W + x] = d[y];
  }
  for (std::size_t y = 0; y < H; ++y) {
    std::copy_n(grid.begin() + static_cast<std::ptrdiff_t>(y * W), W, f.begin());
    squared_distance_1d(std::span(f.data(), W), std::span(d.data(), W), v, z);
    std::copy_n(d.begin(), W, grid.begin() + static_cast<std::ptrdiff_t>(y * W));
  }
  return grid;
}

}  // namespace detail

// Euclidean distance (pixel centers) from each pixel to the nearest pixel of a
// different class. Computed per class and merged; ignore pixels are neither
// sources nor targets and keep +infinity.
inline DistanceMap boundary_distance_map(const SegMap& gt) {
  const std::size_t H = gt.height, W = gt.width;
  DistanceMap out;
  out.height = H;
  out.width = W;
  out.distance.assign(H * W, detail::kInf);

  std::vector<bool> present(256, false);
  for (auto l : gt.labels) present[l] = true;
  present[kIgnoreLabel] = false;

  for (std::size_t c = 0; c < 255; ++c) {
    if (!present[c]) continue;
    std::vector<double> grid(H * W, detail::kInf);
    bool any_source = false;
    for (std::size_t i = 0; i < H * W; ++i) {
      const auto l = gt.labels[i];
      if (l != c && l != kIgnoreLabel) {
        grid[i] = 0.0;
        any_source = true;
      }
    }
    if (!any_source) continue;
    out.has_boundary = true;
    const auto sq = detail::squared_distance_2d(std::move(grid), H, W);
    for (std::size_t i = 0; i < H * W; ++i) {
      if (gt.labels[i] == c) out.distance[i] = std::sqrt(sq[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trimap curve

struct TrimapPoint {
  double radius = 0;
  std::optional<double> miou;
  std::uint64_t evaluated_pixels = 0;
  std::vector<std::optional<double>> per_class;
  bool empty_band = false;  // flagged; excluded from reported curves
};

inline void validate_radii(std::span<const double> radii) {
  if (radii.empty()) throw ValidationError("trimap: no radii given");
  for (std::size_t i = 0; i < radii.size(); ++i) {
    if (!(radii[i] > 0)) throw ValidationError("trimap: radii must be positive");
    if (i && !(radii[i] > radii[i - 1])) {
      throw ValidationError("trimap: radii must be strictly increasing");
    }
  }
}

// Accumulates one confusion matrix per radius over many images. Band for
// radius r is {distance <= r}.
class TrimapAccumulator {
 public:
  TrimapAccumulator(std::vector<double> radii, std::size_t classes)
      : radii_(std::move(radii)), classes_(classes) {
    validate_radii(radii_);
    confusion_.assign(radii_.size(), ConfusionMatrix(classes));
  }

  void add(const SegMap& pred, const SegMap& gt) {
    const auto dist = boundary_distance_map(gt);
    std::vector<bool> mask(gt.size());
    for (std::size_t r = 0; r < radii_.size(); ++r) {
      for (std::size_t i = 0; i < gt.size(); ++i) mask[i] = dist.distance[i] <= radii_[r];
      accumulate_confusion(confusion_[r], pred, gt, &mask);
    }
  }

  std::vector<TrimapPoint> curve() const {
    std::vector<TrimapPoint> points;
    for (std::size_t r = 0; r < radii_.size(); ++r) {
      TrimapPoint p;
      p.radius = radii_[r];
      p.evaluated_pixels = confusion_[r].total();
      p.empty_band = p.evaluated_pixels == 0;
      if (!p.empty_band) {
        auto iou = mean_iou(confusion_[r]);
        p.miou = iou.miou;
        p.per_class = std::move(iou.per_class);
      } else {
        p.per_class.assign(classes_, std::nullopt);
      }
      points.push_back(std::move(p));
    }
    return points;
  }

  const std::vector<double>& radii() const { return radii_; }
  std::size_t classes() const { return classes_; }

 private:
  std::vector<double> radii_;
  std::size_t classes_;
  std::vector<ConfusionMatrix> confusion_;
};

inline std::vector<TrimapPoint> trimap_miou_curve(const SegMap& pred, const SegMap& gt,
                                                  std::vector<double> radii,
                                                  std::size_t classes) {
  TrimapAccumulator acc(std::move(radii), classes);
  acc.add(pred, gt);
  return acc.curve();
}

// CSV with columns radius, miou, evaluated_pixels, iou_0 .. iou_{C-1}. Empty
// bands are skipped; undefined values are written as empty fields.
inline void write_trimap_csv(std::ostream& os, const std::vector<TrimapPoint>& curve,
                             std::size_t classes) {
  os << "radius,miou,evaluated_pixels";
  for (std::size_t c = 0; c < classes; ++c) os << ",iou_" << c;
  os << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& p : curve) {
    if (p.empty_band) continue;
    os << num(p.radius) << ',' << (p.miou ? num(*p.miou) : "") << ',' << p.evaluated_pixels;
    for (std::size_t c = 0; c < classes; ++c) {
      os << ',';
      if (c < p.per_class.size() && p.per_class[c]) os << num(*p.per_class[c]);
    }
    os << '\n';
  }
}

}  // namespace gun
