#pragma once

// Toy guided upsampling network: multi-resolution encoder with optional
// weight sharing, fusion module, classifier and an output head that is
// either plain bilinear upsampling or a guided upsampling module.
//
// Shapes for the default factors [2, 4] on a 3x64x64 input:
//   branch f=2: input 32x32 -> early [16,32,32] -> fine [16,16,16]
//   branch f=4: input 16x16 -> [16,8,8] -> deep (dilated) [64,8,8]
//   fusion at 16x16, classifier, head upsamples x4 to 64x64.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "gun/guidance.hpp"
#include "gun/layers.hpp"

namespace gun {

enum class FusionMode { base_sum, base_concat, postproc_sum, postproc_concat };
enum class HeadMode { bilinear_baseline, gum_nearest, gum_bilinear };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::base_sum: return "base-sum";
    case FusionMode::base_concat: return "base-concat";
    case FusionMode::postproc_sum: return "postproc-sum";
    case FusionMode::postproc_concat: return "postproc-concat";
  }
  return "?";
}

inline const char* to_string(HeadMode m) {
  switch (m) {
    case HeadMode::bilinear_baseline: return "bilinear-baseline";
    case HeadMode::gum_nearest: return "gum-nearest";
    case HeadMode::gum_bilinear: return "gum-bilinear";
  }
  return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  for (auto m : {FusionMode::base_sum, FusionMode::base_concat, FusionMode::postproc_sum,
                 FusionMode::postproc_concat}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown fusion mode '" + s +
                    "' (expected base-sum, base-concat, postproc-sum or postproc-concat)");
}

inline HeadMode parse_head_mode(const std::string& s) {
  for (auto m : {HeadMode::bilinear_baseline, HeadMode::gum_nearest, HeadMode::gum_bilinear}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown head '" + s +
                    "' (expected bilinear-baseline, gum-nearest or gum-bilinear)");
}

struct EncoderWidths {
  std::size_t early = 16;   // first conv, before downsampling
  std::size_t fine = 16;    // after the stride-2 stage
  std::size_t coarse = 64;  // dilated deep stages of the coarsest branch
};

struct ModelConfig {
  std::vector<std::size_t> factors{2, 4};
  bool shared_weights = true;
  EncoderWidths widths;
  FusionMode fusion = FusionMode::postproc_sum;
  std::size_t postproc_width = 32;
  HeadMode head = HeadMode::gum_bilinear;
  std::optional<GuidanceConfig> guidance = GuidanceConfig{};
  std::size_t classes = 5;

  void validate() const {
    if (factors.empty()) throw ConfigError("model: at least one branch factor is required");
    for (std::size_t i = 0; i < factors.size(); ++i) {
      const auto f = factors[i];
      if (f == 0 || (f & (f - 1)) != 0) {
        throw ConfigError("model: branch factor " + std::to_string(f) + " is not a power of 2");
      }
      if (i > 0 && f <= factors[i - 1]) {
        throw ConfigError("model: branch factors must be strictly increasing");
      }
      if (i > 0 && f != 2 * factors[i - 1]) {
        throw ConfigError("model: consecutive branch factors must differ by exactly 2x");
      }
    }
    if (widths.early == 0 || widths.fine == 0 || widths.coarse == 0) {
      throw ConfigError("model: encoder widths must be positive");
    }
    if (classes < 2 || classes > 255) throw ConfigError("model: classes must be in [2, 255]");
    const bool postproc = fusion == FusionMode::postproc_sum || fusion == FusionMode::postproc_concat;
    if (postproc && postproc_width == 0) throw ConfigError("model: postproc_width must be positive");
    if (head == HeadMode::bilinear_baseline && guidance) {
      throw ConfigError("model: the bilinear-baseline head does not take a guidance config");
    }
    if (head != HeadMode::bilinear_baseline) {
      if (!guidance) throw ConfigError(std::string("model: head ") + to_string(head) +
                                       " requires a guidance config");
      guidance->validate();
    }
  }

  // Spatial divisor the input extents must be a multiple of.
  std::size_t divisor() const { return 2 * factors.back(); }
};

// Name of a parameter owned by an encoder branch: one copy under sharing,
// one per branch otherwise.
inline std::string branch_param(const ModelConfig& cfg, std::size_t factor, const std::string& layer) {
  return cfg.shared_weights ? "enc." + layer : "enc.f" + std::to_string(factor) + "." + layer;
}

struct EncoderOutput {
  std::vector<ad::Var> branches;  // finest first; the last one is the deep (coarse) output
  ad::Var early;

  const ad::Var& coarse() const { return branches.back(); }
  const ad::Var& fine() const { return branches.front(); }
};

inline EncoderOutput encoder_forward(Layers& L, const ad::Var& image, const ModelConfig& cfg) {
  const auto& s = image.shape();
  if (s.size() != 4 || s[1] != 3) {
    throw ShapeError("encoder: expected image [N,3,H,W], got " + to_string(s));
  }
  const std::size_t H = s[2], W = s[3], d = cfg.divisor();
  if (H % d != 0 || W % d != 0) {
    throw ValidationError("encoder: input extents " + std::to_string(H) + "x" + std::to_string(W) +
                          " must be divisible by " + std::to_string(d) +
                          " (largest factor times the internal stride 2)");
  }
  EncoderOutput out;
  for (std::size_t b = 0; b < cfg.factors.size(); ++b) {
    const std::size_t f = cfg.factors[b];
    const auto stats = "enc.f" + std::to_string(f);
    auto x = f == 1 ? image : ad::resize_bilinear(image, H / f, W / f);
    auto early = L.cbr(branch_param(cfg, f, "conv1"), stats + ".conv1", x, cfg.widths.early, 3,
                       same_3x3());
    x = L.cbr(branch_param(cfg, f, "conv2"), stats + ".conv2", early, cfg.widths.fine, 3,
              {2, 1, 1});
    if (b == 0) out.early = early;
    if (b + 1 == cfg.factors.size()) {
      // Deep part exists only in the most subsampled branch.
      x = L.cbr(branch_param(cfg, f, "deep1"), stats + ".deep1", x, cfg.widths.coarse, 3,
                same_3x3(2));
      x = L.cbr(branch_param(cfg, f, "deep2"), stats + ".deep2", x, cfg.widths.coarse, 3,
                same_3x3(2));
    }
    out.branches.push_back(x);
  }
  return out;
}

// Merges branches from coarse to fine: the running result is upsampled x2,
// the next finer branch is widened by a 1x1 conv + norm to match, and the
// two are summed or concatenated. Postproc variants reduce the width with a
// 3x3 conv-norm-relu block.
inline ad::Var fusion_forward(Layers& L, const std::vector<ad::Var>& branches, const ModelConfig& cfg) {
  if (branches.empty()) throw ValidationError("fusion: no branches");
  const bool concat = cfg.fusion == FusionMode::base_concat || cfg.fusion == FusionMode::postproc_concat;
  const auto mode = concat ? MergeMode::concat : MergeMode::sum;
  auto cur = branches.back();
  for (std::size_t i = branches.size() - 1; i-- > 0;) {
    const auto& fine = branches[i];
    const auto& cs = cur.shape();
    const auto& fs = fine.shape();
    if (fs[2] != 2 * cs[2] || fs[3] != 2 * cs[3]) {
      throw ShapeError("fusion: fine branch " + to_string(fs) + " is not twice the extent of " +
                       to_string(cs));
    }
    auto up = ad::resize_bilinear(cur, fs[2], fs[3]);
    const auto name = "fuse" + std::to_string(i);
    auto widened = L.norm(name + ".expand.bn", name + ".expand.bn",
                          L.conv(name + ".expand.conv", fine, cs[1], 1));
    cur = ad::merge(widened, up, mode);
  }
  if (cfg.fusion == FusionMode::postproc_sum || cfg.fusion == FusionMode::postproc_concat) {
    cur = L.cbr("fuse.post", "fuse.post", cur, cfg.postproc_width, 3, same_3x3());
  }
  return cur;
}

struct ModelOutput {
  ad::Var logits;                  // [N, C, H, W]
  std::optional<ad::Var> offsets;  // [N, 2, H, W] for gum heads
};

inline ModelOutput gun_forward(Layers& L, const ad::Var& image, const ModelConfig& cfg) {
  const std::size_t H = image.shape().at(2), W = image.shape().at(3);
  auto enc = encoder_forward(L, image, cfg);
  auto fused = fusion_forward(L, enc.branches, cfg);
  auto low = L.conv("classifier", fused, cfg.classes, 1, {}, /*bias=*/true);
  ModelOutput out;
  if (cfg.head == HeadMode::bilinear_baseline) {
    out.logits = ad::resize_bilinear(low, H, W);
    return out;
  }
  const auto grid = make_regular_grid(low.shape()[2], low.shape()[3], H, W);
  out.offsets = guidance_offsets(L, {{"deep", fused}, {"early", enc.early}}, *cfg.guidance, H, W);
  out.logits = ad::guided_sample(low, grid, out.offsets,
                                 cfg.head == HeadMode::gum_nearest ? SampleMode::nearest
                                                                   : SampleMode::bilinear);
  return out;
}

// Creates every parameter and normalization buffer the forward pass touches.
// Convolutions feeding a norm are He-initialized; the guidance output layer
// starts at zero.
inline ParamStore build_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore store;
  Rng rng(seed);
  ad::Tape tape(false);
  Layers L(tape, store, /*training=*/false, &rng);
  const std::size_t e = 2 * cfg.divisor();
  gun_forward(L, tape.constant(Tensor<double>({1, 3, e, e}, 0.0)), cfg);
  return store;
}

inline std::size_t parameter_count(const ParamStore& store, const std::string& prefix = "") {
  std::size_t n = 0;
  for (const auto& [name, t] : store.params()) {
    if (name.compare(0, prefix.size(), prefix) == 0) n += t.size();
  }
  return n;
}

// Parameters of one encoder branch (the coarsest, which is the only one with
// deep stages) when nothing is shared.
inline std::size_t single_branch_parameter_count(ModelConfig cfg) {
  cfg.shared_weights = false;
  const auto store = build_params(cfg, 0);
  return parameter_count(store, "enc.f" + std::to_string(cfg.factors.back()) + ".");
}

// Names whose presence or shape differs between two stores, sorted.
inline std::vector<std::string> mismatched_parameters(const ParamStore& expected, const ParamStore& actual) {
  std::vector<std::string> bad;
  auto compare = [&](const ParamStore::Map& a, const ParamStore::Map& b) {
    for (const auto& [name, t] : a) {
      auto it = b.find(name);
      if (it == b.end() || it->second.shape() != t.shape()) bad.push_back(name);
    }
    for (const auto& [name, t] : b) {
      if (!a.count(name)) bad.push_back(name);
    }
  };
  compare(expected.params(), actual.params());
  compare(expected.buffers(), actual.buffers());
  std::sort(bad.begin(), bad.end());
  return bad;
}

}  // namespace gun
