#pragma once

// Guidance modules: small subnetworks predicting the offset table [N, 2, H, W]
// (channel 0 = p, the x offset; channel 1 = q, the y offset) at the target
// resolution. Every variant ends in a zero-initialized 1x1 convolution, so a
// fresh module yields zero offsets.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "gun/layers.hpp"

namespace gun {

enum class GuidanceVariant { large_rf, high_res, fusion };

inline const char* to_string(GuidanceVariant v) {
  switch (v) {
    case GuidanceVariant::large_rf: return "large-rf";
    case GuidanceVariant::high_res: return "high-res";
    case GuidanceVariant::fusion: return "fusion";
  }
  return "?";
}

inline GuidanceVariant parse_guidance_variant(const std::string& s) {
  if (s == "large-rf") return GuidanceVariant::large_rf;
  if (s == "high-res") return GuidanceVariant::high_res;
  if (s == "fusion") return GuidanceVariant::fusion;
  throw ConfigError("unknown guidance variant '" + s + "' (expected large-rf, high-res or fusion)");
}

struct GuidanceConfig {
  GuidanceVariant variant = GuidanceVariant::fusion;
  // large-rf: one width per upsampling stage; fusion: widths[0] is the
  // post-merge block width. Unused by high-res.
  std::vector<std::size_t> widths{16, 8};
  std::size_t upsample_stages = 2;  // large-rf only

  void validate() const {
    if (variant == GuidanceVariant::large_rf) {
      if (upsample_stages == 0) throw ConfigError("guidance large-rf: upsample_stages must be >= 1");
      if (widths.size() < upsample_stages) {
        throw ConfigError("guidance large-rf: need one width per upsampling stage");
      }
    }
    if (variant == GuidanceVariant::fusion && widths.empty()) {
      throw ConfigError("guidance fusion: widths must name the post-merge width");
    }
    for (auto w : widths) {
      if (w == 0) throw ConfigError("guidance: widths must be positive");
    }
  }
};

// Named inputs: "deep" (post-fusion decoder features) and "early" (the last
// activation before the encoder's first downsampling).
using FeatureMap = std::map<std::string, ad::Var>;

namespace detail {

inline const ad::Var& require_feature(const FeatureMap& f, const char* key, GuidanceVariant v) {
  auto it = f.find(key);
  if (it == f.end()) {
    throw ConfigError(std::string("guidance variant ") + to_string(v) + " requires '" + key +
                      "' features");
  }
  return it->second;
}

inline ad::Var to_target(const ad::Var& x, std::size_t h, std::size_t w) {
  if (x.shape()[2] == h && x.shape()[3] == w) return x;
  return ad::resize_bilinear(x, h, w);
}

}  // namespace detail

inline ad::Var guidance_offsets(Layers& L, const FeatureMap& features, const GuidanceConfig& cfg,
                                std::size_t out_h, std::size_t out_w,
                                const std::string& prefix = "guide") {
  cfg.validate();
  ad::Var x;
  switch (cfg.variant) {
    case GuidanceVariant::large_rf: {
      x = detail::require_feature(features, "deep", cfg.variant);
      for (std::size_t s = 0; s < cfg.upsample_stages; ++s) {
        x = ad::resize_bilinear(x, 2 * x.shape()[2], 2 * x.shape()[3]);
        const auto name = prefix + ".up" + std::to_string(s);
        x = L.cbr(name, name, x, cfg.widths[s], 3, same_3x3());
      }
      break;
    }
    case GuidanceVariant::high_res:
      x = detail::require_feature(features, "early", cfg.variant);
      break;
    case GuidanceVariant::fusion: {
      const auto& deep = detail::require_feature(features, "deep", cfg.variant);
      const auto& early = detail::require_feature(features, "early", cfg.variant);
      // Same structure as the base-sum fusion module: widen the
      // high-resolution input, upsample the deep one, add.
      const std::size_t width = deep.shape()[1];
      auto widened = L.norm(prefix + ".expand.bn", prefix + ".expand.bn",
                            L.conv(prefix + ".expand.conv", early, width, 1));
      auto up = detail::to_target(deep, early.shape()[2], early.shape()[3]);
      x = ad::merge(widened, up, MergeMode::sum);
      x = L.cbr(prefix + ".mix", prefix + ".mix", x, cfg.widths[0], 3, same_3x3());
      break;
    }
  }
  auto offsets = L.conv(prefix + ".offsets", x, 2, 1, {}, /*bias=*/true, /*zero_init=*/true);
  return detail::to_target(offsets, out_h, out_w);
}

}  // namespace gun
