#pragma once

// Experiment configuration as a JSON document. Every key is optional and
// falls back to the defaults below; unknown keys are errors.
//
// {
//   "seed": 0,
//   "output_dir": "runs/default",
//   "scene":   { "height": 64, "width": 64, "classes": 5, "min_shapes": 4, "max_shapes": 9,
//                "rectangles": true, "disks": true, "thin_bars": true,
//                "bar_width_min": 1, "bar_width_max": 3, "noise": 0.1 },
//   "data":    { "dir": "data", "count": 100, "split": [0.8, 0.1, 0.1] },
//   "model":   { "factors": [2, 4], "shared_weights": true,
//                "widths": { "early": 16, "fine": 16, "coarse": 64 },
//                "fusion": "postproc-sum", "postproc_width": 32, "head": "gum-bilinear",
//                "guidance": { "variant": "fusion", "widths": [16, 8], "upsample_stages": 2 } },
//   "train":   { "epochs": 50, "batch": 8, "base_lr": 0.001, "momentum": 0.9,
//                "lr_step_epochs": 100, "seed": 0, "augment": "none" },
//   "metrics": { "radii": [1, 2, ..., 16] }
// }
//
// The class count lives in scene.classes only; the model takes it from
// there. "guidance": null (or a bilinear-baseline head) means no guidance.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gun/io.hpp"
#include "gun/train.hpp"

namespace gun {

using json = nlohmann::ordered_json;

struct DataConfig {
  std::string dir = "data";
  std::size_t count = 100;
  std::vector<double> split{0.8, 0.1, 0.1};  // train, val, test

  void validate() const {
    if (count == 0) throw ConfigError("data.count must be >= 1");
    if (split.size() != 3) throw ConfigError("data.split must have three fractions (train, val, test)");
    double sum = 0;
    for (double f : split) {
      if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("data.split fractions must be in [0, 1]");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("data.split fractions must sum to 1");
  }
};

inline std::vector<double> default_radii() {
  std::vector<double> r;
  for (int i = 1; i <= 16; ++i) r.push_back(i);
  return r;
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  SceneSpec scene;
  DataConfig data;
  ModelConfig model;
  TrainRecipe train;
  std::vector<double> radii = default_radii();

  void validate() const {
    scene.validate();
    data.validate();
    model.validate();
    train.validate();
    try {
      validate_radii(radii);
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("metrics.radii: ") + e.what());
    }
    if (model.classes != scene.classes) throw ConfigError("model classes differ from scene.classes");
  }
};

namespace detail {

// Reads keys from one JSON object and remembers which were consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + " has the wrong type (" + it->type_name() + ")");
    }
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!it->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  Section sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    auto it = j_.find(key);
    return Section(it == j_.end() ? empty : *it, where(key));
  }

  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + where(it.key().c_str()) + "'");
    }
  }

 private:
  std::string where(const char* key = nullptr) const {
    std::string p = path_.empty() ? "" : path_;
    if (key) p += p.empty() ? key : std::string(".") + key;
    return p.empty() ? "<root>" : p;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig cfg;
  detail::Section root(doc, "");
  root.read("seed", cfg.seed);
  root.read("output_dir", cfg.output_dir);

  {
    auto s = root.sub("scene");
    auto& sc = cfg.scene;
    s.read("height", sc.height);
    s.read("width", sc.width);
    s.read("classes", sc.classes);
    s.read("min_shapes", sc.min_shapes);
    s.read("max_shapes", sc.max_shapes);
    s.read("rectangles", sc.rectangles);
    s.read("disks", sc.disks);
    s.read("thin_bars", sc.thin_bars);
    s.read("bar_width_min", sc.bar_width_min);
    s.read("bar_width_max", sc.bar_width_max);
    s.read("noise", sc.noise);
    s.finish();
  }
  {
    auto s = root.sub("data");
    s.read("dir", cfg.data.dir);
    s.read("count", cfg.data.count);
    s.read("split", cfg.data.split);
    s.finish();
  }
  {
    auto s = root.sub("model");
    auto& m = cfg.model;
    s.read("factors", m.factors);
    s.read("shared_weights", m.shared_weights);
    {
      auto w = s.sub("widths");
      w.read("early", m.widths.early);
      w.read("fine", m.widths.fine);
      w.read("coarse", m.widths.coarse);
      w.finish();
    }
    std::string fusion = to_string(m.fusion), head = to_string(m.head);
    s.read("fusion", fusion);
    s.read("postproc_width", m.postproc_width);
    s.read("head", head);
    m.fusion = parse_fusion_mode(fusion);
    m.head = parse_head_mode(head);
    // A baseline head carries no guidance unless one is explicitly given
    // (which validate() then rejects).
    if (m.head == HeadMode::bilinear_baseline) m.guidance.reset();
    if (s.has("guidance")) {
      if (s.raw("guidance").is_null()) {
        m.guidance.reset();
      } else {
        GuidanceConfig g;
        auto gs = s.sub("guidance");
        std::string variant = to_string(g.variant);
        gs.read("variant", variant);
        g.variant = parse_guidance_variant(variant);
        gs.read("widths", g.widths);
        gs.read("upsample_stages", g.upsample_stages);
        gs.finish();
        m.guidance = g;
      }
    }
    s.finish();
  }
  {
    auto s = root.sub("train");
    auto& t = cfg.train;
    s.read("epochs", t.epochs);
    s.read("batch", t.batch);
    s.read("base_lr", t.base_lr);
    s.read("momentum", t.momentum);
    s.read("lr_step_epochs", t.lr_step_epochs);
    s.read("seed", t.seed);
    std::string augment = to_string(t.augment);
    s.read("augment", augment);
    t.augment = parse_augment(augment);
    s.finish();
  }
  {
    auto s = root.sub("metrics");
    s.read("radii", cfg.radii);
    s.finish();
  }
  root.finish();
  cfg.model.classes = cfg.scene.classes;
  cfg.validate();
  return cfg;
}

inline json to_json(const ExperimentConfig& c) {
  json g = nullptr;
  if (c.model.guidance) {
    g = {{"variant", to_string(c.model.guidance->variant)},
         {"widths", c.model.guidance->widths},
         {"upsample_stages", c.model.guidance->upsample_stages}};
  }
  const auto& sc = c.scene;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"scene",
       {{"height", sc.height}, {"width", sc.width}, {"classes", sc.classes},
        {"min_shapes", sc.min_shapes}, {"max_shapes", sc.max_shapes},
        {"rectangles", sc.rectangles}, {"disks", sc.disks}, {"thin_bars", sc.thin_bars},
        {"bar_width_min", sc.bar_width_min}, {"bar_width_max", sc.bar_width_max},
        {"noise", sc.noise}}},
      {"data", {{"dir", c.data.dir}, {"count", c.data.count}, {"split", c.data.split}}},
      {"model",
       {{"factors", c.model.factors},
        {"shared_weights", c.model.shared_weights},
        {"widths",
         {{"early", c.model.widths.early}, {"fine", c.model.widths.fine}, {"coarse", c.model.widths.coarse}}},
        {"fusion", to_string(c.model.fusion)},
        {"postproc_width", c.model.postproc_width},
        {"head", to_string(c.model.head)},
        {"guidance", g}}},
      {"train",
       {{"epochs", c.train.epochs}, {"batch", c.train.batch}, {"base_lr", c.train.base_lr},
        {"momentum", c.train.momentum}, {"lr_step_epochs", c.train.lr_step_epochs},
        {"seed", c.train.seed}, {"augment", to_string(c.train.augment)}}},
      {"metrics", {{"radii", c.radii}}},
  };
}

inline ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(doc);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

}  // namespace gun
