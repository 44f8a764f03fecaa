#pragma once

// Experiment commands behind the `gun` CLI: dataset generation, training,
// evaluation, trimap analysis, kernel benchmarking and gradient checks.
// Every command writes resolved_config.json and VERSION next to its outputs.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "gun/config.hpp"
#include "gun/gradcheck.hpp"
#include "gun/io.hpp"
#include "gun/train.hpp"

namespace gun {

inline constexpr const char* kToolVersion = "gun 1.0.0";

namespace fs = std::filesystem;

// Output directory exists, is non-empty and --force was not given.
class RefusalError : public Error {
 public:
  using Error::Error;
};

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw RefusalError("output path '" + dir.string() + "' is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) {
        throw RefusalError("output directory '" + dir.string() + "' is not empty (use --force to overwrite)");
      }
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

inline void write_run_stamp(const fs::path& dir, const ExperimentConfig& cfg) {
  write_text_file(dir / "resolved_config.json", to_json(cfg).dump(2) + "\n");
  write_text_file(dir / "VERSION", std::string(kToolVersion) + "\nscene-generator " +
                                       kSceneGeneratorVersion + "\ncontainer-version " +
                                       std::to_string(kContainerVersion) + "\n");
}

// ---------------------------------------------------------------------------
// Dataset on disk
//
//   <dir>/manifest.json        seeds, spec, generator version, file list
//   <dir>/manifest.fnv1a64     hash of manifest.json
//   <dir>/<split>/NNNNNN.gunt  image, float64 [3, H, W]
//   <dir>/<split>/NNNNNN.pgm   ground truth
//   <dir>/<split>/NNNNNN.ppm   RGB preview

inline constexpr const char* kSplitNames[3] = {"train", "val", "test"};

// Seed of scene `index` in a corpus with base seed `seed` (splitmix64 mix).
inline std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::array<std::size_t, 3> split_counts(std::size_t count, const std::vector<double>& split) {
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(count) * split[0]));
  const auto n_val = std::min(count - std::min(count, n_train),
                              static_cast<std::size_t>(std::llround(static_cast<double>(count) * split[1])));
  return {std::min(count, n_train), n_val, count - std::min(count, n_train) - n_val};
}

struct GenDataResult {
  std::array<std::size_t, 3> counts{};
  std::string manifest_hash;
  std::vector<std::string> warnings;
};

inline GenDataResult cmd_gen_data(const ExperimentConfig& cfg, const fs::path& dir, bool force) {
  cfg.validate();
  prepare_output_dir(dir, force);
  GenDataResult r;
  r.counts = split_counts(cfg.data.count, cfg.data.split);
  json splits = json::object();
  std::size_t index = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string name = kSplitNames[s];
    fs::create_directories(dir / name);
    json entries = json::array();
    if (r.counts[s] == 0) r.warnings.push_back("split '" + name + "' is empty");
    for (std::size_t i = 0; i < r.counts[s]; ++i, ++index) {
      const auto seed = scene_seed(cfg.seed, index);
      const auto scene = generate_scene(cfg.scene, seed);
      char stem[16];
      std::snprintf(stem, sizeof stem, "%06zu", i);
      const auto rel = name + "/" + stem;
      write_file(dir / (rel + ".gunt"), write_container(scene.image));
      write_file(dir / (rel + ".pgm"), write_pgm(scene.gt));
      write_file(dir / (rel + ".ppm"), write_ppm(scene.image));
      entries.push_back({{"seed", seed}, {"image", rel + ".gunt"}, {"gt", rel + ".pgm"},
                         {"preview", rel + ".ppm"}});
    }
    splits[name] = std::move(entries);
  }
  const auto full = to_json(cfg);
  json manifest = {{"generator", kSceneGeneratorVersion},
                   {"rng", Rng::kAlgorithm},
                   {"seed", cfg.seed},
                   {"scene", full["scene"]},
                   {"splits", splits}};
  const std::string text = manifest.dump(2) + "\n";
  r.manifest_hash = hex64(fnv1a64(text));
  write_text_file(dir / "manifest.json", text);
  write_text_file(dir / "manifest.fnv1a64", r.manifest_hash + "\n");
  write_run_stamp(dir, cfg);
  return r;
}

inline std::vector<Scene> load_split(const fs::path& dir, const std::string& split) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw Error("dataset manifest '" + manifest_path.string() + "' not found (run gen-data first)");
  }
  const auto bytes = read_file(manifest_path);
  const auto manifest = json::parse(bytes.begin(), bytes.end());
  if (!manifest.contains("splits") || !manifest["splits"].contains(split)) {
    throw Error("dataset manifest '" + manifest_path.string() + "' has no split '" + split + "'");
  }
  std::vector<Scene> scenes;
  for (const auto& e : manifest["splits"][split]) {
    Scene s{read_container_as<double>(read_file(dir / e["image"].get<std::string>())),
            read_pgm(read_file(dir / e["gt"].get<std::string>()))};
    if (s.image.rank() != 3 || s.image.dim(1) != s.gt.height || s.image.dim(2) != s.gt.width) {
      throw ShapeError("dataset: image and ground truth extents differ for " + e["image"].get<std::string>());
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

// ---------------------------------------------------------------------------
// Parameter persistence
//
//   params.bin   concatenated containers, parameters then buffers, by name
//   params.json  manifest: name, kind, shape, byte offset, byte length

inline void save_params(const ParamStore& store, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<std::uint8_t> blob;
  json entries = json::array();
  auto add = [&](const ParamStore::Map& m, const char* kind) {
    for (const auto& [name, t] : m) {
      const auto bytes = write_container(t);
      entries.push_back({{"name", name}, {"kind", kind}, {"shape", t.shape()},
                         {"offset", blob.size()}, {"bytes", bytes.size()}});
      blob.insert(blob.end(), bytes.begin(), bytes.end());
    }
  };
  add(store.params(), "param");
  add(store.buffers(), "buffer");
  write_file(dir / "params.bin", blob);
  write_text_file(dir / "params.json", json{{"format", "GUNT"}, {"entries", entries}}.dump(2) + "\n");
}

inline ParamStore load_params(const fs::path& dir) {
  const auto mbytes = read_file(dir / "params.json");
  const auto manifest = json::parse(mbytes.begin(), mbytes.end());
  const auto blob = read_file(dir / "params.bin");
  ParamStore store;
  for (const auto& e : manifest.at("entries")) {
    const auto offset = e.at("offset").get<std::size_t>();
    const auto len = e.at("bytes").get<std::size_t>();
    if (offset + len > blob.size()) {
      throw ParseError(ParseErrorKind::truncated, "params.bin: entry '" + e.at("name").get<std::string>() +
                                                      "' runs past the end of the file");
    }
    auto t = read_container_as<double>(std::span(blob).subspan(offset, len));
    if (t.shape() != e.at("shape").get<Shape>()) {
      throw ShapeError("params.bin: entry '" + e.at("name").get<std::string>() + "' disagrees with manifest");
    }
    if (e.at("kind") == "param") store.add_param(e.at("name"), std::move(t));
    else store.add_buffer(e.at("name"), std::move(t));
  }
  return store;
}

// Loads parameters and checks them against the shapes the config implies.
inline ParamStore load_params_for(const ModelConfig& model, const fs::path& dir) {
  auto store = load_params(dir);
  const auto bad = mismatched_parameters(build_params(model, 0), store);
  if (!bad.empty()) {
    std::string names;
    for (const auto& n : bad) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("parameters in '" + dir.string() + "' do not match the config: " + names);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Training

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,lr,train_loss,val_miou\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + fmt_double(r.lr) + "," + fmt_double(r.train_loss) + "," +
           (r.val_miou ? fmt_double(*r.val_miou) : "") + "\n";
  }
  return out;
}

struct TrainCommandResult {
  std::vector<EpochRecord> history;
  std::size_t parameter_count = 0;
};

inline TrainCommandResult cmd_train(const ExperimentConfig& cfg, const fs::path& out_dir, bool force,
                                    std::ostream* log = nullptr) {
  cfg.validate();
  const fs::path data_dir = cfg.data.dir;
  auto train_set = load_split(data_dir, "train");
  auto val_set = load_split(data_dir, "val");
  prepare_output_dir(out_dir, force);
  write_run_stamp(out_dir, cfg);
  auto result = train(cfg.model, cfg.train, train_set, val_set, [&](const EpochRecord& r) {
    if (log) {
      *log << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.train_loss;
      if (r.val_miou) *log << " val_miou " << *r.val_miou;
      *log << "\n";
    }
  });
  save_params(result.params, out_dir);
  write_text_file(out_dir / "history.csv", history_csv(result.history));
  return {result.history, parameter_count(result.params)};
}

// ---------------------------------------------------------------------------
// Evaluation and trimap

inline json iou_json(const IouResult& iou) {
  json per = json::array();
  for (const auto& v : iou.per_class) per.push_back(v ? json(*v) : json(nullptr));
  return {{"miou", iou.miou ? json(*iou.miou) : json(nullptr)}, {"per_class_iou", per}};
}

// Predictions for a split; with predict_gt the ground truth itself is used
// as the prediction (ignore pixels become class 0), which checks the
// evaluation plumbing independently of any model.
inline std::vector<SegMap> split_predictions(const ExperimentConfig& cfg, const fs::path& params_dir,
                                             const std::vector<Scene>& scenes, bool predict_gt) {
  if (predict_gt) {
    std::vector<SegMap> out;
    for (const auto& s : scenes) {
      auto p = s.gt;
      for (auto& l : p.labels) l = l == kIgnoreLabel ? 0 : l;
      out.push_back(std::move(p));
    }
    return out;
  }
  auto params = load_params_for(cfg.model, params_dir);
  return predict(cfg.model, params, scenes);
}

inline IouResult cmd_eval(const ExperimentConfig& cfg, const fs::path& params_dir, const std::string& split,
                          const fs::path& out_dir, bool force, bool predict_gt = false) {
  cfg.validate();
  const auto scenes = load_split(cfg.data.dir, split);
  if (scenes.empty()) throw ValidationError("eval: split '" + split + "' is empty");
  const auto pred = split_predictions(cfg, params_dir, scenes, predict_gt);
  const auto conf = evaluate(pred, scenes, cfg.model.classes);
  const auto iou = mean_iou(conf);
  prepare_output_dir(out_dir, force);
  write_run_stamp(out_dir, cfg);
  auto doc = iou_json(iou);
  doc["split"] = split;
  doc["images"] = scenes.size();
  doc["evaluated_pixels"] = conf.total();
  doc["predictions"] = predict_gt ? "ground-truth" : "model";
  write_text_file(out_dir / "metrics.json", doc.dump(2) + "\n");
  return iou;
}

inline std::vector<TrimapPoint> trimap_curve(const std::vector<SegMap>& pred, const std::vector<Scene>& scenes,
                                             const std::vector<double>& radii, std::size_t classes) {
  TrimapAccumulator acc(radii, classes);
  for (std::size_t i = 0; i < pred.size(); ++i) acc.add(pred[i], scenes.at(i).gt);
  return acc.curve();
}

inline std::vector<TrimapPoint> cmd_trimap(const ExperimentConfig& cfg, const fs::path& params_dir,
                                           const std::string& split, const fs::path& out_dir, bool force,
                                           bool predict_gt = false) {
  cfg.validate();
  const auto scenes = load_split(cfg.data.dir, split);
  if (scenes.empty()) throw ValidationError("trimap: split '" + split + "' is empty");
  const auto pred = split_predictions(cfg, params_dir, scenes, predict_gt);
  const auto curve = trimap_curve(pred, scenes, cfg.radii, cfg.model.classes);
  prepare_output_dir(out_dir, force);
  write_run_stamp(out_dir, cfg);
  std::ostringstream csv;
  write_trimap_csv(csv, curve, cfg.model.classes);
  write_text_file(out_dir / "trimap.csv", csv.str());
  return curve;
}

// ---------------------------------------------------------------------------
// Kernel benchmark: plain vs guided upsampling in single precision.

struct BenchOptions {
  SampleMode mode = SampleMode::bilinear;
  std::size_t out_h = 512, out_w = 1024, channels = 19, ratio = 2;
  std::size_t repetitions = 20, warmup = 2;
  std::uint64_t seed = 0;
};

struct BenchResult {
  std::vector<double> plain_seconds, guided_seconds;
  double plain_median = 0, guided_median = 0;
  double plain_mpix_per_s = 0, guided_mpix_per_s = 0;
  double ratio = 0;  // guided / plain time
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline BenchResult run_bench(const BenchOptions& o) {
  if (o.ratio == 0 || o.out_h % o.ratio || o.out_w % o.ratio) {
    throw ValidationError("bench: output extents must be divisible by the ratio");
  }
  if (o.repetitions == 0) throw ValidationError("bench: repetitions must be positive");
  const std::size_t h = o.out_h / o.ratio, w = o.out_w / o.ratio;
  Rng rng(o.seed);
  Tensor<float> U({1, o.channels, h, w});
  for (auto& v : U.data()) v = static_cast<float>(rng.uniform(-1, 1));
  Tensor<float> offsets({1, 2, o.out_h, o.out_w});
  for (auto& v : offsets.data()) v = static_cast<float>(rng.uniform(-1, 1));
  const auto grid = make_regular_grid(h, w, o.out_h, o.out_w);

  using clock = std::chrono::steady_clock;
  auto time = [&](auto&& fn, std::vector<double>& out) {
    for (std::size_t i = 0; i < o.warmup + o.repetitions; ++i) {
      const auto t0 = clock::now();
      auto r = fn();
      const auto t1 = clock::now();
      // Keep the result observable so the call is not elided.
      if (r.size() == 0) throw Error("bench: empty result");
      if (i >= o.warmup) out.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
  };
  BenchResult r;
  time([&] {
    return o.mode == SampleMode::bilinear ? resize_bilinear(U, o.out_h, o.out_w)
                                          : resize_nearest(U, o.out_h, o.out_w);
  }, r.plain_seconds);
  time([&] { return guided_sample(U, grid, &offsets, o.mode); }, r.guided_seconds);
  r.plain_median = median(r.plain_seconds);
  r.guided_median = median(r.guided_seconds);
  const double mpix = static_cast<double>(o.out_h * o.out_w) / 1e6;
  r.plain_mpix_per_s = mpix / r.plain_median;
  r.guided_mpix_per_s = mpix / r.guided_median;
  r.ratio = r.guided_median / r.plain_median;
  return r;
}

inline json bench_json(const BenchOptions& o, const BenchResult& r) {
  return {{"mode", to_string(o.mode)},
          {"extents", {o.out_h, o.out_w}},
          {"channels", o.channels},
          {"ratio", o.ratio},
          {"precision", "float32"},
          {"threads", 1},
          {"repetitions", o.repetitions},
          {"warmup", o.warmup},
          {"plain_seconds", r.plain_seconds},
          {"guided_seconds", r.guided_seconds},
          {"plain_median_s", r.plain_median},
          {"guided_median_s", r.guided_median},
          {"plain_mpix_per_s", r.plain_mpix_per_s},
          {"guided_mpix_per_s", r.guided_mpix_per_s},
          {"guided_over_plain_time", r.ratio}};
}

inline BenchResult cmd_bench(const ExperimentConfig& cfg, const BenchOptions& o, const fs::path& out_dir,
                             bool force) {
  auto r = run_bench(o);
  prepare_output_dir(out_dir, force);
  write_run_stamp(out_dir, cfg);
  write_text_file(out_dir / "bench.json", bench_json(o, r).dump(2) + "\n");
  return r;
}

// ---------------------------------------------------------------------------
// Gradient checks

struct GradCheckRow {
  std::string component;
  double max_rel_error = 0;
  std::size_t checked = 0, skipped = 0;
  double tolerance = 0;
  bool passed = false;
  std::string note;
};

// Offsets whose sample coordinate lies within `margin` of an integer sit on
// a kink of the hat function (or the border clamp) and are skipped.
inline ad::SkipFn guided_kink_skip(const SamplingGrid& grid, const Tensor<double>& offsets, std::size_t input,
                                   double margin = 1e-3) {
  return [&grid, &offsets, input, margin](std::size_t i, std::size_t k) {
    if (i != input) return false;
    const std::size_t plane = grid.out_h * grid.out_w;
    const std::size_t ch = (k / plane) % 2, pix = k % plane;
    const double base = ch == 0 ? grid.x(pix % grid.out_w) : grid.y(pix / grid.out_w);
    const double c = base + offsets[k];
    return std::abs(c - std::round(c)) < margin;
  };
}

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// One random guided-bilinear instance: U [N,C,h,w] upsampled by `ratio`,
// offsets in [-1.5, 1.5], scalar = weighted sum of the output.
inline ad::GradCheckReport check_guided(Rng& rng, std::size_t N, std::size_t C, std::size_t h, std::size_t w,
                                        std::size_t ratio, SampleMode mode) {
  const auto grid = make_regular_grid(h, w, h * ratio, w * ratio);
  auto U = random_tensor(rng, {N, C, h, w});
  auto offsets = random_tensor(rng, {N, 2, h * ratio, w * ratio}, -1.5, 1.5);
  const auto weights = random_tensor(rng, {N, C, h * ratio, w * ratio});
  ad::ScalarFn f = [&](ad::Tape&, std::span<const ad::Var> in) {
    return ad::weighted_sum(ad::guided_sample(in[0], grid, in[1], mode), weights);
  };
  // Nearest mode only has a gradient with respect to U.
  ad::SkipFn skip = mode == SampleMode::nearest
                        ? ad::SkipFn([](std::size_t i, std::size_t) { return i == 1; })
                        : guided_kink_skip(grid, offsets, 1);
  return ad::finite_diff_check(f, {U, offsets}, 1e-5, skip);
}

// Finite differences over the parameters of a whole model (a subset of
// coordinates per tensor), scalar = cross-entropy on a random batch.
inline ad::GradCheckReport check_model_params(const ModelConfig& cfg, std::uint64_t seed, std::size_t extent,
                                              std::size_t per_tensor = 6, double eps = 1e-6) {
  auto store = build_params(cfg, seed);
  Rng rng(seed + 1);
  // Perturb the zero-initialized guidance output so every path carries
  // gradient.
  for (auto& [name, t] : store.params()) {
    if (name.rfind("guide.offsets", 0) == 0) {
      for (auto& v : t.data()) v = rng.uniform(-0.3, 0.3);
    }
  }
  const auto image = random_tensor(rng, {2, 3, extent, extent}, 0, 1);
  std::vector<std::uint8_t> targets(2 * extent * extent);
  for (auto& t : targets) t = static_cast<std::uint8_t>(rng.integer(0, static_cast<std::int64_t>(cfg.classes) - 1));

  auto loss_of = [&](ParamStore& s, ad::Gradients* grads) {
    ParamStore scratch = s;  // training-mode norms update running stats
    ad::Tape tape;
    Layers L(tape, scratch, true);
    auto out = gun_forward(L, tape.constant(image), cfg);
    auto loss = ad::softmax_cross_entropy(out.logits, targets).loss;
    if (grads) *grads = tape.backward(loss);
    return loss.value()[0];
  };
  ad::Gradients grads;
  loss_of(store, &grads);

  ad::GradCheckReport report;
  std::size_t input = 0;
  for (auto& [name, t] : store.params()) {
    const auto& g = grads.of(name);
    const std::size_t n = std::min(per_tensor, t.size());
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = n == t.size() ? j : static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(t.size()) - 1));
      const double x0 = t[k];
      t[k] = x0 + eps;
      const double fp = loss_of(store, nullptr);
      t[k] = x0 - eps;
      const double fm = loss_of(store, nullptr);
      t[k] = x0;
      const double numeric = (fp - fm) / (2 * eps);
      const double err = ad::relative_error(g[k], numeric);
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = {input, k};
      }
    }
    ++input;
  }
  return report;
}

inline std::vector<std::string> gradcheck_components() {
  return {"gum-bilinear", "gum-nearest", "conv2d", "batch-norm", "relu", "merge-sum", "merge-concat",
          "resize-bilinear", "cross-entropy", "net"};
}

inline GradCheckRow run_gradcheck(const std::string& component, std::uint64_t seed, std::size_t extent) {
  if (extent < 2 || extent > 5) throw ValidationError("grad-check: extent must be in [2, 5]");
  Rng rng(seed);
  GradCheckRow row{component, 0, 0, 0, 1e-4, false, ""};
  ad::GradCheckReport rep;
  const std::size_t e = extent;
  auto weights_for = [&](const Shape& s) { return random_tensor(rng, s); };

  if (component == "gum-bilinear") {
    rep = check_guided(rng, 1, 3, e, e, 2, SampleMode::bilinear);
  } else if (component == "gum-nearest") {
    rep = check_guided(rng, 1, 3, e, e, 2, SampleMode::nearest);
    row.note = "offset path not differentiable; checked w.r.t. U only";
  } else if (component == "conv2d") {
    auto x = random_tensor(rng, {2, 3, e, e});
    auto k = random_tensor(rng, {2, 3, 3, 3});
    auto b = random_tensor(rng, {2});
    const ConvGeometry geom{1, 1, 1};
    const auto w = weights_for({2, 2, e, e});
    rep = ad::finite_diff_check(
        [&](ad::Tape&, std::span<const ad::Var> in) {
          return ad::weighted_sum(ad::conv2d(in[0], in[1], in[2], geom), w);
        },
        {x, k, b});
  } else if (component == "batch-norm") {
    auto x = random_tensor(rng, {2, 3, e, e});
    auto gamma = random_tensor(rng, {3}, 0.5, 1.5);
    auto beta = random_tensor(rng, {3});
    const auto w = weights_for({2, 3, e, e});
    rep = ad::finite_diff_check(
        [&](ad::Tape&, std::span<const ad::Var> in) {
          ad::NormStats running{Tensor<double>({3}, 0.0), Tensor<double>({3}, 1.0)};
          return ad::weighted_sum(ad::batch_norm(in[0], in[1], in[2], running, {}), w);
        },
        {x, gamma, beta});
  } else if (component == "relu") {
    auto x = random_tensor(rng, {1, 2, e, e});
    const auto w = weights_for({1, 2, e, e});
    rep = ad::finite_diff_check(
        [&](ad::Tape&, std::span<const ad::Var> in) { return ad::weighted_sum(ad::relu(in[0]), w); }, {x}, 1e-5,
        [&](std::size_t, std::size_t k) { return std::abs(x[k]) < 1e-3; });
  } else if (component == "merge-sum" || component == "merge-concat") {
    const bool concat = component == "merge-concat";
    auto a = random_tensor(rng, {1, 2, e, e});
    auto b = random_tensor(rng, {1, concat ? 3u : 2u, e, e});
    const auto w = weights_for({1, concat ? 5u : 2u, e, e});
    rep = ad::finite_diff_check(
        [&](ad::Tape&, std::span<const ad::Var> in) {
          return ad::weighted_sum(ad::merge(in[0], in[1], concat ? MergeMode::concat : MergeMode::sum), w);
        },
        {a, b});
  } else if (component == "resize-bilinear") {
    auto x = random_tensor(rng, {1, 2, e, e});
    const auto w = weights_for({1, 2, 2 * e + 1, 2 * e + 1});
    rep = ad::finite_diff_check(
        [&](ad::Tape&, std::span<const ad::Var> in) {
          return ad::weighted_sum(ad::resize_bilinear(in[0], 2 * e + 1, 2 * e + 1), w);
        },
        {x});
  } else if (component == "cross-entropy") {
    auto logits = random_tensor(rng, {2, 4, e, e}, -2, 2);
    std::vector<std::uint8_t> targets(2 * e * e);
    for (auto& t : targets) t = static_cast<std::uint8_t>(rng.integer(0, 3));
    targets[0] = kIgnoreLabel;
    rep = ad::finite_diff_check(
        [&](ad::Tape&, std::span<const ad::Var> in) { return ad::softmax_cross_entropy(in[0], targets).loss; },
        {logits});
  } else if (component == "net") {
    // Miniature model: input 3x16x16, 3 classes, widths <= 8.
    ModelConfig cfg;
    cfg.classes = 3;
    cfg.widths = {4, 4, 8};
    cfg.postproc_width = 6;
    cfg.guidance->widths = {4, 4};
    rep = check_model_params(cfg, seed, 16);
    row.tolerance = 1e-3;
  } else {
    throw ConfigError("grad-check: unknown component '" + component + "'");
  }
  row.max_rel_error = rep.max_rel_error;
  row.checked = rep.checked;
  row.skipped = rep.skipped.size();
  row.passed = rep.passed(row.tolerance);
  if (!rep.non_finite.empty()) row.note = "non-finite function values at perturbed points";
  return row;
}

inline std::string gradcheck_csv(const std::vector<GradCheckRow>& rows) {
  std::string out = "component,max_rel_error,checked,skipped,tolerance,status,note\n";
  for (const auto& r : rows) {
    out += r.component + "," + fmt_double(r.max_rel_error) + "," + std::to_string(r.checked) + "," +
           std::to_string(r.skipped) + "," + fmt_double(r.tolerance) + "," + (r.passed ? "pass" : "fail") + "," +
           r.note + "\n";
  }
  return out;
}

inline std::vector<GradCheckRow> cmd_gradcheck(const ExperimentConfig& cfg, const std::vector<std::string>& components,
                                               std::uint64_t seed, std::size_t extent, const fs::path& out_dir,
                                               bool force) {
  std::vector<GradCheckRow> rows;
  for (const auto& c : components) rows.push_back(run_gradcheck(c, seed, extent));
  prepare_output_dir(out_dir, force);
  write_run_stamp(out_dir, cfg);
  write_text_file(out_dir / "gradcheck.csv", gradcheck_csv(rows));
  return rows;
}

}  // namespace gun
