// gun: experiment driver for the guided upsampling toolkit.
//
//   gun gen-data  --config C [--out DIR] [--seed N] [--force]
//   gun train     --config C [--out DIR] [--seed N] [--force]
//   gun eval      --config C [--params DIR] [--split S] [--out DIR] [--predict-gt] [--force]
//   gun trimap    --config C [--params DIR] [--split S] [--radii 1,2,4] [--out DIR] [--force]
//   gun bench     [--mode bilinear] [--height 512 --width 1024 --channels 19 --ratio 2] [--reps 20] --out DIR
//   gun grad-check [--component all] [--extent 4] [--seed N] --out DIR
//
// Exit status: 0 on success, 1 when a check fails, 2 on usage or runtime
// errors.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <sstream>

#include "gun/commands.hpp"

namespace {

using namespace gun;

std::vector<double> parse_radii(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--radii: '" + item + "' is not a number");
    }
  }
  validate_radii(out);
  return out;
}

SampleMode parse_sample_mode(const std::string& m) {
  if (m == "nearest" || m == "gum-nearest") return SampleMode::nearest;
  if (m == "bilinear" || m == "gum-bilinear") return SampleMode::bilinear;
  throw ConfigError("--mode must be nearest, bilinear, gum-nearest or gum-bilinear");
}

struct Common {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;

  ExperimentConfig load() const {
    auto cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.train.seed = *seed;
    }
    cfg.validate();
    return cfg;
  }
};

void add_common(CLI::App* app, Common& c, bool config_required) {
  auto* opt = app->add_option("--config", c.config_path, "Experiment config (JSON)");
  if (config_required) opt->required();
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--seed", c.seed, "Override the config seed (data and training)");
  app->add_flag("--force", c.force, "Overwrite a non-empty output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guided upsampling toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Common gen_c, train_c, eval_c, tri_c, bench_c, grad_c;
  std::string eval_params, eval_split = "val", tri_params, tri_split = "val", tri_radii;
  bool eval_gt = false, tri_gt = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_common(gen, gen_c, false);
  std::optional<std::size_t> gen_count;
  gen->add_option("--count", gen_count, "Number of scenes (overrides data.count)");

  auto* tr = app.add_subcommand("train", "Train a model on a generated dataset");
  add_common(tr, train_c, true);

  auto* ev = app.add_subcommand("eval", "Per-class IoU and mIoU on a split");
  add_common(ev, eval_c, true);
  ev->add_option("--params", eval_params, "Training output directory (default: config output_dir)");
  ev->add_option("--split", eval_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_flag("--predict-gt", eval_gt, "Use ground truth as the prediction (plumbing check)");

  auto* tm = app.add_subcommand("trimap", "mIoU within distance bands around ground-truth boundaries");
  add_common(tm, tri_c, true);
  tm->add_option("--params", tri_params, "Training output directory (default: config output_dir)");
  tm->add_option("--split", tri_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  tm->add_option("--radii", tri_radii, "Comma-separated band radii in pixels");
  tm->add_flag("--predict-gt", tri_gt, "Use ground truth as the prediction (plumbing check)");

  auto* be = app.add_subcommand("bench", "Plain vs guided upsampling throughput");
  add_common(be, bench_c, false);
  BenchOptions bo;
  std::string bench_mode = "bilinear";
  be->add_option("--mode", bench_mode, "nearest, bilinear, gum-nearest or gum-bilinear");
  be->add_option("--height", bo.out_h, "Output height");
  be->add_option("--width", bo.out_w, "Output width");
  be->add_option("--channels", bo.channels, "Channels");
  be->add_option("--ratio", bo.ratio, "Upsampling ratio");
  be->add_option("--reps", bo.repetitions, "Timed repetitions (median reported)");
  be->add_option("--warmup", bo.warmup, "Untimed warmup repetitions");

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  add_common(gc, grad_c, false);
  std::vector<std::string> components{"all"};
  std::size_t extent = 4;
  gc->add_option("--component", components, "Components to check (default all)");
  gc->add_option("--extent", extent, "Spatial extent of random instances (2..5)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto cfg = gen_c.load();
      if (gen_count) cfg.data.count = *gen_count;
      cfg.validate();
      const fs::path out = gen_c.out.empty() ? fs::path(cfg.data.dir) : fs::path(gen_c.out);
      const auto r = cmd_gen_data(cfg, out, gen_c.force);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "train " << r.counts[0] << ", val " << r.counts[1] << ", test " << r.counts[2]
                << "\nmanifest fnv1a64 " << r.manifest_hash << "\n";
    } else if (*tr) {
      const auto cfg = train_c.load();
      const fs::path out = train_c.out.empty() ? fs::path(cfg.output_dir) : fs::path(train_c.out);
      const auto r = cmd_train(cfg, out, train_c.force, &std::cerr);
      std::cout << "parameters " << r.parameter_count << "\nwrote " << (out / "history.csv").string() << "\n";
    } else if (*ev) {
      const auto cfg = eval_c.load();
      const fs::path params = eval_params.empty() ? fs::path(cfg.output_dir) : fs::path(eval_params);
      const fs::path out = eval_c.out.empty() ? params / ("eval_" + eval_split) : fs::path(eval_c.out);
      const auto iou = cmd_eval(cfg, params, eval_split, out, eval_c.force, eval_gt);
      std::cout << "miou " << (iou.miou ? fmt_double(*iou.miou) : "undefined") << "\n";
    } else if (*tm) {
      auto cfg = tri_c.load();
      if (!tri_radii.empty()) cfg.radii = parse_radii(tri_radii);
      const fs::path params = tri_params.empty() ? fs::path(cfg.output_dir) : fs::path(tri_params);
      const fs::path out = tri_c.out.empty() ? params / ("trimap_" + tri_split) : fs::path(tri_c.out);
      const auto curve = cmd_trimap(cfg, params, tri_split, out, tri_c.force, tri_gt);
      write_trimap_csv(std::cout, curve, cfg.model.classes);
    } else if (*be) {
      const auto cfg = bench_c.load();
      bo.mode = parse_sample_mode(bench_mode);
      bo.seed = cfg.seed;
      const fs::path out = bench_c.out.empty() ? fs::path("bench") : fs::path(bench_c.out);
      const auto r = cmd_bench(cfg, bo, out, bench_c.force);
      std::cout << "plain  median " << r.plain_median * 1e3 << " ms, " << r.plain_mpix_per_s << " Mpix/s\n"
                << "guided median " << r.guided_median * 1e3 << " ms, " << r.guided_mpix_per_s << " Mpix/s\n"
                << "guided/plain time ratio " << r.ratio << "\n";
    } else if (*gc) {
      const auto cfg = grad_c.load();
      if (components.size() == 1 && components[0] == "all") components = gradcheck_components();
      const fs::path out = grad_c.out.empty() ? fs::path("gradcheck") : fs::path(grad_c.out);
      const auto rows = cmd_gradcheck(cfg, components, cfg.seed, extent, out, grad_c.force);
      std::cout << gradcheck_csv(rows);
      for (const auto& r : rows) {
        if (!r.passed) return 1;
      }
    }
  } catch (const RefusalError& e) {
    std::cerr << "refused: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
