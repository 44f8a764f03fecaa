#pragma once

// Training loop (SGD with momentum, step learning-rate policy, optional
// random-scale augmentation) and batched inference/evaluation.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gun/data.hpp"
#include "gun/metrics.hpp"
#include "gun/net.hpp"
#include "gun/optim.hpp"

namespace gun {

enum class Augment { none, random_scale };

inline const char* to_string(Augment a) { return a == Augment::none ? "none" : "random-scale"; }

inline Augment parse_augment(const std::string& s) {
  if (s == "none") return Augment::none;
  if (s == "random-scale") return Augment::random_scale;
  throw ConfigError("unknown augmentation '" + s + "' (expected none or random-scale)");
}

struct TrainRecipe {
  std::size_t epochs = 50;
  std::size_t batch = 8;
  double base_lr = 0.001;
  double momentum = 0.9;
  std::size_t lr_step_epochs = 100;
  std::uint64_t seed = 0;
  Augment augment = Augment::none;

  void validate() const {
    if (epochs == 0) throw ConfigError("train: epochs must be positive");
    if (batch == 0) throw ConfigError("train: batch must be positive");
    if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("train: base_lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must be in [0, 1)");
    if (lr_step_epochs == 0) throw ConfigError("train: lr_step_epochs must be positive");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_miou;  // empty when there is no validation data or it is undefined
};

struct TrainResult {
  ParamStore params;
  std::vector<EpochRecord> history;
};

struct Batch {
  Tensor<double> images;              // [B, 3, H, W]
  std::vector<std::uint8_t> targets;  // B * H * W
};

inline Batch make_batch(const std::vector<Scene>& scenes, const std::vector<std::size_t>& index) {
  if (index.empty()) throw ValidationError("make_batch: empty batch");
  const auto& first = scenes.at(index[0]).image;
  const std::size_t C = first.dim(0), H = first.dim(1), W = first.dim(2);
  Batch b{Tensor<double>({index.size(), C, H, W}), {}};
  b.targets.reserve(index.size() * H * W);
  for (std::size_t k = 0; k < index.size(); ++k) {
    const auto& s = scenes.at(index[k]);
    if (s.image.shape() != first.shape() || s.gt.height != H || s.gt.width != W) {
      throw ShapeError("make_batch: scenes in a batch must share extents");
    }
    std::copy(s.image.data().begin(), s.image.data().end(), b.images.ptr() + k * C * H * W);
    b.targets.insert(b.targets.end(), s.gt.labels.begin(), s.gt.labels.end());
  }
  return b;
}

// Inference logits for a batch of images, normalization in eval mode.
inline Tensor<double> predict_logits(const ModelConfig& cfg, ParamStore& params, const Tensor<double>& images) {
  ad::Tape tape(false);
  Layers L(tape, params, /*training=*/false);
  return gun_forward(L, tape.constant(images), cfg).logits.value();
}

inline std::vector<SegMap> predict(const ModelConfig& cfg, ParamStore& params, const std::vector<Scene>& scenes,
                                   std::size_t batch = 16) {
  std::vector<SegMap> out;
  out.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); i += batch) {
    std::vector<std::size_t> idx(std::min(batch, scenes.size() - i));
    std::iota(idx.begin(), idx.end(), i);
    const auto logits = predict_logits(cfg, params, make_batch(scenes, idx).images);
    for (std::size_t k = 0; k < idx.size(); ++k) out.push_back(argmax_labels(logits, k));
  }
  return out;
}

inline ConfusionMatrix evaluate(const std::vector<SegMap>& pred, const std::vector<Scene>& scenes,
                                std::size_t classes) {
  if (pred.size() != scenes.size()) throw ValidationError("evaluate: prediction count differs from scene count");
  ConfusionMatrix conf(classes);
  for (std::size_t i = 0; i < pred.size(); ++i) accumulate_confusion(conf, pred[i], scenes[i].gt);
  return conf;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// Deterministic for a fixed recipe: parameter init, shuffling and
// augmentation draw from separate generators derived from recipe.seed.
inline TrainResult train(const ModelConfig& cfg, const TrainRecipe& recipe, const std::vector<Scene>& train_set,
                         const std::vector<Scene>& val_set, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  recipe.validate();
  if (train_set.empty()) throw ValidationError("train: dataset is empty");
  if (recipe.batch > train_set.size()) {
    throw ValidationError("train: batch " + std::to_string(recipe.batch) + " exceeds dataset size " +
                          std::to_string(train_set.size()));
  }
  TrainResult result{build_params(cfg, recipe.seed), {}};
  auto state = OptimState::for_params(result.params, recipe.momentum, recipe.base_lr);
  Rng order_rng(recipe.seed ^ 0x5DEECE66Dull);
  Rng augment_rng(recipe.seed ^ 0xA5A5A5A5A5A5A5A5ull);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Scene> augmented;

  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    state.epoch = epoch;
    const double lr = step_lr(epoch, recipe.base_lr, recipe.lr_step_epochs);
    order_rng.shuffle(order);
    const std::vector<Scene>* source = &train_set;
    if (recipe.augment == Augment::random_scale) {
      augmented.clear();
      augmented.reserve(train_set.size());
      for (const auto& s : train_set) augmented.push_back(random_scale(s.image, s.gt, augment_rng));
      source = &augmented;
    }
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += recipe.batch) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(order.size(), start + recipe.batch)));
      auto batch = make_batch(*source, idx);
      ad::Tape tape;
      Layers L(tape, result.params, /*training=*/true);
      auto out = gun_forward(L, tape.constant(std::move(batch.images)), cfg);
      auto loss = ad::softmax_cross_entropy(out.logits, std::move(batch.targets));
      const double value = loss.loss.value()[0];
      if (!std::isfinite(value)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(steps));
      }
      const auto grads = tape.backward(loss.loss);
      sgd_momentum_step(result.params, grads.by_name(), state, lr);
      loss_sum += value;
      ++steps;
    }
    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(steps), std::nullopt};
    if (!val_set.empty()) {
      rec.val_miou = mean_iou(evaluate(predict(cfg, result.params, val_set), val_set, cfg.classes)).miou;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace gun
