#pragma once

// Named layer helpers on top of the tape. A Layers context binds parameters
// by name from a ParamStore; when an initializer Rng is supplied, missing
// parameters are created on first use, which is how a model's parameter set
// is derived from its forward pass.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>

#include "gun/autodiff.hpp"
#include "gun/params.hpp"

namespace gun {

class Layers {
 public:
  Layers(ad::Tape& tape, ParamStore& store, bool training, Rng* init = nullptr)
      : tape_(tape), store_(store), training_(training), init_(init) {}

  ad::Tape& tape() { return tape_; }
  ParamStore& store() { return store_; }
  bool training() const { return training_; }

  enum class Init { he_normal, zeros, ones };

  ad::Var param(const std::string& name, const Shape& shape, Init init, std::size_t fan_in = 1) {
    if (!store_.has_param(name)) {
      if (!init_) throw ConfigError("missing parameter '" + name + "'");
      Tensor<double> t(shape, 0.0);
      if (init == Init::ones) {
        t.fill(1.0);
      } else if (init == Init::he_normal) {
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& v : t.data()) v = sd * init_->normal();
      }
      store_.add_param(name, std::move(t));
    }
    const auto& value = store_.param(name);
    if (value.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + to_string(value.shape()) +
                       ", layer expects " + to_string(shape));
    }
    return tape_.param(name, value);
  }

  Tensor<double>& buffer(const std::string& name, std::size_t channels, double fill) {
    if (!store_.has_buffer(name)) {
      if (!init_) throw ConfigError("missing buffer '" + name + "'");
      store_.add_buffer(name, Tensor<double>({channels}, fill));
    }
    auto& b = store_.buffer(name);
    if (b.shape() != Shape{channels}) {
      throw ShapeError("buffer '" + name + "' has shape " + to_string(b.shape()) +
                       ", layer expects [" + std::to_string(channels) + "]");
    }
    return b;
  }

  ad::Var conv(const std::string& name, const ad::Var& x, std::size_t out_ch, std::size_t k,
               ConvGeometry geom = {}, bool bias = false, bool zero_init = false) {
    const std::size_t in_ch = x.shape().at(1);
    auto w = param(name + ".weight", {out_ch, in_ch, k, k},
                   zero_init ? Init::zeros : Init::he_normal, in_ch * k * k);
    std::optional<ad::Var> b;
    if (bias) b = param(name + ".bias", {out_ch}, Init::zeros);
    return ad::conv2d(x, w, b, geom);
  }

  // Normalization with trainable affine parameters `name`.{gamma,beta} and
  // running statistics stored under `stats` (which may differ from `name`
  // when affine parameters are shared but statistics are not).
  ad::Var norm(const std::string& name, const std::string& stats, const ad::Var& x) {
    const std::size_t C = x.shape().at(1);
    auto gamma = param(name + ".gamma", {C}, Init::ones);
    auto beta = param(name + ".beta", {C}, Init::zeros);
    auto& mean = buffer(stats + ".running_mean", C, 0.0);
    auto& var = buffer(stats + ".running_var", C, 1.0);
    ad::NormStats running{mean, var};
    ad::NormOptions opt;
    opt.training = training_;
    auto y = ad::batch_norm(x, gamma, beta, running, opt);
    if (training_) {
      mean = running.mean;
      var = running.variance;
    }
    return y;
  }

  // conv (no bias) -> norm -> relu
  ad::Var cbr(const std::string& name, const std::string& stats, const ad::Var& x,
              std::size_t out_ch, std::size_t k, ConvGeometry geom) {
    return ad::relu(norm(name + ".bn", stats + ".bn", conv(name + ".conv", x, out_ch, k, geom)));
  }

 private:
  ad::Tape& tape_;
  ParamStore& store_;
  bool training_;
  Rng* init_;
};

inline ConvGeometry same_3x3(std::size_t dilation = 1) { return {1, dilation, dilation}; }

}  // namespace gun
