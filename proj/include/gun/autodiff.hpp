#pragma once

// Reverse-mode differentiation over the operator set. A Tape records nodes in
// execution order; backward() walks them in exact reverse order. Values are
// double precision throughout.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gun/gum.hpp"
#include "gun/ops.hpp"
#include "gun/tensor.hpp"

namespace gun::ad {

using Tensor = gun::Tensor<double>;

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Receives the output cotangent, the input values and one accumulator per
// input; accumulators of inputs that do not require gradients are null.
using Inputs = std::span<const Tensor* const>;
using Slots = std::span<Tensor* const>;
using BackwardFn = std::function<void(const Tensor& grad_out, Inputs in, Slots grads)>;

class Gradients {
 public:
  const Tensor& of(const Var& v) const { return by_node_.at(v.id()); }
  const Tensor& of(const std::string& name) const { return by_name_.at(name); }
  bool contains(const std::string& name) const { return by_name_.count(name) > 0; }
  const std::map<std::string, Tensor>& by_name() const { return by_name_; }

 private:
  friend class Tape;
  std::vector<Tensor> by_node_;
  std::map<std::string, Tensor> by_name_;
};

class Tape {
 public:
  Tape() = default;
  // With gradients disabled, param() binds constants and nothing keeps a
  // backward closure; used for inference.
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Value that never receives a gradient.
  Var constant(Tensor value) {
    nodes_.push_back(Node{"constant", std::move(value), {}, {}, false, {}});
    return Var(this, nodes_.size() - 1);
  }

  // Anonymous differentiable leaf.
  Var leaf(Tensor value) {
    nodes_.push_back(Node{"leaf", std::move(value), {}, {}, grad_enabled_, {}});
    return Var(this, nodes_.size() - 1);
  }

  // Named parameter leaf. Binding the same name twice returns the same node,
  // so shared parameters accumulate gradients from every use.
  Var param(const std::string& name, const Tensor& value) {
    if (auto it = params_.find(name); it != params_.end()) {
      return Var(this, it->second);
    }
    nodes_.push_back(Node{"param", value, {}, {}, grad_enabled_, name});
    params_.emplace(name, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
  }

  Var record(std::string_view op, Tensor value, std::vector<Var> inputs,
             BackwardFn backward) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& v : inputs) {
      if (&v.tape() != this) {
        throw ValidationError("autodiff: operand recorded on a different tape");
      }
      ids.push_back(v.id());
      needs = needs || nodes_[v.id()].requires_grad;
    }
    nodes_.push_back(Node{std::string(op), std::move(value), std::move(ids),
                          needs ? std::move(backward) : BackwardFn{}, needs, {}});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  // Gradients of a scalar with respect to every recorded node. Named
  // parameters that the loss does not depend on get zero tensors.
  Gradients backward(const Var& loss) {
    if (&loss.tape() != this) {
      throw ValidationError("backward: loss belongs to a different tape");
    }
    if (consumed_) {
      throw UnsupportedError("backward: tape already differentiated; higher-order "
                             "derivatives are not supported");
    }
    if (value(loss.id()).size() != 1) {
      throw ValidationError("backward: loss must be a scalar, got shape " +
                            to_string(value(loss.id()).shape()));
    }
    consumed_ = true;
    Gradients out;
    auto& grads = out.by_node_;
    grads.resize(nodes_.size());
    grads[loss.id()] = Tensor(value(loss.id()).shape(), 1.0);

    std::vector<Tensor*> slots;
    std::vector<const Tensor*> values;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || grads[i].empty()) continue;
      slots.assign(node.inputs.size(), nullptr);
      values.assign(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t in = node.inputs[k];
        values[k] = &nodes_[in].value;
        if (!nodes_[in].requires_grad) continue;
        if (grads[in].empty()) grads[in] = Tensor::zeros_like(nodes_[in].value);
        slots[k] = &grads[in];
      }
      node.backward(grads[i], values, slots);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].requires_grad && grads[i].empty()) {
        grads[i] = Tensor::zeros_like(nodes_[i].value);
      }
    }
    for (const auto& [name, id] : params_) out.by_name_.emplace(name, grads[id]);
    return out;
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::string name;
  };

  std::deque<Node> nodes_;  // deque keeps value references stable
  std::map<std::string, std::size_t> params_;
  bool consumed_ = false;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {
inline void accumulate(Tensor* slot, const Tensor& g) {
  if (!slot) return;
  auto& s = *slot;
  for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Recorded operators

inline Var sum(const Var& x) {
  double s = 0;
  for (double v : x.value().data()) s += v;
  return x.tape().record("sum", Tensor({1}, s), {x},
                         [](const Tensor& g, Inputs in, Slots out) {
                           detail::accumulate(out[0], Tensor(in[0]->shape(), g[0]));
                         });
}

// sum(x * weights) for a constant weight tensor.
inline Var weighted_sum(const Var& x, const Tensor& weights) {
  gun::detail::require_same_shape(x.value(), weights, "weighted_sum");
  double s = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += x.value()[i] * weights[i];
  return x.tape().record("weighted_sum", Tensor({1}, s), {x},
                         [weights](const Tensor& g, Inputs, Slots out) {
                           if (!out[0]) return;
                           for (std::size_t i = 0; i < weights.size(); ++i) {
                             (*out[0])[i] += g[0] * weights[i];
                           }
                         });
}

inline Var square(const Var& x) {
  const Tensor& v = x.value();
  Tensor y(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) y[i] = v[i] * v[i];
  return x.tape().record("square", std::move(y), {x},
                         [](const Tensor& g, Inputs in, Slots out) {
                           if (!out[0]) return;
                           const Tensor& v = *in[0];
                           for (std::size_t i = 0; i < v.size(); ++i) {
                             (*out[0])[i] += 2.0 * v[i] * g[i];
                           }
                         });
}

inline Var scale(const Var& x, double a) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a * x.value()[i];
  return x.tape().record("scale", std::move(y), {x},
                         [a](const Tensor& g, Inputs, Slots out) {
                           if (!out[0]) return;
                           for (std::size_t i = 0; i < g.size(); ++i) (*out[0])[i] += a * g[i];
                         });
}

inline Var add(const Var& a, const Var& b) {
  return a.tape().record("add", gun::merge(a.value(), b.value(), MergeMode::sum),
                         {a, b},
                         [](const Tensor& g, Inputs, Slots out) {
                           detail::accumulate(out[0], g);
                           detail::accumulate(out[1], g);
                         });
}

inline Var merge(const Var& a, const Var& b, MergeMode mode) {
  if (mode == MergeMode::sum) return add(a, b);
  return a.tape().record(
      "concat", gun::merge(a.value(), b.value(), MergeMode::concat), {a, b},
      [](const Tensor& g, Inputs in, Slots out) {
        const std::size_t ca = in[0]->dim(1), cb = in[1]->dim(1);
        if (out[0]) detail::accumulate(out[0], channel_slice(g, 0, ca));
        if (out[1]) detail::accumulate(out[1], channel_slice(g, ca, cb));
      });
}

inline Var relu(const Var& x) {
  return x.tape().record("relu", gun::relu(x.value()), {x},
                         [](const Tensor& g, Inputs in, Slots out) {
                           if (out[0]) detail::accumulate(out[0], relu_backward(*in[0], g));
                         });
}

inline Var conv2d(const Var& x, const Var& kernel, const std::optional<Var>& bias,
                  const ConvGeometry& geometry) {
  Tensor y = gun::conv2d(x.value(), kernel.value(),
                         bias ? &bias->value() : nullptr, geometry);
  std::vector<Var> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return x.tape().record(
      "conv2d", std::move(y), std::move(inputs),
      [geometry](const Tensor& g, Inputs in, Slots out) {
        const bool has_bias = in.size() > 2;
        auto grads = conv2d_backward(*in[0], *in[1], has_bias, geometry, g);
        detail::accumulate(out[0], grads.input);
        detail::accumulate(out[1], grads.kernel);
        if (has_bias) detail::accumulate(out[2], grads.bias);
      });
}

// Running statistics for normalization in eval mode.
struct NormStats {
  Tensor mean;
  Tensor variance;
};

struct NormOptions {
  bool training = true;
  double epsilon = 1e-5;
  double momentum = 0.1;  // running-stat update rate
};

// Batch normalization: batch statistics in training mode (the running
// statistics are updated as a side effect), frozen running statistics in
// eval mode.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta,
                      NormStats& running, const NormOptions& opt) {
  ChannelStats<double> stats;
  if (opt.training) {
    stats = channel_moments(x.value());
    for (std::size_t c = 0; c < stats.mean.size(); ++c) {
      running.mean[c] = (1 - opt.momentum) * running.mean[c] + opt.momentum * stats.mean[c];
      running.variance[c] =
          (1 - opt.momentum) * running.variance[c] + opt.momentum * stats.variance[c];
    }
  } else {
    stats = {running.mean, running.variance};
  }
  Tensor y = scale_shift_norm(x.value(), gamma.value(), beta.value(), stats, opt.epsilon);
  return x.tape().record(
      "batch_norm", std::move(y), {x, gamma, beta},
      [stats = std::move(stats), eps = opt.epsilon, batch = opt.training](
          const Tensor& g, Inputs in, Slots out) {
        auto grads = scale_shift_norm_backward(*in[0], *in[1], stats, eps, batch, g);
        detail::accumulate(out[0], grads.input);
        detail::accumulate(out[1], grads.gamma);
        detail::accumulate(out[2], grads.beta);
      });
}

inline Var resize_bilinear(const Var& x, std::size_t out_h, std::size_t out_w) {
  return x.tape().record(
      "resize_bilinear", gun::resize_bilinear(x.value(), out_h, out_w), {x},
      [](const Tensor& g, Inputs in, Slots out) {
        if (out[0]) detail::accumulate(out[0], resize_bilinear_backward(in[0]->shape(), g));
      });
}

inline Var guided_sample(const Var& U, const SamplingGrid& grid,
                         const std::optional<Var>& offsets, SampleMode mode) {
  Tensor y = gun::guided_sample(U.value(), grid, offsets ? &offsets->value() : nullptr,
                                mode);
  std::vector<Var> inputs{U};
  if (offsets) inputs.push_back(*offsets);
  return U.tape().record(
      mode == SampleMode::nearest ? "guided_nearest" : "guided_bilinear",
      std::move(y), std::move(inputs),
      [grid, mode](const Tensor& g, Inputs in, Slots out) {
        const Tensor* offsets = in.size() > 1 ? in[1] : nullptr;
        auto grads = guided_sample_backward(g, *in[0], grid, offsets, mode);
        detail::accumulate(out[0], grads.input);
        if (out.size() > 1) detail::accumulate(out[1], grads.offsets);
      });
}

struct LossResult {
  Var loss;
  std::size_t counted = 0;
  bool all_ignored = false;  // loss is 0 by convention when set
};

inline LossResult softmax_cross_entropy(const Var& logits,
                                        std::vector<std::uint8_t> targets,
                                        std::uint8_t ignore_index = kIgnoreLabel) {
  auto ce = gun::softmax_cross_entropy(logits.value(), targets, ignore_index);
  LossResult r;
  r.counted = ce.counted;
  r.all_ignored = ce.all_ignored;
  const double value = ce.loss;
  r.loss = logits.tape().record(
      "softmax_cross_entropy", Tensor({1}, value), {logits},
      [ce = std::move(ce), targets = std::move(targets), ignore_index](
          const Tensor& g, Inputs, Slots out) {
        if (out[0]) {
          detail::accumulate(out[0],
                             softmax_cross_entropy_backward(ce, targets, g[0], ignore_index));
        }
      });
  return r;
}

}  // namespace gun::ad
