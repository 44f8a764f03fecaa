#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>

#include "gun/tensor.hpp"

namespace gun {

// Named trainable tensors plus non-trainable buffers (normalization running
// statistics). Names are the identity of a parameter: two layers that use the
// same name share storage.
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<double>>;

 private:
  template <typename M>
  static auto& lookup(M& m, const std::string& name) {
    auto it = m.find(name);
    if (it == m.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

 public:

  Tensor<double>& add_param(const std::string& name, Tensor<double> value) {
    return params_.insert_or_assign(name, std::move(value)).first->second;
  }
  Tensor<double>& add_buffer(const std::string& name, Tensor<double> value) {
    return buffers_.insert_or_assign(name, std::move(value)).first->second;
  }

  bool has_param(const std::string& name) const { return params_.count(name) > 0; }
  bool has_buffer(const std::string& name) const { return buffers_.count(name) > 0; }

  Tensor<double>& param(const std::string& name) { return lookup(params_, name); }
  const Tensor<double>& param(const std::string& name) const {
    return lookup(params_, name);
  }
  Tensor<double>& buffer(const std::string& name) { return lookup(buffers_, name); }
  const Tensor<double>& buffer(const std::string& name) const {
    return lookup(buffers_, name);
  }

  Map& params() { return params_; }
  const Map& params() const { return params_; }
  Map& buffers() { return buffers_; }
  const Map& buffers() const { return buffers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

 private:
  Map params_;
  Map buffers_;
};

// Deterministic random source built on std::mt19937_64, whose output
// sequence is fixed by the standard. Distributions are implemented here
// because the standard library's are implementation-defined.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64";

  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], rejection sampled.
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return lo + static_cast<std::int64_t>(engine_());
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
  }

  // Box-Muller; both halves are consumed in order.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(integer(0, static_cast<std::int64_t>(i - 1)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gun
