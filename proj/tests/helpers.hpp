#pragma once

#include "gun/params.hpp"
#include "gun/tensor.hpp"
#include "oracles.hpp"

namespace testing_util {

inline oracle::Block to_block(const gun::Tensor<double>& t) {
  oracle::Block b(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
  b.v.assign(t.data().begin(), t.data().end());
  return b;
}

inline gun::Tensor<double> to_tensor(const oracle::Block& b) {
  return gun::Tensor<double>({b.N, b.C, b.H, b.W}, b.v);
}

inline gun::Tensor<double> random(gun::Rng& rng, gun::Shape shape, double lo = -1, double hi = 1) {
  gun::Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Uniform index in [0, n).
inline std::size_t pick(gun::Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(n) - 1));
}

inline double max_abs_diff(const gun::Tensor<double>& a, const gun::Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testing_util
