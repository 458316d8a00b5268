#pragma once

#include <cmath>
#include <cstdint>

#include "tokenfusion/rng.hpp"
#include "tokenfusion/tensor.hpp"

namespace tokenfusion::init {

/// Truncated normal: N(0, sigma), resampling any draw outside +-2 sigma.
template <typename T>
void trunc_normal(Tensor<T>& t, Rng& rng, double sigma = 0.02) {
  for (T& v : t.data()) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = static_cast<T>(z * sigma);
  }
}

/// He initialization for conv-style weights: N(0, sqrt(2 / fan_in)).
template <typename T>
void he_normal(Tensor<T>& t, Rng& rng, int64_t fan_in) {
  require(fan_in > 0, "he_normal: fan_in must be positive");
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (T& v : t.data()) v = static_cast<T>(rng.normal() * std_dev);
}

/// Glorot initialization: N(0, sqrt(2 / (fan_in + fan_out))). Preserves
/// activation scale through plain linear maps that sit outside any residual
/// stream.
template <typename T>
void xavier_normal(Tensor<T>& t, Rng& rng, int64_t fan_in, int64_t fan_out) {
  require(fan_in > 0 && fan_out > 0, "xavier_normal: fans must be positive");
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  for (T& v : t.data()) v = static_cast<T>(rng.normal() * std_dev);
}

template <typename T>
void constant(Tensor<T>& t, T value) {
  for (T& v : t.data()) v = value;
}

}  // namespace tokenfusion::init
