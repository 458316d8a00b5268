#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tokenfusion/init.hpp"
#include "tokenfusion/nn.hpp"
#include "tokenfusion/ops.hpp"
#include "tokenfusion/rng.hpp"
#include "tokenfusion/tensor.hpp"

namespace tokenfusion {

/// Flat, ordered collection of named parameter tensors. Registration order is
/// deterministic for a given model config, which fixes the checkpoint layout
/// and makes seeded initialization reproducible.
template <typename T>
class ParamRegistry {
 public:
  Tensor<T> add(std::string name, Tensor<T> t) {
    for (const auto& [existing, _] : entries_)
      require(existing != name, "duplicate parameter name: " + name);
    t.set_requires_grad(true);
    entries_.emplace_back(std::move(name), t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

  Tensor<T> find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return t;
    require(false, "no parameter named " + name);
    return {};
  }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

/// Weight policy for LinearLayer. TruncNormal is the transformer-interior
/// convention; Xavier is for projections outside any residual stream, where
/// a 0.02-scale map would geometrically attenuate everything that chains
/// through it; Zero builds layers that start as exact no-ops.
enum class LinearInit { TruncNormal, Xavier, Zero };

/// y = x W + b with W of shape (in, out). Works on any batch of row vectors:
/// (..., in) -> (..., out).
template <typename T>
struct LinearLayer {
  Tensor<T> weight;
  Tensor<T> bias;

  LinearLayer() = default;
  LinearLayer(ParamRegistry<T>& reg, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
              LinearInit kind = LinearInit::TruncNormal) {
    Tensor<T> w({in, out});
    switch (kind) {
      case LinearInit::TruncNormal: init::trunc_normal(w, rng); break;
      case LinearInit::Xavier: init::xavier_normal(w, rng, in, out); break;
      case LinearInit::Zero: break;
    }
    weight = reg.add(prefix + ".weight", w);
    bias = reg.add(prefix + ".bias", Tensor<T>::zeros({out}));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight;  // (out_ch, in_ch, k, k)
  Tensor<T> bias;    // (out_ch) or undefined
  int64_t stride = 1;
  int64_t padding = 0;

  ConvLayer() = default;
  ConvLayer(ParamRegistry<T>& reg, const std::string& prefix, int64_t in_ch, int64_t out_ch,
            int64_t kernel, int64_t stride_, int64_t padding_, bool with_bias, Rng& rng)
      : stride(stride_), padding(padding_) {
    Tensor<T> w({out_ch, in_ch, kernel, kernel});
    init::he_normal(w, rng, in_ch * kernel * kernel);
    weight = reg.add(prefix + ".weight", w);
    if (with_bias) bias = reg.add(prefix + ".bias", Tensor<T>::zeros({out_ch}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, weight, bias, stride, padding);
  }
};

/// Learned 2x upsampling: transposed conv with kernel = stride = 2, no bias.
template <typename T>
struct TConvLayer {
  Tensor<T> weight;  // (in_ch, out_ch, k, k)
  int64_t stride = 2;

  TConvLayer() = default;
  TConvLayer(ParamRegistry<T>& reg, const std::string& prefix, int64_t in_ch, int64_t out_ch,
             int64_t kernel, int64_t stride_, Rng& rng)
      : stride(stride_) {
    Tensor<T> w({in_ch, out_ch, kernel, kernel});
    init::he_normal(w, rng, in_ch * kernel * kernel);
    weight = reg.add(prefix + ".weight", w);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return transposed_conv2d(x, weight, stride);
  }
};

/// Last-axis layer norm with learned affine, as used inside encoder blocks.
template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  double eps = 1e-5;

  LayerNormParams() = default;
  LayerNormParams(ParamRegistry<T>& reg, const std::string& prefix, int64_t dim) {
    gamma = reg.add(prefix + ".gamma", Tensor<T>::full({dim}, T(1)));
    beta = reg.add(prefix + ".beta", Tensor<T>::zeros({dim}));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
};

/// Per-sample, per-channel normalization over spatial positions with a learned
/// per-channel affine. Statistics never cross the batch axis, so batch size 1
/// behaves identically to any other and finite-difference checks stay exact.
template <typename T>
struct ChannelNorm {
  Tensor<T> gamma;  // (C)
  Tensor<T> beta;   // (C)
  double eps = 1e-5;

  ChannelNorm() = default;
  ChannelNorm(ParamRegistry<T>& reg, const std::string& prefix, int64_t channels) {
    gamma = reg.add(prefix + ".gamma", Tensor<T>::full({channels}, T(1)));
    beta = reg.add(prefix + ".beta", Tensor<T>::zeros({channels}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    require(x.rank() == 4, "channel_norm: expected rank-4 input, got " + shape_str(x.shape()));
    const int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    require(C == gamma.extent(0), "channel_norm: input " + shape_str(x.shape()) +
                                      " does not match " + std::to_string(gamma.extent(0)) +
                                      " channels");
    // Normalize each (sample, channel) row over its H*W positions, then apply
    // the per-channel affine by broadcasting against (C, 1).
    Tensor<T> flat = reshape(x, {B, C, H * W});
    Tensor<T> unit = Tensor<T>::full({H * W}, T(1));
    Tensor<T> zero = Tensor<T>::zeros({H * W});
    Tensor<T> normed = layer_norm(flat, unit, zero, eps);
    Tensor<T> scaled = add(mul(normed, reshape(gamma, {C, 1})),
                                reshape(beta, {C, 1}));
    return reshape(scaled, {B, C, H, W});
  }
};

}  // namespace tokenfusion
