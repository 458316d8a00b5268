#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tokenfusion/ops.hpp"
#include "tokenfusion/tensor.hpp"

namespace tokenfusion {

/// 2-d cross-correlation. x: (B,C,H,W), w: (O,C,kh,kw), optional bias (O).
/// Output spatial extent: floor((H + 2p - kh) / s) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int64_t stride, int64_t padding) {
  require(x.rank() == 4 && w.rank() == 4,
          "conv2d: expected rank-4 input and weight, got " + shape_str(x.shape()) + " and " +
              shape_str(w.shape()));
  require(stride >= 1, "conv2d: stride must be positive");
  require(padding >= 0, "conv2d: padding must be non-negative");
  const int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const int64_t O = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  require(w.extent(1) == C, "conv2d: channel mismatch, input " + shape_str(x.shape()) +
                                " vs weight " + shape_str(w.shape()));
  const int64_t Ho = (H + 2 * padding - kh) / stride + 1;
  const int64_t Wo = (W + 2 * padding - kw) / stride + 1;
  require(H + 2 * padding >= kh && W + 2 * padding >= kw,
          "conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
              shape_str(x.shape()));
  if (bias.defined())
    require(bias.rank() == 1 && bias.extent(0) == O,
            "conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                std::to_string(O) + " output channels");
  Tensor<T> out({B, O, Ho, Wo});
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  T* od = out.data().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t o = 0; o < O; ++o) {
      const T bv = bias.defined() ? bias.data()[o] : T(0);
      for (int64_t i = 0; i < Ho; ++i)
        for (int64_t j = 0; j < Wo; ++j) {
          T acc = bv;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t u = 0; u < kh; ++u) {
              const int64_t yi = i * stride + u - padding;
              if (yi < 0 || yi >= H) continue;
              const T* xrow = xd + ((b * C + c) * H + yi) * W;
              const T* wrow = wd + ((o * C + c) * kh + u) * kw;
              for (int64_t v = 0; v < kw; ++v) {
                const int64_t xj = j * stride + v - padding;
                if (xj < 0 || xj >= W) continue;
                acc += xrow[xj] * wrow[v];
              }
            }
          od[((b * O + o) * Ho + i) * Wo + j] = acc;
        }
    }
  Tensor<T> xc = x, wc = w, bc = bias, oc = out;
  std::vector<Tensor<T>> inputs = bias.defined() ? std::vector<Tensor<T>>{x, w, bias}
                                                 : std::vector<Tensor<T>>{x, w};
  detail::finish_op<T>(
      "conv2d", inputs, out, [xc, wc, bc, oc, B, C, H, W, O, kh, kw, Ho, Wo, stride, padding]() mutable {
        const T* go = oc.grad().data();
        const T* xd2 = xc.data().data();
        const T* wd2 = wc.data().data();
        const bool need_x = xc.requires_grad();
        const bool need_w = wc.requires_grad();
        const bool need_b = bc.defined() && bc.requires_grad();
        if (need_x) xc.ensure_grad();
        if (need_w) wc.ensure_grad();
        if (need_b) bc.ensure_grad();
        T* gx = need_x ? xc.grad().data() : nullptr;
        T* gw = need_w ? wc.grad().data() : nullptr;
        T* gb = need_b ? bc.grad().data() : nullptr;
        for (int64_t b = 0; b < B; ++b)
          for (int64_t o = 0; o < O; ++o)
            for (int64_t i = 0; i < Ho; ++i)
              for (int64_t j = 0; j < Wo; ++j) {
                const T g = go[((b * O + o) * Ho + i) * Wo + j];
                if (g == T(0)) continue;
                if (gb) gb[o] += g;
                if (!need_x && !need_w) continue;
                for (int64_t c = 0; c < C; ++c)
                  for (int64_t u = 0; u < kh; ++u) {
                    const int64_t yi = i * stride + u - padding;
                    if (yi < 0 || yi >= H) continue;
                    for (int64_t v = 0; v < kw; ++v) {
                      const int64_t xj = j * stride + v - padding;
                      if (xj < 0 || xj >= W) continue;
                      const int64_t xi = ((b * C + c) * H + yi) * W + xj;
                      const int64_t wi = ((o * C + c) * kh + u) * kw + v;
                      if (gx) gx[xi] += g * wd2[wi];
                      if (gw) gw[wi] += g * xd2[xi];
                    }
                  }
              }
      });
  return out;
}

/// Transposed 2-d convolution (the adjoint of conv2d with the same weight,
/// stride, and zero padding). x: (B,C,H,W), w: (C,O,kh,kw).
/// Output spatial extent: (H - 1) * s + kh, so kh = kw = s doubles the grid
/// exactly when s = 2.
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride) {
  require(x.rank() == 4 && w.rank() == 4,
          "transposed_conv2d: expected rank-4 input and weight, got " + shape_str(x.shape()) +
              " and " + shape_str(w.shape()));
  require(stride >= 1, "transposed_conv2d: stride must be positive");
  const int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const int64_t O = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  require(w.extent(0) == C,
          "transposed_conv2d: channel mismatch, input " + shape_str(x.shape()) + " vs weight " +
              shape_str(w.shape()));
  const int64_t Ho = (H - 1) * stride + kh;
  const int64_t Wo = (W - 1) * stride + kw;
  Tensor<T> out({B, O, Ho, Wo});
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  T* od = out.data().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
          const T xv = xd[((b * C + c) * H + i) * W + j];
          if (xv == T(0)) continue;
          for (int64_t o = 0; o < O; ++o) {
            const T* wrow = wd + (c * O + o) * kh * kw;
            T* orow = od + ((b * O + o) * Ho + i * stride) * Wo + j * stride;
            for (int64_t u = 0; u < kh; ++u)
              for (int64_t v = 0; v < kw; ++v) orow[u * Wo + v] += xv * wrow[u * kw + v];
          }
        }
  Tensor<T> xc = x, wc = w, oc = out;
  detail::finish_op<T>(
      "transposed_conv2d", {x, w}, out, [xc, wc, oc, B, C, H, W, O, kh, kw, Ho, Wo, stride]() mutable {
        const T* go = oc.grad().data();
        const T* xd2 = xc.data().data();
        const T* wd2 = wc.data().data();
        const bool need_x = xc.requires_grad();
        const bool need_w = wc.requires_grad();
        if (need_x) xc.ensure_grad();
        if (need_w) wc.ensure_grad();
        T* gx = need_x ? xc.grad().data() : nullptr;
        T* gw = need_w ? wc.grad().data() : nullptr;
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < H; ++i)
              for (int64_t j = 0; j < W; ++j) {
                const int64_t xi = ((b * C + c) * H + i) * W + j;
                for (int64_t o = 0; o < O; ++o) {
                  const T* grow = go + ((b * O + o) * Ho + i * stride) * Wo + j * stride;
                  const T* wrow = wd2 + (c * O + o) * kh * kw;
                  T* gwrow = gw ? gw + (c * O + o) * kh * kw : nullptr;
                  for (int64_t u = 0; u < kh; ++u)
                    for (int64_t v = 0; v < kw; ++v) {
                      const T g = grow[u * Wo + v];
                      if (gx) gx[xi] += g * wrow[u * kw + v];
                      if (gwrow) gwrow[u * kw + v] += g * xd2[xi];
                    }
                }
              }
      });
  return out;
}

/// Layer normalization over the last axis with learned per-position scale
/// and shift. Uses the population variance of each slice.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
  require(x.rank() >= 1, "layer_norm: input must have rank >= 1");
  const int64_t D = x.extent(x.rank() - 1);
  require(gamma.rank() == 1 && gamma.extent(0) == D && beta.rank() == 1 && beta.extent(0) == D,
          "layer_norm: scale/shift shapes " + shape_str(gamma.shape()) + "/" +
              shape_str(beta.shape()) + " do not match last extent of " + shape_str(x.shape()));
  require(eps > 0, "layer_norm: eps must be positive");
  const int64_t slices = x.numel() / D;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<size_t>(slices));
  const T* xd = x.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  T* od = out.data().data();
  for (int64_t s = 0; s < slices; ++s) {
    const T* row = xd + s * D;
    T mean = T(0);
    for (int64_t i = 0; i < D; ++i) mean += row[i];
    mean /= static_cast<T>(D);
    T var = T(0);
    for (int64_t i = 0; i < D; ++i) {
      const T d = row[i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(D);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[s] = inv;
    for (int64_t i = 0; i < D; ++i) {
      const T xh = (row[i] - mean) * inv;
      xhat[s * D + i] = xh;
      od[s * D + i] = xh * gd[i] + bd[i];
    }
  }
  Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
  detail::finish_op<T>(
      "layer_norm", {x, gamma, beta}, out,
      [xc, gc, bc, oc, xhat = std::move(xhat), inv_std = std::move(inv_std), D, slices]() mutable {
        const T* go = oc.grad().data();
        const T* gd2 = gc.data().data();
        const bool need_x = xc.requires_grad();
        const bool need_g = gc.requires_grad();
        const bool need_b = bc.requires_grad();
        if (need_x) xc.ensure_grad();
        if (need_g) gc.ensure_grad();
        if (need_b) bc.ensure_grad();
        T* gx = need_x ? xc.grad().data() : nullptr;
        T* gg = need_g ? gc.grad().data() : nullptr;
        T* gb = need_b ? bc.grad().data() : nullptr;
        for (int64_t s = 0; s < slices; ++s) {
          const T* grow = go + s * D;
          const T* xh = xhat.data() + s * D;
          if (gg || gb)
            for (int64_t i = 0; i < D; ++i) {
              if (gg) gg[i] += grow[i] * xh[i];
              if (gb) gb[i] += grow[i];
            }
          if (gx) {
            T mean_h = T(0), mean_hx = T(0);
            for (int64_t i = 0; i < D; ++i) {
              const T h = grow[i] * gd2[i];
              mean_h += h;
              mean_hx += h * xh[i];
            }
            mean_h /= static_cast<T>(D);
            mean_hx /= static_cast<T>(D);
            const T inv = inv_std[s];
            for (int64_t i = 0; i < D; ++i) {
              const T h = grow[i] * gd2[i];
              gx[s * D + i] += inv * (h - mean_h - xh[i] * mean_hx);
            }
          }
        }
      });
  return out;
}

/// Numerically stable softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  require(x.rank() >= 1, "softmax: input must have rank >= 1");
  const int64_t D = x.extent(x.rank() - 1);
  const int64_t slices = x.numel() / D;
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (int64_t s = 0; s < slices; ++s) {
    const T* row = xd + s * D;
    T* orow = od + s * D;
    T mx = row[0];
    for (int64_t i = 1; i < D; ++i) mx = std::max(mx, row[i]);
    T total = T(0);
    for (int64_t i = 0; i < D; ++i) {
      const T e = std::exp(row[i] - mx);
      orow[i] = e;
      total += e;
    }
    const T inv = T(1) / total;
    for (int64_t i = 0; i < D; ++i) orow[i] *= inv;
  }
  Tensor<T> xc = x, oc = out;
  detail::finish_op<T>("softmax", {x}, out, [xc, oc, D, slices]() mutable {
    if (!xc.requires_grad()) return;
    auto go = oc.grad();
    const T* yd = oc.data().data();
    xc.ensure_grad();
    auto gx = xc.grad();
    for (int64_t s = 0; s < slices; ++s) {
      T dot = T(0);
      for (int64_t i = 0; i < D; ++i) dot += go[s * D + i] * yd[s * D + i];
      for (int64_t i = 0; i < D; ++i)
        gx[s * D + i] += yd[s * D + i] * (go[s * D + i] - dot);
    }
  });
  return out;
}

namespace detail {
// tanh-approximation GELU constants
inline constexpr double kGeluRoot2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;
}  // namespace detail

/// GELU with the tanh approximation:
/// 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  const T k = static_cast<T>(detail::kGeluRoot2OverPi);
  const T c = static_cast<T>(detail::kGeluCubic);
  for (int64_t i = 0; i < x.numel(); ++i) {
    const T v = xd[i];
    od[i] = T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v)));
  }
  Tensor<T> xc = x, oc = out;
  detail::finish_op<T>("gelu", {x}, out, [xc, oc, k, c]() mutable {
    if (!xc.requires_grad()) return;
    auto go = oc.grad();
    const T* xd2 = xc.data().data();
    xc.ensure_grad();
    auto gx = xc.grad();
    for (size_t i = 0; i < gx.size(); ++i) {
      const T v = xd2[i];
      const T t = std::tanh(k * (v + c * v * v * v));
      const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * c * v * v);
      gx[i] += go[i] * d;
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (int64_t i = 0; i < x.numel(); ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
  Tensor<T> xc = x, oc = out;
  detail::finish_op<T>("relu", {x}, out, [xc, oc]() mutable {
    if (!xc.requires_grad()) return;
    auto go = oc.grad();
    const T* xd2 = xc.data().data();
    xc.ensure_grad();
    auto gx = xc.grad();
    for (size_t i = 0; i < gx.size(); ++i)
      if (xd2[i] > T(0)) gx[i] += go[i];
  });
  return out;
}

}  // namespace tokenfusion
