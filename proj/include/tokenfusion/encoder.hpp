#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tokenfusion/layers.hpp"
#include "tokenfusion/nn.hpp"
#include "tokenfusion/ops.hpp"
#include "tokenfusion/tensor.hpp"

namespace tokenfusion {

struct EncoderConfig {
  int64_t depth = 12;
  int64_t dim = 768;
  int64_t heads = 12;
  int64_t mlp_ratio = 4;
};

/// Per-forward execution counters. The 12-block budget is enforced against
/// what actually ran, not against what was constructed.
struct ExecStats {
  int encoder_blocks = 0;
  int64_t unified_channels = -1;  // early fusion only: channels of the fused image
};

/// Optional capture of post-softmax attention maps, one (B, h, N, N) tensor
/// per encoder block in execution order.
template <typename T>
struct AttnProbe {
  std::vector<Tensor<T>> attention;
};

/// Multi-head self-attention: per head A = softmax(Q K^T / sqrt(d_h)), output
/// concat_heads(A V) projected by Wo. Heads must divide the model dim.
template <typename T>
Tensor<T> mhsa(const Tensor<T>& x, const LinearLayer<T>& wq, const LinearLayer<T>& wk,
               const LinearLayer<T>& wv, const LinearLayer<T>& wo, int64_t heads,
               AttnProbe<T>* probe = nullptr) {
  require(x.rank() == 3, "mhsa: expected (B,N,D) input, got " + shape_str(x.shape()));
  const int64_t B = x.extent(0), N = x.extent(1), D = x.extent(2);
  require(heads >= 1 && D % heads == 0,
          "mhsa: " + std::to_string(heads) + " heads do not divide dim " + std::to_string(D));
  const int64_t dh = D / heads;

  auto split_heads = [&](const Tensor<T>& t) {
    return transpose(reshape(t, {B, N, heads, dh}), {0, 2, 1, 3});  // (B,h,N,dh)
  };
  Tensor<T> q = split_heads(wq.forward(x));
  Tensor<T> k = split_heads(wk.forward(x));
  Tensor<T> v = split_heads(wv.forward(x));

  Tensor<T> scores = scale(matmul(q, transpose(k, {0, 1, 3, 2})),
                                1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> attn = softmax(scores);  // (B,h,N,N), rows sum to 1
  if (probe) probe->attention.push_back(attn);

  Tensor<T> ctx = matmul(attn, v);                                // (B,h,N,dh)
  Tensor<T> merged = reshape(transpose(ctx, {0, 2, 1, 3}), {B, N, D});
  return wo.forward(merged);
}

/// Pre-LN block: t' = MHSA(LN1(t)) + t; out = MLP(LN2(t')) + t'.
template <typename T>
struct EncoderBlock {
  LayerNormParams<T> ln1, ln2;
  LinearLayer<T> wq, wk, wv, wo;
  LinearLayer<T> mlp_in, mlp_out;
  int64_t heads = 1;

  EncoderBlock() = default;
  EncoderBlock(ParamRegistry<T>& reg, const std::string& prefix, int64_t dim, int64_t heads_,
               int64_t mlp_ratio, Rng& rng, bool identity_init = false)
      : heads(heads_) {
    require(heads_ >= 1 && dim % heads_ == 0,
            "encoder block: " + std::to_string(heads_) + " heads do not divide dim " +
                std::to_string(dim));
    ln1 = LayerNormParams<T>(reg, prefix + ".ln1", dim);
    wq = LinearLayer<T>(reg, prefix + ".wq", dim, dim, rng);
    wk = LinearLayer<T>(reg, prefix + ".wk", dim, dim, rng);
    wv = LinearLayer<T>(reg, prefix + ".wv", dim, dim, rng);
    wo = LinearLayer<T>(reg, prefix + ".wo", dim, dim, rng,
                        identity_init ? LinearInit::Zero : LinearInit::TruncNormal);
    ln2 = LayerNormParams<T>(reg, prefix + ".ln2", dim);
    mlp_in = LinearLayer<T>(reg, prefix + ".mlp_in", dim, mlp_ratio * dim, rng);
    mlp_out = LinearLayer<T>(reg, prefix + ".mlp_out", mlp_ratio * dim, dim, rng,
                             identity_init ? LinearInit::Zero : LinearInit::TruncNormal);
  }

  Tensor<T> forward(const Tensor<T>& x, ExecStats* stats = nullptr,
                    AttnProbe<T>* probe = nullptr) const {
    Tensor<T> attended = add(mhsa(ln1.forward(x), wq, wk, wv, wo, heads, probe), x);
    Tensor<T> out = add(
        mlp_out.forward(gelu(mlp_in.forward(ln2.forward(attended)))), attended);
    if (stats) stats->encoder_blocks += 1;
    return out;
  }
};

/// Sequential application; an empty stack is the identity.
template <typename T>
Tensor<T> encoder_stack(const Tensor<T>& x, const std::vector<EncoderBlock<T>>& blocks,
                        ExecStats* stats = nullptr, AttnProbe<T>* probe = nullptr) {
  Tensor<T> cur = x;
  for (const EncoderBlock<T>& b : blocks) cur = b.forward(cur, stats, probe);
  return cur;
}

template <typename T>
std::vector<EncoderBlock<T>> make_encoder_blocks(ParamRegistry<T>& reg, const std::string& prefix,
                                                 int64_t depth, int64_t dim, int64_t heads,
                                                 int64_t mlp_ratio, Rng& rng,
                                                 bool identity_init = false) {
  std::vector<EncoderBlock<T>> blocks;
  blocks.reserve(static_cast<size_t>(depth));
  for (int64_t i = 0; i < depth; ++i)
    blocks.emplace_back(reg, prefix + ".block" + std::to_string(i), dim, heads, mlp_ratio, rng,
                        identity_init);
  return blocks;
}

}  // namespace tokenfusion
