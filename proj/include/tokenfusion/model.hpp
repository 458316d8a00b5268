#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tokenfusion/backbone.hpp"
#include "tokenfusion/encoder.hpp"
#include "tokenfusion/errors.hpp"
#include "tokenfusion/layers.hpp"
#include "tokenfusion/model_config.hpp"
#include "tokenfusion/tokenize.hpp"

namespace tokenfusion {

/// Parameter-free 2x nearest-neighbor upsampling of a (B,C,H,W) map.
template <typename T>
Tensor<T> upsample_nearest_2x(const Tensor<T>& x) {
  require(x.rank() == 4,
          "upsample_nearest_2x: expected (B,C,H,W) input, got " + shape_str(x.shape()));
  const int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  Tensor<T> cells = reshape(x, {B, C, H, 1, W, 1});
  Tensor<T> repeated = mul(cells, Tensor<T>::full({2, 1, 2}, T(1)));
  return reshape(repeated, {B, C, 2 * H, 2 * W});
}

/// 2x2 average pooling of a (B,C,H,W) map; extents must be even.
template <typename T>
Tensor<T> avg_pool_2x2(const Tensor<T>& x) {
  require(x.rank() == 4, "avg_pool_2x2: expected (B,C,H,W) input, got " + shape_str(x.shape()));
  const int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  require(H % 2 == 0 && W % 2 == 0,
          "avg_pool_2x2: extents of " + shape_str(x.shape()) + " are not even");
  Tensor<T> cells = reshape(x, {B, C, H / 2, 2, W / 2, 2});
  return mean_pool(mean_pool(cells, 5), 3);
}

/// Joins the two late-fusion streams on the CNN grid. The coarser ViT grid is
/// expanded 2x per side (learned transposed conv, or plain replication), then
/// the streams are concatenated channel-wise or added.
template <typename T>
TokenSequence<T> late_fusion_combine(const TokenSequence<T>& vit_seq,
                                     const TokenSequence<T>& cnn_seq, CombineVariant variant,
                                     const TConvLayer<T>* upconv = nullptr) {
  require(!vit_seq.has_class_token && !cnn_seq.has_class_token,
          "late_fusion_combine: class tokens are not part of late fusion");
  require(cnn_seq.grid.grid_h == 2 * vit_seq.grid.grid_h &&
              cnn_seq.grid.grid_w == 2 * vit_seq.grid.grid_w,
          "late_fusion_combine: cnn grid " + std::to_string(cnn_seq.grid.grid_h) + "x" +
              std::to_string(cnn_seq.grid.grid_w) + " is not 2x the vit grid " +
              std::to_string(vit_seq.grid.grid_h) + "x" + std::to_string(vit_seq.grid.grid_w));

  const bool learned = variant == CombineVariant::UpConvConcat ||
                       variant == CombineVariant::UpConvAdd;
  const bool wants_concat = variant == CombineVariant::UpConvConcat ||
                            variant == CombineVariant::CopyConcat;
  if (!wants_concat)
    require(vit_seq.tokens.extent(2) == cnn_seq.tokens.extent(2),
            "late_fusion_combine: add variants need equal channel dims, got " +
                shape_str(vit_seq.tokens.shape()) + " vs " + shape_str(cnn_seq.tokens.shape()));
  if (learned) require(upconv != nullptr, "late_fusion_combine: missing upconv parameters");

  Tensor<T> grid = tokens_to_grid(vit_seq);
  Tensor<T> expanded = learned ? upconv->forward(grid) : upsample_nearest_2x(grid);
  TokenSequence<T> up = grid_to_tokens(expanded);
  up.tokens = wants_concat ? concat({up.tokens, cnn_seq.tokens}, 2)
                           : add(up.tokens, cnn_seq.tokens);
  return up;
}

/// Lifts one backbone stage map back to input resolution and projects it to a
/// small fixed channel count so the fused early-fusion image stays 18 wide.
template <typename T>
struct BridgeChain {
  int64_t stage_index = 5;  // 1..5; map stride is 2^stage_index
  bool learned_upsample = true;
  std::vector<TConvLayer<T>> ups;  // stage_index steps of 2x, channels halved (floor 8)
  ConvLayer<T> to_image;           // 1x1 with bias

  BridgeChain() = default;
  BridgeChain(ParamRegistry<T>& reg, const std::string& prefix, int64_t stage_index_,
              int64_t in_channels, int64_t out_channels, bool learned, Rng& rng)
      : stage_index(stage_index_), learned_upsample(learned) {
    require(stage_index >= 1 && stage_index <= 5, "bridge: stage index out of range");
    int64_t ch = in_channels;
    if (learned) {
      for (int64_t step = 0; step < stage_index; ++step) {
        const int64_t next = std::max<int64_t>(8, ch / 2);
        ups.emplace_back(reg, prefix + ".up" + std::to_string(step), ch, next, 2, 2, rng);
        ch = next;
      }
    }
    to_image = ConvLayer<T>(reg, prefix + ".to_image", ch, out_channels, 1, 1, 0, true, rng);
  }

  Tensor<T> forward(const Tensor<T>& fm) const {
    Tensor<T> cur = fm;
    if (learned_upsample) {
      for (const TConvLayer<T>& up : ups) cur = up.forward(cur);
    } else {
      for (int64_t step = 0; step < stage_index; ++step) cur = upsample_nearest_2x(cur);
    }
    return to_image.forward(cur);
  }
};

/// One layer-by-layer stage: encoder blocks, 2x2 token pooling down to the
/// next stage's grid (skipped on the last block), channel-wise concat with
/// that stage's raw pixel tokens, and a learned projection back to model
/// width. A class token skips pooling and the concat; it passes through the
/// same projection zero-extended, which multiplies it by the projection's
/// token-channel rows only.
template <typename T>
struct MixingBlock {
  std::vector<EncoderBlock<T>> enc;
  LinearLayer<T> proj;  // (dim + stage_channels) -> dim
  int64_t stage_channels = 0;
  bool pool = true;

  MixingBlock() = default;
  MixingBlock(ParamRegistry<T>& reg, const std::string& prefix, int64_t depth, int64_t dim,
              int64_t heads, int64_t mlp_ratio, int64_t stage_channels_, bool pool_, Rng& rng,
              bool identity_init = false)
      : stage_channels(stage_channels_), pool(pool_) {
    enc = make_encoder_blocks(reg, prefix, depth, dim, heads, mlp_ratio, rng, identity_init);
    // Xavier, not the 0.02 transformer init: five of these projections chain
    // in series, and at 0.02 scale each hop would attenuate the token stream
    // (and its gradients) by ~50x, leaving the early stages untrainable.
    proj = LinearLayer<T>(reg, prefix + ".proj", dim + stage_channels, dim, rng,
                          LinearInit::Xavier);
  }

  TokenSequence<T> forward(const TokenSequence<T>& in, const Tensor<T>& stage_map,
                           ExecStats* stats = nullptr, AttnProbe<T>* probe = nullptr) const {
    Tensor<T> x = encoder_stack(in.tokens, enc, stats, probe);

    Tensor<T> class_tok;
    TokenSequence<T> spatial{x, in.grid, false};
    if (in.has_class_token) {
      const int64_t n = x.extent(1);
      class_tok = narrow(x, 1, 0, 1);
      spatial.tokens = narrow(x, 1, 1, n - 1);
    }

    if (pool) {
      Tensor<T> pooled = avg_pool_2x2(tokens_to_grid(spatial));
      spatial = grid_to_tokens(pooled);
    }

    TokenSequence<T> cnn = pixel_tokens(stage_map);
    require(spatial.grid.grid_h == cnn.grid.grid_h && spatial.grid.grid_w == cnn.grid.grid_w,
            "mixing block: token grid " + std::to_string(spatial.grid.grid_h) + "x" +
                std::to_string(spatial.grid.grid_w) + " does not match stage map " +
                shape_str(stage_map.shape()));
    require(cnn.tokens.extent(2) == stage_channels,
            "mixing block: stage map channels " + shape_str(stage_map.shape()) +
                " do not match projection built for " + std::to_string(stage_channels));

    Tensor<T> fused = proj.forward(concat({spatial.tokens, cnn.tokens}, 2));

    TokenSequence<T> out{fused, cnn.grid, in.has_class_token};
    if (in.has_class_token) {
      const int64_t B = class_tok.extent(0);
      Tensor<T> extended =
          concat({class_tok, Tensor<T>::zeros({B, 1, stage_channels})}, 2);
      out.tokens = concat({proj.forward(extended), fused}, 1);
    }
    return out;
  }
};

/// Pools tokens to a single vector and applies one affine map to class logits.
/// TokenWise and Mixing heads bind the token count at build time; ChannelWise
/// only binds the channel width.
template <typename T>
struct ClassifierHead {
  HeadType type = HeadType::ChannelWise;
  int64_t num_tokens = 0;
  int64_t num_channels = 0;
  LinearLayer<T> out;

  ClassifierHead() = default;
  ClassifierHead(ParamRegistry<T>& reg, const std::string& prefix, HeadType type_,
                 int64_t num_tokens_, int64_t num_channels_, int64_t num_classes, Rng& rng)
      : type(type_), num_tokens(num_tokens_), num_channels(num_channels_) {
    int64_t in = 0;
    switch (type) {
      case HeadType::TokenWise: in = num_tokens; break;
      case HeadType::ChannelWise: in = num_channels; break;
      case HeadType::Mixing: in = num_tokens + num_channels; break;
    }
    out = LinearLayer<T>(reg, prefix + ".out", in, num_classes, rng);
  }

  Tensor<T> forward(const Tensor<T>& tokens) const {
    require(tokens.rank() == 3,
            "head: expected (B,N,C) tokens, got " + shape_str(tokens.shape()));
    if (type != HeadType::ChannelWise)
      require(tokens.extent(1) == num_tokens,
              "head: got " + std::to_string(tokens.extent(1)) + " tokens but weights bind " +
                  std::to_string(num_tokens));
    if (type != HeadType::TokenWise)
      require(tokens.extent(2) == num_channels,
              "head: got " + std::to_string(tokens.extent(2)) + " channels but weights bind " +
                  std::to_string(num_channels));
    Tensor<T> pooled;
    switch (type) {
      case HeadType::TokenWise: pooled = mean_pool(tokens, 2); break;
      case HeadType::ChannelWise: pooled = mean_pool(tokens, 1); break;
      case HeadType::Mixing:
        pooled = concat({mean_pool(tokens, 2), mean_pool(tokens, 1)}, 1);
        break;
    }
    return out.forward(pooled);
  }
};

struct ParamCountReport {
  int64_t total = 0;
  std::vector<std::pair<std::string, int64_t>> per_module;  // grouped by name prefix
};

template <typename T>
struct LateBranches {
  Tensor<T> vit_embed, vit_pos;
  std::vector<EncoderBlock<T>> vit_blocks;
  Tensor<T> cnn_embed, cnn_pos;
  std::vector<EncoderBlock<T>> cnn_blocks;
  std::optional<TConvLayer<T>> upconv;
  int64_t map_index = 0;  // 0-based into StageFeatureMaps
  PatchGrid vit_grid;
};

template <typename T>
struct EarlyBranches {
  std::vector<BridgeChain<T>> bridges;
  Tensor<T> embed, pos;
  std::vector<EncoderBlock<T>> blocks;
};

template <typename T>
struct LayerByLayerBranches {
  Tensor<T> embed, pos;
  Tensor<T> class_token, class_pos;
  std::vector<MixingBlock<T>> mixing;
  std::vector<EncoderBlock<T>> tail;
};

template <typename T>
class FusionModel {
 public:
  explicit FusionModel(const ModelConfig& cfg, uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    backbone_ = Backbone<T>(reg_, "backbone", cfg_.backbone, rng);
    switch (cfg_.fusion_method) {
      case FusionMethod::LateParallel: build_late(rng); break;
      case FusionMethod::EarlyFusion: build_early(rng); break;
      case FusionMethod::LayerByLayer: build_layer_by_layer(rng); break;
    }
    head_ = ClassifierHead<T>(reg_, "head", cfg_.head_type, head_tokens_, head_channels_,
                              cfg_.num_classes, rng);
    if (cfg_.freeze_backbone) {
      for (const auto& [name, t] : reg_.entries()) {
        if (name.rfind("backbone.", 0) == 0) {
          Tensor<T> handle = t;  // shared handle; flag lives on the impl
          handle.set_requires_grad(false);
        }
      }
    }
  }

  Tensor<T> forward(const Tensor<T>& image, ExecStats* stats = nullptr,
                    AttnProbe<T>* probe = nullptr) const {
    require(image.rank() == 4 && image.extent(1) == 3,
            "model: expected (B,3,H,W) input, got " + shape_str(image.shape()));
    require(image.extent(2) == cfg_.image_h && image.extent(3) == cfg_.image_w,
            "model: input " + shape_str(image.shape()) + " does not match configured " +
                std::to_string(cfg_.image_h) + "x" + std::to_string(cfg_.image_w));
    switch (cfg_.fusion_method) {
      case FusionMethod::LateParallel: return forward_late(image, stats, probe);
      case FusionMethod::EarlyFusion: return forward_early(image, stats, probe);
      case FusionMethod::LayerByLayer: return forward_layer_by_layer(image, stats, probe);
    }
    require(false, "model: unreachable fusion method");
    return {};
  }

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry<T>& params() { return reg_; }
  const ParamRegistry<T>& params() const { return reg_; }
  const ClassifierHead<T>& head() const { return head_; }
  int64_t head_tokens() const { return head_tokens_; }
  int64_t head_channels() const { return head_channels_; }
  const Backbone<T>& backbone() const { return backbone_; }
  const LateBranches<T>& late() const { return *late_; }
  const EarlyBranches<T>& early() const { return *early_; }
  const LayerByLayerBranches<T>& layer_by_layer() const { return *lbl_; }

  ParamCountReport count_params() const {
    ParamCountReport report;
    for (const auto& [name, t] : reg_.entries()) {
      report.total += t.numel();
      const std::string module = name.substr(0, name.find('.'));
      auto it = std::find_if(report.per_module.begin(), report.per_module.end(),
                             [&](const auto& p) { return p.first == module; });
      if (it == report.per_module.end())
        report.per_module.emplace_back(module, t.numel());
      else
        it->second += t.numel();
    }
    return report;
  }

 private:
  void build_late(Rng& rng) {
    const int64_t p = cfg_.patch_size;
    const bool pow2 = p >= 2 && (p & (p - 1)) == 0;
    int64_t stage = 0;  // map with stride p/2, 1-based
    if (pow2)
      for (int64_t j = 1, s = 2; j <= 5; ++j, s *= 2)
        if (s * 2 == p) stage = j;
    if (stage == 0)
      throw ConfigError("late fusion: no backbone map at stride patch_size/2 for patch_size " +
                        std::to_string(p) + " (valid sizes: 4, 8, 16, 32, 64)");

    const int64_t gh = cfg_.image_h / p, gw = cfg_.image_w / p;
    const int64_t dim = cfg_.embed_dim;
    late_.emplace();
    late_->map_index = stage - 1;
    late_->vit_grid = PatchGrid{p, gh, gw};

    Tensor<T> ve({p * p * 3, dim});
    init::trunc_normal(ve, rng);
    late_->vit_embed = reg_.add("vit.embed", ve);
    Tensor<T> vp({gh * gw, dim});
    init::trunc_normal(vp, rng);
    late_->vit_pos = reg_.add("vit.pos", vp);
    late_->vit_blocks = make_encoder_blocks(reg_, "vit", cfg_.late_depth_vit, dim, cfg_.heads,
                                            cfg_.mlp_ratio, rng, cfg_.identity_init);

    const int64_t cnn_ch = cfg_.backbone.map_channels()[static_cast<size_t>(late_->map_index)];
    Tensor<T> ce({cnn_ch, dim});
    init::trunc_normal(ce, rng);
    late_->cnn_embed = reg_.add("cnn_branch.embed", ce);
    Tensor<T> cp({4 * gh * gw, dim});
    init::trunc_normal(cp, rng);
    late_->cnn_pos = reg_.add("cnn_branch.pos", cp);
    late_->cnn_blocks = make_encoder_blocks(reg_, "cnn_branch", cfg_.late_depth_cnn, dim,
                                            cfg_.heads, cfg_.mlp_ratio, rng, cfg_.identity_init);

    if (cfg_.combine_variant == CombineVariant::UpConvConcat ||
        cfg_.combine_variant == CombineVariant::UpConvAdd)
      late_->upconv = TConvLayer<T>(reg_, "combine.upconv", dim, dim, 2, 2, rng);

    const bool wants_concat = cfg_.combine_variant == CombineVariant::UpConvConcat ||
                              cfg_.combine_variant == CombineVariant::CopyConcat;
    head_tokens_ = 4 * gh * gw;
    head_channels_ = wants_concat ? 2 * dim : dim;
  }

  void build_early(Rng& rng) {
    const int64_t dim = cfg_.embed_dim;
    const auto channels = cfg_.backbone.map_channels();
    const bool learned = cfg_.bridge_variant == BridgeVariant::UpConvMulti ||
                         cfg_.bridge_variant == BridgeVariant::UpConvSingle;
    const bool multi = cfg_.bridge_variant == BridgeVariant::UpConvMulti ||
                       cfg_.bridge_variant == BridgeVariant::CopyMulti;
    early_.emplace();
    if (multi) {
      for (int64_t i = 1; i <= 5; ++i)
        early_->bridges.emplace_back(reg_, "bridge" + std::to_string(i), i,
                                     channels[static_cast<size_t>(i - 1)], 3, learned, rng);
    } else {
      // Single-weight: only the last stage, widened so the fused image still
      // has 3 + 15 = 18 channels.
      early_->bridges.emplace_back(reg_, "bridge5", 5, channels[4], 15, learned, rng);
    }

    const int64_t p = cfg_.patch_size;
    const int64_t n = (cfg_.image_h / p) * (cfg_.image_w / p);
    Tensor<T> e({p * p * kUnifiedChannels, dim});
    init::trunc_normal(e, rng);
    early_->embed = reg_.add("encoder.embed", e);
    Tensor<T> pos({n, dim});
    init::trunc_normal(pos, rng);
    early_->pos = reg_.add("encoder.pos", pos);
    early_->blocks = make_encoder_blocks(reg_, "encoder", cfg_.early_depth, dim, cfg_.heads,
                                         cfg_.mlp_ratio, rng, cfg_.identity_init);
    head_tokens_ = n;
    head_channels_ = dim;
  }

  void build_layer_by_layer(Rng& rng) {
    const int64_t dim = cfg_.embed_dim;
    const auto channels = cfg_.backbone.map_channels();
    const int64_t h1 = cfg_.image_h / 2, w1 = cfg_.image_w / 2;
    lbl_.emplace();
    Tensor<T> e({channels[0], dim});
    init::trunc_normal(e, rng);
    lbl_->embed = reg_.add("tokens.embed", e);
    Tensor<T> pos({h1 * w1, dim});
    init::trunc_normal(pos, rng);
    lbl_->pos = reg_.add("tokens.pos", pos);
    if (cfg_.use_class_token) {
      Tensor<T> ct({1, 1, dim});
      init::trunc_normal(ct, rng);
      lbl_->class_token = reg_.add("tokens.class_token", ct);
      Tensor<T> cp({1, 1, dim});
      init::trunc_normal(cp, rng);
      lbl_->class_pos = reg_.add("tokens.class_pos", cp);
    }
    for (int64_t i = 0; i < 5; ++i) {
      const size_t stage = static_cast<size_t>(std::min<int64_t>(i + 1, 4));
      lbl_->mixing.emplace_back(reg_, "mixing" + std::to_string(i + 1), cfg_.mixing_block_depth,
                                dim, cfg_.heads, cfg_.mlp_ratio, channels[stage], i < 4, rng,
                                cfg_.identity_init);
    }
    lbl_->tail = make_encoder_blocks(reg_, "tail", cfg_.tail_depth, dim, cfg_.heads,
                                     cfg_.mlp_ratio, rng, cfg_.identity_init);
    head_tokens_ = (cfg_.image_h / 32) * (cfg_.image_w / 32) + (cfg_.use_class_token ? 1 : 0);
    head_channels_ = dim;
  }

  Tensor<T> forward_late(const Tensor<T>& image, ExecStats* stats, AttnProbe<T>* probe) const {
    Tensor<T> patches = patchify(transpose(image, {0, 2, 3, 1}), cfg_.patch_size);
    TokenSequence<T> vit{embed_tokens(patches, late_->vit_embed, late_->vit_pos),
                         late_->vit_grid, false};
    vit.tokens = encoder_stack(vit.tokens, late_->vit_blocks, stats, probe);

    StageFeatureMaps<T> maps = backbone_.forward(image);
    TokenSequence<T> cnn = featuremap_to_tokens(
        maps.maps[static_cast<size_t>(late_->map_index)], late_->cnn_embed, late_->cnn_pos);
    cnn.tokens = encoder_stack(cnn.tokens, late_->cnn_blocks, stats, probe);

    TokenSequence<T> fused = late_fusion_combine(
        vit, cnn, cfg_.combine_variant, late_->upconv ? &*late_->upconv : nullptr);
    return head_.forward(fused.tokens);
  }

  Tensor<T> forward_early(const Tensor<T>& image, ExecStats* stats, AttnProbe<T>* probe) const {
    StageFeatureMaps<T> maps = backbone_.forward(image);
    std::vector<Tensor<T>> planes{image};
    for (const BridgeChain<T>& b : early_->bridges)
      planes.push_back(b.forward(maps.maps[static_cast<size_t>(b.stage_index - 1)]));
    Tensor<T> unified = concat(planes, 1);
    if (stats) stats->unified_channels = unified.extent(1);

    Tensor<T> patches = patchify(transpose(unified, {0, 2, 3, 1}), cfg_.patch_size);
    Tensor<T> tokens = embed_tokens(patches, early_->embed, early_->pos);
    tokens = encoder_stack(tokens, early_->blocks, stats, probe);
    return head_.forward(tokens);
  }

  Tensor<T> forward_layer_by_layer(const Tensor<T>& image, ExecStats* stats,
                                   AttnProbe<T>* probe) const {
    StageFeatureMaps<T> maps = backbone_.forward(image);
    TokenSequence<T> seq = featuremap_to_tokens(maps.maps[0], lbl_->embed, lbl_->pos);
    if (cfg_.use_class_token) {
      const int64_t B = image.extent(0);
      Tensor<T> start = add(add(lbl_->class_token, lbl_->class_pos),
                                 Tensor<T>::zeros({B, 1, cfg_.embed_dim}));
      seq.tokens = concat({start, seq.tokens}, 1);
      seq.has_class_token = true;
    }
    for (size_t i = 0; i < lbl_->mixing.size(); ++i) {
      const size_t stage = std::min<size_t>(i + 1, 4);
      seq = lbl_->mixing[i].forward(seq, maps.maps[stage], stats, probe);
    }
    seq.tokens = encoder_stack(seq.tokens, lbl_->tail, stats, probe);
    return head_.forward(seq.tokens);
  }

  static constexpr int64_t kUnifiedChannels = 18;  // 3 image + 15 bridge channels

  ModelConfig cfg_;
  ParamRegistry<T> reg_;
  Backbone<T> backbone_;
  std::optional<LateBranches<T>> late_;
  std::optional<EarlyBranches<T>> early_;
  std::optional<LayerByLayerBranches<T>> lbl_;
  ClassifierHead<T> head_;
  int64_t head_tokens_ = 0;
  int64_t head_channels_ = 0;
};

}  // namespace tokenfusion
