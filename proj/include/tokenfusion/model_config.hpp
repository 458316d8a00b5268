#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokenfusion/backbone.hpp"
#include "tokenfusion/errors.hpp"

namespace tokenfusion {

enum class FusionMethod { LateParallel, EarlyFusion, LayerByLayer };

/// Late fusion: how the upsampled ViT stream joins the CNN stream.
enum class CombineVariant { UpConvConcat, UpConvAdd, CopyConcat, CopyAdd };

/// Early fusion: how stage maps are lifted back to image resolution, and
/// whether all five stages or only the last one contribute.
enum class BridgeVariant { UpConvMulti, CopyMulti, UpConvSingle, CopySingle };

enum class HeadType { TokenWise, ChannelWise, Mixing };

inline const char* to_string(FusionMethod m) {
  switch (m) {
    case FusionMethod::LateParallel: return "late_parallel";
    case FusionMethod::EarlyFusion: return "early_fusion";
    case FusionMethod::LayerByLayer: return "layer_by_layer";
  }
  return "?";
}

inline const char* to_string(CombineVariant v) {
  switch (v) {
    case CombineVariant::UpConvConcat: return "upconv_concat";
    case CombineVariant::UpConvAdd: return "upconv_add";
    case CombineVariant::CopyConcat: return "copy_concat";
    case CombineVariant::CopyAdd: return "copy_add";
  }
  return "?";
}

inline const char* to_string(BridgeVariant v) {
  switch (v) {
    case BridgeVariant::UpConvMulti: return "upconv_multi";
    case BridgeVariant::CopyMulti: return "copy_multi";
    case BridgeVariant::UpConvSingle: return "upconv_single";
    case BridgeVariant::CopySingle: return "copy_single";
  }
  return "?";
}

inline const char* to_string(HeadType h) {
  switch (h) {
    case HeadType::TokenWise: return "token_wise";
    case HeadType::ChannelWise: return "channel_wise";
    case HeadType::Mixing: return "mixing";
  }
  return "?";
}

inline FusionMethod fusion_method_from_string(const std::string& s) {
  if (s == "late_parallel") return FusionMethod::LateParallel;
  if (s == "early_fusion") return FusionMethod::EarlyFusion;
  if (s == "layer_by_layer") return FusionMethod::LayerByLayer;
  throw ConfigError("unknown fusion_method: " + s);
}

inline CombineVariant combine_variant_from_string(const std::string& s) {
  if (s == "upconv_concat") return CombineVariant::UpConvConcat;
  if (s == "upconv_add") return CombineVariant::UpConvAdd;
  if (s == "copy_concat") return CombineVariant::CopyConcat;
  if (s == "copy_add") return CombineVariant::CopyAdd;
  throw ConfigError("unknown combine_variant: " + s);
}

inline BridgeVariant bridge_variant_from_string(const std::string& s) {
  if (s == "upconv_multi") return BridgeVariant::UpConvMulti;
  if (s == "copy_multi") return BridgeVariant::CopyMulti;
  if (s == "upconv_single") return BridgeVariant::UpConvSingle;
  if (s == "copy_single") return BridgeVariant::CopySingle;
  throw ConfigError("unknown bridge_variant: " + s);
}

inline HeadType head_type_from_string(const std::string& s) {
  if (s == "token_wise") return HeadType::TokenWise;
  if (s == "channel_wise") return HeadType::ChannelWise;
  if (s == "mixing") return HeadType::Mixing;
  throw ConfigError("unknown head_type: " + s);
}

struct ModelConfig {
  FusionMethod fusion_method = FusionMethod::LateParallel;
  CombineVariant combine_variant = CombineVariant::UpConvConcat;
  BridgeVariant bridge_variant = BridgeVariant::UpConvMulti;
  HeadType head_type = HeadType::ChannelWise;
  bool use_class_token = false;  // LayerByLayer only

  BackboneConfig backbone = BackboneConfig::toy();
  int64_t embed_dim = 64;
  int64_t heads = 4;
  int64_t mlp_ratio = 4;
  int64_t patch_size = 8;
  int64_t num_classes = 10;
  int64_t image_h = 32;
  int64_t image_w = 32;

  // Encoder depth per site. Non-relaxed configs must total 12 blocks per
  // forward pass: late 6+6, early 12, layer-by-layer 5*2+2.
  int64_t late_depth_vit = 6;
  int64_t late_depth_cnn = 6;
  int64_t early_depth = 12;
  int64_t mixing_block_depth = 2;
  int64_t tail_depth = 2;
  bool relax_block_budget = false;

  bool freeze_backbone = false;
  bool identity_init = false;  // zero Wo / MLP-out so encoder blocks start as identities

  int64_t encoder_blocks_per_forward() const {
    switch (fusion_method) {
      case FusionMethod::LateParallel: return late_depth_vit + late_depth_cnn;
      case FusionMethod::EarlyFusion: return early_depth;
      case FusionMethod::LayerByLayer: return 5 * mixing_block_depth + tail_depth;
    }
    return 0;
  }

  void validate() const {
    backbone.validate();
    if (use_class_token && fusion_method != FusionMethod::LayerByLayer)
      throw ConfigError("use_class_token is only valid with layer_by_layer fusion");
    if (!relax_block_budget && encoder_blocks_per_forward() != 12)
      throw ConfigError("encoder block budget is 12 per forward, config yields " +
                        std::to_string(encoder_blocks_per_forward()) +
                        " (set relax_block_budget for reduced-depth test configs)");
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (image_h < 32 || image_w < 32 || image_h % 32 != 0 || image_w % 32 != 0)
      throw ConfigError("image extents must be positive multiples of 32, got " +
                        std::to_string(image_h) + "x" + std::to_string(image_w));
    if (patch_size < 1 || image_h % patch_size != 0 || image_w % patch_size != 0)
      throw ConfigError("patch_size " + std::to_string(patch_size) +
                        " does not divide image extents " + std::to_string(image_h) + "x" +
                        std::to_string(image_w));
    if (late_depth_vit < 0 || late_depth_cnn < 0 || early_depth < 0 || mixing_block_depth < 0 ||
        tail_depth < 0)
      throw ConfigError("encoder depths must be non-negative");
  }
};

/// One row per supported architecture: 9 base combinations (3 fusion
/// methods x 3 heads) plus the 7 modified variants.
struct VariantInfo {
  std::string name;
  FusionMethod fusion_method;
  CombineVariant combine_variant = CombineVariant::UpConvConcat;
  BridgeVariant bridge_variant = BridgeVariant::UpConvMulti;
  HeadType head_type = HeadType::ChannelWise;
  bool use_class_token = false;
};

inline std::vector<VariantInfo> enumerate_variants() {
  std::vector<VariantInfo> out;
  const HeadType heads[] = {HeadType::TokenWise, HeadType::ChannelWise, HeadType::Mixing};
  for (FusionMethod m :
       {FusionMethod::LateParallel, FusionMethod::EarlyFusion, FusionMethod::LayerByLayer}) {
    for (HeadType h : heads) {
      VariantInfo v;
      v.name = std::string(to_string(m)) + "/" + to_string(h);
      v.fusion_method = m;
      v.head_type = h;
      out.push_back(v);
    }
  }
  for (CombineVariant c :
       {CombineVariant::UpConvAdd, CombineVariant::CopyConcat, CombineVariant::CopyAdd}) {
    VariantInfo v;
    v.name = std::string("late_parallel/") + to_string(c);
    v.fusion_method = FusionMethod::LateParallel;
    v.combine_variant = c;
    out.push_back(v);
  }
  for (BridgeVariant b :
       {BridgeVariant::CopyMulti, BridgeVariant::UpConvSingle, BridgeVariant::CopySingle}) {
    VariantInfo v;
    v.name = std::string("early_fusion/") + to_string(b);
    v.fusion_method = FusionMethod::EarlyFusion;
    v.bridge_variant = b;
    out.push_back(v);
  }
  VariantInfo cls;
  cls.name = "layer_by_layer/class_token";
  cls.fusion_method = FusionMethod::LayerByLayer;
  cls.use_class_token = true;
  out.push_back(cls);
  return out;
}

/// Applies a variant row onto an otherwise-configured model.
inline ModelConfig apply_variant(ModelConfig base, const VariantInfo& v) {
  base.fusion_method = v.fusion_method;
  base.combine_variant = v.combine_variant;
  base.bridge_variant = v.bridge_variant;
  base.head_type = v.head_type;
  base.use_class_token = v.use_class_token;
  return base;
}

}  // namespace tokenfusion
