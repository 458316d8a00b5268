#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tokenfusion/layers.hpp"
#include "tokenfusion/nn.hpp"
#include "tokenfusion/tensor.hpp"

namespace tokenfusion {

struct StageSpec {
  int64_t num_blocks = 1;
  int64_t out_channels = 64;
  int64_t stride = 2;  // applied at the first block of the stage
};

struct BackboneConfig {
  int64_t stem_channels = 16;
  std::array<StageSpec, 4> stages{};

  /// Small enough for float64 finite-difference checks.
  static BackboneConfig toy() {
    BackboneConfig cfg;
    cfg.stem_channels = 16;
    cfg.stages = {StageSpec{1, 16, 2}, StageSpec{1, 32, 2}, StageSpec{1, 64, 2},
                  StageSpec{1, 128, 2}};
    return cfg;
  }

  /// ResNet-101 stage topology: blocks [3,4,23,3], channels [256,512,1024,2048].
  static BackboneConfig resnet101_scale() {
    BackboneConfig cfg;
    cfg.stem_channels = 64;
    cfg.stages = {StageSpec{3, 256, 2}, StageSpec{4, 512, 2}, StageSpec{23, 1024, 2},
                  StageSpec{3, 2048, 2}};
    return cfg;
  }

  void validate() const {
    require(stem_channels >= 1, "backbone: stem_channels must be positive");
    for (const StageSpec& s : stages) {
      require(s.num_blocks >= 1, "backbone: stage num_blocks must be >= 1");
      require(s.out_channels >= 1, "backbone: stage out_channels must be >= 1");
      require(s.stride == 1 || s.stride == 2, "backbone: stage stride must be 1 or 2");
    }
  }

  /// Channel count of each emitted map, stem first.
  std::array<int64_t, 5> map_channels() const {
    return {stem_channels, stages[0].out_channels, stages[1].out_channels,
            stages[2].out_channels, stages[3].out_channels};
  }
};

/// The five tapped maps, stride 2^(i+1) at index i. Spatial extents halve at
/// every step.
template <typename T>
struct StageFeatureMaps {
  std::array<Tensor<T>, 5> maps;
};

/// 1x1 reduce -> 3x3 (carries the stage stride) -> 1x1 expand, each conv
/// bias-free and followed by ChannelNorm; ReLU joins branch and shortcut.
/// Projection shortcut only when shape changes.
template <typename T>
struct BottleneckBlock {
  ConvLayer<T> reduce, mid, expand;
  ChannelNorm<T> norm1, norm2, norm3;
  std::optional<ConvLayer<T>> proj;
  std::optional<ChannelNorm<T>> proj_norm;

  BottleneckBlock() = default;
  BottleneckBlock(ParamRegistry<T>& reg, const std::string& prefix, int64_t in_ch, int64_t out_ch,
                  int64_t stride, Rng& rng) {
    const int64_t mid_ch = std::max<int64_t>(1, out_ch / 4);
    reduce = ConvLayer<T>(reg, prefix + ".reduce", in_ch, mid_ch, 1, 1, 0, false, rng);
    norm1 = ChannelNorm<T>(reg, prefix + ".norm1", mid_ch);
    mid = ConvLayer<T>(reg, prefix + ".mid", mid_ch, mid_ch, 3, stride, 1, false, rng);
    norm2 = ChannelNorm<T>(reg, prefix + ".norm2", mid_ch);
    expand = ConvLayer<T>(reg, prefix + ".expand", mid_ch, out_ch, 1, 1, 0, false, rng);
    norm3 = ChannelNorm<T>(reg, prefix + ".norm3", out_ch);
    if (in_ch != out_ch || stride != 1) {
      proj = ConvLayer<T>(reg, prefix + ".proj", in_ch, out_ch, 1, stride, 0, false, rng);
      proj_norm = ChannelNorm<T>(reg, prefix + ".proj_norm", out_ch);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> branch = relu(norm1.forward(reduce.forward(x)));
    branch = relu(norm2.forward(mid.forward(branch)));
    branch = norm3.forward(expand.forward(branch));
    Tensor<T> shortcut = proj ? proj_norm->forward(proj->forward(x)) : x;
    return relu(add(branch, shortcut));
  }
};

/// Residual CNN exposing all five stage maps. Strides relative to the input:
/// stem map 2, then 4, 8, 16, 32.
template <typename T>
struct Backbone {
  BackboneConfig cfg;
  ConvLayer<T> stem;
  ChannelNorm<T> stem_norm;
  std::array<std::vector<BottleneckBlock<T>>, 4> stages;

  Backbone() = default;
  Backbone(ParamRegistry<T>& reg, const std::string& prefix, const BackboneConfig& cfg_, Rng& rng)
      : cfg(cfg_) {
    cfg.validate();
    stem = ConvLayer<T>(reg, prefix + ".stem", 3, cfg.stem_channels, 7, 2, 3, false, rng);
    stem_norm = ChannelNorm<T>(reg, prefix + ".stem_norm", cfg.stem_channels);
    int64_t in_ch = cfg.stem_channels;
    for (size_t s = 0; s < 4; ++s) {
      const StageSpec& spec = cfg.stages[s];
      for (int64_t b = 0; b < spec.num_blocks; ++b) {
        const int64_t stride = (b == 0) ? spec.stride : 1;
        stages[s].emplace_back(reg,
                               prefix + ".stage" + std::to_string(s + 1) + ".block" +
                                   std::to_string(b),
                               in_ch, spec.out_channels, stride, rng);
        in_ch = spec.out_channels;
      }
    }
  }

  StageFeatureMaps<T> forward(const Tensor<T>& image) const {
    require(image.rank() == 4 && image.extent(1) == 3,
            "backbone: expected (B,3,H,W) input, got " + shape_str(image.shape()));
    require(image.extent(2) % 32 == 0 && image.extent(3) % 32 == 0,
            "backbone: input extents " + shape_str(image.shape()) + " must be divisible by 32");
    StageFeatureMaps<T> out;
    Tensor<T> cur = relu(stem_norm.forward(stem.forward(image)));
    out.maps[0] = cur;
    for (size_t s = 0; s < 4; ++s) {
      for (const BottleneckBlock<T>& block : stages[s]) cur = block.forward(cur);
      out.maps[s + 1] = cur;
    }
    return out;
  }
};

}  // namespace tokenfusion
