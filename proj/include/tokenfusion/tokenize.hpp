#pragma once

#include <cstdint>
#include <string>

#include "tokenfusion/ops.hpp"
#include "tokenfusion/tensor.hpp"

namespace tokenfusion {

/// Spatial layout of a token sequence: which (row, col) cell each token came
/// from. Token order is row-major, top-left to bottom-right.
struct PatchGrid {
  int64_t patch = 1;
  int64_t grid_h = 0;
  int64_t grid_w = 0;

  int64_t spatial_tokens() const { return grid_h * grid_w; }
};

/// Tokens plus the grid metadata fusion needs for spatial re-alignment. When a
/// class token is present it sits at index 0 and is excluded from the grid.
template <typename T>
struct TokenSequence {
  Tensor<T> tokens;  // (B, N, D)
  PatchGrid grid;
  bool has_class_token = false;
};

/// (B, H, W, C) image -> (B, N, P*P*C) flattened patches. Within a patch the
/// features are row-major by pixel, channel fastest.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, int64_t patch) {
  require(image.rank() == 4, "patchify: expected (B,H,W,C) input, got " + shape_str(image.shape()));
  require(patch >= 1, "patchify: patch size must be positive");
  const int64_t B = image.extent(0), H = image.extent(1), W = image.extent(2), C = image.extent(3);
  require(H % patch == 0 && W % patch == 0,
          "patchify: patch size " + std::to_string(patch) + " does not divide image extents " +
              std::to_string(H) + "x" + std::to_string(W));
  const int64_t gh = H / patch, gw = W / patch;
  Tensor<T> cells = reshape(image, {B, gh, patch, gw, patch, C});
  Tensor<T> grouped = transpose(cells, {0, 1, 3, 2, 4, 5});  // (B, gh, gw, P, P, C)
  return reshape(grouped, {B, gh * gw, patch * patch * C});
}

/// Exact inverse of patchify; mainly for round-trip tests.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, const PatchGrid& grid, int64_t channels) {
  require(patches.rank() == 3,
          "unpatchify: expected (B,N,F) input, got " + shape_str(patches.shape()));
  const int64_t B = patches.extent(0), N = patches.extent(1), F = patches.extent(2);
  const int64_t P = grid.patch;
  require(N == grid.spatial_tokens(), "unpatchify: token count mismatch against grid");
  require(F == P * P * channels, "unpatchify: feature extent mismatch against patch size");
  Tensor<T> grouped = reshape(patches, {B, grid.grid_h, grid.grid_w, P, P, channels});
  Tensor<T> cells = transpose(grouped, {0, 1, 3, 2, 4, 5});
  return reshape(cells, {B, grid.grid_h * P, grid.grid_w * P, channels});
}

/// t0[b,i] = patches[b,i] * E + E_pos[i].
template <typename T>
Tensor<T> embed_tokens(const Tensor<T>& patches, const Tensor<T>& embed,
                       const Tensor<T>& pos_embed) {
  require(patches.rank() == 3 && embed.rank() == 2,
          "embed_tokens: expected (B,N,F) patches and (F,D) embedding, got " +
              shape_str(patches.shape()) + " and " + shape_str(embed.shape()));
  require(patches.extent(2) == embed.extent(0),
          "embed_tokens: patch feature extent " + shape_str(patches.shape()) +
              " does not match embedding " + shape_str(embed.shape()));
  require(pos_embed.rank() == 2 && pos_embed.extent(0) == patches.extent(1),
          "embed_tokens: " + std::to_string(patches.extent(1)) +
              " tokens vs positional table " + shape_str(pos_embed.shape()));
  return add(matmul(patches, embed), pos_embed);
}

/// (B, C, H, W) feature map -> (B, H*W, C) raw pixel tokens (patchify with
/// P=1). No embedding; mixing blocks concatenate these as-is.
template <typename T>
TokenSequence<T> pixel_tokens(const Tensor<T>& fm) {
  require(fm.rank() == 4, "pixel_tokens: expected (B,C,H,W) input, got " + shape_str(fm.shape()));
  const int64_t B = fm.extent(0), C = fm.extent(1), H = fm.extent(2), W = fm.extent(3);
  Tensor<T> hwc = transpose(fm, {0, 2, 3, 1});
  TokenSequence<T> seq;
  seq.tokens = reshape(hwc, {B, H * W, C});
  seq.grid = PatchGrid{1, H, W};
  return seq;
}

/// Pixel tokens mapped to model width: one token per spatial position, each
/// embedded by a dedicated (C, D) matrix plus a learned position entry.
template <typename T>
TokenSequence<T> featuremap_to_tokens(const Tensor<T>& fm, const Tensor<T>& embed,
                                      const Tensor<T>& pos_embed) {
  TokenSequence<T> raw = pixel_tokens(fm);
  raw.tokens = embed_tokens(raw.tokens, embed, pos_embed);
  return raw;
}

/// (B, N, D) tokens -> (B, D, gh, gw) spatial map. Token i lands at grid
/// position (i / gw, i % gw). The class token has no grid cell, so sequences
/// carrying one must split it off first.
template <typename T>
Tensor<T> tokens_to_grid(const TokenSequence<T>& seq) {
  require(!seq.has_class_token, "tokens_to_grid: class token must be detached first");
  require(seq.tokens.rank() == 3,
          "tokens_to_grid: expected (B,N,D) tokens, got " + shape_str(seq.tokens.shape()));
  const int64_t B = seq.tokens.extent(0), N = seq.tokens.extent(1), D = seq.tokens.extent(2);
  require(N == seq.grid.spatial_tokens(), "tokens_to_grid: token count mismatch against grid");
  Tensor<T> rows = reshape(seq.tokens, {B, seq.grid.grid_h, seq.grid.grid_w, D});
  return transpose(rows, {0, 3, 1, 2});
}

/// Inverse of tokens_to_grid.
template <typename T>
TokenSequence<T> grid_to_tokens(const Tensor<T>& grid_map) {
  require(grid_map.rank() == 4,
          "grid_to_tokens: expected (B,D,gh,gw) input, got " + shape_str(grid_map.shape()));
  const int64_t B = grid_map.extent(0), D = grid_map.extent(1);
  const int64_t gh = grid_map.extent(2), gw = grid_map.extent(3);
  TokenSequence<T> seq;
  seq.tokens = reshape(transpose(grid_map, {0, 2, 3, 1}), {B, gh * gw, D});
  seq.grid = PatchGrid{1, gh, gw};
  return seq;
}

}  // namespace tokenfusion
