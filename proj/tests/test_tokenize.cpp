#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>
#include <vector>

#include "test_util.hpp"
#include "tokenfusion/rng.hpp"
#include "tokenfusion/tokenize.hpp"

using namespace tokenfusion;

TEST_CASE("patchify splits a 4x4 image into row-major 2x2 patches") {
  std::vector<double> vals(16);
  for (int i = 0; i < 16; ++i) vals[static_cast<size_t>(i)] = i + 1;
  Tensor<double> img({1, 4, 4, 1}, vals);
  Tensor<double> patches = patchify(img, 2);
  REQUIRE(patches.shape() == Shape({1, 4, 4}));
  CHECK(patches.at({0, 0, 0}) == 1);
  CHECK(patches.at({0, 0, 1}) == 2);
  CHECK(patches.at({0, 0, 2}) == 5);
  CHECK(patches.at({0, 0, 3}) == 6);
  // remaining patches follow top-left to bottom-right
  CHECK(patches.at({0, 1, 0}) == 3);
  CHECK(patches.at({0, 2, 0}) == 9);
  CHECK(patches.at({0, 3, 0}) == 11);
  CHECK(patches.at({0, 3, 3}) == 16);
}

TEST_CASE("patchify token count matches HW/P^2") {
  Tensor<float> img({1, 224, 224, 3});
  Tensor<float> patches = patchify(img, 16);
  CHECK(patches.shape() == Shape({1, 196, 16 * 16 * 3}));
}

TEST_CASE("patchify with P=H=W emits the flattened image") {
  Rng rng(7);
  Tensor<double> img = testutil::random_tensor<double>({2, 4, 4, 3}, rng);
  Tensor<double> patches = patchify(img, 4);
  REQUIRE(patches.shape() == Shape({2, 1, 48}));
  for (int64_t i = 0; i < 48; ++i) CHECK(patches.data()[i] == img.data()[i]);
}

TEST_CASE("patchify rejects indivisible extents, naming H, W and P") {
  Tensor<float> img({1, 6, 4, 1});
  try {
    patchify(img, 4);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("4") != std::string::npos);
    CHECK(msg.find("6") != std::string::npos);
  }
}

TEST_CASE("unpatchify inverts patchify bit-exactly") {
  Rng rng(21);
  Tensor<double> img = testutil::random_tensor<double>({2, 8, 12, 3}, rng);
  Tensor<double> patches = patchify(img, 4);
  Tensor<double> back = unpatchify(patches, PatchGrid{4, 2, 3}, 3);
  REQUIRE(back.shape() == img.shape());
  for (int64_t i = 0; i < img.numel(); ++i) CHECK(back.data()[i] == img.data()[i]);
}

TEST_CASE("embed_tokens with zero E returns the positional table") {
  Rng rng(3);
  Tensor<double> patches = testutil::random_tensor<double>({2, 6, 12}, rng);
  Tensor<double> embed = Tensor<double>::zeros({12, 5});
  Tensor<double> pos = testutil::random_tensor<double>({6, 5}, rng);
  Tensor<double> tokens = embed_tokens(patches, embed, pos);
  REQUIRE(tokens.shape() == Shape({2, 6, 5}));
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 6; ++i)
      for (int64_t d = 0; d < 5; ++d) CHECK(tokens.at({b, i, d}) == pos.at({i, d}));
}

TEST_CASE("embed_tokens with one-hot patches selects rows of E") {
  Tensor<double> patches = Tensor<double>::zeros({1, 3, 4});
  patches.set({0, 0, 2}, 1.0);
  patches.set({0, 1, 0}, 1.0);
  patches.set({0, 2, 3}, 1.0);
  Rng rng(9);
  Tensor<double> embed = testutil::random_tensor<double>({4, 6}, rng);
  Tensor<double> pos = Tensor<double>::zeros({3, 6});
  Tensor<double> tokens = embed_tokens(patches, embed, pos);
  for (int64_t d = 0; d < 6; ++d) {
    CHECK(tokens.at({0, 0, d}) == doctest::Approx(embed.at({2, d})));
    CHECK(tokens.at({0, 1, d}) == doctest::Approx(embed.at({0, d})));
    CHECK(tokens.at({0, 2, d}) == doctest::Approx(embed.at({3, d})));
  }
}

TEST_CASE("embed_tokens shape at full scale and count conservation") {
  Tensor<float> patches({2, 196, 768});
  Tensor<float> embed({768, 768});
  Tensor<float> pos({196, 768});
  Tensor<float> tokens = embed_tokens(patches, embed, pos);
  CHECK(tokens.shape() == Shape({2, 196, 768}));
}

TEST_CASE("embed_tokens validates extents") {
  Tensor<float> patches({1, 4, 12});
  CHECK_THROWS_AS(embed_tokens(patches, Tensor<float>({11, 5}), Tensor<float>({4, 5})),
                  std::invalid_argument);
  CHECK_THROWS_AS(embed_tokens(patches, Tensor<float>({12, 5}), Tensor<float>({5, 5})),
                  std::invalid_argument);
}

TEST_CASE("embed_tokens is affine in the patches") {
  Rng rng(11);
  Tensor<double> x = testutil::random_tensor<double>({1, 4, 6}, rng);
  Tensor<double> embed = testutil::random_tensor<double>({6, 5}, rng);
  Tensor<double> pos = testutil::random_tensor<double>({4, 5}, rng);
  const double alpha = 2.75;

  Tensor<double> ax = scale(x, alpha);
  Tensor<double> zero = Tensor<double>::zeros({1, 4, 6});
  Tensor<double> lhs = sub(embed_tokens(ax, embed, pos), embed_tokens(zero, embed, pos));
  Tensor<double> rhs =
      scale(sub(embed_tokens(x, embed, pos), embed_tokens(zero, embed, pos)), alpha);
  CHECK(testutil::max_abs_diff(lhs, rhs) < 1e-6);
}

TEST_CASE("pixel tokens: 1x1 map embeds to pixel*E + E_pos[0]") {
  Tensor<double> fm({1, 3, 1, 1}, {2.0, -1.0, 0.5});
  Rng rng(5);
  Tensor<double> embed = testutil::random_tensor<double>({3, 4}, rng);
  Tensor<double> pos = testutil::random_tensor<double>({1, 4}, rng);
  TokenSequence<double> seq = featuremap_to_tokens(fm, embed, pos);
  REQUIRE(seq.tokens.shape() == Shape({1, 1, 4}));
  for (int64_t d = 0; d < 4; ++d) {
    double want = pos.at({0, d});
    want += 2.0 * embed.at({0, d}) - 1.0 * embed.at({1, d}) + 0.5 * embed.at({2, d});
    CHECK(seq.tokens.at({0, 0, d}) == doctest::Approx(want));
  }
}

TEST_CASE("featuremap_to_tokens records the source grid") {
  Tensor<float> fm({2, 8, 14, 14});
  Tensor<float> embed({8, 16});
  Tensor<float> pos({196, 16});
  TokenSequence<float> seq = featuremap_to_tokens(fm, embed, pos);
  CHECK(seq.tokens.extent(1) == 196);
  CHECK(seq.grid.grid_h == 14);
  CHECK(seq.grid.grid_w == 14);
  CHECK(!seq.has_class_token);
}

TEST_CASE("pixel token layout is row-major with channel features") {
  // fm[0, c, h, w] = 100*c + 10*h + w
  Tensor<double> fm({1, 2, 2, 3});
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t h = 0; h < 2; ++h)
      for (int64_t w = 0; w < 3; ++w) fm.set({0, c, h, w}, 100.0 * c + 10.0 * h + w);
  TokenSequence<double> seq = pixel_tokens(fm);
  REQUIRE(seq.tokens.shape() == Shape({1, 6, 2}));
  // token index r*W + c carries that position's channel column
  CHECK(seq.tokens.at({0, 0, 0}) == 0.0);
  CHECK(seq.tokens.at({0, 0, 1}) == 100.0);
  CHECK(seq.tokens.at({0, 5, 0}) == 12.0);
  CHECK(seq.tokens.at({0, 5, 1}) == 112.0);
}

TEST_CASE("tokens_to_grid round trip is bit-exact and positions map to (r,c)") {
  Rng rng(17);
  TokenSequence<double> seq;
  seq.tokens = testutil::random_tensor<double>({2, 4, 5}, rng);
  seq.grid = PatchGrid{1, 2, 2};
  Tensor<double> grid = tokens_to_grid(seq);
  REQUIRE(grid.shape() == Shape({2, 5, 2, 2}));
  for (int64_t d = 0; d < 5; ++d) {
    CHECK(grid.at({0, d, 0, 0}) == seq.tokens.at({0, 0, d}));
    CHECK(grid.at({0, d, 0, 1}) == seq.tokens.at({0, 1, d}));
    CHECK(grid.at({0, d, 1, 0}) == seq.tokens.at({0, 2, d}));
    CHECK(grid.at({0, d, 1, 1}) == seq.tokens.at({0, 3, d}));
  }
  TokenSequence<double> back = grid_to_tokens(grid);
  REQUIRE(back.tokens.shape() == seq.tokens.shape());
  for (int64_t i = 0; i < seq.tokens.numel(); ++i)
    CHECK(back.tokens.data()[i] == seq.tokens.data()[i]);
}

TEST_CASE("tokens_to_grid rejects sequences that still carry a class token") {
  TokenSequence<float> seq;
  seq.tokens = Tensor<float>({1, 5, 3});
  seq.grid = PatchGrid{1, 2, 2};
  seq.has_class_token = true;
  CHECK_THROWS_AS(tokens_to_grid(seq), std::invalid_argument);
}
