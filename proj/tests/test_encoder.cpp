#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "test_util.hpp"
#include "tokenfusion/encoder.hpp"
#include "tokenfusion/gradcheck.hpp"
#include "tokenfusion/rng.hpp"

using namespace tokenfusion;

namespace {

EncoderBlock<double> make_block(ParamRegistry<double>& reg, int64_t dim, int64_t heads,
                                uint64_t seed, bool identity_init = false) {
  Rng rng(seed);
  return EncoderBlock<double>(reg, "blk", dim, heads, 4, rng, identity_init);
}

/// Reorders tokens along axis 1 by the given permutation.
template <typename T>
Tensor<T> permute_tokens(const Tensor<T>& x, const std::vector<int64_t>& perm) {
  Tensor<T> out(x.shape());
  const int64_t B = x.extent(0), N = x.extent(1), D = x.extent(2);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < N; ++i)
      for (int64_t d = 0; d < D; ++d)
        out.set({b, i, d}, x.at({b, perm[static_cast<size_t>(i)], d}));
  return out;
}

}  // namespace

TEST_CASE("mhsa with a single token reduces to the value/output projections") {
  ParamRegistry<double> reg;
  EncoderBlock<double> blk = make_block(reg, 6, 2, 42);
  Rng rng(1);
  Tensor<double> x = testutil::random_tensor<double>({2, 1, 6}, rng);

  AttnProbe<double> probe;
  Tensor<double> out = mhsa(x, blk.wq, blk.wk, blk.wv, blk.wo, 2, &probe);

  REQUIRE(probe.attention.size() == 1);
  REQUIRE(probe.attention[0].shape() == Shape({2, 2, 1, 1}));
  for (int64_t i = 0; i < probe.attention[0].numel(); ++i)
    CHECK(probe.attention[0].data()[i] == 1.0);

  Tensor<double> want = blk.wo.forward(blk.wv.forward(x));
  CHECK(testutil::max_abs_diff(out, want) < 1e-12);
}

TEST_CASE("mhsa with zero output projection emits zeros") {
  ParamRegistry<double> reg;
  EncoderBlock<double> blk = make_block(reg, 6, 2, 7, /*identity_init=*/true);
  Rng rng(2);
  Tensor<double> x = testutil::random_tensor<double>({1, 4, 6}, rng);
  Tensor<double> out = mhsa(x, blk.wq, blk.wk, blk.wv, blk.wo, 2);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.0);
}

TEST_CASE("mhsa rejects head counts that do not divide the dim") {
  ParamRegistry<double> reg;
  EncoderBlock<double> blk = make_block(reg, 6, 2, 3);
  Tensor<double> x({1, 2, 6});
  CHECK_THROWS_AS(mhsa(x, blk.wq, blk.wk, blk.wv, blk.wo, 4), std::invalid_argument);
}

TEST_CASE("attention rows sum to 1") {
  ParamRegistry<double> reg;
  EncoderBlock<double> blk = make_block(reg, 8, 4, 11);
  Rng rng(5);
  Tensor<double> x = testutil::random_tensor<double>({2, 5, 8}, rng, -2.0, 2.0);
  AttnProbe<double> probe;
  blk.forward(x, nullptr, &probe);
  REQUIRE(probe.attention.size() == 1);
  const Tensor<double>& attn = probe.attention[0];
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t h = 0; h < 4; ++h)
      for (int64_t i = 0; i < 5; ++i) {
        double sum = 0;
        for (int64_t j = 0; j < 5; ++j) sum += attn.at({b, h, i, j});
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
}

TEST_CASE("encoder block with zero Wo and zero MLP output is the identity") {
  ParamRegistry<double> reg;
  EncoderBlock<double> blk = make_block(reg, 8, 2, 13, /*identity_init=*/true);
  Rng rng(3);
  Tensor<double> x = testutil::random_tensor<double>({2, 3, 8}, rng);
  Tensor<double> out = blk.forward(x);
  CHECK(testutil::max_abs_diff(out, x) < 1e-6);
}

TEST_CASE("encoder block preserves shape") {
  ParamRegistry<double> reg;
  EncoderBlock<double> blk = make_block(reg, 8, 2, 17);
  Tensor<double> x({3, 7, 8}, 0.25);
  CHECK(blk.forward(x).shape() == Shape({3, 7, 8}));
}

TEST_CASE("encoder stack: empty is identity, identity blocks compose to identity") {
  Rng rng(23);
  Tensor<double> x = testutil::random_tensor<double>({1, 4, 8}, rng);

  std::vector<EncoderBlock<double>> empty;
  Tensor<double> same = encoder_stack(x, empty);
  CHECK(testutil::max_abs_diff(same, x) == 0.0);

  ParamRegistry<double> reg;
  Rng prng(29);
  std::vector<EncoderBlock<double>> two = make_encoder_blocks(reg, "enc", 2, 8, 2, 4, prng, true);
  ExecStats stats;
  Tensor<double> out = encoder_stack(x, two, &stats);
  CHECK(stats.encoder_blocks == 2);
  CHECK(testutil::max_abs_diff(out, x) < 1e-6);
}

TEST_CASE("executed block count matches the configured depth") {
  ParamRegistry<double> reg;
  Rng rng(31);
  std::vector<EncoderBlock<double>> blocks = make_encoder_blocks(reg, "enc", 5, 8, 2, 2, rng);
  Tensor<double> x({1, 3, 8}, 0.1);
  ExecStats stats;
  encoder_stack(x, blocks, &stats);
  CHECK(stats.encoder_blocks == 5);
}

TEST_CASE("encoder stack is permutation equivariant") {
  ParamRegistry<double> reg;
  Rng prng(37);
  std::vector<EncoderBlock<double>> blocks = make_encoder_blocks(reg, "enc", 2, 8, 2, 4, prng);
  Rng rng(41);
  Tensor<double> x = testutil::random_tensor<double>({2, 5, 8}, rng);
  const std::vector<int64_t> perm{3, 0, 4, 1, 2};

  Tensor<double> direct = permute_tokens(encoder_stack(x, blocks), perm);
  Tensor<double> permuted_first = encoder_stack(permute_tokens(x, perm), blocks);
  CHECK(testutil::max_abs_diff(direct, permuted_first) < 1e-5);
}

TEST_CASE("encoder block passes a finite-difference gradient check") {
  ParamRegistry<double> reg;
  EncoderBlock<double> blk = make_block(reg, 8, 2, 43);
  Rng rng(47);
  Tensor<double> x = testutil::random_tensor<double>({1, 3, 8}, rng);
  x.set_requires_grad(true);

  std::vector<std::pair<std::string, Tensor<double>>> params{{"x", x}};
  for (const auto& [name, t] : reg.entries()) params.emplace_back(name, t);

  GradCheckOptions opts;
  opts.max_coords_per_tensor = 6;
  // Freshly initialized attention weights (sigma 0.02) leave some q/k
  // gradients near 1e-8; at eps 1e-5 the central-difference rounding floor
  // (~|f|*2^-52/eps) swamps them, so widen the step. The block is smooth, so
  // the larger step costs no truncation accuracy at this tolerance.
  opts.eps = 1e-3;
  GradCheckReport report = finite_diff_check<double>(
      [&]() { return sum_all(blk.forward(x)); }, params, opts);
  INFO("worst " << report.worst_param << " rel " << report.max_rel_err);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-5);
}
