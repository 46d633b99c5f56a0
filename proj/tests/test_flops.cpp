#include <gtest/gtest.h>

#include "v2xvlm/flops.hpp"
#include "v2xvlm/verify.hpp"

using namespace v2x;
using namespace v2x::flops;

TEST(Flops, WorkedValues) {
  const FlopSpec s{16, 8, 64, 4, std::nullopt};
  EXPECT_EQ(flops_vis(s), 147456u);
  EXPECT_EQ(flops_text(s), 69632u);
  EXPECT_EQ(flops_cross(s), 139264u);
}

TEST(Flops, SingleTokenAndZeroText) {
  const FlopSpec one{1, 1, 64, 4, std::nullopt};
  EXPECT_EQ(flops_vis(one), 2u * 64 * 64 + 64);
  EXPECT_EQ(flops_text(one), 2u * 64 * 64 + 64);
  const FlopSpec no_text{16, 0, 64, 4, std::nullopt};
  EXPECT_EQ(flops_cross(no_text), 2u * 16 * 64 * 64);
}

TEST(Flops, ScalingLaws) {
  const FlopSpec a{16, 8, 32, 4, std::nullopt};
  const FlopSpec b{32, 16, 32, 4, std::nullopt};
  EXPECT_EQ(flops_vis(b) - 2 * 32 * 32 * 32, 4 * (flops_vis(a) - 2 * 16 * 32 * 32));
  const FlopSpec c{16, 9, 32, 4, std::nullopt};
  EXPECT_EQ(flops_cross(c) - flops_cross(a), 16u * 32);
}

TEST(Flops, MonotoneInEachArgument) {
  for (std::uint64_t nv = 1; nv < 20; nv += 3)
    for (std::uint64_t nt = 1; nt < 20; nt += 3)
      for (std::uint64_t d = 4; d <= 32; d += 4) {
        const FlopSpec s{nv, nt, d, 4, std::nullopt};
        const FlopSpec sv{nv + 1, nt, d, 4, std::nullopt};
        const FlopSpec st{nv, nt + 1, d, 4, std::nullopt};
        const FlopSpec sd{nv, nt, d + 4, 4, std::nullopt};
        EXPECT_GT(flops_vis(s), 0u);
        EXPECT_LE(flops_vis(s), flops_vis(sv));
        EXPECT_LE(flops_text(s), flops_text(st));
        EXPECT_LE(flops_cross(s), flops_cross(sv));
        EXPECT_LE(flops_cross(s), flops_cross(st));
        EXPECT_LE(flops_cross(s), flops_cross(sd));
      }
}

TEST(LowRank, LiteralAndPerMatrixReadings) {
  const FlopSpec s{16, 8, 64, 4, 4};
  EXPECT_EQ(flops_cross_lowrank(s), 16384u);
  EXPECT_EQ(flops_cross_lowrank(s, LowRankReading::per_matrix), 4u * 16 * 64 * 4 + 16 * 8 * 64);
}

TEST(LowRank, FullRankLimitAndRatio) {
  const FlopSpec full{16, 8, 64, 4, std::nullopt};
  FlopSpec s{16, 8, 64, 4, 64};
  EXPECT_EQ(flops_cross_lowrank_unchecked(s, LowRankReading::pair), flops_cross(full));
  s.rank = 8;
  const std::uint64_t proj_low = flops_cross_lowrank(s) - 16 * 8 * 64;
  const std::uint64_t proj_full = flops_cross(full) - 16 * 8 * 64;
  EXPECT_EQ(proj_full / proj_low, 64u / 8);
}

TEST(LowRank, Errors) {
  const FlopSpec s{16, 8, 64, 4, std::nullopt};
  try {
    flops_cross_lowrank(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::rank_missing);
  }
  EXPECT_THROW(flops_cross_lowrank(FlopSpec{16, 8, 64, 4, 64}), Error);
  EXPECT_THROW(flops_vis(FlopSpec{16, 8, 63, 4, std::nullopt}), Error);
}

TEST(Dominant, Regimes) {
  EXPECT_EQ(dominant_term(FlopSpec{4096, 4096, 64, 4, std::nullopt}), Dominant::cross_modal);
  EXPECT_EQ(dominant_term(FlopSpec{4096, 1, 64, 4, std::nullopt}), Dominant::vision_quadratic);
  EXPECT_EQ(dominant_term(FlopSpec{1, 4096, 64, 4, std::nullopt}), Dominant::text_quadratic);
  EXPECT_EQ(dominant_term(FlopSpec{2, 2, 4096, 4, std::nullopt}), Dominant::projection);
  EXPECT_EQ(dominant_name(Dominant::cross_modal), "cross-modal");
}

TEST(Instrumented, AgreesWithFormulas) {
  const auto r = verify::flop_agreement_suite(10, 0);
  EXPECT_TRUE(r.pass) << r.detail;
}
