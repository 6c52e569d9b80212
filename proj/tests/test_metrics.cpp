#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gsa/metrics.hpp"
#include "gsa/numerics/rng.hpp"
#include "support/oracles.hpp"

namespace gsa {
namespace {

using namespace testsupport;

LabelMask mask_from(std::size_t h, std::size_t w, std::initializer_list<std::pair<int, int>> on,
                    std::uint8_t k = 1) {
  LabelMask m(h, w);
  for (auto [r, c] : on) m.at(r, c) = k;
  return m;
}

TEST(DiceScore, IdenticalMasksScoreOne) {
  LabelMask m(4, 4);
  m.at(1, 1) = 1;
  m.at(2, 2) = 2;
  for (std::uint8_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(dice_score(m, m, k), 1.0);
}

TEST(DiceScore, DisjointMasksScoreZero) {
  EXPECT_DOUBLE_EQ(dice_score(mask_from(4, 4, {{0, 0}}), mask_from(4, 4, {{3, 3}}), 1), 0.0);
}

TEST(DiceScore, HalfOverlap) {
  const LabelMask a = mask_from(4, 4, {{0, 0}, {0, 1}, {0, 2}, {0, 3}});
  const LabelMask b = mask_from(4, 4, {{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  EXPECT_DOUBLE_EQ(dice_score(a, b, 1), 0.5);
}

TEST(DiceScore, BothEmptyIsOneAndOneEmptyIsZero) {
  const LabelMask empty(4, 4);
  EXPECT_DOUBLE_EQ(dice_score(empty, empty, 2), 1.0);
  EXPECT_DOUBLE_EQ(dice_score(empty, mask_from(4, 4, {{1, 1}}), 1), 0.0);
}

TEST(DiceScore, RejectsExtentMismatch) {
  EXPECT_THROW(dice_score(LabelMask(4, 4), LabelMask(4, 5), 0), Error);
}

TEST(DiceScore, SymmetricAndPermutationInvariant) {
  RngStream rng(3, "dice");
  for (int t = 0; t < 100; ++t) {
    LabelMask a(6, 6), b(6, 6);
    for (auto& v : a.labels) v = std::uint8_t(rng.below(3));
    for (auto& v : b.labels) v = std::uint8_t(rng.below(3));
    std::vector<std::size_t> perm(36);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 35; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    LabelMask pa(6, 6), pb(6, 6);
    for (std::size_t i = 0; i < 36; ++i) {
      pa.labels[perm[i]] = a.labels[i];
      pb.labels[perm[i]] = b.labels[i];
    }
    for (std::uint8_t k = 0; k < 3; ++k) {
      EXPECT_DOUBLE_EQ(dice_score(a, b, k), dice_score(b, a, k));
      EXPECT_DOUBLE_EQ(dice_score(a, b, k), dice_score(pa, pb, k));
    }
  }
}

TEST(Hausdorff, IdenticalMasksAreZero) {
  const LabelMask m = mask_from(8, 8, {{1, 1}, {2, 5}, {7, 7}});
  EXPECT_DOUBLE_EQ(*hausdorff(m, m, 1), 0.0);
}

TEST(Hausdorff, SinglePixels) {
  EXPECT_DOUBLE_EQ(*hausdorff(mask_from(8, 8, {{0, 0}}), mask_from(8, 8, {{3, 4}}), 1), 5.0);
}

TEST(Hausdorff, UndefinedWhenEitherSetIsEmpty) {
  EXPECT_FALSE(hausdorff(LabelMask(8, 8), mask_from(8, 8, {{1, 1}}), 1).has_value());
  EXPECT_FALSE(hausdorff(mask_from(8, 8, {{1, 1}}), LabelMask(8, 8), 1).has_value());
}

TEST(Hausdorff, MatchesBruteForceOnRandomPairs) {
  RngStream rng(11, "hausdorff");
  for (int t = 0; t < 500; ++t) {
    const LabelMask a = random_sparse_mask(16, 16, 50, rng);
    const LabelMask b = random_sparse_mask(16, 16, 50, rng);
    const double expect = brute_hausdorff(a, b, 1);
    EXPECT_NEAR(*hausdorff(a, b, 1), expect, 1e-12);
    EXPECT_DOUBLE_EQ(*hausdorff(a, b, 1), *hausdorff(b, a, 1));
  }
}

TEST(Hausdorff, InvariantUnderSharedTranslation) {
  RngStream rng(12, "translate");
  for (int t = 0; t < 100; ++t) {
    LabelMask a(24, 24), b(24, 24);
    for (int i = 0; i < 20; ++i) {
      a.at(rng.below(12), rng.below(12)) = 1;
      b.at(rng.below(12), rng.below(12)) = 1;
    }
    const std::size_t dr = rng.below(12), dc = rng.below(12);
    LabelMask ta(24, 24), tb(24, 24);
    for (std::size_t r = 0; r < 12; ++r)
      for (std::size_t c = 0; c < 12; ++c) {
        ta.at(r + dr, c + dc) = a.at(r, c);
        tb.at(r + dr, c + dc) = b.at(r, c);
      }
    EXPECT_DOUBLE_EQ(*hausdorff(a, b, 1), *hausdorff(ta, tb, 1));
  }
}

TEST(Wilcoxon, SixPositiveDistinctDifferences) {
  const std::vector<double> a{1.1, 2.2, 3.3, 4.4, 5.5, 6.6}, b(6, 0.0);
  const WilcoxonResult r = wilcoxon_signed_rank(a, b);
  EXPECT_DOUBLE_EQ(r.statistic, 21.0);
  EXPECT_DOUBLE_EQ(r.w_plus, 21.0);
  EXPECT_DOUBLE_EQ(r.p_value, 0.03125);
  EXPECT_TRUE(r.exact);
}

TEST(Wilcoxon, IdenticalSamplesAreDegenerate) {
  const std::vector<double> a{0.1, 0.2, 0.3, 0.4, 0.5};
  try {
    wilcoxon_signed_rank(a, a);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerate);
    EXPECT_NE(std::string(e.what()).find("degenerate pairs"), std::string::npos);
  }
}

TEST(Wilcoxon, TooFewNonzeroDifferences) {
  EXPECT_THROW(wilcoxon_signed_rank({1, 2, 3, 4, 5}, {0, 0, 0, 4, 5}), Error);
}

TEST(Wilcoxon, ExactPMatchesEnumerationUpToTwelve) {
  RngStream rng(5, "wilcoxon");
  for (std::size_t n = 5; n <= 12; ++n) {
    for (int t = 0; t < 40; ++t) {
      std::vector<double> a(n), b(n);
      for (std::size_t i = 0; i < n; ++i) {
        // Coarse grid so ties occur.
        a[i] = double(rng.below(7));
        b[i] = double(rng.below(7));
        if (a[i] == b[i]) a[i] += 0.5;
      }
      const WilcoxonResult r = wilcoxon_signed_rank(a, b);
      std::vector<double> d(n);
      for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
      EXPECT_NEAR(r.p_value, enumerate_p(d), 1e-12) << "n=" << n;
    }
  }
}

TEST(Wilcoxon, SwappingSamplesKeepsPAndNegatesStatistic) {
  RngStream rng(6, "swap");
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(9), b(9);
    for (auto& v : a) v = rng.uniform();
    for (auto& v : b) v = rng.uniform();
    const auto r1 = wilcoxon_signed_rank(a, b), r2 = wilcoxon_signed_rank(b, a);
    EXPECT_DOUBLE_EQ(r1.p_value, r2.p_value);
    EXPECT_DOUBLE_EQ(r1.statistic, -r2.statistic);
  }
}

TEST(Wilcoxon, NormalApproximationAboveTwenty) {
  // 25 positive distinct differences: W+ = 325, mean 162.5, var 1381.25.
  std::vector<double> a(25), b(25, 0.0);
  for (std::size_t i = 0; i < 25; ++i) a[i] = double(i + 1);
  const WilcoxonResult r = wilcoxon_signed_rank(a, b);
  EXPECT_FALSE(r.exact);
  const double z = (325.0 - 162.5) / std::sqrt(1381.25);
  EXPECT_NEAR(r.p_value, std::erfc(z / std::sqrt(2.0)), 1e-15);
}

}  // namespace
}  // namespace gsa
