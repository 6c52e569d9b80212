#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "gsa/numerics/rng.hpp"
#include "gsa/sampler.hpp"
#include "support/oracles.hpp"

namespace gsa {
namespace {

using namespace testsupport;

TEST(IntegrateGradient, Arithmetic) {
  Tensor<double> x({1}, {0.5}), g({1}, {2.0});
  EXPECT_DOUBLE_EQ(integrate_gradient(x, g, 1e-3)[0], 0.502);
  EXPECT_EQ(integrate_gradient(x, g, 0.0), x);
  EXPECT_EQ(integrate_gradient(x, Tensor<double>({1}), 1e-3), x);
  EXPECT_THROW(integrate_gradient(x, Tensor<double>({2}), 1e-3), Error);
}

TEST(Euclidean, Basics) {
  EXPECT_DOUBLE_EQ(euclidean({0, 0}, {3, 4}), 5.0);
  EXPECT_DOUBLE_EQ(euclidean({1.5, -2}, {1.5, -2}), 0.0);
  EXPECT_THROW(euclidean({0, 0}, {0, 0, 0}), Error);
  RngStream rng(1, "sym");
  for (int t = 0; t < 100; ++t) {
    LatentPoint a{rng.normal(), rng.normal(), rng.normal()}, b{rng.normal(), rng.normal(), rng.normal()};
    EXPECT_DOUBLE_EQ(euclidean(a, b), euclidean(b, a));
  }
}

TEST(Cosine, CanonicalDirections) {
  EXPECT_DOUBLE_EQ(*cosine({2, 0}, {1, 0}, {0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(*cosine({0, 0}, {1, 0}, {0, 0}), -1.0);
  EXPECT_NEAR(*cosine({1, 1}, {1, 0}, {0, 0}), 0.0, 1e-15);
}

TEST(Cosine, DegenerateDirection) {
  EXPECT_FALSE(cosine({1, 0}, {1, 0}, {0, 0}).has_value());
  EXPECT_FALSE(cosine({2, 0}, {1, 0}, {1, 0}).has_value());
}

TEST(SuggestForSeed, SingleCollinearCandidate) {
  const LatentTable t = table_of({{0, {0, 0}}, {7, {3, 0}}});
  const Suggestion s = select_candidate(0, {0, 0}, {1, 0}, t, {7}, SamplerConfig{});
  EXPECT_EQ(s.suggested, 7u);
  EXPECT_FALSE(s.fallback);
  EXPECT_DOUBLE_EQ(s.distance, 2.0);
  EXPECT_DOUBLE_EQ(*s.cosine, 1.0);
}

TEST(SuggestForSeed, AllBehindFallsBackToNearest) {
  const LatentTable t = table_of({{0, {0, 0}}, {1, {-1, 0}}, {2, {-3, 1}}, {3, {0.5, 0.9}}});
  const Suggestion s = select_candidate(0, {0, 0}, {0.1, 0}, t, {1, 2, 3}, SamplerConfig{});
  EXPECT_TRUE(s.fallback);
  EXPECT_EQ(s.suggested, 3u);
}

TEST(SuggestForSeed, NoFallbackPolicyThrows) {
  const LatentTable t = table_of({{0, {0, 0}}, {1, {-1, 0}}});
  SamplerConfig cfg;
  cfg.fallback_to_nearest = false;
  EXPECT_THROW(select_candidate(0, {0, 0}, {0.1, 0}, t, {1}, cfg), Error);
}

TEST(SuggestForSeed, DistanceTiesGoToLowestId) {
  const LatentTable t = table_of({{0, {0, 0}}, {4, {2, 1}}, {9, {2, -1}}});
  EXPECT_EQ(select_candidate(0, {0, 0}, {1, 0}, t, {9, 4}, SamplerConfig{}).suggested, 4u);
}

TEST(SuggestForSeed, DegenerateSeedUsesNearestWithFlag) {
  const LatentTable t = table_of({{0, {0, 0}}, {1, {5, 0}}, {2, {0, -1}}});
  const Suggestion s = select_candidate(0, {0, 0}, {0, 0}, t, {1, 2}, SamplerConfig{});
  EXPECT_TRUE(s.fallback);
  EXPECT_EQ(s.suggested, 2u);
}

TEST(SuggestForSeed, EmptyCandidatesError) {
  const LatentTable t = table_of({{0, {0, 0}}});
  try {
    select_candidate(0, {0, 0}, {1, 0}, t, {}, SamplerConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyCandidates);
  }
}

TEST(SuggestForSeed, MatchesBruteForceOnRandomPools) {
  RngStream rng(21, "pools");
  for (int t = 0; t < 200; ++t) {
    const std::size_t zd = 2 + rng.below(2), n = 2 + rng.below(999);
    std::map<SampleId, LatentPoint> pts;
    for (SampleId id = 0; id < n; ++id) {
      LatentPoint z(zd);
      // Coarse grid in some trials to force exact distance ties.
      for (auto& v : z) v = t % 3 == 0 ? double(rng.below(5)) : rng.normal();
      pts[id] = z;
    }
    const LatentTable table = table_of(pts);
    const SampleId seed = SampleId(rng.below(n));
    const LatentPoint zi = table.at(seed);
    LatentPoint zp = zi;
    for (auto& v : zp) v += t % 7 == 0 ? 0.0 : 1e-3 * rng.normal();
    std::vector<SampleId> cand;
    for (SampleId id = 0; id < n; ++id)
      if (id != seed && rng.uniform() < 0.8) cand.push_back(id);
    if (cand.empty()) continue;
    SamplerConfig cfg;
    cfg.cos_threshold = t % 5 == 0 ? 0.9 : 0.5;
    EXPECT_EQ(select_candidate(seed, zi, zp, table, cand, cfg),
              brute_select(seed, zi, zp, table, cand, cfg))
        << "trial " << t;
  }
}

TEST(SuggestBatch, SingleSeedReducesToSuggestForSeed) {
  const LatentTable t = table_of({{0, {0, 0}}, {1, {2, 0}}, {2, {-2, 0}}});
  const auto b = suggest_batch({{0, {0, 0}, {1, 0}}}, t, {1, 2}, 1, SamplerConfig{});
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0], select_candidate(0, {0, 0}, {1, 0}, t, {1, 2}, SamplerConfig{}));
}

TEST(SuggestBatch, CoincidingChoicesSecondSeedTakesNextRanked) {
  // Seeds 0 and 1 both point at 10 first; 1 (processed second) gets 11.
  const LatentTable t = table_of({{0, {0, 0}}, {1, {0, 0.1}}, {10, {1, 0}}, {11, {1.5, 0.2}}});
  const auto b = suggest_batch({{1, {0, 0.1}, {0.01, 0.1}}, {0, {0, 0}, {0.01, 0}}}, t, {10, 11},
                               2, SamplerConfig{});
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0].seed, 0u);
  EXPECT_EQ(b[0].suggested, 10u);
  EXPECT_EQ(b[1].seed, 1u);
  EXPECT_EQ(b[1].suggested, 11u);
  EXPECT_EQ(b[1], brute_select(1, {0, 0.1}, {0.01, 0.1}, t, {11}, SamplerConfig{}));
}

TEST(SuggestBatch, DistinctUnlabeledAndMatchesSequentialBruteForce) {
  RngStream rng(22, "batch");
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 30 + rng.below(300), m = 1 + rng.below(12);
    std::map<SampleId, LatentPoint> pts;
    for (SampleId id = 0; id < n; ++id) pts[id] = {rng.normal(), rng.normal(), rng.normal()};
    const LatentTable table = table_of(pts);
    std::set<SampleId> labeled;
    while (labeled.size() < m) labeled.insert(SampleId(rng.below(n)));
    std::vector<SampleId> unlabeled;
    for (SampleId id = 0; id < n; ++id)
      if (!labeled.count(id)) unlabeled.push_back(id);
    std::vector<SeedProjection> seeds;
    for (SampleId s : labeled) {
      LatentPoint zp = table.at(s);
      for (auto& v : zp) v += 1e-3 * rng.normal();
      seeds.push_back({s, table.at(s), zp});
    }
    std::reverse(seeds.begin(), seeds.end());
    const auto out = suggest_batch(seeds, table, unlabeled, m, SamplerConfig{});
    std::set<SampleId> seen;
    std::set<SampleId> taken;
    std::vector<SeedProjection> sorted = seeds;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.seed < b.seed; });
    for (std::size_t i = 0; i < m; ++i) {
      EXPECT_TRUE(seen.insert(out[i].suggested).second);
      EXPECT_FALSE(labeled.count(out[i].suggested));
      if (!out[i].fallback) EXPECT_GE(*out[i].cosine, 0.5);
      std::vector<SampleId> cand;
      for (SampleId id : unlabeled)
        if (!taken.count(id)) cand.push_back(id);
      EXPECT_EQ(out[i], brute_select(sorted[i].seed, sorted[i].z, sorted[i].z_prime, table, cand,
                                     SamplerConfig{}));
      taken.insert(out[i].suggested);
    }
  }
}

TEST(SuggestBatch, InsufficientPool) {
  const LatentTable t = table_of({{0, {0, 0}}, {1, {1, 0}}, {2, {2, 0}}});
  try {
    suggest_batch({{0, {0, 0}, {1, 0}}, {1, {1, 0}, {2, 0}}}, t, {2}, 2, SamplerConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientPool);
  }
}

TEST(SuggestBatch, ZeroStepNeverSuggestsTheSeed) {
  const LatentTable t = table_of({{0, {0, 0}}, {1, {0, 0}}, {2, {3, 3}}});
  const auto b = suggest_batch({{0, {0, 0}, {0, 0}}}, t, {1, 2}, 1, SamplerConfig{.alpha = 0.0});
  EXPECT_EQ(b[0].suggested, 1u);
  EXPECT_TRUE(b[0].fallback);
}

TEST(RandomStrategy, WholePoolWhenMEqualsSize) {
  RngStream rng(1, "suggest");
  std::vector<SampleId> pool{5, 3, 9, 1};
  auto out = random_strategy(pool, 4, rng);
  std::sort(out.begin(), out.end());
  EXPECT_EQ(out, (std::vector<SampleId>{1, 3, 5, 9}));
}

TEST(RandomStrategy, DeterministicPerStream) {
  RngStream a(4, "suggest"), b(4, "suggest");
  std::vector<SampleId> pool(50);
  std::iota(pool.begin(), pool.end(), 0);
  EXPECT_EQ(random_strategy(pool, 10, a), random_strategy(pool, 10, b));
}

TEST(RandomStrategy, UniformFrequencies) {
  RngStream rng(8, "suggest");
  std::vector<SampleId> pool(10);
  std::iota(pool.begin(), pool.end(), 0);
  std::vector<int> counts(10, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[random_strategy(pool, 1, rng)[0]];
  const double p = 0.1, sd = std::sqrt(draws * p * (1 - p));
  double chi2 = 0;
  for (int c : counts) {
    EXPECT_LT(std::abs(c - draws * p), 3 * sd);
    chi2 += (c - draws * p) * (c - draws * p) / (draws * p);
  }
  // 99.9% quantile of chi-square with 9 degrees of freedom.
  EXPECT_LT(chi2, 27.88);
}

TEST(RandomStrategy, InsufficientPool) {
  RngStream rng(1, "suggest");
  EXPECT_THROW(random_strategy({1, 2}, 3, rng), Error);
}

}  // namespace
}  // namespace gsa
