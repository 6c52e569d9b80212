#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsa/datagen.hpp"
#include "gsa/error.hpp"
#include "gsa/manifold.hpp"
#include "gsa/metrics.hpp"
#include "gsa/numerics/rng.hpp"
#include "gsa/numerics/tensor.hpp"
#include "gsa/segmenter.hpp"

namespace gsa {

struct SamplerConfig {
  double alpha = 1e-3;
  double cos_threshold = 0.5;
  double epsilon_norm = 1e-9;
  /// When no candidate passes the angular test: true takes the nearest, false throws.
  bool fallback_to_nearest = true;

  void validate() const {
    if (!(alpha >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "alpha must be >= 0");
    if (!(cos_threshold >= -1.0 && cos_threshold <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "cos_threshold must lie in [-1, 1]");
    }
    if (!(epsilon_norm >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "epsilon_norm must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const SamplerConfig& c) {
  j = {{"alpha", c.alpha},
       {"cos_threshold", c.cos_threshold},
       {"epsilon_norm", c.epsilon_norm},
       {"fallback_to_nearest", c.fallback_to_nearest}};
}

inline void from_json(const nlohmann::json& j, SamplerConfig& c) {
  SamplerConfig d;
  c.alpha = j.value("alpha", d.alpha);
  c.cos_threshold = j.value("cos_threshold", d.cos_threshold);
  c.epsilon_norm = j.value("epsilon_norm", d.epsilon_norm);
  c.fallback_to_nearest = j.value("fallback_to_nearest", d.fallback_to_nearest);
}

struct Suggestion {
  SampleId seed = 0;
  SampleId suggested = 0;
  double distance = 0.0;
  std::optional<double> cosine;  // empty when the direction was degenerate
  bool fallback = false;

  friend bool operator==(const Suggestion&, const Suggestion&) = default;
};

inline void to_json(nlohmann::json& j, const Suggestion& s) {
  j = {{"seed", s.seed},
       {"id", s.suggested},
       {"distance", s.distance},
       {"cosine", s.cosine ? nlohmann::json(*s.cosine) : nlohmann::json(nullptr)},
       {"fallback", s.fallback}};
}

inline void from_json(const nlohmann::json& j, Suggestion& s) {
  s.seed = j.at("seed").get<SampleId>();
  s.suggested = j.at("id").get<SampleId>();
  s.distance = j.at("distance").get<double>();
  s.cosine = j.at("cosine").is_null() ? std::nullopt
                                      : std::optional<double>(j.at("cosine").get<double>());
  s.fallback = j.at("fallback").get<bool>();
}

/// x' = x + alpha * grad.
template <class T>
Tensor<T> integrate_gradient(const Tensor<T>& x, const Tensor<T>& grad, double alpha) {
  if (x.shape() != grad.shape()) {
    throw Error(ErrorCode::kShape, "integrate_gradient: image " + shape_str(x.shape()) +
                                       " vs gradient " + shape_str(grad.shape()));
  }
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<T>(alpha) * grad[i];
  return out;
}

inline double euclidean(const LatentPoint& a, const LatentPoint& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kShape, "euclidean: dimensions " + std::to_string(a.size()) + " vs " +
                                       std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// cos of the angle between (z_j - z') and (z' - z_i); empty if either vector is
/// shorter than `eps`.
inline std::optional<double> cosine(const LatentPoint& z_j, const LatentPoint& z_prime,
                                    const LatentPoint& z_i, double eps = 1e-9) {
  if (z_j.size() != z_prime.size() || z_i.size() != z_prime.size()) {
    throw Error(ErrorCode::kShape, "cosine: latent dimensions differ");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t d = 0; d < z_prime.size(); ++d) {
    const double a = z_j[d] - z_prime[d], b = z_prime[d] - z_i[d];
    dot += a * b;
    na += a * a;
    nb += b * b;
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < eps || nb < eps) return std::nullopt;
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

/// Selection rule for one seed: scan `candidates` by ascending (distance to z', id)
/// and return the first whose direction from z' lies within the cone around
/// z' - z_i. Candidates with a degenerate direction never qualify. Without a
/// qualifying candidate, or with z' ~ z_i, the nearest is returned flagged.
inline Suggestion select_candidate(SampleId seed, const LatentPoint& z_i,
                                   const LatentPoint& z_prime, const LatentTable& table,
                                   const std::vector<SampleId>& candidates,
                                   const SamplerConfig& cfg) {
  if (candidates.empty()) {
    throw Error(ErrorCode::kEmptyCandidates,
                "no unlabeled candidates for seed " + std::to_string(seed));
  }
  if (z_i.size() != table.z_dim || z_prime.size() != table.z_dim) {
    throw Error(ErrorCode::kShape, "seed latent dimension does not match the table");
  }
  std::vector<std::pair<double, SampleId>> order;
  order.reserve(candidates.size());
  for (SampleId id : candidates) order.emplace_back(euclidean(table.at(id), z_prime), id);
  std::sort(order.begin(), order.end());
  const bool degenerate_seed = euclidean(z_prime, z_i) < cfg.epsilon_norm;
  if (!degenerate_seed) {
    for (const auto& [dist, id] : order) {
      const auto c = cosine(table.at(id), z_prime, z_i, cfg.epsilon_norm);
      if (c && *c >= cfg.cos_threshold) return {seed, id, dist, c, false};
    }
  }
  if (!cfg.fallback_to_nearest) {
    throw Error(ErrorCode::kEmptyCandidates,
                "no candidate satisfies the angular condition for seed " + std::to_string(seed));
  }
  const auto& [dist, id] = order.front();
  return {seed, id, dist, cosine(table.at(id), z_prime, z_i, cfg.epsilon_norm), true};
}

/// A seed id together with its cached latent z_i and its projected z'.
struct SeedProjection {
  SampleId seed = 0;
  LatentPoint z;
  LatentPoint z_prime;
};

/// Seeds in ascending id order; every accepted suggestion is excluded for the rest.
inline std::vector<Suggestion> suggest_batch(std::vector<SeedProjection> seeds,
                                             const LatentTable& table,
                                             const std::vector<SampleId>& unlabeled,
                                             std::size_t m, const SamplerConfig& cfg) {
  if (seeds.size() != m) {
    throw Error(ErrorCode::kInvalidArgument, "expected " + std::to_string(m) + " seeds, got " +
                                                 std::to_string(seeds.size()));
  }
  if (unlabeled.size() < m) {
    throw Error(ErrorCode::kInsufficientPool, "only " + std::to_string(unlabeled.size()) +
                                                  " unlabeled samples for a batch of " +
                                                  std::to_string(m));
  }
  std::sort(seeds.begin(), seeds.end(),
            [](const SeedProjection& a, const SeedProjection& b) { return a.seed < b.seed; });
  std::set<SampleId> taken;
  std::vector<Suggestion> out;
  for (const auto& s : seeds) {
    std::vector<SampleId> cand;
    for (SampleId id : unlabeled)
      if (!taken.count(id)) cand.push_back(id);
    out.push_back(select_candidate(s.seed, s.z, s.z_prime, table, cand, cfg));
    taken.insert(out.back().suggested);
  }
  return out;
}

/// z' = z_cached + (enc(x + alpha * grad) - enc(x)). The difference is taken in
/// 64-bit so a small step survives rounding; the cached z keeps the table's frame.
template <class T>
LatentPoint project_seed(const Vae<double>& vae64, const std::vector<float>& pixels,
                         const Tensor<T>& grad, double alpha, const LatentPoint& z_cached) {
  const std::size_t h = vae64.config.height, w = vae64.config.width;
  const Tensor<double> x = pixels_tensor<double>(pixels, h, w);
  Tensor<double> g({1, 1, h, w});
  if (grad.size() != h * w) {
    throw Error(ErrorCode::kShape, "gradient " + shape_str(grad.shape()) + " does not match image");
  }
  for (std::size_t i = 0; i < grad.size(); ++i) g[i] = static_cast<double>(grad[i]);
  const LatentPoint base = encode(vae64, x).mu;
  const LatentPoint moved = encode(vae64, integrate_gradient(x, g, alpha)).mu;
  LatentPoint z = z_cached;
  for (std::size_t d = 0; d < z.size(); ++d) z[d] += moved[d] - base[d];
  return z;
}

/// Gradient-guided batch: each seed's Dice-loss input gradient is integrated,
/// projected, and matched against the unlabeled pool.
template <class T>
std::vector<Suggestion> gradient_strategy(const UNet<T>& seg, const Vae<double>& vae64,
                                          const Dataset& ds, const LabeledSet& labeled,
                                          const std::vector<SampleId>& seeds,
                                          const LatentTable& table,
                                          const std::vector<SampleId>& unlabeled,
                                          const SamplerConfig& cfg) {
  cfg.validate();
  std::vector<SeedProjection> proj;
  for (SampleId s : seeds) {
    auto it = labeled.find(s);
    if (it == labeled.end()) {
      throw Error(ErrorCode::kInvalidArgument, "seed " + std::to_string(s) + " is not labeled");
    }
    const auto& px = ds.sample(s).pixels;
    const Tensor<T> grad = input_gradient(seg, px, it->second);
    const LatentPoint z = table.at(s);
    proj.push_back({s, z, project_seed(vae64, px, grad, cfg.alpha, z)});
  }
  return suggest_batch(std::move(proj), table, unlabeled, seeds.size(), cfg);
}

/// m ids drawn uniformly without replacement, in draw order.
inline std::vector<SampleId> random_strategy(std::vector<SampleId> unlabeled, std::size_t m,
                                             RngStream& rng) {
  if (unlabeled.size() < m) {
    throw Error(ErrorCode::kInsufficientPool, "only " + std::to_string(unlabeled.size()) +
                                                  " unlabeled samples for a batch of " +
                                                  std::to_string(m));
  }
  std::sort(unlabeled.begin(), unlabeled.end());
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + rng.below(unlabeled.size() - i);
    std::swap(unlabeled[i], unlabeled[j]);
  }
  unlabeled.resize(m);
  return unlabeled;
}

struct RankedSample {
  SampleId id = 0;
  double mean_dice = 0.0;
};

/// The m unlabeled samples whose predicted masks have the lowest mean foreground
/// Dice against ground truth; ties by lowest id.
template <class T>
std::vector<RankedSample> oracle_strategy(const UNet<T>& seg, const Dataset& ds,
                                          std::vector<SampleId> unlabeled, std::size_t m) {
  if (unlabeled.size() < m) {
    throw Error(ErrorCode::kInsufficientPool, "only " + std::to_string(unlabeled.size()) +
                                                  " unlabeled samples for a batch of " +
                                                  std::to_string(m));
  }
  std::sort(unlabeled.begin(), unlabeled.end());
  for (SampleId id : unlabeled) {
    if (!ds.sample(id).mask) {
      throw Error(ErrorCode::kMissingMask,
                  "oracle strategy needs ground truth for sample " + std::to_string(id));
    }
  }
  const std::vector<LabelMask> pred = predict_masks(seg, ds, unlabeled);
  std::vector<RankedSample> ranked;
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    ranked.push_back({unlabeled[i], mean_foreground_dice(pred[i], *ds.sample(unlabeled[i]).mask,
                                                         ds.spec.classes)});
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const RankedSample& a, const RankedSample& b) {
    return a.mean_dice < b.mean_dice;
  });
  ranked.resize(m);
  return ranked;
}

}  // namespace gsa
