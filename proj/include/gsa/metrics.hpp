#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gsa/datagen.hpp"
#include "gsa/error.hpp"

namespace gsa {

namespace detail {

inline void expect_same_extents(const LabelMask& a, const LabelMask& b, const char* op) {
  if (a.height != b.height || a.width != b.width || a.labels.size() != b.labels.size()) {
    throw Error(ErrorCode::kShape, std::string(op) + ": mask extents " +
                                       std::to_string(a.height) + "x" + std::to_string(a.width) +
                                       " vs " + std::to_string(b.height) + "x" +
                                       std::to_string(b.width));
  }
}

}  // namespace detail

/// 2|A ∩ B| / (|A| + |B|) for the pixels of class k; 1 when both are empty.
inline double dice_score(const LabelMask& pred, const LabelMask& gt, std::uint8_t k) {
  detail::expect_same_extents(pred, gt, "dice_score");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool pa = pred.labels[i] == k, pb = gt.labels[i] == k;
    a += pa;
    b += pb;
    both += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// Mean Dice over the foreground classes 1..K-1 (all classes when K == 1).
inline double mean_foreground_dice(const LabelMask& pred, const LabelMask& gt,
                                   std::size_t classes) {
  const std::size_t first = classes > 1 ? 1 : 0;
  double s = 0.0;
  for (std::size_t k = first; k < classes; ++k) s += dice_score(pred, gt, static_cast<std::uint8_t>(k));
  return s / static_cast<double>(classes - first);
}

/// Symmetric Hausdorff distance in pixel units between the class-k pixel sets;
/// empty when either set is empty.
inline std::optional<double> hausdorff(const LabelMask& pred, const LabelMask& gt,
                                       std::uint8_t k) {
  detail::expect_same_extents(pred, gt, "hausdorff");
  struct P {
    long r, c;
  };
  auto points = [&](const LabelMask& m) {
    std::vector<P> out;
    for (std::size_t r = 0; r < m.height; ++r)
      for (std::size_t c = 0; c < m.width; ++c)
        if (m.at(r, c) == k) out.push_back({long(r), long(c)});
    return out;
  };
  const std::vector<P> a = points(pred), b = points(gt);
  if (a.empty() || b.empty()) return std::nullopt;
  // Squared integer distances; a point stops scanning once it is closer than the
  // running maximum, since it cannot raise it.
  auto directed = [](const std::vector<P>& from, const std::vector<P>& to) {
    long worst = 0;
    for (const P& p : from) {
      long best = std::numeric_limits<long>::max();
      for (const P& q : to) {
        const long d = (p.r - q.r) * (p.r - q.r) + (p.c - q.c) * (p.c - q.c);
        if (d < best) {
          best = d;
          if (best <= worst) break;
        }
      }
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(static_cast<double>(std::max(directed(a, b), directed(b, a))));
}

struct EvalRecord {
  SampleId id = 0;
  std::size_t iteration = 0;
  std::vector<double> dice;                      // per class, background included
  std::vector<std::optional<double>> hausdorff;  // per class
  double mean_dice = 0.0;                        // foreground classes
};

inline EvalRecord evaluate_mask(const LabelMask& pred, const LabelMask& gt, std::size_t classes,
                                SampleId id = 0, std::size_t iteration = 0) {
  EvalRecord r{id, iteration, {}, {}, 0.0};
  for (std::size_t k = 0; k < classes; ++k) {
    r.dice.push_back(dice_score(pred, gt, static_cast<std::uint8_t>(k)));
    r.hausdorff.push_back(hausdorff(pred, gt, static_cast<std::uint8_t>(k)));
  }
  r.mean_dice = mean_foreground_dice(pred, gt, classes);
  return r;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test

struct WilcoxonResult {
  double statistic = 0.0;  // sum of signed ranks
  double w_plus = 0.0;
  double w_minus = 0.0;
  double p_value = 1.0;  // two-sided
  std::size_t n = 0;     // nonzero differences
  bool exact = false;
};

inline constexpr std::size_t kWilcoxonExactMax = 20;

/// Paired two-sided test on a - b. Zero differences are discarded, ties get midranks.
/// Exact null distribution for n <= 20; normal approximation with tie correction above.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                           const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kInvalidArgument, "wilcoxon: samples have different lengths");
  }
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) {
      throw Error(ErrorCode::kNonFinite, "wilcoxon: non-finite observation");
    }
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  }
  if (d.empty()) throw Error(ErrorCode::kDegenerate, "degenerate pairs: all differences are zero");
  const std::size_t n = d.size();
  if (n < 5) {
    throw Error(ErrorCode::kInvalidArgument,
                "wilcoxon needs at least 5 nonzero differences, got " + std::to_string(n));
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  // Doubled ranks keep midranks integral.
  std::vector<long> rank2(n);
  double tie_term = 0.0;
  for (std::size_t s = 0; s < n;) {
    std::size_t e = s;
    while (e + 1 < n && std::abs(d[idx[e + 1]]) == std::abs(d[idx[s]])) ++e;
    const long r2 = long(s + 1) + long(e + 1);
    for (std::size_t t = s; t <= e; ++t) rank2[idx[t]] = r2;
    const double t = double(e - s + 1);
    tie_term += t * t * t - t;
    s = e + 1;
  }
  long plus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) plus2 += rank2[i];
  }
  WilcoxonResult r;
  r.n = n;
  r.w_plus = double(plus2) / 2.0;
  r.w_minus = double(total2 - plus2) / 2.0;
  r.statistic = r.w_plus - r.w_minus;
  if (n <= kWilcoxonExactMax) {
    // counts[s] = number of sign assignments whose positive doubled-rank sum is s.
    std::vector<double> counts(std::size_t(total2) + 1, 0.0);
    counts[0] = 1.0;
    long reach = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (long s = reach; s >= 0; --s)
        if (counts[std::size_t(s)] != 0.0) counts[std::size_t(s + rank2[i])] += counts[std::size_t(s)];
      reach += rank2[i];
    }
    const long obs = std::abs(2 * plus2 - total2);
    double extreme = 0.0;
    for (long s = 0; s <= total2; ++s)
      if (std::abs(2 * s - total2) >= obs) extreme += counts[std::size_t(s)];
    r.p_value = std::min(1.0, extreme / std::ldexp(1.0, int(n)));
    r.exact = true;
  } else {
    const double nn = double(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    const double z = (r.w_plus - mean) / std::sqrt(var);
    r.p_value = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
  }
  return r;
}

}  // namespace gsa
