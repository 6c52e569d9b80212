#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "gsa/error.hpp"

namespace gsa {

namespace detail {

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// splitmix64 finalizer; decorrelates nearby (seed, label) pairs before seeding.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Deterministic random stream keyed by (seed, label).
class RngStream {
 public:
  RngStream() : RngStream(0, "default") {}
  RngStream(std::uint64_t seed, std::string label)
      : seed_(seed),
        label_(std::move(label)),
        engine_(detail::mix64(seed_ ^ detail::mix64(detail::fnv1a(label_)))) {}

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& label() const noexcept { return label_; }

  /// Uniform real in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error(ErrorCode::kInvalidArgument, "below(0)");
    // Rejection sampling keeps the draw exactly uniform.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// A child stream whose sequence depends on this stream's identity and `sublabel`.
  RngStream derive(std::string_view sublabel) const {
    return RngStream(seed_, label_ + "/" + std::string(sublabel));
  }

  std::string serialize() const {
    std::ostringstream os;
    os << seed_ << ' ' << label_.size() << ' ' << label_ << ' ' << engine_;
    return os.str();
  }

  static RngStream deserialize(const std::string& text) {
    std::istringstream is(text);
    RngStream out;
    std::size_t label_len = 0;
    if (!(is >> out.seed_ >> label_len)) {
      throw Error(ErrorCode::kCorrupt, "rng state: bad header");
    }
    is.get();
    out.label_.resize(label_len);
    is.read(out.label_.data(), static_cast<std::streamsize>(label_len));
    if (!(is >> out.engine_)) throw Error(ErrorCode::kCorrupt, "rng state: bad engine");
    return out;
  }

  friend bool operator==(const RngStream& a, const RngStream& b) {
    return a.seed_ == b.seed_ && a.label_ == b.label_ && a.engine_ == b.engine_;
  }

 private:
  std::uint64_t seed_;
  std::string label_;
  std::mt19937_64 engine_;
};

/// Free-function spelling of the stream advance.
inline double rng_next(RngStream& stream) { return stream.uniform(); }

}  // namespace gsa
