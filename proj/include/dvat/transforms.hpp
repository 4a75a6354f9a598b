#pragma once

#include <cstddef>
#include <string>

#include "dvat/autograd.hpp"
#include "dvat/error.hpp"
#include "dvat/ops.hpp"
#include "dvat/rng.hpp"

namespace dvat {

// Parameters of the stochastic resize-and-pad transform: with probability p
// resize to rnd x rnd, rnd uniform in [r_low, r_high), then zero-pad to
// r_high x r_high at a random offset.
struct DiversityConfig {
  double p = 0.5;
  std::size_t r_low = 28;
  std::size_t r_high = 31;

  friend bool operator==(const DiversityConfig&, const DiversityConfig&) = default;
};

inline void validate(const DiversityConfig& cfg) {
  if (!(cfg.p >= 0.0 && cfg.p <= 1.0)) throw ConfigError("diversity: p must lie in [0,1], got " + std::to_string(cfg.p));
  if (cfg.r_high < 1) throw ConfigError("diversity: r_high must be >= 1");
  if (cfg.r_low < 1 || cfg.r_low > cfg.r_high) {
    throw ConfigError("diversity: need 1 <= r_low <= r_high, got r_low=" + std::to_string(cfg.r_low) +
                      " r_high=" + std::to_string(cfg.r_high));
  }
}

// One sampled realization. When `applied` is false the other fields are unused.
struct TransformInstance {
  bool applied = false;
  std::size_t rnd = 0;
  std::size_t pad_top = 0;
  std::size_t pad_left = 0;

  friend bool operator==(const TransformInstance&, const TransformInstance&) = default;
};

// Draw order is fixed: apply coin, then (only when applied) rnd, pad_top, pad_left.
// With r_low == r_high the resize is the identity size and rnd = r_low.
inline TransformInstance sample_transform(const DiversityConfig& cfg, Rng& rng) {
  TransformInstance t;
  t.applied = rng.uniform01() < cfg.p;
  if (!t.applied) return t;
  const auto lo = static_cast<std::int64_t>(cfg.r_low);
  const auto hi = static_cast<std::int64_t>(cfg.r_high > cfg.r_low ? cfg.r_high - 1 : cfg.r_low);
  t.rnd = static_cast<std::size_t>(rng.uniform_int(lo, hi));
  const auto slack = static_cast<std::int64_t>(cfg.r_high - t.rnd);
  t.pad_top = static_cast<std::size_t>(rng.uniform_int(0, slack));
  t.pad_left = static_cast<std::size_t>(rng.uniform_int(0, slack));
  return t;
}

inline void check_instance(const DiversityConfig& cfg, const TransformInstance& t) {
  if (!t.applied) return;
  const bool rnd_ok = cfg.r_low == cfg.r_high ? t.rnd == cfg.r_low : (t.rnd >= cfg.r_low && t.rnd < cfg.r_high);
  if (!rnd_ok || t.pad_top > cfg.r_high - t.rnd || t.pad_left > cfg.r_high - t.rnd) {
    throw InternalError("transform instance out of range: rnd=" + std::to_string(t.rnd) +
                        " pad_top=" + std::to_string(t.pad_top) + " pad_left=" + std::to_string(t.pad_left));
  }
}

// Records the transform on x's tape. Identity instances return x itself.
template <typename T>
Var<T> apply_transform(const Var<T>& x, const TransformInstance& t, const DiversityConfig& cfg) {
  if (!t.applied) return x;
  check_instance(cfg, t);
  const Var<T> resized = ops::bilinear_resize(x, t.rnd, t.rnd);
  const std::size_t slack = cfg.r_high - t.rnd;
  return ops::pad2d(resized, ops::Padding{t.pad_top, slack - t.pad_top, t.pad_left, slack - t.pad_left}, T(0));
}

}  // namespace dvat
