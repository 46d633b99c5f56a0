#pragma once

// Closed-form attention FLOP accounting.
//
// Convention: one FLOP per multiply-accumulate. Softmax, bias and residual
// work is excluded. The formulas count the query-stream projections (Q and
// output) plus the score product; nn::MacTally::formula_convention() selects
// the same subset from an instrumented forward pass.

#include <cstdint>
#include <optional>
#include <string>

#include "v2xvlm/error.hpp"

namespace v2x::flops {

struct FlopSpec {
  std::uint64_t n_vis = 0;
  std::uint64_t n_txt = 0;
  std::uint64_t d = 0;
  std::uint64_t heads = 1;
  std::optional<std::uint64_t> rank;

  std::uint64_t head_dim() const { return d / heads; }

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) fail(Errc::invalid_config, "d must be a positive multiple of heads");
    if (rank && (*rank == 0 || *rank >= d)) fail(Errc::invalid_config, "rank must satisfy 0 < r < d");
  }
};

inline std::uint64_t flops_vis(const FlopSpec& s) {
  s.validate();
  return 2 * s.n_vis * s.d * s.d + s.n_vis * s.n_vis * s.d;
}

inline std::uint64_t flops_text(const FlopSpec& s) {
  s.validate();
  return 2 * s.n_txt * s.d * s.d + s.n_txt * s.n_txt * s.d;
}

inline std::uint64_t flops_cross(const FlopSpec& s) {
  s.validate();
  return 2 * s.n_vis * s.d * s.d + s.n_vis * s.n_txt * s.d;
}

enum class LowRankReading {
  pair,        // the two d^2 projection terms together become 2dr per token
  per_matrix,  // each d^2 term becomes 2dr, so 4dr per token
};

// Cross-modal attention with d x d projections factored through rank r.
// Rank equal to d reproduces the full-rank projection term (pair reading).
inline std::uint64_t flops_cross_lowrank_unchecked(const FlopSpec& s, LowRankReading reading) {
  if (!s.rank) fail(Errc::rank_missing, "low-rank formula needs a rank");
  const std::uint64_t r = *s.rank;
  const std::uint64_t proj = (reading == LowRankReading::pair ? 2 : 4) * s.n_vis * s.d * r;
  return proj + s.n_vis * s.n_txt * s.d;
}

inline std::uint64_t flops_cross_lowrank(const FlopSpec& s, LowRankReading reading = LowRankReading::pair) {
  if (!s.rank) fail(Errc::rank_missing, "low-rank formula needs a rank");
  s.validate();
  return flops_cross_lowrank_unchecked(s, reading);
}

enum class Dominant { projection, vision_quadratic, text_quadratic, cross_modal };

inline std::string dominant_name(Dominant d) {
  switch (d) {
    case Dominant::projection: return "projection";
    case Dominant::vision_quadratic: return "vision-quadratic";
    case Dominant::text_quadratic: return "text-quadratic";
    case Dominant::cross_modal: return "cross-modal";
  }
  return "projection";
}

struct TermBreakdown {
  std::uint64_t projection = 0;  // all 2Nd^2 terms across the three blocks
  std::uint64_t vision_quadratic = 0;
  std::uint64_t text_quadratic = 0;
  std::uint64_t cross_modal = 0;
};

inline TermBreakdown term_breakdown(const FlopSpec& s) {
  s.validate();
  TermBreakdown t;
  t.projection = 2 * s.n_vis * s.d * s.d + 2 * s.n_txt * s.d * s.d + 2 * s.n_vis * s.d * s.d;
  t.vision_quadratic = s.n_vis * s.n_vis * s.d;
  t.text_quadratic = s.n_txt * s.n_txt * s.d;
  t.cross_modal = s.n_vis * s.n_txt * s.d;
  return t;
}

// Largest term of one layer. Ties go to cross-modal, then vision, then text,
// so N_v = N_t reports the cross-modal product.
inline Dominant dominant_term(const FlopSpec& s) {
  const auto t = term_breakdown(s);
  Dominant best = Dominant::cross_modal;
  std::uint64_t v = t.cross_modal;
  if (t.vision_quadratic > v) {
    best = Dominant::vision_quadratic;
    v = t.vision_quadratic;
  }
  if (t.text_quadratic > v) {
    best = Dominant::text_quadratic;
    v = t.text_quadratic;
  }
  if (t.projection > v) best = Dominant::projection;
  return best;
}

}  // namespace v2x::flops
