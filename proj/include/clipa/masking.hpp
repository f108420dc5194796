#pragma once

// Image-token reduction: random, block and grid masks over a patch grid, the
// keep-count rule they all share, and text-token truncation.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "clipa/tensor.hpp"

namespace clipa {

class MaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Grid pattern requested with an unsupported ratio or odd grid extent.
class UnsupportedPatternError : public MaskError {
 public:
  using MaskError::MaskError;
};

// No axis-aligned rectangle removes exactly the required number of tokens.
class InfeasibleMaskError : public MaskError {
 public:
  using MaskError::MaskError;
};

enum class MaskStrategy { none, random, block, grid };

std::string_view to_string(MaskStrategy s);
MaskStrategy parse_mask_strategy(std::string_view name);

struct MaskSpec {
  MaskStrategy strategy = MaskStrategy::none;
  double ratio = 0.0;
  std::uint64_t seed = 0;

  // Throws MaskError unless 0 <= ratio < 1 and (strategy none => ratio 0).
  void validate() const;
};

struct TokenMask {
  std::int64_t grid_h = 0;
  std::int64_t grid_w = 0;
  std::vector<std::int64_t> kept;  // strictly increasing flat indices

  std::int64_t total() const { return grid_h * grid_w; }
  std::int64_t kept_count() const { return static_cast<std::int64_t>(kept.size()); }
  bool operator==(const TokenMask&) const = default;
};

// max(1, round((1 - ratio) * n_tokens)), round half away from zero.
std::int64_t keep_count(std::int64_t n_tokens, double mask_ratio);

TokenMask make_full_mask(std::int64_t grid_h, std::int64_t grid_w);

// Uniform keep_count-subset from a partial Fisher-Yates shuffle driven by
// CounterRng(seed, sample_index).
TokenMask make_random_mask(std::int64_t grid_h, std::int64_t grid_w, double mask_ratio,
                           std::uint64_t seed, std::uint64_t sample_index);

// Periodic 2x2 pattern. Ratio 0.25 keeps {TL,TR,BL}, 0.5 keeps {TL,BR},
// 0.75 keeps {TL} in every window.
TokenMask make_grid_mask(std::int64_t grid_h, std::int64_t grid_w, double mask_ratio);

// Removes one rectangle covering exactly n - keep_count(n, r) cells.
//
// Candidate shapes h x w (h <= grid_h, w <= grid_w) are ranked by
// |h*w - target| with ties going to the smaller area; if the best area is not
// exactly the target the mask is infeasible. Among exact shapes the most
// square ones (minimal |h - w|) are kept and one is drawn with the RNG, then
// the top-left corner is drawn uniformly over all valid placements.
TokenMask make_block_mask(std::int64_t grid_h, std::int64_t grid_w, double mask_ratio,
                          std::uint64_t seed, std::uint64_t sample_index);

// Dispatches on spec.strategy. A ratio of 0 yields the full mask for every strategy.
TokenMask make_mask(const MaskSpec& spec, std::int64_t grid_h, std::int64_t grid_w,
                    std::uint64_t sample_index);

// Rows of tokens [grid_h*grid_w, d] at the kept indices, in ascending order.
Tensor apply_mask(const Tensor& tokens, const TokenMask& mask);

struct TruncatedText {
  std::vector<std::int64_t> ids;
  std::vector<bool> attention;  // true on real tokens
  std::int64_t real_length() const;
};

TruncatedText truncate_text(const std::vector<std::int64_t>& token_ids, std::int64_t max_len,
                            std::int64_t pad_id);

}  // namespace clipa
