#include "clipa/masking.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>

#include "clipa/rng.hpp"

namespace clipa {

namespace {

void check_grid(std::int64_t grid_h, std::int64_t grid_w) {
  if (grid_h < 1 || grid_w < 1) {
    throw MaskError("mask grid extents must be >= 1, got " + std::to_string(grid_h) + "x" +
                    std::to_string(grid_w));
  }
}

void check_ratio(double r) {
  if (!(r >= 0.0 && r < 1.0)) throw MaskError("mask ratio must lie in [0, 1), got " + std::to_string(r));
}

bool near(double a, double b) { return std::abs(a - b) < 1e-9; }

// Random masks draw from stream 2*sample_index, block masks from 2*sample_index + 1.
std::uint64_t random_stream(std::uint64_t sample_index) { return sample_index * 2; }
std::uint64_t block_stream(std::uint64_t sample_index) { return sample_index * 2 + 1; }

}  // namespace

std::string_view to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::none: return "none";
    case MaskStrategy::random: return "random";
    case MaskStrategy::block: return "block";
    case MaskStrategy::grid: return "grid";
  }
  return "none";
}

MaskStrategy parse_mask_strategy(std::string_view name) {
  if (name == "none") return MaskStrategy::none;
  if (name == "random") return MaskStrategy::random;
  if (name == "block") return MaskStrategy::block;
  if (name == "grid") return MaskStrategy::grid;
  throw MaskError("unknown mask strategy '" + std::string(name) + "'");
}

void MaskSpec::validate() const {
  check_ratio(ratio);
  if (strategy == MaskStrategy::none && ratio != 0.0) {
    throw MaskError("mask strategy 'none' requires ratio 0");
  }
}

std::int64_t keep_count(std::int64_t n_tokens, double mask_ratio) {
  if (n_tokens < 1) throw MaskError("token count must be positive");
  check_ratio(mask_ratio);
  const auto kept = static_cast<std::int64_t>(std::round((1.0 - mask_ratio) * static_cast<double>(n_tokens)));
  return std::max<std::int64_t>(1, kept);
}

TokenMask make_full_mask(std::int64_t grid_h, std::int64_t grid_w) {
  check_grid(grid_h, grid_w);
  TokenMask m{grid_h, grid_w, std::vector<std::int64_t>(static_cast<std::size_t>(grid_h * grid_w))};
  std::iota(m.kept.begin(), m.kept.end(), 0);
  return m;
}

TokenMask make_random_mask(std::int64_t grid_h, std::int64_t grid_w, double mask_ratio,
                           std::uint64_t seed, std::uint64_t sample_index) {
  check_grid(grid_h, grid_w);
  const std::int64_t n = grid_h * grid_w;
  const std::int64_t k = keep_count(n, mask_ratio);
  if (k == n) return make_full_mask(grid_h, grid_w);

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  CounterRng rng(seed, random_stream(sample_index));
  for (std::int64_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(order[i], order[j]);
  }
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return TokenMask{grid_h, grid_w, std::move(order)};
}

TokenMask make_grid_mask(std::int64_t grid_h, std::int64_t grid_w, double mask_ratio) {
  check_grid(grid_h, grid_w);
  // Offsets kept inside each 2x2 window, as (row, col).
  std::vector<std::pair<int, int>> window;
  if (near(mask_ratio, 0.25)) {
    window = {{0, 0}, {0, 1}, {1, 0}};
  } else if (near(mask_ratio, 0.5)) {
    window = {{0, 0}, {1, 1}};
  } else if (near(mask_ratio, 0.75)) {
    window = {{0, 0}};
  } else {
    throw UnsupportedPatternError("grid mask supports ratios 0.25, 0.5, 0.75; got " + std::to_string(mask_ratio));
  }
  if (grid_h % 2 != 0 || grid_w % 2 != 0) {
    throw UnsupportedPatternError("grid mask needs even extents, got " + std::to_string(grid_h) + "x" +
                                  std::to_string(grid_w));
  }
  TokenMask m{grid_h, grid_w, {}};
  for (std::int64_t r = 0; r < grid_h; ++r)
    for (std::int64_t c = 0; c < grid_w; ++c)
      for (auto [wr, wc] : window)
        if (r % 2 == wr && c % 2 == wc) m.kept.push_back(r * grid_w + c);
  return m;
}

TokenMask make_block_mask(std::int64_t grid_h, std::int64_t grid_w, double mask_ratio,
                          std::uint64_t seed, std::uint64_t sample_index) {
  check_grid(grid_h, grid_w);
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) {
    throw MaskError("block mask ratio must lie in (0, 1), got " + std::to_string(mask_ratio));
  }
  const std::int64_t n = grid_h * grid_w;
  const std::int64_t target = n - keep_count(n, mask_ratio);
  if (target == 0) return make_full_mask(grid_h, grid_w);

  std::int64_t best_area = -1;
  for (std::int64_t h = 1; h <= grid_h; ++h)
    for (std::int64_t w = 1; w <= grid_w; ++w) {
      const std::int64_t area = h * w;
      if (best_area < 0) {
        best_area = area;
        continue;
      }
      const auto d = std::llabs(area - target), best_d = std::llabs(best_area - target);
      if (d < best_d || (d == best_d && area < best_area)) best_area = area;
    }
  if (best_area != target) {
    throw InfeasibleMaskError("no rectangle on a " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                              " grid removes exactly " + std::to_string(target) + " tokens (nearest area " +
                              std::to_string(best_area) + ")");
  }

  std::vector<std::pair<std::int64_t, std::int64_t>> shapes;
  std::int64_t best_skew = -1;
  for (std::int64_t h = 1; h <= grid_h; ++h) {
    if (target % h != 0) continue;
    const std::int64_t w = target / h;
    if (w > grid_w) continue;
    const auto skew = std::llabs(h - w);
    if (best_skew < 0 || skew < best_skew) {
      shapes.clear();
      best_skew = skew;
    }
    if (skew == best_skew) shapes.emplace_back(h, w);
  }

  CounterRng rng(seed, block_stream(sample_index));
  const auto [bh, bw] = shapes[shapes.size() == 1 ? 0 : rng.below(shapes.size())];
  const auto top = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(grid_h - bh + 1)));
  const auto left = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(grid_w - bw + 1)));

  TokenMask m{grid_h, grid_w, {}};
  m.kept.reserve(static_cast<std::size_t>(n - target));
  for (std::int64_t r = 0; r < grid_h; ++r)
    for (std::int64_t c = 0; c < grid_w; ++c) {
      const bool removed = r >= top && r < top + bh && c >= left && c < left + bw;
      if (!removed) m.kept.push_back(r * grid_w + c);
    }
  return m;
}

TokenMask make_mask(const MaskSpec& spec, std::int64_t grid_h, std::int64_t grid_w,
                    std::uint64_t sample_index) {
  spec.validate();
  if (spec.ratio == 0.0) return make_full_mask(grid_h, grid_w);
  switch (spec.strategy) {
    case MaskStrategy::random: return make_random_mask(grid_h, grid_w, spec.ratio, spec.seed, sample_index);
    case MaskStrategy::block: return make_block_mask(grid_h, grid_w, spec.ratio, spec.seed, sample_index);
    case MaskStrategy::grid: return make_grid_mask(grid_h, grid_w, spec.ratio);
    case MaskStrategy::none: break;
  }
  return make_full_mask(grid_h, grid_w);
}

Tensor apply_mask(const Tensor& tokens, const TokenMask& mask) {
  if (tokens.rank() != 2 || tokens.dim(0) != mask.total()) {
    throw DimensionError("apply_mask: tokens " + shape_str(tokens.shape()) + " do not match a " +
                         std::to_string(mask.grid_h) + "x" + std::to_string(mask.grid_w) + " grid");
  }
  return gather_rows(tokens, mask.kept);
}

std::int64_t TruncatedText::real_length() const {
  return static_cast<std::int64_t>(std::count(attention.begin(), attention.end(), true));
}

TruncatedText truncate_text(const std::vector<std::int64_t>& token_ids, std::int64_t max_len,
                            std::int64_t pad_id) {
  if (max_len < 1) throw std::invalid_argument("truncate_text: max_len must be >= 1");
  TruncatedText out;
  out.ids.assign(static_cast<std::size_t>(max_len), pad_id);
  out.attention.assign(static_cast<std::size_t>(max_len), false);
  const auto n = std::min<std::int64_t>(max_len, static_cast<std::int64_t>(token_ids.size()));
  for (std::int64_t i = 0; i < n; ++i) {
    out.ids[i] = token_ids[i];
    out.attention[i] = true;
  }
  return out;
}

}  // namespace clipa
