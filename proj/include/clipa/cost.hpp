#pragma once

// Analytical compute model: per-sample encoder FLOPs, plan totals, GPU-hour
// pricing and cross-run cost comparisons.
//
// Convention: one multiply-accumulate counts as one FLOP and only matmuls are
// counted. For a tower with L layers, width d, MLP ratio m and sequence n:
//
//   per layer   (4 + 2m)·n·d²  q/k/v/out projections and the two MLP matmuls
//             + 2·n²·d         attention scores and the weighted sum of values
//   embedding   patches·P²·3·d for images (text lookup is a gather: 0)
//   projection  d·e            pooled token into the joint space
//
// With m = 4 the per-layer term is the familiar 12·n·d² + 2·n²·d.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clipa/model.hpp"
#include "clipa/plan.hpp"

namespace clipa {

struct FlopTerms {
  bool embedding = true;
  bool projection = true;
};

// n_tokens is the full sequence length, including the class token if the
// tower uses one.
std::int64_t encoder_flops(const ModelConfig& config, std::int64_t n_tokens, FlopTerms terms = {});

// Image sequence = keep_count(grid², mask_ratio) (+1 class token); text sequence = text_len.
// backward_multiplier 1 reports forward compute; 3 approximates forward + backward.
std::int64_t training_flops_per_sample(const ModelConfig& image, const ModelConfig& text, std::int64_t image_side,
                                       double mask_ratio, std::int64_t text_len, int backward_multiplier = 1,
                                       FlopTerms terms = {});

std::int64_t image_sequence_length(const ModelConfig& image, std::int64_t image_side, double mask_ratio);

struct StageCost {
  std::string name;
  StageRole role = StageRole::pretrain;
  std::int64_t image_side = 0;
  double mask_ratio = 0.0;
  std::int64_t image_tokens = 0;  // sequence length fed to the image tower
  std::int64_t text_tokens = 0;
  std::int64_t flops_per_sample = 0;
  std::int64_t samples = 0;
  double flops = 0.0;
};

struct CostReport {
  std::vector<StageCost> stages;
  double total_flops = 0.0;
  double pretrain_flops = 0.0;
  double finetune_flops = 0.0;
  std::int64_t finetune_samples = 0;
  // Finetune FLOPs / finetune samples; 0 when there is no finetune stage.
  double blended_finetune_flops_per_sample = 0.0;
  std::optional<double> gpu_hours;
  std::optional<double> dollars;
};

CostReport plan_compute(const TrainPlan& plan, int backward_multiplier = 1, FlopTerms terms = {});
nlohmann::json to_json(const CostReport& report);
std::string render_cost_table(const CostReport& report);

struct RateCard {
  double price_per_hour = 0.0;
  std::string source;
  void validate() const;  // price must be positive and finite
};

RateCard rate_card_from_json(const nlohmann::json& j);

struct DollarCost {
  double exact = 0.0;
  // Whole currency units, half rounded up.
  std::int64_t rounded() const;
};

DollarCost dollar_cost(double gpu_hours, const RateCard& rate);

// "$9,324"
std::string format_currency(std::int64_t amount);
// "5,920"
std::string format_thousands(std::int64_t amount);
// "≈39×" for ratios >= 10, "≈1.5×" below.
std::string format_ratio(double ratio);

struct ComparisonRow {
  std::string label;
  double gpu_hours = 0.0;
  RateCard rate;
  // Printed cost when it is given data rather than hours × rate.
  std::optional<double> dollars;
  std::vector<std::pair<std::string, double>> metrics;
};

struct CostRatio {
  std::string numerator;
  std::string denominator;
  double value = 0.0;
  std::string rendered;
};

struct ComparisonReport {
  std::vector<ComparisonRow> rows;
  std::vector<std::int64_t> display_costs;
  std::vector<CostRatio> ratios;  // every other row against the reference row
};

// reference < 0 selects the last row.
ComparisonReport comparison_report(std::vector<ComparisonRow> rows, int reference = -1);
std::vector<ComparisonRow> comparison_rows_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ComparisonReport& report);
std::string render_comparison(const ComparisonReport& report);

}  // namespace clipa
