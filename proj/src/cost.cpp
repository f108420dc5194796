#include "clipa/cost.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace clipa {

std::int64_t encoder_flops(const ModelConfig& c, std::int64_t n, FlopTerms terms) {
  if (n < 1) throw ConfigError("encoder_flops needs at least one token");
  const std::int64_t d = c.width;
  std::int64_t flops = c.layers * ((4 + 2 * c.mlp_ratio) * n * d * d + 2 * n * n * d);
  if (terms.embedding && c.tower == Tower::image) {
    const std::int64_t patches = n - (c.use_class_token ? 1 : 0);
    flops += patches * c.patch_dim() * d;
  }
  if (terms.projection) flops += d * c.embed_dim;
  return flops;
}

std::int64_t image_sequence_length(const ModelConfig& image, std::int64_t image_side, double mask_ratio) {
  const std::int64_t n = tokens_for_resolution(image_side, image.patch_size);
  return keep_count(n, mask_ratio) + (image.use_class_token ? 1 : 0);
}

std::int64_t training_flops_per_sample(const ModelConfig& image, const ModelConfig& text, std::int64_t image_side,
                                       double mask_ratio, std::int64_t text_len, int backward_multiplier,
                                       FlopTerms terms) {
  if (backward_multiplier < 1) throw ConfigError("backward multiplier must be >= 1");
  const std::int64_t fwd = encoder_flops(image, image_sequence_length(image, image_side, mask_ratio), terms) +
                           encoder_flops(text, text_len, terms);
  return fwd * backward_multiplier;
}

CostReport plan_compute(const TrainPlan& plan, int backward_multiplier, FlopTerms terms) {
  CostReport r;
  for (const auto& s : plan.stages) {
    StageCost c;
    c.name = s.name;
    c.role = s.role;
    c.image_side = s.image_side;
    c.mask_ratio = s.mask.ratio;
    c.image_tokens = image_sequence_length(plan.model.image, s.image_side, s.mask.ratio);
    c.text_tokens = s.text_len;
    c.flops_per_sample = training_flops_per_sample(plan.model.image, plan.model.text, s.image_side, s.mask.ratio,
                                                   s.text_len, backward_multiplier, terms);
    c.samples = s.samples_seen;
    c.flops = static_cast<double>(c.samples) * static_cast<double>(c.flops_per_sample);
    r.total_flops += c.flops;
    if (s.role == StageRole::pretrain) {
      r.pretrain_flops += c.flops;
    } else {
      r.finetune_flops += c.flops;
      r.finetune_samples += c.samples;
    }
    r.stages.push_back(std::move(c));
  }
  if (r.finetune_samples > 0) r.blended_finetune_flops_per_sample = r.finetune_flops / static_cast<double>(r.finetune_samples);
  return r;
}

nlohmann::json to_json(const CostReport& r) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : r.stages) {
    stages.push_back({{"name", s.name},
                      {"role", std::string(to_string(s.role))},
                      {"image_side", s.image_side},
                      {"mask_ratio", s.mask_ratio},
                      {"image_tokens", s.image_tokens},
                      {"text_tokens", s.text_tokens},
                      {"flops_per_sample", s.flops_per_sample},
                      {"samples", s.samples},
                      {"flops", s.flops}});
  }
  nlohmann::json j = {{"stages", stages},
                      {"total_flops", r.total_flops},
                      {"pretrain_flops", r.pretrain_flops},
                      {"finetune_flops", r.finetune_flops},
                      {"finetune_samples", r.finetune_samples},
                      {"blended_finetune_flops_per_sample", r.blended_finetune_flops_per_sample}};
  if (r.gpu_hours) j["gpu_hours"] = *r.gpu_hours;
  if (r.dollars) j["dollars"] = *r.dollars;
  return j;
}

std::string render_cost_table(const CostReport& r) {
  std::string out = fmt::format("{:<14} {:<9} {:>6} {:>6} {:>7} {:>6} {:>14} {:>14} {:>12}\n", "stage", "role", "side",
                                "mask", "img_tok", "txt", "GFLOPs/sample", "samples", "total");
  for (const auto& s : r.stages) {
    out += fmt::format("{:<14} {:<9} {:>6} {:>5.0f}% {:>7} {:>6} {:>14.2f} {:>14} {:>12.4g}\n", s.name,
                       to_string(s.role), s.image_side, s.mask_ratio * 100.0, s.image_tokens, s.text_tokens,
                       static_cast<double>(s.flops_per_sample) / 1e9, format_thousands(s.samples), s.flops);
  }
  out += fmt::format("total compute {:.4g} FLOPs (pretrain {:.4g}, finetune {:.4g})\n", r.total_flops,
                     r.pretrain_flops, r.finetune_flops);
  if (r.finetune_samples > 0) {
    out += fmt::format("blended finetune {:.1f} GFLOPs/sample over {} samples\n",
                       r.blended_finetune_flops_per_sample / 1e9, format_thousands(r.finetune_samples));
  }
  if (r.gpu_hours) out += fmt::format("GPU hours {}\n", format_thousands(std::llround(*r.gpu_hours)));
  if (r.dollars) out += fmt::format("est. cost {}\n", format_currency(DollarCost{*r.dollars}.rounded()));
  return out;
}

void RateCard::validate() const {
  if (!(price_per_hour > 0.0) || !std::isfinite(price_per_hour)) {
    throw ConfigError("rate card price must be positive, got " + std::to_string(price_per_hour));
  }
}

RateCard rate_card_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("rate card must be an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "price_per_hour" && key != "source") throw ConfigError("unknown key '" + key + "' in rate card");
  }
  RateCard r;
  r.price_per_hour = j.at("price_per_hour").get<double>();
  r.source = j.value("source", "");
  r.validate();
  return r;
}

std::int64_t DollarCost::rounded() const {
  // A tiny relative slack keeps binary-representation error from moving an
  // exact .5 below the rounding boundary.
  const double slack = std::abs(exact) * 1e-12;
  return static_cast<std::int64_t>(std::floor(exact + 0.5 + slack));
}

DollarCost dollar_cost(double gpu_hours, const RateCard& rate) {
  if (!(gpu_hours >= 0.0)) throw std::invalid_argument("GPU hours must be non-negative");
  rate.validate();
  return {gpu_hours * rate.price_per_hour};
}

std::string format_thousands(std::int64_t amount) {
  std::string digits = std::to_string(amount < 0 ? -amount : amount);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return amount < 0 ? "-" + out : out;
}

std::string format_currency(std::int64_t amount) {
  return amount < 0 ? "-$" + format_thousands(-amount) : "$" + format_thousands(amount);
}

std::string format_ratio(double ratio) {
  if (ratio >= 10.0) return fmt::format("≈{}×", std::llround(ratio));
  return fmt::format("≈{:.1f}×", ratio);
}

ComparisonReport comparison_report(std::vector<ComparisonRow> rows, int reference) {
  if (rows.empty()) throw std::invalid_argument("comparison needs at least one row");
  const std::size_t ref = reference < 0 ? rows.size() - 1 : static_cast<std::size_t>(reference);
  if (ref >= rows.size()) throw std::invalid_argument("reference row out of range");
  ComparisonReport report;
  for (const auto& row : rows) {
    if (!(row.gpu_hours >= 0.0)) throw std::invalid_argument("row '" + row.label + "' has negative GPU hours");
    report.display_costs.push_back(row.dollars ? DollarCost{*row.dollars}.rounded()
                                               : dollar_cost(row.gpu_hours, row.rate).rounded());
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i == ref) continue;
    CostRatio r{rows[i].label, rows[ref].label, 0.0, ""};
    r.value = rows[ref].gpu_hours > 0.0 ? rows[i].gpu_hours / rows[ref].gpu_hours
                                        : (rows[i].gpu_hours == 0.0 ? 1.0 : INFINITY);
    r.rendered = format_ratio(r.value);
    report.ratios.push_back(std::move(r));
  }
  report.rows = std::move(rows);
  return report;
}

std::vector<ComparisonRow> comparison_rows_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("comparison rows must be an array");
  std::vector<ComparisonRow> rows;
  for (const auto& item : j) {
    for (const auto& [key, _] : item.items()) {
      if (key != "label" && key != "gpu_hours" && key != "rate" && key != "dollars" && key != "metrics") {
        throw ConfigError("unknown key '" + key + "' in comparison row");
      }
    }
    ComparisonRow row;
    row.label = item.at("label").get<std::string>();
    row.gpu_hours = item.at("gpu_hours").get<double>();
    row.rate = rate_card_from_json(item.at("rate"));
    if (item.contains("dollars")) row.dollars = item.at("dollars").get<double>();
    if (item.contains("metrics")) {
      for (const auto& [name, value] : item.at("metrics").items()) row.metrics.emplace_back(name, value.get<double>());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json to_json(const ComparisonReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& row = report.rows[i];
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [name, value] : row.metrics) metrics[name] = value;
    rows.push_back({{"label", row.label},
                    {"gpu_hours", row.gpu_hours},
                    {"price_per_hour", row.rate.price_per_hour},
                    {"cost", report.display_costs[i]},
                    {"cost_display", format_currency(report.display_costs[i])},
                    {"metrics", metrics}});
  }
  nlohmann::json ratios = nlohmann::json::array();
  for (const auto& r : report.ratios) {
    ratios.push_back({{"numerator", r.numerator}, {"denominator", r.denominator}, {"value", r.value},
                      {"rendered", r.rendered}});
  }
  return {{"rows", rows}, {"ratios", ratios}};
}

std::string render_comparison(const ComparisonReport& report) {
  std::vector<std::string> metric_names;
  for (const auto& row : report.rows) {
    for (const auto& [name, _] : row.metrics) {
      if (std::find(metric_names.begin(), metric_names.end(), name) == metric_names.end()) metric_names.push_back(name);
    }
  }
  std::size_t width = 5;
  for (const auto& row : report.rows) width = std::max(width, row.label.size());
  std::string out = fmt::format("{:<{}} {:>12} {:>12}", "model", width, "GPU hours", "est. cost");
  for (const auto& m : metric_names) out += fmt::format(" {:>8}", m);
  out += '\n';
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& row = report.rows[i];
    out += fmt::format("{:<{}} {:>12} {:>12}", row.label, width, format_thousands(std::llround(row.gpu_hours)),
                       format_currency(report.display_costs[i]));
    for (const auto& m : metric_names) {
      auto it = std::find_if(row.metrics.begin(), row.metrics.end(), [&](const auto& p) { return p.first == m; });
      out += it == row.metrics.end() ? fmt::format(" {:>8}", "-") : fmt::format(" {:>8.1f}", it->second);
    }
    out += '\n';
  }
  for (const auto& r : report.ratios) {
    out += fmt::format("{} vs {}: {:.2f} ({})\n", r.numerator, r.denominator, r.value, r.rendered);
  }
  return out;
}

}  // namespace clipa
