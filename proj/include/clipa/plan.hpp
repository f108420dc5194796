#pragma once

// Multi-stage training plans: one StageConfig per "samples@resolution" term
// of a recipe, plus the model and optimizer settings shared by all stages.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clipa/masking.hpp"
#include "clipa/model.hpp"

namespace clipa {

enum class StageRole { pretrain, finetune };

struct StageConfig {
  std::string name;
  StageRole role = StageRole::finetune;
  std::int64_t image_side = 32;
  MaskSpec mask;
  std::int64_t text_len = 8;
  std::int64_t samples_seen = 0;
  std::int64_t batch_size = 64;
  double peak_lr = 1e-3;
  std::int64_t warmup_samples = 0;
  double lr_floor = 0.0;
  double weight_decay = 0.2;

  std::int64_t steps() const { return batch_size > 0 ? samples_seen / batch_size : 0; }
  std::int64_t warmup_steps() const { return batch_size > 0 ? warmup_samples / batch_size : 0; }
};

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables clipping
};

struct TrainPlan {
  ClipConfig model;
  std::vector<StageConfig> stages;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  // Throws ConfigError on hard violations; returns warnings (e.g. a finetune
  // stage at lower resolution than the one before it).
  std::vector<std::string> validate() const;
};

// Sample counts may be given as integers or as strings with a K/M/B suffix ("512M", "12.8B").
std::int64_t parse_count(const nlohmann::json& value);

nlohmann::json to_json(const StageConfig& s);
// Stages without an explicit role are "pretrain" at index 0 and "finetune"
// afterwards; masks without an explicit seed use default_seed.
StageConfig stage_from_json(const nlohmann::json& j, std::size_t index, std::uint64_t default_seed = 0);
nlohmann::json to_json(const OptimizerConfig& o);
OptimizerConfig optimizer_from_json(const nlohmann::json& j);

// Keys: "model" (preset name string or {"preset", "image", "text"} object),
// "stages", "optimizer", "seed". Unknown keys are rejected.
TrainPlan plan_from_json(const nlohmann::json& j, std::int64_t vocab_size = 0);
nlohmann::json to_json(const TrainPlan& plan);

std::string_view to_string(StageRole role);

}  // namespace clipa
