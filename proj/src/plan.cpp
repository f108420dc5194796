#include "clipa/plan.hpp"

#include <cmath>
#include <set>

namespace clipa {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
T get_as(const json& j, const std::string& key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace

std::string_view to_string(StageRole role) { return role == StageRole::pretrain ? "pretrain" : "finetune"; }

std::int64_t parse_count(const json& value) {
  if (value.is_number_integer()) return value.get<std::int64_t>();
  if (value.is_number()) {
    const double v = value.get<double>();
    if (v != std::floor(v)) throw ConfigError("sample count must be an integer");
    return static_cast<std::int64_t>(v);
  }
  if (!value.is_string()) throw ConfigError("sample count must be a number or a string like '512M'");
  std::string s = value.get<std::string>();
  double mult = 1.0;
  if (!s.empty()) {
    switch (s.back()) {
      case 'K': mult = 1e3; break;
      case 'M': mult = 1e6; break;
      case 'B': mult = 1e9; break;
      default: break;
    }
    if (mult != 1.0) s.pop_back();
  }
  std::size_t used = 0;
  double base = 0.0;
  try {
    base = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ConfigError("cannot parse sample count '" + value.get<std::string>() + "'");
  return static_cast<std::int64_t>(std::llround(base * mult));
}

json to_json(const StageConfig& s) {
  return {{"name", s.name},
          {"role", std::string(to_string(s.role))},
          {"image_side", s.image_side},
          {"mask", {{"strategy", std::string(to_string(s.mask.strategy))}, {"ratio", s.mask.ratio}, {"seed", s.mask.seed}}},
          {"text_len", s.text_len},
          {"samples_seen", s.samples_seen},
          {"batch_size", s.batch_size},
          {"peak_lr", s.peak_lr},
          {"warmup_samples", s.warmup_samples},
          {"lr_floor", s.lr_floor},
          {"weight_decay", s.weight_decay}};
}

StageConfig stage_from_json(const json& j, std::size_t index, std::uint64_t default_seed) {
  const std::string where = "stages[" + std::to_string(index) + "]";
  reject_unknown(j,
                 {"name", "role", "image_side", "mask", "text_len", "samples_seen", "batch_size", "peak_lr",
                  "warmup_samples", "lr_floor", "weight_decay"},
                 where);
  StageConfig s;
  s.name = j.value("name", "stage" + std::to_string(index));
  s.role = index == 0 ? StageRole::pretrain : StageRole::finetune;
  if (j.contains("role")) {
    const auto role = get_as<std::string>(j, "role", where);
    if (role == "pretrain") s.role = StageRole::pretrain;
    else if (role == "finetune") s.role = StageRole::finetune;
    else throw ConfigError(where + ".role must be 'pretrain' or 'finetune'");
  }
  if (j.contains("image_side")) s.image_side = get_as<std::int64_t>(j, "image_side", where);
  s.mask.seed = default_seed;
  if (j.contains("mask")) {
    const json& m = j.at("mask");
    reject_unknown(m, {"strategy", "ratio", "seed"}, where + ".mask");
    try {
      if (m.contains("strategy")) s.mask.strategy = parse_mask_strategy(m.at("strategy").get<std::string>());
    } catch (const MaskError& e) {
      throw ConfigError(where + ".mask: " + e.what());
    }
    if (m.contains("ratio")) s.mask.ratio = get_as<double>(m, "ratio", where + ".mask");
    if (m.contains("seed")) s.mask.seed = get_as<std::uint64_t>(m, "seed", where + ".mask");
    if (s.mask.ratio > 0.0 && s.mask.strategy == MaskStrategy::none && !m.contains("strategy")) {
      s.mask.strategy = MaskStrategy::random;
    }
  }
  if (j.contains("text_len")) s.text_len = get_as<std::int64_t>(j, "text_len", where);
  if (j.contains("samples_seen")) s.samples_seen = parse_count(j.at("samples_seen"));
  if (j.contains("batch_size")) s.batch_size = get_as<std::int64_t>(j, "batch_size", where);
  if (j.contains("peak_lr")) s.peak_lr = get_as<double>(j, "peak_lr", where);
  if (j.contains("warmup_samples")) s.warmup_samples = parse_count(j.at("warmup_samples"));
  if (j.contains("lr_floor")) s.lr_floor = get_as<double>(j, "lr_floor", where);
  if (j.contains("weight_decay")) s.weight_decay = get_as<double>(j, "weight_decay", where);
  return s;
}

json to_json(const OptimizerConfig& o) {
  return {{"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}, {"grad_clip", o.grad_clip}};
}

OptimizerConfig optimizer_from_json(const json& j) {
  reject_unknown(j, {"beta1", "beta2", "eps", "grad_clip"}, "optimizer");
  OptimizerConfig o;
  if (j.contains("beta1")) o.beta1 = get_as<double>(j, "beta1", "optimizer");
  if (j.contains("beta2")) o.beta2 = get_as<double>(j, "beta2", "optimizer");
  if (j.contains("eps")) o.eps = get_as<double>(j, "eps", "optimizer");
  if (j.contains("grad_clip")) o.grad_clip = get_as<double>(j, "grad_clip", "optimizer");
  if (!(o.beta1 >= 0 && o.beta1 < 1 && o.beta2 >= 0 && o.beta2 < 1 && o.eps > 0)) {
    throw ConfigError("optimizer betas must lie in [0,1) and eps must be positive");
  }
  return o;
}

namespace {

ClipConfig model_from_json(const json& j, std::int64_t vocab_size) {
  if (j.is_string()) return clip_preset(j.get<std::string>(), vocab_size);
  reject_unknown(j, {"preset", "image", "text"}, "model");
  if (!j.contains("preset")) return clip_config_from_json(j);
  ClipConfig base = clip_preset(j.at("preset").get<std::string>(), vocab_size);
  json image = to_json(base.image), text = to_json(base.text);
  for (const char* tower : {"image", "text"}) {
    if (j.contains(tower) && !j.at(tower).is_object()) {
      throw ConfigError(std::string("model.") + tower + " must be an object");
    }
  }
  if (j.contains("image")) image.update(j.at("image"));
  if (j.contains("text")) text.update(j.at("text"));
  return {model_config_from_json(image, Tower::image), model_config_from_json(text, Tower::text)};
}

}  // namespace

TrainPlan plan_from_json(const json& j, std::int64_t vocab_size) {
  reject_unknown(j, {"model", "stages", "optimizer", "seed"}, "plan");
  TrainPlan plan;
  if (j.contains("seed")) plan.seed = get_as<std::uint64_t>(j, "seed", "plan");
  if (!j.contains("model")) throw ConfigError("plan needs a 'model'");
  plan.model = model_from_json(j.at("model"), vocab_size);
  if (j.contains("optimizer")) plan.optimizer = optimizer_from_json(j.at("optimizer"));
  if (!j.contains("stages") || !j.at("stages").is_array()) throw ConfigError("plan needs a 'stages' array");
  for (std::size_t i = 0; i < j.at("stages").size(); ++i) {
    plan.stages.push_back(stage_from_json(j.at("stages")[i], i, plan.seed));
  }
  return plan;
}

json to_json(const TrainPlan& plan) {
  json stages = json::array();
  for (const auto& s : plan.stages) stages.push_back(to_json(s));
  return {{"model", to_json(plan.model)}, {"stages", stages}, {"optimizer", to_json(plan.optimizer)}, {"seed", plan.seed}};
}

std::vector<std::string> TrainPlan::validate() const {
  if (stages.empty()) throw ConfigError("plan has no stages");
  model.image.validate();
  model.text.validate();
  std::vector<std::string> warnings;
  std::int64_t last_finetune_side = 0;
  for (const auto& s : stages) {
    const std::string where = "stage '" + s.name + "'";
    if (s.batch_size < 1) throw ConfigError(where + ": batch_size must be >= 1");
    if (s.samples_seen < s.batch_size) throw ConfigError(where + ": samples_seen must be >= batch_size");
    if (s.image_side < model.image.patch_size || s.image_side % model.image.patch_size != 0) {
      throw ConfigError(where + ": image_side " + std::to_string(s.image_side) + " not divisible by patch size " +
                        std::to_string(model.image.patch_size));
    }
    if (s.text_len < 1 || s.text_len > model.text.context_length) {
      throw ConfigError(where + ": text_len must lie in [1, " + std::to_string(model.text.context_length) + "]");
    }
    try {
      s.mask.validate();
    } catch (const MaskError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    if (!(s.peak_lr >= 0.0) || !(s.lr_floor >= 0.0) || s.warmup_samples < 0 || !(s.weight_decay >= 0.0)) {
      throw ConfigError(where + ": learning-rate and decay settings must be non-negative");
    }
    if (s.role == StageRole::finetune) {
      if (s.image_side < last_finetune_side) {
        warnings.push_back(where + " lowers the finetune resolution from " + std::to_string(last_finetune_side) +
                           " to " + std::to_string(s.image_side));
      }
      last_finetune_side = s.image_side;
    }
  }
  return warnings;
}

}  // namespace clipa
