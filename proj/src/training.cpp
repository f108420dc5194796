#include "clipa/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <thread>

#include <fmt/format.h>

#include "clipa/checkpoint.hpp"

namespace clipa {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double round_to_mode(double v) { return precision() == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v; }

void check_unit_rows(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " must be [B, e], got " + shape_str(t.shape()));
  const std::int64_t e = t.dim(1);
  for (std::int64_t i = 0; i < t.dim(0); ++i) {
    double s = 0.0;
    for (std::int64_t k = 0; k < e; ++k) {
      const double v = t.data()[static_cast<std::size_t>(i * e + k)];
      s += v * v;
    }
    const double norm = std::sqrt(s);
    // Non-finite rows flow through to a non-finite loss, which callers handle.
    if (std::isfinite(norm) && std::abs(norm - 1.0) > 1e-3) {
      throw ContractViolation(fmt::format("infonce_loss: {} row {} has norm {:.6g}, expected 1", what, i, norm));
    }
  }
}

// Renders examples [begin, end) of a batch, possibly across worker threads.
std::vector<Example> load_batch(const DataSource& data, std::uint64_t first, std::int64_t count, std::int64_t side,
                                int threads) {
  std::vector<Example> batch(static_cast<std::size_t>(count));
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(count)));
  if (workers == 1) {
    for (std::int64_t i = 0; i < count; ++i) batch[static_cast<std::size_t>(i)] = data.get(first + i, side);
    return batch;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::int64_t i = w; i < count; i += workers) batch[static_cast<std::size_t>(i)] = data.get(first + i, side);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return batch;
}

std::string checkpoint_name(const std::string& stage) {
  std::string out;
  for (char c : stage) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out + ".ckpt";
}

}  // namespace

Tensor infonce_loss(const Tensor& image_embs, const Tensor& text_embs, const Tensor& logit_scale) {
  check_unit_rows(image_embs, "image embeddings");
  check_unit_rows(text_embs, "text embeddings");
  if (image_embs.shape() != text_embs.shape()) {
    throw DimensionError("infonce_loss: shapes differ " + shape_str(image_embs.shape()) + " vs " +
                         shape_str(text_embs.shape()));
  }
  const std::int64_t b = image_embs.dim(0);
  if (b < 1) throw DimensionError("infonce_loss: empty batch");
  std::vector<std::int64_t> targets(static_cast<std::size_t>(b));
  for (std::int64_t i = 0; i < b; ++i) targets[static_cast<std::size_t>(i)] = i;
  const Tensor logits = scale_by(matmul(image_embs, transpose(text_embs, 0, 1)), logit_scale);
  const Tensor rows = mean(pick(log_softmax(logits, 1), targets));
  const Tensor cols = mean(pick(log_softmax(transpose(logits, 0, 1), 1), targets));
  return scale(add(rows, cols), -0.5);
}

Tensor infonce_loss(const Tensor& image_embs, const Tensor& text_embs, double logit_scale) {
  return infonce_loss(image_embs, text_embs, Tensor::scalar(logit_scale));
}

std::vector<std::uint8_t> default_decay_mask(std::span<const NamedTensor> params) {
  std::vector<std::uint8_t> mask;
  for (const auto& [_, t] : params) mask.push_back(t.rank() >= 2 ? 1 : 0);
  return mask;
}

void adamw_step(std::span<const NamedTensor> params, AdamWState& state, const AdamWConfig& cfg,
                std::span<const std::uint8_t> decay) {
  if (!decay.empty() && decay.size() != params.size()) throw DimensionError("adamw_step: decay mask size mismatch");
  if (state.m.empty()) {
    for (const auto& [_, t] : params) {
      state.m.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
      state.v.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adamw_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (static_cast<std::int64_t>(state.m[i].size()) != params[i].second.numel()) {
      throw DimensionError("adamw_step: state shape mismatch for '" + params[i].first + "'");
    }
    for (double g : params[i].second.grad()) {
      if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient in '" + params[i].first + "'");
    }
  }
  const std::int64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto x = p.mutable_data();
    const auto g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double wd = (decay.empty() || decay[i]) ? cfg.weight_decay : 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      double xk = x[k] - cfg.lr * wd * x[k];
      m[k] = round_to_mode(cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk);
      v[k] = round_to_mode(cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk);
      xk -= cfg.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps);
      x[k] = round_to_mode(xk);
    }
  }
}

double clip_grad_norm(std::span<const NamedTensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, t] : params)
    for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-6);
    for (const auto& [_, t] : params) {
      Tensor h = t;
      if (!h.has_grad()) continue;
      for (double& g : h.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double peak, double floor) {
  if (step < 0 || step > total_steps) throw std::out_of_range("cosine_lr: step outside [0, total_steps]");
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return peak;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return floor + (peak - floor) / 2.0 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string metrics_line(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["stage"] = r.stage;
  j["loss"] = r.loss;
  j["lr"] = r.lr;
  j["flops"] = r.flops;
  j["wall_ms"] = std::round(r.wall_ms * 1000.0) / 1000.0;
  return j.dump();
}

nlohmann::json to_json(const StageReport& r) {
  return {{"name", r.name},
          {"steps", r.steps},
          {"samples", r.samples},
          {"image_side", r.image_side},
          {"mask_ratio", r.mask_ratio},
          {"mask_strategy", r.mask_strategy},
          {"first_loss", r.first_loss},
          {"final_loss", r.final_loss},
          {"measured_flops_per_step", r.measured_flops_per_step},
          {"wall_seconds", r.wall_seconds},
          {"resized_pos", r.resized_pos},
          {"cost",
           {{"image_tokens", r.cost.image_tokens},
            {"text_tokens", r.cost.text_tokens},
            {"flops_per_sample", r.cost.flops_per_sample},
            {"samples", r.cost.samples},
            {"flops", r.cost.flops}}}};
}

StageReport train_stage(TrainState& state, const StageConfig& stage, const OptimizerConfig& optimizer,
                        const DataSource& data, const Vocab& vocab, const TrainOptions& options) {
  ClipModel& model = state.model;
  const std::int64_t patch = model.image.config.patch_size;
  if (stage.image_side % patch != 0) {
    throw ResolutionError("stage '" + stage.name + "': image side " + std::to_string(stage.image_side) +
                          " not divisible by patch " + std::to_string(patch));
  }
  if (stage.samples_seen < stage.batch_size) throw ConfigError("stage '" + stage.name + "': samples_seen < batch_size");
  stage.mask.validate();

  StageReport report;
  report.name = stage.name;
  report.image_side = stage.image_side;
  report.mask_ratio = stage.mask.ratio;
  report.mask_strategy = std::string(to_string(stage.mask.strategy));
  report.resized_pos = model.image.set_resolution(stage.image_side);
  if (report.resized_pos) ++state.pos_resizes;
  {
    TrainPlan single{model.config(), {stage}, optimizer, 0};
    report.cost = plan_compute(single).stages.front();
  }

  std::ofstream log;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir / "logs");
    std::filesystem::create_directories(options.out_dir / "checkpoints");
    log.open(options.out_dir / "logs" / "metrics.jsonl", std::ios::app);
    if (!log) throw std::runtime_error("cannot open metrics log under " + options.out_dir.string());
  }

  const auto params = model.parameters();
  const auto decay = default_decay_mask(params);
  AdamWState opt;
  const std::int64_t steps = stage.steps();
  const std::int64_t warmup = stage.warmup_steps();
  const std::int64_t g = model.image.grid;
  const auto stage_start = Clock::now();
  std::vector<double> losses;
  double flops_sum = 0.0;

  for (std::int64_t s = 0; s < steps; ++s) {
    const auto t0 = Clock::now();
    const std::uint64_t first = state.samples;
    const auto batch = load_batch(data, first, stage.batch_size, stage.image_side, options.threads);

    std::vector<Tensor> images;
    std::vector<TokenMask> masks;
    std::vector<TruncatedText> texts;
    for (std::int64_t b = 0; b < stage.batch_size; ++b) {
      const auto& ex = batch[static_cast<std::size_t>(b)];
      images.push_back(ex.image);
      masks.push_back(make_mask(stage.mask, g, g, first + static_cast<std::uint64_t>(b)));
      texts.push_back(truncate_text(word_tokenizer(ex.caption, vocab), stage.text_len, vocab.pad_id()));
    }

    // The schedule is sampled at s + 1 so the first update already moves the weights.
    const double lr = cosine_lr(s + 1, steps, warmup, stage.peak_lr, stage.lr_floor);
    model.zero_grad();
    reset_mac_counter();
    const Tensor img = encode_images(model.image, patchify_batch(images, patch), masks);
    const Tensor txt = encode_texts(model.text, texts);
    const Tensor loss = infonce_loss(img, txt, exp(model.log_logit_scale));
    const std::int64_t flops = mac_counter();
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      if (!options.out_dir.empty()) save_checkpoint(options.out_dir / "checkpoints" / "last_good.ckpt", model);
      throw NumericError(fmt::format("non-finite loss at step {} of stage '{}'", state.step + 1, stage.name));
    }
    loss.backward();
    clip_grad_norm(params, optimizer.grad_clip);
    adamw_step(params, opt, {lr, optimizer.beta1, optimizer.beta2, optimizer.eps, stage.weight_decay}, decay);
    model.clamp_logit_scale();

    ++state.step;
    state.samples += static_cast<std::uint64_t>(stage.batch_size);
    losses.push_back(loss_value);
    flops_sum += static_cast<double>(flops);
    StepRecord rec{state.step, stage.name, loss_value, lr, flops, ms_since(t0)};
    if (log.is_open()) log << metrics_line(rec) << '\n';
    if (options.on_step) options.on_step(rec);
    if (options.progress_every > 0 && ((s + 1) % options.progress_every == 0 || s + 1 == steps)) {
      std::cerr << fmt::format("[{}] step {}/{} loss {:.4f} lr {:.3g} scale {:.2f}\n", stage.name, s + 1, steps,
                               loss_value, lr, model.logit_scale());
    }
  }

  report.steps = steps;
  report.samples = steps * stage.batch_size;
  report.wall_seconds = ms_since(stage_start) / 1000.0;
  if (!losses.empty()) {
    report.first_loss = losses.front();
    const std::size_t tail = std::min<std::size_t>(10, losses.size());
    double sum = 0.0;
    for (std::size_t i = losses.size() - tail; i < losses.size(); ++i) sum += losses[i];
    report.final_loss = sum / static_cast<double>(tail);
    report.measured_flops_per_step = flops_sum / static_cast<double>(losses.size());
  }
  if (!options.out_dir.empty() && options.save_stage_checkpoints) {
    save_checkpoint(options.out_dir / "checkpoints" / checkpoint_name(stage.name), model);
  }
  return report;
}

PlanResult run_plan(const TrainPlan& plan, const DataSource& data, const Vocab& vocab, const TrainOptions& options) {
  if (plan.stages.empty()) throw ConfigError("plan has no stages");
  ClipConfig cfg = plan.model;
  cfg.image.image_side = plan.stages.front().image_side;
  return run_plan(plan, TrainState{ClipModel::init(cfg, plan.seed)}, data, vocab, options);
}

PlanResult run_plan(const TrainPlan& plan, TrainState state, const DataSource& data, const Vocab& vocab,
                    const TrainOptions& options) {
  for (const auto& w : plan.validate()) std::cerr << "warning: " << w << '\n';
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir / "logs");
    std::ofstream(options.out_dir / "logs" / "metrics.jsonl", std::ios::trunc);
  }
  PlanResult result{std::move(state), {}, plan_compute(plan)};
  for (const auto& stage : plan.stages) {
    result.stages.push_back(train_stage(result.state, stage, plan.optimizer, data, vocab, options));
  }
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "checkpoints" / "final.ckpt", result.state.model);
    std::filesystem::create_directories(options.out_dir / "reports");
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : result.stages) stages.push_back(to_json(s));
    nlohmann::json report = {{"plan", to_json(plan)},
                             {"data", data.describe()},
                             {"stages", stages},
                             {"cost", to_json(result.cost)},
                             {"steps", result.state.step},
                             {"samples", result.state.samples},
                             {"pos_resizes", result.state.pos_resizes},
                             {"model_digest", fmt::format("{:016x}", result.state.model.digest())}};
    std::ofstream(options.out_dir / "reports" / "train.json") << report.dump(2) << '\n';
  }
  return result;
}

SweepConfig sweep_config_from_json(const nlohmann::json& j, std::int64_t vocab_size) {
  if (!j.is_object()) throw ConfigError("sweep config must be an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "sizes" && key != "ratios" && key != "plan" && key != "eval_count" && key != "eval_first_index") {
      throw ConfigError("unknown key '" + key + "' in sweep config");
    }
  }
  SweepConfig c;
  try {
    c.sizes = j.at("sizes").get<std::vector<std::string>>();
    c.ratios = j.at("ratios").get<std::vector<double>>();
    if (j.contains("eval_count")) c.eval_count = j.at("eval_count").get<std::int64_t>();
    if (j.contains("eval_first_index")) c.eval_first_index = j.at("eval_first_index").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sweep config: ") + e.what());
  }
  if (!j.contains("plan")) throw ConfigError("sweep config needs a 'plan'");
  nlohmann::json plan = j.at("plan");
  if (!plan.contains("model") && !c.sizes.empty()) plan["model"] = c.sizes.front();
  c.base = plan_from_json(plan, vocab_size);
  return c;
}

SweepResult inverse_scaling_sweep(const SweepConfig& config, const DataSource& data, const Vocab& vocab,
                                  const TrainOptions& options) {
  if (config.sizes.empty()) throw ConfigError("sweep needs at least one model size");
  if (std::find(config.ratios.begin(), config.ratios.end(), 0.0) == config.ratios.end()) {
    throw ConfigError("sweep needs a ratio-0 baseline");
  }
  TrainPlan pretrain = config.base, finetune = config.base;
  pretrain.stages.clear();
  finetune.stages.clear();
  for (const auto& s : config.base.stages) (s.role == StageRole::pretrain ? pretrain : finetune).stages.push_back(s);
  if (finetune.stages.empty()) throw ConfigError("sweep plan needs at least one finetune stage");
  const std::int64_t eval_side = finetune.stages.back().image_side;

  std::vector<Example> eval_set;
  for (std::int64_t i = 0; i < config.eval_count; ++i) {
    eval_set.push_back(data.get(config.eval_first_index + static_cast<std::uint64_t>(i), eval_side));
  }
  EvalOptions eval_opts;
  eval_opts.mode = EvalMode::classify;
  eval_opts.text_len = finetune.stages.back().text_len;

  TrainOptions quiet = options;
  quiet.out_dir.clear();

  SweepResult result{config.sizes, config.ratios, {}};
  for (const auto& size : config.sizes) {
    ClipConfig model_cfg = clip_preset(size, config.base.model.text.vocab_size, config.base.model.text.context_length);
    model_cfg.image.image_side = config.base.stages.front().image_side;
    TrainState base{ClipModel::init(model_cfg, config.base.seed)};
    if (!pretrain.stages.empty()) {
      pretrain.model = model_cfg;
      base = std::move(run_plan(pretrain, std::move(base), data, vocab, quiet).state);
    }
    auto finetune_at = [&](double ratio) {
      TrainPlan ft = finetune;
      ft.model = model_cfg;
      for (auto& s : ft.stages) {
        s.mask.ratio = ratio;
        s.mask.strategy = ratio > 0.0 ? MaskStrategy::random : MaskStrategy::none;
      }
      TrainState copy{clone_model(base.model), base.step, base.samples, base.pos_resizes};
      PlanResult r = run_plan(ft, std::move(copy), data, vocab, quiet);
      double flops = 0.0;
      for (const auto& s : r.stages) flops += s.measured_flops_per_step;
      flops /= static_cast<double>(r.stages.size());
      const EvalReport ev = evaluate(r.state.model, eval_set, vocab, eval_opts);
      return std::pair{*ev.top1, flops};
    };
    const auto [baseline, baseline_flops] = finetune_at(0.0);
    for (double ratio : config.ratios) {
      SweepCell cell{size, ratio, baseline, 0.0, baseline_flops};
      if (ratio != 0.0) {
        const auto [acc, flops] = finetune_at(ratio);
        cell.accuracy = acc;
        cell.drop = baseline - acc;
        cell.finetune_flops_per_step = flops;
      }
      if (options.progress_every > 0) {
        std::cerr << fmt::format("sweep {} r={:.2f}: top-1 {:.3f} drop {:+.3f}\n", size, ratio, cell.accuracy, cell.drop);
      }
      result.cells.push_back(cell);
    }
  }
  return result;
}

nlohmann::json to_json(const SweepResult& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"size", c.size},
                     {"ratio", c.ratio},
                     {"accuracy", c.accuracy},
                     {"drop", c.drop},
                     {"finetune_flops_per_step", c.finetune_flops_per_step}});
  }
  return {{"sizes", r.sizes}, {"ratios", r.ratios}, {"cells", cells}};
}

std::string render_sweep(const SweepResult& r) {
  std::string out = fmt::format("{:<12}", "drop (pts)");
  for (double ratio : r.ratios) out += fmt::format(" {:>9}", fmt::format("keep {:.0f}%", (1.0 - ratio) * 100.0));
  out += '\n';
  for (const auto& size : r.sizes) {
    out += fmt::format("{:<12}", size);
    for (double ratio : r.ratios) {
      auto it = std::find_if(r.cells.begin(), r.cells.end(),
                             [&](const SweepCell& c) { return c.size == size && c.ratio == ratio; });
      out += it == r.cells.end() ? fmt::format(" {:>9}", "-") : fmt::format(" {:>9.1f}", it->drop * 100.0);
    }
    out += '\n';
  }
  return out;
}

}  // namespace clipa
