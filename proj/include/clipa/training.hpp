#pragma once

// Contrastive training: symmetric InfoNCE, AdamW, the warmup + cosine
// schedule, single-stage training, multi-stage plans and the masking-ratio
// sweep across model sizes.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clipa/cost.hpp"
#include "clipa/eval.hpp"
#include "clipa/model.hpp"
#include "clipa/plan.hpp"
#include "clipa/synth.hpp"

namespace clipa {

class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// logits = scale · img · txtᵀ; loss = ½ (mean row CE + mean column CE) with
// the diagonal as targets. Rows must be unit-norm within 1e-3.
Tensor infonce_loss(const Tensor& image_embs, const Tensor& text_embs, const Tensor& logit_scale);
Tensor infonce_loss(const Tensor& image_embs, const Tensor& text_embs, double logit_scale);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One update per parameter, with t = state.step + 1:
//   x ← x − lr·wd·x                      (decoupled decay, where decay[i] != 0)
//   m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²
//   x ← x − lr · (m / (1−β1ᵗ)) / (√(v / (1−β2ᵗ)) + eps)
// An empty decay span decays every parameter. Parameters without a gradient
// are treated as having a zero gradient. Throws NumericError naming the
// parameter when a gradient is not finite.
void adamw_step(std::span<const NamedTensor> params, AdamWState& state, const AdamWConfig& config,
                std::span<const std::uint8_t> decay = {});

// Rank >= 2 tensors (weights, embeddings) decay; gains, biases and the temperature do not.
std::vector<std::uint8_t> default_decay_mask(std::span<const NamedTensor> params);

// Scales all gradients so their global L2 norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(std::span<const NamedTensor> params, double max_norm);

// Linear warmup 0 → peak over warmup_steps, then cosine from peak to floor at total_steps.
double cosine_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double peak, double floor);

struct StepRecord {
  std::int64_t step = 0;  // global optimizer step, 1-based
  std::string stage;
  double loss = 0.0;
  double lr = 0.0;
  std::int64_t flops = 0;  // measured forward MACs of the step
  double wall_ms = 0.0;
};

// Field order: step, stage, loss, lr, flops, wall_ms.
std::string metrics_line(const StepRecord& record);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files are written
  bool save_stage_checkpoints = true;
  int threads = 1;                // workers used to render a batch
  std::int64_t progress_every = 0;  // stderr progress line period; 0 disables
  std::function<void(const StepRecord&)> on_step;
};

struct TrainState {
  ClipModel model;
  std::int64_t step = 0;
  std::uint64_t samples = 0;  // global sample counter, keys data and masks
  std::int64_t pos_resizes = 0;
};

struct StageReport {
  std::string name;
  std::int64_t steps = 0;
  std::int64_t samples = 0;
  std::int64_t image_side = 0;
  double mask_ratio = 0.0;
  std::string mask_strategy;
  double first_loss = 0.0;
  double final_loss = 0.0;  // mean over the last min(10, steps) steps
  double measured_flops_per_step = 0.0;
  double wall_seconds = 0.0;
  bool resized_pos = false;
  StageCost cost;
};

nlohmann::json to_json(const StageReport& report);

// Runs stage.steps() optimizer steps. Sample s of the stage is drawn from
// data.get(state.samples + s, stage.image_side) and masked with
// make_mask(stage.mask, g, g, state.samples + s). A fresh AdamW state is used
// for the stage. On a non-finite loss the pre-step parameters are written to
// <out_dir>/checkpoints/last_good.ckpt and NumericError is thrown.
StageReport train_stage(TrainState& state, const StageConfig& stage, const OptimizerConfig& optimizer,
                        const DataSource& data, const Vocab& vocab, const TrainOptions& options = {});

struct PlanResult {
  TrainState state;
  std::vector<StageReport> stages;
  CostReport cost;
};

// Initializes the model from plan.model (its positional grid built for the
// first stage's resolution) and runs the stages in order. With an out_dir it
// writes logs/metrics.jsonl, checkpoints/<stage>.ckpt, checkpoints/final.ckpt
// and reports/train.json.
PlanResult run_plan(const TrainPlan& plan, const DataSource& data, const Vocab& vocab, const TrainOptions& options = {});
// Continues from an existing model instead of initializing one.
PlanResult run_plan(const TrainPlan& plan, TrainState state, const DataSource& data, const Vocab& vocab,
                    const TrainOptions& options = {});

struct SweepConfig {
  std::vector<std::string> sizes;  // model preset names
  std::vector<double> ratios;      // must contain 0, the full-token baseline
  TrainPlan base;                  // pretrain stages, then finetune stages whose mask ratio is swept
  std::int64_t eval_count = 256;
  std::uint64_t eval_first_index = 1'000'000'000;
};

SweepConfig sweep_config_from_json(const nlohmann::json& j, std::int64_t vocab_size);

struct SweepCell {
  std::string size;
  double ratio = 0.0;
  double accuracy = 0.0;
  double drop = 0.0;  // baseline accuracy − accuracy, in accuracy points (0..1)
  double finetune_flops_per_step = 0.0;
};

struct SweepResult {
  std::vector<std::string> sizes;
  std::vector<double> ratios;
  std::vector<SweepCell> cells;  // sizes-major, one per (size, ratio)
};

// For each size: pretrain once, then finetune a copy per ratio (random
// masking) and evaluate zero-shot accuracy on held-out samples with all
// tokens. The ratio-0 run is the baseline, so its drop is exactly 0.
SweepResult inverse_scaling_sweep(const SweepConfig& config, const DataSource& data, const Vocab& vocab,
                                  const TrainOptions& options = {});
nlohmann::json to_json(const SweepResult& result);
std::string render_sweep(const SweepResult& result);

}  // namespace clipa
