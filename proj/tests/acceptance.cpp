// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes. Criteria 9 and 10 train the bundled toy recipe
// twice, which takes several minutes on one core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "clipa/checkpoint.hpp"
#include "clipa/cost.hpp"
#include "clipa/eval.hpp"
#include "clipa/runtime.hpp"
#include "clipa/training.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace clipa;
using namespace clipa::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += "failed: " + what;
    }
  }
  void note(const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& run) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = run();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::cout << fmt::format("[{}] criterion {:>2}: {} ({:.1f}s) {}\n", o.pass ? "PASS" : "FAIL", id, name, secs, o.detail)
            << std::flush;
}

bool within(double value, double target, double rel) { return std::abs(value / target - 1.0) <= rel; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string log_without_wall_clock(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line, out;
  while (std::getline(in, line)) {
    auto j = nlohmann::ordered_json::parse(line);
    j.erase("wall_ms");
    out += j.dump() + "\n";
  }
  return out;
}

// Pinned kept offsets inside each 2x2 window, as (row, col).
std::vector<std::pair<int, int>> grid_window(double ratio) {
  if (ratio == 0.25) return {{0, 0}, {0, 1}, {1, 0}};
  if (ratio == 0.5) return {{0, 0}, {1, 1}};
  return {{0, 0}};
}

bool removed_is_rectangle(const TokenMask& m) {
  std::vector<bool> kept(static_cast<std::size_t>(m.total()), false);
  for (auto k : m.kept) kept[static_cast<std::size_t>(k)] = true;
  std::int64_t y0 = m.grid_h, y1 = -1, x0 = m.grid_w, x1 = -1, removed = 0;
  for (std::int64_t i = 0; i < m.total(); ++i) {
    if (kept[static_cast<std::size_t>(i)]) continue;
    ++removed;
    y0 = std::min(y0, i / m.grid_w);
    y1 = std::max(y1, i / m.grid_w);
    x0 = std::min(x0, i % m.grid_w);
    x1 = std::max(x1, i % m.grid_w);
  }
  return removed == 0 || removed == (y1 - y0 + 1) * (x1 - x0 + 1);
}

struct RecipeRun {
  fs::path dir;
  double top1 = 0.0;
  double train_top1 = 0.0;
  std::vector<StageReport> stages;
  std::int64_t steps = 0;
  double seconds = 0.0;
};

RecipeRun run_recipe(const fs::path& config, const fs::path& dir) {
  nlohmann::json j;
  {
    std::ifstream in(config);
    if (!in) throw std::runtime_error("cannot open " + config.string());
    j = nlohmann::json::parse(in);
  }
  const std::int64_t eval_count = j.at("eval").at("count").get<std::int64_t>();
  j.erase("eval");
  const Vocab vocab = Vocab::synthetic();
  const TrainPlan plan = plan_from_json(j, vocab.size());
  plan.validate();
  const SyntheticSource data(plan.seed);

  fs::remove_all(dir);
  TrainOptions opts;
  opts.out_dir = dir;
  const auto t0 = std::chrono::steady_clock::now();
  const PlanResult result = run_plan(plan, data, vocab, opts);
  RecipeRun run;
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  run.dir = dir;
  run.stages = result.stages;
  run.steps = result.state.step;

  const std::int64_t side = plan.stages.back().image_side;
  EvalOptions eval_opts;
  eval_opts.mode = EvalMode::classify;
  std::vector<Example> held_out, train;
  for (std::int64_t i = 0; i < eval_count; ++i) {
    held_out.push_back(data.get(1'000'000'000ULL + static_cast<std::uint64_t>(i), side));
    train.push_back(data.get(static_cast<std::uint64_t>(i), side));
  }
  run.top1 = *evaluate(result.state.model, held_out, vocab, eval_opts).top1;
  run.train_top1 = *evaluate(result.state.model, train, vocab, eval_opts).top1;
  return run;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const fs::path source_dir = argc > 1 ? fs::path(argv[1]) : fs::path(CLIPA_SOURCE_DIR);
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "clipa_acceptance";
  fs::create_directories(work);

  report(1, "dollar cost of the rate-consistent rows", [] {
    Outcome o;
    const RateCard gcp{1.575, "cloud A100 80GB"};
    const struct {
      double hours;
      std::int64_t printed;
      std::int64_t tolerance;
    } rows[] = {{5920, 9324, 0}, {7776, 12247, 0}, {232448, 366105, 1}};
    for (const auto& r : rows) {
      const DollarCost c = dollar_cost(r.hours, gcp);
      o.require(std::llabs(c.rounded() - r.printed) <= r.tolerance,
                fmt::format("{} h", r.hours));
      o.note(fmt::format("{} h -> {} (printed {})", format_thousands(static_cast<std::int64_t>(r.hours)),
                         format_currency(c.rounded()), format_currency(r.printed)));
    }
    return o;
  });

  report(2, "cost ratio against OpenCLIP G/14", [] {
    Outcome o;
    const RateCard gcp{1.575, "cloud A100 80GB"};
    const ComparisonReport r =
        comparison_report({{"G/14", 232448, gcp, std::nullopt, {}}, {"CLIPA-v2 H/14", 5920, gcp, std::nullopt, {}}});
    o.require(r.ratios.size() == 1, "one ratio");
    const CostRatio& ratio = r.ratios.at(0);
    o.require(std::abs(ratio.value - 39.26) < 0.005, "ratio 39.26");
    o.require(ratio.rendered == "≈39×", "rendered ≈39×");
    o.note(fmt::format("{:.2f} rendered {}", ratio.value, ratio.rendered));
    return o;
  });

  report(3, "image tokens per resolution", [] {
    Outcome o;
    o.require(tokens_for_resolution(84, 14) == 36, "(84,14) = 36");
    o.require(tokens_for_resolution(224, 14) == 256, "(224,14) = 256");
    o.note(fmt::format("84px -> {}, 224px -> {}", tokens_for_resolution(84, 14), tokens_for_resolution(224, 14)));
    return o;
  });

  report(4, "per-sample FLOPs of the H/14 recipe", [] {
    Outcome o;
    const ClipConfig h = clip_preset("H14");
    const double base = static_cast<double>(training_flops_per_sample(h.image, h.text, 224, 0.0, 32));
    const double r30 = static_cast<double>(training_flops_per_sample(h.image, h.text, 224, 0.3, 32));
    const double r40 = static_cast<double>(training_flops_per_sample(h.image, h.text, 336, 0.4, 32));
    TrainPlan plan;
    plan.model = h;
    StageConfig a, b;
    a.name = "ft224";
    a.image_side = 224;
    a.mask = {MaskStrategy::random, 0.3, 0};
    a.samples_seen = 512'000'000;
    a.text_len = 32;
    b = a;
    b.name = "ft336";
    b.image_side = 336;
    b.mask.ratio = 0.4;
    b.samples_seen = 128'000'000;
    plan.stages = {a, b};
    const double blended = plan_compute(plan).blended_finetune_flops_per_sample;
    o.require(within(base, 177.0e9, 0.15), "177.0G ±15%");
    o.require(within(r30 / base, 135.9 / 177.0, 0.10), "r=0.3 ratio ±10%");
    o.require(within(r40 / base, 237.8 / 177.0, 0.10), "336px r=0.4 ratio ±10%");
    o.require(within(blended / base, 156.3 / 177.0, 0.10), "blended ratio ±10%");
    o.note(fmt::format("base {:.1f}G, r0.3 {:.3f} (ref {:.3f}), 336/r0.4 {:.3f} (ref {:.3f}), blended {:.3f} (ref {:.3f})",
                       base / 1e9, r30 / base, 135.9 / 177.0, r40 / base, 237.8 / 177.0, blended / base, 156.3 / 177.0));
    return o;
  });

  report(5, "gradient correctness", [] {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::string worst_name;
    for (const auto& c : primitive_grad_cases()) {
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const double err = c.run(seed);
        if (!(err <= worst)) {
          worst = err;
          worst_name = c.name;
        }
      }
    }
    double e2e = 0.0;
    for (std::uint64_t seed : {1, 2}) e2e = std::max(e2e, end_to_end_grad_error(seed, false));
    e2e = std::max(e2e, end_to_end_grad_error(3, true));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.require(worst <= 1e-6, "primitives <= 1e-6");
    o.require(e2e <= 1e-4, "end-to-end <= 1e-4");
    o.require(secs < 60.0, "under one minute");
    o.note(fmt::format("{} primitives x 10 seeds, worst {:.2e} ({}); end-to-end {:.2e}", primitive_grad_cases().size(),
                       worst, worst_name, e2e));
    return o;
  });

  report(6, "contrastive loss analytics", [] {
    Outcome o;
    PrecisionScope f64(Precision::f64);
    CounterRng rng(6, 0);
    for (std::int64_t b : {2, 4, 8}) {
      const Tensor row = random_unit_rows(1, 8, rng);
      const Tensor same = gather_rows(row, std::vector<std::int64_t>(static_cast<std::size_t>(b), 0));
      const double loss = infonce_loss(same, same, 1.0 / 0.07).item();
      o.require(std::abs(loss - std::log(static_cast<double>(b))) <= 1e-6, fmt::format("ln {}", b));
    }
    const Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
    const double hand = std::log1p(std::exp(-10.0));
    const double loss = infonce_loss(id, id, 10.0).item();
    o.require(std::abs(loss - hand) <= 1e-6, "2x2 hand value");
    o.note(fmt::format("identical rows give ln B for B in {{2,4,8}}; 2x2 loss {:.6e} vs {:.6e}", loss, hand));
    return o;
  });

  report(7, "masking properties", [] {
    Outcome o;
    CounterRng rng(7, 0);
    const double grid_ratios[] = {0.25, 0.5, 0.75};
    std::int64_t block_checked = 0, grid_checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      const auto gh = static_cast<std::int64_t>(1 + rng.below(16)), gw = static_cast<std::int64_t>(1 + rng.below(16));
      const double r = rng.uniform(0.0, 0.95);
      const std::uint64_t seed = rng.next_u64(), index = rng.below(1 << 20);
      const std::int64_t want = keep_count(gh * gw, r);
      const TokenMask m = make_random_mask(gh, gw, r, seed, index);
      o.require(m.kept_count() == want, fmt::format("random {}x{} r={}", gh, gw, r));
      if (r > 0.0) {
        try {
          const TokenMask b = make_block_mask(gh, gw, r, seed, index);
          o.require(b.kept_count() == want && removed_is_rectangle(b), fmt::format("block {}x{} r={}", gh, gw, r));
          ++block_checked;
        } catch (const InfeasibleMaskError&) {
        }
      }
      const std::int64_t eh = 2 * (1 + gh / 2), ew = 2 * (1 + gw / 2);
      const double gr = grid_ratios[rng.below(3)];
      const TokenMask g = make_grid_mask(eh, ew, gr);
      o.require(g.kept_count() == keep_count(eh * ew, gr), "grid count");
      std::vector<std::int64_t> pinned;
      for (std::int64_t y = 0; y < eh; ++y)
        for (std::int64_t x = 0; x < ew; ++x)
          for (auto [dy, dx] : grid_window(gr))
            if (y % 2 == dy && x % 2 == dx) pinned.push_back(y * ew + x);
      o.require(g.kept == pinned, fmt::format("grid pattern {}x{} r={}", eh, ew, gr));
      ++grid_checked;
    }
    std::vector<int> hits(16, 0);
    for (int i = 0; i < 10000; ++i)
      for (auto k : make_random_mask(4, 4, 0.5, 77, static_cast<std::uint64_t>(i)).kept) ++hits[static_cast<std::size_t>(k)];
    double worst = 0.0;
    for (int h : hits) worst = std::max(worst, std::abs(h / 10000.0 - 0.5));
    o.require(worst <= 0.03, "keep frequency 0.5 ± 0.03");
    o.note(fmt::format("1000 random cases ({} block, {} grid checked); max keep-frequency deviation {:.4f}", block_checked,
                       grid_checked, worst));
    return o;
  });

  report(8, "evaluation oracles", [] {
    Outcome o;
    CounterRng rng(8, 0);
    int checked = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const std::int64_t n = 1 + static_cast<std::int64_t>(rng.below(32)), c = 2 + static_cast<std::int64_t>(rng.below(8));
      const std::int64_t e = 1 + static_cast<std::int64_t>(rng.below(8));
      const bool ties = trial % 2 == 1;
      const Tensor img = ties ? tie_prone_rows(n, e, rng) : random_unit_rows(n, e, rng);
      const Tensor txt = ties ? tie_prone_rows(n, e, rng) : random_unit_rows(n, e, rng);
      const Tensor cls = ties ? tie_prone_rows(c, e, rng) : random_unit_rows(c, e, rng);
      std::vector<std::int64_t> labels;
      for (std::int64_t i = 0; i < n; ++i) labels.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(c))));
      o.require(zero_shot_classify(img, cls, labels) == oracle_zero_shot(img, cls, labels), fmt::format("classify #{}", trial));
      for (std::int64_t k : {1, 5, 10}) {
        const RecallPair r = retrieval_recall(img, txt, k);
        o.require(r.image_to_text == oracle_recall(img, txt, k) && r.text_to_image == oracle_recall(txt, img, k),
                  fmt::format("recall@{} #{}", k, trial));
      }
      ++checked;
    }
    o.note(fmt::format("{} instances with N <= 32, half built to contain exact score ties", checked));
    return o;
  });

  const fs::path recipe = source_dir / "configs" / "toy_two_stage.cfg";
  RecipeRun first, second;
  bool first_ok = false;
  report(9, "desk-scale two-stage run", [&] {
    Outcome o;
    first = run_recipe(recipe, work / "run_a");
    first_ok = true;
    const StageReport& pre = first.stages.at(0);
    const StageReport& ft = first.stages.back();
    o.require(first.top1 >= 0.90, "held-out top-1 >= 90%");
    o.require(first.steps <= 2000, "<= 2000 steps");
    o.require(first.seconds <= 600.0, "<= 10 minutes");
    o.require(pre.mask_ratio == 0.5 && ft.mask_ratio == 0.0 && pre.image_side < ft.image_side, "plan shape");
    o.require(pre.measured_flops_per_step <= 0.8 * ft.measured_flops_per_step, "masked stage >= 20% cheaper per step");
    o.note(fmt::format("held-out top-1 {:.1f}%, train-split {:.1f}%, {} steps in {:.0f}s, FLOPs/step {:.3g} vs {:.3g} ({:.0f}% lower)",
                       100 * first.top1, 100 * first.train_top1, first.steps, first.seconds, pre.measured_flops_per_step,
                       ft.measured_flops_per_step,
                       100 * (1 - pre.measured_flops_per_step / ft.measured_flops_per_step)));
    return o;
  });

  report(10, "determinism of the seeded run", [&] {
    Outcome o;
    o.require(first_ok, "first run completed");
    if (!first_ok) return o;
    second = run_recipe(recipe, work / "run_b");
    const std::string log_a = log_without_wall_clock(first.dir / "logs" / "metrics.jsonl");
    const std::string log_b = log_without_wall_clock(second.dir / "logs" / "metrics.jsonl");
    o.require(!log_a.empty() && log_a == log_b, "metrics logs identical");
    std::int64_t files = 0;
    for (const auto& entry : fs::directory_iterator(first.dir / "checkpoints")) {
      const fs::path other = second.dir / "checkpoints" / entry.path().filename();
      o.require(fs::exists(other) && slurp(entry.path()) == slurp(other), entry.path().filename().string());
      ++files;
    }
    o.require(files >= 2, "checkpoints written");
    o.require(first.top1 == second.top1, "identical accuracy");
    o.note(fmt::format("{} log lines and {} checkpoints byte-identical", std::count(log_a.begin(), log_a.end(), '\n'), files));
    return o;
  });

  std::cout << (failures == 0 ? "all acceptance criteria passed\n" : fmt::format("{} criteria failed\n", failures));
  return failures == 0 ? 0 : 1;
}
