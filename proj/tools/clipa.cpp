// clipa: data generation, training plans, evaluation, cost estimation,
// masking sweeps and report rendering.
//
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "clipa/checkpoint.hpp"
#include "clipa/cost.hpp"
#include "clipa/eval.hpp"
#include "clipa/plan.hpp"
#include "clipa/runtime.hpp"
#include "clipa/synth.hpp"
#include "clipa/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace clipa;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  try {
    return json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

// --- run config ----------------------------------------------------------------

struct DataConfig {
  std::optional<fs::path> manifest;
  std::uint64_t seed = 0;
  MissingFilePolicy policy = MissingFilePolicy::fail_fast;
};

struct HeldOutConfig {
  std::int64_t count = 0;  // 0: no evaluation after training
  std::uint64_t first_index = 1'000'000'000;
  std::optional<fs::path> manifest;
  EvalOptions options;
};

struct RunConfig {
  json plan_json;
  DataConfig data;
  HeldOutConfig eval;
  std::optional<RateCard> rate;
  std::optional<fs::path> out;
};

const std::set<std::string> kPlanKeys = {"model", "stages", "optimizer", "seed"};

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  std::set<std::string> allowed = kPlanKeys;
  allowed.insert({"data", "eval", "rate", "out"});
  reject_unknown(j, allowed, "config");
  RunConfig rc;
  rc.plan_json = json::object();
  for (const auto& key : kPlanKeys)
    if (j.contains(key)) rc.plan_json[key] = j.at(key);
  rc.data.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, {"source", "seed", "manifest", "missing"}, "data");
    const std::string source = d.value("source", d.contains("manifest") ? "folder" : "synthetic");
    if (source == "folder") {
      if (!d.contains("manifest")) throw ConfigError("data.source 'folder' needs data.manifest");
      rc.data.manifest = base_dir / d.at("manifest").get<std::string>();
    } else if (source != "synthetic") {
      throw ConfigError("data.source must be 'synthetic' or 'folder'");
    }
    if (d.contains("seed")) rc.data.seed = d.at("seed").get<std::uint64_t>();
    if (d.contains("missing")) {
      const auto m = d.at("missing").get<std::string>();
      if (m == "skip") rc.data.policy = MissingFilePolicy::skip_with_warning;
      else if (m != "fail") throw ConfigError("data.missing must be 'skip' or 'fail'");
    }
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    reject_unknown(e, {"count", "first_index", "manifest", "mode", "templates", "text_len"}, "eval");
    rc.eval.count = e.value("count", std::int64_t{256});
    rc.eval.first_index = e.value("first_index", rc.eval.first_index);
    if (e.contains("manifest")) rc.eval.manifest = base_dir / e.at("manifest").get<std::string>();
    if (e.contains("mode")) rc.eval.options.mode = parse_eval_mode(e.at("mode").get<std::string>());
    if (e.contains("templates")) rc.eval.options.templates = e.at("templates").get<std::vector<std::string>>();
    if (e.contains("text_len")) rc.eval.options.text_len = e.at("text_len").get<std::int64_t>();
  }
  if (j.contains("rate")) rc.rate = rate_card_from_json(j.at("rate"));
  if (j.contains("out")) rc.out = j.at("out").get<std::string>();
  return rc;
}

std::unique_ptr<DataSource> make_source(const DataConfig& d) {
  if (d.manifest) return std::make_unique<FolderSource>(*d.manifest, d.policy);
  return std::make_unique<SyntheticSource>(d.seed);
}

Vocab vocab_for(const DataConfig& d) {
  if (d.manifest) {
    const fs::path v = d.manifest->parent_path() / "vocab.txt";
    if (fs::exists(v)) return Vocab::load(v);
  }
  return Vocab::synthetic();
}

std::vector<Example> held_out_examples(const HeldOutConfig& e, const DataConfig& d, std::int64_t side) {
  if (e.manifest) return ingest_folder(*e.manifest, side, d.policy);
  const SyntheticSource src(d.seed);
  std::vector<Example> out;
  for (std::int64_t i = 0; i < e.count; ++i) out.push_back(src.get(e.first_index + static_cast<std::uint64_t>(i), side));
  return out;
}

// --- subcommands ------------------------------------------------------------------

struct GenDataArgs {
  std::uint64_t seed = 0;
  std::int64_t count = 1024;
  std::int64_t resolution = 32;
  std::string out;
  std::string split = "train";
  std::uint64_t first_index = 0;
};

int cmd_gen_data(const GenDataArgs& a) {
  const auto m = write_synthetic_dataset(a.out, a.seed, a.count, a.resolution, a.split, a.first_index);
  std::cout << fmt::format("wrote {} images ({}x{}) and {}\n", m.entries.size(), a.resolution, a.resolution,
                           (fs::path(a.out) / "manifest.jsonl").string());
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::int64_t progress = 50;
  int threads = 1;
};

int cmd_train(const TrainArgs& a) {
  const fs::path config_path(a.config);
  RunConfig rc = parse_run_config(read_json_file(config_path), config_path.parent_path());
  if (a.seed) {
    rc.plan_json["seed"] = *a.seed;
    rc.data.seed = *a.seed;
  }
  const fs::path out = !a.out.empty() ? fs::path(a.out) : rc.out ? *rc.out : fs::path("runs/train");
  const Vocab vocab = vocab_for(rc.data);
  const TrainPlan plan = plan_from_json(rc.plan_json, vocab.size());
  plan.validate();
  const auto source = make_source(rc.data);

  TrainOptions opts;
  opts.out_dir = out;
  opts.threads = a.threads;
  opts.progress_every = a.progress;
  const PlanResult result = run_plan(plan, *source, vocab, opts);

  std::cout << render_cost_table(result.cost);
  for (const auto& s : result.stages) {
    std::cout << fmt::format("stage {}: {} steps, loss {:.4f} -> {:.4f}, measured {:.3g} FLOPs/step, {:.1f}s\n", s.name,
                             s.steps, s.first_loss, s.final_loss, s.measured_flops_per_step, s.wall_seconds);
  }
  if (rc.eval.count > 0 || rc.eval.manifest) {
    const std::int64_t side = result.state.model.image.grid * result.state.model.image.config.patch_size;
    rc.eval.options.text_len = plan.stages.back().text_len;
    const EvalReport report =
        evaluate(result.state.model, held_out_examples(rc.eval, rc.data, side), vocab, rc.eval.options);
    write_json_file(out / "reports" / "eval.json", to_json(report));
    std::cout << render_eval_table({{"held-out", report}});
  }
  json stage_reports = json::array();
  for (const auto& s : result.stages) stage_reports.push_back(to_json(s));
  json cost = to_json(result.cost);
  if (rc.rate) cost["rate"] = {{"price_per_hour", rc.rate->price_per_hour}, {"source", rc.rate->source}};
  write_json_file(out / "reports" / "cost.json", {{"cost", cost}, {"stages", stage_reports}});
  std::cout << "outputs in " << out.string() << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::uint64_t synthetic_seed = 0;
  std::int64_t count = 256;
  std::uint64_t first_index = 1'000'000'000;
  std::string mode = "both";
  std::int64_t text_len = 8;
  std::string out;
  bool skip_missing = false;
};

int cmd_eval(const EvalArgs& a) {
  const ClipModel model = load_checkpoint(a.checkpoint);
  const std::int64_t side = model.image.grid * model.image.config.patch_size;
  std::vector<Example> examples;
  Vocab vocab = Vocab::synthetic();
  const auto policy = a.skip_missing ? MissingFilePolicy::skip_with_warning : MissingFilePolicy::fail_fast;
  if (!a.data.empty()) {
    examples = ingest_folder(a.data, side, policy);
    const fs::path v = fs::path(a.data).parent_path() / "vocab.txt";
    if (fs::exists(v)) vocab = Vocab::load(v);
  } else {
    const SyntheticSource src(a.synthetic_seed);
    for (std::int64_t i = 0; i < a.count; ++i) examples.push_back(src.get(a.first_index + static_cast<std::uint64_t>(i), side));
  }
  EvalOptions opts;
  opts.mode = parse_eval_mode(a.mode);
  opts.text_len = a.text_len;
  const EvalReport report = evaluate(model, examples, vocab, opts);
  const fs::path out = a.out.empty() ? fs::path("runs/eval") : fs::path(a.out);
  write_json_file(out / "reports" / "eval.json", to_json(report));
  std::cout << render_eval_table({{fs::path(a.checkpoint).filename().string(), report}});
  return 0;
}

struct EstimateArgs {
  std::string config;
  std::string preset;
  std::int64_t res = 224;
  double mask = 0.0;
  std::int64_t text_len = 32;
  std::optional<double> gpu_hours;
  std::optional<double> rate;
  std::string compare;
  int backward_multiplier = 1;
  bool json = false;
  bool no_embedding = false;
};

int cmd_estimate(const EstimateArgs& a, CLI::App& sub) {
  if (a.config.empty() && a.preset.empty() && !a.gpu_hours && a.compare.empty()) {
    std::cerr << sub.help();
    return 2;
  }
  const FlopTerms terms{!a.no_embedding, true};
  json out = json::object();
  std::string text;
  std::optional<RateCard> rate;
  if (a.rate) rate = RateCard{*a.rate, "--rate"};

  if (!a.config.empty()) {
    const fs::path path(a.config);
    const RunConfig rc = parse_run_config(read_json_file(path), path.parent_path());
    const TrainPlan plan = plan_from_json(rc.plan_json, vocab_for(rc.data).size());
    for (const auto& w : plan.validate()) std::cerr << "warning: " << w << '\n';
    CostReport report = plan_compute(plan, a.backward_multiplier, terms);
    if (!rate && rc.rate) rate = rc.rate;
    if (a.gpu_hours) {
      report.gpu_hours = *a.gpu_hours;
      if (rate) report.dollars = dollar_cost(*a.gpu_hours, *rate).exact;
    }
    out["plan"] = to_json(report);
    text += render_cost_table(report);
  } else if (!a.preset.empty()) {
    const ClipConfig cfg = clip_preset(a.preset);
    const auto per_sample = training_flops_per_sample(cfg.image, cfg.text, a.res, a.mask, a.text_len,
                                                      a.backward_multiplier, terms);
    const auto image_tokens = image_sequence_length(cfg.image, a.res, a.mask);
    out["per_sample"] = {{"preset", a.preset},  {"image_side", a.res},       {"mask_ratio", a.mask},
                         {"text_len", a.text_len}, {"image_tokens", image_tokens}, {"flops", per_sample}};
    text += fmt::format("{} @ {}px, mask {:.0f}%, text {}: {} image tokens, {:.1f}G FLOPs per sample\n", a.preset, a.res,
                        a.mask * 100.0, a.text_len, image_tokens, static_cast<double>(per_sample) / 1e9);
  }
  if (a.gpu_hours && a.config.empty()) {
    if (!rate) throw UsageError("--gpu-hours needs --rate");
    const DollarCost c = dollar_cost(*a.gpu_hours, *rate);
    out["cost"] = {{"gpu_hours", *a.gpu_hours}, {"price_per_hour", rate->price_per_hour}, {"exact", c.exact},
                   {"rounded", c.rounded()}, {"display", format_currency(c.rounded())}};
    text += fmt::format("{} GPU hours at ${}/h: {} (exact {:.2f})\n", format_thousands(std::llround(*a.gpu_hours)),
                        rate->price_per_hour, format_currency(c.rounded()), c.exact);
  }
  if (!a.compare.empty()) {
    const ComparisonReport report = comparison_report(comparison_rows_from_json(read_json_file(a.compare)));
    out["comparison"] = to_json(report);
    text += render_comparison(report);
  }
  std::cout << (a.json ? out.dump(2) + "\n" : text);
  return 0;
}

struct SweepArgs {
  std::string config;
  std::string out;
  std::int64_t progress = 0;
  int threads = 1;
};

int cmd_sweep(const SweepArgs& a) {
  const fs::path path(a.config);
  json j = read_json_file(path);
  reject_unknown(j, {"sizes", "ratios", "plan", "eval_count", "eval_first_index", "data", "out"}, "sweep config");
  DataConfig data;
  if (j.contains("data")) {
    json wrapper = {{"data", j.at("data")}};
    data = parse_run_config(wrapper, path.parent_path()).data;
  }
  const fs::path out = !a.out.empty() ? fs::path(a.out) : j.contains("out") ? fs::path(j.at("out").get<std::string>())
                                                                            : fs::path("runs/sweep");
  j.erase("data");
  j.erase("out");
  const Vocab vocab = vocab_for(data);
  const SweepConfig cfg = sweep_config_from_json(j, vocab.size());
  const auto source = make_source(data);
  TrainOptions opts;
  opts.threads = a.threads;
  opts.progress_every = a.progress;
  const SweepResult result = inverse_scaling_sweep(cfg, *source, vocab, opts);
  write_json_file(out / "reports" / "sweep.json", to_json(result));
  const std::string grid = render_sweep(result);
  fs::create_directories(out / "reports");
  std::ofstream(out / "reports" / "sweep.txt") << grid;
  std::cout << grid;
  return 0;
}

struct ReportArgs {
  std::vector<std::string> evals;
  std::string train;
  std::string sweep;
};

int cmd_report(const ReportArgs& a, CLI::App& sub) {
  if (a.evals.empty() && a.train.empty() && a.sweep.empty()) {
    std::cerr << sub.help();
    return 2;
  }
  if (!a.evals.empty()) {
    std::vector<std::pair<std::string, EvalReport>> rows;
    for (const auto& p : a.evals) {
      const fs::path path(p);
      const std::string label = path.parent_path().parent_path().filename().string();
      rows.emplace_back(label.empty() ? path.stem().string() : label, eval_report_from_json(read_json_file(path)));
    }
    std::cout << render_eval_table(rows);
  }
  if (!a.train.empty()) {
    const json j = read_json_file(a.train);
    for (const auto& s : j.at("stages")) {
      std::cout << fmt::format("{:<14} {:>6} steps  side {:>4}  mask {:>3.0f}%  loss {:.4f} -> {:.4f}  {:.3g} FLOPs/step\n",
                               s.at("name").get<std::string>(), s.at("steps").get<std::int64_t>(),
                               s.at("image_side").get<std::int64_t>(), s.at("mask_ratio").get<double>() * 100.0,
                               s.at("first_loss").get<double>(), s.at("final_loss").get<double>(),
                               s.at("measured_flops_per_step").get<double>());
    }
  }
  if (!a.sweep.empty()) {
    const json j = read_json_file(a.sweep);
    SweepResult r;
    r.sizes = j.at("sizes").get<std::vector<std::string>>();
    r.ratios = j.at("ratios").get<std::vector<double>>();
    for (const auto& c : j.at("cells")) {
      r.cells.push_back({c.at("size").get<std::string>(), c.at("ratio").get<double>(), c.at("accuracy").get<double>(),
                         c.at("drop").get<double>(), c.at("finetune_flops_per_step").get<double>()});
    }
    std::cout << render_sweep(r);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"clipa: token-reduced CLIP training, evaluation and cost estimation"};
  app.require_subcommand(0, 1);
  app.footer("Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic shapes dataset (PNG + manifest.jsonl)");
  gen_cmd->add_option("--seed", gen.seed, "Global seed");
  gen_cmd->add_option("--count", gen.count, "Number of samples")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--resolution", gen.resolution, "Image side in pixels (>= 16)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--split", gen.split, "Split tag written to the manifest");
  gen_cmd->add_option("--first-index", gen.first_index, "Index of the first sample");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run a multi-stage training plan");
  train_cmd->add_option("--config", train.config, "Run config (JSON)")->required();
  train_cmd->add_option("--out", train.out, "Output directory (overrides the config's \"out\")");
  train_cmd->add_option("--seed", train.seed, "Override the plan and data seed");
  train_cmd->add_option("--progress", train.progress, "Print a progress line every N steps (0: off)");
  train_cmd->add_option("--threads", train.threads, "Worker threads for batch rendering")->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Zero-shot classification and retrieval of a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "manifest.jsonl of a labeled image folder (default: synthetic held-out)");
  eval_cmd->add_option("--synthetic-seed", ev.synthetic_seed, "Seed of the synthetic held-out split");
  eval_cmd->add_option("--count", ev.count, "Synthetic held-out samples");
  eval_cmd->add_option("--first-index", ev.first_index, "First synthetic index of the held-out split");
  eval_cmd->add_option("--mode", ev.mode, "classify, retrieval or both")
      ->check(CLI::IsMember({"classify", "retrieval", "both"}));
  eval_cmd->add_option("--text-len", ev.text_len, "Text tokens per prompt");
  eval_cmd->add_option("--out", ev.out, "Output directory");
  eval_cmd->add_flag("--skip-missing", ev.skip_missing, "Skip unreadable images instead of failing");

  EstimateArgs est;
  auto* est_cmd = app.add_subcommand("estimate", "Per-sample FLOPs, plan compute and dollar cost");
  est_cmd->add_option("--config", est.config, "Run config whose plan is costed");
  est_cmd->add_option("--preset", est.preset, "Model preset")
      ->check(CLI::IsMember({"H14", "L14", "L16", "B16", "S16", "toy-tiny", "toy-small", "toy-base"}));
  est_cmd->add_option("--res", est.res, "Image side in pixels");
  est_cmd->add_option("--mask", est.mask, "Image mask ratio in [0,1)");
  est_cmd->add_option("--text-len", est.text_len, "Text tokens");
  est_cmd->add_option("--gpu-hours", est.gpu_hours, "GPU hours to price");
  est_cmd->add_option("--rate", est.rate, "Price per GPU hour");
  est_cmd->add_option("--compare", est.compare, "JSON array of comparison rows");
  est_cmd->add_option("--backward-multiplier", est.backward_multiplier, "1: forward only, 3: forward + backward");
  est_cmd->add_flag("--no-embedding", est.no_embedding, "Leave out the patch-embedding term");
  est_cmd->add_flag("--json", est.json, "Print JSON instead of text");

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "Masking-ratio drop table across model sizes");
  sweep_cmd->add_option("--config", sw.config, "Sweep config (JSON)")->required();
  sweep_cmd->add_option("--out", sw.out, "Output directory");
  sweep_cmd->add_option("--progress", sw.progress, "Print a line per finished cell when > 0");
  sweep_cmd->add_option("--threads", sw.threads, "Worker threads for batch rendering")->check(CLI::PositiveNumber);

  ReportArgs rep;
  auto* report_cmd = app.add_subcommand("report", "Render saved reports as text tables");
  report_cmd->add_option("--eval", rep.evals, "eval.json files (one table row each)");
  report_cmd->add_option("--train", rep.train, "train.json");
  report_cmd->add_option("--sweep", rep.sweep, "sweep.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen);
    if (train_cmd->parsed()) return cmd_train(train);
    if (eval_cmd->parsed()) return cmd_eval(ev);
    if (est_cmd->parsed()) return cmd_estimate(est, *est_cmd);
    if (sweep_cmd->parsed()) return cmd_sweep(sw);
    if (report_cmd->parsed()) return cmd_report(rep, *report_cmd);
    std::cerr << app.help();
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const MaskError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ResolutionError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const EvalError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
