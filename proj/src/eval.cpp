#include "clipa/eval.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace clipa {

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " must be [N, e], got " + shape_str(t.shape()));
}

double dot_rows(const Tensor& a, std::int64_t i, const Tensor& b, std::int64_t j) {
  const std::int64_t e = a.dim(1);
  const double* x = a.data().data() + i * e;
  const double* y = b.data().data() + j * e;
  double s = 0.0;
  for (std::int64_t k = 0; k < e; ++k) s += x[k] * y[k];
  return s;
}

// Rank of candidate `truth` among row `query` of a against all rows of b.
std::int64_t rank_of(const Tensor& a, std::int64_t query, const Tensor& b, std::int64_t truth) {
  const double target = dot_rows(a, query, b, truth);
  std::int64_t rank = 0;
  for (std::int64_t j = 0; j < b.dim(0); ++j) {
    const double s = dot_rows(a, query, b, j);
    if (s > target || (s == target && j < truth)) ++rank;
  }
  return rank;
}

}  // namespace

std::string fill_template(const std::string& tmpl, const std::string& class_name) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos) throw EvalError("prompt template '" + tmpl + "' has no {} placeholder");
  std::string out = tmpl;
  out.replace(pos, 2, class_name);
  return out;
}

Tensor embed_captions(const ClipModel& model, const std::vector<std::string>& captions, const Vocab& vocab,
                      std::int64_t text_len, std::int64_t batch_size) {
  NoGradScope no_grad;
  const std::int64_t n = static_cast<std::int64_t>(captions.size());
  const std::int64_t e = model.text.config.embed_dim;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n * e));
  for (std::int64_t start = 0; start < n; start += batch_size) {
    std::vector<TruncatedText> texts;
    for (std::int64_t i = start; i < std::min(n, start + batch_size); ++i) {
      texts.push_back(truncate_text(word_tokenizer(captions[static_cast<std::size_t>(i)], vocab), text_len,
                                    vocab.pad_id()));
    }
    const Tensor emb = encode_texts(model.text, texts);
    out.insert(out.end(), emb.data().begin(), emb.data().end());
  }
  return Tensor::from({n, e}, std::move(out));
}

Tensor embed_images(const ClipModel& model, const std::vector<Example>& examples, std::int64_t batch_size) {
  NoGradScope no_grad;
  const std::int64_t side = model.image.grid * model.image.config.patch_size;
  const std::int64_t n = static_cast<std::int64_t>(examples.size());
  const std::int64_t e = model.image.config.embed_dim;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n * e));
  for (std::int64_t start = 0; start < n; start += batch_size) {
    std::vector<Tensor> images;
    std::vector<TokenMask> masks;
    for (std::int64_t i = start; i < std::min(n, start + batch_size); ++i) {
      const Tensor& img = examples[static_cast<std::size_t>(i)].image;
      if (img.rank() != 3 || img.dim(0) != side || img.dim(1) != side) {
        throw EvalError("image " + std::to_string(i) + " has shape " + shape_str(img.shape()) +
                        " but the model expects " + std::to_string(side) + "x" + std::to_string(side));
      }
      images.push_back(img);
      masks.push_back(make_full_mask(model.image.grid, model.image.grid));
    }
    const Tensor emb = encode_images(model.image, patchify_batch(images, model.image.config.patch_size), masks);
    out.insert(out.end(), emb.data().begin(), emb.data().end());
  }
  return Tensor::from({n, e}, std::move(out));
}

Tensor build_class_embeddings(const ClipModel& model, const std::vector<std::string>& class_names,
                              const std::vector<std::string>& templates, const Vocab& vocab, std::int64_t text_len) {
  if (class_names.empty()) throw EvalError("class list is empty");
  if (templates.empty()) throw EvalError("need at least one prompt template");
  std::vector<std::string> prompts;
  for (const auto& name : class_names)
    for (const auto& t : templates) prompts.push_back(fill_template(t, name));
  const Tensor emb = embed_captions(model, prompts, vocab, text_len);
  const std::int64_t c = static_cast<std::int64_t>(class_names.size());
  const std::int64_t t = static_cast<std::int64_t>(templates.size());
  const std::int64_t e = emb.dim(1);
  std::vector<double> out(static_cast<std::size_t>(c * e), 0.0);
  for (std::int64_t i = 0; i < c; ++i) {
    double* row = out.data() + i * e;
    for (std::int64_t j = 0; j < t; ++j)
      for (std::int64_t k = 0; k < e; ++k) row[k] += emb.data()[static_cast<std::size_t>((i * t + j) * e + k)];
    double norm = 0.0;
    for (std::int64_t k = 0; k < e; ++k) {
      row[k] /= static_cast<double>(t);
      norm += row[k] * row[k];
    }
    norm = std::max(std::sqrt(norm), 1e-12);
    for (std::int64_t k = 0; k < e; ++k) row[k] /= norm;
  }
  return Tensor::from({c, e}, std::move(out));
}

std::vector<std::int64_t> zero_shot_predict(const Tensor& image_embs, const Tensor& class_embs) {
  require_matrix(image_embs, "image embeddings");
  require_matrix(class_embs, "class embeddings");
  if (image_embs.dim(1) != class_embs.dim(1)) throw DimensionError("embedding widths differ");
  if (class_embs.dim(0) < 1) throw EvalError("no classes");
  std::vector<std::int64_t> pred(static_cast<std::size_t>(image_embs.dim(0)));
  for (std::int64_t i = 0; i < image_embs.dim(0); ++i) {
    std::int64_t best = 0;
    double best_score = dot_rows(image_embs, i, class_embs, 0);
    for (std::int64_t c = 1; c < class_embs.dim(0); ++c) {
      const double s = dot_rows(image_embs, i, class_embs, c);
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    pred[static_cast<std::size_t>(i)] = best;
  }
  return pred;
}

double zero_shot_classify(const Tensor& image_embs, const Tensor& class_embs, const std::vector<std::int64_t>& labels) {
  if (static_cast<std::int64_t>(labels.size()) != image_embs.dim(0)) throw EvalError("label count != image count");
  for (auto l : labels) {
    if (l < 0 || l >= class_embs.dim(0)) {
      throw EvalError("label " + std::to_string(l) + " out of range for " + std::to_string(class_embs.dim(0)) + " classes");
    }
  }
  if (labels.empty()) return 0.0;
  const auto pred = zero_shot_predict(image_embs, class_embs);
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

RecallPair retrieval_recall(const Tensor& image_embs, const Tensor& text_embs, std::int64_t k) {
  if (k < 1) throw EvalError("recall K must be >= 1");
  require_matrix(image_embs, "image embeddings");
  require_matrix(text_embs, "text embeddings");
  if (image_embs.shape() != text_embs.shape()) throw DimensionError("image and text embeddings must have equal shapes");
  const std::int64_t n = image_embs.dim(0);
  if (n == 0) return {};
  std::int64_t i2t = 0, t2i = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    i2t += rank_of(image_embs, i, text_embs, i) < k;
    t2i += rank_of(text_embs, i, image_embs, i) < k;
  }
  return {static_cast<double>(i2t) / static_cast<double>(n), static_cast<double>(t2i) / static_cast<double>(n)};
}

EvalMode parse_eval_mode(std::string_view name) {
  if (name == "classify") return EvalMode::classify;
  if (name == "retrieval") return EvalMode::retrieval;
  if (name == "both") return EvalMode::both;
  throw EvalError("unknown eval mode '" + std::string(name) + "' (classify, retrieval, both)");
}

EvalReport evaluate(const ClipModel& model, const std::vector<Example>& examples, const Vocab& vocab,
                    const EvalOptions& options) {
  EvalReport report;
  report.mode = options.mode == EvalMode::classify ? "classify" : options.mode == EvalMode::retrieval ? "retrieval" : "both";
  report.num_samples = static_cast<std::int64_t>(examples.size());
  report.image_side = model.image.grid * model.image.config.patch_size;
  const Tensor images = embed_images(model, examples, options.batch_size);

  if (options.mode != EvalMode::retrieval) {
    const Tensor classes = build_class_embeddings(model, options.class_names, options.templates, vocab, options.text_len);
    std::vector<std::int64_t> labels;
    for (const auto& ex : examples) labels.push_back(ex.class_id);
    report.top1 = zero_shot_classify(images, classes, labels);
    const auto pred = zero_shot_predict(images, classes);
    for (const auto& name : options.class_names) report.per_class.push_back({name, 0, 0});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto& c = report.per_class[static_cast<std::size_t>(labels[i])];
      ++c.total;
      c.correct += pred[i] == labels[i];
    }
  }
  if (options.mode != EvalMode::classify) {
    std::vector<std::string> captions;
    for (const auto& ex : examples) captions.push_back(ex.caption);
    const Tensor texts = embed_captions(model, captions, vocab, options.text_len, options.batch_size);
    for (auto k : options.recall_ks) report.recall[k] = retrieval_recall(images, texts, k);
  }
  return report;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"mode", r.mode}, {"num_samples", r.num_samples}, {"image_side", r.image_side}};
  if (r.top1) {
    j["top1"] = *r.top1;
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& c : r.per_class) {
      per_class.push_back({{"name", c.name},
                           {"correct", c.correct},
                           {"total", c.total},
                           {"accuracy", c.total > 0 ? static_cast<double>(c.correct) / static_cast<double>(c.total) : 0.0}});
    }
    j["per_class"] = per_class;
  }
  if (!r.recall.empty()) {
    nlohmann::json recall = nlohmann::json::object();
    for (const auto& [k, pair] : r.recall) {
      recall[std::to_string(k)] = {{"image_to_text", pair.image_to_text}, {"text_to_image", pair.text_to_image}};
    }
    j["recall"] = recall;
  }
  return j;
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.mode = j.at("mode").get<std::string>();
  r.num_samples = j.at("num_samples").get<std::int64_t>();
  r.image_side = j.value("image_side", std::int64_t{0});
  if (j.contains("top1")) r.top1 = j.at("top1").get<double>();
  if (j.contains("per_class")) {
    for (const auto& c : j.at("per_class")) {
      r.per_class.push_back({c.at("name").get<std::string>(), c.at("correct").get<std::int64_t>(),
                             c.at("total").get<std::int64_t>()});
    }
  }
  if (j.contains("recall")) {
    for (const auto& [k, pair] : j.at("recall").items()) {
      r.recall[std::stoll(k)] = {pair.at("image_to_text").get<double>(), pair.at("text_to_image").get<double>()};
    }
  }
  return r;
}

std::string render_eval_table(const std::vector<std::pair<std::string, EvalReport>>& reports) {
  std::vector<std::int64_t> ks;
  for (const auto& [_, r] : reports)
    for (const auto& [k, __] : r.recall)
      if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
  std::sort(ks.begin(), ks.end());

  std::string out = fmt::format("{:<24} {:>6} {:>8}", "run", "N", "top-1");
  for (auto k : ks) out += fmt::format(" {:>8} {:>8}", fmt::format("I2T@{}", k), fmt::format("T2I@{}", k));
  out += '\n';
  for (const auto& [label, r] : reports) {
    out += fmt::format("{:<24} {:>6} {:>8}", label, r.num_samples,
                       r.top1 ? fmt::format("{:.1f}", *r.top1 * 100.0) : std::string("-"));
    for (auto k : ks) {
      auto it = r.recall.find(k);
      if (it == r.recall.end()) {
        out += fmt::format(" {:>8} {:>8}", "-", "-");
      } else {
        out += fmt::format(" {:>8.1f} {:>8.1f}", it->second.image_to_text * 100.0, it->second.text_to_image * 100.0);
      }
    }
    out += '\n';
  }
  return out;
}

}  // namespace clipa
