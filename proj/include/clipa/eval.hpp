#pragma once

// Zero-shot classification against prompted class names and bidirectional
// image-text retrieval recall@K.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "clipa/model.hpp"
#include "clipa/synth.hpp"

namespace clipa {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Templates contain one "{}" that is replaced by the class name.
inline const std::vector<std::string> kDefaultTemplates = {"a photo of a {}"};

std::string fill_template(const std::string& tmpl, const std::string& class_name);

// Per class: encode every filled template, average, re-normalize. [C, embed_dim].
Tensor build_class_embeddings(const ClipModel& model, const std::vector<std::string>& class_names,
                              const std::vector<std::string>& templates, const Vocab& vocab, std::int64_t text_len);

// argmax cosine similarity per row; ties go to the lowest class index.
std::vector<std::int64_t> zero_shot_predict(const Tensor& image_embs, const Tensor& class_embs);
double zero_shot_classify(const Tensor& image_embs, const Tensor& class_embs, const std::vector<std::int64_t>& labels);

struct RecallPair {
  double image_to_text = 0.0;
  double text_to_image = 0.0;
};

// Row i of each matrix is a true pair. A query's rank is the number of
// candidates scoring higher than its match plus the lower-indexed ones scoring
// equal. K larger than N behaves as K = N.
RecallPair retrieval_recall(const Tensor& image_embs, const Tensor& text_embs, std::int64_t k);

struct ClassAccuracy {
  std::string name;
  std::int64_t correct = 0;
  std::int64_t total = 0;
};

struct EvalReport {
  std::string mode;  // classify, retrieval or both
  std::int64_t num_samples = 0;
  std::int64_t image_side = 0;
  std::optional<double> top1;
  std::vector<ClassAccuracy> per_class;
  std::map<std::int64_t, RecallPair> recall;  // keyed by K
};

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);
// Table-4-style text table; one column block per report.
std::string render_eval_table(const std::vector<std::pair<std::string, EvalReport>>& reports);

enum class EvalMode { classify, retrieval, both };
EvalMode parse_eval_mode(std::string_view name);

struct EvalOptions {
  EvalMode mode = EvalMode::both;
  std::vector<std::string> templates = kDefaultTemplates;
  std::vector<std::string> class_names = clipa::class_names();  // indexed by class_id
  std::int64_t text_len = 8;
  std::vector<std::int64_t> recall_ks = {1, 5, 10};
  std::int64_t batch_size = 64;
};

// Images are encoded with all tokens at the model's current resolution.
Tensor embed_images(const ClipModel& model, const std::vector<Example>& examples, std::int64_t batch_size = 64);
Tensor embed_captions(const ClipModel& model, const std::vector<std::string>& captions, const Vocab& vocab,
                      std::int64_t text_len, std::int64_t batch_size = 64);

EvalReport evaluate(const ClipModel& model, const std::vector<Example>& examples, const Vocab& vocab,
                    const EvalOptions& options = {});

}  // namespace clipa
