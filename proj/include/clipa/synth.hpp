#pragma once

// Procedural image-caption data (coloured shapes on a noisy background), a
// word-level tokenizer, PNG + JSON Lines dataset storage, and the data
// sources the trainer and evaluator read from.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "clipa/tensor.hpp"

namespace clipa {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<std::string_view, 4> kShapeNames = {"circle", "square", "triangle", "cross"};
inline constexpr std::array<std::string_view, 4> kColorNames = {"red", "green", "blue", "yellow"};
inline constexpr std::int64_t kNumClasses = 16;
inline constexpr std::int64_t kMinResolution = 16;

// class_id = shape * 4 + color; name is "{color} {shape}".
std::string class_name(std::int64_t class_id);
std::vector<std::string> class_names();
std::string caption_for_class(std::int64_t class_id);

// 8-bit interleaved RGB image.
struct Image8 {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> rgb;
  bool operator==(const Image8&) const = default;
};

Tensor to_tensor(const Image8& image);  // [H,W,3] in [0,1]
Image8 resize_nearest(const Image8& image, std::int64_t side);
std::uint64_t image_hash(const Image8& image);  // FNV-1a over the raw bytes

void write_png(const std::filesystem::path& path, const Image8& image);
Image8 read_png(const std::filesystem::path& path);

struct SyntheticSample {
  Image8 pixels;
  Tensor image;
  std::string caption;
  std::int64_t class_id = 0;
};

// Deterministic in (seed, index). Classes are balanced: each aligned block of
// 16 consecutive indices holds every class once, in a seeded order.
SyntheticSample gen_sample(std::uint64_t seed, std::uint64_t index, std::int64_t resolution);

class Vocab {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kUnk = "<unk>";

  explicit Vocab(std::vector<std::string> words);
  static Vocab synthetic();  // covers every synthetic caption
  static Vocab load(const std::filesystem::path& path);  // one word per line
  void save(const std::filesystem::path& path) const;

  std::int64_t id(std::string_view word) const;  // unknown -> unk_id()
  const std::string& word(std::int64_t id) const;
  std::int64_t pad_id() const { return pad_; }
  std::int64_t unk_id() const { return unk_; }
  std::int64_t size() const { return static_cast<std::int64_t>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int64_t> index_;
  std::int64_t pad_ = 0;
  std::int64_t unk_ = 0;
};

// Lowercase, whitespace split, unknown words map to <unk>.
std::vector<std::int64_t> word_tokenizer(std::string_view caption, const Vocab& vocab);
std::string detokenize(const std::vector<std::int64_t>& ids, const Vocab& vocab);

struct ManifestEntry {
  std::string image;  // path relative to the manifest directory
  std::string caption;
  std::int64_t class_id = 0;
  std::string class_name;
  std::string split = "train";
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  static DatasetManifest load(const std::filesystem::path& manifest_path);
  void save(const std::filesystem::path& manifest_path) const;
};

// Writes count PNGs plus manifest.jsonl (and vocab.txt) under out_dir.
DatasetManifest write_synthetic_dataset(const std::filesystem::path& out_dir, std::uint64_t seed, std::int64_t count,
                                        std::int64_t resolution, std::string split = "train",
                                        std::uint64_t first_index = 0);

struct Example {
  Tensor image;  // [side, side, 3]
  std::string caption;
  std::int64_t class_id = 0;
};

enum class MissingFilePolicy { skip_with_warning, fail_fast };

// Reads the manifest in order, resizing each image to resolution with
// nearest-neighbour sampling.
std::vector<Example> ingest_folder(const std::filesystem::path& manifest_path, std::int64_t resolution,
                                   MissingFilePolicy policy = MissingFilePolicy::fail_fast);

class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual Example get(std::uint64_t index, std::int64_t resolution) const = 0;
  virtual std::string describe() const = 0;
};

class SyntheticSource final : public DataSource {
 public:
  explicit SyntheticSource(std::uint64_t seed) : seed_(seed) {}
  Example get(std::uint64_t index, std::int64_t resolution) const override;
  std::string describe() const override;

 private:
  std::uint64_t seed_;
};

// Cycles through a manifest; images are decoded once and resized per request.
class FolderSource final : public DataSource {
 public:
  explicit FolderSource(const std::filesystem::path& manifest_path,
                        MissingFilePolicy policy = MissingFilePolicy::fail_fast);
  Example get(std::uint64_t index, std::int64_t resolution) const override;
  std::string describe() const override;
  std::size_t size() const { return images_.size(); }

 private:
  std::filesystem::path manifest_path_;
  std::vector<Image8> images_;
  std::vector<ManifestEntry> entries_;
};

}  // namespace clipa
