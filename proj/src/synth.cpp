#include "clipa/synth.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <png.h>

#include <nlohmann/json.hpp>

#include "clipa/rng.hpp"

namespace clipa {

namespace fs = std::filesystem;

std::string class_name(std::int64_t class_id) {
  if (class_id < 0 || class_id >= kNumClasses) throw DataError("class id " + std::to_string(class_id) + " out of range");
  return std::string(kColorNames[class_id % 4]) + " " + std::string(kShapeNames[class_id / 4]);
}

std::vector<std::string> class_names() {
  std::vector<std::string> names;
  for (std::int64_t c = 0; c < kNumClasses; ++c) names.push_back(class_name(c));
  return names;
}

std::string caption_for_class(std::int64_t class_id) { return "a photo of a " + class_name(class_id); }

// --- images -------------------------------------------------------------------

Tensor to_tensor(const Image8& image) {
  std::vector<double> values(image.rgb.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(image.rgb[i]) / 255.0;
  return Tensor::from({image.height, image.width, 3}, std::move(values));
}

Image8 resize_nearest(const Image8& image, std::int64_t side) {
  if (side < 1) throw DataError("resize target must be >= 1");
  if (image.height == side && image.width == side) return image;
  Image8 out{side, side, std::vector<std::uint8_t>(static_cast<std::size_t>(side * side * 3))};
  for (std::int64_t y = 0; y < side; ++y) {
    const std::int64_t sy = y * image.height / side;
    for (std::int64_t x = 0; x < side; ++x) {
      const std::int64_t sx = x * image.width / side;
      for (int c = 0; c < 3; ++c) out.rgb[(y * side + x) * 3 + c] = image.rgb[(sy * image.width + sx) * 3 + c];
    }
  }
  return out;
}

std::uint64_t image_hash(const Image8& image) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(image.rgb.data()), image.rgb.size()));
}

void write_png(const fs::path& path, const Image8& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.rgb.data(), 0, nullptr)) {
    throw DataError("failed to write " + path.string() + ": " + png.message);
  }
}

Image8 read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw DataError("cannot read " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  Image8 out{static_cast<std::int64_t>(png.height), static_cast<std::int64_t>(png.width), {}};
  out.rgb.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, out.rgb.data(), 0, nullptr)) {
    throw DataError("corrupt image " + path.string() + ": " + png.message);
  }
  return out;
}

// --- generation ---------------------------------------------------------------

namespace {

constexpr std::array<std::array<double, 3>, 4> kPalette = {{
    {0.90, 0.15, 0.15},  // red
    {0.15, 0.80, 0.20},  // green
    {0.15, 0.30, 0.95},  // blue
    {0.95, 0.90, 0.15},  // yellow
}};

// Sample streams are even, per-block class permutations use odd streams.
std::int64_t balanced_class(std::uint64_t seed, std::uint64_t index) {
  std::array<std::int64_t, kNumClasses> order{};
  std::iota(order.begin(), order.end(), 0);
  CounterRng rng(seed, (index / kNumClasses) * 2 + 1);
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  return order[index % kNumClasses];
}

bool inside(std::size_t shape, double dx, double dy, double s) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= s * s;
    case 1: return std::abs(dx) <= 0.85 * s && std::abs(dy) <= 0.85 * s;
    case 2: return dy >= -s && dy <= s && std::abs(dx) <= 0.5 * (dy + s);  // apex up
    default: {
      const double arm = 0.3 * s;
      return (std::abs(dx) <= arm && std::abs(dy) <= s) || (std::abs(dy) <= arm && std::abs(dx) <= s);
    }
  }
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

SyntheticSample gen_sample(std::uint64_t seed, std::uint64_t index, std::int64_t resolution) {
  if (resolution < kMinResolution) {
    throw DataError("synthetic resolution must be >= " + std::to_string(kMinResolution) + ", got " +
                    std::to_string(resolution));
  }
  const std::int64_t class_id = balanced_class(seed, index);
  const auto shape = static_cast<std::size_t>(class_id / 4);
  const auto color = kPalette[class_id % 4];

  CounterRng rng(seed, index * 2);
  const double cx = rng.uniform(0.3, 0.7);
  const double cy = rng.uniform(0.3, 0.7);
  const double size = rng.uniform(0.22, 0.32);
  const double shade = rng.uniform(-0.05, 0.05);

  Image8 img{resolution, resolution, std::vector<std::uint8_t>(static_cast<std::size_t>(resolution * resolution * 3))};
  const double inv = 1.0 / static_cast<double>(resolution);
  for (std::int64_t y = 0; y < resolution; ++y)
    for (std::int64_t x = 0; x < resolution; ++x) {
      const double px = (static_cast<double>(x) + 0.5) * inv, py = (static_cast<double>(y) + 0.5) * inv;
      const bool fg = inside(shape, px - cx, py - cy, size);
      for (int c = 0; c < 3; ++c) {
        const double noise = rng.uniform();
        const double v = fg ? color[c] + shade + 0.1 * (noise - 0.5) : 0.3 * noise;
        img.rgb[(y * resolution + x) * 3 + c] = quantize(v);
      }
    }
  SyntheticSample s;
  s.image = to_tensor(img);
  s.pixels = std::move(img);
  s.caption = caption_for_class(class_id);
  s.class_id = class_id;
  return s;
}

// --- tokenizer ------------------------------------------------------------------

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<std::int64_t>(i)).second) {
      throw DataError("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
  auto pad = index_.find(std::string(kPad));
  auto unk = index_.find(std::string(kUnk));
  if (pad == index_.end() || unk == index_.end()) throw DataError("vocabulary must contain <pad> and <unk>");
  pad_ = pad->second;
  unk_ = unk->second;
}

Vocab Vocab::synthetic() {
  std::vector<std::string> words = {std::string(kPad), std::string(kUnk), "a", "photo", "of"};
  for (auto c : kColorNames) words.emplace_back(c);
  for (auto s : kShapeNames) words.emplace_back(s);
  return Vocab(std::move(words));
}

Vocab Vocab::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  std::vector<std::string> words;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) words.push_back(line);
  return Vocab(std::move(words));
}

void Vocab::save(const fs::path& path) const {
  std::ofstream out(path);
  for (const auto& w : words_) out << w << '\n';
  if (!out) throw DataError("cannot write vocabulary " + path.string());
}

std::int64_t Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? unk_ : it->second;
}

const std::string& Vocab::word(std::int64_t id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<std::int64_t> word_tokenizer(std::string_view caption, const Vocab& vocab) {
  std::string lowered(caption);
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::istringstream words(lowered);
  std::vector<std::int64_t> ids;
  for (std::string w; words >> w;) ids.push_back(vocab.id(w));
  return ids;
}

std::string detokenize(const std::vector<std::int64_t>& ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    if (id == vocab.pad_id()) continue;
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

// --- manifests ------------------------------------------------------------------

DatasetManifest DatasetManifest::load(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest " + manifest_path.string());
  DatasetManifest m;
  m.root = manifest_path.parent_path();
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.image = j.at("image").get<std::string>();
      e.caption = j.at("caption").get<std::string>();
      e.class_id = j.value("class_id", std::int64_t{0});
      e.class_name = j.value("class_name", std::string());
      e.split = j.value("split", std::string("train"));
      if (e.class_id < 0) throw DataError("negative class id");
      m.entries.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw DataError(manifest_path.string() + ":" + std::to_string(line_no) + ": malformed entry (" + ex.what() + ")");
    }
  }
  return m;
}

void DatasetManifest::save(const fs::path& manifest_path) const {
  std::ofstream out(manifest_path, std::ios::trunc);
  for (const auto& e : entries) {
    nlohmann::json j = {{"image", e.image},           {"caption", e.caption}, {"class_id", e.class_id},
                        {"class_name", e.class_name}, {"split", e.split}};
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("cannot write manifest " + manifest_path.string());
}

DatasetManifest write_synthetic_dataset(const fs::path& out_dir, std::uint64_t seed, std::int64_t count,
                                        std::int64_t resolution, std::string split, std::uint64_t first_index) {
  if (count < 0) throw DataError("count must be non-negative");
  fs::create_directories(out_dir / "images");
  DatasetManifest m;
  m.root = out_dir;
  for (std::int64_t i = 0; i < count; ++i) {
    const std::uint64_t index = first_index + static_cast<std::uint64_t>(i);
    const SyntheticSample s = gen_sample(seed, index, resolution);
    char name[32];
    std::snprintf(name, sizeof name, "%08llu.png", static_cast<unsigned long long>(index));
    const std::string rel = std::string("images/") + name;
    write_png(out_dir / rel, s.pixels);
    m.entries.push_back({rel, s.caption, s.class_id, class_name(s.class_id), split});
  }
  m.save(out_dir / "manifest.jsonl");
  Vocab::synthetic().save(out_dir / "vocab.txt");
  return m;
}

std::vector<Example> ingest_folder(const fs::path& manifest_path, std::int64_t resolution, MissingFilePolicy policy) {
  const DatasetManifest m = DatasetManifest::load(manifest_path);
  std::vector<Example> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    Image8 img;
    try {
      img = read_png(m.root / e.image);
    } catch (const DataError& err) {
      if (policy == MissingFilePolicy::fail_fast) throw;
      std::cerr << "warning: skipping " << e.image << ": " << err.what() << '\n';
      continue;
    }
    out.push_back({to_tensor(resize_nearest(img, resolution)), e.caption, e.class_id});
  }
  return out;
}

// --- sources ----------------------------------------------------------------------

Example SyntheticSource::get(std::uint64_t index, std::int64_t resolution) const {
  SyntheticSample s = gen_sample(seed_, index, resolution);
  return {std::move(s.image), std::move(s.caption), s.class_id};
}

std::string SyntheticSource::describe() const { return "synthetic(seed=" + std::to_string(seed_) + ")"; }

FolderSource::FolderSource(const fs::path& manifest_path, MissingFilePolicy policy) : manifest_path_(manifest_path) {
  const DatasetManifest m = DatasetManifest::load(manifest_path);
  for (const auto& e : m.entries) {
    try {
      images_.push_back(read_png(m.root / e.image));
      entries_.push_back(e);
    } catch (const DataError& err) {
      if (policy == MissingFilePolicy::fail_fast) throw;
      std::cerr << "warning: skipping " << e.image << ": " << err.what() << '\n';
    }
  }
  if (images_.empty()) throw DataError("manifest " + manifest_path.string() + " has no usable entries");
}

Example FolderSource::get(std::uint64_t index, std::int64_t resolution) const {
  const std::size_t i = index % images_.size();
  return {to_tensor(resize_nearest(images_[i], resolution)), entries_[i].caption, entries_[i].class_id};
}

std::string FolderSource::describe() const { return "folder(" + manifest_path_.string() + ")"; }

}  // namespace clipa
