#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "clipa/synth.hpp"

using namespace clipa;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("clipa_synth_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("samples are deterministic in seed and index") {
  const SyntheticSample a = gen_sample(3, 17, 32), b = gen_sample(3, 17, 32);
  CHECK(a.pixels == b.pixels);
  CHECK(a.caption == b.caption);
  CHECK(a.class_id == b.class_id);
  CHECK_FALSE(gen_sample(3, 18, 32).pixels == a.pixels);
  CHECK_FALSE(gen_sample(4, 17, 32).pixels == a.pixels);
  CHECK_THROWS_AS(gen_sample(0, 0, 15), DataError);
}

// Frozen from the reference implementation; a change here means every
// dataset generated so far is different.
TEST_CASE("golden sample hashes") {
  const SyntheticSample s = gen_sample(0, 0, 64);
  CHECK(image_hash(s.pixels) == 0xed25de802c843ab1ULL);
  CHECK(s.class_id == 12);
  CHECK(s.caption == "a photo of a red cross");
  CHECK(image_hash(gen_sample(0, 1, 32).pixels) == 0x9c102a520677c4afULL);
  CHECK(image_hash(gen_sample(7, 3, 16).pixels) == 0x4c293b9b6b584293ULL);
}

TEST_CASE("sample contents") {
  for (std::uint64_t i = 0; i < 64; ++i) {
    const SyntheticSample s = gen_sample(1, i, 16);
    CHECK(s.image.shape() == Shape{16, 16, 3});
    for (double v : s.image.data()) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
    CHECK(s.caption == caption_for_class(s.class_id));
    CHECK(s.class_id >= 0);
    CHECK(s.class_id < kNumClasses);
  }
}

TEST_CASE("captions determine the class") {
  std::set<std::string> captions;
  for (std::int64_t c = 0; c < kNumClasses; ++c) captions.insert(caption_for_class(c));
  CHECK(captions.size() == static_cast<std::size_t>(kNumClasses));
  CHECK(class_name(0) == "red circle");
  CHECK(class_name(5) == "green square");
  CHECK_THROWS_AS(class_name(16), DataError);
}

TEST_CASE("class frequencies are uniform") {
  std::vector<int> counts(kNumClasses, 0);
  const int n = 16000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(gen_sample(11, static_cast<std::uint64_t>(i), 16).class_id)];
  for (int c : counts) CHECK(std::abs(static_cast<double>(c) / n - 1.0 / kNumClasses) <= 0.02);
}

TEST_CASE("tokenizer") {
  const Vocab v = Vocab::synthetic();
  CHECK(word_tokenizer("a red circle", v) == std::vector<std::int64_t>{v.id("a"), v.id("red"), v.id("circle")});
  CHECK(word_tokenizer("A  Red\tCIRCLE", v) == word_tokenizer("a red circle", v));
  CHECK(word_tokenizer("a purple circle", v)[1] == v.unk_id());
  CHECK(v.id("<pad>") == v.pad_id());
  CHECK(v.pad_id() != v.unk_id());
  for (std::int64_t c = 0; c < kNumClasses; ++c) {
    const auto ids = word_tokenizer(caption_for_class(c), v);
    CHECK(ids.size() <= 8);
    CHECK(detokenize(ids, v) == caption_for_class(c));
  }
  CHECK(word_tokenizer("", v).empty());
  CHECK_THROWS_AS(v.word(99), std::out_of_range);
}

TEST_CASE("vocab file round trip") {
  const auto dir = temp_dir("vocab");
  const Vocab v = Vocab::synthetic();
  v.save(dir / "vocab.txt");
  const Vocab back = Vocab::load(dir / "vocab.txt");
  CHECK(back.words() == v.words());
  CHECK(back.id("cross") == v.id("cross"));
}

TEST_CASE("nearest resize matches the index mapping") {
  const SyntheticSample s = gen_sample(0, 0, 64);
  const Image8 half = resize_nearest(s.pixels, 32);
  for (std::int64_t y = 0; y < 32; ++y)
    for (std::int64_t x = 0; x < 32; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        REQUIRE(half.rgb[static_cast<std::size_t>((y * 32 + x) * 3 + c)] ==
                s.pixels.rgb[static_cast<std::size_t>((2 * y * 64 + 2 * x) * 3 + c)]);
  CHECK(resize_nearest(s.pixels, 64) == s.pixels);
  const Image8 up = resize_nearest(gen_sample(0, 0, 16).pixels, 48);
  CHECK(up.rgb[0] == gen_sample(0, 0, 16).pixels.rgb[0]);
}

TEST_CASE("png round trip") {
  const auto dir = temp_dir("png");
  const SyntheticSample s = gen_sample(2, 5, 32);
  write_png(dir / "x.png", s.pixels);
  CHECK(read_png(dir / "x.png") == s.pixels);
  {
    std::ofstream(dir / "bad.png") << "nope";
  }
  CHECK_THROWS_AS(read_png(dir / "bad.png"), DataError);
  CHECK_THROWS_AS(read_png(dir / "missing.png"), DataError);
}

TEST_CASE("synthetic dataset on disk") {
  const auto dir = temp_dir("ds");
  const DatasetManifest m = write_synthetic_dataset(dir, 4, 3, 32, "train", 10);
  REQUIRE(m.entries.size() == 3);
  const DatasetManifest back = DatasetManifest::load(dir / "manifest.jsonl");
  REQUIRE(back.entries.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const SyntheticSample s = gen_sample(4, 10 + i, 32);
    CHECK(back.entries[i].caption == s.caption);
    CHECK(back.entries[i].class_id == s.class_id);
    CHECK(back.entries[i].split == "train");
    CHECK(read_png(dir / back.entries[i].image) == s.pixels);
  }
  CHECK(std::filesystem::exists(dir / "vocab.txt"));

  const auto examples = ingest_folder(dir / "manifest.jsonl", 16);
  REQUIRE(examples.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(examples[i].caption == back.entries[i].caption);
    CHECK(examples[i].image.shape() == Shape{16, 16, 3});
    const Tensor expected = to_tensor(resize_nearest(gen_sample(4, 10 + i, 32).pixels, 16));
    CHECK(std::ranges::equal(examples[i].image.data(), expected.data()));
  }

  const FolderSource src(dir / "manifest.jsonl");
  CHECK(src.size() == 3);
  CHECK(src.get(4, 16).caption == examples[1].caption);
}

TEST_CASE("ingest edge cases") {
  const auto dir = temp_dir("ingest");
  {
    std::ofstream(dir / "empty.jsonl");
  }
  CHECK(ingest_folder(dir / "empty.jsonl", 16).empty());
  CHECK_THROWS_AS(FolderSource(dir / "empty.jsonl"), DataError);

  write_synthetic_dataset(dir, 0, 3, 16);
  std::filesystem::remove(dir / DatasetManifest::load(dir / "manifest.jsonl").entries[1].image);
  CHECK_THROWS_AS(ingest_folder(dir / "manifest.jsonl", 16), DataError);
  const auto kept = ingest_folder(dir / "manifest.jsonl", 16, MissingFilePolicy::skip_with_warning);
  CHECK(kept.size() == 2);

  {
    std::ofstream(dir / "broken.jsonl") << "{\"image\": 3}\n";
  }
  CHECK_THROWS_AS(DatasetManifest::load(dir / "broken.jsonl"), DataError);
  CHECK_THROWS_AS(DatasetManifest::load(dir / "nowhere.jsonl"), DataError);
}
