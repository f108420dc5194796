#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "clipa/checkpoint.hpp"
#include "clipa/cost.hpp"
#include "support.hpp"

using namespace clipa;
using clipa::testing::random_tensor;

namespace {

double norm(const Tensor& v) {
  double s = 0.0;
  for (double x : v.data()) s += x * x;
  return std::sqrt(s);
}

bool same(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && std::ranges::equal(a.data(), b.data()); }

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("clipa_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

ClipModel small_model(bool class_token = false, std::uint64_t seed = 3) {
  ClipConfig cfg = clip_preset("toy-tiny", 16, 6);
  cfg.image.use_class_token = class_token;
  return ClipModel::init(cfg, seed);
}

}  // namespace

TEST_CASE("tokens_for_resolution") {
  CHECK(tokens_for_resolution(84, 14) == 36);
  CHECK(tokens_for_resolution(224, 14) == 256);
  CHECK(tokens_for_resolution(70, 14) == 25);
  CHECK(tokens_for_resolution(336, 14) == 576);
  CHECK_THROWS_AS(tokens_for_resolution(100, 14), ResolutionError);
}

TEST_CASE("presets are valid and cover the named shapes") {
  for (const auto& name : clip_preset_names()) {
    CAPTURE(name);
    const ClipConfig c = clip_preset(name);
    CHECK_NOTHROW(c.image.validate());
    CHECK_NOTHROW(c.text.validate());
    CHECK(c.image.embed_dim == c.text.embed_dim);
  }
  CHECK(clip_preset("H14").image.patch_size == 14);
  CHECK(clip_preset("B16").image.patch_size == 16);
  CHECK_THROWS_AS(clip_preset("Z99"), ConfigError);
}

TEST_CASE("patchify examples") {
  CounterRng rng(1, 0);
  const Tensor one = random_tensor({14, 14, 3}, rng, 1.0, false);
  const Tensor p1 = patchify(one, 14);
  CHECK(p1.shape() == Shape{1, 588});
  CHECK(std::ranges::equal(p1.data(), one.data()));

  // Each 14x14 quadrant filled with its own constant.
  std::vector<double> v(28 * 28 * 3);
  for (std::int64_t y = 0; y < 28; ++y)
    for (std::int64_t x = 0; x < 28; ++x)
      for (std::int64_t c = 0; c < 3; ++c) v[static_cast<std::size_t>((y * 28 + x) * 3 + c)] = static_cast<double>((y / 14) * 2 + x / 14);
  const Tensor p4 = patchify(Tensor::from({28, 28, 3}, v), 14);
  CHECK(p4.shape() == Shape{4, 588});
  for (std::int64_t t = 0; t < 4; ++t)
    for (std::int64_t k = 0; k < 588; ++k) REQUIRE(p4.at({t, k}) == static_cast<double>(t));

  CHECK_THROWS_AS(patchify(Tensor::zeros({15, 14, 3}), 14), ResolutionError);
}

TEST_CASE("patchify round trip is lossless") {
  PrecisionScope f64(Precision::f64);
  CounterRng rng(2, 0);
  for (std::int64_t p : {1, 2, 4, 8}) {
    const Tensor img = random_tensor({16, 8, 3}, rng, 1.0, false);
    CHECK(same(unpatchify(patchify(img, p), 16, 8, p), img));
  }
}

TEST_CASE("patchify_batch stacks per-image patches") {
  CounterRng rng(4, 0);
  std::vector<Tensor> imgs = {random_tensor({8, 8, 3}, rng, 1.0, false), random_tensor({8, 8, 3}, rng, 1.0, false)};
  const Tensor b = patchify_batch(imgs, 4);
  CHECK(b.shape() == Shape{8, 48});
  const Tensor second = patchify(imgs[1], 4);
  for (std::int64_t r = 0; r < 4; ++r)
    for (std::int64_t k = 0; k < 48; ++k) REQUIRE(b.at({4 + r, k}) == second.at({r, k}));
}

TEST_CASE("image and text embeddings are unit norm") {
  const ClipModel m = small_model();
  CounterRng rng(5, 0);
  const std::int64_t g = m.image.grid;
  const Tensor patches = random_tensor({g * g, m.image.config.patch_dim()}, rng, 1.0, false);
  for (double r : {0.0, 0.5, 0.75}) {
    const Tensor e = vit_forward(m.image, patches, make_random_mask(g, g, r, 1, 0));
    CHECK(e.shape() == Shape{m.image.config.embed_dim});
    CHECK(std::abs(norm(e) - 1.0) <= 1e-5);
  }
  const Tensor t = text_forward(m.text, truncate_text({1, 2, 3}, 6, 0));
  CHECK(std::abs(norm(t) - 1.0) <= 1e-5);
}

TEST_CASE("masking details do not leak into the output") {
  for (bool cls : {false, true}) {
    CAPTURE(cls);
    const ClipModel m = small_model(cls);
    CounterRng rng(6, 0);
    const std::int64_t g = m.image.grid, pd = m.image.config.patch_dim();
    const Tensor patches = random_tensor({g * g, pd}, rng, 1.0, false);
    CHECK(same(vit_forward(m.image, patches, make_full_mask(g, g)),
               vit_forward(m.image, patches, make_random_mask(g, g, 0.0, 9, 9))));

    const TokenMask mask = make_random_mask(g, g, 0.5, 2, 0);
    std::vector<double> scrambled(patches.data().begin(), patches.data().end());
    std::vector<bool> kept(static_cast<std::size_t>(g * g), false);
    for (auto k : mask.kept) kept[static_cast<std::size_t>(k)] = true;
    for (std::int64_t r = 0; r < g * g; ++r)
      if (!kept[static_cast<std::size_t>(r)])
        for (std::int64_t k = 0; k < pd; ++k) scrambled[static_cast<std::size_t>(r * pd + k)] = rng.normal() * 5.0;
    CHECK(same(vit_forward(m.image, patches, mask), vit_forward(m.image, Tensor::from({g * g, pd}, scrambled), mask)));
  }
}

TEST_CASE("padding and truncation do not affect text output") {
  const ClipModel m = small_model();
  TruncatedText a = truncate_text({4, 5}, 6, 0);
  TruncatedText b = a;
  b.ids[4] = 9;
  b.ids[5] = 3;
  CHECK(same(text_forward(m.text, a), text_forward(m.text, b)));
  CHECK(same(text_forward(m.text, truncate_text({1, 2, 3, 4, 5, 6, 7, 8}, 6, 0)),
             text_forward(m.text, truncate_text({1, 2, 3, 4, 5, 6, 11, 12, 13}, 6, 0))));
  CHECK_THROWS_AS(text_forward(m.text, truncate_text({16}, 6, 0)), std::out_of_range);
  CHECK_THROWS_AS(text_forward(m.text, truncate_text({1}, 7, 0)), DimensionError);
}

TEST_CASE("batched encoders equal per-sample forwards") {
  const ClipModel m = small_model();
  CounterRng rng(8, 0);
  const std::int64_t g = m.image.grid, pd = m.image.config.patch_dim();
  const Tensor patches = random_tensor({3 * g * g, pd}, rng, 1.0, false);
  std::vector<TokenMask> masks;
  for (std::uint64_t i = 0; i < 3; ++i) masks.push_back(make_random_mask(g, g, 0.5, 1, i));
  const Tensor batch = encode_images(m.image, patches, masks);
  for (std::int64_t b = 0; b < 3; ++b) {
    const std::vector<std::int64_t> rows = [&] {
      std::vector<std::int64_t> r(static_cast<std::size_t>(g * g));
      std::iota(r.begin(), r.end(), b * g * g);
      return r;
    }();
    const Tensor one = vit_forward(m.image, gather_rows(patches, rows), masks[static_cast<std::size_t>(b)]);
    for (std::int64_t k = 0; k < one.dim(0); ++k) CHECK(batch.at({b, k}) == doctest::Approx(one.at({k})).epsilon(1e-6));
  }
}

TEST_CASE("resize_pos_embed identity and constants") {
  CounterRng rng(10, 0);
  const Tensor pos = random_tensor({16, 5}, rng, 1.0, false);
  CHECK(same(resize_pos_embed(pos, 4), pos));
  const Tensor c = Tensor::full({9, 3}, 0.25);
  for (std::int64_t g : {1, 2, 5, 7}) {
    const Tensor r = resize_pos_embed(c, g);
    CHECK(r.shape() == Shape{g * g, 3});
    for (double v : r.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }
  CHECK_THROWS_AS(resize_pos_embed(pos, 0), ResolutionError);
  CHECK_THROWS_AS(resize_pos_embed(Tensor::zeros({6, 2}), 3), DimensionError);
}

TEST_CASE("resize_pos_embed reproduces a linear ramp") {
  PrecisionScope f64(Precision::f64);
  // value(y, x, c) = a_c*y + b_c*x + c_c on the source grid; align-corners
  // sampling maps target (i, j) to source (i*(g-1)/(g'-1), j*(g-1)/(g'-1)).
  const double a[] = {1.0, -0.5}, b[] = {2.0, 0.25}, c0[] = {0.1, 3.0};
  for (auto [g, gp] : std::vector<std::pair<std::int64_t, std::int64_t>>{{2, 4}, {3, 5}, {4, 7}, {5, 3}}) {
    std::vector<double> v;
    for (std::int64_t y = 0; y < g; ++y)
      for (std::int64_t x = 0; x < g; ++x)
        for (int ch = 0; ch < 2; ++ch) v.push_back(a[ch] * y + b[ch] * x + c0[ch]);
    const Tensor r = resize_pos_embed(Tensor::from({g * g, 2}, v), gp);
    const double s = static_cast<double>(g - 1) / static_cast<double>(gp - 1);
    for (std::int64_t i = 0; i < gp; ++i)
      for (std::int64_t j = 0; j < gp; ++j)
        for (int ch = 0; ch < 2; ++ch)
          CHECK(r.at({i * gp + j, ch}) == doctest::Approx(a[ch] * i * s + b[ch] * j * s + c0[ch]).epsilon(1e-12));
  }
}

TEST_CASE("resize_pos_embed passes a class row through") {
  CounterRng rng(12, 0);
  const Tensor pos = random_tensor({1 + 9, 4}, rng, 1.0, false);
  const Tensor r = resize_pos_embed(pos, 5);
  CHECK(r.shape() == Shape{26, 4});
  for (std::int64_t k = 0; k < 4; ++k) CHECK(r.at({0, k}) == pos.at({0, k}));
  const Tensor nn = resize_pos_embed(pos, 3, ResizeMode::nearest);
  CHECK(same(nn, pos));
}

TEST_CASE("set_resolution resizes the grid once") {
  ClipModel m = small_model();
  CHECK(m.image.grid == 8);
  CHECK(m.image.set_resolution(16));
  CHECK(m.image.grid == 4);
  CHECK(m.image.pos.shape() == Shape{16, m.image.config.width});
  CHECK_FALSE(m.image.set_resolution(16));
  CHECK_THROWS_AS(m.image.set_resolution(18), ResolutionError);
}

TEST_CASE("measured MACs equal the analytical FLOPs") {
  for (bool cls : {false, true}) {
    for (const char* preset : {"toy-tiny", "toy-small", "toy-base"}) {
      CAPTURE(preset);
      CAPTURE(cls);
      ClipConfig cfg = clip_preset(preset, 20, 8);
      cfg.image.use_class_token = cls;
      ClipModel m = ClipModel::init(cfg, 1);
      CounterRng rng(13, 0);
      for (std::int64_t side : {16, 32}) {
        m.image.set_resolution(side);
        const std::int64_t g = m.image.grid;
        for (double r : {0.0, 0.3, 0.5}) {
          const std::int64_t batch = 2;
          const Tensor patches = random_tensor({batch * g * g, cfg.image.patch_dim()}, rng, 1.0, false);
          std::vector<TokenMask> masks;
          for (std::uint64_t i = 0; i < batch; ++i) masks.push_back(make_random_mask(g, g, r, 0, i));
          std::vector<TruncatedText> texts(batch, truncate_text({1, 2, 3}, 8, 0));
          NoGradScope ng;
          reset_mac_counter();
          const Tensor img = encode_images(m.image, patches, masks);
          const std::int64_t image_macs = mac_counter();
          reset_mac_counter();
          const Tensor txt = encode_texts(m.text, texts);
          const std::int64_t text_macs = mac_counter();
          CHECK(image_macs == batch * encoder_flops(cfg.image, image_sequence_length(cfg.image, side, r)));
          CHECK(text_macs == batch * encoder_flops(cfg.text, 8));
          CHECK(image_macs + text_macs == batch * training_flops_per_sample(cfg.image, cfg.text, side, r, 8));
        }
      }
    }
  }
}

TEST_CASE("vit cost strictly decreases with the mask ratio") {
  const ClipModel m = small_model();
  CounterRng rng(14, 0);
  const std::int64_t g = m.image.grid;
  const Tensor patches = random_tensor({g * g, m.image.config.patch_dim()}, rng, 1.0, false);
  std::int64_t previous = std::numeric_limits<std::int64_t>::max();
  for (double r : {0.0, 0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9}) {
    NoGradScope ng;
    reset_mac_counter();
    (void)vit_forward(m.image, patches, make_random_mask(g, g, r, 0, 0));
    CHECK(mac_counter() < previous);
    previous = mac_counter();
  }
}

TEST_CASE("end-to-end contrastive loss gradient") {
  for (std::uint64_t seed : {1, 2}) {
    CAPTURE(seed);
    CHECK(clipa::testing::end_to_end_grad_error(seed, false) <= 1e-4);
  }
  CHECK(clipa::testing::end_to_end_grad_error(3, true) <= 1e-4);
}

TEST_CASE("init and forward are deterministic") {
  const ClipModel a = small_model(false, 21), b = small_model(false, 21), c = small_model(false, 22);
  CHECK(a.digest() == b.digest());
  CHECK(a.digest() != c.digest());
  CounterRng rng(15, 0);
  const std::int64_t g = a.image.grid;
  const Tensor patches = random_tensor({g * g, a.image.config.patch_dim()}, rng, 1.0, false);
  const TokenMask mask = make_random_mask(g, g, 0.5, 0, 0);
  CHECK(same(vit_forward(a.image, patches, mask), vit_forward(b.image, patches, mask)));
  CHECK(std::abs(a.logit_scale() - 1.0 / 0.07) < 1e-4);
}

TEST_CASE("logit scale clamp") {
  ClipModel m = small_model();
  m.log_logit_scale.mutable_data()[0] = 10.0;
  m.clamp_logit_scale();
  CHECK(m.logit_scale() == doctest::Approx(100.0));
  m.log_logit_scale.mutable_data()[0] = -3.0;
  m.clamp_logit_scale();
  CHECK(m.logit_scale() == doctest::Approx(1.0));
}

TEST_CASE("clone_model copies values into fresh storage") {
  ClipModel a = small_model();
  a.image.set_resolution(16);
  ClipModel b = clone_model(a);
  CHECK(b.digest() == a.digest());
  CHECK(b.image.grid == a.image.grid);
  b.image.proj.mutable_data()[0] += 1.0;
  CHECK(b.digest() != a.digest());
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = temp_dir("ckpt");
  for (bool cls : {false, true}) {
    ClipModel m = small_model(cls, 31);
    m.image.set_resolution(16);
    // A value that float32 cannot hold forces the float64 record path.
    m.text.proj.mutable_data()[1] = 0.1;
    save_checkpoint(dir / "m.ckpt", m);
    const ClipModel back = load_checkpoint(dir / "m.ckpt");
    CHECK(back.config() == m.config());
    CHECK(back.image.grid == 4);
    CHECK(back.digest() == m.digest());
    const auto pa = m.parameters(), pb = back.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].first == pb[i].first);
      CHECK(same(pa[i].second, pb[i].second));
    }
  }
}

TEST_CASE("checkpoint errors") {
  const auto dir = temp_dir("ckpt_bad");
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
  {
    std::ofstream(dir / "junk.ckpt") << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), CheckpointError);

  save_checkpoint(dir / "good.ckpt", small_model());
  const auto size = std::filesystem::file_size(dir / "good.ckpt");
  std::filesystem::copy_file(dir / "good.ckpt", dir / "short.ckpt");
  std::filesystem::resize_file(dir / "short.ckpt", size / 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), CheckpointError);

  std::filesystem::copy_file(dir / "good.ckpt", dir / "flip.ckpt");
  {
    std::fstream f(dir / "flip.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(30);  // inside the config JSON
    f.put('#');
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "flip.ckpt"), CheckpointError);
}

TEST_CASE("model config json") {
  const ClipConfig c = clip_preset("toy-small", 40, 8);
  CHECK(clip_config_from_json(to_json(c)) == c);
  nlohmann::json j = to_json(c);
  j["image"]["depth"] = 3;
  try {
    (void)clip_config_from_json(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("depth") != std::string::npos);
  }
  nlohmann::json bad = to_json(c);
  bad["image"]["heads"] = 5;
  CHECK_THROWS_AS(clip_config_from_json(bad), ConfigError);
}
