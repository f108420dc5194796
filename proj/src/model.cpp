#include "clipa/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "clipa/rng.hpp"

namespace clipa {

using nlohmann::json;

// --- configuration ------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (layers < 1) fail("layers must be >= 1");
  if (width < 1 || heads < 1) fail("width and heads must be >= 1");
  if (width % heads != 0) fail("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (embed_dim < 1) fail("embed_dim must be >= 1");
  if (tower == Tower::image) {
    if (patch_size < 1) fail("patch_size must be >= 1");
    if (image_side < patch_size || image_side % patch_size != 0) {
      fail("image_side " + std::to_string(image_side) + " not divisible by patch_size " + std::to_string(patch_size));
    }
  } else {
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (context_length < 1) fail("context_length must be >= 1");
  }
}

json to_json(const ModelConfig& c) {
  json j = {{"layers", c.layers}, {"width", c.width}, {"heads", c.heads}, {"mlp_ratio", c.mlp_ratio},
            {"embed_dim", c.embed_dim}};
  if (c.tower == Tower::image) {
    j["patch_size"] = c.patch_size;
    j["image_side"] = c.image_side;
    j["use_class_token"] = c.use_class_token;
  } else {
    j["vocab_size"] = c.vocab_size;
    j["context_length"] = c.context_length;
  }
  return j;
}

ModelConfig model_config_from_json(const json& j, Tower tower) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  ModelConfig c;
  c.tower = tower;
  for (const auto& [key, value] : j.items()) {
    if (key == "layers") c.layers = value.get<std::int64_t>();
    else if (key == "width") c.width = value.get<std::int64_t>();
    else if (key == "heads") c.heads = value.get<std::int64_t>();
    else if (key == "mlp_ratio") c.mlp_ratio = value.get<std::int64_t>();
    else if (key == "embed_dim") c.embed_dim = value.get<std::int64_t>();
    else if (tower == Tower::image && key == "patch_size") c.patch_size = value.get<std::int64_t>();
    else if (tower == Tower::image && key == "image_side") c.image_side = value.get<std::int64_t>();
    else if (tower == Tower::image && key == "use_class_token") c.use_class_token = value.get<bool>();
    else if (tower == Tower::text && key == "vocab_size") c.vocab_size = value.get<std::int64_t>();
    else if (tower == Tower::text && key == "context_length") c.context_length = value.get<std::int64_t>();
    else throw ConfigError("unknown model config key '" + key + "'");
  }
  c.validate();
  return c;
}

json to_json(const ClipConfig& c) { return {{"image", to_json(c.image)}, {"text", to_json(c.text)}}; }

ClipConfig clip_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("clip config must be an object");
  for (const auto& [key, _] : j.items())
    if (key != "image" && key != "text") throw ConfigError("unknown clip config key '" + key + "'");
  if (!j.contains("image") || !j.contains("text")) throw ConfigError("clip config needs 'image' and 'text'");
  return {model_config_from_json(j.at("image"), Tower::image), model_config_from_json(j.at("text"), Tower::text)};
}

namespace {

ModelConfig image_cfg(std::int64_t layers, std::int64_t width, std::int64_t heads, std::int64_t patch,
                      std::int64_t side, std::int64_t embed, bool cls) {
  ModelConfig c;
  c.tower = Tower::image;
  c.layers = layers;
  c.width = width;
  c.heads = heads;
  c.patch_size = patch;
  c.image_side = side;
  c.embed_dim = embed;
  c.use_class_token = cls;
  return c;
}

ModelConfig text_cfg(std::int64_t layers, std::int64_t width, std::int64_t heads, std::int64_t embed,
                     std::int64_t vocab, std::int64_t context) {
  ModelConfig c;
  c.tower = Tower::text;
  c.layers = layers;
  c.width = width;
  c.heads = heads;
  c.embed_dim = embed;
  c.vocab_size = vocab;
  c.context_length = context;
  return c;
}

}  // namespace

std::vector<std::string> clip_preset_names() {
  return {"S16", "B16", "L16", "L14", "H14", "toy-tiny", "toy-small", "toy-base"};
}

ClipConfig clip_preset(std::string_view name, std::int64_t vocab_size, std::int64_t context_length) {
  // Paper-scale towers use the CLIP BPE vocabulary and 77-token context.
  constexpr std::int64_t kVocab = 49408, kContext = 77;
  if (name == "S16") return {image_cfg(12, 384, 6, 16, 224, 384, true), text_cfg(12, 384, 6, 384, kVocab, kContext)};
  if (name == "B16") return {image_cfg(12, 768, 12, 16, 224, 512, true), text_cfg(12, 512, 8, 512, kVocab, kContext)};
  if (name == "L16") return {image_cfg(24, 1024, 16, 16, 224, 768, true), text_cfg(12, 768, 12, 768, kVocab, kContext)};
  if (name == "L14") return {image_cfg(24, 1024, 16, 14, 224, 768, true), text_cfg(12, 768, 12, 768, kVocab, kContext)};
  if (name == "H14") return {image_cfg(32, 1280, 16, 14, 224, 1024, true), text_cfg(24, 1024, 16, 1024, kVocab, kContext)};

  const std::int64_t vocab = vocab_size > 0 ? vocab_size : 64;
  const std::int64_t context = context_length > 0 ? context_length : 8;
  if (name == "toy-tiny") return {image_cfg(2, 32, 2, 4, 32, 32, false), text_cfg(2, 32, 2, 32, vocab, context)};
  if (name == "toy-small") return {image_cfg(2, 64, 4, 4, 32, 64, false), text_cfg(2, 64, 4, 64, vocab, context)};
  if (name == "toy-base") return {image_cfg(4, 96, 4, 4, 32, 64, false), text_cfg(2, 64, 4, 64, vocab, context)};
  throw ConfigError("unknown model preset '" + std::string(name) + "'");
}

// --- geometry ----------------------------------------------------------------------

std::int64_t tokens_for_resolution(std::int64_t image_side, std::int64_t patch_size) {
  if (patch_size < 1 || image_side < 1 || image_side % patch_size != 0) {
    throw ResolutionError("image side " + std::to_string(image_side) + " is not divisible by patch size " +
                          std::to_string(patch_size));
  }
  const std::int64_t g = image_side / patch_size;
  return g * g;
}

Tensor patchify(const Tensor& image, std::int64_t patch_size) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("patchify: expected [H,W,3], got " + shape_str(image.shape()));
  const std::int64_t h = image.dim(0), w = image.dim(1), p = patch_size;
  if (p < 1 || h % p != 0 || w % p != 0) {
    throw ResolutionError("patchify: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " +
                          std::to_string(p));
  }
  const std::int64_t gh = h / p, gw = w / p, pd = p * p * 3;
  std::vector<double> out(static_cast<std::size_t>(image.numel()));
  const auto src = image.data();
  for (std::int64_t gy = 0; gy < gh; ++gy)
    for (std::int64_t gx = 0; gx < gw; ++gx) {
      double* dst = out.data() + (gy * gw + gx) * pd;
      for (std::int64_t y = 0; y < p; ++y) {
        const double* row = src.data() + ((gy * p + y) * w + gx * p) * 3;
        std::copy(row, row + p * 3, dst + y * p * 3);
      }
    }
  return Tensor::from({gh * gw, pd}, std::move(out));
}

Tensor patchify_batch(std::span<const Tensor> images, std::int64_t patch_size) {
  if (images.empty()) throw DimensionError("patchify_batch: empty batch");
  std::vector<double> out;
  Shape first;
  for (const auto& image : images) {
    if (first.empty()) first = image.shape();
    if (image.shape() != first) {
      throw DimensionError("patchify_batch: mixed image shapes " + shape_str(first) + " and " + shape_str(image.shape()));
    }
    const Tensor p = patchify(image, patch_size);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  const std::int64_t pd = patch_size * patch_size * 3;
  const auto rows = static_cast<std::int64_t>(out.size()) / pd;
  return Tensor::from({rows, pd}, std::move(out));
}

Tensor unpatchify(const Tensor& patches, std::int64_t height, std::int64_t width, std::int64_t patch_size) {
  const std::int64_t p = patch_size;
  if (p < 1 || height % p != 0 || width % p != 0) throw ResolutionError("unpatchify: extents not divisible by patch");
  const std::int64_t gh = height / p, gw = width / p, pd = p * p * 3;
  if (patches.rank() != 2 || patches.dim(0) != gh * gw || patches.dim(1) != pd) {
    throw DimensionError("unpatchify: patches " + shape_str(patches.shape()) + " do not match image");
  }
  std::vector<double> out(static_cast<std::size_t>(patches.numel()));
  const auto src = patches.data();
  for (std::int64_t gy = 0; gy < gh; ++gy)
    for (std::int64_t gx = 0; gx < gw; ++gx) {
      const double* from = src.data() + (gy * gw + gx) * pd;
      for (std::int64_t y = 0; y < p; ++y)
        std::copy(from + y * p * 3, from + (y + 1) * p * 3, out.data() + ((gy * p + y) * width + gx * p) * 3);
    }
  return Tensor::from({height, width, 3}, std::move(out));
}

Tensor resize_pos_embed(const Tensor& pos, std::int64_t new_grid, ResizeMode mode) {
  if (new_grid < 1) throw ResolutionError("resize_pos_embed: new grid must be >= 1");
  if (pos.rank() != 2) throw DimensionError("resize_pos_embed: expected [rows, d], got " + shape_str(pos.shape()));
  const std::int64_t rows = pos.dim(0), d = pos.dim(1);
  auto side = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(rows))));
  std::int64_t extra = 0;
  if (side * side != rows) {
    side = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(rows - 1))));
    extra = 1;
    if (side * side + 1 != rows) throw DimensionError("resize_pos_embed: " + std::to_string(rows) + " rows is not a square grid");
  }
  const auto src = pos.data();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>((new_grid * new_grid + extra) * d));
  out.insert(out.end(), src.begin(), src.begin() + extra * d);
  const double* grid = src.data() + extra * d;

  auto coord = [&](std::int64_t i) {
    if (new_grid == 1) return 0.5 * static_cast<double>(side - 1);
    return static_cast<double>(i) * static_cast<double>(side - 1) / static_cast<double>(new_grid - 1);
  };
  for (std::int64_t y = 0; y < new_grid; ++y)
    for (std::int64_t x = 0; x < new_grid; ++x) {
      const double sy = coord(y), sx = coord(x);
      if (mode == ResizeMode::nearest) {
        const auto ny = static_cast<std::int64_t>(std::llround(sy)), nx = static_cast<std::int64_t>(std::llround(sx));
        const double* cell = grid + (ny * side + nx) * d;
        out.insert(out.end(), cell, cell + d);
        continue;
      }
      const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(sy)), side - 1);
      const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(sx)), side - 1);
      const auto y1 = std::min<std::int64_t>(y0 + 1, side - 1), x1 = std::min<std::int64_t>(x0 + 1, side - 1);
      const double ty = sy - static_cast<double>(y0), tx = sx - static_cast<double>(x0);
      for (std::int64_t c = 0; c < d; ++c) {
        const double v00 = grid[(y0 * side + x0) * d + c], v01 = grid[(y0 * side + x1) * d + c];
        const double v10 = grid[(y1 * side + x0) * d + c], v11 = grid[(y1 * side + x1) * d + c];
        const double top = tx == 0.0 ? v00 : (1.0 - tx) * v00 + tx * v01;
        const double bottom = tx == 0.0 ? v10 : (1.0 - tx) * v10 + tx * v11;
        out.push_back(ty == 0.0 ? top : (1.0 - ty) * top + ty * bottom);
      }
    }
  return Tensor::from({new_grid * new_grid + extra, d}, std::move(out));
}

// --- parameters ------------------------------------------------------------------

namespace {

Tensor normal_param(const std::string& name, Shape shape, double stddev, std::uint64_t seed) {
  CounterRng rng(seed, fnv1a64(name));
  std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : values) v = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor const_param(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

Linear make_linear(const std::string& name, std::int64_t in, std::int64_t out, std::uint64_t seed) {
  return {normal_param(name + ".weight", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), seed),
          const_param({out}, 0.0)};
}

LayerNormParams make_ln(std::int64_t width) { return {const_param({width}, 1.0), const_param({width}, 0.0)}; }

std::vector<Block> make_blocks(const std::string& prefix, const ModelConfig& c, std::uint64_t seed) {
  std::vector<Block> blocks;
  const std::int64_t hidden = c.width * c.mlp_ratio;
  for (std::int64_t i = 0; i < c.layers; ++i) {
    const std::string p = prefix + ".blocks." + std::to_string(i);
    blocks.push_back(Block{make_ln(c.width), make_linear(p + ".attn.q", c.width, c.width, seed),
                           make_linear(p + ".attn.k", c.width, c.width, seed),
                           make_linear(p + ".attn.v", c.width, c.width, seed),
                           make_linear(p + ".attn.out", c.width, c.width, seed), make_ln(c.width),
                           make_linear(p + ".mlp.fc1", c.width, hidden, seed),
                           make_linear(p + ".mlp.fc2", hidden, c.width, seed)});
  }
  return blocks;
}

void append_linear(std::vector<NamedTensor>& out, const std::string& name, const Linear& l) {
  out.emplace_back(name + ".weight", l.weight);
  out.emplace_back(name + ".bias", l.bias);
}

void append_ln(std::vector<NamedTensor>& out, const std::string& name, const LayerNormParams& l) {
  out.emplace_back(name + ".gain", l.gain);
  out.emplace_back(name + ".bias", l.bias);
}

void append_blocks(std::vector<NamedTensor>& out, const std::string& prefix, const std::vector<Block>& blocks) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = prefix + ".blocks." + std::to_string(i);
    const Block& b = blocks[i];
    append_ln(out, p + ".ln1", b.ln1);
    append_linear(out, p + ".attn.q", b.q);
    append_linear(out, p + ".attn.k", b.k);
    append_linear(out, p + ".attn.v", b.v);
    append_linear(out, p + ".attn.out", b.out);
    append_ln(out, p + ".ln2", b.ln2);
    append_linear(out, p + ".mlp.fc1", b.fc1);
    append_linear(out, p + ".mlp.fc2", b.fc2);
  }
}

}  // namespace

bool ImageTower::set_resolution(std::int64_t image_side, ResizeMode mode) {
  const std::int64_t g = static_cast<std::int64_t>(std::llround(std::sqrt(
      static_cast<double>(tokens_for_resolution(image_side, config.patch_size)))));
  if (g == grid) return false;
  Tensor resized = resize_pos_embed(pos, g, mode);
  resized.set_requires_grad(true);
  pos = resized;
  grid = g;
  return true;
}

ClipModel ClipModel::init(const ClipConfig& config, std::uint64_t seed) {
  config.image.validate();
  config.text.validate();
  if (config.image.embed_dim != config.text.embed_dim) throw ConfigError("image and text embed_dim differ");
  if (config.image.tower != Tower::image || config.text.tower != Tower::text) throw ConfigError("tower kinds swapped");

  ClipModel m;
  const ModelConfig& ic = config.image;
  m.image.config = ic;
  m.image.grid = ic.grid();
  m.image.patch_embed = make_linear("image.patch_embed", ic.patch_dim(), ic.width, seed);
  m.image.pos = normal_param("image.pos", {m.image.grid * m.image.grid, ic.width}, 0.02, seed);
  if (ic.use_class_token) m.image.class_token = normal_param("image.class_token", {1, ic.width}, 0.02, seed);
  m.image.blocks = make_blocks("image", ic, seed);
  m.image.ln_post = make_ln(ic.width);
  m.image.proj = normal_param("image.proj", {ic.width, ic.embed_dim}, 1.0 / std::sqrt(static_cast<double>(ic.width)), seed);

  const ModelConfig& tc = config.text;
  m.text.config = tc;
  m.text.token_embed = normal_param("text.token_embed", {tc.vocab_size, tc.width}, 0.02, seed);
  m.text.pos = normal_param("text.pos", {tc.context_length, tc.width}, 0.01, seed);
  m.text.blocks = make_blocks("text", tc, seed);
  m.text.ln_final = make_ln(tc.width);
  m.text.proj = normal_param("text.proj", {tc.width, tc.embed_dim}, 1.0 / std::sqrt(static_cast<double>(tc.width)), seed);

  m.log_logit_scale = Tensor::scalar(std::log(1.0 / 0.07), true);
  return m;
}

std::vector<NamedTensor> ClipModel::parameters() const {
  std::vector<NamedTensor> out;
  append_linear(out, "image.patch_embed", image.patch_embed);
  out.emplace_back("image.pos", image.pos);
  if (image.class_token) out.emplace_back("image.class_token", *image.class_token);
  append_blocks(out, "image", image.blocks);
  append_ln(out, "image.ln_post", image.ln_post);
  out.emplace_back("image.proj", image.proj);
  out.emplace_back("text.token_embed", text.token_embed);
  out.emplace_back("text.pos", text.pos);
  append_blocks(out, "text", text.blocks);
  append_ln(out, "text.ln_final", text.ln_final);
  out.emplace_back("text.proj", text.proj);
  out.emplace_back("logit_scale", log_logit_scale);
  return out;
}

std::int64_t ClipModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : parameters()) n += t.numel();
  return n;
}

void ClipModel::clamp_logit_scale() {
  auto v = log_logit_scale.mutable_data();
  v[0] = std::clamp(v[0], 0.0, std::log(kMaxLogitScale));
}

double ClipModel::logit_scale() const { return std::exp(log_logit_scale.item()); }

std::uint64_t ClipModel::digest() const {
  std::uint64_t h = fnv1a64("clip");
  for (const auto& [name, t] : parameters()) {
    h = fnv1a64(name, h);
    h = fnv1a64(shape_str(t.shape()), h);
    const auto d = t.data();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)), h);
  }
  return h;
}

void ClipModel::zero_grad() {
  for (auto& [_, t] : parameters()) t.zero_grad();
}

// --- forward passes -----------------------------------------------------------------

namespace {

Tensor linear(const Tensor& x, const Linear& l) { return add(matmul(x, l.weight), l.bias); }

Tensor affine_ln(const Tensor& x, const LayerNormParams& p) { return add(mul(layernorm(x), p.gain), p.bias); }

// [B*T, d] -> [B*h, T, dh]
Tensor split_heads(const Tensor& x, std::int64_t batch, std::int64_t tokens, std::int64_t heads) {
  const std::int64_t dh = x.dim(1) / heads;
  return reshape(permute(reshape(x, {batch, tokens, heads, dh}), {0, 2, 1, 3}), {batch * heads, tokens, dh});
}

Tensor merge_heads(const Tensor& x, std::int64_t batch, std::int64_t tokens, std::int64_t heads) {
  const std::int64_t dh = x.dim(2);
  return reshape(permute(reshape(x, {batch, heads, tokens, dh}), {0, 2, 1, 3}), {batch * tokens, heads * dh});
}

Tensor attention(const Block& b, const Tensor& x, std::int64_t batch, std::int64_t tokens, std::int64_t heads,
                 const Tensor* additive_mask) {
  const std::int64_t dh = x.dim(1) / heads;
  Tensor q = split_heads(linear(x, b.q), batch, tokens, heads);
  Tensor k = split_heads(linear(x, b.k), batch, tokens, heads);
  Tensor v = split_heads(linear(x, b.v), batch, tokens, heads);
  Tensor scores = scale(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (additive_mask) scores = add(scores, *additive_mask);
  Tensor ctx = matmul(softmax(scores, 2), v);
  return linear(merge_heads(ctx, batch, tokens, heads), b.out);
}

Tensor run_block(const Block& b, const Tensor& x, std::int64_t batch, std::int64_t tokens, std::int64_t heads,
                 const Tensor* additive_mask) {
  Tensor h = add(x, attention(b, affine_ln(x, b.ln1), batch, tokens, heads, additive_mask));
  return add(h, linear(gelu(linear(affine_ln(h, b.ln2), b.fc1)), b.fc2));
}

}  // namespace

Tensor encode_images(const ImageTower& tower, const Tensor& patches, std::span<const TokenMask> masks) {
  const ModelConfig& c = tower.config;
  const auto batch = static_cast<std::int64_t>(masks.size());
  const std::int64_t n = tower.grid * tower.grid;
  if (batch < 1) throw DimensionError("encode_images: empty batch");
  if (patches.rank() != 2 || patches.dim(0) != batch * n || patches.dim(1) != c.patch_dim()) {
    throw DimensionError("encode_images: patches " + shape_str(patches.shape()) + " do not match " +
                         std::to_string(batch) + " x " + std::to_string(n) + " tokens of width " +
                         std::to_string(c.patch_dim()));
  }
  const std::int64_t kept = masks[0].kept_count();
  std::vector<std::int64_t> rows, pos_rows;
  rows.reserve(static_cast<std::size_t>(batch * kept));
  pos_rows.reserve(rows.capacity());
  for (std::int64_t b = 0; b < batch; ++b) {
    const TokenMask& m = masks[b];
    if (m.grid_h != tower.grid || m.grid_w != tower.grid) {
      throw DimensionError("encode_images: mask grid " + std::to_string(m.grid_h) + "x" + std::to_string(m.grid_w) +
                           " does not match positional grid " + std::to_string(tower.grid));
    }
    if (m.kept_count() != kept) throw DimensionError("encode_images: masks in a batch must keep equal token counts");
    for (auto idx : m.kept) {
      rows.push_back(b * n + idx);
      pos_rows.push_back(idx);
    }
  }

  Tensor x = add(linear(gather_rows(patches, rows), tower.patch_embed), gather_rows(tower.pos, pos_rows));
  std::int64_t tokens = kept;
  if (tower.class_token) {
    const std::vector<std::int64_t> zeros(static_cast<std::size_t>(batch), 0);
    Tensor cls = reshape(gather_rows(*tower.class_token, zeros), {batch, 1, c.width});
    x = reshape(concat(cls, reshape(x, {batch, kept, c.width}), 1), {batch * (kept + 1), c.width});
    tokens = kept + 1;
  }
  for (const Block& b : tower.blocks) x = run_block(b, x, batch, tokens, c.heads, nullptr);

  Tensor pooled;
  if (tower.class_token) {
    std::vector<std::int64_t> first(static_cast<std::size_t>(batch));
    for (std::int64_t b = 0; b < batch; ++b) first[b] = b * tokens;
    pooled = gather_rows(x, first);
  } else {
    pooled = mean_axis(reshape(x, {batch, tokens, c.width}), 1);
  }
  return l2_normalize(matmul(affine_ln(pooled, tower.ln_post), tower.proj), 1);
}

Tensor vit_forward(const ImageTower& tower, const Tensor& patch_tokens, const TokenMask& mask) {
  Tensor out = encode_images(tower, patch_tokens, std::span<const TokenMask>(&mask, 1));
  return reshape(out, {out.dim(1)});
}

Tensor encode_texts(const TextTower& tower, std::span<const TruncatedText> texts) {
  const ModelConfig& c = tower.config;
  const auto batch = static_cast<std::int64_t>(texts.size());
  if (batch < 1) throw DimensionError("encode_texts: empty batch");
  const auto len = static_cast<std::int64_t>(texts[0].ids.size());
  if (len < 1 || len > c.context_length) {
    throw DimensionError("encode_texts: text length " + std::to_string(len) + " outside [1, " +
                         std::to_string(c.context_length) + "]");
  }
  std::vector<std::int64_t> ids, positions, last(static_cast<std::size_t>(batch));
  ids.reserve(static_cast<std::size_t>(batch * len));
  positions.reserve(ids.capacity());
  std::vector<double> mask(static_cast<std::size_t>(batch * c.heads * len * len), 0.0);
  for (std::int64_t b = 0; b < batch; ++b) {
    const TruncatedText& t = texts[b];
    if (static_cast<std::int64_t>(t.ids.size()) != len || t.attention.size() != t.ids.size()) {
      throw DimensionError("encode_texts: all captions must be truncated to the same length");
    }
    std::int64_t last_real = -1;
    for (std::int64_t i = 0; i < len; ++i) {
      const auto id = t.ids[i];
      if (id < 0 || id >= c.vocab_size) {
        throw std::out_of_range("token id " + std::to_string(id) + " >= vocab size " + std::to_string(c.vocab_size));
      }
      ids.push_back(id);
      positions.push_back(i);
      if (t.attention[i]) last_real = i;
    }
    last[b] = b * len + std::max<std::int64_t>(last_real, 0);
    for (std::int64_t j = 0; j < len; ++j) {
      const bool visible = t.attention[j] || (last_real < 0 && j == 0);
      if (visible) continue;
      for (std::int64_t h = 0; h < c.heads; ++h)
        for (std::int64_t i = 0; i < len; ++i) mask[((b * c.heads + h) * len + i) * len + j] = -1e9;
    }
  }
  const Tensor additive = Tensor::from({batch * c.heads, len, len}, std::move(mask));

  Tensor x = add(gather_rows(tower.token_embed, ids), gather_rows(tower.pos, positions));
  for (const Block& b : tower.blocks) x = run_block(b, x, batch, len, c.heads, &additive);
  Tensor pooled = gather_rows(x, last);
  return l2_normalize(matmul(affine_ln(pooled, tower.ln_final), tower.proj), 1);
}

Tensor text_forward(const TextTower& tower, const TruncatedText& text) {
  Tensor out = encode_texts(tower, std::span<const TruncatedText>(&text, 1));
  return reshape(out, {out.dim(1)});
}

ClipModel clone_model(const ClipModel& src) {
  ClipModel m = ClipModel::init(src.config(), 0);
  if (m.image.grid != src.image.grid) {
    m.image.grid = src.image.grid;
    m.image.pos = Tensor::zeros(src.image.pos.shape(), true);
  }
  const auto from = src.parameters();
  auto to = m.parameters();
  for (std::size_t i = 0; i < from.size(); ++i) {
    std::copy(from[i].second.data().begin(), from[i].second.data().end(), to[i].second.mutable_data().begin());
  }
  return m;
}

}  // namespace clipa
