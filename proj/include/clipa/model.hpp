#pragma once

// Image (ViT) and text transformer towers of a CLIP model, their presets,
// patchify/unpatchify, and positional-embedding resizing.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "clipa/masking.hpp"
#include "clipa/tensor.hpp"

namespace clipa {

class ResolutionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Tower { image, text };
enum class ImagePooling { mean, class_token };
enum class ResizeMode { bilinear, nearest };

struct ModelConfig {
  Tower tower = Tower::image;
  std::int64_t layers = 2;
  std::int64_t width = 64;
  std::int64_t heads = 4;
  std::int64_t mlp_ratio = 4;
  std::int64_t embed_dim = 64;
  // image tower
  std::int64_t patch_size = 4;
  std::int64_t image_side = 32;  // resolution the positional grid is built for
  bool use_class_token = false;
  // text tower
  std::int64_t vocab_size = 0;
  std::int64_t context_length = 0;

  void validate() const;
  std::int64_t head_dim() const { return width / heads; }
  std::int64_t grid() const { return image_side / patch_size; }
  std::int64_t patch_dim() const { return patch_size * patch_size * 3; }
  bool operator==(const ModelConfig&) const = default;
};

struct ClipConfig {
  ModelConfig image;
  ModelConfig text;
  bool operator==(const ClipConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, Tower tower);
nlohmann::json to_json(const ClipConfig& c);
ClipConfig clip_config_from_json(const nlohmann::json& j);

// Paper-scale shapes for compute accounting: S16, B16, L16, L14, H14.
// Trainable desk-scale shapes: toy-tiny, toy-small, toy-base.
ClipConfig clip_preset(std::string_view name, std::int64_t vocab_size = 0, std::int64_t context_length = 0);
std::vector<std::string> clip_preset_names();

// (image_side / patch_size)^2; throws ResolutionError when not divisible.
std::int64_t tokens_for_resolution(std::int64_t image_side, std::int64_t patch_size);

// [H,W,3] -> [(H/P)*(W/P), P*P*3], row-major patch order, each patch row-major
// over (y, x, channel).
Tensor patchify(const Tensor& image, std::int64_t patch_size);
// Equal-shaped images patchified and stacked: [B*(H/P)*(W/P), P*P*3].
Tensor patchify_batch(std::span<const Tensor> images, std::int64_t patch_size);
Tensor unpatchify(const Tensor& patches, std::int64_t height, std::int64_t width, std::int64_t patch_size);

// Interpolates a square g x g grid of embeddings to new_grid x new_grid using
// align-corners sampling. When pos has g*g + 1 rows the first row is a class
// embedding and is passed through unchanged.
Tensor resize_pos_embed(const Tensor& pos, std::int64_t new_grid, ResizeMode mode = ResizeMode::bilinear);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct Block {
  LayerNormParams ln1;
  Linear q, k, v, out;
  LayerNormParams ln2;
  Linear fc1, fc2;
};

struct ImageTower {
  ModelConfig config;
  std::int64_t grid = 0;  // current positional grid extent
  Linear patch_embed;
  Tensor pos;  // [grid*grid, width]
  std::optional<Tensor> class_token;  // [1, width]
  std::vector<Block> blocks;
  LayerNormParams ln_post;
  Tensor proj;  // [width, embed_dim]

  // Resizes the positional grid for a new input resolution. Returns true if it changed.
  bool set_resolution(std::int64_t image_side, ResizeMode mode = ResizeMode::bilinear);
};

struct TextTower {
  ModelConfig config;
  Tensor token_embed;  // [vocab, width]
  Tensor pos;          // [context_length, width]
  std::vector<Block> blocks;
  LayerNormParams ln_final;
  Tensor proj;  // [width, embed_dim]
};

using NamedTensor = std::pair<std::string, Tensor>;

// exp(t) of the learnable temperature is kept inside [1, 100].
inline constexpr double kMaxLogitScale = 100.0;

class ClipModel {
 public:
  static ClipModel init(const ClipConfig& config, std::uint64_t seed);

  ImageTower image;
  TextTower text;
  Tensor log_logit_scale;  // scalar t, logit scale = exp(t)

  ClipConfig config() const { return {image.config, text.config}; }
  // Stable order; names are unique. Handles share storage with the model.
  std::vector<NamedTensor> parameters() const;
  std::int64_t parameter_count() const;
  // Clamps t so exp(t) stays in [1, 100].
  void clamp_logit_scale();
  double logit_scale() const;
  // FNV-1a over names, shapes and float64 bytes of all parameters.
  std::uint64_t digest() const;
  void zero_grad();
};

// Deep copy: same config, positional grid and parameter values, fresh storage.
ClipModel clone_model(const ClipModel& model);

// Batched image encoder. patches holds B consecutive [grid*grid, P*P*3]
// blocks; masks[b] selects the kept tokens of sample b (all masks must keep
// the same number of tokens). Tokens are masked before the patch projection,
// which equals masking after embedding + position since both are per-token.
// Returns L2-normalized embeddings [B, embed_dim].
Tensor encode_images(const ImageTower& tower, const Tensor& patches, std::span<const TokenMask> masks);
Tensor vit_forward(const ImageTower& tower, const Tensor& patch_tokens, const TokenMask& mask);

// Batched text encoder over equal-length truncated captions. Padding is
// excluded from attention and pooling reads the last real token (position 0
// when a caption is empty). Returns L2-normalized embeddings [B, embed_dim].
Tensor encode_texts(const TextTower& tower, std::span<const TruncatedText> texts);
Tensor text_forward(const TextTower& tower, const TruncatedText& text);

}  // namespace clipa
