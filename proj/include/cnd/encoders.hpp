#pragma once

// Frozen vision and text encoders plus the learnable prompt container.

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cnd/autograd.hpp"
#include "cnd/image.hpp"
#include "cnd/nn.hpp"

namespace cnd {

/// H x W grid of C-dim patch embeddings (stored row-major as HW x C) plus a
/// global feature, taken at one tapped layer.
struct PatchFeatureMap {
  Mat patches;
  Mat global_feature;  // 1 x C
  int grid_h = 0;
  int grid_w = 0;
  int layer_index = 0;  // 1, 2 or 3

  Index channels() const { return patches.cols(); }
};

using LayerFeatures = std::array<PatchFeatureMap, 3>;

enum class BackendKind { toy_frozen_random, clip_pretrained };

BackendKind parse_backend_kind(const std::string& s);
std::string to_string(BackendKind kind);

struct EncoderConfig {
  BackendKind kind = BackendKind::toy_frozen_random;
  int depth = 6;
  /// 1-based block indices; all zero means evenly spaced thirds of depth.
  std::array<int, 3> tap_layers{0, 0, 0};
  int patch_size = 8;
  int resolution = 224;
  Index width = 64;
  int heads = 4;
  int mlp_ratio = 4;
  bool layer_norm = true;
  std::uint64_t seed = 20240101;
  /// Weight archive for the clip_pretrained backend.
  std::string weights_path;

  /// Tap layers with the thirds default resolved.
  std::array<int, 3> resolved_taps() const;
  int grid() const { return resolution / patch_size; }
  void validate() const;
};

/// ViT-style image encoder: patch embedding, class token, positional
/// embedding and `depth` residual attention blocks. Parameters are fixed at
/// construction and never receive gradients.
class VisionEncoder {
 public:
  explicit VisionEncoder(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }

  /// Features at the three tap layers, in tap order.
  LayerFeatures encode(const ImageSample& image) const;
  std::vector<LayerFeatures> encode_batch(std::span<const ImageSample> images) const;

  /// Flattened (grid*grid) x (patch*patch*3) pixel patches, normalized.
  Mat patchify(const RgbImage& image) const;

  /// FNV-1a over every parameter byte; changes iff a parameter changes.
  std::uint64_t parameter_hash() const;
  NamedParams parameters() const;

 private:
  void init_random();
  void load_weights(const std::string& path);

  EncoderConfig config_;
  Linear patch_embed_;
  ad::Var class_token_;
  ad::Var pos_embed_;
  LayerNormParams ln_pre_;
  std::vector<BlockParams> blocks_;
};

/// Fixed token ids used by the prompt suffixes.
inline constexpr int kObjectToken = 1;
inline constexpr int kDamagedToken = 2;

struct PromptPair {
  ad::Var normal_tokens;    // M x D_text, learnable
  ad::Var abnormal_tokens;  // M x D_text, learnable
  std::vector<int> suffix_normal{kObjectToken};
  std::vector<int> suffix_abnormal{kDamagedToken, kObjectToken};
};

struct PromptSet {
  std::array<PromptPair, 3> pairs;

  Index length() const { return pairs[0].normal_tokens.rows(); }
  Index token_dim() const { return pairs[0].normal_tokens.cols(); }
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Three pairs of M x D_text token matrices drawn from N(0, 0.02^2).
PromptSet init_prompts(Index length, Index token_dim, std::uint64_t seed);

/// Unit-norm text features for one tapped layer (1 x C each).
struct TextFeaturePair {
  ad::Var normal;
  ad::Var abnormal;
  int layer_index = 0;
};

using TextFeatures = std::array<TextFeaturePair, 3>;

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Index token_dim() const = 0;
  virtual Index output_dim() const = 0;
  /// Raw (unnormalized) text embedding, 1 x output_dim, differentiable in
  /// `learnable_tokens`.
  virtual ad::Var encode(const ad::Var& learnable_tokens, std::span<const int> suffix) const = 0;
  virtual std::uint64_t parameter_hash() const = 0;
};

/// Token-embedding table for the suffix ids, mean pooling over the whole
/// sequence, then a fixed random projection to the visual width.
class ToyTextEncoder final : public TextEncoder {
 public:
  ToyTextEncoder(Index token_dim, Index output_dim, std::uint64_t seed, Index vocab = 8);

  Index token_dim() const override { return table_.cols(); }
  Index output_dim() const override { return projection_.cols(); }
  ad::Var encode(const ad::Var& learnable_tokens, std::span<const int> suffix) const override;
  std::uint64_t parameter_hash() const override;

  const Mat& token_table() const { return table_; }
  const Mat& projection() const { return projection_; }

 private:
  Mat table_;       // vocab x D_text
  Mat projection_;  // D_text x C
};

TextFeatures encode_prompts(const PromptSet& prompts, const TextEncoder& backend);

std::uint64_t hash_bytes(const void* data, std::size_t size, std::uint64_t seed = 1469598103934665603ULL);
std::uint64_t hash_matrix(const Mat& m, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace cnd
