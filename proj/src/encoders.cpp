#include "cnd/encoders.hpp"

#include <cmath>
#include <cstring>

#include "cnd/archive.hpp"
#include "cnd/errors.hpp"

namespace cnd {

namespace {

// CLIP-style per-pixel normalization.
constexpr double kPixelMean = 0.5;
constexpr double kPixelStd = 0.25;

// Scale of the random frozen weights, relative to 1/sqrt(fan_in).
constexpr double kBlockGain = 0.5;
constexpr double kPosEmbedStd = 0.1;
constexpr double kClassTokenStd = 1.0;

bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace

std::uint64_t hash_bytes(const void* data, std::size_t size, std::uint64_t seed) {
  std::uint64_t h = seed;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t hash_matrix(const Mat& m, std::uint64_t seed) {
  std::int64_t dims[2] = {m.rows(), m.cols()};
  seed = hash_bytes(dims, sizeof(dims), seed);
  return hash_bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), seed);
}

void ImageSample::validate() const {
  if (pixels.height <= 0 || pixels.width <= 0 ||
      pixels.data.size() != static_cast<std::size_t>(pixels.height) * pixels.width * 3)
    throw InputError("image " + source + ": inconsistent pixel buffer");
  for (double v : pixels.data)
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("image " + source + ": pixel value outside [0,1]");
  if (mask && (mask->rows() != pixels.height || mask->cols() != pixels.width))
    throw InputError("image " + source + ": mask size differs from image size");
}

BackendKind parse_backend_kind(const std::string& s) {
  if (s == "toy_frozen_random") return BackendKind::toy_frozen_random;
  if (s == "clip_pretrained") return BackendKind::clip_pretrained;
  throw ConfigError("unknown encoder backend '" + s + "'");
}

std::string to_string(BackendKind kind) {
  return kind == BackendKind::toy_frozen_random ? "toy_frozen_random" : "clip_pretrained";
}

std::array<int, 3> EncoderConfig::resolved_taps() const {
  if (tap_layers == std::array<int, 3>{0, 0, 0}) {
    return {std::max(1, depth / 3), std::max(1, 2 * depth / 3), depth};
  }
  return tap_layers;
}

void EncoderConfig::validate() const {
  if (depth < 1) throw ConfigError("encoder depth must be >= 1");
  const auto taps = resolved_taps();
  if (!(1 <= taps[0] && taps[0] < taps[1] && taps[1] < taps[2] && taps[2] <= depth))
    throw ConfigError("encoder tap layers must satisfy 1 <= i1 < i2 < i3 <= depth");
  if (patch_size < 1 || resolution < patch_size || resolution % patch_size != 0)
    throw ConfigError("encoder resolution must be a positive multiple of patch_size");
  if (width < 1 || heads < 1 || width % heads != 0) throw ConfigError("encoder width must be a multiple of heads");
  if (mlp_ratio < 1) throw ConfigError("encoder mlp_ratio must be >= 1");
  if (kind == BackendKind::clip_pretrained && weights_path.empty())
    throw ConfigError("clip_pretrained backend requires a weights path");
}

VisionEncoder::VisionEncoder(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  init_random();
  if (config_.kind == BackendKind::clip_pretrained) load_weights(config_.weights_path);
}

void VisionEncoder::init_random() {
  Rng rng(config_.seed);
  const Index patch_dim = static_cast<Index>(config_.patch_size) * config_.patch_size * 3;
  const Index c = config_.width;
  const Index tokens = static_cast<Index>(config_.grid()) * config_.grid() + 1;
  patch_embed_ = Linear::init(patch_dim, c, 1.0 / std::sqrt(static_cast<double>(patch_dim)), rng, false);
  class_token_ = ad::Var::constant(gaussian(1, c, kClassTokenStd, rng));
  pos_embed_ = ad::Var::constant(gaussian(tokens, c, kPosEmbedStd, rng));
  ln_pre_ = LayerNormParams::init(c, false);
  BlockConfig bc{c, config_.heads, c * config_.mlp_ratio, config_.layer_norm};
  blocks_.clear();
  for (int i = 0; i < config_.depth; ++i)
    blocks_.push_back(BlockParams::init(bc, kBlockGain / std::sqrt(static_cast<double>(c)), rng, false));
}

void VisionEncoder::load_weights(const std::string& path) {
  const TensorArchive archive = read_archive(path);
  for (auto& [name, var] : parameters()) {
    const Mat* m = archive.find(name);
    if (!m) throw ConfigError("encoder weights " + path + ": missing tensor '" + name + "'");
    if (m->rows() != var.rows() || m->cols() != var.cols())
      throw ConfigError("encoder weights " + path + ": tensor '" + name + "' has shape " + std::to_string(m->rows()) +
                        "x" + std::to_string(m->cols()) + ", configuration expects " + std::to_string(var.rows()) +
                        "x" + std::to_string(var.cols()));
    var.mutable_value() = *m;
  }
}

NamedParams VisionEncoder::parameters() const {
  NamedParams out;
  patch_embed_.collect(out, "patch_embed");
  out.emplace_back("class_token", class_token_);
  out.emplace_back("pos_embed", pos_embed_);
  ln_pre_.collect(out, "ln_pre");
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "blocks." + std::to_string(i));
  return out;
}

std::uint64_t VisionEncoder::parameter_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, var] : parameters()) {
    h = hash_bytes(name.data(), name.size(), h);
    h = hash_matrix(var.value(), h);
  }
  return h;
}

Mat VisionEncoder::patchify(const RgbImage& image) const {
  const int p = config_.patch_size;
  const int g = config_.grid();
  Mat out(static_cast<Index>(g) * g, static_cast<Index>(p) * p * 3);
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      const Index row = static_cast<Index>(gy) * g + gx;
      Index col = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int c = 0; c < 3; ++c)
            out(row, col++) = (image.at(gy * p + y, gx * p + x, c) - kPixelMean) / kPixelStd;
    }
  return out;
}

LayerFeatures VisionEncoder::encode(const ImageSample& image) const {
  return encode_batch(std::span<const ImageSample>(&image, 1)).front();
}

std::vector<LayerFeatures> VisionEncoder::encode_batch(std::span<const ImageSample> images) const {
  const int g = config_.grid();
  const Index patches = static_cast<Index>(g) * g;
  const Index seq = patches + 1;
  std::vector<ad::Var> sequences;
  sequences.reserve(images.size());
  for (const auto& img : images) {
    if (img.pixels.height != config_.resolution || img.pixels.width != config_.resolution)
      throw InputError("encode_image: expected " + std::to_string(config_.resolution) + "x" +
                       std::to_string(config_.resolution) + " input, got " + std::to_string(img.pixels.height) + "x" +
                       std::to_string(img.pixels.width) + (img.source.empty() ? "" : " (" + img.source + ")"));
    ad::Var embedded = linear(ad::Var::constant(patchify(img.pixels)), patch_embed_);
    std::array<ad::Var, 2> parts{class_token_, embedded};
    sequences.push_back(ad::add(ad::concat_rows(parts), pos_embed_));
  }
  ad::Var x = ad::concat_rows(sequences);
  if (config_.layer_norm) x = ad::layer_norm(x, ln_pre_.gamma, ln_pre_.beta);

  const auto taps = config_.resolved_taps();
  std::vector<LayerFeatures> out(images.size());
  std::size_t next_tap = 0;
  for (int layer = 1; layer <= config_.depth && next_tap < 3; ++layer) {
    x = residual_attention_block(x, blocks_[static_cast<std::size_t>(layer - 1)], seq);
    if (layer != taps[next_tap]) continue;
    if (!all_finite(x.value())) throw BackendError("encode_image: non-finite features at layer " + std::to_string(layer));
    for (std::size_t b = 0; b < images.size(); ++b) {
      auto& f = out[b][next_tap];
      const Index base = static_cast<Index>(b) * seq;
      f.global_feature = x.value().row(base);
      f.patches = x.value().middleRows(base + 1, patches);
      f.grid_h = g;
      f.grid_w = g;
      f.layer_index = static_cast<int>(next_tap) + 1;
    }
    ++next_tap;
  }
  return out;
}

void PromptSet::collect(NamedParams& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out.emplace_back(prefix + "." + std::to_string(i) + ".normal", pairs[i].normal_tokens);
    out.emplace_back(prefix + "." + std::to_string(i) + ".abnormal", pairs[i].abnormal_tokens);
  }
}

PromptSet init_prompts(Index length, Index token_dim, std::uint64_t seed) {
  if (length < 1) throw ConfigError("prompt length must be >= 1");
  if (token_dim < 1) throw ConfigError("prompt token dimension must be >= 1");
  Rng rng(seed);
  PromptSet set;
  for (auto& pair : set.pairs) {
    pair.normal_tokens = ad::Var::leaf(gaussian(length, token_dim, 0.02, rng), true);
    pair.abnormal_tokens = ad::Var::leaf(gaussian(length, token_dim, 0.02, rng), true);
  }
  return set;
}

ToyTextEncoder::ToyTextEncoder(Index token_dim, Index output_dim, std::uint64_t seed, Index vocab) {
  if (token_dim < 1 || output_dim < 1 || vocab < 3) throw ConfigError("toy text encoder: invalid dimensions");
  Rng rng(seed);
  table_ = gaussian(vocab, token_dim, 0.02, rng);
  projection_ = gaussian(token_dim, output_dim, 1.0 / std::sqrt(static_cast<double>(token_dim)), rng);
}

ad::Var ToyTextEncoder::encode(const ad::Var& learnable_tokens, std::span<const int> suffix) const {
  if (learnable_tokens.cols() != token_dim())
    throw ConfigError("text encoder: token dimension " + std::to_string(learnable_tokens.cols()) +
                      " != backend dimension " + std::to_string(token_dim()));
  if (!learnable_tokens.value().allFinite()) throw InputError("text encoder: non-finite prompt tokens");
  Mat fixed(static_cast<Index>(suffix.size()), token_dim());
  for (std::size_t i = 0; i < suffix.size(); ++i) {
    if (suffix[i] < 0 || suffix[i] >= table_.rows()) throw ConfigError("text encoder: token id out of vocabulary");
    fixed.row(static_cast<Index>(i)) = table_.row(suffix[i]);
  }
  std::array<ad::Var, 2> parts{learnable_tokens, ad::Var::constant(std::move(fixed))};
  ad::Var sequence = suffix.empty() ? learnable_tokens : ad::concat_rows(parts);
  ad::Var pooled = ad::scale(ad::sum_rows(sequence), 1.0 / static_cast<double>(sequence.rows()));
  return ad::matmul(pooled, ad::Var::constant(projection_));
}

std::uint64_t ToyTextEncoder::parameter_hash() const { return hash_matrix(projection_, hash_matrix(table_)); }

TextFeatures encode_prompts(const PromptSet& prompts, const TextEncoder& backend) {
  if (prompts.token_dim() != backend.token_dim())
    throw ConfigError("encode_prompts: prompt token dimension " + std::to_string(prompts.token_dim()) +
                      " != text backend dimension " + std::to_string(backend.token_dim()));
  TextFeatures out;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& pair = prompts.pairs[i];
    if (pair.normal_tokens.rows() != pair.abnormal_tokens.rows() ||
        pair.normal_tokens.cols() != pair.abnormal_tokens.cols())
      throw ConfigError("encode_prompts: normal and abnormal token matrices differ in shape");
    out[i].normal = ad::normalize_rows(backend.encode(pair.normal_tokens, pair.suffix_normal));
    out[i].abnormal = ad::normalize_rows(backend.encode(pair.abnormal_tokens, pair.suffix_abnormal));
    out[i].layer_index = static_cast<int>(i) + 1;
  }
  return out;
}

}  // namespace cnd
