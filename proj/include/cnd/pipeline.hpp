#pragma once

// Encoder -> normality promotion -> (noise) -> fusion -> MoE -> decoder, the
// total training loss, Adam updates, training loop and checkpoints.

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cnd/autograd.hpp"
#include "cnd/encoders.hpp"
#include "cnd/fnp.hpp"
#include "cnd/fusion_moe.hpp"
#include "cnd/image.hpp"
#include "cnd/nn.hpp"
#include "cnd/normality_constraint.hpp"

namespace cnd {

enum class NoiseInto { fusion_input, off };
NoiseInto parse_noise_into(const std::string& s);
std::string to_string(NoiseInto n);

struct ModelConfig {
  EncoderConfig encoder;
  Index text_dim = 32;
  Index prompt_length = 12;
  FusionConfig fusion;
  MoEConfig moe;
  ConstraintConfig constraint;
  int decoder_heads = 4;
  int decoder_mlp_ratio = 4;
  /// Feature-level normality promotion on encoded and decoded grids.
  bool use_fnp = true;
  /// Cross-modal constraint term in the total loss.
  bool use_constraint = true;
  bool use_distill = true;
  /// Pair decoded block i with encoded layer 4 - i instead of layer i.
  bool reverse_pairing = false;
  /// Stop gradients from the promotion terms into the text features.
  bool detach_text_in_fnp = false;

  void validate() const;
  /// Canonical text of every key that changes parameter shapes or semantics;
  /// checkpoints refuse to load under a different fingerprint.
  std::string fingerprint() const;
};

struct TrainConfig {
  int epochs = 250;
  int batch_size = 8;
  double learning_rate = 0.001;
  /// Noise std relative to each layer's feature std.
  double noise_std = 0.2;
  NoiseInto noise_into = NoiseInto::fusion_input;
  std::uint64_t seed = 42;
  /// Save a checkpoint every n epochs (0: only at the end).
  int checkpoint_every = 0;

  void validate() const;
};

/// Adds N(0, (sigma * std(f))^2) to every patch entry in training mode.
PatchFeatureMap perturb(const PatchFeatureMap& feature, double sigma_noise, bool training, Rng& rng);
/// Batch form: `patches` holds consecutive images of `rows_per_image` rows,
/// each scaled by its own feature std.
Mat perturb(const Mat& patches, Index rows_per_image, double sigma_noise, bool training, Rng& rng);

struct Decoder {
  ad::Var global_token;  // 1 x C, prepended to every image's token sequence
  std::array<BlockParams, 3> blocks;

  static Decoder init(Index width, int heads, int mlp_ratio, Rng& rng);
  void zero_residual_branches();
  void collect(NamedParams& out, const std::string& prefix) const;
};

struct DecodedFeatures {
  std::array<ad::Var, 3> patches;  // B*HW x C per block
  std::array<ad::Var, 3> globals;  // B x C per block
};

/// Runs the three decoder blocks on `input` (B*HW x C) with a global token per image.
DecodedFeatures decode(const ad::Var& input, const Decoder& decoder, Index rows_per_image);

struct ForwardOutputs {
  Index batch = 0;
  Index rows_per_image = 0;
  int grid_h = 0;
  int grid_w = 0;
  TextFeatures text;
  /// Promoted (or raw, without promotion) grids, B*HW x C.
  std::array<ad::Var, 3> encoded;
  std::array<ad::Var, 3> decoded;
  /// Global features e_i and decoded global tokens, B x C.
  std::array<ad::Var, 3> encoded_globals;
  std::array<ad::Var, 3> decoded_globals;
  /// Control maps, B*HW x 1; undefined without promotion.
  std::array<ad::Var, 3> encoded_psi;
  std::array<ad::Var, 3> decoded_psi;
  ad::Var fused;
  ad::Var moe_output;
  /// Undefined when the MoE is disabled.
  ad::Var gate_scores;
  ad::Var gate_weights;
  std::vector<Index> selected_experts;
};

struct LossBreakdown {
  ad::Var total;
  double distill = 0.0;
  double align_encoded = 0.0;  // L_c^1
  double align_decoded = 0.0;  // L_c^2 (0 before theta)
  double constraint = 0.0;
  double moe = 0.0;
  double total_value = 0.0;
};

class Model {
 public:
  explicit Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const VisionEncoder& encoder() const { return *encoder_; }
  const TextEncoder& text_encoder() const { return *text_encoder_; }

  PromptSet& prompts() { return prompts_; }
  const PromptSet& prompts() const { return prompts_; }
  FusionProjection& fusion() { return fusion_; }
  const FusionProjection& fusion() const { return fusion_; }
  MixtureOfExperts& moe() { return moe_; }
  const MixtureOfExperts& moe() const { return moe_; }
  Decoder& decoder() { return decoder_; }
  const Decoder& decoder() const { return decoder_; }

  /// Every parameter that receives gradients, in a stable order.
  NamedParams trainable_parameters() const;

  std::vector<LayerFeatures> encode(std::span<const ImageSample> images) const;

  /// `rng` drives noise and dropout; required when training.
  ForwardOutputs forward(std::span<const LayerFeatures> encoded, bool training, double noise_std, NoiseInto noise_into,
                         Rng* rng) const;
  ForwardOutputs forward(std::span<const ImageSample> images, bool training, double noise_std, NoiseInto noise_into,
                         Rng* rng) const;

 private:
  ModelConfig config_;
  std::shared_ptr<const VisionEncoder> encoder_;
  std::shared_ptr<const TextEncoder> text_encoder_;
  PromptSet prompts_;
  FusionProjection fusion_;
  MixtureOfExperts moe_;
  Decoder decoder_;
};

/// L_distill + L_constraint + L_moe with the per-term values for logging.
LossBreakdown total_loss(const ForwardOutputs& outputs, int epoch, const ModelConfig& config);

class Adam {
 public:
  explicit Adam(NamedParams params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();

  const NamedParams& params() const { return params_; }
  std::int64_t step_count() const { return t_; }
  const std::vector<Mat>& first_moments() const { return m_; }
  const std::vector<Mat>& second_moments() const { return v_; }
  void restore(std::int64_t t, std::vector<Mat> m, std::vector<Mat> v);

 private:
  NamedParams params_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
};

struct EpochRecord {
  int epoch = 0;
  double distill = 0.0;
  double align_encoded = 0.0;
  double align_decoded = 0.0;
  double constraint = 0.0;
  double moe = 0.0;
  double total = 0.0;
  double wall_seconds = 0.0;
};

/// Everything needed to resume or score: trainable parameters, optimizer state,
/// epoch counter and seed. Frozen encoders are rebuilt from the configuration.
struct ModelState {
  std::unique_ptr<Model> model;
  std::unique_ptr<Adam> optimizer;
  int epoch = 0;
  std::uint64_t seed = 0;
};

ModelState make_state(const ModelConfig& config, const TrainConfig& train);

void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
/// Throws IoError for missing or corrupt files and CompatibilityError when the
/// stored fingerprint differs from `config` (when given).
ModelState load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);
/// Reads just the model configuration stored in a checkpoint.
ModelConfig checkpoint_config(const std::filesystem::path& path);

struct FitOptions {
  /// Checkpoints land here as checkpoint.bin when set.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  ModelState state;
  std::vector<EpochRecord> log;
};

/// Mini-batch Adam training on normal samples pooled across categories.
FitResult fit(std::span<const ImageSample> train_set, const ModelConfig& model_config, const TrainConfig& train,
              const FitOptions& options = {});

}  // namespace cnd
