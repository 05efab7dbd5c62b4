#include "cnd/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cnd/archive.hpp"
#include "cnd/config.hpp"
#include "cnd/errors.hpp"

namespace cnd {

namespace {

constexpr double kDecoderInitStd = 0.02;
constexpr std::uint64_t kTextSeedSalt = 0x9E3779B97F4A7C15ULL;
constexpr std::size_t kEncodeChunk = 32;

template <typename F>
auto run_stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    rethrow_with_stage(name, e);
  } catch (const InputError& e) {
    rethrow_with_stage(name, e);
  } catch (const BackendError& e) {
    rethrow_with_stage(name, e);
  } catch (const DegenerateInputError& e) {
    rethrow_with_stage(name, e);
  } catch (const DivergenceError& e) {
    rethrow_with_stage(name, e);
  }
}

ad::Var add_defined(const ad::Var& a, const ad::Var& b) {
  if (!a.defined()) return b;
  if (!b.defined()) return a;
  return ad::add(a, b);
}

}  // namespace

NoiseInto parse_noise_into(const std::string& s) {
  if (s == "fusion_input") return NoiseInto::fusion_input;
  if (s == "off") return NoiseInto::off;
  throw ConfigError("unknown noise_into value '" + s + "' (expected fusion_input or off)");
}

std::string to_string(NoiseInto n) { return n == NoiseInto::fusion_input ? "fusion_input" : "off"; }

void ModelConfig::validate() const {
  encoder.validate();
  fusion.validate();
  moe.validate();
  constraint.validate();
  if (text_dim < 1) throw ConfigError("text dimension must be >= 1");
  if (prompt_length < 1) throw ConfigError("prompt length must be >= 1");
  if (decoder_heads < 1 || encoder.width % decoder_heads != 0)
    throw ConfigError("decoder heads must divide the feature width");
  if (decoder_mlp_ratio < 1) throw ConfigError("decoder mlp_ratio must be >= 1");
}

std::string ModelConfig::fingerprint() const { return format_model_config(*this); }

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train learning_rate must be > 0");
  if (!(noise_std >= 0.0)) throw ConfigError("train noise_std must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("train checkpoint_every must be >= 0");
}

PatchFeatureMap perturb(const PatchFeatureMap& feature, double sigma_noise, bool training, Rng& rng) {
  PatchFeatureMap out = feature;
  out.patches = perturb(feature.patches, feature.patches.rows(), sigma_noise, training, rng);
  return out;
}

Mat perturb(const Mat& patches, Index rows_per_image, double sigma_noise, bool training, Rng& rng) {
  if (!(sigma_noise >= 0.0)) throw ConfigError("perturb: sigma_noise must be >= 0");
  if (!training || sigma_noise == 0.0) return patches;
  if (rows_per_image < 1 || patches.rows() % rows_per_image != 0)
    throw ConfigError("perturb: rows not divisible by rows per image");
  Mat out = patches;
  std::normal_distribution<double> unit(0.0, 1.0);
  for (Index start = 0; start < patches.rows(); start += rows_per_image) {
    auto block = patches.middleRows(start, rows_per_image);
    const double mu = block.mean();
    const double sd = std::sqrt((block.array() - mu).square().mean());
    auto dst = out.middleRows(start, rows_per_image);
    for (Index r = 0; r < dst.rows(); ++r)
      for (Index c = 0; c < dst.cols(); ++c) dst(r, c) += sigma_noise * sd * unit(rng);
  }
  return out;
}

Decoder Decoder::init(Index width, int heads, int mlp_ratio, Rng& rng) {
  Decoder d;
  d.global_token = ad::Var::leaf(gaussian(1, width, kDecoderInitStd, rng), true);
  BlockConfig bc{width, heads, width * mlp_ratio, true};
  for (auto& b : d.blocks) b = BlockParams::init(bc, kDecoderInitStd, rng, true);
  return d;
}

void Decoder::zero_residual_branches() {
  for (auto& b : blocks) b.zero_residual_branches();
}

void Decoder::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".global_token", global_token);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".blocks." + std::to_string(i));
}

DecodedFeatures decode(const ad::Var& input, const Decoder& decoder, Index rows_per_image) {
  if (rows_per_image < 1 || input.rows() % rows_per_image != 0)
    throw ConfigError("decode: rows not divisible by rows per image");
  if (input.cols() != decoder.global_token.cols())
    throw ConfigError("decode: input width " + std::to_string(input.cols()) + " != decoder width " +
                      std::to_string(decoder.global_token.cols()));
  const Index batch = input.rows() / rows_per_image;
  const Index seq = rows_per_image + 1;
  std::vector<ad::Var> parts;
  parts.reserve(static_cast<std::size_t>(2 * batch));
  for (Index b = 0; b < batch; ++b) {
    parts.push_back(decoder.global_token);
    parts.push_back(batch == 1 ? input : ad::slice_rows(input, b * rows_per_image, rows_per_image));
  }
  ad::Var x = ad::concat_rows(parts);

  std::vector<Index> patch_rows;
  patch_rows.reserve(static_cast<std::size_t>(batch * rows_per_image));
  for (Index b = 0; b < batch; ++b)
    for (Index r = 1; r < seq; ++r) patch_rows.push_back(b * seq + r);

  DecodedFeatures out;
  for (std::size_t i = 0; i < 3; ++i) {
    x = residual_attention_block(x, decoder.blocks[i], seq);
    if (!x.value().allFinite())
      throw DivergenceError("decode: non-finite output in block " + std::to_string(i + 1));
    out.patches[i] = ad::gather_rows(x, patch_rows);
    out.globals[i] = ad::strided_rows(x, 0, seq, batch);
  }
  return out;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  encoder_ = std::make_shared<VisionEncoder>(config_.encoder);
  text_encoder_ = std::make_shared<ToyTextEncoder>(config_.text_dim, config_.encoder.width,
                                                   config_.encoder.seed ^ kTextSeedSalt);
  Rng rng(seed);
  prompts_ = init_prompts(config_.prompt_length, config_.text_dim, rng());
  fusion_ = FusionProjection(config_.encoder.width, config_.fusion, rng);
  moe_ = MixtureOfExperts(config_.encoder.width, config_.moe, rng);
  decoder_ = Decoder::init(config_.encoder.width, config_.decoder_heads, config_.decoder_mlp_ratio, rng);
}

NamedParams Model::trainable_parameters() const {
  NamedParams out;
  prompts_.collect(out, "prompts");
  fusion_.collect(out, "fusion");
  if (config_.moe.enabled) moe_.collect(out, "moe");
  decoder_.collect(out, "decoder");
  return out;
}

std::vector<LayerFeatures> Model::encode(std::span<const ImageSample> images) const {
  std::vector<LayerFeatures> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kEncodeChunk) {
    auto chunk = encoder_->encode_batch(images.subspan(start, std::min(kEncodeChunk, images.size() - start)));
    for (auto& f : chunk) out.push_back(std::move(f));
  }
  return out;
}

ForwardOutputs Model::forward(std::span<const ImageSample> images, bool training, double noise_std,
                              NoiseInto noise_into, Rng* rng) const {
  auto encoded = run_stage("encode", [&] { return encode(images); });
  return forward(encoded, training, noise_std, noise_into, rng);
}

ForwardOutputs Model::forward(std::span<const LayerFeatures> encoded, bool training, double noise_std,
                              NoiseInto noise_into, Rng* rng) const {
  if (encoded.empty()) throw InputError("forward: empty batch");
  const bool noisy = training && noise_into == NoiseInto::fusion_input && noise_std > 0.0;
  if ((training || noisy) && !rng) throw ConfigError("forward: training mode needs a random generator");

  ForwardOutputs out;
  out.batch = static_cast<Index>(encoded.size());
  out.rows_per_image = encoded[0][0].patches.rows();
  out.grid_h = encoded[0][0].grid_h;
  out.grid_w = encoded[0][0].grid_w;
  const Index hw = out.rows_per_image;
  const Index width = encoded[0][0].channels();

  std::array<Mat, 3> raw;
  for (std::size_t i = 0; i < 3; ++i) {
    raw[i].resize(out.batch * hw, width);
    Mat globals(out.batch, width);
    for (Index b = 0; b < out.batch; ++b) {
      const auto& f = encoded[static_cast<std::size_t>(b)][i];
      if (f.patches.rows() != hw || f.channels() != width) throw InputError("forward: inconsistent feature shapes");
      raw[i].middleRows(b * hw, hw) = f.patches;
      globals.row(b) = f.global_feature;
    }
    out.encoded_globals[i] = ad::Var::constant(std::move(globals));
  }

  out.text = run_stage("encode_prompts", [&] { return encode_prompts(prompts_, *text_encoder_); });
  TextFeatures fnp_text = out.text;
  if (config_.detach_text_in_fnp)
    for (auto& t : fnp_text) {
      t.normal = t.normal.detach();
      t.abnormal = t.abnormal.detach();
    }

  run_stage("promote_encoded", [&] {
    for (std::size_t i = 0; i < 3; ++i) {
      ad::Var f = ad::Var::constant(raw[i]);
      if (config_.use_fnp) {
        out.encoded_psi[i] = control_map(f, fnp_text[i]);
        out.encoded[i] = promote(f, out.encoded_psi[i], hw);
      } else {
        out.encoded[i] = f;
      }
    }
  });

  std::array<ad::Var, 3> fusion_input;
  for (std::size_t i = 0; i < 3; ++i)
    fusion_input[i] = noisy ? ad::Var::constant(perturb(raw[i], hw, noise_std, true, *rng)) : ad::Var::constant(raw[i]);

  out.fused = run_stage("fuse", [&] { return fusion_.forward(fusion_input, training, rng); });
  if (config_.moe.enabled) {
    auto mo = run_stage("moe", [&] { return moe_.forward(out.fused); });
    out.moe_output = mo.output;
    out.gate_scores = mo.scores;
    out.gate_weights = mo.weights;
    out.selected_experts = std::move(mo.selected);
  } else {
    out.moe_output = out.fused;
  }

  DecodedFeatures dec = run_stage("decode", [&] { return decode(out.moe_output, decoder_, hw); });
  run_stage("promote_decoded", [&] {
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t j = config_.reverse_pairing ? 2 - i : i;
      out.decoded_globals[i] = dec.globals[j];
      if (config_.use_fnp) {
        out.decoded_psi[i] = control_map(dec.patches[j], fnp_text[i]);
        out.decoded[i] = promote(dec.patches[j], out.decoded_psi[i], hw);
      } else {
        out.decoded[i] = dec.patches[j];
      }
    }
  });
  return out;
}

LossBreakdown total_loss(const ForwardOutputs& outputs, int epoch, const ModelConfig& config) {
  LossBreakdown out;
  ad::Var total;
  if (config.use_distill) {
    ad::Var d = distill_loss(outputs.encoded, outputs.decoded, outputs.rows_per_image);
    out.distill = d.scalar();
    total = add_defined(total, d);
  }
  if (config.use_constraint) {
    ad::Var l1 = alignment_loss(outputs.encoded_globals, outputs.text, config.constraint.tau);
    out.align_encoded = l1.scalar();
    ad::Var c = l1;
    if (decoded_term_active(epoch, config.constraint)) {
      ad::Var l2 = decoded_alignment_loss(outputs.decoded_globals, outputs.text, config.constraint.tau);
      out.align_decoded = l2.scalar();
      c = constraint_loss(epoch, config.constraint, l1, l2);
    }
    out.constraint = c.scalar();
    total = add_defined(total, c);
  }
  if (config.moe.enabled && outputs.gate_scores.defined()) {
    ad::Var m = importance_loss(outputs.gate_scores, config.moe.epsilon);
    out.moe = m.scalar();
    total = add_defined(total, m);
  }
  out.total = total.defined() ? total : ad::Var::constant(Mat::Zero(1, 1));
  out.total_value = out.total.scalar();
  if (!std::isfinite(out.total_value))
    throw DivergenceError("total_loss: non-finite loss (distill=" + std::to_string(out.distill) +
                          ", constraint=" + std::to_string(out.constraint) + ", moe=" + std::to_string(out.moe) + ")");
  return out;
}

Adam::Adam(NamedParams params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, p] : params_) {
    m_.push_back(Mat::Zero(p.rows(), p.cols()));
    v_.push_back(Mat::Zero(p.rows(), p.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Var& p = params_[i].second;
    if (!p.has_grad()) continue;
    const Mat& g = p.grad();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseAbs2();
    p.mutable_value().array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void Adam::restore(std::int64_t t, std::vector<Mat> m, std::vector<Mat> v) {
  if (m.size() != params_.size() || v.size() != params_.size())
    throw CompatibilityError("optimizer state does not match parameter count");
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

ModelState make_state(const ModelConfig& config, const TrainConfig& train) {
  train.validate();
  ModelState st;
  st.seed = train.seed;
  st.model = std::make_unique<Model>(config, train.seed);
  st.optimizer = std::make_unique<Adam>(st.model->trainable_parameters(), train.learning_rate);
  return st;
}

namespace {

constexpr const char* kCheckpointFormat = "cnd-checkpoint";

std::string first_difference(const std::string& a, const std::string& b) {
  std::istringstream sa(a), sb(b);
  std::string la, lb;
  while (true) {
    const bool ga = static_cast<bool>(std::getline(sa, la));
    const bool gb = static_cast<bool>(std::getline(sb, lb));
    if (!ga && !gb) return "";
    if (la != lb || ga != gb) return "checkpoint has '" + (ga ? la : "") + "', expected '" + (gb ? lb : "") + "'";
  }
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  TensorArchive a;
  a.meta["format"] = kCheckpointFormat;
  a.meta["model_config"] = state.model->config().fingerprint();
  a.meta["epoch"] = std::to_string(state.epoch);
  a.meta["seed"] = std::to_string(state.seed);
  const auto& params = state.optimizer->params();
  a.meta["adam.t"] = std::to_string(state.optimizer->step_count());
  for (std::size_t i = 0; i < params.size(); ++i) {
    a.tensors.emplace_back("param/" + params[i].first, params[i].second.value());
    a.tensors.emplace_back("adam.m/" + params[i].first, state.optimizer->first_moments()[i]);
    a.tensors.emplace_back("adam.v/" + params[i].first, state.optimizer->second_moments()[i]);
  }
  write_archive(a, path);
}

ModelConfig checkpoint_config(const std::filesystem::path& path) {
  const TensorArchive a = read_archive(path);
  auto it = a.meta.find("model_config");
  if (a.meta.count("format") == 0 || a.meta.at("format") != kCheckpointFormat || it == a.meta.end())
    throw IoError(path.string() + ": not a checkpoint");
  return parse_model_config(it->second);
}

ModelState load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  const TensorArchive a = read_archive(path);
  if (a.meta.count("format") == 0 || a.meta.at("format") != kCheckpointFormat || a.meta.count("model_config") == 0)
    throw IoError(path.string() + ": not a checkpoint");
  const std::string& stored = a.meta.at("model_config");
  if (expected && expected->fingerprint() != stored)
    throw CompatibilityError(path.string() + ": model configuration mismatch: " +
                             first_difference(stored, expected->fingerprint()));
  ModelConfig cfg = parse_model_config(stored);

  ModelState st;
  try {
    st.epoch = std::stoi(a.meta.at("epoch"));
    st.seed = std::stoull(a.meta.at("seed"));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed checkpoint metadata");
  }
  st.model = std::make_unique<Model>(cfg, st.seed);
  NamedParams params = st.model->trainable_parameters();
  std::vector<Mat> m, v;
  for (auto& [name, p] : params) {
    const Mat* value = a.find("param/" + name);
    const Mat* mm = a.find("adam.m/" + name);
    const Mat* vv = a.find("adam.v/" + name);
    if (!value || !mm || !vv) throw CompatibilityError(path.string() + ": missing tensor for '" + name + "'");
    if (value->rows() != p.rows() || value->cols() != p.cols() || mm->rows() != p.rows() || mm->cols() != p.cols() ||
        vv->rows() != p.rows() || vv->cols() != p.cols())
      throw CompatibilityError(path.string() + ": tensor '" + name + "' has the wrong shape");
    p.mutable_value() = *value;
    m.push_back(*mm);
    v.push_back(*vv);
  }
  const std::size_t expected_tensors = params.size() * 3;
  if (a.tensors.size() != expected_tensors) throw CompatibilityError(path.string() + ": unexpected extra tensors");
  // learning rate is not a model property; resumed training passes its own
  st.optimizer = std::make_unique<Adam>(params, TrainConfig{}.learning_rate);
  st.optimizer->restore(std::stoll(a.meta.count("adam.t") ? a.meta.at("adam.t") : "0"), std::move(m), std::move(v));
  return st;
}

FitResult fit(std::span<const ImageSample> train_set, const ModelConfig& model_config, const TrainConfig& train,
              const FitOptions& options) {
  train.validate();
  if (train_set.empty()) throw InputError("fit: empty training set");
  for (const auto& s : train_set)
    if (s.is_anomalous) throw InputError("fit: training sample " + s.source + " is marked anomalous");

  FitResult result;
  result.state = make_state(model_config, train);
  ModelState& st = result.state;
  Model& model = *st.model;
  const auto features = run_stage("encode", [&] { return model.encode(train_set); });

  Rng rng(train.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<LayerFeatures> batch;

  auto save = [&] {
    if (options.out_dir) save_checkpoint(st, *options.out_dir / "checkpoint.bin");
  };

  for (int epoch = 0; epoch < train.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    double seen = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(train.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(train.batch_size));
      batch.clear();
      for (std::size_t j = b0; j < b1; ++j) batch.push_back(features[order[j]]);
      LossBreakdown loss;
      try {
        ForwardOutputs out = model.forward(batch, true, train.noise_std, train.noise_into, &rng);
        loss = total_loss(out, epoch, model.config());
      } catch (const DivergenceError& e) {
        throw DivergenceError("epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b0 / static_cast<std::size_t>(train.batch_size)) + ": " + e.what());
      }
      ad::backward(loss.total);
      st.optimizer->step();
      const double w = static_cast<double>(b1 - b0);
      rec.distill += w * loss.distill;
      rec.align_encoded += w * loss.align_encoded;
      rec.align_decoded += w * loss.align_decoded;
      rec.constraint += w * loss.constraint;
      rec.moe += w * loss.moe;
      rec.total += w * loss.total_value;
      seen += w;
    }
    rec.distill /= seen;
    rec.align_encoded /= seen;
    rec.align_decoded /= seen;
    rec.constraint /= seen;
    rec.moe /= seen;
    rec.total /= seen;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    st.epoch = epoch + 1;
    result.log.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    if (train.checkpoint_every > 0 && st.epoch % train.checkpoint_every == 0) save();
  }
  save();
  return result;
}

}  // namespace cnd
