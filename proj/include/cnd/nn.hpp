#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cnd/autograd.hpp"

namespace cnd {

using Rng = std::mt19937_64;

/// Named handles to parameter leaves, in a stable registration order.
using NamedParams = std::vector<std::pair<std::string, ad::Var>>;

Mat gaussian(Index rows, Index cols, double stddev, Rng& rng);

/// y = x W + b with W stored (in x out).
struct Linear {
  ad::Var weight;
  ad::Var bias;

  static Linear init(Index in, Index out, double stddev, Rng& rng, bool trainable);
  Index in_features() const { return weight.rows(); }
  Index out_features() const { return weight.cols(); }
  void collect(NamedParams& out, const std::string& prefix) const;
};

ad::Var linear(const ad::Var& x, const Linear& layer);

struct LayerNormParams {
  ad::Var gamma;
  ad::Var beta;

  static LayerNormParams init(Index width, bool trainable);
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Two-layer perceptron with a GELU between the layers.
struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp init(Index width, Index hidden, double stddev, Rng& rng, bool trainable);
  void collect(NamedParams& out, const std::string& prefix) const;
};

ad::Var mlp(const ad::Var& x, const Mlp& m);

struct BlockConfig {
  Index width = 64;
  int heads = 4;
  Index mlp_hidden = 256;
  /// When false, both pre-norms are skipped (identity), used by scaling checks.
  bool layer_norm = true;
};

/// Pre-norm ViT block: x + Attn(LN(x)), then + MLP(LN(.)).
struct BlockParams {
  BlockConfig config;
  LayerNormParams ln1;
  Linear q, k, v, out;
  LayerNormParams ln2;
  Mlp ffn;

  static BlockParams init(const BlockConfig& config, double stddev, Rng& rng, bool trainable);
  /// Zeroes the attention output and MLP output projections so the block
  /// reduces to its residual path.
  void zero_residual_branches();
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Applies one residual attention block to `tokens` (n x C), where every
/// consecutive run of `segment_len` rows is an independent sequence.
ad::Var residual_attention_block(const ad::Var& tokens, const BlockParams& params, Index segment_len);

}  // namespace cnd
