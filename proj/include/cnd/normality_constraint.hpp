#pragma once

// Alignment of global visual features with the learned "normal" text anchor,
// and the epoch-gated combination of the encoder-side and decoder-side terms.

#include <span>

#include "cnd/autograd.hpp"
#include "cnd/encoders.hpp"

namespace cnd {

struct ConstraintConfig {
  double tau = 0.001;
  double gamma = 0.1;
  int theta = 5;

  void validate() const;
};

/// Sum over the three layers of the batch-mean two-way softmax cross-entropy
/// selecting the normal prompt:
///   softplus(-(e.g_n - e.g_a) / tau)
/// Global features (B x C per layer) are L2-normalized first.
ad::Var alignment_loss(std::span<const ad::Var, 3> globals, const TextFeatures& text, double tau);

/// Same objective applied to the decoder's global tokens.
inline ad::Var decoded_alignment_loss(std::span<const ad::Var, 3> decoded_globals, const TextFeatures& text,
                                      double tau) {
  return alignment_loss(decoded_globals, text, tau);
}

/// L1 before epoch theta, L1 + gamma * L2 from epoch theta on.
double constraint_loss(int epoch, const ConstraintConfig& cfg, double l1, double l2);
ad::Var constraint_loss(int epoch, const ConstraintConfig& cfg, const ad::Var& l1, const ad::Var& l2);
inline bool decoded_term_active(int epoch, const ConstraintConfig& cfg) { return epoch >= cfg.theta; }

}  // namespace cnd
