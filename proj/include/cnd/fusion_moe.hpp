#pragma once

// Multi-layer fusion projection and the gated mixture-of-experts applied to
// every fused patch embedding.

#include <array>
#include <span>
#include <vector>

#include "cnd/autograd.hpp"
#include "cnd/encoders.hpp"
#include "cnd/nn.hpp"

namespace cnd {

struct FusionConfig {
  double dropout = 0.1;
  /// false: only the deepest tapped layer feeds the projection (C -> C).
  bool multi_layer = true;

  void validate() const;
};

/// Linear projection (3C -> C, or C -> C without multi-layer fusion) with
/// dropout on its output while training.
class FusionProjection {
 public:
  FusionProjection() = default;
  FusionProjection(Index width, const FusionConfig& config, Rng& rng);

  /// `features` are the per-layer patch grids (n x C each).
  ad::Var forward(std::span<const ad::Var, 3> features, bool training, Rng* rng) const;

  const FusionConfig& config() const { return config_; }
  Linear& projection() { return proj_; }
  const Linear& projection() const { return proj_; }
  void collect(NamedParams& out, const std::string& prefix) const { proj_.collect(out, prefix); }

 private:
  FusionConfig config_;
  Linear proj_;
};

struct MoEConfig {
  int num_experts = 5;
  int top_k = 2;
  /// Expert hidden width; 0 means 4 * C.
  Index hidden = 0;
  double epsilon = 1e-10;
  bool enabled = true;

  Index resolved_hidden(Index width) const { return hidden > 0 ? hidden : 4 * width; }
  void validate() const;
};

/// Per-patch routing decision.
struct GateAssignment {
  Mat scores;                        // R x T, softmax over experts
  std::vector<Index> topk_indices;   // R x K, 0-based, highest score first
  Mat weights;                       // R x T, renormalized top-k weights, zero elsewhere
  int top_k = 0;
};

/// Top-k selection and renormalization of already-normalized scores.
GateAssignment gate_from_scores(const Mat& scores, int top_k);

/// softmax(linear(patches)) routed to the top-k experts.
GateAssignment route(const Mat& patches, const Linear& router, int top_k);

/// Two-layer expert MLP.
using Expert = Mlp;

/// z* = sum_k w_k E_k(z) over the selected experts only, one row per patch.
Mat moe_apply(const Mat& patches, const GateAssignment& assignment, std::span<const Expert> experts);

/// Squared coefficient of variation of the per-expert importance
/// I_t = sum_r scores[r, t]: SD_pop(I)^2 / (mean(I)^2 + eps).
ad::Var importance_loss(const ad::Var& scores, double epsilon);
double importance_loss(const Mat& scores, double epsilon);

class MixtureOfExperts {
 public:
  MixtureOfExperts() = default;
  MixtureOfExperts(Index width, const MoEConfig& config, Rng& rng);

  struct Output {
    ad::Var output;   // R x C
    ad::Var scores;   // R x T
    ad::Var weights;  // R x T
    std::vector<Index> selected;
  };

  Output forward(const ad::Var& patches) const;

  const MoEConfig& config() const { return config_; }
  Linear& router() { return router_; }
  const Linear& router() const { return router_; }
  std::vector<Expert>& experts() { return experts_; }
  const std::vector<Expert>& experts() const { return experts_; }
  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  MoEConfig config_;
  Linear router_;
  std::vector<Expert> experts_;
};

}  // namespace cnd
