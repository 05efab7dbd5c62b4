#pragma once

// Feature-level normality promotion: a cross-modal control map computed from
// patch/text activations is added, scaled by 1/||f||, to every channel of a
// layer's patch grid. Encoded and decoded grids are promoted the same way and
// compared with a single flattened cosine per layer.

#include <array>
#include <span>

#include "cnd/autograd.hpp"
#include "cnd/encoders.hpp"

namespace cnd {

/// Psi over an H x W grid, stored as HW x 1 in row-major grid order.
struct ControlMap {
  Mat values;
  int source_layer = 0;
};

struct PromotedFeature {
  Mat patches;  // HW x C
  double lambda_scale = 0.0;
  int grid_h = 0;
  int grid_w = 0;
};

/// Psi = (1 + tanh(f.g_n - f.g_a)) / 2 per row of `patches`; (n x C) -> (n x 1).
ad::Var control_map(const ad::Var& patches, const TextFeaturePair& text);

/// f + Psi/||f|| broadcast over channels, where `patches` holds consecutive
/// images of `rows_per_image` rows and each image uses its own Frobenius norm.
ad::Var promote(const ad::Var& patches, const ad::Var& psi, Index rows_per_image);

/// Sum over layers of the batch-mean (1 - cos) between flattened per-image grids.
ad::Var distill_loss(std::span<const ad::Var, 3> encoded, std::span<const ad::Var, 3> decoded,
                     Index rows_per_image);

// Value-level conveniences over single feature maps.
ControlMap control_map(const PatchFeatureMap& feature, const TextFeaturePair& text);
PromotedFeature promote(const PatchFeatureMap& feature, const ControlMap& psi);
/// Subtracts lambda * Psi from every channel, recovering the raw grid.
Mat unpromote(const PromotedFeature& promoted, const ControlMap& psi);
double distill_loss(std::span<const PromotedFeature, 3> encoded, std::span<const PromotedFeature, 3> decoded);

}  // namespace cnd
