#include "cnd/fnp.hpp"

#include <string>

#include "cnd/errors.hpp"

namespace cnd {

ad::Var control_map(const ad::Var& patches, const TextFeaturePair& text) {
  if (patches.cols() != text.normal.cols() || patches.cols() != text.abnormal.cols())
    throw ConfigError("control_map: feature width " + std::to_string(patches.cols()) + " != text width " +
                      std::to_string(text.normal.cols()));
  ad::Var alpha = ad::matmul_bt(patches, text.normal);
  ad::Var beta = ad::matmul_bt(patches, text.abnormal);
  return ad::tanh_gate(ad::sub(alpha, beta));
}

ad::Var promote(const ad::Var& patches, const ad::Var& psi, Index rows_per_image) {
  if (psi.rows() != patches.rows() || psi.cols() != 1)
    throw ConfigError("promote: control map must be one value per patch");
  if (rows_per_image < 1 || patches.rows() % rows_per_image != 0)
    throw ConfigError("promote: patch rows not divisible by rows per image");
  ad::Var norms = ad::sqrt(ad::segment_sum(ad::square(patches), rows_per_image));
  for (Index b = 0; b < norms.rows(); ++b)
    if (!(norms.value()(b, 0) > 0.0))
      throw DegenerateInputError("promote: zero-norm feature (image " + std::to_string(b) + ")");
  ad::Var lambda = ad::expand_segments(ad::reciprocal(norms), rows_per_image);
  return ad::add_col(patches, ad::mul(psi, lambda));
}

ad::Var distill_loss(std::span<const ad::Var, 3> encoded, std::span<const ad::Var, 3> decoded, Index rows_per_image) {
  ad::Var total;
  for (std::size_t i = 0; i < 3; ++i) {
    const ad::Var& a = encoded[i];
    const ad::Var& b = decoded[i];
    if (a.rows() != b.rows() || a.cols() != b.cols())
      throw ConfigError("distill_loss: layer " + std::to_string(i + 1) + " shape mismatch");
    ad::Var dots = ad::segment_sum(ad::rowwise_dot(a, b), rows_per_image);
    ad::Var na = ad::sqrt(ad::segment_sum(ad::square(a), rows_per_image));
    ad::Var nb = ad::sqrt(ad::segment_sum(ad::square(b), rows_per_image));
    for (Index r = 0; r < na.rows(); ++r)
      if (!(na.value()(r, 0) > 0.0) || !(nb.value()(r, 0) > 0.0))
        throw DegenerateInputError("distill_loss: zero-norm flattened feature in layer " + std::to_string(i + 1));
    ad::Var cos = ad::mul(dots, ad::reciprocal(ad::mul(na, nb)));
    ad::Var term = ad::mean(ad::add_scalar(ad::neg(cos), 1.0));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

ControlMap control_map(const PatchFeatureMap& feature, const TextFeaturePair& text) {
  ad::Var psi = control_map(ad::Var::constant(feature.patches), text);
  return {psi.value(), feature.layer_index};
}

PromotedFeature promote(const PatchFeatureMap& feature, const ControlMap& psi) {
  ad::Var out = promote(ad::Var::constant(feature.patches), ad::Var::constant(psi.values), feature.patches.rows());
  return {out.value(), 1.0 / feature.patches.norm(), feature.grid_h, feature.grid_w};
}

Mat unpromote(const PromotedFeature& promoted, const ControlMap& psi) {
  Mat out = promoted.patches;
  out.colwise() -= promoted.lambda_scale * psi.values.col(0);
  return out;
}

double distill_loss(std::span<const PromotedFeature, 3> encoded, std::span<const PromotedFeature, 3> decoded) {
  std::array<ad::Var, 3> a, b;
  for (std::size_t i = 0; i < 3; ++i) {
    a[i] = ad::Var::constant(encoded[i].patches);
    b[i] = ad::Var::constant(decoded[i].patches);
  }
  return distill_loss(a, b, encoded[0].patches.rows()).scalar();
}

}  // namespace cnd
