#include "cnd/normality_constraint.hpp"

#include <string>

#include "cnd/errors.hpp"

namespace cnd {

void ConstraintConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("constraint: tau must be > 0");
  if (!(gamma >= 0.0)) throw ConfigError("constraint: gamma must be >= 0");
  if (theta < 0) throw ConfigError("constraint: theta must be >= 0");
}

ad::Var alignment_loss(std::span<const ad::Var, 3> globals, const TextFeatures& text, double tau) {
  if (!(tau > 0.0)) throw ConfigError("alignment_loss: tau must be > 0");
  ad::Var total;
  for (std::size_t i = 0; i < 3; ++i) {
    const ad::Var& e = globals[i];
    if (e.cols() != text[i].normal.cols())
      throw ConfigError("alignment_loss: layer " + std::to_string(i + 1) + " global width " +
                        std::to_string(e.cols()) + " != text width " + std::to_string(text[i].normal.cols()));
    ad::Var unit = ad::normalize_rows(e);
    // gap = e.(g_n - g_a) / tau; -log softmax_normal = softplus(-gap)
    ad::Var direction = ad::sub(text[i].normal, text[i].abnormal);
    ad::Var gap = ad::scale(ad::matmul_bt(unit, direction), 1.0 / tau);
    ad::Var term = ad::mean(ad::softplus(ad::neg(gap)));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

double constraint_loss(int epoch, const ConstraintConfig& cfg, double l1, double l2) {
  return decoded_term_active(epoch, cfg) ? l1 + cfg.gamma * l2 : l1;
}

ad::Var constraint_loss(int epoch, const ConstraintConfig& cfg, const ad::Var& l1, const ad::Var& l2) {
  return decoded_term_active(epoch, cfg) ? ad::add(l1, ad::scale(l2, cfg.gamma)) : l1;
}

}  // namespace cnd
