#include "cnd/fusion_moe.hpp"

#include <cmath>
#include <string>

#include "cnd/errors.hpp"

namespace cnd {

void FusionConfig::validate() const {
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("fusion dropout must be in [0, 1)");
}

FusionProjection::FusionProjection(Index width, const FusionConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const Index in = config_.multi_layer ? 3 * width : width;
  proj_ = Linear::init(in, width, 1.0 / std::sqrt(static_cast<double>(in)), rng, true);
}

ad::Var FusionProjection::forward(std::span<const ad::Var, 3> features, bool training, Rng* rng) const {
  for (std::size_t i = 1; i < 3; ++i)
    if (features[i].rows() != features[0].rows() || features[i].cols() != features[0].cols())
      throw ConfigError("fuse: layer features differ in shape");
  ad::Var input = config_.multi_layer ? ad::concat_cols(features) : features[2];
  ad::Var out = linear(input, proj_);
  if (training && config_.dropout > 0.0) {
    if (!rng) throw ConfigError("fuse: training-mode dropout needs a random generator");
    std::bernoulli_distribution keep(1.0 - config_.dropout);
    Mat mask(out.rows(), out.cols());
    const double inv_keep = 1.0 / (1.0 - config_.dropout);
    for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? inv_keep : 0.0;
    out = ad::mul(out, ad::Var::constant(std::move(mask)));
  }
  return out;
}

void MoEConfig::validate() const {
  if (num_experts < 1) throw ConfigError("moe: number of experts must be >= 1");
  if (top_k < 1 || top_k > num_experts)
    throw ConfigError("moe: top_k must satisfy 1 <= K <= T (K=" + std::to_string(top_k) +
                      ", T=" + std::to_string(num_experts) + ")");
  if (hidden < 0) throw ConfigError("moe: hidden width must be >= 0");
  if (!(epsilon >= 0.0)) throw ConfigError("moe: epsilon must be >= 0");
}

GateAssignment gate_from_scores(const Mat& scores, int top_k) {
  if (top_k < 1 || top_k > scores.cols())
    throw ConfigError("route: top_k must satisfy 1 <= K <= T (K=" + std::to_string(top_k) +
                      ", T=" + std::to_string(scores.cols()) + ")");
  GateAssignment g;
  g.scores = scores;
  g.top_k = top_k;
  g.weights = ad::topk_renormalize(ad::Var::constant(scores), top_k, &g.topk_indices).value();
  return g;
}

GateAssignment route(const Mat& patches, const Linear& router, int top_k) {
  if (top_k > router.out_features())
    throw ConfigError("route: top_k " + std::to_string(top_k) + " exceeds expert count " +
                      std::to_string(router.out_features()));
  ad::Var scores = ad::softmax_rows(linear(ad::Var::constant(patches), router));
  return gate_from_scores(scores.value(), top_k);
}

namespace {

// Rows routed to each expert, in ascending row order.
std::vector<std::vector<Index>> rows_per_expert(const std::vector<Index>& selected, Index rows, int k, Index experts) {
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(experts));
  for (Index r = 0; r < rows; ++r)
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(selected[static_cast<std::size_t>(r * k + j)])].push_back(r);
  return out;
}

ad::Var mixture(const ad::Var& patches, const ad::Var& weights, const std::vector<Index>& selected, int k,
                std::span<const Expert> experts) {
  const auto routed = rows_per_expert(selected, patches.rows(), k, static_cast<Index>(experts.size()));
  ad::Var out;
  for (std::size_t t = 0; t < experts.size(); ++t) {
    if (routed[t].empty()) continue;
    ad::Var y = mlp(ad::gather_rows(patches, routed[t]), experts[t]);
    ad::Var part = ad::scatter_rows_weighted(y, routed[t], weights, static_cast<Index>(t), patches.rows());
    out = out.defined() ? ad::add(out, part) : part;
  }
  return out;
}

}  // namespace

Mat moe_apply(const Mat& patches, const GateAssignment& assignment, std::span<const Expert> experts) {
  if (assignment.weights.cols() != static_cast<Index>(experts.size()))
    throw ConfigError("moe_apply: assignment covers " + std::to_string(assignment.weights.cols()) + " experts, " +
                      std::to_string(experts.size()) + " given");
  if (assignment.weights.rows() != patches.rows()) throw ConfigError("moe_apply: one assignment per patch required");
  return mixture(ad::Var::constant(patches), ad::Var::constant(assignment.weights), assignment.topk_indices,
                 assignment.top_k, experts)
      .value();
}

ad::Var importance_loss(const ad::Var& scores, double epsilon) {
  if (scores.rows() < 1) throw ConfigError("importance_loss: needs at least one patch");
  const double t = static_cast<double>(scores.cols());
  ad::Var importance = ad::sum_rows(scores);  // 1 x T
  ad::Var mean = ad::scale(ad::sum(importance), 1.0 / t);
  ad::Var centered = ad::sub(importance, ad::matmul(mean, ad::Var::constant(Mat::Ones(1, scores.cols()))));
  ad::Var variance = ad::scale(ad::sum(ad::square(centered)), 1.0 / t);
  return ad::mul(variance, ad::reciprocal(ad::add_scalar(ad::square(mean), epsilon)));
}

double importance_loss(const Mat& scores, double epsilon) {
  return importance_loss(ad::Var::constant(scores), epsilon).scalar();
}

MixtureOfExperts::MixtureOfExperts(Index width, const MoEConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const Index hidden = config_.resolved_hidden(width);
  router_ = Linear::init(width, config_.num_experts, 1.0 / std::sqrt(static_cast<double>(width)), rng, true);
  for (int t = 0; t < config_.num_experts; ++t)
    experts_.push_back(Mlp::init(width, hidden, 1.0 / std::sqrt(static_cast<double>(width)), rng, true));
  // fc2 fan-in is the hidden width
  for (auto& e : experts_) e.fc2.weight.mutable_value() *= std::sqrt(static_cast<double>(width) / hidden);
}

MixtureOfExperts::Output MixtureOfExperts::forward(const ad::Var& patches) const {
  Output out;
  out.scores = ad::softmax_rows(linear(patches, router_));
  out.weights = ad::topk_renormalize(out.scores, config_.top_k, &out.selected);
  out.output = mixture(patches, out.weights, out.selected, config_.top_k, experts_);
  return out;
}

void MixtureOfExperts::collect(NamedParams& out, const std::string& prefix) const {
  router_.collect(out, prefix + ".router");
  for (std::size_t t = 0; t < experts_.size(); ++t) experts_[t].collect(out, prefix + ".experts." + std::to_string(t));
}

}  // namespace cnd
