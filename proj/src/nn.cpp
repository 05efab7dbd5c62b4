#include "cnd/nn.hpp"

#include "cnd/errors.hpp"

namespace cnd {

Mat gaussian(Index rows, Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear Linear::init(Index in, Index out, double stddev, Rng& rng, bool trainable) {
  Linear l;
  l.weight = ad::Var::leaf(gaussian(in, out, stddev, rng), trainable);
  l.bias = ad::Var::leaf(Mat::Zero(1, out), trainable);
  return l;
}

void Linear::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

ad::Var linear(const ad::Var& x, const Linear& layer) {
  if (x.cols() != layer.in_features())
    throw ConfigError("linear: input width " + std::to_string(x.cols()) + " != " +
                      std::to_string(layer.in_features()));
  return ad::add_row(ad::matmul(x, layer.weight), layer.bias);
}

LayerNormParams LayerNormParams::init(Index width, bool trainable) {
  return {ad::Var::leaf(Mat::Ones(1, width), trainable), ad::Var::leaf(Mat::Zero(1, width), trainable)};
}

void LayerNormParams::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

Mlp Mlp::init(Index width, Index hidden, double stddev, Rng& rng, bool trainable) {
  Mlp m;
  m.fc1 = Linear::init(width, hidden, stddev, rng, trainable);
  m.fc2 = Linear::init(hidden, width, stddev, rng, trainable);
  return m;
}

void Mlp::collect(NamedParams& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

ad::Var mlp(const ad::Var& x, const Mlp& m) { return linear(ad::gelu(linear(x, m.fc1)), m.fc2); }

BlockParams BlockParams::init(const BlockConfig& config, double stddev, Rng& rng, bool trainable) {
  if (config.width <= 0 || config.heads <= 0 || config.width % config.heads != 0)
    throw ConfigError("block: width must be a positive multiple of heads");
  BlockParams p;
  p.config = config;
  p.ln1 = LayerNormParams::init(config.width, trainable);
  p.q = Linear::init(config.width, config.width, stddev, rng, trainable);
  p.k = Linear::init(config.width, config.width, stddev, rng, trainable);
  p.v = Linear::init(config.width, config.width, stddev, rng, trainable);
  p.out = Linear::init(config.width, config.width, stddev, rng, trainable);
  p.ln2 = LayerNormParams::init(config.width, trainable);
  p.ffn = Mlp::init(config.width, config.mlp_hidden, stddev, rng, trainable);
  return p;
}

void BlockParams::zero_residual_branches() {
  out.weight.mutable_value().setZero();
  out.bias.mutable_value().setZero();
  ffn.fc2.weight.mutable_value().setZero();
  ffn.fc2.bias.mutable_value().setZero();
}

void BlockParams::collect(NamedParams& out_params, const std::string& prefix) const {
  ln1.collect(out_params, prefix + ".ln1");
  q.collect(out_params, prefix + ".attn.q");
  k.collect(out_params, prefix + ".attn.k");
  v.collect(out_params, prefix + ".attn.v");
  out.collect(out_params, prefix + ".attn.out");
  ln2.collect(out_params, prefix + ".ln2");
  ffn.collect(out_params, prefix + ".mlp");
}

ad::Var residual_attention_block(const ad::Var& tokens, const BlockParams& params, Index segment_len) {
  const auto& cfg = params.config;
  if (tokens.cols() != cfg.width)
    throw ConfigError("residual_attention_block: token width " + std::to_string(tokens.cols()) +
                      " != block width " + std::to_string(cfg.width));
  if (tokens.rows() < 1) throw ConfigError("residual_attention_block: empty token sequence");

  ad::Var h = cfg.layer_norm ? ad::layer_norm(tokens, params.ln1.gamma, params.ln1.beta) : tokens;
  ad::Var attn = ad::attention(linear(h, params.q), linear(h, params.k), linear(h, params.v), cfg.heads, segment_len);
  ad::Var x = ad::add(tokens, linear(attn, params.out));
  ad::Var h2 = cfg.layer_norm ? ad::layer_norm(x, params.ln2.gamma, params.ln2.beta) : x;
  return ad::add(x, mlp(h2, params.ffn));
}

}  // namespace cnd
