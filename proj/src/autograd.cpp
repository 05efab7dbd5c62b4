#include "cnd/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>

#include "cnd/errors.hpp"

namespace cnd::ad {

namespace {

using Backward = std::function<void(Node&)>;

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ConfigError(std::string(op) + ": " + what);
}

std::string shape(const Var& v) { return std::to_string(v.rows()) + "x" + std::to_string(v.cols()); }

void require_same(const Var& a, const Var& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), op, "shape mismatch " + shape(a) + " vs " + shape(b));
}

Var make(Mat value, std::vector<Var> parents, Backward fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

void Node::accumulate(const Mat& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var Var::constant(Mat value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::leaf(Mat value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

void Var::zero_grad() {
  if (node_) node_->grad.resize(0, 0);
}

double Var::scalar() const {
  if (rows() != 1 || cols() != 1) throw ConfigError("scalar(): value is " + shape(*this));
  return value()(0, 0);
}

void backward(const Var& root) {
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& top = stack.back();
    Node* n = top.first;
    if (top.second < n->parents.size()) {
      Node* p = n->parents[top.second++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->accumulate(Mat::Ones(root.rows(), root.cols()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  return make(a.value() + b.value(), {a, b}, [](Node& n) {
    for (std::size_t i = 0; i < 2; ++i)
      if (parent(n, i).requires_grad) parent(n, i).accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  return make(a.value() - b.value(), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  return make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) x.accumulate(n.grad.cwiseProduct(y.value));
    if (y.requires_grad) y.accumulate(n.grad.cwiseProduct(x.value));
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a}, [s](Node& n) { parent(n, 0).accumulate(n.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  return make(a.value().array() + s, {a}, [](Node& n) { parent(n, 0).accumulate(n.grad); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var add_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row", shape(a) + " + " + shape(row));
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return make(std::move(out), {a, row}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(n.grad.colwise().sum());
  });
}

Var add_col(const Var& a, const Var& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), "add_col", shape(a) + " + " + shape(col));
  Mat out = a.value();
  out.colwise() += col.value().col(0);
  return make(std::move(out), {a, col}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(n.grad.rowwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), "mul_col", shape(a) + " * " + shape(col));
  Mat out = a.value().array().colwise() * col.value().col(0).array();
  return make(std::move(out), {a, col}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& c = parent(n, 1);
    if (x.requires_grad) x.accumulate(n.grad.array().colwise() * c.value.col(0).array());
    if (c.requires_grad) c.accumulate(n.grad.cwiseProduct(x.value).rowwise().sum());
  });
}

Var mul_scalar(const Var& a, const Var& s) {
  require(s.rows() == 1 && s.cols() == 1, "mul_scalar", "scalar operand is " + shape(s));
  return make(a.value() * s.scalar(), {a, s}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& c = parent(n, 1);
    if (x.requires_grad) x.accumulate(n.grad * c.value(0, 0));
    if (c.requires_grad) c.accumulate(Mat::Constant(1, 1, n.grad.cwiseProduct(x.value).sum()));
  });
}

Var reciprocal(const Var& a) {
  Mat out = a.value().cwiseInverse();
  return make(out, {a}, [](Node& n) { parent(n, 0).accumulate(-n.grad.cwiseProduct(n.value.cwiseProduct(n.value))); });
}

Var sqrt(const Var& a) {
  Mat out = a.value().cwiseSqrt();
  return make(out, {a}, [](Node& n) { parent(n, 0).accumulate(n.grad.cwiseQuotient(2.0 * n.value)); });
}

Var square(const Var& a) {
  return make(a.value().cwiseAbs2(), {a},
              [](Node& n) { parent(n, 0).accumulate(2.0 * n.grad.cwiseProduct(parent(n, 0).value)); });
}

Var tanh(const Var& a) {
  Mat out = a.value().array().tanh();
  return make(out, {a}, [](Node& n) {
    parent(n, 0).accumulate((n.grad.array() * (1.0 - n.value.array().square())).matrix());
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& a) {
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return make(std::move(out), {a}, [](Node& n) {
    const Mat& x = parent(n, 0).value;
    Mat g(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      g.data()[i] = n.grad.data()[i] * d;
    }
    parent(n, 0).accumulate(g);
  });
}

Var softplus(const Var& a) {
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  }
  return make(std::move(out), {a}, [](Node& n) {
    const Mat& x = parent(n, 0).value;
    Mat g(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double sig = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      g.data()[i] = n.grad.data()[i] * sig;
    }
    parent(n, 0).accumulate(g);
  });
}

Var tanh_gate(const Var& a) {
  Mat out = (0.5 * (1.0 + a.value().array().tanh())).matrix();
  return make(std::move(out), {a}, [](Node& n) {
    const Mat& x = parent(n, 0).value;
    Mat g(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) {
      // d/dx = sech^2(x) / 2 = 2 e^{-2|x|} / (1 + e^{-2|x|})^2
      const long double e = std::exp(-2.0L * std::abs(static_cast<long double>(x.data()[i])));
      g.data()[i] = n.grad.data()[i] * static_cast<double>(2.0L * e / ((1.0L + e) * (1.0L + e)));
    }
    parent(n, 0).accumulate(g);
  });
}

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul", shape(a) + " * " + shape(b));
  Mat out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return make(std::move(out), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) {
      Mat g(x.value.rows(), x.value.cols());
      g.noalias() = n.grad * y.value.transpose();
      x.accumulate(g);
    }
    if (y.requires_grad) {
      Mat g(y.value.rows(), y.value.cols());
      g.noalias() = x.value.transpose() * n.grad;
      y.accumulate(g);
    }
  });
}

Var matmul_bt(const Var& a, const Var& b) {
  require(a.cols() == b.cols(), "matmul_bt", shape(a) + " * " + shape(b) + "^T");
  Mat out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  return make(std::move(out), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) {
      Mat g(x.value.rows(), x.value.cols());
      g.noalias() = n.grad * y.value;
      x.accumulate(g);
    }
    if (y.requires_grad) {
      Mat g(y.value.rows(), y.value.cols());
      g.noalias() = n.grad.transpose() * x.value;
      y.accumulate(g);
    }
  });
}

Var sum(const Var& a) {
  return make(Mat::Constant(1, 1, a.value().sum()), {a}, [](Node& n) {
    const Mat& x = parent(n, 0).value;
    parent(n, 0).accumulate(Mat::Constant(x.rows(), x.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  require(a.value().size() > 0, "mean", "empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var sum_rows(const Var& a) {
  return make(a.value().colwise().sum(), {a}, [](Node& n) {
    const Index rows = parent(n, 0).value.rows();
    parent(n, 0).accumulate(n.grad.replicate(rows, 1));
  });
}

Var rowwise_dot(const Var& a, const Var& b) {
  require_same(a, b, "rowwise_dot");
  return make(a.value().cwiseProduct(b.value()).rowwise().sum(), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) x.accumulate(y.value.array().colwise() * n.grad.col(0).array());
    if (y.requires_grad) y.accumulate(x.value.array().colwise() * n.grad.col(0).array());
  });
}

Var frobenius_norm(const Var& a) {
  const double norm = a.value().norm();
  return make(Mat::Constant(1, 1, norm), {a}, [](Node& n) {
    const double norm = n.value(0, 0);
    Node& x = parent(n, 0);
    if (norm > 0.0) x.accumulate(x.value * (n.grad(0, 0) / norm));
  });
}

Var segment_sum(const Var& a, Index segment_rows) {
  require(segment_rows >= 1 && a.rows() % segment_rows == 0, "segment_sum", "rows not divisible by segment length");
  const Index segments = a.rows() / segment_rows;
  Mat out(segments, 1);
  for (Index s = 0; s < segments; ++s) out(s, 0) = a.value().middleRows(s * segment_rows, segment_rows).sum();
  return make(std::move(out), {a}, [segment_rows](Node& n) {
    Node& p = parent(n, 0);
    Mat g(p.value.rows(), p.value.cols());
    for (Index s = 0; s < n.value.rows(); ++s) g.middleRows(s * segment_rows, segment_rows).setConstant(n.grad(s, 0));
    p.accumulate(g);
  });
}

Var expand_segments(const Var& col, Index segment_rows) {
  require(col.cols() == 1 && segment_rows >= 1, "expand_segments", "expects a column and positive length");
  Mat out(col.rows() * segment_rows, 1);
  for (Index s = 0; s < col.rows(); ++s) out.middleRows(s * segment_rows, segment_rows).setConstant(col.value()(s, 0));
  return make(std::move(out), {col}, [segment_rows](Node& n) {
    Node& p = parent(n, 0);
    Mat g(p.value.rows(), 1);
    for (Index s = 0; s < g.rows(); ++s) g(s, 0) = n.grad.middleRows(s * segment_rows, segment_rows).sum();
    p.accumulate(g);
  });
}

Var normalize_rows(const Var& a) {
  Vec norms = a.value().rowwise().norm();
  for (Index r = 0; r < norms.size(); ++r)
    require(norms(r) > 0.0, "normalize_rows", "zero-norm row " + std::to_string(r));
  Mat out = a.value().array().colwise() / norms.array();
  return make(std::move(out), {a}, [norms](Node& n) {
    const Mat& y = n.value;
    Vec proj = y.cwiseProduct(n.grad).rowwise().sum();
    Mat g = n.grad - (y.array().colwise() * proj.array()).matrix();
    g = g.array().colwise() / norms.array();
    parent(n, 0).accumulate(g);
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols", "row mismatch " + shape(p));
    cols += p.cols();
  }
  Mat out(rows, cols);
  std::vector<Index> offsets;
  Index c = 0;
  for (const auto& p : parts) {
    offsets.push_back(c);
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return make(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [offsets](Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      Node& p = parent(n, i);
      if (p.requires_grad) p.accumulate(n.grad.middleCols(offsets[i], p.value.cols()));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows", "column mismatch " + shape(p));
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<Index> offsets;
  Index r = 0;
  for (const auto& p : parts) {
    offsets.push_back(r);
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [offsets](Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      Node& p = parent(n, i);
      if (p.requires_grad) p.accumulate(n.grad.middleRows(offsets[i], p.value.rows()));
    }
  });
}

Var slice_rows(const Var& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows", "range out of bounds");
  return make(a.value().middleRows(start, count), {a}, [start](Node& n) {
    Node& p = parent(n, 0);
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    g.middleRows(start, n.grad.rows()) = n.grad;
    p.accumulate(g);
  });
}

Var gather_rows(const Var& a, std::span<const Index> rows) {
  std::vector<Index> idx(rows.begin(), rows.end());
  Mat out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    require(idx[j] >= 0 && idx[j] < a.rows(), "gather_rows", "row index out of range");
    out.row(static_cast<Index>(j)) = a.value().row(idx[j]);
  }
  return make(std::move(out), {a}, [idx](Node& n) {
    Node& p = parent(n, 0);
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    for (std::size_t j = 0; j < idx.size(); ++j) g.row(idx[j]) += n.grad.row(static_cast<Index>(j));
    p.accumulate(g);
  });
}

Var strided_rows(const Var& a, Index offset, Index stride, Index count) {
  std::vector<Index> idx(static_cast<std::size_t>(count));
  for (Index j = 0; j < count; ++j) idx[static_cast<std::size_t>(j)] = offset + j * stride;
  return gather_rows(a, idx);
}

Var softmax_rows(const Var& a) {
  Mat out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return make(std::move(out), {a}, [](Node& n) {
    const Mat& y = n.value;
    Vec dots = y.cwiseProduct(n.grad).rowwise().sum();
    Mat g = y.cwiseProduct((n.grad.colwise() - dots));
    parent(n, 0).accumulate(g);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index cols = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == cols && beta.rows() == 1 && beta.cols() == cols, "layer_norm",
          "affine parameters do not match width " + std::to_string(cols));
  const Mat& in = x.value();
  Mat xhat(in.rows(), cols);
  Vec inv_std(in.rows());
  for (Index r = 0; r < in.rows(); ++r) {
    const double mu = in.row(r).mean();
    const double var = (in.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (in.row(r).array() - mu) * inv_std(r);
  }
  Mat out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& n) {
    Node& px = parent(n, 0);
    Node& pg = parent(n, 1);
    Node& pb = parent(n, 2);
    if (pg.requires_grad) pg.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (pb.requires_grad) pb.accumulate(n.grad.colwise().sum());
    if (px.requires_grad) {
      Mat dxhat = n.grad.array().rowwise() * pg.value.row(0).array();
      Vec mean_d = dxhat.rowwise().mean();
      Vec mean_dx = dxhat.cwiseProduct(xhat).rowwise().mean();
      Mat g = dxhat;
      g.colwise() -= mean_d;
      g -= (xhat.array().colwise() * mean_dx.array()).matrix();
      g = g.array().colwise() * inv_std.array();
      px.accumulate(g);
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, Index segment_len) {
  require_same(q, k, "attention");
  require_same(q, v, "attention");
  const Index n = q.rows();
  const Index width = q.cols();
  require(heads >= 1 && width % heads == 0, "attention", "width not divisible by heads");
  require(segment_len >= 1 && n % segment_len == 0, "attention", "rows not divisible by segment length");
  const Index dh = width / heads;
  const Index segments = n / segment_len;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Mat>>();
  probs->reserve(static_cast<std::size_t>(segments * heads));
  Mat out(n, width);
  Mat scores(segment_len, segment_len);
  for (Index s = 0; s < segments; ++s) {
    for (Index h = 0; h < heads; ++h) {
      auto qb = q.value().block(s * segment_len, h * dh, segment_len, dh);
      auto kb = k.value().block(s * segment_len, h * dh, segment_len, dh);
      auto vb = v.value().block(s * segment_len, h * dh, segment_len, dh);
      scores.noalias() = qb * kb.transpose();
      scores *= scale_factor;
      for (Index r = 0; r < segment_len; ++r) {
        auto row = scores.row(r);
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        row /= row.sum();
      }
      out.block(s * segment_len, h * dh, segment_len, dh).noalias() = scores * vb;
      probs->push_back(scores);
    }
  }
  return make(std::move(out), {q, k, v}, [probs, heads, segment_len, dh, scale_factor](Node& node) {
    Node& pq = parent(node, 0);
    Node& pk = parent(node, 1);
    Node& pv = parent(node, 2);
    const Index n = node.value.rows();
    const Index width = node.value.cols();
    Mat gq = Mat::Zero(n, width);
    Mat gk = Mat::Zero(n, width);
    Mat gv = Mat::Zero(n, width);
    Mat dp(segment_len, segment_len);
    const Index segments = n / segment_len;
    for (Index s = 0; s < segments; ++s) {
      for (Index h = 0; h < heads; ++h) {
        const Mat& p = (*probs)[static_cast<std::size_t>(s * heads + h)];
        const Index r0 = s * segment_len;
        const Index c0 = h * dh;
        auto go = node.grad.block(r0, c0, segment_len, dh);
        auto qb = pq.value.block(r0, c0, segment_len, dh);
        auto kb = pk.value.block(r0, c0, segment_len, dh);
        auto vb = pv.value.block(r0, c0, segment_len, dh);
        gv.block(r0, c0, segment_len, dh).noalias() = p.transpose() * go;
        dp.noalias() = go * vb.transpose();
        Vec dots = p.cwiseProduct(dp).rowwise().sum();
        Mat ds = p.cwiseProduct(dp.colwise() - dots) * scale_factor;
        gq.block(r0, c0, segment_len, dh).noalias() = ds * kb;
        gk.block(r0, c0, segment_len, dh).noalias() = ds.transpose() * qb;
      }
    }
    if (pq.requires_grad) pq.accumulate(gq);
    if (pk.requires_grad) pk.accumulate(gk);
    if (pv.requires_grad) pv.accumulate(gv);
  });
}

Var topk_renormalize(const Var& scores, int k, std::vector<Index>* selected) {
  const Index rows = scores.rows();
  const Index cols = scores.cols();
  require(k >= 1 && k <= cols, "topk_renormalize", "k must be in [1, " + std::to_string(cols) + "]");
  const Mat& s = scores.value();
  Mat out = Mat::Zero(rows, cols);
  std::vector<Index> chosen(static_cast<std::size_t>(rows * k));
  std::vector<Index> order(static_cast<std::size_t>(cols));
  for (Index r = 0; r < rows; ++r) {
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return s(r, a) > s(r, b); });
    double total = 0.0;
    for (int j = 0; j < k; ++j) total += s(r, order[static_cast<std::size_t>(j)]);
    require(total > 0.0, "topk_renormalize", "selected scores sum to zero");
    for (int j = 0; j < k; ++j) {
      const Index c = order[static_cast<std::size_t>(j)];
      out(r, c) = s(r, c) / total;
      chosen[static_cast<std::size_t>(r * k + j)] = c;
    }
  }
  if (selected) *selected = chosen;
  return make(std::move(out), {scores}, [chosen, k](Node& n) {
    const Mat& s = parent(n, 0).value;
    Mat g = Mat::Zero(s.rows(), s.cols());
    for (Index r = 0; r < s.rows(); ++r) {
      double total = 0.0;
      double weighted = 0.0;
      for (int j = 0; j < k; ++j) {
        const Index c = chosen[static_cast<std::size_t>(r * k + j)];
        total += s(r, c);
        weighted += n.grad(r, c) * s(r, c);
      }
      for (int j = 0; j < k; ++j) {
        const Index c = chosen[static_cast<std::size_t>(r * k + j)];
        g(r, c) = n.grad(r, c) / total - weighted / (total * total);
      }
    }
    parent(n, 0).accumulate(g);
  });
}

Var scatter_rows_weighted(const Var& y, std::span<const Index> rows, const Var& weights, Index column,
                          Index n_out) {
  require(static_cast<Index>(rows.size()) == y.rows(), "scatter_rows_weighted", "row index count mismatch");
  require(weights.rows() == n_out && column >= 0 && column < weights.cols(), "scatter_rows_weighted",
          "weight matrix shape mismatch");
  std::vector<Index> idx(rows.begin(), rows.end());
  Mat out = Mat::Zero(n_out, y.cols());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    require(idx[j] >= 0 && idx[j] < n_out, "scatter_rows_weighted", "row index out of range");
    out.row(idx[j]) += weights.value()(idx[j], column) * y.value().row(static_cast<Index>(j));
  }
  return make(std::move(out), {y, weights}, [idx, column](Node& n) {
    Node& py = parent(n, 0);
    Node& pw = parent(n, 1);
    if (py.requires_grad) {
      Mat g(py.value.rows(), py.value.cols());
      for (std::size_t j = 0; j < idx.size(); ++j)
        g.row(static_cast<Index>(j)) = pw.value(idx[j], column) * n.grad.row(idx[j]);
      py.accumulate(g);
    }
    if (pw.requires_grad) {
      Mat g = Mat::Zero(pw.value.rows(), pw.value.cols());
      for (std::size_t j = 0; j < idx.size(); ++j)
        g(idx[j], column) += py.value.row(static_cast<Index>(j)).dot(n.grad.row(idx[j]));
      pw.accumulate(g);
    }
  });
}

}  // namespace cnd::ad
