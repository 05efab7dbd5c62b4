#include <gtest/gtest.h>

#include <cmath>

#include "cnd/autograd.hpp"
#include "cnd/errors.hpp"
#include "cnd/nn.hpp"
#include "test_util.hpp"

using namespace cnd;
using cnd::testing::gradient_error;
using cnd::testing::project;
using cnd::testing::random_mat;

namespace {

constexpr double kTol = 1e-5;

// Loop-based multi-head attention used as an independent oracle.
Mat naive_attention(const Mat& q, const Mat& k, const Mat& v, int heads, Index seg) {
  const Index n = q.rows(), c = q.cols(), dh = c / heads;
  Mat out = Mat::Zero(n, c);
  for (Index s0 = 0; s0 < n; s0 += seg)
    for (int h = 0; h < heads; ++h)
      for (Index i = 0; i < seg; ++i) {
        std::vector<double> logits(static_cast<std::size_t>(seg));
        double mx = -1e300;
        for (Index j = 0; j < seg; ++j) {
          double d = 0.0;
          for (Index t = 0; t < dh; ++t) d += q(s0 + i, h * dh + t) * k(s0 + j, h * dh + t);
          logits[static_cast<std::size_t>(j)] = d / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (Index j = 0; j < seg; ++j)
          for (Index t = 0; t < dh; ++t) out(s0 + i, h * dh + t) += logits[static_cast<std::size_t>(j)] / z * v(s0 + j, h * dh + t);
      }
  return out;
}

}  // namespace

TEST(Autograd, ElementwiseGradients) {
  const Mat x = random_mat(3, 4, 1);
  const ad::Var other = ad::Var::constant(random_mat(3, 4, 2));
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::add(a, other)); }, x), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::mul(a, other)); }, x), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::sub(other, a)); }, x), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::tanh(a)); }, x), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::gelu(a)); }, x), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::softplus(a)); }, x), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::tanh_gate(a)); }, x), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::square(a)); }, x), kTol);
  const Mat pos = x.cwiseAbs().array() + 0.5;
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::sqrt(a)); }, pos), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::reciprocal(a)); }, pos), kTol);
}

TEST(Autograd, BroadcastAndMatrixGradients) {
  const ad::Var a = ad::Var::constant(random_mat(3, 4, 3));
  EXPECT_LT(gradient_error([&](const ad::Var& r) { return project(ad::add_row(a, r)); }, random_mat(1, 4, 4)), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& c) { return project(ad::add_col(a, c)); }, random_mat(3, 1, 5)), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& c) { return project(ad::mul_col(a, c)); }, random_mat(3, 1, 6)), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& s) { return project(ad::mul_scalar(a, s)); }, random_mat(1, 1, 7)), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& b) { return project(ad::matmul(a, b)); }, random_mat(4, 2, 8)), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& b) { return project(ad::matmul_bt(a, b)); }, random_mat(5, 4, 9)), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& x) { return project(ad::matmul(x, ad::Var::constant(random_mat(4, 2, 10)))); },
                           random_mat(3, 4, 11)),
            kTol);
}

TEST(Autograd, ReductionGradients) {
  const Mat x = random_mat(6, 3, 12);
  EXPECT_LT(gradient_error([](const ad::Var& a) { return ad::mean(ad::square(a)); }, x), kTol);
  EXPECT_LT(gradient_error([](const ad::Var& a) { return project(ad::sum_rows(a)); }, x), kTol);
  EXPECT_LT(gradient_error([](const ad::Var& a) { return ad::frobenius_norm(a); }, x), kTol);
  EXPECT_LT(gradient_error([](const ad::Var& a) { return project(ad::segment_sum(a, 3)); }, x), kTol);
  EXPECT_LT(gradient_error([](const ad::Var& a) { return project(ad::expand_segments(a, 3)); }, random_mat(2, 1, 13)), kTol);
  EXPECT_LT(gradient_error([](const ad::Var& a) { return project(ad::normalize_rows(a)); }, x), kTol);
  const ad::Var other = ad::Var::constant(random_mat(6, 3, 14));
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::rowwise_dot(a, other)); }, x), kTol);
}

TEST(Autograd, StructuralGradients) {
  const Mat x = random_mat(6, 3, 15);
  const ad::Var c = ad::Var::constant(random_mat(6, 2, 16));
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::concat_cols(std::vector<ad::Var>{a, c, a})); }, x), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::concat_rows(std::vector<ad::Var>{a, a})); }, x), kTol);
  EXPECT_LT(gradient_error([](const ad::Var& a) { return project(ad::slice_rows(a, 2, 3)); }, x), kTol);
  const std::vector<Index> rows{4, 0, 4, 2};
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::gather_rows(a, rows)); }, x), kTol);
  EXPECT_LT(gradient_error([](const ad::Var& a) { return project(ad::strided_rows(a, 1, 2, 3)); }, x), kTol);
}

TEST(Autograd, NetworkBlockGradients) {
  const Mat x = random_mat(4, 8, 17);
  EXPECT_LT(gradient_error([](const ad::Var& a) { return project(ad::softmax_rows(a)); }, x), kTol);
  const ad::Var g = ad::Var::constant(random_mat(1, 8, 18));
  const ad::Var b = ad::Var::constant(random_mat(1, 8, 19));
  EXPECT_LT(gradient_error([&](const ad::Var& a) { return project(ad::layer_norm(a, g, b)); }, x), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& gg) { return project(ad::layer_norm(ad::Var::constant(x), gg, b)); },
                           random_mat(1, 8, 20)),
            kTol);
  const ad::Var k = ad::Var::constant(random_mat(4, 8, 21));
  const ad::Var v = ad::Var::constant(random_mat(4, 8, 22));
  EXPECT_LT(gradient_error([&](const ad::Var& q) { return project(ad::attention(q, k, v, 2, 2)); }, x), kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& kk) { return project(ad::attention(ad::Var::constant(x), kk, v, 2, 2)); },
                           random_mat(4, 8, 23)),
            kTol);
  EXPECT_LT(gradient_error([&](const ad::Var& vv) { return project(ad::attention(ad::Var::constant(x), k, vv, 2, 4)); },
                           random_mat(4, 8, 24)),
            kTol);
}

TEST(Autograd, AttentionMatchesLoopOracle) {
  const Mat q = random_mat(6, 8, 25), k = random_mat(6, 8, 26), v = random_mat(6, 8, 27);
  const Mat got = ad::attention(ad::Var::constant(q), ad::Var::constant(k), ad::Var::constant(v), 4, 3).value();
  EXPECT_LT((got - naive_attention(q, k, v, 4, 3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Autograd, TopkRenormalizeKeepsKAndSumsToOne) {
  Mat s(2, 4);
  s << 0.1, 0.4, 0.2, 0.3, 0.25, 0.25, 0.25, 0.25;
  std::vector<Index> sel;
  const Mat w = ad::topk_renormalize(ad::Var::constant(s), 2, &sel).value();
  EXPECT_NEAR(w(0, 1), 0.4 / 0.7, 1e-12);
  EXPECT_NEAR(w(0, 3), 0.3 / 0.7, 1e-12);
  EXPECT_EQ(w(0, 0), 0.0);
  // ties go to the lower index
  EXPECT_EQ(sel[2], 0);
  EXPECT_EQ(sel[3], 1);
  Mat p = random_mat(3, 5, 28).cwiseAbs().array() + 0.1;
  EXPECT_LT(gradient_error([](const ad::Var& a) { return project(ad::topk_renormalize(a, 2, nullptr)); }, p), kTol);
}

TEST(Autograd, ScatterRowsWeightedGradient) {
  const std::vector<Index> rows{0, 2};
  const ad::Var w = ad::Var::constant(random_mat(3, 2, 29));
  EXPECT_LT(gradient_error([&](const ad::Var& y) { return project(ad::scatter_rows_weighted(y, rows, w, 1, 3)); },
                           random_mat(2, 4, 30)),
            kTol);
  const ad::Var y = ad::Var::constant(random_mat(2, 4, 31));
  EXPECT_LT(gradient_error([&](const ad::Var& ww) { return project(ad::scatter_rows_weighted(y, rows, ww, 1, 3)); },
                           random_mat(3, 2, 32)),
            kTol);
}

TEST(Autograd, TanhGateStaysDifferentiableInSaturation) {
  ad::Var x = ad::Var::leaf(Mat::Constant(1, 1, 40.0), true);
  ad::backward(ad::sum(ad::tanh_gate(x)));
  EXPECT_GT(x.grad()(0, 0), 0.0);
  EXPECT_NEAR(ad::tanh_gate(ad::Var::constant(Mat::Zero(1, 1))).scalar(), 0.5, 1e-15);
}

TEST(Autograd, GradientsAccumulateAcrossBackwardCalls) {
  ad::Var x = ad::Var::leaf(Mat::Constant(1, 1, 3.0), true);
  ad::backward(ad::square(x));
  ad::backward(ad::square(x));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 12.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Autograd, ConstantsRecordNoGraph) {
  const ad::Var a = ad::Var::constant(random_mat(2, 2, 33));
  const ad::Var b = ad::matmul(a, a);
  EXPECT_FALSE(b.requires_grad());
  EXPECT_TRUE(b.node()->parents.empty());
}

TEST(Autograd, ShapeMismatchThrows) {
  const ad::Var a = ad::Var::constant(Mat::Zero(2, 3));
  const ad::Var b = ad::Var::constant(Mat::Zero(3, 2));
  EXPECT_THROW(ad::add(a, b), ConfigError);
  EXPECT_THROW(ad::matmul(a, a), ConfigError);
}

TEST(Nn, ZeroResidualBlockIsIdentity) {
  Rng rng(5);
  BlockParams p = BlockParams::init({8, 2, 32, true}, 0.3, rng, false);
  p.zero_residual_branches();
  const Mat x = random_mat(6, 8, 34);
  EXPECT_LT((residual_attention_block(ad::Var::constant(x), p, 3).value() - x).cwiseAbs().maxCoeff(), 1e-15);
}
