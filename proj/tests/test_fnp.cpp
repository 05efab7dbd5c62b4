#include <gtest/gtest.h>

#include <cmath>

#include "cnd/errors.hpp"
#include "cnd/fnp.hpp"
#include "test_util.hpp"

using namespace cnd;
using cnd::testing::gradient_error;
using cnd::testing::project;
using cnd::testing::random_mat;

namespace {

TextFeaturePair unit_pair(Index c, std::uint64_t seed) {
  Mat n = random_mat(1, c, seed), a = random_mat(1, c, seed + 1);
  return {ad::Var::constant(Mat(n / n.norm())), ad::Var::constant(Mat(a / a.norm())), 1};
}

PatchFeatureMap feature(int h, int w, Index c, std::uint64_t seed) {
  PatchFeatureMap f;
  f.patches = random_mat(h * w, c, seed);
  f.global_feature = random_mat(1, c, seed + 1);
  f.grid_h = h;
  f.grid_w = w;
  f.layer_index = 1;
  return f;
}

}  // namespace

TEST(ControlMap, EqualTextGivesHalf) {
  TextFeaturePair t = unit_pair(5, 1);
  t.abnormal = t.normal;
  const ControlMap psi = control_map(feature(3, 3, 5, 2), t);
  EXPECT_EQ(psi.values.rows(), 9);
  for (Index i = 0; i < psi.values.size(); ++i) EXPECT_DOUBLE_EQ(psi.values(i), 0.5);
}

TEST(ControlMap, GapOfThree) {
  Mat gn = Mat::Zero(1, 2), ga = Mat::Zero(1, 2);
  gn(0, 0) = 1.0;
  ga(0, 1) = 1.0;
  PatchFeatureMap f;
  f.patches = Mat(1, 2);
  f.patches << 3.5, 0.5;  // alpha - beta = 3
  f.grid_h = f.grid_w = 1;
  const ControlMap psi = control_map(f, {ad::Var::constant(gn), ad::Var::constant(ga), 1});
  EXPECT_NEAR(psi.values(0, 0), 0.5 * (1.0 + std::tanh(3.0)), 1e-15);
  EXPECT_NEAR(psi.values(0, 0), 0.99753, 1e-5);
}

TEST(ControlMap, EntriesStrictlyInsideUnitInterval) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const ControlMap psi = control_map(feature(4, 4, 6, 10 + s), unit_pair(6, 50 + s));
    EXPECT_GT(psi.values.minCoeff(), 0.0);
    EXPECT_LT(psi.values.maxCoeff(), 1.0);
  }
}

TEST(ControlMap, ScaleCovariance) {
  const PatchFeatureMap f = feature(3, 3, 4, 3);
  const TextFeaturePair t = unit_pair(4, 4);
  PatchFeatureMap scaled = f;
  scaled.patches *= 2.0;
  const Mat p1 = control_map(f, t).values, p2 = control_map(scaled, t).values;
  for (Index i = 0; i < p1.size(); ++i) {
    if (p1(i) > 0.5) EXPECT_GE(p2(i), p1(i));
    if (p1(i) < 0.5) EXPECT_LE(p2(i), p1(i));
  }
}

TEST(ControlMap, WidthMismatchIsConfigError) {
  EXPECT_THROW(control_map(feature(2, 2, 4, 1), unit_pair(5, 1)), ConfigError);
}

TEST(Promote, NormTwoHalfPsiAddsQuarter) {
  PatchFeatureMap f;
  f.patches = Mat::Zero(4, 1);
  f.patches(0, 0) = 2.0;  // Frobenius norm 2
  f.grid_h = f.grid_w = 2;
  const ControlMap psi{Mat::Constant(4, 1, 0.5), 1};
  const PromotedFeature p = promote(f, psi);
  EXPECT_DOUBLE_EQ(p.lambda_scale, 0.5);
  EXPECT_LT((p.patches - f.patches - Mat::Constant(4, 1, 0.25)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Promote, EqualTextOffsetsByHalfOverNorm) {
  const PatchFeatureMap f = feature(2, 3, 4, 7);
  TextFeaturePair t = unit_pair(4, 8);
  t.abnormal = t.normal;
  const PromotedFeature p = promote(f, control_map(f, t));
  const double off = 0.5 / f.patches.norm();
  EXPECT_LT((p.patches - (f.patches.array() + off).matrix()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Promote, MatchesTripleLoopOracle) {
  const PatchFeatureMap f = feature(2, 2, 3, 9);
  const ControlMap psi = control_map(f, unit_pair(3, 10));
  double norm2 = 0.0;
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 2; ++w)
      for (int c = 0; c < 3; ++c) norm2 += f.patches(h * 2 + w, c) * f.patches(h * 2 + w, c);
  const PromotedFeature p = promote(f, psi);
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 2; ++w)
      for (int c = 0; c < 3; ++c)
        EXPECT_NEAR(p.patches(h * 2 + w, c), f.patches(h * 2 + w, c) + psi.values(h * 2 + w, 0) / std::sqrt(norm2), 1e-7);
}

TEST(Promote, InvertibleGivenPsiAndLambda) {
  const PatchFeatureMap f = feature(4, 4, 5, 11);
  const ControlMap psi = control_map(f, unit_pair(5, 12));
  EXPECT_LT((unpromote(promote(f, psi), psi) - f.patches).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Promote, ZeroNormIsDegenerate) {
  PatchFeatureMap f;
  f.patches = Mat::Zero(4, 3);
  f.grid_h = f.grid_w = 2;
  EXPECT_THROW(promote(f, ControlMap{Mat::Constant(4, 1, 0.5), 1}), DegenerateInputError);
}

TEST(Promote, BatchUsesPerImageNorm) {
  const Mat a = random_mat(4, 3, 1), b = random_mat(4, 3, 2) * 5.0;
  Mat both(8, 3);
  both << a, b;
  const Mat psi = Mat::Constant(8, 1, 0.5);
  const Mat got = promote(ad::Var::constant(both), ad::Var::constant(psi), 4).value();
  EXPECT_LT((got.topRows(4) - (a.array() + 0.5 / a.norm()).matrix()).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((got.bottomRows(4) - (b.array() + 0.5 / b.norm()).matrix()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(DistillLoss, IdentityAndNegation) {
  std::array<PromotedFeature, 3> enc, neg;
  for (std::size_t i = 0; i < 3; ++i) {
    enc[i] = {random_mat(4, 3, 20 + i), 1.0, 2, 2};
    neg[i] = {-enc[i].patches, 1.0, 2, 2};
  }
  EXPECT_NEAR(distill_loss(enc, enc), 0.0, 1e-6);
  EXPECT_NEAR(distill_loss(enc, neg), 6.0, 1e-6);
}

TEST(DistillLoss, MatchesDotNormOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    std::array<PromotedFeature, 3> enc, dec;
    double want = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      enc[i] = {random_mat(6, 4, 100 + s * 6 + i), 1.0, 2, 3};
      dec[i] = {random_mat(6, 4, 103 + s * 6 + i), 1.0, 2, 3};
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (Index k = 0; k < 24; ++k) {
        dot += enc[i].patches.data()[k] * dec[i].patches.data()[k];
        na += enc[i].patches.data()[k] * enc[i].patches.data()[k];
        nb += dec[i].patches.data()[k] * dec[i].patches.data()[k];
      }
      want += 1.0 - dot / std::sqrt(na * nb);
    }
    const double got = distill_loss(enc, dec);
    EXPECT_NEAR(got, want, 1e-6);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 6.0);
  }
}

TEST(DistillLoss, ZeroNormIsDegenerate) {
  std::array<PromotedFeature, 3> enc, dec;
  for (std::size_t i = 0; i < 3; ++i) {
    enc[i] = {random_mat(4, 3, i), 1.0, 2, 2};
    dec[i] = {Mat::Zero(4, 3), 1.0, 2, 2};
  }
  EXPECT_THROW(distill_loss(enc, dec), DegenerateInputError);
}

TEST(DistillLoss, GradientMatchesFiniteDifferences) {
  // 2x2 grid, C = 4, two images in the batch
  const std::array<ad::Var, 3> enc{ad::Var::constant(random_mat(8, 4, 1)), ad::Var::constant(random_mat(8, 4, 2)),
                                   ad::Var::constant(random_mat(8, 4, 3))};
  for (std::size_t layer = 0; layer < 3; ++layer) {
    auto f = [&](const ad::Var& x) {
      std::array<ad::Var, 3> dec{ad::Var::constant(random_mat(8, 4, 7)), ad::Var::constant(random_mat(8, 4, 8)),
                                 ad::Var::constant(random_mat(8, 4, 9))};
      dec[layer] = x;
      return distill_loss(enc, dec, 4);
    };
    EXPECT_LT(gradient_error(f, random_mat(8, 4, 10 + layer)), 1e-3);
  }
}

TEST(Promotion, GradientThroughControlMapAndNorm) {
  // promoted = f + Psi(f, g)/||f||: check d/d f and d/d g_n on a 2x2x8 grid
  const TextFeaturePair t = unit_pair(8, 30);
  EXPECT_LT(gradient_error(
                [&](const ad::Var& f) { return project(promote(f, control_map(f, t), 4)); }, random_mat(4, 8, 31)),
            1e-3);
  const ad::Var f = ad::Var::constant(random_mat(4, 8, 32));
  EXPECT_LT(gradient_error(
                [&](const ad::Var& gn) {
                  TextFeaturePair tt = t;
                  tt.normal = gn;
                  return project(promote(f, control_map(f, tt), 4));
                },
                t.normal.value()),
            1e-3);
}

TEST(Promotion, FrozenEqualPromptsReduceToOffsetDistillation) {
  // with g_n = g_a the promoted loss equals plain flattened cosine on f + 0.5/||f||
  TextFeaturePair t = unit_pair(4, 40);
  t.abnormal = t.normal;
  std::array<ad::Var, 3> enc, dec, plain_enc, plain_dec;
  for (std::size_t i = 0; i < 3; ++i) {
    const Mat a = random_mat(4, 4, 41 + i), b = random_mat(4, 4, 44 + i);
    enc[i] = promote(ad::Var::constant(a), control_map(ad::Var::constant(a), t), 4);
    dec[i] = promote(ad::Var::constant(b), control_map(ad::Var::constant(b), t), 4);
    plain_enc[i] = ad::Var::constant(Mat((a.array() + 0.5 / a.norm()).matrix()));
    plain_dec[i] = ad::Var::constant(Mat((b.array() + 0.5 / b.norm()).matrix()));
  }
  EXPECT_NEAR(distill_loss(enc, dec, 4).scalar(), distill_loss(plain_enc, plain_dec, 4).scalar(), 1e-12);
}
