#include <gtest/gtest.h>

#include <cmath>

#include "cnd/errors.hpp"
#include "cnd/normality_constraint.hpp"
#include "test_util.hpp"

using namespace cnd;
using cnd::testing::gradient_error;
using cnd::testing::random_mat;

namespace {

Mat unit_rows(Mat m) {
  for (Index r = 0; r < m.rows(); ++r) m.row(r) /= m.row(r).norm();
  return m;
}

TextFeatures random_text(Index c, std::uint64_t seed) {
  TextFeatures t;
  for (std::size_t i = 0; i < 3; ++i) {
    t[i].normal = ad::Var::constant(unit_rows(random_mat(1, c, seed + 2 * i)));
    t[i].abnormal = ad::Var::constant(unit_rows(random_mat(1, c, seed + 2 * i + 1)));
  }
  return t;
}

// Direct two-way softmax cross-entropy selecting the normal logit.
double oracle(const std::array<Mat, 3>& globals, const TextFeatures& t, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    double layer = 0.0;
    for (Index b = 0; b < globals[i].rows(); ++b) {
      const Mat e = globals[i].row(b) / globals[i].row(b).norm();
      const long double ln = (e * t[i].normal.value().transpose())(0, 0) / tau;
      const long double la = (e * t[i].abnormal.value().transpose())(0, 0) / tau;
      const long double m = std::max(ln, la);
      layer += static_cast<double>(-(ln - m) + std::log(std::exp(ln - m) + std::exp(la - m)));
    }
    total += layer / globals[i].rows();
  }
  return total;
}

}  // namespace

TEST(AlignmentLoss, SymmetricLogitsGiveThreeLn2) {
  TextFeatures t = random_text(8, 1);
  for (auto& p : t) p.abnormal = p.normal;
  std::array<ad::Var, 3> e;
  for (std::size_t i = 0; i < 3; ++i) e[i] = ad::Var::constant(random_mat(4, 8, 10 + i));
  EXPECT_NEAR(alignment_loss(e, t, 0.001).scalar(), 3.0 * std::log(2.0), 1e-6);
  EXPECT_NEAR(decoded_alignment_loss(e, t, 0.001).scalar(), 3.0 * std::log(2.0), 1e-6);
}

TEST(AlignmentLoss, GapOfTwentyInOneLayer) {
  // e = x-axis; g_n - g_a chosen so the scaled gap is exactly +20 in layer 1
  const double tau = 0.001;
  TextFeatures t;
  Mat e1 = Mat::Zero(1, 2);
  e1(0, 0) = 1.0;
  const double a = 0.01;  // e.g_n - e.g_a = 2a = 0.02 -> gap 20
  Mat gn(1, 2), ga(1, 2);
  gn << a, std::sqrt(1 - a * a);
  ga << -a, std::sqrt(1 - a * a);
  t[0] = {ad::Var::constant(gn), ad::Var::constant(ga), 1};
  for (std::size_t i = 1; i < 3; ++i) t[i] = {ad::Var::constant(gn), ad::Var::constant(gn), static_cast<int>(i) + 1};
  std::array<ad::Var, 3> e{ad::Var::constant(e1), ad::Var::constant(e1), ad::Var::constant(e1)};
  EXPECT_NEAR(alignment_loss(e, t, tau).scalar(), 2.0 * std::log(2.0) + std::log1p(std::exp(-20.0)), 1e-12);
  EXPECT_NEAR(std::log1p(std::exp(-20.0)), 2.06e-9, 1e-11);
}

TEST(AlignmentLoss, MatchesCrossEntropyOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TextFeatures t = random_text(6, 100 + seed);
    std::array<Mat, 3> g;
    std::array<ad::Var, 3> e;
    for (std::size_t i = 0; i < 3; ++i) {
      g[i] = random_mat(3, 6, 200 + seed * 3 + i);
      e[i] = ad::Var::constant(g[i]);
    }
    for (double tau : {0.001, 0.1, 1.0}) EXPECT_NEAR(alignment_loss(e, t, tau).scalar(), oracle(g, t, tau), 1e-6);
  }
}

TEST(AlignmentLoss, DecodedEqualsEncodedOnSameInputs) {
  const TextFeatures t = random_text(6, 3);
  std::array<ad::Var, 3> e;
  for (std::size_t i = 0; i < 3; ++i) e[i] = ad::Var::constant(random_mat(2, 6, 30 + i));
  EXPECT_EQ(alignment_loss(e, t, 0.05).scalar(), decoded_alignment_loss(e, t, 0.05).scalar());
}

TEST(AlignmentLoss, MonotoneInNormalSimilarity) {
  // raising e.g_n with e.g_a fixed: shift g_n along e
  const TextFeatures t = random_text(4, 7);
  const Mat g = random_mat(1, 4, 8);
  std::array<ad::Var, 3> start{ad::Var::constant(g), ad::Var::constant(g), ad::Var::constant(g)};
  double prev = alignment_loss(start, t, 0.5).scalar();
  TextFeatures one = t;
  const Mat e = unit_rows(g);
  for (double delta : {0.01, 0.05, 0.1}) {
    Mat gn = one[0].normal.value();
    TextFeatures shifted = one;
    shifted[0].normal = ad::Var::constant(Mat(gn + delta * e));
    std::array<ad::Var, 3> ev{ad::Var::constant(g), ad::Var::constant(g), ad::Var::constant(g)};
    const double l = alignment_loss(ev, shifted, 0.5).scalar();
    EXPECT_LT(l, prev);
    prev = l;
    one = shifted;
  }
}

TEST(AlignmentLoss, NonPositiveTauIsConfigError) {
  const TextFeatures t = random_text(4, 7);
  std::array<ad::Var, 3> e{ad::Var::constant(random_mat(1, 4, 1)), ad::Var::constant(random_mat(1, 4, 2)),
                           ad::Var::constant(random_mat(1, 4, 3))};
  EXPECT_THROW(alignment_loss(e, t, 0.0), ConfigError);
  EXPECT_THROW(alignment_loss(e, t, -1.0), ConfigError);
}

TEST(AlignmentLoss, GradientMatchesFiniteDifferences) {
  const TextFeatures t = random_text(8, 11);
  const Mat other = random_mat(2, 8, 12);
  for (std::size_t layer = 0; layer < 3; ++layer) {
    auto f = [&](const ad::Var& x) {
      std::array<ad::Var, 3> e{ad::Var::constant(other), ad::Var::constant(other), ad::Var::constant(other)};
      e[layer] = x;
      return alignment_loss(e, t, 0.5);
    };
    EXPECT_LT(gradient_error(f, random_mat(2, 8, 13 + layer), 1e-4), 1e-3);
  }
  // gradient w.r.t. the text features as well
  std::array<ad::Var, 3> e{ad::Var::constant(other), ad::Var::constant(other), ad::Var::constant(other)};
  auto g = [&](const ad::Var& gn) {
    TextFeatures tt = t;
    tt[1].normal = ad::normalize_rows(gn);
    return alignment_loss(e, tt, 0.5);
  };
  EXPECT_LT(gradient_error(g, random_mat(1, 8, 20), 1e-4), 1e-3);
}

TEST(ConstraintLoss, EpochSchedule) {
  ConstraintConfig cfg;
  EXPECT_DOUBLE_EQ(constraint_loss(4, cfg, 1.0, 7.0), 1.0);
  EXPECT_NEAR(constraint_loss(5, cfg, 1.0, 7.0), 1.7, 1e-12);
  EXPECT_NEAR(constraint_loss(50, cfg, 1.0, 7.0), 1.7, 1e-12);
  cfg.gamma = 0.0;
  for (int epoch : {0, 5, 100}) EXPECT_DOUBLE_EQ(constraint_loss(epoch, cfg, 1.0, 7.0), 1.0);
  const ad::Var l1 = ad::Var::constant(Mat::Constant(1, 1, 1.0));
  const ad::Var l2 = ad::Var::constant(Mat::Constant(1, 1, 7.0));
  EXPECT_NEAR(constraint_loss(5, ConstraintConfig{}, l1, l2).scalar(), 1.7, 1e-12);
  EXPECT_FALSE(decoded_term_active(4, ConstraintConfig{}));
  EXPECT_TRUE(decoded_term_active(5, ConstraintConfig{}));
}

TEST(ConstraintLoss, ConfigValidation) {
  ConstraintConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.tau, 0.001);
  EXPECT_EQ(cfg.gamma, 0.1);
  EXPECT_EQ(cfg.theta, 5);
  cfg.tau = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
