// Runs the eight acceptance checks and prints one PASS/FAIL line each.
// Exit status is nonzero when any check fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <string>

#include "cnd/commands.hpp"
#include "cnd/config.hpp"
#include "cnd/data.hpp"
#include "cnd/errors.hpp"
#include "cnd/fnp.hpp"
#include "cnd/fusion_moe.hpp"
#include "cnd/normality_constraint.hpp"
#include "cnd/scoring_metrics.hpp"
#include "metric_oracles.hpp"
#include "test_util.hpp"

using namespace cnd;
using namespace cnd::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int n, bool ok, const std::string& what) {
  std::printf("criterion %d %s  %s\n", n, ok ? "PASS" : "FAIL", what.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Mat unit_row(Index c, std::uint64_t seed) {
  Mat m = random_mat(1, c, seed);
  return m / m.norm();
}

void analytic_identities() {
  const auto t0 = Clock::now();
  double err = 0.0;

  // control map is exactly one half when both prompts coincide
  const Mat g = unit_row(8, 1);
  PatchFeatureMap f;
  f.patches = random_mat(9, 8, 2);
  f.grid_h = f.grid_w = 3;
  const ControlMap psi = control_map(f, {ad::Var::constant(g), ad::Var::constant(g), 1});
  err = std::max(err, (psi.values.array() - 0.5).abs().maxCoeff());

  std::array<PromotedFeature, 3> enc, neg;
  for (std::size_t i = 0; i < 3; ++i) {
    enc[i] = {random_mat(4, 8, 10 + i), 1.0, 2, 2};
    neg[i] = {-enc[i].patches, 1.0, 2, 2};
  }
  err = std::max(err, std::abs(distill_loss(enc, enc)));
  err = std::max(err, std::abs(distill_loss(enc, neg) - 6.0));

  TextFeatures text;
  std::array<ad::Var, 3> globals;
  for (std::size_t i = 0; i < 3; ++i) {
    const ad::Var u = ad::Var::constant(unit_row(8, 20 + i));
    text[i] = {u, u, static_cast<int>(i) + 1};
    globals[i] = ad::Var::constant(random_mat(3, 8, 30 + i));
  }
  const double ln2x3 = 3.0 * std::log(2.0);
  err = std::max(err, std::abs(alignment_loss(globals, text, 0.001).scalar() - ln2x3));
  err = std::max(err, std::abs(decoded_alignment_loss(globals, text, 0.001).scalar() - ln2x3));

  const ConstraintConfig cc;  // theta = 5, gamma = 0.1
  err = std::max(err, std::abs(constraint_loss(cc.theta - 1, cc, 1.0, 7.0) - 1.0));
  err = std::max(err, std::abs(constraint_loss(cc.theta, cc, 1.0, 7.0) - 1.7));
  const bool switch_ok = !decoded_term_active(cc.theta - 1, cc) && decoded_term_active(cc.theta, cc);

  const double secs = seconds_since(t0);
  report(1, err <= 1e-6 && switch_ok && secs < 1.0,
         fmt("analytic identities: max abs error %.2e, runtime %.3f s", err, secs));
}

void gradient_checks() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  // 2x2 grids of width 8, one image
  std::array<ad::Var, 3> other;
  for (std::size_t i = 0; i < 3; ++i) other[i] = ad::Var::constant(random_mat(4, 8, 40 + i));
  TextFeatures text;
  for (std::size_t i = 0; i < 3; ++i)
    text[i] = {ad::Var::constant(unit_row(8, 50 + 2 * i)), ad::Var::constant(unit_row(8, 51 + 2 * i)),
               static_cast<int>(i) + 1};

  worst = std::max(worst, gradient_error(
                              [&](const ad::Var& x) {
                                std::array<ad::Var, 3> dec = other;
                                dec[1] = x;
                                return distill_loss(other, dec, 4);
                              },
                              random_mat(4, 8, 60)));
  auto with_layer = [&](const ad::Var& x) {
    std::array<ad::Var, 3> e{ad::Var::constant(random_mat(1, 8, 61)), x, ad::Var::constant(random_mat(1, 8, 62))};
    return e;
  };
  worst = std::max(worst, gradient_error([&](const ad::Var& x) { return alignment_loss(with_layer(x), text, 0.5); },
                                         random_mat(1, 8, 63), 1e-4));
  worst = std::max(worst,
                   gradient_error([&](const ad::Var& x) { return decoded_alignment_loss(with_layer(x), text, 0.5); },
                                  random_mat(1, 8, 64), 1e-4));
  worst = std::max(worst, gradient_error([](const ad::Var& s) { return importance_loss(ad::softmax_rows(s), 1e-10); },
                                         random_mat(4, 5, 65)));
  worst = std::max(worst, gradient_error(
                              [&](const ad::Var& x) { return project(promote(x, control_map(x, text[0]), 4)); },
                              random_mat(4, 8, 66)));
  const double secs = seconds_since(t0);
  report(2, worst <= 1e-3 && secs < 30.0, fmt("gradient checks: worst relative error %.2e, runtime %.2f s", worst, secs));
}

void routing_properties() {
  Rng rng(70);
  long patches = 0, bad = 0;
  while (patches < 10000) {
    const int t = std::uniform_int_distribution<int>(1, 6)(rng);
    const int k = std::uniform_int_distribution<int>(1, t)(rng);
    Mat s = random_mat(100, t, rng(), 2.0);
    for (Index r = 0; r < s.rows(); ++r) {
      s.row(r) = (s.row(r).array() - s.row(r).maxCoeff()).exp();
      s.row(r) /= s.row(r).sum();
    }
    const GateAssignment g = gate_from_scores(s, k);
    for (Index r = 0; r < 100; ++r) {
      int nonzero = 0;
      for (Index c = 0; c < t; ++c) nonzero += g.weights(r, c) != 0.0;
      if (nonzero != k || std::abs(g.weights.row(r).sum() - 1.0) > 1e-6) ++bad;
    }
    patches += 100;
  }
  const double uniform = importance_loss(Mat(Mat::Constant(64, 5, 0.2)), 1e-10);
  Mat collapse = Mat::Zero(64, 5);
  collapse.col(3).setOnes();
  const double collapsed = importance_loss(collapse, 1e-10);
  report(3, bad == 0 && std::abs(uniform) <= 1e-6 && std::abs(collapsed - 4.0) <= 1e-6,
         fmt("MoE routing: %.0f of %.0f patches violate top-K; importance uniform %.2e, collapse %.9f", double(bad),
             double(patches), uniform, collapsed));
}

void metric_oracles() {
  Rng rng(80);
  double worst_roc = 0.0, worst_ap = 0.0, worst_pro = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = std::uniform_int_distribution<int>(2, 64)(rng);
    const int levels = std::uniform_int_distribution<int>(2, 20)(rng);  // few levels force ties
    std::vector<double> s(static_cast<std::size_t>(n));
    Labels y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      y[static_cast<std::size_t>(i)] = std::uniform_int_distribution<int>(0, 1)(rng);
      s[static_cast<std::size_t>(i)] = std::uniform_int_distribution<int>(0, levels)(rng) + 0.5 * y[static_cast<std::size_t>(i)];
    }
    y[0] = 1;
    y[1] = 0;
    worst_roc = std::max(worst_roc, std::abs(auroc(s, y) - pairwise_auroc(s, y)));
    worst_ap = std::max(worst_ap, std::abs(average_precision(s, y) - threshold_ap(s, y)));

    const int maps = std::uniform_int_distribution<int>(1, 3)(rng);
    const int side = std::uniform_int_distribution<int>(4, 8)(rng);
    const Fixture f = random_fixture(rng(), maps, side, trial % 2 == 0);
    const double limit = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    worst_pro = std::max(worst_pro, std::abs(aupro(f.maps, f.masks, limit) - threshold_aupro(f.maps, f.masks, limit)));
  }
  const double hand = auroc(std::vector<double>{0.9, 0.8, 0.7, 0.6}, Labels{1, 0, 1, 0});
  report(4, worst_roc <= 1e-9 && worst_ap <= 1e-9 && worst_pro <= 1e-6 && std::abs(hand - 0.75) < 1e-12,
         fmt("metric oracles over 200 instances: max diff auroc %.1e, ap %.1e, aupro %.1e; hand case %.4f", worst_roc,
             worst_ap, worst_pro, hand));
}

std::uint64_t feature_hash(const VisionEncoder& encoder, const ImageSample& image) {
  const LayerFeatures f = encoder.encode(image);
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& layer : f) h = hash_matrix(layer.global_feature, hash_matrix(layer.patches, h));
  return h;
}

}  // namespace

int main() {
  const fs::path work = CND_WORK_DIR;
  const fs::path source = CND_SOURCE_DIR;
  try {
    analytic_identities();
    gradient_checks();
    routing_properties();
    metric_oracles();

    // desk-scale end-to-end run
    const fs::path data = work / "synth";
    generate_synthetic(load_synth_spec(source / "configs/synth_desk.ini"), data, true);
    const RunConfig desk = load_run_config(source / "configs/desk.ini");
    const auto test_set = load_dataset(data, Split::test, desk.resolution());
    const VisionEncoder fresh(desk.model.encoder);
    const std::uint64_t features_before = feature_hash(fresh, test_set.front());

    const auto t0 = Clock::now();
    const TrainSummary summary = run_train(desk, data, work / "desk");
    const MetricsReport r = run_eval(work / "desk/checkpoint.bin", data, desk.eval, work / "desk/report.csv");
    const double minutes = seconds_since(t0) / 60.0;
    report(5, r.mean.i_auroc >= 0.85 && r.mean.p_auroc >= 0.85 && minutes <= 15.0,
           fmt("desk run: I-AUROC %.4f, P-AUROC %.4f, AUPRO %.4f, train+eval %.1f min", r.mean.i_auroc, r.mean.p_auroc,
               r.mean.aupro, minutes));

    // the ablation comparison on the same data
    std::vector<AblationVariant> pair;
    for (auto& v : ablation_variants(desk.model, AblationGrid::components))
      if (v.label.rfind("ii ", 0) == 0 || v.label.rfind("v ", 0) == 0) pair.push_back(v);
    const std::vector<std::uint64_t> seeds{42, 43, 44};
    const auto rows = run_ablation(desk, pair, seeds, data, work / "ablation", &std::cerr);
    double off = 0.0, on = 0.0;
    for (const auto& row : rows) (row.label.rfind("v ", 0) == 0 ? on : off) += row.mean.i_auroc / seeds.size();
    report(6, on >= off - 0.01,
           fmt("CNC ablation over 3 seeds (MLF on, MoE off): I-AUROC with CNC %.4f, without %.4f, diff %+.4f", on, off,
               on - off));

    // determinism: two identical short training runs, then evaluation of each
    RunConfig quick = desk;
    quick.train.epochs = 3;
    run_train(quick, data, work / "det_a");
    run_train(quick, data, work / "det_b");
    run_eval(work / "det_a/checkpoint.bin", data, quick.eval, work / "det_a/report.csv");
    run_eval(work / "det_b/checkpoint.bin", data, quick.eval, work / "det_b/report.csv");
    const bool logs_same = slurp(work / "det_a/train_log.csv") == slurp(work / "det_b/train_log.csv");
    const bool csv_same = slurp(work / "det_a/report.csv") == slurp(work / "det_b/report.csv");
    report(7, logs_same && csv_same && !slurp(work / "det_a/train_log.csv").empty(),
           std::string("determinism: train logs ") + (logs_same ? "identical" : "differ") + ", eval CSVs " +
               (csv_same ? "identical" : "differ"));

    const ModelState trained = load_checkpoint(work / "desk/checkpoint.bin");
    const std::uint64_t features_after = feature_hash(trained.model->encoder(), test_set.front());
    report(8, summary.encoder_hash_before == summary.encoder_hash_after && features_before == features_after,
           std::string("frozen encoder: parameter hash ") +
               (summary.encoder_hash_before == summary.encoder_hash_after ? "unchanged" : "changed") +
               ", feature hash " + (features_before == features_after ? "unchanged" : "changed"));
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  return failures == 0 ? 0 : 1;
}
