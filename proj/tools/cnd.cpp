// Command-line front end: synth, train, eval, score, ablate.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

#include "cnd/commands.hpp"
#include "cnd/errors.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::istringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) {
    try {
      out.push_back(std::stoull(part));
    } catch (const std::exception&) {
      throw cnd::ConfigError("bad seed '" + part + "'");
    }
  }
  return out;
}

cnd::RunConfig config_or_default(const std::string& path) {
  return path.empty() ? cnd::RunConfig{} : cnd::load_run_config(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Anomaly detection with normality-constrained reverse distillation"};
  app.require_subcommand(1);

  std::string spec_path, out_path, config_path, data_root, out_dir, checkpoint, report, image, heatmap, overlay, raw,
      grid = "components", seeds_text;
  bool overwrite = false;
  std::uint64_t seed = 0;
  cnd::EvalConfig eval;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic defect dataset");
  synth->add_option("--spec", spec_path, "Synth spec file ([synth] section); defaults when omitted");
  synth->add_option("--out", out_path, "Output dataset root")->required();
  synth->add_flag("--overwrite", overwrite, "Replace a non-empty output directory");

  auto* train = app.add_subcommand("train", "Train on the pooled train split");
  train->add_option("--config", config_path, "Run configuration file");
  train->add_option("--data-root", data_root, "Dataset root")->required();
  train->add_option("--out-dir", out_dir, "Directory for checkpoint and logs")->required();
  auto* seed_opt = train->add_option("--seed", seed, "Override train.seed");

  auto add_eval_flags = [&](CLI::App* sub) {
    sub->add_option("--fpr-limit", eval.fpr_limit, "AUPRO false-positive-rate limit")->capture_default_str();
    sub->add_option("--connectivity", eval.connectivity, "Region connectivity, 4 or 8")->capture_default_str();
    sub->add_option("--smooth-sigma", eval.smoothing_sigma, "Gaussian smoothing of maps in pixels (0: off)")
        ->capture_default_str();
  };

  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  evalc->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  evalc->add_option("--data-root", data_root, "Dataset root")->required();
  evalc->add_option("--report", report, "CSV report path")->required();
  add_eval_flags(evalc);

  auto* score = app.add_subcommand("score", "Score one image");
  score->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  score->add_option("--image", image, "Input image")->required();
  score->add_option("--heatmap", heatmap, "16-bit grayscale heatmap PNG (fixed scale 6.0)")->required();
  score->add_option("--overlay", overlay, "Overlay PNG on the input image");
  score->add_option("--raw", raw, "Raw float32 map");
  score->add_option("--smooth-sigma", eval.smoothing_sigma, "Gaussian smoothing in pixels (0: off)");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate a grid of variants");
  ablate->add_option("--config", config_path, "Run configuration file");
  ablate->add_option("--data-root", data_root, "Dataset root")->required();
  ablate->add_option("--out-dir", out_dir, "Directory for ablation.csv")->required();
  ablate->add_option("--grid", grid, "moe or components")->check(CLI::IsMember({"moe", "components"}));
  ablate->add_option("--seeds", seeds_text, "Comma-separated seeds (default: train.seed)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::string stage = "cnd";
  try {
    if (synth->parsed()) {
      stage = "synth";
      const cnd::SynthSpec spec = spec_path.empty() ? cnd::SynthSpec{} : cnd::load_synth_spec(spec_path);
      cnd::generate_synthetic(spec, out_path, overwrite);
      std::cout << "wrote " << spec.num_categories << " categories to " << out_path << "\n";
    } else if (train->parsed()) {
      stage = "train";
      cnd::RunConfig cfg = config_or_default(config_path);
      if (*seed_opt) cfg.train.seed = seed;
      const auto summary = cnd::run_train(cfg, data_root, out_dir, &std::cerr);
      std::cout << "trained " << summary.log.size() << " epochs; checkpoint " << (fs::path(out_dir) / "checkpoint.bin")
                << "\n";
    } else if (evalc->parsed()) {
      stage = "eval";
      const auto r = cnd::run_eval(checkpoint, data_root, eval, fs::path(report));
      std::cout << r.to_csv();
    } else if (score->parsed()) {
      stage = "score";
      cnd::ScoreOutputs outs;
      outs.heatmap = heatmap;
      if (!overlay.empty()) outs.overlay = overlay;
      if (!raw.empty()) outs.raw = raw;
      const auto r = cnd::run_score(checkpoint, image, outs, eval.smoothing_sigma);
      std::printf("image_score %.6f\n", r.image_score);
      if (r.degenerate_patches > 0) std::fprintf(stderr, "warning: %d zero-norm patches\n", r.degenerate_patches);
    } else if (ablate->parsed()) {
      stage = "ablate";
      const cnd::RunConfig cfg = config_or_default(config_path);
      const auto seeds = seeds_text.empty() ? std::vector<std::uint64_t>{cfg.train.seed} : parse_seeds(seeds_text);
      const auto variants = cnd::ablation_variants(cfg.model, cnd::parse_ablation_grid(grid));
      cnd::run_ablation(cfg, variants, seeds, data_root, fs::path(out_dir), &std::cerr);
      std::cout << "wrote " << (fs::path(out_dir) / "ablation.csv") << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << stage << ": error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
