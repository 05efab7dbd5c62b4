#include "cnd/commands.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "cnd/errors.hpp"

namespace fs = std::filesystem;

namespace cnd {

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(text.data(), static_cast<std::streamsize>(text.size())))
    throw IoError("cannot write " + path.string());
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

MetricOptions metric_options(const EvalConfig& e) {
  e.validate();
  return {e.fpr_limit, e.connectivity};
}

}  // namespace

std::string format_train_log(const std::vector<EpochRecord>& log) {
  std::ostringstream out;
  out << "epoch,distill,align_encoded,align_decoded,constraint,moe,total\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.distill, r.align_encoded,
                  r.align_decoded, r.constraint, r.moe, r.total);
    out << buf;
  }
  return out.str();
}

TrainSummary run_train(const RunConfig& config, const fs::path& data_root, const fs::path& out_dir,
                       std::ostream* progress) {
  config.model.validate();
  config.train.validate();
  ensure_dir(out_dir);
  write_text(out_dir / "config.ini", format_run_config(config));

  const auto train_set = load_dataset(data_root, Split::train, config.resolution());
  if (progress) *progress << "train: " << train_set.size() << " images from " << data_root.string() << "\n";

  FitOptions opts;
  opts.out_dir = out_dir;
  std::ofstream timing(out_dir / "timing.csv", std::ios::trunc);
  if (!timing) throw IoError("cannot write " + (out_dir / "timing.csv").string());
  timing << "epoch,wall_seconds\n";
  opts.on_epoch = [&](const EpochRecord& r) {
    timing << r.epoch << "," << r.wall_seconds << "\n" << std::flush;
    if (progress)
      *progress << "epoch " << r.epoch << " total " << r.total << " distill " << r.distill << " constraint "
                << r.constraint << " moe " << r.moe << " (" << r.wall_seconds << " s)\n"
                << std::flush;
  };

  TrainSummary summary;
  {
    const VisionEncoder probe(config.model.encoder);
    summary.encoder_hash_before = probe.parameter_hash();
  }
  FitResult fitted = fit(train_set, config.model, config.train, opts);
  summary.encoder_hash_after = fitted.state.model->encoder().parameter_hash();
  summary.log = std::move(fitted.log);

  write_text(out_dir / "train_log.csv", format_train_log(summary.log));
  write_text(out_dir / "encoder_hash.txt", "before," + hex64(summary.encoder_hash_before) + "\nafter," +
                                               hex64(summary.encoder_hash_after) + "\n");
  return summary;
}

MetricsReport run_eval(const fs::path& checkpoint, const fs::path& data_root, const EvalConfig& eval,
                       const std::optional<fs::path>& report_path) {
  const MetricOptions options = metric_options(eval);
  ModelState st = load_checkpoint(checkpoint);
  const auto test_set = load_dataset(data_root, Split::test, st.model->config().encoder.resolution);
  MetricsReport report = evaluate(*st.model, test_set, options, eval.smoothing_sigma);
  if (report_path) write_text(*report_path, report.to_csv());
  return report;
}

AnomalyResult run_score(const fs::path& checkpoint, const fs::path& image, const ScoreOutputs& outputs,
                        double smoothing_sigma) {
  ModelState st = load_checkpoint(checkpoint);
  const int res = st.model->config().encoder.resolution;
  ImageSample sample;
  sample.source = image.string();
  const RgbImage raw = read_image(image);
  sample.pixels = (raw.height == res && raw.width == res) ? raw : resize_image(raw, res, res);
  auto results = score_images(*st.model, std::span<const ImageSample>(&sample, 1), smoothing_sigma);
  AnomalyResult& r = results.front();
  if (outputs.heatmap) write_heatmap(r.pixel_map, *outputs.heatmap);
  if (outputs.overlay) export_heatmap(r, sample, *outputs.overlay);
  if (outputs.raw) write_raw_map(r.pixel_map, *outputs.raw);
  return r;
}

AblationGrid parse_ablation_grid(const std::string& s) {
  if (s == "moe") return AblationGrid::moe;
  if (s == "components") return AblationGrid::components;
  throw ConfigError("unknown ablation grid '" + s + "' (expected moe or components)");
}

std::vector<AblationVariant> ablation_variants(const ModelConfig& base, AblationGrid grid) {
  std::vector<AblationVariant> out;
  if (grid == AblationGrid::components) {
    struct Row {
      const char* label;
      bool mlf, cnc, moe;
    };
    const Row rows[] = {{"i", false, false, false}, {"ii", true, false, false}, {"iii", false, true, false},
                        {"iv", false, false, true}, {"v", true, true, false},   {"vi", true, false, true},
                        {"vii", true, true, true}};
    for (const auto& r : rows) {
      ModelConfig m = base;
      m.fusion.multi_layer = r.mlf;
      m.use_fnp = r.cnc;
      m.use_constraint = r.cnc;
      m.moe.enabled = r.moe;
      out.push_back({std::string(r.label) + " mlf=" + (r.mlf ? "1" : "0") + " cnc=" + (r.cnc ? "1" : "0") +
                         " moe=" + (r.moe ? "1" : "0"),
                     m});
    }
  } else {
    const std::pair<int, int> pairs[] = {{1, 1}, {3, 1}, {3, 2}, {5, 1}, {5, 2}, {5, 3}, {6, 2}};
    for (const auto& [t, k] : pairs) {
      ModelConfig m = base;
      m.moe.enabled = true;
      m.moe.num_experts = t;
      m.moe.top_k = k;
      out.push_back({"T=" + std::to_string(t) + " K=" + std::to_string(k), m});
    }
  }
  return out;
}

std::vector<AblationRow> run_ablation(const RunConfig& config, const std::vector<AblationVariant>& variants,
                                      const std::vector<std::uint64_t>& seeds, const fs::path& data_root,
                                      const std::optional<fs::path>& out_dir, std::ostream* progress) {
  if (seeds.empty()) throw ConfigError("ablate: at least one seed required");
  const MetricOptions options = metric_options(config.eval);
  const auto train_set = load_dataset(data_root, Split::train, config.resolution());
  const auto test_set = load_dataset(data_root, Split::test, config.resolution());

  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    for (std::uint64_t seed : seeds) {
      TrainConfig train = config.train;
      train.seed = seed;
      FitResult fitted = fit(train_set, v.model, train);
      const MetricsReport report = evaluate(*fitted.state.model, test_set, options, config.eval.smoothing_sigma);
      rows.push_back({v.label, seed, report.mean});
      if (progress)
        *progress << v.label << " seed " << seed << ": i_auroc " << report.mean.i_auroc << " p_auroc "
                  << report.mean.p_auroc << " aupro " << report.mean.aupro << "\n"
                  << std::flush;
    }
  }

  if (out_dir) {
    ensure_dir(*out_dir);
    write_text(*out_dir / "config.ini", format_run_config(config));
    std::ostringstream csv;
    csv << "variant,seed,i_auroc,p_auroc,aupro,i_map,p_map\n";
    char buf[320];
    std::map<std::string, std::vector<const AblationRow*>> grouped;
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%s,%llu,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.label.c_str(),
                    static_cast<unsigned long long>(r.seed), r.mean.i_auroc, r.mean.p_auroc, r.mean.aupro, r.mean.i_map,
                    r.mean.p_map);
      csv << buf;
      grouped[r.label].push_back(&r);
    }
    for (const auto& v : variants) {
      const auto& g = grouped[v.label];
      CategoryMetrics m;
      for (const auto* r : g) {
        m.i_auroc += r->mean.i_auroc / g.size();
        m.p_auroc += r->mean.p_auroc / g.size();
        m.aupro += r->mean.aupro / g.size();
        m.i_map += r->mean.i_map / g.size();
        m.p_map += r->mean.p_map / g.size();
      }
      std::snprintf(buf, sizeof buf, "%s,mean,%.6f,%.6f,%.6f,%.6f,%.6f\n", v.label.c_str(), m.i_auroc, m.p_auroc,
                    m.aupro, m.i_map, m.p_map);
      csv << buf;
    }
    write_text(*out_dir / "ablation.csv", csv.str());
  }
  return rows;
}

}  // namespace cnd
