#pragma once

// The work behind each command-line subcommand, callable from tests.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cnd/config.hpp"
#include "cnd/data.hpp"
#include "cnd/pipeline.hpp"
#include "cnd/scoring_metrics.hpp"

namespace cnd {

struct TrainSummary {
  std::vector<EpochRecord> log;
  std::uint64_t encoder_hash_before = 0;
  std::uint64_t encoder_hash_after = 0;
};

/// Trains on the pooled train split and writes config.ini, train_log.csv,
/// timing.csv, encoder_hash.txt and checkpoint.bin into `out_dir`.
TrainSummary run_train(const RunConfig& config, const std::filesystem::path& data_root,
                       const std::filesystem::path& out_dir, std::ostream* progress = nullptr);

/// Loss columns only, so identical runs produce identical bytes.
std::string format_train_log(const std::vector<EpochRecord>& log);

MetricsReport run_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_root,
                       const EvalConfig& eval, const std::optional<std::filesystem::path>& report_path);

struct ScoreOutputs {
  std::optional<std::filesystem::path> heatmap;
  std::optional<std::filesystem::path> overlay;
  std::optional<std::filesystem::path> raw;
};

AnomalyResult run_score(const std::filesystem::path& checkpoint, const std::filesystem::path& image,
                        const ScoreOutputs& outputs, double smoothing_sigma = 0.0);

enum class AblationGrid { moe, components };
AblationGrid parse_ablation_grid(const std::string& s);

struct AblationVariant {
  std::string label;
  ModelConfig model;
};

/// components: the seven MLF / CNC / MoE on-off rows. moe: (T, K) pairs.
/// CNC covers promotion and the constraint loss; distillation always stays on.
std::vector<AblationVariant> ablation_variants(const ModelConfig& base, AblationGrid grid);

struct AblationRow {
  std::string label;
  std::uint64_t seed = 0;
  CategoryMetrics mean;
};

/// Trains and evaluates every variant for every seed; writes ablation.csv
/// into `out_dir` when given.
std::vector<AblationRow> run_ablation(const RunConfig& config, const std::vector<AblationVariant>& variants,
                                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& data_root,
                                      const std::optional<std::filesystem::path>& out_dir,
                                      std::ostream* progress = nullptr);

}  // namespace cnd
