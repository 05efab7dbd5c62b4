#pragma once

// Sectioned key = value run configuration.
//
//   # comment
//   [encoder]
//   depth = 6
//
// Every key has a default; unknown sections or keys are rejected.

#include <filesystem>
#include <string>
#include <vector>

#include "cnd/pipeline.hpp"

namespace cnd {

struct EvalConfig {
  double fpr_limit = 0.3;
  /// 4 or 8.
  int connectivity = 8;
  /// Gaussian smoothing sigma on score maps in pixels; 0 disables (extension).
  double smoothing_sigma = 0.0;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  /// Dataset resolution; images are resized to this size on load.
  int resolution() const { return model.encoder.resolution; }
};

struct ConfigKeyDoc {
  std::string key;  // section.name
  std::string default_value;
  std::string help;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Every key with its effective value; parses back to the same config.
std::string format_run_config(const RunConfig& config);

/// Model-shaping keys only, used as the checkpoint fingerprint.
std::string format_model_config(const ModelConfig& config);
ModelConfig parse_model_config(const std::string& text);

std::vector<ConfigKeyDoc> documented_keys();

}  // namespace cnd
