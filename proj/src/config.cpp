#include "cnd/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "cnd/errors.hpp"

namespace cnd {

void EvalConfig::validate() const {
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ConfigError("eval fpr_limit must be in (0, 1]");
  if (connectivity != 4 && connectivity != 8) throw ConfigError("eval connectivity must be 4 or 8");
  if (!(smoothing_sigma >= 0.0)) throw ConfigError("eval smoothing_sigma must be >= 0");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::array<int, 3> parse_taps(const std::string& key, const std::string& v) {
  if (v == "auto") return {0, 0, 0};
  std::array<int, 3> out{};
  std::istringstream in(v);
  std::string part;
  std::size_t n = 0;
  while (std::getline(in, part, ',')) {
    if (n == 3) throw ConfigError(key + ": expected three comma-separated layers");
    out[n++] = parse_int<int>(key, trim(part));
  }
  if (n != 3) throw ConfigError(key + ": expected three comma-separated layers or 'auto'");
  return out;
}

std::string fmt_taps(const std::array<int, 3>& t) {
  if (t == std::array<int, 3>{0, 0, 0}) return "auto";
  return std::to_string(t[0]) + "," + std::to_string(t[1]) + "," + std::to_string(t[2]);
}

struct Key {
  std::string name;
  bool model;  // part of the checkpoint fingerprint
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define CND_INT(NAME, FIELD, MODEL, HELP)                                                          \
  Key {                                                                                            \
    NAME, MODEL, HELP, [](const RunConfig& c) { return std::to_string(c.FIELD); },                 \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_int<decltype(c.FIELD)>(NAME, v); } \
  }
#define CND_DOUBLE(NAME, FIELD, MODEL, HELP)                                                    \
  Key {                                                                                         \
    NAME, MODEL, HELP, [](const RunConfig& c) { return fmt_double(c.FIELD); },                  \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_double(NAME, v); }             \
  }
#define CND_BOOL(NAME, FIELD, MODEL, HELP)                                                      \
  Key {                                                                                         \
    NAME, MODEL, HELP, [](const RunConfig& c) { return fmt_bool(c.FIELD); },                    \
        [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool(NAME, v); }               \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"encoder.backend", true, "toy_frozen_random or clip_pretrained",
          [](const RunConfig& c) { return to_string(c.model.encoder.kind); },
          [](RunConfig& c, const std::string& v) { c.model.encoder.kind = parse_backend_kind(v); }},
      CND_INT("encoder.depth", model.encoder.depth, true, "number of transformer blocks N"),
      Key{"encoder.tap_layers", true, "three 1-based block indices, or auto for thirds of depth",
          [](const RunConfig& c) { return fmt_taps(c.model.encoder.tap_layers); },
          [](RunConfig& c, const std::string& v) { c.model.encoder.tap_layers = parse_taps("encoder.tap_layers", v); }},
      CND_INT("encoder.patch_size", model.encoder.patch_size, true, "patch side in pixels"),
      CND_INT("encoder.resolution", model.encoder.resolution, true, "input side in pixels; images are resized to it"),
      CND_INT("encoder.width", model.encoder.width, true, "feature width C"),
      CND_INT("encoder.heads", model.encoder.heads, true, "attention heads"),
      CND_INT("encoder.mlp_ratio", model.encoder.mlp_ratio, true, "block MLP hidden width / C"),
      CND_BOOL("encoder.layer_norm", model.encoder.layer_norm, true, "pre-norm layers in the encoder"),
      CND_INT("encoder.seed", model.encoder.seed, true, "seed of the frozen random weights"),
      Key{"encoder.weights", true, "weight archive for clip_pretrained",
          [](const RunConfig& c) { return c.model.encoder.weights_path; },
          [](RunConfig& c, const std::string& v) { c.model.encoder.weights_path = v; }},
      CND_INT("text.dim", model.text_dim, true, "learnable token width D_text"),
      CND_INT("text.prompt_length", model.prompt_length, true, "learnable tokens per prompt M"),
      CND_DOUBLE("fusion.dropout", model.fusion.dropout, true, "dropout after the fusion projection"),
      CND_BOOL("fusion.multi_layer", model.fusion.multi_layer, true, "fuse three layers (false: deepest only)"),
      CND_BOOL("moe.enabled", model.moe.enabled, true, "mixture of experts after fusion"),
      CND_INT("moe.experts", model.moe.num_experts, true, "number of experts T"),
      CND_INT("moe.top_k", model.moe.top_k, true, "experts per patch K"),
      CND_INT("moe.hidden", model.moe.hidden, true, "expert hidden width, 0 for 4C"),
      CND_DOUBLE("moe.epsilon", model.moe.epsilon, true, "importance loss stabilizer"),
      CND_DOUBLE("constraint.tau", model.constraint.tau, true, "temperature"),
      CND_DOUBLE("constraint.gamma", model.constraint.gamma, true, "weight of the decoded alignment term"),
      CND_INT("constraint.theta", model.constraint.theta, true, "epoch at which the decoded term switches on"),
      CND_INT("decoder.heads", model.decoder_heads, true, "decoder attention heads"),
      CND_INT("decoder.mlp_ratio", model.decoder_mlp_ratio, true, "decoder MLP hidden width / C"),
      CND_BOOL("decoder.reverse_pairing", model.reverse_pairing, true, "pair decoded block i with encoded layer 4-i"),
      CND_BOOL("model.use_fnp", model.use_fnp, true, "feature-level normality promotion"),
      CND_BOOL("model.use_constraint", model.use_constraint, true, "cross-modal constraint loss"),
      CND_BOOL("model.use_distill", model.use_distill, true, "distillation loss"),
      CND_BOOL("model.detach_text_in_fnp", model.detach_text_in_fnp, true, "no gradient from promotion into prompts"),
      CND_INT("train.epochs", train.epochs, false, "training epochs"),
      CND_INT("train.batch_size", train.batch_size, false, "images per step"),
      CND_DOUBLE("train.learning_rate", train.learning_rate, false, "Adam learning rate"),
      CND_DOUBLE("train.noise_std", train.noise_std, false, "fusion-input noise std relative to feature std"),
      Key{"train.noise_into", false, "fusion_input or off",
          [](const RunConfig& c) { return to_string(c.train.noise_into); },
          [](RunConfig& c, const std::string& v) { c.train.noise_into = parse_noise_into(v); }},
      CND_INT("train.seed", train.seed, false, "seed for parameters, shuffling, noise and dropout"),
      CND_INT("train.checkpoint_every", train.checkpoint_every, false, "epochs between checkpoints, 0 for end only"),
      CND_DOUBLE("eval.fpr_limit", eval.fpr_limit, false, "AUPRO false-positive-rate limit"),
      CND_INT("eval.connectivity", eval.connectivity, false, "region connectivity for AUPRO, 4 or 8"),
      CND_DOUBLE("eval.smoothing_sigma", eval.smoothing_sigma, false, "Gaussian smoothing of score maps, 0 for none"),
  };
  return table;
}

#undef CND_INT
#undef CND_DOUBLE
#undef CND_BOOL

const Key* find_key(const std::string& name) {
  for (const auto& k : keys())
    if (k.name == name) return &k;
  return nullptr;
}

RunConfig parse_into(const std::string& text, RunConfig cfg, bool model_only) {
  std::istringstream in(text);
  std::string line, section;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      const bool known = std::any_of(keys().begin(), keys().end(),
                                     [&](const Key& k) { return k.name.rfind(section + ".", 0) == 0; });
      if (!known) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of a section");
    const std::string name = section + "." + trim(line.substr(0, eq));
    const Key* key = find_key(name);
    if (!key || (model_only && !key->model)) throw ConfigError(where + ": unknown key '" + name + "'");
    if (!seen.insert(name).second) throw ConfigError(where + ": duplicate key '" + name + "'");
    key->set(cfg, trim(line.substr(eq + 1)));
  }
  return cfg;
}

std::string format_keys(const RunConfig& cfg, bool model_only) {
  std::ostringstream out;
  std::string section;
  for (const auto& k : keys()) {
    if (model_only && !k.model) continue;
    const auto dot = k.name.find('.');
    const std::string s = k.name.substr(0, dot);
    if (s != section) {
      out << "[" << s << "]\n";
      section = s;
    }
    out << k.name.substr(dot + 1) << " = " << k.get(cfg) << "\n";
  }
  return out.str();
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg = parse_into(text, RunConfig{}, false);
  cfg.model.validate();
  cfg.train.validate();
  cfg.eval.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string format_run_config(const RunConfig& config) { return format_keys(config, false); }

std::string format_model_config(const ModelConfig& config) {
  RunConfig rc;
  rc.model = config;
  return format_keys(rc, true);
}

ModelConfig parse_model_config(const std::string& text) {
  RunConfig rc = parse_into(text, RunConfig{}, true);
  rc.model.validate();
  return rc.model;
}

std::vector<ConfigKeyDoc> documented_keys() {
  const RunConfig defaults;
  std::vector<ConfigKeyDoc> out;
  for (const auto& k : keys()) out.push_back({k.name, k.get(defaults), k.help});
  return out;
}

}  // namespace cnd
