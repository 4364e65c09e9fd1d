#pragma once

// Run configuration: a flat "key = value" text format. Every key has a
// default except the corpus paths. '#' starts a comment.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bnce/model.hpp"
#include "bnce/output_head.hpp"

namespace bnce {

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(std::string_view s) {
  if (s == "f32" || s == "float") return Precision::f32;
  if (s == "f64" || s == "double") return Precision::f64;
  throw std::invalid_argument("unknown precision '" + std::string(s) + "'");
}

enum class ValidationMetric { automatic, ppl_n, ppl_f };

inline std::string to_string(ValidationMetric m) {
  switch (m) {
    case ValidationMetric::automatic: return "auto";
    case ValidationMetric::ppl_n: return "ppl_n";
    case ValidationMetric::ppl_f: return "ppl_f";
  }
  return "?";
}

inline ValidationMetric parse_validation_metric(std::string_view s) {
  if (s == "auto") return ValidationMetric::automatic;
  if (s == "ppl_n") return ValidationMetric::ppl_n;
  if (s == "ppl_f") return ValidationMetric::ppl_f;
  throw std::invalid_argument("unknown validation metric '" + std::string(s) + "'");
}

struct TrainConfig {
  HeadType head = HeadType::bnce;
  Index batch_size = 400;
  double initial_lr = 0.4;
  double clip_threshold = 5.0;
  double z_constant = std::exp(9.0);
  Index shared_k = 0;
  Index max_epochs = 10;
  Index patience_epochs = 7;
  std::uint64_t seed = 1;
  Precision precision = Precision::f32;
  Index bptt_window = 20;
  Index log_interval = 100;
  ValidationMetric validation_metric = ValidationMetric::automatic;
  bool report_ppl_f = true;
  Index eval_batch_size = 32;
  bool shuffle = true;  // n-gram batches only
  bool unigram_bias_init = false;  // output bias c_w = ln p_n(w) + ln Z at start

  /// Metric driving the learning-rate schedule.
  ValidationMetric schedule_metric() const {
    if (validation_metric != ValidationMetric::automatic) return validation_metric;
    return head == HeadType::softmax ? ValidationMetric::ppl_f : ValidationMetric::ppl_n;
  }

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (!(initial_lr > 0.0)) errs.push_back("initial_lr must be > 0");
    if (!(clip_threshold > 0.0)) errs.push_back("clip_threshold must be > 0");
    if (!(z_constant > 0.0) || !std::isfinite(z_constant)) errs.push_back("z_constant must be finite and > 0");
    if (batch_size < 1) errs.push_back("batch_size must be >= 1");
    if ((head == HeadType::bnce || head == HeadType::bnce_adaptive) && batch_size + shared_k < 2)
      errs.push_back("batch_size must be >= 2 for bnce (or shared_k >= 1 for bnce_adaptive)");
    if (head == HeadType::bnce && shared_k != 0) errs.push_back("shared_k must be 0 for bnce (use bnce_adaptive)");
    if (head == HeadType::snce && shared_k < 1) errs.push_back("shared_k must be >= 1 for snce");
    if (shared_k < 0) errs.push_back("shared_k must be >= 0");
    if (max_epochs < 0) errs.push_back("max_epochs must be >= 0");
    if (patience_epochs < 1) errs.push_back("patience_epochs must be >= 1");
    if (bptt_window < 1) errs.push_back("bptt_window must be >= 1");
    if (log_interval < 1) errs.push_back("log_interval must be >= 1");
    if (eval_batch_size < 1) errs.push_back("eval_batch_size must be >= 1");
    return errs;
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string train_ids;
  std::string valid_ids;
  std::string vocab;
  std::string out_dir = "run";
};

/// Lists every invalid field, not just the first.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> errors)
      : std::runtime_error(join(errors)), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& e) {
    std::string s = "invalid configuration:";
    for (const auto& x : e) s += "\n  " + x;
    return s;
  }
  std::vector<std::string> errors_;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  // Accepts "exp(x)" so Z can be written as exp(9).
  if (s.rfind("exp(", 0) == 0 && s.back() == ')') return std::exp(parse_double(s.substr(4, s.size() - 5)));
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("trailing characters");
  return v;
}

inline Index parse_index(const std::string& s) {
  std::size_t used = 0;
  const long long v = std::stoll(s, &used);
  if (used != s.size()) throw std::invalid_argument("trailing characters");
  return static_cast<Index>(v);
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument("expected true/false");
}

inline std::vector<Index> parse_index_list(const std::string& s) {
  std::vector<Index> out;
  if (s.empty() || s == "none") return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_index(trim(item)));
  return out;
}

inline std::string format_index_list(const std::vector<Index>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> f = [] {
    std::vector<std::pair<std::string, Field>> v;
    auto add = [&](std::string key, auto set, auto get) { v.push_back({std::move(key), Field{set, get}}); };
    // paths
    add("train_ids", [](RunConfig& c, const std::string& s) { c.train_ids = s; },
        [](const RunConfig& c) { return c.train_ids; });
    add("valid_ids", [](RunConfig& c, const std::string& s) { c.valid_ids = s; },
        [](const RunConfig& c) { return c.valid_ids; });
    add("vocab", [](RunConfig& c, const std::string& s) { c.vocab = s; }, [](const RunConfig& c) { return c.vocab; });
    add("out_dir", [](RunConfig& c, const std::string& s) { c.out_dir = s; },
        [](const RunConfig& c) { return c.out_dir; });
    // model
    add("architecture", [](RunConfig& c, const std::string& s) { c.model.architecture = parse_architecture(s); },
        [](const RunConfig& c) { return to_string(c.model.architecture); });
    add("vocab_size", [](RunConfig& c, const std::string& s) { c.model.vocab_size = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.model.vocab_size); });
    add("embed_dim", [](RunConfig& c, const std::string& s) { c.model.embed_dim = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.model.embed_dim); });
    add("hidden_dims", [](RunConfig& c, const std::string& s) { c.model.hidden_dims = parse_index_list(s); },
        [](const RunConfig& c) { return format_index_list(c.model.hidden_dims); });
    add("recurrent_dim", [](RunConfig& c, const std::string& s) { c.model.recurrent_dim = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.model.recurrent_dim); });
    add("bottleneck_dim", [](RunConfig& c, const std::string& s) { c.model.bottleneck_dim = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.model.bottleneck_dim); });
    add("context_length", [](RunConfig& c, const std::string& s) { c.model.context_length = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.model.context_length); });
    add("init_range", [](RunConfig& c, const std::string& s) { c.model.init_range = parse_double(s); },
        [](const RunConfig& c) { return format_double(c.model.init_range); });
    add("zero_output_init", [](RunConfig& c, const std::string& s) { c.model.zero_output_init = parse_bool(s); },
        [](const RunConfig& c) { return std::string(c.model.zero_output_init ? "true" : "false"); });
    // training
    add("head", [](RunConfig& c, const std::string& s) { c.train.head = parse_head_type(s); },
        [](const RunConfig& c) { return to_string(c.train.head); });
    add("batch_size", [](RunConfig& c, const std::string& s) { c.train.batch_size = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.train.batch_size); });
    add("initial_lr", [](RunConfig& c, const std::string& s) { c.train.initial_lr = parse_double(s); },
        [](const RunConfig& c) { return format_double(c.train.initial_lr); });
    add("clip_threshold", [](RunConfig& c, const std::string& s) { c.train.clip_threshold = parse_double(s); },
        [](const RunConfig& c) { return format_double(c.train.clip_threshold); });
    add("z_constant", [](RunConfig& c, const std::string& s) { c.train.z_constant = parse_double(s); },
        [](const RunConfig& c) { return format_double(c.train.z_constant); });
    add("shared_k", [](RunConfig& c, const std::string& s) { c.train.shared_k = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.train.shared_k); });
    add("max_epochs", [](RunConfig& c, const std::string& s) { c.train.max_epochs = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.train.max_epochs); });
    add("patience_epochs", [](RunConfig& c, const std::string& s) { c.train.patience_epochs = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.train.patience_epochs); });
    add("seed", [](RunConfig& c, const std::string& s) { c.train.seed = std::stoull(s); },
        [](const RunConfig& c) { return std::to_string(c.train.seed); });
    add("precision", [](RunConfig& c, const std::string& s) { c.train.precision = parse_precision(s); },
        [](const RunConfig& c) { return to_string(c.train.precision); });
    add("bptt_window", [](RunConfig& c, const std::string& s) { c.train.bptt_window = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.train.bptt_window); });
    add("log_interval", [](RunConfig& c, const std::string& s) { c.train.log_interval = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.train.log_interval); });
    add("validation_metric",
        [](RunConfig& c, const std::string& s) { c.train.validation_metric = parse_validation_metric(s); },
        [](const RunConfig& c) { return to_string(c.train.validation_metric); });
    add("report_ppl_f", [](RunConfig& c, const std::string& s) { c.train.report_ppl_f = parse_bool(s); },
        [](const RunConfig& c) { return std::string(c.train.report_ppl_f ? "true" : "false"); });
    add("eval_batch_size", [](RunConfig& c, const std::string& s) { c.train.eval_batch_size = parse_index(s); },
        [](const RunConfig& c) { return std::to_string(c.train.eval_batch_size); });
    add("shuffle", [](RunConfig& c, const std::string& s) { c.train.shuffle = parse_bool(s); },
        [](const RunConfig& c) { return std::string(c.train.shuffle ? "true" : "false"); });
    add("unigram_bias_init", [](RunConfig& c, const std::string& s) { c.train.unigram_bias_init = parse_bool(s); },
        [](const RunConfig& c) { return std::string(c.train.unigram_bias_init ? "true" : "false"); });
    return v;
  }();
  return f;
}

}  // namespace detail

/// Applies one "key=value" assignment, appending any problem to errors.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value,
                          std::vector<std::string>& errors) {
  for (const auto& [name, field] : detail::fields()) {
    if (name != key) continue;
    try {
      field.set(cfg, value);
    } catch (const std::exception& e) {
      errors.push_back(key + ": cannot parse '" + value + "' (" + e.what() + ")");
    }
    return;
  }
  errors.push_back("unknown key '" + key + "'");
}

/// Parses "key = value" lines on top of cfg; collects all errors.
inline std::vector<std::string> parse_config_into(RunConfig& cfg, std::istream& in) {
  std::vector<std::string> errors;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    apply_setting(cfg, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)), errors);
  }
  return errors;
}

inline RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  if (auto errs = parse_config_into(cfg, in); !errs.empty()) throw ConfigError(std::move(errs));
  return cfg;
}

inline RunConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : detail::fields()) out += name + " = " + field.get(cfg) + "\n";
  return out;
}

/// Field-level validation across model and training settings.
inline std::vector<std::string> validate_config(const RunConfig& cfg, bool need_paths) {
  std::vector<std::string> errs;
  if (need_paths) {
    if (cfg.train_ids.empty()) errs.push_back("train_ids is required");
    if (cfg.vocab.empty()) errs.push_back("vocab is required");
  }
  ModelConfig m = cfg.model;
  if (m.vocab_size == 0 && need_paths) m.vocab_size = 1;  // resolved from the vocabulary file later
  for (auto& e : m.validate()) errs.push_back(e);
  for (auto& e : cfg.train.validate()) errs.push_back(e);
  return errs;
}

}  // namespace bnce
