#pragma once

#include "avctta/adapt.hpp"
#include "avctta/stream.hpp"

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace avctta {

/// Raised on any config problem; the message carries the offending key and,
/// for file input, the line number.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` text: one assignment per line, `#` comments, no
/// sections. Keys are dotted lowercase identifiers.
class FlatConfig {
 public:
  struct Entry {
    std::string value;
    int line = 0;  // 0 for programmatic overrides
  };

  static FlatConfig parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
      throw ConfigError("cannot open config file: " + path.string());
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_string(ss.str());
  }

  static FlatConfig parse_string(const std::string& text) {
    FlatConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string stripped = strip(line);
      if (stripped.empty() || stripped[0] == '#') continue;
      const auto eq = stripped.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("line " + std::to_string(lineno) +
                          ": expected 'key = value', got '" + stripped + "'");
      }
      const std::string key = strip(stripped.substr(0, eq));
      const std::string value = strip(stripped.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError("line " + std::to_string(lineno) + ": empty key");
      }
      if (cfg.entries_.count(key)) {
        throw ConfigError("line " + std::to_string(lineno) +
                          ": duplicate key '" + key + "'");
      }
      cfg.entries_[key] = Entry{value, lineno};
    }
    return cfg;
  }

  /// --set KEY=VALUE override; replaces any file-provided value.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set expects KEY=VALUE, got '" + assignment + "'");
    }
    entries_[strip(assignment.substr(0, eq))] =
        Entry{strip(assignment.substr(eq + 1)), 0};
  }

  void set(const std::string& key, const std::string& value) {
    entries_[key] = Entry{value, 0};
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  const std::map<std::string, Entry>& entries() const { return entries_; }

  std::string location(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end() || it->second.line == 0) return "key '" + key + "'";
    return "line " + std::to_string(it->second.line) + ", key '" + key + "'";
  }

  std::string get_string(const std::string& key,
                         const std::string& fallback) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second.value;
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const std::int64_t v = std::stoll(it->second.value, &pos);
      if (pos != it->second.value.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(location(key) + ": expected an integer, got '" +
                        it->second.value + "'");
    }
  }

  double get_real(const std::string& key, double fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second.value, &pos);
      if (pos != it->second.value.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(location(key) + ": expected a real number, got '" +
                        it->second.value + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    const std::string& v = it->second.value;
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError(location(key) + ": expected a boolean, got '" + v + "'");
  }

  static std::string strip(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

 private:
  std::map<std::string, Entry> entries_;
};

enum class SweepParameter { Tau, Eta, Batch, Order };

/// Fully typed experiment description assembled from a FlatConfig. All
/// component seeds derive from the single global seed.
struct ExperimentConfig {
  std::uint64_t seed = 42;
  SourceSpec source;
  ModelConfig model;
  double ridge_lambda = 1e-3;
  double value_init_scale = 0.1;
  AdapterConfig adapter;
  std::vector<CorruptionSpec> tasks;  // seeds filled by derivation
  std::string order_label = "forward";
  std::vector<Method> forgetting_methods = {Method::AvCtta,
                                            Method::NaiveContinual};
  std::optional<SweepParameter> sweep_parameter;
  std::vector<std::string> sweep_values;

  TaskSequence make_task_sequence() const;
};

namespace config_detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(FlatConfig::strip(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(FlatConfig::strip(cur));
  return parts;
}

inline Method parse_method(const std::string& v, const std::string& where) {
  if (v == "avctta") return Method::AvCtta;
  if (v == "naive_continual") return Method::NaiveContinual;
  if (v == "source_only") return Method::SourceOnly;
  throw ConfigError(where + ": unknown method '" + v + "'");
}

inline Modality parse_modality(const std::string& v, const std::string& where) {
  if (v == "audio") return Modality::Audio;
  if (v == "visual") return Modality::Visual;
  if (v == "both") return Modality::Both;
  throw ConfigError(where + ": unknown modality '" + v + "'");
}

inline CorruptionKind parse_kind(const std::string& v,
                                 const std::string& where) {
  if (v == "additive_gaussian") return CorruptionKind::AdditiveGaussian;
  if (v == "mean_shift") return CorruptionKind::MeanShift;
  if (v == "variance_scale") return CorruptionKind::VarianceScale;
  if (v == "band_attenuate") return CorruptionKind::BandAttenuate;
  if (v == "blur_boxfilter") return CorruptionKind::BlurBoxfilter;
  throw ConfigError(where + ": unknown corruption kind '" + v + "'");
}

// "modality:kind:severity"
inline CorruptionSpec parse_task(const std::string& v,
                                 const std::string& where) {
  const auto parts = split(v, ':');
  if (parts.size() != 3) {
    throw ConfigError(where +
                      ": expected 'modality:kind:severity', got '" + v + "'");
  }
  CorruptionSpec spec;
  spec.modality = parse_modality(parts[0], where);
  spec.kind = parse_kind(parts[1], where);
  try {
    spec.severity = std::stod(parts[2]);
  } catch (const std::exception&) {
    throw ConfigError(where + ": bad severity '" + parts[2] + "'");
  }
  try {
    spec.validate();
  } catch (const std::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return spec;
}

inline void parse_order(const std::string& label, const std::string& where,
                        TaskOrder& order, std::uint64_t& label_seed) {
  if (label == "forward") {
    order = TaskOrder::Forward;
    label_seed = 0;
    return;
  }
  if (label == "reverse") {
    order = TaskOrder::Reverse;
    label_seed = 0;
    return;
  }
  if (label.rfind("shuffle:", 0) == 0) {
    order = TaskOrder::Shuffle;
    const std::string num = label.substr(8);
    try {
      label_seed = std::stoull(num);
    } catch (const std::exception&) {
      throw ConfigError(where + ": bad shuffle seed '" + num + "'");
    }
    return;
  }
  throw ConfigError(where + ": unknown order '" + label +
                    "' (forward | reverse | shuffle:<seed>)");
}

inline const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = {
      "seed",
      "source.classes",
      "source.samples_per_class",
      "source.visual_h",
      "source.visual_w",
      "source.visual_c",
      "source.audio_t",
      "source.audio_f",
      "source.proto_scale",
      "source.noise_scale",
      "model.embed_dim",
      "model.audio_tokens",
      "model.visual_tokens",
      "model.ridge_lambda",
      "model.value_init_scale",
      "adapter.method",
      "adapter.tau",
      "adapter.eta",
      "adapter.beta",
      "adapter.lr",
      "adapter.policy",
      "adapter.batch_size",
      "adapter.loss_sign",
      "adapter.ema_ordering",
      "adapter.predictions",
      "adapter.reset_moments_on_hit",
      "adapter.retrieval",
      "adapter.exact_mixture_merge",
      "stream.order",
      "sweep.parameter",
      "sweep.values",
      "forgetting.methods",
  };
  return keys;
}

}  // namespace config_detail

inline TaskSequence ExperimentConfig::make_task_sequence() const {
  TaskSequence seq;
  seq.tasks = tasks;
  seq.batch_size = adapter.batch_size;
  std::uint64_t label_seed = 0;
  config_detail::parse_order(order_label, "stream.order", seq.order,
                             label_seed);
  seq.shuffle_seed = derive_seed(seed, "order", label_seed);
  return seq;
}

/// Validates every key against the schema and assembles the typed config.
/// Unknown keys are fatal and reported by name.
inline ExperimentConfig experiment_from_flat(const FlatConfig& flat) {
  using namespace config_detail;

  for (const auto& [key, entry] : flat.entries()) {
    if (key.rfind("task.", 0) == 0) {
      const std::string idx = key.substr(5);
      if (idx.empty() ||
          idx.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError(flat.location(key) + ": unknown key '" + key + "'");
      }
      continue;
    }
    bool known = false;
    for (const auto& k : known_keys()) {
      if (k == key) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError(flat.location(key) + ": unknown key '" + key + "'");
    }
  }

  ExperimentConfig cfg;
  cfg.seed = static_cast<std::uint64_t>(flat.get_int("seed", 42));

  cfg.source.classes = flat.get_int("source.classes", 10);
  cfg.source.samples_per_class = flat.get_int("source.samples_per_class", 50);
  cfg.source.height = flat.get_int("source.visual_h", 16);
  cfg.source.width = flat.get_int("source.visual_w", 16);
  cfg.source.channels = flat.get_int("source.visual_c", 3);
  cfg.source.time_steps = flat.get_int("source.audio_t", 128);
  cfg.source.freq_bins = flat.get_int("source.audio_f", 8);
  cfg.source.proto_scale = flat.get_real("source.proto_scale", 1.0);
  cfg.source.noise_scale = flat.get_real("source.noise_scale", 0.1);
  cfg.source.seed = derive_seed(cfg.seed, "source");

  cfg.model.embed_dim = flat.get_int("model.embed_dim", 16);
  cfg.model.audio_tokens = flat.get_int("model.audio_tokens", 4);
  cfg.model.visual_tokens = flat.get_int("model.visual_tokens", 4);
  cfg.model.classes = cfg.source.classes;
  cfg.model.seed = derive_seed(cfg.seed, "model");
  cfg.ridge_lambda = flat.get_real("model.ridge_lambda", 1e-3);
  cfg.value_init_scale = flat.get_real("model.value_init_scale", 0.1);

  const std::string method = flat.get_string("adapter.method", "avctta");
  cfg.adapter.method = parse_method(method, flat.location("adapter.method"));
  if (cfg.adapter.method != Method::AvCtta) {
    for (const char* key :
         {"adapter.tau", "adapter.eta", "adapter.beta", "adapter.policy",
          "adapter.retrieval", "adapter.exact_mixture_merge"}) {
      if (flat.has(key)) {
        throw ConfigError(flat.location(key) + ": '" + key +
                          "' is only valid for adapter.method = avctta");
      }
    }
  }
  cfg.adapter.tau = flat.get_real("adapter.tau", 0.005);
  const std::string eta = flat.get_string("adapter.eta", "inf");
  if (eta == "inf") {
    cfg.adapter.eta = std::nullopt;
  } else {
    const std::int64_t v = flat.get_int("adapter.eta", 0);
    if (v < 1) {
      throw ConfigError(flat.location("adapter.eta") +
                        ": eta must be a positive integer or 'inf'");
    }
    cfg.adapter.eta = static_cast<std::size_t>(v);
  }
  cfg.adapter.beta = flat.get_real("adapter.beta", 0.99);
  cfg.adapter.learning_rate = flat.get_real("adapter.lr", 1e-4);
  const std::string policy = flat.get_string("adapter.policy", "merge_closest");
  if (policy == "merge_closest") {
    cfg.adapter.policy = BudgetPolicy::MergeClosest;
  } else if (policy == "drop_oldest") {
    cfg.adapter.policy = BudgetPolicy::DropOldest;
  } else {
    throw ConfigError(flat.location("adapter.policy") +
                      ": expected merge_closest | drop_oldest");
  }
  cfg.adapter.batch_size = flat.get_int("adapter.batch_size", 32);
  const std::string sign = flat.get_string("adapter.loss_sign", "sum");
  if (sign == "sum") {
    cfg.adapter.loss_sign = LossSign::SumNegativeEntropy;
  } else if (sign == "subtract") {
    cfg.adapter.loss_sign = LossSign::SubtractNegativeEntropy;
  } else {
    throw ConfigError(flat.location("adapter.loss_sign") +
                      ": expected sum | subtract");
  }
  const std::string ema = flat.get_string("adapter.ema_ordering", "after_step");
  if (ema == "after_step") {
    cfg.adapter.ema_ordering = EmaOrdering::AfterStep;
  } else if (ema == "before_step") {
    cfg.adapter.ema_ordering = EmaOrdering::BeforeStep;
  } else {
    throw ConfigError(flat.location("adapter.ema_ordering") +
                      ": expected after_step | before_step");
  }
  const std::string pred = flat.get_string("adapter.predictions", "post_step");
  if (pred == "post_step") {
    cfg.adapter.prediction_point = PredictionPoint::PostStep;
  } else if (pred == "pre_step") {
    cfg.adapter.prediction_point = PredictionPoint::PreStep;
  } else {
    throw ConfigError(flat.location("adapter.predictions") +
                      ": expected post_step | pre_step");
  }
  cfg.adapter.reset_moments_on_hit =
      flat.get_bool("adapter.reset_moments_on_hit", false);
  cfg.adapter.retrieval_enabled = flat.get_bool("adapter.retrieval", true);
  cfg.adapter.exact_mixture_merge =
      flat.get_bool("adapter.exact_mixture_merge", false);

  cfg.order_label = flat.get_string("stream.order", "forward");
  {  // validate the label eagerly
    TaskOrder order;
    std::uint64_t label_seed;
    parse_order(cfg.order_label, flat.location("stream.order"), order,
                label_seed);
  }

  for (std::size_t i = 0;; ++i) {
    const std::string key = "task." + std::to_string(i);
    if (!flat.has(key)) {
      // contiguity check: any higher-numbered task key is a gap
      for (const auto& [k, entry] : flat.entries()) {
        if (k.rfind("task.", 0) == 0 && std::stoull(k.substr(5)) >= i) {
          throw ConfigError(flat.location(k) + ": task indices must be " +
                            "contiguous from 0; missing '" + key + "'");
        }
      }
      break;
    }
    CorruptionSpec spec = parse_task(flat.get_string(key, ""),
                                     flat.location(key));
    spec.seed = derive_seed(cfg.seed, "task", i);
    cfg.tasks.push_back(spec);
  }
  if (cfg.tasks.empty()) {
    throw ConfigError("config must define at least one task (task.0 = ...)");
  }

  if (flat.has("forgetting.methods")) {
    cfg.forgetting_methods.clear();
    for (const auto& m :
         split(flat.get_string("forgetting.methods", ""), ',')) {
      cfg.forgetting_methods.push_back(
          parse_method(m, flat.location("forgetting.methods")));
    }
  }

  if (flat.has("sweep.parameter")) {
    const std::string p = flat.get_string("sweep.parameter", "");
    if (p == "tau") {
      cfg.sweep_parameter = SweepParameter::Tau;
    } else if (p == "eta") {
      cfg.sweep_parameter = SweepParameter::Eta;
    } else if (p == "batch") {
      cfg.sweep_parameter = SweepParameter::Batch;
    } else if (p == "order") {
      cfg.sweep_parameter = SweepParameter::Order;
    } else {
      throw ConfigError(flat.location("sweep.parameter") +
                        ": expected tau | eta | batch | order");
    }
    for (const auto& v : split(flat.get_string("sweep.values", ""), ',')) {
      if (!v.empty()) cfg.sweep_values.push_back(v);
    }
    if (cfg.sweep_values.empty()) {
      throw ConfigError("sweep.values must list at least one value");
    }
  }

  cfg.source.validate();
  cfg.model.validate();
  cfg.adapter.validate();
  return cfg;
}

}  // namespace avctta
