#pragma once

#include "avctta/adapt.hpp"
#include "avctta/config.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace avctta {

inline constexpr int kSummarySchemaVersion = 1;

namespace harness_detail {

// Shortest-exact double formatting for CSV cells; reruns must be
// byte-identical, so no locale-dependent streams.
inline std::string format_double(double v) {
  char buf[64];
  if (std::isfinite(v) && v == std::floor(v) && std::abs(v) < 1e15) {
    std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(v));
    return buf;
  }
  double roundtrip = 0;
  for (int precision = 1; precision <= 16; ++precision) {
    char probe[64];
    std::snprintf(probe, sizeof(probe), "%.*g", precision, v);
    std::sscanf(probe, "%lf", &roundtrip);
    if (roundtrip == v) return probe;
  }
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void atomic_write(const std::filesystem::path& path,
                         const std::string& contents) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) {
      throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    }
    os << contents;
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace harness_detail

/// steps.csv, one row per stream batch. min_dist uses the literal string
/// "NaN" when no distance exists (empty buffer, or a method without one).
inline std::string steps_csv(const std::vector<StepRecord>& steps) {
  using harness_detail::format_double;
  std::string out =
      "step,task,batch_acc,hit,min_dist,buffer_size,l_conf,l_ne,total_loss\n";
  for (const auto& r : steps) {
    out += std::to_string(r.step);
    out += ',';
    out += std::to_string(r.task);
    out += ',';
    out += format_double(r.batch_accuracy);
    out += ',';
    out += r.hit ? '1' : '0';
    out += ',';
    out += r.min_distance ? format_double(*r.min_distance) : "NaN";
    out += ',';
    out += std::to_string(r.buffer_size);
    out += ',';
    out += format_double(r.l_conf);
    out += ',';
    out += format_double(r.l_ne);
    out += ',';
    out += format_double(r.total_loss);
    out += '\n';
  }
  return out;
}

inline nlohmann::ordered_json summary_json(const ExperimentConfig& cfg,
                                           const RunSummary& summary) {
  nlohmann::ordered_json j;
  j["schema_version"] = kSummarySchemaVersion;
  j["seed"] = cfg.seed;
  j["method"] = to_string(cfg.adapter.method);
  j["order"] = cfg.order_label;
  j["tau"] = cfg.adapter.tau;
  j["eta"] = cfg.adapter.eta ? nlohmann::ordered_json(*cfg.adapter.eta)
                             : nlohmann::ordered_json("inf");
  j["beta"] = cfg.adapter.beta;
  j["learning_rate"] = cfg.adapter.learning_rate;
  j["batch_size"] = cfg.adapter.batch_size;
  j["tasks"] = [&] {
    std::vector<std::string> names;
    for (const auto& t : cfg.tasks) {
      names.push_back(std::string(to_string(t.modality)) + ":" +
                      to_string(t.kind) + ":" +
                      harness_detail::format_double(t.severity));
    }
    return names;
  }();
  j["per_task_accuracy"] = summary.per_task_accuracy;
  j["mean_accuracy"] = summary.mean_accuracy;
  j["forgetting_points"] = summary.forgetting_points;
  j["hit_rate_overall"] = summary.hit_rate_overall;
  j["hit_rate_per_task"] = summary.hit_rate_per_task;
  j["final_buffer_size"] = summary.final_buffer_size;
  return j;
}

/// Reads a summary back, failing loudly on version or shape problems.
inline nlohmann::json load_run_summary(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(is);
  if (!j.contains("schema_version") ||
      j["schema_version"].get<int>() != kSummarySchemaVersion) {
    throw std::runtime_error(path.string() +
                             ": unsupported summary schema version");
  }
  return j;
}

/// Builds the full pipeline for one experiment and runs the configured
/// method over the stream.
inline RunResult execute_run(const ExperimentConfig& cfg) {
  const SourceDataset source = make_source(cfg.source);
  const SourceModel model =
      fit_source_model(source, cfg.model, cfg.ridge_lambda,
                       cfg.value_init_scale);
  return run_stream(cfg.adapter, cfg.make_task_sequence(), source, model);
}

/// `run`: steps.csv + summary.json in out_dir.
inline void cmd_run(const ExperimentConfig& cfg,
                    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const RunResult result = execute_run(cfg);
  harness_detail::atomic_write(out_dir / "steps.csv", steps_csv(result.steps));
  harness_detail::atomic_write(out_dir / "summary.json",
                               summary_json(cfg, result.summary).dump(2) + "\n");
}

namespace harness_detail {

inline ExperimentConfig with_sweep_value(const ExperimentConfig& base,
                                         SweepParameter param,
                                         const std::string& value) {
  ExperimentConfig cfg = base;
  switch (param) {
    case SweepParameter::Tau:
      cfg.adapter.tau = std::stod(value);
      break;
    case SweepParameter::Eta:
      if (value == "inf") {
        cfg.adapter.eta = std::nullopt;
      } else {
        cfg.adapter.eta = static_cast<std::size_t>(std::stoull(value));
      }
      break;
    case SweepParameter::Batch:
      cfg.adapter.batch_size = static_cast<Index>(std::stoll(value));
      break;
    case SweepParameter::Order:
      cfg.order_label = value;
      break;
  }
  return cfg;
}

inline std::string sweep_parameter_name(SweepParameter p) {
  switch (p) {
    case SweepParameter::Tau: return "tau";
    case SweepParameter::Eta: return "eta";
    case SweepParameter::Batch: return "batch";
    case SweepParameter::Order: return "order";
  }
  return "?";
}

inline std::string sanitize_for_path(std::string v) {
  for (char& c : v) {
    if (c == ':' || c == '/' || c == '\\') c = '_';
  }
  return v;
}

}  // namespace harness_detail

/// `sweep`: one run per value (each with its own steps.csv + summary.json
/// under <out>/<param>_<value>/), plus a combined sweep.csv keyed by value.
inline void cmd_sweep(const ExperimentConfig& cfg,
                      const std::filesystem::path& out_dir) {
  using namespace harness_detail;
  if (!cfg.sweep_parameter) {
    throw ConfigError("sweep requires sweep.parameter and sweep.values");
  }
  std::filesystem::create_directories(out_dir);
  const std::string pname = sweep_parameter_name(*cfg.sweep_parameter);
  std::string csv = pname +
                    ",mean_accuracy,forgetting_points,hit_rate_overall,"
                    "final_buffer_size\n";
  for (const auto& value : cfg.sweep_values) {
    ExperimentConfig run_cfg =
        with_sweep_value(cfg, *cfg.sweep_parameter, value);
    run_cfg.adapter.validate();
    const std::filesystem::path sub =
        out_dir / (pname + "_" + sanitize_for_path(value));
    std::filesystem::create_directories(sub);
    const RunResult result = execute_run(run_cfg);
    atomic_write(sub / "steps.csv", steps_csv(result.steps));
    atomic_write(sub / "summary.json",
                 summary_json(run_cfg, result.summary).dump(2) + "\n");
    csv += value;
    csv += ',';
    csv += format_double(result.summary.mean_accuracy);
    csv += ',';
    csv += format_double(result.summary.forgetting_points);
    csv += ',';
    csv += format_double(result.summary.hit_rate_overall);
    csv += ',';
    csv += std::to_string(result.summary.final_buffer_size);
    csv += '\n';
  }
  atomic_write(out_dir / "sweep.csv", csv);
}

/// `forgetting`: each configured method on the same stream and the same
/// fitted source model; emits forgetting.json plus a printed table.
inline void cmd_forgetting(const ExperimentConfig& cfg,
                           const std::filesystem::path& out_dir,
                           std::ostream& table_out = std::cout) {
  std::filesystem::create_directories(out_dir);
  const SourceDataset source = make_source(cfg.source);
  const SourceModel model = fit_source_model(
      source, cfg.model, cfg.ridge_lambda, cfg.value_init_scale);
  const TaskSequence seq = cfg.make_task_sequence();

  nlohmann::ordered_json j;
  j["schema_version"] = kSummarySchemaVersion;
  j["seed"] = cfg.seed;
  j["rows"] = nlohmann::ordered_json::array();

  table_out << "method,mean_accuracy,forgetting_points\n";
  for (Method method : cfg.forgetting_methods) {
    ExperimentConfig run_cfg = cfg;
    run_cfg.adapter.method = method;
    const RunResult result =
        run_stream(run_cfg.adapter, seq, source, model);
    harness_detail::atomic_write(
        out_dir / (std::string("steps_") + to_string(method) + ".csv"),
        steps_csv(result.steps));
    nlohmann::ordered_json row;
    row["method"] = to_string(method);
    row["mean_accuracy"] = result.summary.mean_accuracy;
    row["forgetting_points"] = result.summary.forgetting_points;
    j["rows"].push_back(row);
    table_out << to_string(method) << ","
              << harness_detail::format_double(result.summary.mean_accuracy)
              << ","
              << harness_detail::format_double(
                     result.summary.forgetting_points)
              << "\n";
  }
  harness_detail::atomic_write(out_dir / "forgetting.json",
                               j.dump(2) + "\n");
}

}  // namespace avctta
