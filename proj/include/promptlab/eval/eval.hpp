#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptlab/adapt/adapt.hpp"
#include "promptlab/synth/synth.hpp"
#include "promptlab/vlm/vlm.hpp"

namespace promptlab::eval {

// Everything an experiment needs, validated before any compute starts.
struct ExperimentConfig {
  int schema_version = 1;
  std::vector<std::string> methods;
  int n_base = 8;
  int n_novel = 8;
  std::vector<std::string> shifts = {"indist"};
  std::vector<uint64_t> seeds = {0};
  adapt::TrainConfig train;  // per-record seed overrides train.seed
  std::string checkpoint;
  std::string out_dir;
  int n_test_per_class = 50;
  int support_per_class = 5;
  uint64_t split_seed = 42;
  uint64_t eval_seed = 7;  // test-image stream, shared by base/novel regimes
  int ctx_tokens = 64;
  int query_tokens = 8;
  int knn_k = 8;
  int icl_k = 8;
  int jobs = 0;  // 0 = leave the OpenMP default
  bool record_timings = false;   // real wall_ms breaks byte-determinism
  bool export_datasets = false;
  int supervised_star_per_class = 100;
  int adv_pool_per_class = 300;

  void validate() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_file(const std::string& path);
  nlohmann::json to_json() const;
};

extern const std::vector<std::string> kKnownMethods;
// Methods that can only emit base-class labels (no novel-regime records).
bool method_is_base_only(const std::string& method);

struct ResultRecord {
  std::string method;
  std::string shift;
  std::string regime;  // "base" | "novel"
  int n_classes = 0;
  uint64_t seed = 0;
  int correct = 0;
  int n_test = 0;
  double wall_ms = 0.0;

  double accuracy() const {
    return n_test > 0 ? static_cast<double>(correct) / n_test : 0.0;
  }
};

// Runs the (method x shift x regime x seed) grid against a frozen
// checkpoint, writes results.csv / results.json under out_dir, and returns
// the records sorted by (method, shift, regime, n_classes, seed).
std::vector<ResultRecord> run(const ExperimentConfig& config);

std::string records_to_csv(const std::vector<ResultRecord>& records,
                           bool with_timings);
nlohmann::json records_to_json(const std::vector<ResultRecord>& records,
                               bool with_timings);
std::vector<ResultRecord> records_from_csv(const std::string& path);

enum class Layout { BaseTable, NovelTable, EnsembleTable, SSTable, SotaTable };
Layout layout_from_name(const std::string& name);

struct TableResult {
  std::string markdown;
  std::string csv;
  std::vector<std::string> warnings;  // one per missing cell
};

// Mean accuracy over seeds per cell, best bolded and second-best italicized
// per column.
TableResult tabulate(const std::vector<ResultRecord>& records, Layout layout);

// One chart per call: accuracy vs number of classes for one (shift, regime),
// one series per method present in the records.
std::string plot_accuracy_vs_nclasses(const std::vector<ResultRecord>& records,
                                      const std::string& shift,
                                      const std::string& regime);

struct LossCurve {
  std::string label;
  std::vector<double> train;
  std::vector<double> holdout;
};

std::string plot_loss_curves(const std::vector<LossCurve>& curves);
nlohmann::json curves_to_json(const std::vector<LossCurve>& curves);
std::vector<LossCurve> curves_from_json(const nlohmann::json& j);

// Re-runs ProL / Robust-ProL training per context-token count, recording
// per-epoch train and held-out loss; writes curves JSON + SVG when out_dir
// is set.
std::vector<LossCurve> ablate_tokens(const ExperimentConfig& config,
                                     const std::vector<int>& token_counts);

}  // namespace promptlab::eval
