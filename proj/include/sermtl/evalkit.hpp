// Metrics (F1-macro, F1-micro, accuracy, WER), greedy CTC decoding,
// the ablation harness, and table/metrics-file rendering.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sermtl/trainer.hpp"

namespace sermtl {

struct ClassificationMetrics {
  double f1_macro = 0.0;
  double f1_micro = 0.0;
  double accuracy = 0.0;
};

// Macro-F1 averages per-class F1 (0/0 counted as 0) over the classes
// present in the label set; micro-F1 equals accuracy for single-label
// predictions.
ClassificationMetrics classification_metrics(const std::vector<int>& preds,
                                             const std::vector<int>& labels,
                                             int n_classes);

std::size_t edit_distance(const std::vector<int>& a,
                          const std::vector<int>& b);
// Levenshtein(ref, hyp) / len(ref); throws on an empty reference.
double wer(const std::vector<int>& ref, const std::vector<int>& hyp);

// Per-frame argmax, collapse repeats, drop blanks (index 0).
std::vector<int> greedy_ctc_decode(const Tensor& logits);

struct MetricsReport {
  ClassificationMetrics emotion;
  std::optional<ClassificationMetrics> gender;
  std::optional<ClassificationMetrics> speaker;
  // Corpus-level: total edit distance over total reference length.
  std::optional<double> asr_wer;
};

MetricsReport evaluate_split(const ModelParams& params,
                             const TrainConfig& cfg,
                             const std::vector<Utterance>& utts);

// 0.2983 -> "29.83"
std::string format_pct(double v);

struct AblationRow {
  std::string name;
  TrainConfig cfg;
};

// Table-2 shape: baseline, no_mtl (SWFC only), no_coattention, no_swfc,
// full.
std::vector<AblationRow> component_grid(const TrainConfig& full);
// Table-3 shape: SER only, +ASR, +Gender, +Speaker, all three.
std::vector<AblationRow> task_combination_grid(const TrainConfig& full);
// Table-4 shape: last hidden state vs learnable fusion.
std::vector<AblationRow> fusion_grid(const TrainConfig& full);

struct AblationResult {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricsReport> per_seed;
  MetricsReport median;
};

// Trains each config with each seed on corpus.train, evaluates on the
// held-out corpus.test, reports the per-config elementwise median.
// Deterministic: config-then-seed order.
std::vector<AblationResult> run_ablation(const std::vector<AblationRow>& grid,
                                         const CorpusSplits& corpus,
                                         const std::vector<std::uint64_t>& seeds);

std::string render_component_table(const std::vector<AblationResult>& rows);
std::string render_task_table(const std::vector<AblationResult>& rows);
std::string render_fusion_table(const std::vector<AblationResult>& rows);

// One "key = value" line per metric, UTF-8.
std::map<std::string, double> metrics_to_map(const MetricsReport& report);
void write_metrics_file(const std::filesystem::path& path,
                        const std::map<std::string, double>& values);

}  // namespace sermtl
