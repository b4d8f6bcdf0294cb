#include "sermtl/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sermtl {

ClassificationMetrics classification_metrics(const std::vector<int>& preds,
                                             const std::vector<int>& labels,
                                             int n_classes) {
  if (preds.empty() || preds.size() != labels.size()) {
    throw ConfigError("classification_metrics: empty or mismatched input");
  }
  const std::size_t c = static_cast<std::size_t>(n_classes);
  for (int v : preds) {
    if (v < 0 || static_cast<std::size_t>(v) >= c) {
      throw std::out_of_range("classification_metrics: prediction " +
                              std::to_string(v) + " out of range");
    }
  }
  for (int v : labels) {
    if (v < 0 || static_cast<std::size_t>(v) >= c) {
      throw std::out_of_range("classification_metrics: label " +
                              std::to_string(v) + " out of range");
    }
  }

  std::vector<long> tp(c, 0), fp(c, 0), fn(c, 0);
  std::vector<char> in_labels(c, 0);
  long correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    in_labels[labels[i]] = 1;
    if (preds[i] == labels[i]) {
      ++tp[labels[i]];
      ++correct;
    } else {
      ++fp[preds[i]];
      ++fn[labels[i]];
    }
  }

  double macro = 0.0;
  long label_classes = 0;
  long tp_sum = 0, fp_sum = 0, fn_sum = 0;
  for (std::size_t k = 0; k < c; ++k) {
    tp_sum += tp[k];
    fp_sum += fp[k];
    fn_sum += fn[k];
    if (!in_labels[k]) continue;  // absent from the evaluation label set
    ++label_classes;
    const long denom = 2 * tp[k] + fp[k] + fn[k];
    macro += denom == 0 ? 0.0
                        : 2.0 * static_cast<double>(tp[k]) /
                              static_cast<double>(denom);
  }

  ClassificationMetrics m;
  m.f1_macro = macro / static_cast<double>(label_classes);
  m.f1_micro = 2.0 * static_cast<double>(tp_sum) /
               static_cast<double>(2 * tp_sum + fp_sum + fn_sum);
  m.accuracy =
      static_cast<double>(correct) / static_cast<double>(preds.size());
  return m;
}

std::size_t edit_distance(const std::vector<int>& a,
                          const std::vector<int>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      if (a[i - 1] == b[j - 1]) {
        cur[j] = prev[j - 1];
      } else {
        cur[j] = 1 + std::min({prev[j - 1], prev[j], cur[j - 1]});
      }
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double wer(const std::vector<int>& ref, const std::vector<int>& hyp) {
  if (ref.empty()) {
    throw std::invalid_argument("wer: empty reference");
  }
  return static_cast<double>(edit_distance(ref, hyp)) /
         static_cast<double>(ref.size());
}

std::vector<int> greedy_ctc_decode(const Tensor& logits) {
  require_shape(logits.rank() == 2, "greedy_ctc_decode: need [T,V+1]");
  const std::size_t T = logits.extent(0), K = logits.extent(1);
  std::vector<int> out;
  int prev = -1;
  for (std::size_t t = 0; t < T; ++t) {
    int best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (logits(t, k) > logits(t, best)) best = static_cast<int>(k);
    }
    if (best != prev && best != 0) out.push_back(best);
    prev = best;
  }
  return out;
}

MetricsReport evaluate_split(const ModelParams& params,
                             const TrainConfig& cfg,
                             const std::vector<Utterance>& utts) {
  if (utts.empty()) throw ConfigError("evaluate_split: empty split");
  std::vector<int> emo_pred, emo_true;
  std::vector<int> gen_pred, gen_true;
  std::vector<int> spk_pred, spk_true;
  std::size_t edit_sum = 0, ref_len_sum = 0;
  bool any_asr = false;

  auto argmax = [](const Tensor& v) {
    int best = 0;
    for (std::size_t i = 1; i < v.numel(); ++i) {
      if (v[i] > v[best]) best = static_cast<int>(i);
    }
    return best;
  };

  for (const Utterance& u : utts) {
    ModelOutputs out = forward_eval(params, u, cfg);
    emo_pred.push_back(argmax(out.emotion_logits));
    emo_true.push_back(u.emotion);
    if (out.gender_logits.numel() > 0) {
      gen_pred.push_back(argmax(out.gender_logits));
      gen_true.push_back(u.gender);
    }
    if (out.speaker_logits.numel() > 0) {
      spk_pred.push_back(argmax(out.speaker_logits));
      spk_true.push_back(u.speaker);
    }
    if (out.asr_logits.numel() > 0 && !u.tokens.empty()) {
      any_asr = true;
      const std::vector<int> hyp = greedy_ctc_decode(out.asr_logits);
      edit_sum += edit_distance(u.tokens, hyp);
      ref_len_sum += u.tokens.size();
    }
  }

  MetricsReport report;
  report.emotion = classification_metrics(
      emo_pred, emo_true, static_cast<int>(params.dims.n_emotions));
  if (!gen_pred.empty()) {
    report.gender = classification_metrics(
        gen_pred, gen_true, static_cast<int>(params.dims.n_genders));
  }
  if (!spk_pred.empty()) {
    // Held-out splits carry speaker ids beyond the head's closed set;
    // evaluate over the union so unseen speakers score as errors.
    int c = static_cast<int>(params.dims.n_speakers);
    for (int v : spk_true) c = std::max(c, v + 1);
    for (int v : spk_pred) c = std::max(c, v + 1);
    report.speaker = classification_metrics(spk_pred, spk_true, c);
  }
  if (any_asr) {
    report.asr_wer = static_cast<double>(edit_sum) /
                     static_cast<double>(ref_len_sum);
  }
  return report;
}

std::string format_pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v * 100.0;
  return os.str();
}

// ---------------------------------------------------------------------------
// ablation grids
// ---------------------------------------------------------------------------

std::vector<AblationRow> component_grid(const TrainConfig& full) {
  TrainConfig baseline = full;
  baseline.use_mtl = false;
  baseline.use_coattention = false;
  baseline.use_swfc = false;

  TrainConfig no_mtl = baseline;  // SWFC only
  no_mtl.use_swfc = true;

  TrainConfig no_coattention = full;
  no_coattention.use_coattention = false;

  TrainConfig no_swfc = full;
  no_swfc.use_swfc = false;

  return {
      {"baseline", baseline}, {"no_mtl", no_mtl},
      {"no_coattention", no_coattention}, {"no_swfc", no_swfc},
      {"full", full},
  };
}

std::vector<AblationRow> task_combination_grid(const TrainConfig& full) {
  TrainConfig ser_only = full;
  ser_only.use_mtl = false;
  ser_only.use_coattention = false;
  ser_only.use_swfc = false;

  auto with_tasks = [&](bool asr, bool gender, bool speaker) {
    TrainConfig cfg = full;
    cfg.tasks = TaskMask{asr, gender, speaker};
    return cfg;
  };
  return {
      {"ser_only", ser_only},
      {"ser_asr", with_tasks(true, false, false)},
      {"ser_gender", with_tasks(false, true, false)},
      {"ser_speaker", with_tasks(false, false, true)},
      {"ser_all", with_tasks(true, true, true)},
  };
}

std::vector<AblationRow> fusion_grid(const TrainConfig& full) {
  TrainConfig last = full;
  last.fusion = FusionMode::last;
  TrainConfig learn = full;
  learn.fusion = FusionMode::learnable;
  return {{"last", last}, {"learnable", learn}};
}

// ---------------------------------------------------------------------------
// ablation runs
// ---------------------------------------------------------------------------

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

ClassificationMetrics median_metrics(
    const std::vector<ClassificationMetrics>& ms) {
  std::vector<double> macro, micro, acc;
  for (const auto& m : ms) {
    macro.push_back(m.f1_macro);
    micro.push_back(m.f1_micro);
    acc.push_back(m.accuracy);
  }
  return {median_of(macro), median_of(micro), median_of(acc)};
}

MetricsReport median_report(const std::vector<MetricsReport>& reports) {
  MetricsReport med;
  std::vector<ClassificationMetrics> emo;
  for (const auto& r : reports) emo.push_back(r.emotion);
  med.emotion = median_metrics(emo);

  std::vector<ClassificationMetrics> gen, spk;
  std::vector<double> wers;
  for (const auto& r : reports) {
    if (r.gender) gen.push_back(*r.gender);
    if (r.speaker) spk.push_back(*r.speaker);
    if (r.asr_wer) wers.push_back(*r.asr_wer);
  }
  if (gen.size() == reports.size()) med.gender = median_metrics(gen);
  if (spk.size() == reports.size()) med.speaker = median_metrics(spk);
  if (wers.size() == reports.size()) med.asr_wer = median_of(wers);
  return med;
}

}  // namespace

std::vector<AblationResult> run_ablation(
    const std::vector<AblationRow>& grid, const CorpusSplits& corpus,
    const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("run_ablation: need at least one seed");
  std::vector<AblationResult> results;
  for (const AblationRow& row : grid) {
    AblationResult res;
    res.name = row.name;
    res.seeds = seeds;
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = row.cfg;
      cfg.seed = seed;
      try {
        TrainResult tr = train(corpus.train, cfg);
        res.per_seed.push_back(evaluate_split(tr.params, cfg, corpus.test));
      } catch (const std::exception& e) {
        throw std::runtime_error("ablation config '" + row.name + "' seed " +
                                 std::to_string(seed) + ": " + e.what());
      }
    }
    res.median = median_report(res.per_seed);
    results.push_back(std::move(res));
  }
  return results;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

namespace {

std::string render_aligned(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths;
  for (const auto& row : rows) {
    if (widths.size() < row.size()) widths.resize(row.size(), 0);
    for (std::size_t i = 0; i < row.size(); ++i) {
      widths[i] = std::max(widths[i], row[i].size());
    }
  }
  std::ostringstream os;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << "  ";
      os << std::left << std::setw(static_cast<int>(widths[i])) << row[i];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace

std::string render_component_table(const std::vector<AblationResult>& rows) {
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"Approach", "F1 Macro", "F1 Micro", "Accuracy"});
  for (const auto& r : rows) {
    cells.push_back({r.name, format_pct(r.median.emotion.f1_macro),
                     format_pct(r.median.emotion.f1_micro),
                     format_pct(r.median.emotion.accuracy)});
  }
  return render_aligned(cells);
}

std::string render_task_table(const std::vector<AblationResult>& rows) {
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"Tasks", "SER Accuracy", "ASR WER", "Gender Accuracy"});
  for (const auto& r : rows) {
    cells.push_back(
        {r.name, format_pct(r.median.emotion.accuracy),
         r.median.asr_wer ? format_pct(*r.median.asr_wer) : "--",
         r.median.gender ? format_pct(r.median.gender->accuracy) : "--"});
  }
  return render_aligned(cells);
}

std::string render_fusion_table(const std::vector<AblationResult>& rows) {
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"Features Type", "F1 Macro", "F1 Micro", "Accuracy"});
  for (const auto& r : rows) {
    cells.push_back({r.name, format_pct(r.median.emotion.f1_macro),
                     format_pct(r.median.emotion.f1_micro),
                     format_pct(r.median.emotion.accuracy)});
  }
  return render_aligned(cells);
}

std::map<std::string, double> metrics_to_map(const MetricsReport& report) {
  std::map<std::string, double> m;
  m["emotion.f1_macro"] = report.emotion.f1_macro;
  m["emotion.f1_micro"] = report.emotion.f1_micro;
  m["emotion.accuracy"] = report.emotion.accuracy;
  if (report.gender) {
    m["gender.f1_macro"] = report.gender->f1_macro;
    m["gender.f1_micro"] = report.gender->f1_micro;
    m["gender.accuracy"] = report.gender->accuracy;
  }
  if (report.speaker) {
    m["speaker.f1_macro"] = report.speaker->f1_macro;
    m["speaker.f1_micro"] = report.speaker->f1_micro;
    m["speaker.accuracy"] = report.speaker->accuracy;
  }
  if (report.asr_wer) m["asr.wer"] = *report.asr_wer;
  return m;
}

void write_metrics_file(const std::filesystem::path& path,
                        const std::map<std::string, double>& values) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << std::setprecision(10);
  for (const auto& [key, value] : values) {
    out << key << " = " << value << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace sermtl
