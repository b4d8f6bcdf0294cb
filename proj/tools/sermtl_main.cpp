// sermtl: synthetic multi-task speech-emotion-recognition pipeline.
//
// Subcommands: generate-data | train | evaluate | ablate | grad-check.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.
// SERMTL_LOG=quiet|info|debug controls stderr verbosity.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "sermtl/config.hpp"
#include "sermtl/data.hpp"
#include "sermtl/evalkit.hpp"
#include "sermtl/gradcheck.hpp"
#include "sermtl/trainer.hpp"

namespace fs = std::filesystem;
using namespace sermtl;

namespace {

int log_level() {
  const char* env = std::getenv("SERMTL_LOG");
  if (env == nullptr) return 1;
  const std::string v = env;
  if (v == "quiet") return 0;
  if (v == "debug") return 2;
  return 1;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << msg << "\n";
}

// Output files are never silently overwritten.
void ensure_writable(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) {
    throw ConfigError(path.string() +
                      " already exists; pass --force to overwrite");
  }
}

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string fusion;
  std::string tasks;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path,
                  "line-oriented config file (key = value)");
  cmd->add_option("--seed", flags.seed, "override data.seed and train.seed");
  cmd->add_option("--variant", flags.variant,
                  "SWFC variant: eq2_literal|focal_supcon");
  cmd->add_option("--fusion", flags.fusion, "fusion mode: learnable|last");
  cmd->add_option("--tasks", flags.tasks,
                  "comma subset of asr,gender,speaker");
}

CliConfig resolve_config(const CommonFlags& flags) {
  CliConfig cfg;
  if (!flags.config_path.empty()) {
    cfg = load_config_file(flags.config_path);
  }
  if (flags.seed) {
    cfg.data.seed = *flags.seed;
    cfg.train.seed = *flags.seed;
  }
  if (!flags.variant.empty()) {
    apply_config_key(cfg, "swfc.variant", flags.variant);
  }
  if (!flags.fusion.empty()) {
    apply_config_key(cfg, "train.fusion", flags.fusion);
  }
  if (!flags.tasks.empty()) {
    apply_config_key(cfg, "train.tasks", flags.tasks);
  }
  validate(cfg);
  return cfg;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      seeds.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("--seeds: bad entry '" + item + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("--seeds: empty list");
  return seeds;
}

void write_epoch_log(const fs::path& path,
                     const std::vector<LossBreakdown>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string());
  out << std::setprecision(17);
  out << "epoch\tl_emotion\tl_gender\tl_speaker\tl_asr\tl_swfc\ttotal\n";
  for (std::size_t e = 0; e < log.size(); ++e) {
    const LossBreakdown& b = log[e];
    out << e << '\t' << b.l_emotion << '\t' << b.l_gender << '\t'
        << b.l_speaker << '\t' << b.l_asr << '\t' << b.l_swfc << '\t'
        << b.total << '\n';
  }
}

// ---------------------------------------------------------------------------

int cmd_generate(const CommonFlags& flags, const std::string& out_dir,
                 bool force) {
  CliConfig cfg = resolve_config(flags);
  const fs::path dir = out_dir;
  ensure_writable(dir / "train.tsv", force);
  log_info("generating " + std::to_string(cfg.data.n_utterances) +
           " utterances (seed " + std::to_string(cfg.data.seed) + ")");
  CorpusSplits splits = split_corpus(generate_corpus(cfg.data));
  write_corpus_dir(dir, splits);

  std::ofstream meta(dir / "generation.txt", std::ios::trunc);
  meta << "seed = " << cfg.data.seed << "\n"
       << "n_utterances = " << cfg.data.n_utterances << "\n"
       << "train = " << splits.train.size() << "\n"
       << "dev = " << splits.dev.size() << "\n"
       << "test = " << splits.test.size() << "\n";
  const auto counts = emotion_counts(splits.train);
  meta << "train_emotion_counts =";
  for (long c : counts) meta << ' ' << c;
  meta << "\n";
  log_info("wrote " + (dir / "train.tsv").string() + " (+dev/test)");
  return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& data_dir,
              const std::string& out_dir, const std::string& resume_path,
              bool force) {
  CliConfig cfg = resolve_config(flags);
  const fs::path out = out_dir;
  const fs::path ckpt = out / "checkpoint.bin";
  const fs::path log_path = out / "epochs.tsv";
  ensure_writable(ckpt, force);
  ensure_writable(log_path, force);
  fs::create_directories(out);

  std::vector<Utterance> train_split =
      load_manifest(fs::path(data_dir) / "train.tsv");
  log_info("training on " + std::to_string(train_split.size()) +
           " utterances, " + std::to_string(cfg.train.epochs) + " epochs");

  Trainer trainer =
      resume_path.empty()
          ? Trainer(std::move(train_split), cfg.train)
          : Trainer::resume(resume_path, std::move(train_split), cfg.train);
  while (trainer.epochs_done() < cfg.train.epochs) {
    LossBreakdown b = trainer.run_epoch();
    log_debug("epoch " + std::to_string(trainer.epochs_done()) + " total " +
              std::to_string(b.total));
  }
  trainer.save_checkpoint(ckpt);
  write_epoch_log(log_path, trainer.epoch_log());
  log_info("wrote " + ckpt.string() + " and " + log_path.string());
  return 0;
}

int cmd_evaluate(const CommonFlags& flags, const std::string& data_dir,
                 const std::string& checkpoint, const std::string& split,
                 const std::string& out_dir, bool force) {
  CliConfig cfg = resolve_config(flags);
  const fs::path out = out_dir;
  const fs::path metrics_path = out / ("metrics_" + split + ".txt");
  const fs::path report_path = out / ("report_" + split + ".txt");
  ensure_writable(metrics_path, force);
  ensure_writable(report_path, force);
  fs::create_directories(out);

  std::vector<Utterance> train_split =
      load_manifest(fs::path(data_dir) / "train.tsv");
  std::vector<Utterance> eval_split =
      load_manifest(fs::path(data_dir) / (split + ".tsv"));
  Trainer trainer =
      Trainer::resume(checkpoint, std::move(train_split), cfg.train);

  MetricsReport report =
      evaluate_split(trainer.params(), cfg.train, eval_split);
  auto values = metrics_to_map(report);
  values["seed"] = static_cast<double>(cfg.train.seed);
  write_metrics_file(metrics_path, values);

  std::ofstream rep(report_path, std::ios::trunc);
  rep << split << " split, " << eval_split.size() << " utterances\n";
  rep << "emotion  " << format_pct(report.emotion.f1_macro) << " "
      << format_pct(report.emotion.f1_micro) << " "
      << format_pct(report.emotion.accuracy)
      << "  (F1-Macro F1-Micro Accuracy)\n";
  if (report.gender) {
    rep << "gender   " << format_pct(report.gender->accuracy)
        << "  (Accuracy)\n";
  }
  if (report.speaker) {
    rep << "speaker  " << format_pct(report.speaker->accuracy)
        << "  (Accuracy)\n";
  }
  if (report.asr_wer) {
    rep << "asr      " << format_pct(*report.asr_wer) << "  (WER)\n";
  }
  log_info("wrote " + metrics_path.string());
  return 0;
}

int cmd_ablate(const CommonFlags& flags, const std::string& data_dir,
               const std::string& seeds_text, const std::string& grid_name,
               const std::string& out_dir, bool force) {
  CliConfig cfg = resolve_config(flags);
  const std::vector<std::uint64_t> seeds = parse_seed_list(seeds_text);
  const fs::path out = out_dir;
  fs::create_directories(out);

  CorpusSplits corpus = load_corpus_dir(data_dir);
  log_info("ablation over " + std::to_string(seeds.size()) + " seeds, grid '" +
           grid_name + "'");

  auto emit = [&](const std::string& label,
                  const std::vector<AblationResult>& results,
                  const std::string& table) {
    const fs::path table_path = out / (label + "_table.txt");
    ensure_writable(table_path, force);
    std::ofstream tf(table_path, std::ios::trunc);
    tf << table;
    std::ostringstream seed_list;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      if (i) seed_list << ',';
      seed_list << seeds[i];
    }
    tf << "seeds: " << seed_list.str() << "\n";
    for (const AblationResult& r : results) {
      auto values = metrics_to_map(r.median);
      write_metrics_file(out / (label + "_" + r.name + ".txt"), values);
    }
    log_info("wrote " + table_path.string());
    if (log_level() >= 1) std::cerr << table;
  };

  if (grid_name == "component" || grid_name == "all") {
    auto results = run_ablation(component_grid(cfg.train), corpus, seeds);
    emit("component", results, render_component_table(results));
  }
  if (grid_name == "tasks" || grid_name == "all") {
    auto results =
        run_ablation(task_combination_grid(cfg.train), corpus, seeds);
    emit("tasks", results, render_task_table(results));
  }
  if (grid_name == "fusion" || grid_name == "all") {
    auto results = run_ablation(fusion_grid(cfg.train), corpus, seeds);
    emit("fusion", results, render_fusion_table(results));
  }
  if (grid_name != "component" && grid_name != "tasks" &&
      grid_name != "fusion" && grid_name != "all") {
    throw ConfigError("--grid must be component|tasks|fusion|all");
  }
  return 0;
}

int cmd_grad_check(std::uint64_t seed, int points) {
  const auto reports = run_gradient_suite(seed, points);
  bool all_passed = true;
  for (const GradCheckReport& r : reports) {
    std::cout << (r.passed ? "PASS" : "FAIL") << "  " << r.op_name
              << "  max_rel_err=" << r.max_rel_error
              << "  tol=" << r.tolerance << "\n";
    all_passed = all_passed && r.passed;
  }
  return all_passed ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic multi-task SER training pipeline"};
  app.require_subcommand(1);
  app.footer("config file schema:\n" + config_schema());

  CommonFlags flags;
  std::string out_dir;
  std::string data_dir;
  std::string resume_path;
  std::string split = "test";
  std::string checkpoint;
  std::string seeds_text = "1,2,3";
  std::string grid_name = "all";
  bool force = false;
  std::uint64_t gc_seed = 1;
  int gc_points = 100;

  CLI::App* gen = app.add_subcommand("generate-data",
                                     "write a synthetic corpus + manifests");
  add_common(gen, flags);
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_flag("--force", force, "overwrite existing outputs");

  CLI::App* tr = app.add_subcommand("train", "train and write a checkpoint");
  add_common(tr, flags);
  tr->add_option("--data", data_dir, "corpus directory (train.tsv)")
      ->required();
  tr->add_option("--out", out_dir, "output directory")->required();
  tr->add_option("--resume", resume_path, "checkpoint to resume from");
  tr->add_flag("--force", force, "overwrite existing outputs");

  CLI::App* ev = app.add_subcommand("evaluate", "run metrics on a split");
  add_common(ev, flags);
  ev->add_option("--data", data_dir, "corpus directory")->required();
  ev->add_option("--checkpoint", checkpoint, "trained checkpoint")
      ->required();
  ev->add_option("--split", split, "train|dev|test (default test)");
  ev->add_option("--out", out_dir, "output directory")->required();
  ev->add_flag("--force", force, "overwrite existing outputs");

  CLI::App* ab = app.add_subcommand("ablate", "run the ablation grids");
  add_common(ab, flags);
  ab->add_option("--data", data_dir, "corpus directory")->required();
  ab->add_option("--seeds", seeds_text, "comma-separated seed list");
  ab->add_option("--grid", grid_name, "component|tasks|fusion|all");
  ab->add_option("--out", out_dir, "output directory")->required();
  ab->add_flag("--force", force, "overwrite existing outputs");

  CLI::App* gc = app.add_subcommand("grad-check",
                                    "finite-difference gradient suite");
  gc->add_option("--seed", gc_seed, "suite seed");
  gc->add_option("--points", gc_points, "random points per op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_generate(flags, out_dir, force);
    if (tr->parsed()) {
      return cmd_train(flags, data_dir, out_dir, resume_path, force);
    }
    if (ev->parsed()) {
      return cmd_evaluate(flags, data_dir, checkpoint, split, out_dir, force);
    }
    if (ab->parsed()) {
      return cmd_ablate(flags, data_dir, seeds_text, grid_name, out_dir,
                        force);
    }
    if (gc->parsed()) return cmd_grad_check(gc_seed, gc_points);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
