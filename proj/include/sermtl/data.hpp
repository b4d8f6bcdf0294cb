// Synthetic long-tailed corpus generation plus the on-disk feature and
// manifest formats.
//
// Feature file: magic "LSF1", one version byte, three u32 little-endian
// extents (L, T, D), then L*T*D float32 little-endian values row-major.
// Manifest: one tab-separated record per line:
//   id <TAB> feature_path <TAB> emotion <TAB> gender <TAB> speaker
//      <TAB> space-separated token ids
// Feature paths are resolved relative to the manifest's directory.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sermtl/fusion.hpp"

namespace sermtl {

inline constexpr int kNumEmotions = 8;  // A,H,S,F,U,C,D,N
inline constexpr int kNumGenders = 2;

struct Utterance {
  std::string id;
  LayerStack stack;
  int emotion = 0;
  int gender = 0;
  int speaker = 0;
  std::vector<int> tokens;  // ids >= 1; 0 is the CTC blank
};

struct GeneratorConfig {
  std::size_t n_utterances = 2000;
  // Long tail shaped after the challenge data: one dominant class
  // (~45%) down to ~1% tails.
  std::array<double, kNumEmotions> class_probs = {0.45, 0.21, 0.13, 0.08,
                                                  0.05, 0.04, 0.03, 0.01};
  std::size_t n_speakers = 20;
  std::size_t n_layers = 4;
  std::size_t t_min = 12;
  std::size_t t_max = 20;
  std::size_t feature_dim = 24;
  std::size_t vocab_size = 12;
  double noise_scale = 1.0;
  std::uint64_t seed = 1;
};
void validate(const GeneratorConfig& cfg);

// Where each factor lives inside the feature dimension. The four tasks
// occupy disjoint coordinate blocks so each one is learnable.
struct FeatureLayout {
  std::size_t emotion_begin, emotion_end;
  std::size_t gender_begin, gender_end;
  std::size_t speaker_begin, speaker_end;
  std::size_t token_begin, token_end;
};
FeatureLayout feature_layout(std::size_t feature_dim);

// Speakers are split into a training pool (low ids) and a held-out pool
// (high ids) that only the test split draws from.
std::size_t num_heldout_speakers(const GeneratorConfig& cfg);
std::size_t num_train_speakers(const GeneratorConfig& cfg);

// Deterministic given cfg.seed. Utterances are ordered train, dev,
// test; the test portion uses held-out speakers only.
std::vector<Utterance> generate_corpus(const GeneratorConfig& cfg);

struct CorpusSplits {
  std::vector<Utterance> train, dev, test;
};
// Split sizes: 15% test, 15% dev, rest train (rounded).
CorpusSplits split_corpus(std::vector<Utterance> corpus);

// Per-class emotion counts, for inverse-frequency weighting.
std::vector<long> emotion_counts(const std::vector<Utterance>& utts);

void write_features(const std::filesystem::path& path,
                    const LayerStack& stack);
LayerStack read_features(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path,
                    const std::vector<Utterance>& utts,
                    const std::vector<std::string>& feature_paths);
std::vector<Utterance> load_manifest(const std::filesystem::path& path);

// Writes features/<id>.lsf for every utterance plus train.tsv, dev.tsv
// and test.tsv under dir.
void write_corpus_dir(const std::filesystem::path& dir,
                      const CorpusSplits& splits);
CorpusSplits load_corpus_dir(const std::filesystem::path& dir);

}  // namespace sermtl
