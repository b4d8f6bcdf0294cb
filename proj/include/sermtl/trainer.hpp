// End-to-end optimization: fusion -> pooling -> heads -> co-attention
// -> losses, Adam updates, ablation toggles, deterministic batching and
// checkpoint/resume.
//
// Determinism: every random stream (shuffle, per-head dropout) is
// seeded from (seed, epoch, utterance, consumer), and per-sample
// gradients are accumulated in fixed index order, so results are
// independent of thread count and bitwise reproducible.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sermtl/coattention.hpp"
#include "sermtl/data.hpp"
#include "sermtl/fusion.hpp"
#include "sermtl/heads.hpp"
#include "sermtl/losses.hpp"
#include "sermtl/pooling.hpp"

namespace sermtl {

enum class FusionMode { learnable, last };

struct TrainConfig {
  ObjectiveConfig objective;
  SwfcConfig swfc;
  double lr = 1e-3;  // paper setting 1e-5 suits a large pretrained backbone
  std::size_t batch_size = 16;
  std::size_t epochs = 60;
  std::uint64_t seed = 1;
  bool use_mtl = true;
  bool use_coattention = true;
  bool use_swfc = true;
  FusionMode fusion = FusionMode::learnable;
  TaskMask tasks;
  std::size_t d_hidden = 256;
  std::size_t d_recurrent = 128;
  std::size_t d_attn = 0;    // 0 -> ceil(D/2)
  std::size_t d_coattn = 0;  // 0 -> d_hidden
  double dropout = 0.1;
  bool parallel_batch = true;
};
void validate(const TrainConfig& cfg);

// Small widths for laptop-scale synthetic runs.
TrainConfig desk_config();

struct ModelDims {
  std::size_t n_layers = 0;
  std::size_t feature_dim = 0;
  std::size_t n_emotions = kNumEmotions;
  std::size_t n_genders = kNumGenders;
  std::size_t n_speakers = 0;  // closed set over training speaker ids
  std::size_t vocab_size = 0;
  bool operator==(const ModelDims&) const = default;
};
// Derives dims from the training split and validates label ranges.
ModelDims infer_dims(const std::vector<Utterance>& train);

struct ModelParams {
  ModelDims dims;
  FusionParams fusion;
  PoolingParams pooling;
  ClassifierHeadParams emotion, gender, speaker;
  AsrHeadParams asr;
  CoAttentionParams coatt;
};
ModelParams init_params(const ModelDims& dims, const TrainConfig& cfg);

struct ParamRef {
  std::string name;
  Tensor* tensor;
};
std::vector<ParamRef> param_registry(ModelParams& p);

struct AdamState {
  std::vector<Tensor> m, v;
  long step = 0;
};
AdamState make_adam_state(const std::vector<ParamRef>& params);

// Standard bias-corrected Adam. Throws NumericError naming the
// parameter if its gradient is non-finite.
void adam_step(const std::vector<ParamRef>& params,
               const std::vector<Tensor>& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct BatchResult {
  LossBreakdown losses;
  std::vector<Tensor> grads;  // registry order
};
// Gradients of the combined objective over one batch. sample_keys are
// stable utterance indices used for the dropout streams.
BatchResult batch_gradients(const ModelParams& params,
                            const std::vector<const Utterance*>& batch,
                            const std::vector<std::size_t>& sample_keys,
                            const TrainConfig& cfg,
                            const std::vector<long>& class_counts,
                            std::size_t epoch, bool parallel);

struct ModelOutputs {
  Tensor emotion_logits;
  Tensor gender_logits;   // empty when the branch is disabled
  Tensor speaker_logits;  // empty when the branch is disabled
  Tensor asr_logits;      // empty when the branch is disabled
};
ModelOutputs forward_eval(const ModelParams& params, const Utterance& utt,
                          const TrainConfig& cfg);

std::uint64_t config_hash(const TrainConfig& cfg, const ModelDims& dims);

class Trainer {
 public:
  Trainer(std::vector<Utterance> train, TrainConfig cfg);

  // One pass over the data; appends to the epoch log.
  LossBreakdown run_epoch();
  std::size_t epochs_done() const { return epoch_log_.size(); }
  const std::vector<LossBreakdown>& epoch_log() const { return epoch_log_; }

  const ModelParams& params() const { return params_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<long>& class_counts() const { return class_counts_; }

  void save_checkpoint(const std::filesystem::path& path) const;
  // Verifies the stored config hash against cfg/train before restoring.
  static Trainer resume(const std::filesystem::path& path,
                        std::vector<Utterance> train, TrainConfig cfg);

 private:
  TrainConfig cfg_;
  std::vector<Utterance> train_;
  std::vector<long> class_counts_;
  ModelParams params_;
  AdamState adam_;
  std::vector<LossBreakdown> epoch_log_;
};

struct TrainResult {
  ModelParams params;
  std::vector<LossBreakdown> epoch_log;
};
TrainResult train(const std::vector<Utterance>& corpus,
                  const TrainConfig& cfg);

}  // namespace sermtl
