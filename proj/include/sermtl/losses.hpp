// Training objectives: cross-entropy, CTC over the blank-extended
// target, the sample-weighted focal contrastive loss in both readings,
// and the combined multi-task objective.

#pragma once

#include <vector>

#include "sermtl/tape.hpp"

namespace sermtl {

// Combined-objective weights. The emotion coefficient is
// 1 - (#enabled auxiliaries) * alpha, so alpha must stay below 1/3.
struct ObjectiveConfig {
  double alpha = 0.1;
  double beta = 1.0;
};
void validate(const ObjectiveConfig& cfg);

enum class SwfcVariant { eq2_literal, focal_supcon };
enum class WeightMode { uniform, inverse_frequency };

struct SwfcConfig {
  double tau = 0.07;
  double gamma = 2.0;
  SwfcVariant variant = SwfcVariant::eq2_literal;
  WeightMode weight_mode = WeightMode::inverse_frequency;
};
void validate(const SwfcConfig& cfg);

struct TaskMask {
  bool asr = true;
  bool gender = true;
  bool speaker = true;
  int count() const {
    return static_cast<int>(asr) + static_cast<int>(gender) +
           static_cast<int>(speaker);
  }
};

struct TaskLosses {
  double emotion = 0.0;
  double gender = 0.0;
  double speaker = 0.0;
  double asr = 0.0;
  double swfc = 0.0;
};

struct LossBreakdown {
  double l_emotion = 0.0;
  double l_gender = 0.0;
  double l_speaker = 0.0;
  double l_asr = 0.0;
  double l_swfc = 0.0;
  double total = 0.0;
};

// mean over rows of -log softmax(logits)[label]
Var cross_entropy(Tape& tape, Var logits, const std::vector<int>& labels);
double cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// -log P(target | logits) summed over all alignments that collapse to
// target, forward DP over the blank-extended target in log space.
// Blank is index 0; target symbols are in [1, V].
Var ctc_loss(Tape& tape, Var logits, const std::vector<int>& target);
double ctc_loss(const Tensor& logits, const std::vector<int>& target);

// Per-sample category weights: uniform -> 1; inverse_frequency ->
// N_total / (C * count(y_i)), renormalized to mean 1 over the batch.
std::vector<double> swfc_sample_weights(const std::vector<int>& labels,
                                        WeightMode mode,
                                        const std::vector<long>& class_counts);

// Contrastive loss over L2-normalized embeddings [N, E].
Var swfc_loss(Tape& tape, Var embeddings, const std::vector<int>& labels,
              const SwfcConfig& cfg, const std::vector<long>& class_counts);
double swfc_loss(const Tensor& embeddings, const std::vector<int>& labels,
                 const SwfcConfig& cfg, const std::vector<long>& class_counts);

// total = (1 - k*alpha) * emotion + alpha * (enabled auxiliaries)
//       + beta * swfc, with k = mask.count(). Parts of disabled tasks
// must be zero. With all three enabled this is the paper objective.
LossBreakdown combined_objective(const TaskLosses& parts,
                                 const ObjectiveConfig& cfg,
                                 const TaskMask& mask = TaskMask{});

}  // namespace sermtl
