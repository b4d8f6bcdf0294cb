// Co-attention fusion of the emotion branch's first-layer feature with
// the auxiliary branches' first-layer features. Each branch is
// projected to a common width d_c; the ASR sequence is first reduced by
// dot-product attention against the emotion query; one scalar score per
// auxiliary is normalized across auxiliaries; the weighted contexts are
// added residually onto the query.

#pragma once

#include <optional>
#include <random>

#include "sermtl/tape.hpp"

namespace sermtl {

struct CoAttentionParams {
  Tensor w_emo, b_emo;  // [d_h, d_c], [d_c]
  Tensor w_gen, b_gen;  // [d_h, d_c]
  Tensor w_spk, b_spk;  // [d_h, d_c]
  Tensor w_asr, b_asr;  // [d_r, d_c]

  std::size_t common_dim() const { return w_emo.extent(1); }
};

CoAttentionParams make_coattention(std::size_t emo_dim, std::size_t aux_dim,
                                   std::size_t asr_dim,
                                   std::size_t common_dim,
                                   std::mt19937_64& rng);

struct CoAttentionVars {
  Var w_emo, b_emo, w_gen, b_gen, w_spk, b_spk, w_asr, b_asr;
};
CoAttentionVars lift(Tape& tape, const CoAttentionParams& p,
                     bool requires_grad);

// Auxiliary features actually present this run (task-combination
// ablations may disable branches; the cross-task softmax then runs over
// the enabled subset only).
struct CoAttentionInputs {
  std::optional<Var> gender;    // [d_h]
  std::optional<Var> speaker;   // [d_h]
  std::optional<Var> asr_seq;   // [T, d_r]
};

Var coattend(Tape& tape, Var emo, const CoAttentionInputs& aux,
             const CoAttentionVars& params);

// All three auxiliaries present.
Var coattend(Tape& tape, Var emo, Var gen, Var spk, Var asr_seq,
             const CoAttentionVars& params);

Tensor coattend(const Tensor& emo, const Tensor& gen, const Tensor& spk,
                const Tensor& asr_seq, const CoAttentionParams& params);

}  // namespace sermtl
