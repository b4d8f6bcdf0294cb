// Attentive statistics pooling: scalar-score attention over frames,
// followed by the attention-weighted mean and standard deviation,
// concatenated into one utterance vector of length 2D.

#pragma once

#include "sermtl/tape.hpp"

namespace sermtl {

struct PoolingParams {
  Tensor w_att;  // [D, d_a]
  Tensor b_att;  // [d_a]
  Tensor v_att;  // [d_a]
  double eps = 1e-6;

  std::size_t attn_dim() const { return v_att.extent(0); }
};

// d_a default: D/2 rounded up.
std::size_t default_attn_dim(std::size_t feature_dim);

// e_t = v . tanh(W^T h_t + b), shape [T].
Var attention_logits(Tape& tape, Var seq, Var w_att, Var b_att, Var v_att);

// alpha = softmax(att_logits); mu = sum_t alpha_t h_t;
// sigma = sqrt(max(sum_t alpha_t h_t^2 - mu^2, 0) + eps); returns
// concat(mu, sigma), shape [2D].
Var weighted_stats_pool(Tape& tape, Var seq, Var att_logits, double eps);

Var attentive_stats_pool(Tape& tape, Var seq, Var w_att, Var b_att, Var v_att,
                         double eps);
Tensor attentive_stats_pool(const Tensor& seq, const PoolingParams& params);

}  // namespace sermtl
