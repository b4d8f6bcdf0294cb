#include "sermtl/pooling.hpp"

namespace sermtl {

std::size_t default_attn_dim(std::size_t feature_dim) {
  return (feature_dim + 1) / 2;
}

Var attention_logits(Tape& tape, Var seq, Var w_att, Var b_att, Var v_att) {
  Var scores = tape.affine(seq, w_att, b_att);  // [T, d_a]
  return tape.matvec(tape.tanh(scores), v_att);  // [T]
}

Var weighted_stats_pool(Tape& tape, Var seq, Var att_logits, double eps) {
  const Tensor& ts = tape.val(seq);
  require_shape(ts.rank() == 2, "weighted_stats_pool: need [T,D]");
  if (ts.extent(0) == 0) {
    throw ShapeError("weighted_stats_pool: empty sequence");
  }
  require_shape(tape.val(att_logits).numel() == ts.extent(0),
                "weighted_stats_pool: logits length mismatch");
  if (eps <= 0.0) throw ConfigError("weighted_stats_pool: eps must be > 0");

  Var alpha = tape.softmax(att_logits, 0);        // [T]
  Var mu = tape.vecmat(alpha, seq);               // [D]
  Var second = tape.vecmat(alpha, tape.mul(seq, seq));
  Var variance = tape.sub(second, tape.mul(mu, mu));
  // clamp at 0 before the eps floor so the square root stays real
  Var sigma = tape.sqrt(tape.add_scalar(tape.relu(variance), eps));
  return tape.concat({mu, sigma});
}

Var attentive_stats_pool(Tape& tape, Var seq, Var w_att, Var b_att, Var v_att,
                         double eps) {
  Var logits = attention_logits(tape, seq, w_att, b_att, v_att);
  return weighted_stats_pool(tape, seq, logits, eps);
}

Tensor attentive_stats_pool(const Tensor& seq, const PoolingParams& params) {
  Tape tape;
  Var s = tape.constant(seq);
  Var w = tape.constant(params.w_att);
  Var b = tape.constant(params.b_att);
  Var v = tape.constant(params.v_att);
  return tape.val(attentive_stats_pool(tape, s, w, b, v, params.eps));
}

}  // namespace sermtl
