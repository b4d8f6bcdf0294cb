#include "sermtl/coattention.hpp"

#include <cmath>

namespace sermtl {

namespace {

Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> unif(-bound, bound);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = unif(rng);
  return t;
}

// project a vector feature: [d] -> [d_c]
Var project_vec(Tape& tape, Var x, Var w, Var b) {
  const std::size_t d = tape.val(x).extent(0);
  Var row = tape.reshape(x, {1, d});
  Var out = tape.affine(row, w, b);
  return tape.reshape(out, {tape.val(out).extent(1)});
}

}  // namespace

CoAttentionParams make_coattention(std::size_t emo_dim, std::size_t aux_dim,
                                   std::size_t asr_dim,
                                   std::size_t common_dim,
                                   std::mt19937_64& rng) {
  CoAttentionParams p;
  p.w_emo = uniform_init({emo_dim, common_dim}, emo_dim, rng);
  p.b_emo = uniform_init({common_dim}, emo_dim, rng);
  p.w_gen = uniform_init({aux_dim, common_dim}, aux_dim, rng);
  p.b_gen = uniform_init({common_dim}, aux_dim, rng);
  p.w_spk = uniform_init({aux_dim, common_dim}, aux_dim, rng);
  p.b_spk = uniform_init({common_dim}, aux_dim, rng);
  p.w_asr = uniform_init({asr_dim, common_dim}, asr_dim, rng);
  p.b_asr = uniform_init({common_dim}, asr_dim, rng);
  return p;
}

CoAttentionVars lift(Tape& tape, const CoAttentionParams& p,
                     bool requires_grad) {
  CoAttentionVars v;
  v.w_emo = tape.leaf(p.w_emo, requires_grad);
  v.b_emo = tape.leaf(p.b_emo, requires_grad);
  v.w_gen = tape.leaf(p.w_gen, requires_grad);
  v.b_gen = tape.leaf(p.b_gen, requires_grad);
  v.w_spk = tape.leaf(p.w_spk, requires_grad);
  v.b_spk = tape.leaf(p.b_spk, requires_grad);
  v.w_asr = tape.leaf(p.w_asr, requires_grad);
  v.b_asr = tape.leaf(p.b_asr, requires_grad);
  return v;
}

Var coattend(Tape& tape, Var emo, const CoAttentionInputs& aux,
             const CoAttentionVars& params) {
  Var q = project_vec(tape, emo, params.w_emo, params.b_emo);
  const std::size_t dc = tape.val(q).extent(0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dc));

  std::vector<Var> values;
  std::vector<Var> scores;

  auto push_aux = [&](Var value) {
    values.push_back(value);
    scores.push_back(tape.scale(tape.dot(q, value), scale));
  };

  if (aux.gender) {
    push_aux(project_vec(tape, *aux.gender, params.w_gen, params.b_gen));
  }
  if (aux.speaker) {
    push_aux(project_vec(tape, *aux.speaker, params.w_spk, params.b_spk));
  }
  if (aux.asr_seq) {
    const Tensor& seq = tape.val(*aux.asr_seq);
    require_shape(seq.rank() == 2 && seq.extent(0) >= 1,
                  "coattend: asr sequence must be non-empty [T,d_r]");
    Var proj = tape.affine(*aux.asr_seq, params.w_asr, params.b_asr);
    Var frame_scores = tape.scale(tape.matvec(proj, q), scale);  // [T]
    Var beta = tape.softmax(frame_scores, 0);
    push_aux(tape.vecmat(beta, proj));
  }

  if (values.empty()) return q;

  Var stacked = tape.concat(scores);           // [k]
  Var weights = tape.softmax(stacked, 0);      // [k]
  Var out = q;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out = tape.add(out, tape.scale_vec(values[i], tape.element(weights, i)));
  }
  return out;
}

Var coattend(Tape& tape, Var emo, Var gen, Var spk, Var asr_seq,
             const CoAttentionVars& params) {
  CoAttentionInputs aux;
  aux.gender = gen;
  aux.speaker = spk;
  aux.asr_seq = asr_seq;
  return coattend(tape, emo, aux, params);
}

Tensor coattend(const Tensor& emo, const Tensor& gen, const Tensor& spk,
                const Tensor& asr_seq, const CoAttentionParams& params) {
  Tape tape;
  Var e = tape.constant(emo);
  Var g = tape.constant(gen);
  Var s = tape.constant(spk);
  Var a = tape.constant(asr_seq);
  CoAttentionVars v = lift(tape, params, false);
  return tape.val(coattend(tape, e, g, s, a, v));
}

}  // namespace sermtl
