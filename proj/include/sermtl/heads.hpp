// Task branches: two-layer classifier heads (affine -> LayerNorm ->
// ReLU -> Dropout -> affine) for emotion/gender/speaker, and the ASR
// head (LSTM -> same two-layer block over frames, emitting per-frame
// logits over vocab plus the blank at index 0).

#pragma once

#include <random>

#include "sermtl/tape.hpp"

namespace sermtl {

struct ClassifierHeadParams {
  Tensor w1, b1;            // [in, d_h], [d_h]
  Tensor ln_gain, ln_bias;  // [d_h]
  Tensor w2, b2;            // [d_h, n_out], [n_out]
  double dropout_rate = 0.1;
  double ln_eps = 1e-5;

  std::size_t in_dim() const { return w1.extent(0); }
  std::size_t hidden_dim() const { return w1.extent(1); }
  std::size_t out_dim() const { return w2.extent(1); }
};

struct LstmParams {
  Tensor w_ih;  // [4H, D]
  Tensor w_hh;  // [4H, H]
  Tensor b;     // [4H], gate order i,f,g,o
  std::size_t hidden_dim() const { return w_hh.extent(1); }
};

struct AsrHeadParams {
  LstmParams lstm;
  ClassifierHeadParams out;  // d_r -> d_h -> vocab+1
};

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init; LN gain 1, bias 0.
ClassifierHeadParams make_classifier_head(std::size_t in_dim,
                                          std::size_t hidden_dim,
                                          std::size_t out_dim,
                                          double dropout_rate,
                                          std::mt19937_64& rng);
// Same init plus forget-gate bias +1.
AsrHeadParams make_asr_head(std::size_t in_dim, std::size_t recurrent_dim,
                            std::size_t hidden_dim, std::size_t vocab_size,
                            double dropout_rate, std::mt19937_64& rng);

struct ClassifierHeadVars {
  Var w1, b1, ln_gain, ln_bias, w2, b2;
  double dropout_rate = 0.0;
  double ln_eps = 1e-5;
};
ClassifierHeadVars lift(Tape& tape, const ClassifierHeadParams& p,
                        bool requires_grad);

struct AsrHeadVars {
  Var w_ih, w_hh, b;
  ClassifierHeadVars out;
};
AsrHeadVars lift(Tape& tape, const AsrHeadParams& p, bool requires_grad);

struct HeadActivations {
  Var hidden1;  // output of the first linear block, [d_h] (or [T,d_h])
  Var logits;
};

struct AsrActivations {
  Var lstm_out;  // [T, d_r]
  Var hidden1;   // [T, d_h]
  Var logits;    // [T, vocab+1]
};

// Inverted dropout: mask elements are 1/(1-rate) or 0; identity in eval
// mode, so no rescale is needed at inference.
Var dropout(Tape& tape, Var x, double rate, bool training,
            std::mt19937_64* rng);

// hidden1 = dropout(relu(layer_norm(affine(x)))); x is a vector [in].
Var classifier_hidden(Tape& tape, Var x, const ClassifierHeadVars& head,
                      bool training, std::mt19937_64* rng);
// Second block applied to hidden1 (or a co-attention-fused replacement).
Var classifier_logits(Tape& tape, Var hidden1,
                      const ClassifierHeadVars& head);
HeadActivations classifier_forward(Tape& tape, Var x,
                                   const ClassifierHeadVars& head,
                                   bool training, std::mt19937_64* rng);

// Fused single-layer LSTM over the whole sequence. State starts at
// zero; backward runs full BPTT.
Var lstm_seq(Tape& tape, Var seq, Var w_ih, Var w_hh, Var b);

AsrActivations asr_forward(Tape& tape, Var seq, const AsrHeadVars& head,
                           bool training, std::mt19937_64* rng);

// Eval-mode conveniences (no dropout, no gradients).
Tensor classifier_forward_eval(const Tensor& x,
                               const ClassifierHeadParams& head);
Tensor asr_forward_eval(const Tensor& seq, const AsrHeadParams& head);

}  // namespace sermtl
