#include "sermtl/heads.hpp"

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

}  // namespace

ClassifierHeadParams make_classifier_head(std::size_t in_dim,
                                          std::size_t hidden_dim,
                                          std::size_t out_dim,
                                          double dropout_rate,
                                          std::mt19937_64& rng) {
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ConfigError("dropout_rate must be in [0,1)");
  }
  ClassifierHeadParams p;
  p.w1 = uniform_init({in_dim, hidden_dim}, in_dim, rng);
  p.b1 = uniform_init({hidden_dim}, in_dim, rng);
  p.ln_gain = Tensor::full({hidden_dim}, 1.0);
  p.ln_bias = Tensor::zeros({hidden_dim});
  p.w2 = uniform_init({hidden_dim, out_dim}, hidden_dim, rng);
  p.b2 = uniform_init({out_dim}, hidden_dim, rng);
  p.dropout_rate = dropout_rate;
  return p;
}

AsrHeadParams make_asr_head(std::size_t in_dim, std::size_t recurrent_dim,
                            std::size_t hidden_dim, std::size_t vocab_size,
                            double dropout_rate, std::mt19937_64& rng) {
  AsrHeadParams p;
  const std::size_t h4 = 4 * recurrent_dim;
  p.lstm.w_ih = uniform_init({h4, in_dim}, in_dim, rng);
  p.lstm.w_hh = uniform_init({h4, recurrent_dim}, recurrent_dim, rng);
  p.lstm.b = uniform_init({h4}, recurrent_dim, rng);
  for (std::size_t i = 0; i < recurrent_dim; ++i) {
    p.lstm.b[recurrent_dim + i] += 1.0;  // forget gate starts open
  }
  p.out = make_classifier_head(recurrent_dim, hidden_dim, vocab_size + 1,
                               dropout_rate, rng);
  return p;
}

ClassifierHeadVars lift(Tape& tape, const ClassifierHeadParams& p,
                        bool requires_grad) {
  ClassifierHeadVars v;
  v.w1 = tape.leaf(p.w1, requires_grad);
  v.b1 = tape.leaf(p.b1, requires_grad);
  v.ln_gain = tape.leaf(p.ln_gain, requires_grad);
  v.ln_bias = tape.leaf(p.ln_bias, requires_grad);
  v.w2 = tape.leaf(p.w2, requires_grad);
  v.b2 = tape.leaf(p.b2, requires_grad);
  v.dropout_rate = p.dropout_rate;
  v.ln_eps = p.ln_eps;
  return v;
}

AsrHeadVars lift(Tape& tape, const AsrHeadParams& p, bool requires_grad) {
  AsrHeadVars v;
  v.w_ih = tape.leaf(p.lstm.w_ih, requires_grad);
  v.w_hh = tape.leaf(p.lstm.w_hh, requires_grad);
  v.b = tape.leaf(p.lstm.b, requires_grad);
  v.out = lift(tape, p.out, requires_grad);
  return v;
}

Var dropout(Tape& tape, Var x, double rate, bool training,
            std::mt19937_64* rng) {
  if (!training || rate == 0.0) return x;
  if (rng == nullptr) {
    throw ConfigError("dropout: training mode needs an rng");
  }
  const double keep = 1.0 - rate;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Tensor mask(tape.val(x).shape());
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    mask[i] = unif(*rng) < keep ? 1.0 / keep : 0.0;
  }
  return tape.mul_const(x, std::move(mask));
}

namespace {

// First linear block on a [n, in] matrix (rows = frames or a single
// vector lifted to one row).
Var linear_block(Tape& tape, Var x, const ClassifierHeadVars& head,
                 bool training, std::mt19937_64* rng) {
  Var h = tape.affine(x, head.w1, head.b1);
  h = tape.layer_norm(h, head.ln_gain, head.ln_bias, head.ln_eps);
  h = tape.relu(h);
  return dropout(tape, h, head.dropout_rate, training, rng);
}

}  // namespace

Var classifier_hidden(Tape& tape, Var x, const ClassifierHeadVars& head,
                      bool training, std::mt19937_64* rng) {
  const Tensor& tx = tape.val(x);
  require_shape(tx.rank() == 1, "classifier_hidden: need a vector input");
  Var row = tape.reshape(x, {1, tx.extent(0)});
  Var h = linear_block(tape, row, head, training, rng);
  return tape.reshape(h, {tape.val(h).extent(1)});
}

Var classifier_logits(Tape& tape, Var hidden1,
                      const ClassifierHeadVars& head) {
  const Tensor& th = tape.val(hidden1);
  if (th.rank() == 1) {
    Var row = tape.reshape(hidden1, {1, th.extent(0)});
    Var out = tape.affine(row, head.w2, head.b2);
    return tape.reshape(out, {tape.val(out).extent(1)});
  }
  return tape.affine(hidden1, head.w2, head.b2);
}

HeadActivations classifier_forward(Tape& tape, Var x,
                                   const ClassifierHeadVars& head,
                                   bool training, std::mt19937_64* rng) {
  HeadActivations act;
  act.hidden1 = classifier_hidden(tape, x, head, training, rng);
  act.logits = classifier_logits(tape, act.hidden1, head);
  return act;
}

Var lstm_seq(Tape& tape, Var seq, Var w_ih, Var w_hh, Var b) {
  const Tensor& x = tape.val(seq);
  const Tensor& wih = tape.val(w_ih);
  const Tensor& whh = tape.val(w_hh);
  const Tensor& bias = tape.val(b);
  require_shape(x.rank() == 2 && x.extent(0) >= 1,
                "lstm_seq: need a non-empty [T,D] sequence");
  const std::size_t T = x.extent(0), D = x.extent(1);
  require_shape(whh.rank() == 2 && wih.rank() == 2 && bias.rank() == 1,
                "lstm_seq: bad parameter ranks");
  const std::size_t H = whh.extent(1);
  require_shape(wih.extent(0) == 4 * H && wih.extent(1) == D &&
                    whh.extent(0) == 4 * H && bias.extent(0) == 4 * H,
                "lstm_seq: parameter shapes inconsistent with D=" +
                    std::to_string(D) + " H=" + std::to_string(H));

  // Gate caches for BPTT.
  Tensor gi({T, H}), gf({T, H}), gg({T, H}), go({T, H});
  Tensor cell({T, H}), tc({T, H});
  Tensor hidden({T, H});

  std::vector<double> z(4 * H);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t r = 0; r < 4 * H; ++r) {
      double acc = bias[r];
      const double* wr = wih.data() + r * D;
      const double* xt = x.data() + t * D;
      for (std::size_t j = 0; j < D; ++j) acc += wr[j] * xt[j];
      if (t > 0) {
        const double* ur = whh.data() + r * H;
        const double* hp = hidden.data() + (t - 1) * H;
        for (std::size_t j = 0; j < H; ++j) acc += ur[j] * hp[j];
      }
      z[r] = acc;
    }
    for (std::size_t j = 0; j < H; ++j) {
      const double iv = 1.0 / (1.0 + std::exp(-z[j]));
      const double fv = 1.0 / (1.0 + std::exp(-z[H + j]));
      const double gv = std::tanh(z[2 * H + j]);
      const double ov = 1.0 / (1.0 + std::exp(-z[3 * H + j]));
      const double cprev = t > 0 ? cell(t - 1, j) : 0.0;
      const double cv = fv * cprev + iv * gv;
      const double tcv = std::tanh(cv);
      gi(t, j) = iv;
      gf(t, j) = fv;
      gg(t, j) = gv;
      go(t, j) = ov;
      cell(t, j) = cv;
      tc(t, j) = tcv;
      hidden(t, j) = ov * tcv;
    }
  }

  Tensor out = hidden;
  return tape.make_node(
      std::move(out),
      [seq, w_ih, w_hh, b, gi = std::move(gi), gf = std::move(gf),
       gg = std::move(gg), go = std::move(go), cell = std::move(cell),
       tc = std::move(tc), hidden = std::move(hidden), T, D,
       H](Tape& t2, Var self) {
        const Tensor& g = t2.grad(self);
        const Tensor& x2 = t2.val(seq);
        const Tensor& wih2 = t2.val(w_ih);
        const Tensor& whh2 = t2.val(w_hh);

        Tensor gx({T, D});
        Tensor gwih({4 * H, D}), gwhh({4 * H, H}), gb({4 * H});
        std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0);
        std::vector<double> dz(4 * H);

        for (std::size_t t = T; t-- > 0;) {
          for (std::size_t j = 0; j < H; ++j) {
            const double dh = g(t, j) + dh_next[j];
            const double ov = go(t, j);
            const double tcv = tc(t, j);
            const double dov = dh * tcv;
            const double dc = dh * ov * (1.0 - tcv * tcv) + dc_next[j];
            const double cprev = t > 0 ? cell(t - 1, j) : 0.0;
            const double fv = gf(t, j);
            const double iv = gi(t, j);
            const double gv = gg(t, j);
            dz[j] = dc * gv * iv * (1.0 - iv);
            dz[H + j] = dc * cprev * fv * (1.0 - fv);
            dz[2 * H + j] = dc * iv * (1.0 - gv * gv);
            dz[3 * H + j] = dov * ov * (1.0 - ov);
            dc_next[j] = dc * fv;
          }
          const double* xt = x2.data() + t * D;
          const double* hp = t > 0 ? hidden.data() + (t - 1) * H : nullptr;
          std::fill(dh_next.begin(), dh_next.end(), 0.0);
          for (std::size_t r = 0; r < 4 * H; ++r) {
            const double dzr = dz[r];
            gb[r] += dzr;
            double* gwr = gwih.data() + r * D;
            for (std::size_t j = 0; j < D; ++j) gwr[j] += dzr * xt[j];
            double* gxr = gx.data() + t * D;
            const double* wr = wih2.data() + r * D;
            for (std::size_t j = 0; j < D; ++j) gxr[j] += dzr * wr[j];
            if (hp != nullptr) {
              double* gur = gwhh.data() + r * H;
              for (std::size_t j = 0; j < H; ++j) gur[j] += dzr * hp[j];
            }
            const double* ur = whh2.data() + r * H;
            for (std::size_t j = 0; j < H; ++j) dh_next[j] += dzr * ur[j];
          }
        }
        t2.accum_grad(seq, gx);
        t2.accum_grad(w_ih, gwih);
        t2.accum_grad(w_hh, gwhh);
        t2.accum_grad(b, gb);
      },
      tape.requires_grad(seq) || tape.requires_grad(w_ih) ||
          tape.requires_grad(w_hh) || tape.requires_grad(b));
}

AsrActivations asr_forward(Tape& tape, Var seq, const AsrHeadVars& head,
                           bool training, std::mt19937_64* rng) {
  AsrActivations act;
  act.lstm_out = lstm_seq(tape, seq, head.w_ih, head.w_hh, head.b);
  act.hidden1 = linear_block(tape, act.lstm_out, head.out, training, rng);
  act.logits = classifier_logits(tape, act.hidden1, head.out);
  return act;
}

Tensor classifier_forward_eval(const Tensor& x,
                               const ClassifierHeadParams& head) {
  Tape tape;
  Var xv = tape.constant(x);
  ClassifierHeadVars hv = lift(tape, head, false);
  return tape.val(classifier_forward(tape, xv, hv, false, nullptr).logits);
}

Tensor asr_forward_eval(const Tensor& seq, const AsrHeadParams& head) {
  Tape tape;
  Var sv = tape.constant(seq);
  AsrHeadVars hv = lift(tape, head, false);
  return tape.val(asr_forward(tape, sv, hv, false, nullptr).logits);
}

}  // namespace sermtl
