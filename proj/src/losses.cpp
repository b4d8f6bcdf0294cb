#include "sermtl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sermtl {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// log softmax rows of [T, K]
Tensor log_softmax_rows(const Tensor& logits) {
  const std::size_t t_len = logits.extent(0), k_len = logits.extent(1);
  Tensor lp({t_len, k_len});
  for (std::size_t t = 0; t < t_len; ++t) {
    double mx = logits(t, 0);
    for (std::size_t k = 1; k < k_len; ++k) mx = std::max(mx, logits(t, k));
    double z = 0.0;
    for (std::size_t k = 0; k < k_len; ++k)
      z += std::exp(logits(t, k) - mx);
    const double lz = mx + std::log(z);
    for (std::size_t k = 0; k < k_len; ++k) lp(t, k) = logits(t, k) - lz;
  }
  return lp;
}

}  // namespace

void validate(const ObjectiveConfig& cfg) {
  if (cfg.alpha < 0.0 || cfg.alpha >= 1.0 / 3.0) {
    throw ConfigError("objective.alpha must satisfy 0 <= alpha < 1/3, got " +
                      std::to_string(cfg.alpha));
  }
  if (cfg.beta < 0.0) {
    throw ConfigError("objective.beta must be >= 0, got " +
                      std::to_string(cfg.beta));
  }
}

void validate(const SwfcConfig& cfg) {
  if (cfg.tau <= 0.0) {
    throw ConfigError("swfc.tau must be > 0, got " + std::to_string(cfg.tau));
  }
  if (cfg.gamma < 0.0) {
    throw ConfigError("swfc.gamma must be >= 0, got " +
                      std::to_string(cfg.gamma));
  }
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

Var cross_entropy(Tape& tape, Var logits, const std::vector<int>& labels) {
  const Tensor& tl = tape.val(logits);
  require_shape(tl.rank() == 2, "cross_entropy: need [n,C] logits");
  const std::size_t n = tl.extent(0), c = tl.extent(1);
  require_shape(labels.size() == n, "cross_entropy: labels length mismatch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) +
                              " out of [0," + std::to_string(c) + ")");
    }
  }
  Tensor lp = log_softmax_rows(tl);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) loss -= lp(i, labels[i]);
  loss /= static_cast<double>(n);

  return tape.make_node(
      Tensor::scalar(loss),
      [logits, labels, lp = std::move(lp), n, c](Tape& t, Var self) {
        const double g = t.grad(self)[0] / static_cast<double>(n);
        Tensor gl({n, c});
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t k = 0; k < c; ++k) {
            double p = std::exp(lp(i, k));
            if (k == static_cast<std::size_t>(labels[i])) p -= 1.0;
            gl(i, k) = g * p;
          }
        }
        t.accum_grad(logits, gl);
      },
      tape.requires_grad(logits));
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  Tape tape;
  return tape.val(cross_entropy(tape, tape.constant(logits), labels)).item();
}

// ---------------------------------------------------------------------------
// CTC
// ---------------------------------------------------------------------------

namespace {

std::vector<int> blank_extend(const std::vector<int>& target) {
  std::vector<int> z(2 * target.size() + 1, 0);
  for (std::size_t i = 0; i < target.size(); ++i) z[2 * i + 1] = target[i];
  return z;
}

std::size_t min_frames_needed(const std::vector<int>& target) {
  std::size_t extra = 0;
  for (std::size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++extra;  // a blank must separate repeats
  }
  return target.size() + extra;
}

// alpha[t][s]: log prob of emitting through frame t and sitting at
// extended-target state s (frame t's emission included).
Tensor ctc_alpha(const Tensor& lp, const std::vector<int>& z) {
  const std::size_t T = lp.extent(0), S = z.size();
  Tensor alpha = Tensor::full({T, S}, kNegInf);
  alpha(0, 0) = lp(0, z[0]);
  if (S > 1) alpha(0, 1) = lp(0, z[1]);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = alpha(t - 1, s);
      if (s >= 1) acc = log_sum_exp(acc, alpha(t - 1, s - 1));
      if (s >= 2 && z[s] != 0 && z[s] != z[s - 2]) {
        acc = log_sum_exp(acc, alpha(t - 1, s - 2));
      }
      alpha(t, s) = acc == kNegInf ? kNegInf : acc + lp(t, z[s]);
    }
  }
  return alpha;
}

// beta[t][s]: log prob of completing the target from state s after
// frame t (frame t's emission excluded).
Tensor ctc_beta(const Tensor& lp, const std::vector<int>& z) {
  const std::size_t T = lp.extent(0), S = z.size();
  Tensor beta = Tensor::full({T, S}, kNegInf);
  beta(T - 1, S - 1) = 0.0;
  if (S > 1) beta(T - 1, S - 2) = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = beta(t + 1, s) + lp(t + 1, z[s]);
      if (s + 1 < S) {
        acc = log_sum_exp(acc, beta(t + 1, s + 1) + lp(t + 1, z[s + 1]));
      }
      if (s + 2 < S && z[s + 2] != 0 && z[s + 2] != z[s]) {
        acc = log_sum_exp(acc, beta(t + 1, s + 2) + lp(t + 1, z[s + 2]));
      }
      beta(t, s) = acc;
    }
  }
  return beta;
}

}  // namespace

Var ctc_loss(Tape& tape, Var logits, const std::vector<int>& target) {
  const Tensor& tl = tape.val(logits);
  require_shape(tl.rank() == 2, "ctc_loss: need [T,V+1] logits");
  const std::size_t T = tl.extent(0), K = tl.extent(1);
  require_shape(K >= 2, "ctc_loss: need blank plus at least one symbol");
  for (int tok : target) {
    if (tok < 1 || static_cast<std::size_t>(tok) >= K) {
      throw std::out_of_range("ctc_loss: token " + std::to_string(tok) +
                              " out of [1," + std::to_string(K) + ")");
    }
  }
  if (T < min_frames_needed(target)) {
    throw InfeasibleTargetError(
        "ctc_loss: target of length " + std::to_string(target.size()) +
        " cannot be emitted in " + std::to_string(T) + " frames");
  }
  if (T == 0) return tape.constant(Tensor::scalar(0.0));

  const std::vector<int> z = blank_extend(target);
  const std::size_t S = z.size();
  Tensor lp = log_softmax_rows(tl);
  Tensor alpha = ctc_alpha(lp, z);
  double log_p = alpha(T - 1, S - 1);
  if (S > 1) log_p = log_sum_exp(log_p, alpha(T - 1, S - 2));
  if (log_p == kNegInf) {
    throw InfeasibleTargetError("ctc_loss: no feasible alignment");
  }

  return tape.make_node(
      Tensor::scalar(-log_p),
      [logits, z, lp = std::move(lp), alpha = std::move(alpha), log_p, T, K,
       S](Tape& t, Var self) {
        const double g = t.grad(self)[0];
        Tensor beta = ctc_beta(lp, z);
        Tensor gl({T, K});
        for (std::size_t ti = 0; ti < T; ++ti) {
          // occupancy of each symbol at frame ti
          std::vector<double> occ(K, 0.0);
          for (std::size_t s = 0; s < S; ++s) {
            const double a = alpha(ti, s), b = beta(ti, s);
            if (a == kNegInf || b == kNegInf) continue;
            occ[z[s]] += std::exp(a + b - log_p);
          }
          for (std::size_t k = 0; k < K; ++k) {
            gl(ti, k) = g * (std::exp(lp(ti, k)) - occ[k]);
          }
        }
        t.accum_grad(logits, gl);
      },
      tape.requires_grad(logits));
}

double ctc_loss(const Tensor& logits, const std::vector<int>& target) {
  Tape tape;
  return tape.val(ctc_loss(tape, tape.constant(logits), target)).item();
}

// ---------------------------------------------------------------------------
// SWFC
// ---------------------------------------------------------------------------

std::vector<double> swfc_sample_weights(
    const std::vector<int>& labels, WeightMode mode,
    const std::vector<long>& class_counts) {
  const std::size_t n = labels.size();
  std::vector<double> w(n, 1.0);
  if (mode == WeightMode::uniform) return w;

  const std::size_t c = class_counts.size();
  long total = 0;
  for (long v : class_counts) total += v;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw std::out_of_range("swfc: label " + std::to_string(y) +
                              " out of [0," + std::to_string(c) + ")");
    }
    if (class_counts[y] <= 0) {
      throw ConfigError("swfc: class " + std::to_string(y) +
                        " appears in batch but has count 0");
    }
    w[i] = static_cast<double>(total) /
           (static_cast<double>(c) * static_cast<double>(class_counts[y]));
  }
  double mean = 0.0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(n);
  for (double& v : w) v /= mean;
  return w;
}

Var swfc_loss(Tape& tape, Var embeddings, const std::vector<int>& labels,
              const SwfcConfig& cfg, const std::vector<long>& class_counts) {
  validate(cfg);
  const Tensor& te = tape.val(embeddings);
  require_shape(te.rank() == 2, "swfc_loss: need [N,E] embeddings");
  const std::size_t n = te.extent(0);
  if (n < 2) {
    throw BatchTooSmallError("swfc_loss: need at least 2 samples, got " +
                             std::to_string(n));
  }
  require_shape(labels.size() == n, "swfc_loss: labels length mismatch");
  const std::vector<double> w =
      swfc_sample_weights(labels, cfg.weight_mode, class_counts);

  Tensor offdiag = Tensor::full({n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) offdiag(i, i) = 0.0;

  Var normed = tape.l2_normalize_rows(embeddings);
  Var sims = tape.scale(tape.gram_rows(normed), 1.0 / cfg.tau);
  Var p = tape.masked_softmax_rows(sims, offdiag);
  Var one_minus_p = tape.add_scalar(tape.neg(p), 1.0);
  Var focal = tape.pow_const(one_minus_p, cfg.gamma);

  if (cfg.variant == SwfcVariant::eq2_literal) {
    // -(1/N) sum_i w_i sum_{j != i} p_ij (1 - p_ij)^gamma
    Tensor coeff({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        coeff(i, j) = i == j ? 0.0 : w[i];
    Var weighted = tape.mul_const(tape.mul(p, focal), std::move(coeff));
    return tape.scale(tape.sum(weighted), -1.0 / static_cast<double>(n));
  }

  // focal_supcon:
  // -(1/N) sum_i w_i / |P(i)| sum_{j in P(i)} (1-p_ij)^gamma log p_ij
  Tensor pos({n, n});
  std::vector<double> pos_count(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && labels[i] == labels[j]) {
        pos(i, j) = 1.0;
        pos_count[i] += 1.0;
      }
    }
  }
  Tensor coeff({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    if (pos_count[i] == 0.0) continue;  // no positives: sample skipped
    for (std::size_t j = 0; j < n; ++j) {
      coeff(i, j) = pos(i, j) != 0.0 ? w[i] / pos_count[i] : 0.0;
    }
  }
  Var logp = tape.log_masked(p, std::move(pos));
  Var weighted = tape.mul_const(tape.mul(focal, logp), std::move(coeff));
  return tape.scale(tape.sum(weighted), -1.0 / static_cast<double>(n));
}

double swfc_loss(const Tensor& embeddings, const std::vector<int>& labels,
                 const SwfcConfig& cfg,
                 const std::vector<long>& class_counts) {
  Tape tape;
  return tape
      .val(swfc_loss(tape, tape.constant(embeddings), labels, cfg,
                     class_counts))
      .item();
}

// ---------------------------------------------------------------------------
// combined objective
// ---------------------------------------------------------------------------

LossBreakdown combined_objective(const TaskLosses& parts,
                                 const ObjectiveConfig& cfg,
                                 const TaskMask& mask) {
  validate(cfg);
  const int k = mask.count();
  LossBreakdown b;
  b.l_emotion = parts.emotion;
  b.l_gender = mask.gender ? parts.gender : 0.0;
  b.l_speaker = mask.speaker ? parts.speaker : 0.0;
  b.l_asr = mask.asr ? parts.asr : 0.0;
  b.l_swfc = parts.swfc;
  b.total = (1.0 - k * cfg.alpha) * b.l_emotion + cfg.alpha * b.l_gender +
            cfg.alpha * b.l_speaker + cfg.alpha * b.l_asr +
            cfg.beta * b.l_swfc;
  return b;
}

}  // namespace sermtl
