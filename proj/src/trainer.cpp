#include "sermtl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "sermtl/kernels.hpp"
#include "sermtl/rng.hpp"

namespace sermtl {

namespace fs = std::filesystem;

void validate(const TrainConfig& cfg) {
  validate(cfg.objective);
  validate(cfg.swfc);
  if (cfg.lr <= 0.0) throw ConfigError("train.lr must be > 0");
  if (cfg.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (cfg.use_swfc && cfg.batch_size < 2) {
    throw ConfigError("train.batch_size must be >= 2 when use_swfc is on");
  }
  if (cfg.use_coattention && !cfg.use_mtl) {
    throw ConfigError("train.use_coattention requires use_mtl");
  }
  if (cfg.use_mtl && cfg.tasks.count() == 0) {
    throw ConfigError(
        "train.tasks: enable at least one auxiliary task or disable MTL");
  }
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) {
    throw ConfigError("train.dropout must be in [0,1)");
  }
  if (cfg.d_hidden < 1 || cfg.d_recurrent < 1) {
    throw ConfigError("train.d_hidden and train.d_recurrent must be >= 1");
  }
}

TrainConfig desk_config() {
  TrainConfig cfg;
  cfg.d_hidden = 32;
  cfg.d_recurrent = 16;
  cfg.epochs = 20;
  return cfg;
}

ModelDims infer_dims(const std::vector<Utterance>& train) {
  if (train.empty()) throw ConfigError("trainer: empty corpus");
  ModelDims dims;
  dims.n_layers = train.front().stack.num_layers();
  dims.feature_dim = train.front().stack.dim();
  long max_speaker = 0;
  long max_token = 1;
  for (const Utterance& u : train) {
    if (u.stack.num_layers() != dims.n_layers ||
        u.stack.dim() != dims.feature_dim) {
      throw ConfigError("trainer: utterance " + u.id +
                        " has inconsistent stack dimensions");
    }
    if (u.emotion < 0 || u.emotion >= kNumEmotions) {
      throw ConfigError("trainer: utterance " + u.id + " emotion label " +
                        std::to_string(u.emotion) + " out of range");
    }
    if (u.gender < 0 || u.gender >= kNumGenders) {
      throw ConfigError("trainer: utterance " + u.id + " gender label " +
                        std::to_string(u.gender) + " out of range");
    }
    if (u.speaker < 0) {
      throw ConfigError("trainer: utterance " + u.id + " negative speaker id");
    }
    max_speaker = std::max(max_speaker, static_cast<long>(u.speaker));
    for (int tok : u.tokens) {
      if (tok < 1) {
        throw ConfigError("trainer: utterance " + u.id + " token id " +
                          std::to_string(tok) + " must be >= 1");
      }
      max_token = std::max(max_token, static_cast<long>(tok));
    }
  }
  dims.n_speakers = static_cast<std::size_t>(max_speaker) + 1;
  dims.vocab_size = static_cast<std::size_t>(max_token);
  return dims;
}

ModelParams init_params(const ModelDims& dims, const TrainConfig& cfg) {
  auto rng = make_engine(mix_seed(cfg.seed, 0x70726d73ULL));
  const std::size_t d = dims.feature_dim;
  const std::size_t d_a =
      cfg.d_attn > 0 ? cfg.d_attn : default_attn_dim(d);
  const std::size_t d_c = cfg.d_coattn > 0 ? cfg.d_coattn : cfg.d_hidden;

  ModelParams p;
  p.dims = dims;
  p.fusion = FusionParams::uniform(dims.n_layers);

  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::uniform_real_distribution<double> unif(-bound, bound);
  p.pooling.w_att = Tensor({d, d_a});
  for (std::size_t i = 0; i < p.pooling.w_att.numel(); ++i) {
    p.pooling.w_att[i] = unif(rng);
  }
  p.pooling.b_att = Tensor({d_a});
  for (std::size_t i = 0; i < d_a; ++i) p.pooling.b_att[i] = unif(rng);
  const double vbound = 1.0 / std::sqrt(static_cast<double>(d_a));
  std::uniform_real_distribution<double> vunif(-vbound, vbound);
  p.pooling.v_att = Tensor({d_a});
  for (std::size_t i = 0; i < d_a; ++i) p.pooling.v_att[i] = vunif(rng);

  const std::size_t pooled = 2 * d;
  p.emotion = make_classifier_head(pooled, cfg.d_hidden, dims.n_emotions,
                                   cfg.dropout, rng);
  p.gender = make_classifier_head(pooled, cfg.d_hidden, dims.n_genders,
                                  cfg.dropout, rng);
  p.speaker = make_classifier_head(pooled, cfg.d_hidden, dims.n_speakers,
                                   cfg.dropout, rng);
  p.asr = make_asr_head(d, cfg.d_recurrent, cfg.d_hidden, dims.vocab_size,
                        cfg.dropout, rng);
  p.coatt = make_coattention(cfg.d_hidden, cfg.d_hidden, cfg.d_recurrent, d_c,
                             rng);
  return p;
}

namespace {

template <class P, class F>
void visit_head(const std::string& prefix, P& head, F&& f) {
  f(prefix + ".w1", head.w1);
  f(prefix + ".b1", head.b1);
  f(prefix + ".ln_gain", head.ln_gain);
  f(prefix + ".ln_bias", head.ln_bias);
  f(prefix + ".w2", head.w2);
  f(prefix + ".b2", head.b2);
}

template <class P, class F>
void visit_params(P& p, F&& f) {
  f("fusion.layer_logits", p.fusion.layer_logits);
  f("pooling.w_att", p.pooling.w_att);
  f("pooling.b_att", p.pooling.b_att);
  f("pooling.v_att", p.pooling.v_att);
  visit_head("emotion", p.emotion, f);
  visit_head("gender", p.gender, f);
  visit_head("speaker", p.speaker, f);
  f("asr.lstm.w_ih", p.asr.lstm.w_ih);
  f("asr.lstm.w_hh", p.asr.lstm.w_hh);
  f("asr.lstm.b", p.asr.lstm.b);
  visit_head("asr.out", p.asr.out, f);
  f("coatt.w_emo", p.coatt.w_emo);
  f("coatt.b_emo", p.coatt.b_emo);
  f("coatt.w_gen", p.coatt.w_gen);
  f("coatt.b_gen", p.coatt.b_gen);
  f("coatt.w_spk", p.coatt.w_spk);
  f("coatt.b_spk", p.coatt.b_spk);
  f("coatt.w_asr", p.coatt.w_asr);
  f("coatt.b_asr", p.coatt.b_asr);
}

}  // namespace

std::vector<ParamRef> param_registry(ModelParams& p) {
  std::vector<ParamRef> refs;
  visit_params(p, [&](const std::string& name, Tensor& t) {
    refs.push_back({name, &t});
  });
  return refs;
}

// ---------------------------------------------------------------------------
// sample graph
// ---------------------------------------------------------------------------

namespace {

struct LiftedModel {
  Var fusion_logits;
  Var pool_w, pool_b, pool_v;
  ClassifierHeadVars emotion, gender, speaker;
  AsrHeadVars asr;
  CoAttentionVars coatt;
  std::vector<Var> ordered;  // registry order
};

LiftedModel lift_model(Tape& tape, const ModelParams& params,
                       bool requires_grad) {
  LiftedModel m;
  std::unordered_map<const Tensor*, Var> by_ptr;
  visit_params(params, [&](const std::string&, const Tensor& t) {
    Var v = tape.leaf(t, requires_grad);
    m.ordered.push_back(v);
    by_ptr.emplace(&t, v);
  });
  auto at = [&](const Tensor& t) { return by_ptr.at(&t); };
  auto lift_head = [&](const ClassifierHeadParams& h) {
    ClassifierHeadVars v;
    v.w1 = at(h.w1);
    v.b1 = at(h.b1);
    v.ln_gain = at(h.ln_gain);
    v.ln_bias = at(h.ln_bias);
    v.w2 = at(h.w2);
    v.b2 = at(h.b2);
    v.dropout_rate = h.dropout_rate;
    v.ln_eps = h.ln_eps;
    return v;
  };
  m.fusion_logits = at(params.fusion.layer_logits);
  m.pool_w = at(params.pooling.w_att);
  m.pool_b = at(params.pooling.b_att);
  m.pool_v = at(params.pooling.v_att);
  m.emotion = lift_head(params.emotion);
  m.gender = lift_head(params.gender);
  m.speaker = lift_head(params.speaker);
  m.asr.w_ih = at(params.asr.lstm.w_ih);
  m.asr.w_hh = at(params.asr.lstm.w_hh);
  m.asr.b = at(params.asr.lstm.b);
  m.asr.out = lift_head(params.asr.out);
  m.coatt.w_emo = at(params.coatt.w_emo);
  m.coatt.b_emo = at(params.coatt.b_emo);
  m.coatt.w_gen = at(params.coatt.w_gen);
  m.coatt.b_gen = at(params.coatt.b_gen);
  m.coatt.w_spk = at(params.coatt.w_spk);
  m.coatt.b_spk = at(params.coatt.b_spk);
  m.coatt.w_asr = at(params.coatt.w_asr);
  m.coatt.b_asr = at(params.coatt.b_asr);
  return m;
}

// dropout stream tags per head
constexpr std::uint64_t kEmotionTag = 1, kGenderTag = 2, kSpeakerTag = 3,
                        kAsrTag = 4;

struct SampleGraph {
  Tape tape{160};
  std::vector<Var> ordered;
  Var embedding{};
  Var emotion_logits{};
  std::optional<Var> gender_logits, speaker_logits, asr_logits;
  std::optional<Var> ce_emotion, ce_gender, ce_speaker, ctc;
};

SampleGraph build_sample_graph(const ModelParams& params, const Utterance& u,
                               const TrainConfig& cfg, bool training,
                               bool with_losses, std::size_t epoch,
                               std::size_t sample_key) {
  SampleGraph g;
  Tape& tape = g.tape;
  LiftedModel m = lift_model(tape, params, training);
  g.ordered = std::move(m.ordered);

  Var stack = tape.constant(u.stack.layers);
  Var fused = cfg.fusion == FusionMode::learnable
                  ? fuse_layers(tape, stack, m.fusion_logits)
                  : select_last(tape, stack);
  Var pooled = attentive_stats_pool(tape, fused, m.pool_w, m.pool_b, m.pool_v,
                                    params.pooling.eps);
  g.embedding = pooled;

  auto head_rng = [&](std::uint64_t tag) {
    return make_engine(mix_seed(cfg.seed, epoch, sample_key, tag));
  };

  auto rng_e = head_rng(kEmotionTag);
  Var emo_hidden =
      classifier_hidden(tape, pooled, m.emotion, training, &rng_e);
  Var emo_in = emo_hidden;

  if (cfg.use_mtl) {
    CoAttentionInputs aux;
    if (cfg.tasks.gender) {
      auto rng = head_rng(kGenderTag);
      HeadActivations act =
          classifier_forward(tape, pooled, m.gender, training, &rng);
      g.gender_logits = act.logits;
      aux.gender = act.hidden1;
      if (with_losses) {
        Var row = tape.reshape(act.logits, {1, params.dims.n_genders});
        g.ce_gender = cross_entropy(tape, row, {u.gender});
      }
    }
    if (cfg.tasks.speaker) {
      auto rng = head_rng(kSpeakerTag);
      HeadActivations act =
          classifier_forward(tape, pooled, m.speaker, training, &rng);
      g.speaker_logits = act.logits;
      aux.speaker = act.hidden1;
      if (with_losses) {
        Var row = tape.reshape(act.logits, {1, params.dims.n_speakers});
        g.ce_speaker = cross_entropy(tape, row, {u.speaker});
      }
    }
    if (cfg.tasks.asr) {
      auto rng = head_rng(kAsrTag);
      AsrActivations act = asr_forward(tape, fused, m.asr, training, &rng);
      g.asr_logits = act.logits;
      aux.asr_seq = act.lstm_out;
      if (with_losses) {
        g.ctc = ctc_loss(tape, act.logits, u.tokens);
      }
    }
    if (cfg.use_coattention) {
      emo_in = coattend(tape, emo_hidden, aux, m.coatt);
    }
  }

  g.emotion_logits = classifier_logits(tape, emo_in, m.emotion);
  if (with_losses) {
    Var row = tape.reshape(g.emotion_logits, {1, params.dims.n_emotions});
    g.ce_emotion = cross_entropy(tape, row, {u.emotion});
  }
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// batch gradients
// ---------------------------------------------------------------------------

BatchResult batch_gradients(const ModelParams& params,
                            const std::vector<const Utterance*>& batch,
                            const std::vector<std::size_t>& sample_keys,
                            const TrainConfig& cfg,
                            const std::vector<long>& class_counts,
                            std::size_t epoch, bool parallel) {
  const std::size_t n = batch.size();
  if (n == 0) throw ConfigError("batch_gradients: empty batch");
  if (sample_keys.size() != n) {
    throw ConfigError("batch_gradients: sample key count mismatch");
  }

  std::vector<SampleGraph> graphs(n);
  auto build_one = [&](std::size_t i) {
    graphs[i] = build_sample_graph(params, *batch[i], cfg, true, true, epoch,
                                   sample_keys[i]);
  };
  if (parallel) {
    kernels::parallel_for(n, build_one);
  } else {
    for (std::size_t i = 0; i < n; ++i) build_one(i);
  }

  // Batch-level contrastive term over the pooled embeddings.
  double l_swfc = 0.0;
  Tensor emb_grad;
  const bool swfc_active = cfg.use_swfc && n >= 2;
  if (swfc_active) {
    const std::size_t e = graphs[0].tape.val(graphs[0].embedding).numel();
    Tensor emb({n, e});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor& v = graphs[i].tape.val(graphs[i].embedding);
      for (std::size_t j = 0; j < e; ++j) emb(i, j) = v[j];
      labels[i] = batch[i]->emotion;
    }
    Tape btape;
    Var leaf = btape.leaf(std::move(emb), true);
    Var loss = swfc_loss(btape, leaf, labels, cfg.swfc, class_counts);
    l_swfc = btape.val(loss).item();
    btape.backward(loss);
    emb_grad = btape.grad_or_zeros(leaf);
  }

  const int k = cfg.use_mtl ? cfg.tasks.count() : 0;
  const double alpha = cfg.use_mtl ? cfg.objective.alpha : 0.0;
  const double emo_coef = (1.0 - k * alpha) / static_cast<double>(n);
  const double aux_coef = alpha / static_cast<double>(n);
  const double beta = cfg.use_swfc ? cfg.objective.beta : 0.0;

  std::vector<std::vector<Tensor>> sample_grads(n);
  auto backward_one = [&](std::size_t i) {
    SampleGraph& g = graphs[i];
    g.tape.accum_grad(*g.ce_emotion, Tensor::scalar(emo_coef));
    if (g.ce_gender) g.tape.accum_grad(*g.ce_gender, Tensor::scalar(aux_coef));
    if (g.ce_speaker)
      g.tape.accum_grad(*g.ce_speaker, Tensor::scalar(aux_coef));
    if (g.ctc) g.tape.accum_grad(*g.ctc, Tensor::scalar(aux_coef));
    if (swfc_active && beta != 0.0) {
      const std::size_t e = emb_grad.extent(1);
      Tensor seed({e});
      for (std::size_t j = 0; j < e; ++j) seed[j] = beta * emb_grad(i, j);
      g.tape.accum_grad(g.embedding, seed);
    }
    g.tape.backward_seeded();
    sample_grads[i].reserve(g.ordered.size());
    for (Var v : g.ordered) sample_grads[i].push_back(g.tape.grad_or_zeros(v));
  };
  if (parallel) {
    kernels::parallel_for(n, backward_one);
  } else {
    for (std::size_t i = 0; i < n; ++i) backward_one(i);
  }

  BatchResult result;
  result.grads = std::move(sample_grads[0]);
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t j = 0; j < result.grads.size(); ++j) {
      Tensor& dst = result.grads[j];
      const Tensor& src = sample_grads[i][j];
      for (std::size_t x = 0; x < dst.numel(); ++x) dst[x] += src[x];
    }
  }

  TaskLosses parts;
  for (std::size_t i = 0; i < n; ++i) {
    const SampleGraph& g = graphs[i];
    parts.emotion += g.tape.val(*g.ce_emotion).item();
    if (g.ce_gender) parts.gender += g.tape.val(*g.ce_gender).item();
    if (g.ce_speaker) parts.speaker += g.tape.val(*g.ce_speaker).item();
    if (g.ctc) parts.asr += g.tape.val(*g.ctc).item();
  }
  parts.emotion /= static_cast<double>(n);
  parts.gender /= static_cast<double>(n);
  parts.speaker /= static_cast<double>(n);
  parts.asr /= static_cast<double>(n);
  parts.swfc = l_swfc;

  ObjectiveConfig eff = cfg.objective;
  if (!cfg.use_mtl) eff.alpha = 0.0;
  if (!cfg.use_swfc) eff.beta = 0.0;
  TaskMask mask = cfg.use_mtl ? cfg.tasks : TaskMask{false, false, false};
  result.losses = combined_objective(parts, eff, mask);
  return result;
}

ModelOutputs forward_eval(const ModelParams& params, const Utterance& utt,
                          const TrainConfig& cfg) {
  SampleGraph g = build_sample_graph(params, utt, cfg, false, false, 0, 0);
  ModelOutputs out;
  out.emotion_logits = g.tape.val(g.emotion_logits);
  if (g.gender_logits) out.gender_logits = g.tape.val(*g.gender_logits);
  if (g.speaker_logits) out.speaker_logits = g.tape.val(*g.speaker_logits);
  if (g.asr_logits) out.asr_logits = g.tape.val(*g.asr_logits);
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamState make_adam_state(const std::vector<ParamRef>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const ParamRef& p : params) {
    s.m.push_back(Tensor::zeros(p.tensor->shape()));
    s.v.push_back(Tensor::zeros(p.tensor->shape()));
  }
  return s;
}

void adam_step(const std::vector<ParamRef>& params,
               const std::vector<Tensor>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ConfigError("adam_step: parameter/gradient count mismatch");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = *params[i].tensor;
    const Tensor& g = grads[i];
    if (!g.same_shape(theta)) {
      throw ShapeError("adam_step: gradient shape mismatch for " +
                       params[i].name);
    }
    if (!g.all_finite()) {
      throw NumericError("adam_step: non-finite gradient in " +
                         params[i].name);
    }
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t x = 0; x < theta.numel(); ++x) {
      m[x] = beta1 * m[x] + (1.0 - beta1) * g[x];
      v[x] = beta2 * v[x] + (1.0 - beta2) * g[x] * g[x];
      const double mhat = m[x] / bc1;
      const double vhat = v[x] / bc2;
      theta[x] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// config hash & checkpointing
// ---------------------------------------------------------------------------

namespace {

std::string canonical_config(const TrainConfig& cfg, const ModelDims& dims) {
  std::ostringstream os;
  os.precision(17);
  os << "alpha=" << cfg.objective.alpha << ";beta=" << cfg.objective.beta
     << ";tau=" << cfg.swfc.tau << ";gamma=" << cfg.swfc.gamma << ";variant="
     << (cfg.swfc.variant == SwfcVariant::eq2_literal ? "eq2" : "fsc")
     << ";wmode="
     << (cfg.swfc.weight_mode == WeightMode::uniform ? "uni" : "inv")
     << ";lr=" << cfg.lr << ";bs=" << cfg.batch_size << ";seed=" << cfg.seed
     << ";mtl=" << cfg.use_mtl << ";coatt=" << cfg.use_coattention
     << ";swfc=" << cfg.use_swfc
     << ";fusion=" << (cfg.fusion == FusionMode::learnable ? "learn" : "last")
     << ";tasks=" << cfg.tasks.asr << cfg.tasks.gender << cfg.tasks.speaker
     << ";dh=" << cfg.d_hidden << ";dr=" << cfg.d_recurrent
     << ";da=" << cfg.d_attn << ";dc=" << cfg.d_coattn
     << ";drop=" << cfg.dropout << ";L=" << dims.n_layers
     << ";D=" << dims.feature_dim << ";spk=" << dims.n_speakers
     << ";vocab=" << dims.vocab_size;
  return os.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr char kCkptMagic[4] = {'S', 'M', 'C', 'K'};
constexpr std::uint8_t kCkptVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}
void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin)
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw TruncationError(origin_ + ": truncated checkpoint");
    }
  }
  const char* take(std::size_t n) {
    need(n);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::uint64_t u64() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8));
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t config_hash(const TrainConfig& cfg, const ModelDims& dims) {
  return fnv1a(canonical_config(cfg, dims));
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(std::vector<Utterance> train, TrainConfig cfg)
    : cfg_(std::move(cfg)), train_(std::move(train)) {
  validate(cfg_);
  const ModelDims dims = infer_dims(train_);
  class_counts_ = emotion_counts(train_);
  params_ = init_params(dims, cfg_);
  adam_ = make_adam_state(param_registry(params_));
}

LossBreakdown Trainer::run_epoch() {
  const std::size_t epoch_no = epoch_log_.size();
  std::vector<std::size_t> order(train_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto shuffle_rng = make_engine(mix_seed(cfg_.seed, 0x73687566ULL, epoch_no));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  const std::vector<ParamRef> registry = param_registry(params_);
  LossBreakdown epoch_sum;
  std::size_t seen = 0;
  for (std::size_t start = 0; start < order.size();
       start += cfg_.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
    std::vector<const Utterance*> batch;
    std::vector<std::size_t> keys;
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(&train_[order[i]]);
      keys.push_back(order[i]);
    }
    BatchResult r = batch_gradients(params_, batch, keys, cfg_,
                                    class_counts_, epoch_no,
                                    cfg_.parallel_batch);
    if (!std::isfinite(r.losses.total)) {
      throw NumericError("train: non-finite loss at epoch " +
                         std::to_string(epoch_no) + " batch " +
                         std::to_string(start / cfg_.batch_size));
    }
    adam_step(registry, r.grads, adam_, cfg_.lr);

    const double w = static_cast<double>(batch.size());
    epoch_sum.l_emotion += w * r.losses.l_emotion;
    epoch_sum.l_gender += w * r.losses.l_gender;
    epoch_sum.l_speaker += w * r.losses.l_speaker;
    epoch_sum.l_asr += w * r.losses.l_asr;
    epoch_sum.l_swfc += w * r.losses.l_swfc;
    epoch_sum.total += w * r.losses.total;
    seen += batch.size();
  }
  const double inv = 1.0 / static_cast<double>(seen);
  LossBreakdown mean;
  mean.l_emotion = epoch_sum.l_emotion * inv;
  mean.l_gender = epoch_sum.l_gender * inv;
  mean.l_speaker = epoch_sum.l_speaker * inv;
  mean.l_asr = epoch_sum.l_asr * inv;
  mean.l_swfc = epoch_sum.l_swfc * inv;
  mean.total = epoch_sum.total * inv;
  epoch_log_.push_back(mean);
  return mean;
}

void Trainer::save_checkpoint(const fs::path& path) const {
  std::string out;
  out.append(kCkptMagic, 4);
  out.push_back(static_cast<char>(kCkptVersion));
  put_u64(out, config_hash(cfg_, params_.dims));
  put_u64(out, epoch_log_.size());
  put_u64(out, static_cast<std::uint64_t>(adam_.step));

  ModelParams& mutable_params = const_cast<ModelParams&>(params_);
  const std::vector<ParamRef> registry = param_registry(mutable_params);
  put_u32(out, static_cast<std::uint32_t>(registry.size()));
  for (const ParamRef& p : registry) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.append(p.name);
    put_u32(out, static_cast<std::uint32_t>(p.tensor->rank()));
    for (std::size_t e : p.tensor->shape()) put_u64(out, e);
    for (std::size_t i = 0; i < p.tensor->numel(); ++i) {
      put_f64(out, (*p.tensor)[i]);
    }
  }
  for (std::size_t i = 0; i < registry.size(); ++i) {
    for (std::size_t x = 0; x < adam_.m[i].numel(); ++x) {
      put_f64(out, adam_.m[i][x]);
    }
  }
  for (std::size_t i = 0; i < registry.size(); ++i) {
    for (std::size_t x = 0; x < adam_.v[i].numel(); ++x) {
      put_f64(out, adam_.v[i][x]);
    }
  }
  for (const LossBreakdown& b : epoch_log_) {
    put_f64(out, b.l_emotion);
    put_f64(out, b.l_gender);
    put_f64(out, b.l_speaker);
    put_f64(out, b.l_asr);
    put_f64(out, b.l_swfc);
    put_f64(out, b.total);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

Trainer Trainer::resume(const fs::path& path, std::vector<Utterance> train,
                        TrainConfig cfg) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());

  if (std::memcmp(r.take(4), kCkptMagic, 4) != 0) {
    throw MagicError(path.string() + ": bad checkpoint magic");
  }
  const auto version = static_cast<std::uint8_t>(*r.take(1));
  if (version != kCkptVersion) {
    throw VersionError(path.string() + ": unsupported checkpoint version " +
                       std::to_string(version));
  }

  Trainer t(std::move(train), std::move(cfg));
  const std::uint64_t stored_hash = r.u64();
  const std::uint64_t expect = config_hash(t.cfg_, t.params_.dims);
  if (stored_hash != expect) {
    throw CheckpointMismatchError(
        path.string() + ": checkpoint config hash mismatch (stored " +
        std::to_string(stored_hash) + ", current " + std::to_string(expect) +
        "); refusing to resume");
  }
  const std::uint64_t n_epochs = r.u64();
  t.adam_.step = static_cast<long>(r.u64());

  const std::vector<ParamRef> registry = param_registry(t.params_);
  const std::uint32_t n_params = r.u32();
  if (n_params != registry.size()) {
    throw CheckpointMismatchError(path.string() +
                                  ": parameter count mismatch");
  }
  for (const ParamRef& p : registry) {
    const std::uint32_t name_len = r.u32();
    const std::string name(r.take(name_len), name_len);
    if (name != p.name) {
      throw CheckpointMismatchError(path.string() + ": expected parameter " +
                                    p.name + ", found " + name);
    }
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<std::size_t>(r.u64());
    }
    if (shape != p.tensor->shape()) {
      throw CheckpointMismatchError(path.string() + ": parameter " + p.name +
                                    " has shape " + shape_str(shape) +
                                    ", expected " +
                                    shape_str(p.tensor->shape()));
    }
    for (std::size_t i = 0; i < p.tensor->numel(); ++i) {
      (*p.tensor)[i] = r.f64();
    }
  }
  for (std::size_t i = 0; i < registry.size(); ++i) {
    for (std::size_t x = 0; x < t.adam_.m[i].numel(); ++x) {
      t.adam_.m[i][x] = r.f64();
    }
  }
  for (std::size_t i = 0; i < registry.size(); ++i) {
    for (std::size_t x = 0; x < t.adam_.v[i].numel(); ++x) {
      t.adam_.v[i][x] = r.f64();
    }
  }
  t.epoch_log_.resize(n_epochs);
  for (LossBreakdown& b : t.epoch_log_) {
    b.l_emotion = r.f64();
    b.l_gender = r.f64();
    b.l_speaker = r.f64();
    b.l_asr = r.f64();
    b.l_swfc = r.f64();
    b.total = r.f64();
  }
  if (!r.done()) {
    throw TruncationError(path.string() + ": trailing bytes in checkpoint");
  }
  return t;
}

TrainResult train(const std::vector<Utterance>& corpus,
                  const TrainConfig& cfg) {
  Trainer t(corpus, cfg);
  for (std::size_t e = 0; e < cfg.epochs; ++e) t.run_epoch();
  return TrainResult{t.params(), t.epoch_log()};
}

}  // namespace sermtl
