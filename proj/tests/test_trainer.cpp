#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "sermtl/evalkit.hpp"
#include "sermtl/rng.hpp"
#include "sermtl/trainer.hpp"
#include "test_util.hpp"

using namespace sermtl;
namespace fs = std::filesystem;

namespace {

GeneratorConfig tiny_data_config() {
  GeneratorConfig cfg;
  cfg.n_utterances = 48;
  cfg.n_speakers = 6;
  cfg.n_layers = 2;
  cfg.t_min = 5;
  cfg.t_max = 8;
  cfg.feature_dim = 8;
  cfg.vocab_size = 4;
  cfg.noise_scale = 0.3;
  cfg.seed = 11;
  return cfg;
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.d_hidden = 8;
  cfg.d_recurrent = 4;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.seed = 5;
  return cfg;
}

std::vector<Utterance> tiny_corpus() {
  GeneratorConfig cfg = tiny_data_config();
  auto corpus = generate_corpus(cfg);
  // keep the train-speaker subset so all speaker labels fit the head
  std::vector<Utterance> train;
  const std::size_t n_train_spk = num_train_speakers(cfg);
  for (auto& u : corpus) {
    if (static_cast<std::size_t>(u.speaker) < n_train_spk) {
      train.push_back(std::move(u));
    }
  }
  return train;
}

fs::path temp_file(const char* name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove(p);
  return p;
}

}  // namespace

TEST_CASE("adam_step: worked examples") {
  SUBCASE("zero gradient leaves parameters and moments untouched") {
    Tensor theta = Tensor::row({1.0, -2.0});
    std::vector<ParamRef> refs = {{"theta", &theta}};
    AdamState st = make_adam_state(refs);
    adam_step(refs, {Tensor::zeros({2})}, st, 0.01);
    CHECK(theta[0] == 1.0);
    CHECK(theta[1] == -2.0);
    CHECK(st.m[0][0] == 0.0);
    CHECK(st.v[0][0] == 0.0);
  }
  SUBCASE("first step follows the hand-evaluated recurrence") {
    // m = 0.05, v = 2.5e-4, mhat = 0.5, vhat = 0.25,
    // update = lr * 0.5 / (0.5 + 1e-8)
    Tensor theta = Tensor::row({1.0});
    std::vector<ParamRef> refs = {{"theta", &theta}};
    AdamState st = make_adam_state(refs);
    adam_step(refs, {Tensor::row({0.5})}, st, 0.01);
    const double expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
    CHECK(theta[0] == doctest::Approx(expected).epsilon(1e-14));
    CHECK(theta[0] == doctest::Approx(0.99).epsilon(1e-6));
  }
  SUBCASE("equal gradients update identically") {
    Tensor theta = Tensor::row({0.3, 0.3});
    std::vector<ParamRef> refs = {{"theta", &theta}};
    AdamState st = make_adam_state(refs);
    for (int i = 0; i < 5; ++i) {
      adam_step(refs, {Tensor::row({0.7, 0.7})}, st, 0.01);
    }
    CHECK(theta[0] == theta[1]);
  }
  SUBCASE("non-finite gradient aborts naming the parameter") {
    Tensor theta = Tensor::row({1.0});
    std::vector<ParamRef> refs = {{"emotion.w1", &theta}};
    AdamState st = make_adam_state(refs);
    try {
      adam_step(refs, {Tensor::row({std::nan("")})}, st, 0.01);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("emotion.w1") != std::string::npos);
    }
  }
}

TEST_CASE("config validation") {
  TrainConfig cfg = tiny_train_config();
  cfg.objective.alpha = 0.4;
  CHECK_THROWS_AS(validate(cfg), ConfigError);

  cfg = tiny_train_config();
  cfg.use_swfc = true;
  cfg.batch_size = 1;
  CHECK_THROWS_AS(validate(cfg), ConfigError);

  cfg = tiny_train_config();
  cfg.use_mtl = false;
  cfg.use_coattention = true;
  CHECK_THROWS_AS(validate(cfg), ConfigError);

  cfg = tiny_train_config();
  cfg.use_mtl = true;
  cfg.tasks = TaskMask{false, false, false};
  CHECK_THROWS_AS(validate(cfg), ConfigError);
}

TEST_CASE("batch_gradients: parallel equals serial bitwise") {
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train_config();
  ModelParams params = init_params(infer_dims(corpus), cfg);
  const auto counts = emotion_counts(corpus);

  std::vector<const Utterance*> batch;
  std::vector<std::size_t> keys;
  for (std::size_t i = 0; i < 8 && i < corpus.size(); ++i) {
    batch.push_back(&corpus[i]);
    keys.push_back(i);
  }
  BatchResult serial =
      batch_gradients(params, batch, keys, cfg, counts, 0, false);
  BatchResult parallel =
      batch_gradients(params, batch, keys, cfg, counts, 0, true);
  CHECK(serial.losses.total == parallel.losses.total);
  REQUIRE(serial.grads.size() == parallel.grads.size());
  for (std::size_t i = 0; i < serial.grads.size(); ++i) {
    CHECK(testutil::bitwise_equal(serial.grads[i], parallel.grads[i]));
  }
}

TEST_CASE("gradient flow: every parameter group is alive") {
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train_config();
  ModelParams params = init_params(infer_dims(corpus), cfg);
  const auto counts = emotion_counts(corpus);

  std::vector<const Utterance*> batch;
  std::vector<std::size_t> keys;
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    batch.push_back(&corpus[i]);
    keys.push_back(i);
  }
  BatchResult r = batch_gradients(params, batch, keys, cfg, counts, 0, true);
  const auto registry = param_registry(params);
  REQUIRE(registry.size() == r.grads.size());
  for (std::size_t i = 0; i < registry.size(); ++i) {
    double max_abs = 0.0;
    for (std::size_t x = 0; x < r.grads[i].numel(); ++x) {
      max_abs = std::max(max_abs, std::abs(r.grads[i][x]));
    }
    INFO("parameter group ", registry[i].name);
    CHECK(max_abs > 0.0);
  }
}

TEST_CASE("registry order matches the lifted graph") {
  // Perturbing one registry tensor must change the batch gradient
  // mapping for exactly that slot's shape (alignment guard between
  // param_registry and the per-sample lift).
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train_config();
  ModelParams params = init_params(infer_dims(corpus), cfg);
  auto registry = param_registry(params);
  for (const auto& ref : registry) {
    // every registry tensor has the shape the gradients come back with
    std::vector<const Utterance*> batch = {&corpus[0], &corpus[1]};
    std::vector<std::size_t> keys = {0, 1};
    BatchResult r = batch_gradients(params, batch, keys, cfg,
                                    emotion_counts(corpus), 0, false);
    const std::size_t idx = static_cast<std::size_t>(&ref - registry.data());
    CHECK(r.grads[idx].same_shape(*ref.tensor));
  }
}

TEST_CASE("train: determinism and ablation reductions") {
  const auto corpus = tiny_corpus();
  SUBCASE("two identical seeded runs match to the bit") {
    TrainConfig cfg = tiny_train_config();
    TrainResult a = train(corpus, cfg);
    TrainResult b = train(corpus, cfg);
    REQUIRE(a.epoch_log.size() == b.epoch_log.size());
    for (std::size_t e = 0; e < a.epoch_log.size(); ++e) {
      CHECK(std::abs(a.epoch_log[e].total - b.epoch_log[e].total) <= 1e-12);
      CHECK(a.epoch_log[e].total == b.epoch_log[e].total);
    }
  }
  SUBCASE("single-task reduction: total equals the emotion term") {
    TrainConfig cfg = tiny_train_config();
    cfg.use_mtl = false;
    cfg.use_coattention = false;
    cfg.use_swfc = false;
    TrainResult r = train(corpus, cfg);
    for (const LossBreakdown& b : r.epoch_log) {
      CHECK(std::abs(b.total - b.l_emotion) <= 1e-12);
      CHECK(b.l_gender == 0.0);
      CHECK(b.l_speaker == 0.0);
      CHECK(b.l_asr == 0.0);
      CHECK(b.l_swfc == 0.0);
    }
  }
  SUBCASE("thread count does not change the trajectory") {
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 1;
    cfg.parallel_batch = false;
    TrainResult serial = train(corpus, cfg);
    cfg.parallel_batch = true;
    TrainResult parallel = train(corpus, cfg);
    CHECK(serial.epoch_log[0].total == parallel.epoch_log[0].total);
  }
}

TEST_CASE("train: converges on noiseless separable data") {
  GeneratorConfig dcfg = tiny_data_config();
  dcfg.n_utterances = 64;
  dcfg.noise_scale = 0.0;
  dcfg.feature_dim = 12;
  auto corpus = generate_corpus(dcfg);
  corpus.resize(48);  // train-pool utterances only

  TrainConfig cfg = tiny_train_config();
  cfg.use_mtl = false;
  cfg.use_coattention = false;
  cfg.use_swfc = false;
  cfg.lr = 1e-2;
  cfg.epochs = 30;
  cfg.dropout = 0.0;
  TrainResult r = train(corpus, cfg);

  for (std::size_t e = 1; e < 10; ++e) {
    CHECK(r.epoch_log[e].total < r.epoch_log[e - 1].total);
  }

  std::size_t correct = 0;
  for (const Utterance& u : corpus) {
    ModelOutputs out = forward_eval(r.params, u, cfg);
    int best = 0;
    for (std::size_t i = 1; i < out.emotion_logits.numel(); ++i) {
      if (out.emotion_logits[i] > out.emotion_logits[best]) {
        best = static_cast<int>(i);
      }
    }
    if (best == u.emotion) ++correct;
  }
  CHECK(static_cast<double>(correct) / corpus.size() >= 0.99);
}

TEST_CASE("checkpoints") {
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 5;

  SUBCASE("save/load round trip restores parameters exactly") {
    Trainer t(corpus, cfg);
    t.run_epoch();
    const fs::path path = temp_file("sermtl_ckpt_roundtrip.bin");
    t.save_checkpoint(path);
    Trainer back = Trainer::resume(path, corpus, cfg);
    ModelParams& a = const_cast<ModelParams&>(t.params());
    ModelParams& b = const_cast<ModelParams&>(back.params());
    auto ra = param_registry(a);
    auto rb = param_registry(b);
    for (std::size_t i = 0; i < ra.size(); ++i) {
      CHECK(testutil::bitwise_equal(*ra[i].tensor, *rb[i].tensor));
    }
  }

  SUBCASE("resume at epoch 3 of 5 matches the uninterrupted run") {
    Trainer full(corpus, cfg);
    for (int e = 0; e < 5; ++e) full.run_epoch();

    Trainer first(corpus, cfg);
    for (int e = 0; e < 3; ++e) first.run_epoch();
    const fs::path path = temp_file("sermtl_ckpt_resume.bin");
    first.save_checkpoint(path);
    Trainer rest = Trainer::resume(path, corpus, cfg);
    for (int e = 0; e < 2; ++e) rest.run_epoch();

    REQUIRE(rest.epoch_log().size() == 5);
    for (std::size_t e = 0; e < 5; ++e) {
      CHECK(rest.epoch_log()[e].total == full.epoch_log()[e].total);
    }
  }

  SUBCASE("different head dimensions are refused") {
    Trainer t(corpus, cfg);
    t.run_epoch();
    const fs::path path = temp_file("sermtl_ckpt_dims.bin");
    t.save_checkpoint(path);
    TrainConfig other = cfg;
    other.d_hidden = cfg.d_hidden * 2;
    CHECK_THROWS_AS(Trainer::resume(path, corpus, other),
                    CheckpointMismatchError);
  }
}

TEST_CASE("ablation equivalence: no co-attention decouples the aux heads") {
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train_config();
  cfg.use_coattention = false;
  ModelParams params = init_params(infer_dims(corpus), cfg);

  ModelOutputs base = forward_eval(params, corpus[0], cfg);

  ModelParams perturbed = params;
  auto registry = param_registry(perturbed);
  for (const auto& ref : registry) {
    if (ref.name.rfind("gender.", 0) == 0 ||
        ref.name.rfind("speaker.", 0) == 0 ||
        ref.name.rfind("asr.", 0) == 0 || ref.name.rfind("coatt.", 0) == 0) {
      for (std::size_t i = 0; i < ref.tensor->numel(); ++i) {
        (*ref.tensor)[i] += 0.37;
      }
    }
  }
  ModelOutputs after = forward_eval(perturbed, corpus[0], cfg);
  CHECK(testutil::max_abs_diff(base.emotion_logits, after.emotion_logits) <=
        1e-12);

  // sanity: with co-attention on, the same perturbation must matter
  TrainConfig with = cfg;
  with.use_coattention = true;
  ModelOutputs b2 = forward_eval(params, corpus[0], with);
  ModelOutputs a2 = forward_eval(perturbed, corpus[0], with);
  CHECK(testutil::max_abs_diff(b2.emotion_logits, a2.emotion_logits) > 1e-9);
}

TEST_CASE("non-finite loss aborts with context") {
  auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train_config();
  cfg.lr = 1e30;  // blow the parameters up
  cfg.epochs = 8;
  Trainer t(corpus, cfg);
  bool threw = false;
  try {
    for (std::size_t e = 0; e < cfg.epochs; ++e) t.run_epoch();
  } catch (const NumericError& e) {
    threw = true;
    const std::string msg = e.what();
    CHECK((msg.find("epoch") != std::string::npos ||
           msg.find("gradient") != std::string::npos));
  }
  CHECK(threw);
}
