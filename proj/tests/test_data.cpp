#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "sermtl/data.hpp"
#include "sermtl/rng.hpp"
#include "test_util.hpp"

using namespace sermtl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() /
               (std::string("sermtl_data_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

GeneratorConfig small_config() {
  GeneratorConfig cfg;
  cfg.n_utterances = 60;
  cfg.n_speakers = 8;
  cfg.n_layers = 2;
  cfg.t_min = 6;
  cfg.t_max = 9;
  cfg.feature_dim = 8;
  cfg.vocab_size = 5;
  cfg.seed = 7;
  return cfg;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("generator: config validation") {
  GeneratorConfig cfg = small_config();
  cfg.class_probs = {0.5, 0.5, 0.5, 0, 0, 0, 0, 0};
  CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
  cfg = small_config();
  cfg.feature_dim = 3;
  CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
  cfg = small_config();
  cfg.t_min = 10;
  cfg.t_max = 9;
  CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
  cfg = small_config();
  cfg.n_speakers = 1;
  CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
}

TEST_CASE("generator: one-hot class distribution pins every emotion") {
  GeneratorConfig cfg = small_config();
  cfg.class_probs = {0, 0, 0, 1, 0, 0, 0, 0};
  for (const Utterance& u : generate_corpus(cfg)) CHECK(u.emotion == 3);
}

TEST_CASE("generator: identical seeds give bitwise-identical corpora") {
  GeneratorConfig cfg = small_config();
  const auto a = generate_corpus(cfg);
  const auto b = generate_corpus(cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].emotion == b[i].emotion);
    CHECK(a[i].gender == b[i].gender);
    CHECK(a[i].speaker == b[i].speaker);
    CHECK(a[i].tokens == b[i].tokens);
    CHECK(testutil::bitwise_equal(a[i].stack.layers, b[i].stack.layers));
  }
  GeneratorConfig other = cfg;
  other.seed = cfg.seed + 1;
  const auto c = generate_corpus(other);
  CHECK_FALSE(testutil::bitwise_equal(a[0].stack.layers, c[0].stack.layers));
}

TEST_CASE("generator: class counts land within 3 sigma of the binomial") {
  GeneratorConfig cfg = small_config();
  cfg.n_utterances = 2000;
  cfg.class_probs = {0.5, 0.3, 0.2, 0, 0, 0, 0, 0};
  const auto corpus = generate_corpus(cfg);
  const auto counts = emotion_counts(corpus);
  const double n = static_cast<double>(cfg.n_utterances);
  for (std::size_t c = 0; c < cfg.class_probs.size(); ++c) {
    const double p = cfg.class_probs[c];
    const double mean = n * p;
    const double sigma = std::sqrt(n * p * (1 - p));
    CHECK(std::abs(static_cast<double>(counts[c]) - mean) <=
          3.0 * sigma + 1e-9);
  }
}

TEST_CASE("generator: noiseless class means are linearly separable") {
  GeneratorConfig cfg = small_config();
  cfg.n_utterances = 200;
  cfg.noise_scale = 0.0;
  cfg.feature_dim = 16;
  const auto corpus = generate_corpus(cfg);
  const FeatureLayout lay = feature_layout(cfg.feature_dim);
  const std::size_t eb = lay.emotion_begin, ee = lay.emotion_end;

  // per-utterance summary: frame- and layer-averaged emotion block
  auto summarize = [&](const Utterance& u) {
    std::vector<double> v(ee - eb, 0.0);
    const Tensor& f = u.stack.layers;
    for (std::size_t l = 0; l < f.extent(0); ++l)
      for (std::size_t t = 0; t < f.extent(1); ++t)
        for (std::size_t d = eb; d < ee; ++d) v[d - eb] += f(l, t, d);
    const double inv = 1.0 / static_cast<double>(f.extent(0) * f.extent(1));
    for (double& x : v) x *= inv;
    return v;
  };

  // class means from the corpus itself (Bayes-optimal probe at zero noise)
  std::vector<std::vector<double>> means(kNumEmotions,
                                         std::vector<double>(ee - eb, 0.0));
  std::vector<long> counts(kNumEmotions, 0);
  for (const Utterance& u : corpus) {
    const auto v = summarize(u);
    for (std::size_t d = 0; d < v.size(); ++d) means[u.emotion][d] += v[d];
    ++counts[u.emotion];
  }
  for (int c = 0; c < kNumEmotions; ++c) {
    if (counts[c] == 0) continue;
    for (double& x : means[c]) x /= static_cast<double>(counts[c]);
  }

  std::size_t correct = 0;
  for (const Utterance& u : corpus) {
    const auto v = summarize(u);
    int best = -1;
    double best_d = 0.0;
    for (int c = 0; c < kNumEmotions; ++c) {
      if (counts[c] == 0) continue;
      double d2 = 0.0;
      for (std::size_t d = 0; d < v.size(); ++d) {
        d2 += (v[d] - means[c][d]) * (v[d] - means[c][d]);
      }
      if (best < 0 || d2 < best_d) {
        best = c;
        best_d = d2;
      }
    }
    if (best == u.emotion) ++correct;
  }
  CHECK(correct == corpus.size());
}

TEST_CASE("splits: disjoint ids, test speakers held out") {
  GeneratorConfig cfg = small_config();
  cfg.n_utterances = 200;
  const auto corpus = generate_corpus(cfg);
  const CorpusSplits splits = split_corpus(corpus);
  CHECK(splits.train.size() + splits.dev.size() + splits.test.size() ==
        corpus.size());
  CHECK(!splits.train.empty());
  CHECK(!splits.dev.empty());
  CHECK(!splits.test.empty());

  std::set<std::string> ids;
  for (const auto* split : {&splits.train, &splits.dev, &splits.test}) {
    for (const Utterance& u : *split) {
      CHECK(ids.insert(u.id).second);  // no id reuse across splits
    }
  }

  const std::size_t n_train_spk = num_train_speakers(cfg);
  std::set<int> train_speakers;
  for (const Utterance& u : splits.train) {
    CHECK(static_cast<std::size_t>(u.speaker) < n_train_spk);
    train_speakers.insert(u.speaker);
  }
  for (const Utterance& u : splits.dev) {
    CHECK(static_cast<std::size_t>(u.speaker) < n_train_spk);
  }
  for (const Utterance& u : splits.test) {
    CHECK(static_cast<std::size_t>(u.speaker) >= n_train_spk);
    CHECK(train_speakers.count(u.speaker) == 0);
  }
}

TEST_CASE("feature files: round trips and corruption errors") {
  const fs::path dir = temp_dir("features");
  auto eng = make_engine(3);
  LayerStack stack(testutil::rand_tensor({2, 3, 4}, -2, 2, eng));
  // features are float32 on disk; generator data is float-exact, so
  // mirror that here
  for (std::size_t i = 0; i < stack.layers.numel(); ++i) {
    stack.layers[i] =
        static_cast<double>(static_cast<float>(stack.layers[i]));
  }
  const fs::path file = dir / "a.lsf";
  write_features(file, stack);

  SUBCASE("read returns identical values; rewrite is byte-identical") {
    LayerStack back = read_features(file);
    CHECK(testutil::bitwise_equal(back.layers, stack.layers));
    const fs::path file2 = dir / "b.lsf";
    write_features(file2, back);
    CHECK(read_bytes(file) == read_bytes(file2));
  }
  SUBCASE("bad magic") {
    std::string bytes = read_bytes(file);
    bytes[0] = 'X';
    write_bytes(dir / "magic.lsf", bytes);
    CHECK_THROWS_AS(read_features(dir / "magic.lsf"), MagicError);
  }
  SUBCASE("version mismatch") {
    std::string bytes = read_bytes(file);
    bytes[4] = 9;
    write_bytes(dir / "version.lsf", bytes);
    CHECK_THROWS_AS(read_features(dir / "version.lsf"), VersionError);
  }
  SUBCASE("truncated payload") {
    std::string bytes = read_bytes(file);
    bytes.resize(bytes.size() - 5);
    write_bytes(dir / "short.lsf", bytes);
    CHECK_THROWS_AS(read_features(dir / "short.lsf"), TruncationError);
  }
  SUBCASE("header dims inconsistent with payload length") {
    std::string bytes = read_bytes(file);
    bytes[5] = 7;  // claim L=7, payload unchanged
    write_bytes(dir / "dims.lsf", bytes);
    CHECK_THROWS_AS(read_features(dir / "dims.lsf"), TruncationError);
  }
  SUBCASE("shorter than any header") {
    write_bytes(dir / "stub.lsf", "LS");
    CHECK_THROWS_AS(read_features(dir / "stub.lsf"), TruncationError);
  }
}

TEST_CASE("manifests") {
  const fs::path dir = temp_dir("manifest");
  SUBCASE("empty manifest loads an empty corpus") {
    write_bytes(dir / "empty.tsv", "");
    CHECK(load_manifest(dir / "empty.tsv").empty());
  }
  SUBCASE("valid manifest round trip keeps order and labels") {
    GeneratorConfig cfg = small_config();
    cfg.n_utterances = 3;
    const auto corpus = generate_corpus(cfg);
    std::vector<std::string> rel;
    for (const Utterance& u : corpus) {
      rel.push_back(u.id + ".lsf");
      write_features(dir / rel.back(), u.stack);
    }
    write_manifest(dir / "m.tsv", corpus, rel);
    const auto loaded = load_manifest(dir / "m.tsv");
    REQUIRE(loaded.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(loaded[i].id == corpus[i].id);
      CHECK(loaded[i].emotion == corpus[i].emotion);
      CHECK(loaded[i].gender == corpus[i].gender);
      CHECK(loaded[i].speaker == corpus[i].speaker);
      CHECK(loaded[i].tokens == corpus[i].tokens);
      CHECK(testutil::bitwise_equal(loaded[i].stack.layers,
                                    corpus[i].stack.layers));
    }
  }
  SUBCASE("out-of-range emotion names the line") {
    LayerStack stack(Tensor({1, 3, 4}));
    write_features(dir / "x.lsf", stack);
    write_bytes(dir / "bad.tsv",
                "u0\tx.lsf\t0\t0\t0\t1 2\n"
                "u1\tx.lsf\t9\t0\t0\t1\n");
    try {
      load_manifest(dir / "bad.tsv");
      FAIL("expected ManifestError");
    } catch (const ManifestError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
  SUBCASE("malformed line: wrong field count") {
    write_bytes(dir / "fields.tsv", "u0\tonly_three\t0\n");
    CHECK_THROWS_AS(load_manifest(dir / "fields.tsv"), ManifestError);
  }
  SUBCASE("token id zero is rejected (blank is reserved)") {
    LayerStack stack(Tensor({1, 3, 4}));
    write_features(dir / "y.lsf", stack);
    write_bytes(dir / "tok.tsv", "u0\ty.lsf\t0\t0\t0\t0 1\n");
    CHECK_THROWS_AS(load_manifest(dir / "tok.tsv"), ManifestError);
  }
  SUBCASE("missing feature file") {
    write_bytes(dir / "missing.tsv", "u0\tnope.lsf\t0\t0\t0\t1\n");
    CHECK_THROWS_AS(load_manifest(dir / "missing.tsv"), IoError);
  }
}

TEST_CASE("corpus directory round trip") {
  const fs::path dir = temp_dir("corpus");
  GeneratorConfig cfg = small_config();
  cfg.n_utterances = 30;
  const CorpusSplits splits = split_corpus(generate_corpus(cfg));
  write_corpus_dir(dir, splits);
  const CorpusSplits loaded = load_corpus_dir(dir);
  CHECK(loaded.train.size() == splits.train.size());
  CHECK(loaded.dev.size() == splits.dev.size());
  CHECK(loaded.test.size() == splits.test.size());
  for (std::size_t i = 0; i < splits.train.size(); ++i) {
    CHECK(testutil::bitwise_equal(loaded.train[i].stack.layers,
                                  splits.train[i].stack.layers));
  }
}
