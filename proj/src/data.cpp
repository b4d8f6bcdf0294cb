#include "sermtl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "sermtl/rng.hpp"

namespace sermtl {

namespace fs = std::filesystem;

void validate(const GeneratorConfig& cfg) {
  if (cfg.n_utterances < 1) throw ConfigError("data: n_utterances must be >= 1");
  double sum = 0.0;
  for (double p : cfg.class_probs) {
    if (p < 0.0) throw ConfigError("data: class_probs must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("data: class_probs must sum to 1, got " +
                      std::to_string(sum));
  }
  if (cfg.n_speakers < 2) throw ConfigError("data: n_speakers must be >= 2");
  if (cfg.n_layers < 1) throw ConfigError("data: n_layers must be >= 1");
  if (cfg.t_min < 3 || cfg.t_max < cfg.t_min) {
    throw ConfigError("data: need 3 <= t_min <= t_max");
  }
  if (cfg.feature_dim < 4) {
    throw ConfigError("data: feature_dim must be >= 4");
  }
  if (cfg.vocab_size < 2) throw ConfigError("data: vocab_size must be >= 2");
  if (cfg.noise_scale < 0.0) {
    throw ConfigError("data: noise_scale must be >= 0");
  }
}

FeatureLayout feature_layout(std::size_t d) {
  FeatureLayout lay;
  lay.emotion_begin = 0;
  lay.emotion_end = d / 4;
  lay.gender_begin = lay.emotion_end;
  lay.gender_end = d / 2;
  lay.speaker_begin = lay.gender_end;
  lay.speaker_end = 3 * d / 4;
  lay.token_begin = lay.speaker_end;
  lay.token_end = d;
  return lay;
}

std::size_t num_heldout_speakers(const GeneratorConfig& cfg) {
  return std::max<std::size_t>(1, cfg.n_speakers / 5);
}

std::size_t num_train_speakers(const GeneratorConfig& cfg) {
  return cfg.n_speakers - num_heldout_speakers(cfg);
}

namespace {

// Random unit vector written into [begin, end) of dst.
void unit_vector(std::vector<double>& dst, std::size_t begin, std::size_t end,
                 std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  double sq = 0.0;
  for (std::size_t i = begin; i < end; ++i) {
    dst[i] = gauss(rng);
    sq += dst[i] * dst[i];
  }
  const double inv = 1.0 / std::sqrt(std::max(sq, 1e-12));
  for (std::size_t i = begin; i < end; ++i) dst[i] *= inv;
}

struct EmissionModel {
  std::vector<std::vector<double>> emotion_means;   // [8][D]
  std::vector<std::vector<double>> gender_offsets;  // [2][D]
  std::vector<std::vector<double>> speaker_offsets; // [n_speakers][D]
  std::vector<std::vector<double>> token_offsets;   // [vocab+1][D]
  std::vector<double> emotion_profile;  // per-layer scale, peaked mid-stack
  std::vector<double> token_profile;    // per-layer scale, rising
};

EmissionModel build_emission_model(const GeneratorConfig& cfg,
                                   std::mt19937_64& rng) {
  const std::size_t d = cfg.feature_dim;
  const FeatureLayout lay = feature_layout(d);
  EmissionModel m;

  m.emotion_means.assign(kNumEmotions, std::vector<double>(d, 0.0));
  for (auto& v : m.emotion_means)
    unit_vector(v, lay.emotion_begin, lay.emotion_end, rng);

  m.gender_offsets.assign(kNumGenders, std::vector<double>(d, 0.0));
  unit_vector(m.gender_offsets[0], lay.gender_begin, lay.gender_end, rng);
  for (std::size_t i = lay.gender_begin; i < lay.gender_end; ++i) {
    m.gender_offsets[1][i] = -m.gender_offsets[0][i];
  }

  m.speaker_offsets.assign(cfg.n_speakers, std::vector<double>(d, 0.0));
  for (auto& v : m.speaker_offsets)
    unit_vector(v, lay.speaker_begin, lay.speaker_end, rng);

  m.token_offsets.assign(cfg.vocab_size + 1, std::vector<double>(d, 0.0));
  for (std::size_t tok = 1; tok <= cfg.vocab_size; ++tok)
    unit_vector(m.token_offsets[tok], lay.token_begin, lay.token_end, rng);

  const std::size_t L = cfg.n_layers;
  m.emotion_profile.resize(L);
  m.token_profile.resize(L);
  const double peak = (static_cast<double>(L) - 1.0) / 2.0;
  for (std::size_t l = 0; l < L; ++l) {
    const double x = static_cast<double>(l) - peak;
    m.emotion_profile[l] = std::exp(-0.5 * x * x);
    m.token_profile[l] =
        L == 1 ? 1.0
               : 0.5 + 0.5 * static_cast<double>(l) /
                           (static_cast<double>(L) - 1.0);
  }
  return m;
}

}  // namespace

std::vector<Utterance> generate_corpus(const GeneratorConfig& cfg) {
  validate(cfg);
  auto rng = make_engine(mix_seed(cfg.seed, 0x636f7270ULL));
  const EmissionModel model = build_emission_model(cfg, rng);
  const std::size_t d = cfg.feature_dim;
  const std::size_t L = cfg.n_layers;

  const std::size_t n = cfg.n_utterances;
  const std::size_t n_test = n >= 2 ? std::max<std::size_t>(1, (n * 15) / 100) : 0;
  const std::size_t n_train_spk = num_train_speakers(cfg);

  std::discrete_distribution<int> emotion_dist(cfg.class_probs.begin(),
                                               cfg.class_probs.end());
  std::uniform_int_distribution<std::size_t> frames_dist(cfg.t_min, cfg.t_max);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const std::size_t max_tokens =
      std::max<std::size_t>(1, std::min<std::size_t>(4, (cfg.t_min - 1) / 2));

  std::vector<Utterance> corpus;
  corpus.reserve(n);
  for (std::size_t u = 0; u < n; ++u) {
    const bool heldout = u >= n - n_test;
    Utterance utt;
    {
      std::ostringstream id;
      id << "utt" << std::setw(6) << std::setfill('0') << u;
      utt.id = id.str();
    }
    utt.emotion = emotion_dist(rng);
    if (heldout) {
      std::uniform_int_distribution<std::size_t> spk(n_train_spk,
                                                     cfg.n_speakers - 1);
      utt.speaker = static_cast<int>(spk(rng));
    } else {
      std::uniform_int_distribution<std::size_t> spk(0, n_train_spk - 1);
      utt.speaker = static_cast<int>(spk(rng));
    }
    utt.gender = utt.speaker % 2;

    const std::size_t T = frames_dist(rng);
    std::uniform_int_distribution<std::size_t> len_dist(1, max_tokens);
    const std::size_t n_tok = len_dist(rng);
    // token choice leans on the emotion class, so speech content
    // carries some emotion information
    const int preferred = 1 + utt.emotion % static_cast<int>(cfg.vocab_size);
    std::uniform_int_distribution<int> tok_dist(
        1, static_cast<int>(cfg.vocab_size));
    utt.tokens.resize(n_tok);
    for (std::size_t i = 0; i < n_tok; ++i) {
      utt.tokens[i] = unif(rng) < 0.6 ? preferred : tok_dist(rng);
    }

    // emotion evidence sits on a random half of the frames
    std::vector<std::size_t> frame_idx(T);
    for (std::size_t t = 0; t < T; ++t) frame_idx[t] = t;
    std::shuffle(frame_idx.begin(), frame_idx.end(), rng);
    std::vector<char> informative(T, 0);
    const std::size_t k_info = std::max<std::size_t>(1, T / 2);
    for (std::size_t i = 0; i < k_info; ++i) informative[frame_idx[i]] = 1;

    Tensor feats({L, T, d});
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t t = 0; t < T; ++t) {
        const int tok = utt.tokens[t * n_tok / T];
        for (std::size_t j = 0; j < d; ++j) {
          double v = model.gender_offsets[utt.gender][j] +
                     model.speaker_offsets[utt.speaker][j] +
                     model.token_profile[l] * model.token_offsets[tok][j];
          if (informative[t]) {
            v += model.emotion_profile[l] *
                 model.emotion_means[utt.emotion][j];
          }
          v += cfg.noise_scale * gauss(rng);
          // keep features exactly float32-representable so the on-disk
          // round trip is bit-exact
          feats(l, t, j) = static_cast<double>(static_cast<float>(v));
        }
      }
    }
    utt.stack = LayerStack(std::move(feats));
    corpus.push_back(std::move(utt));
  }
  return corpus;
}

CorpusSplits split_corpus(std::vector<Utterance> corpus) {
  const std::size_t n = corpus.size();
  const std::size_t n_test = n >= 2 ? std::max<std::size_t>(1, (n * 15) / 100) : 0;
  const std::size_t n_dev =
      n >= 3 ? std::max<std::size_t>(1, (n * 15) / 100) : 0;
  const std::size_t n_train = n - n_test - n_dev;
  CorpusSplits s;
  s.train.assign(std::make_move_iterator(corpus.begin()),
                 std::make_move_iterator(corpus.begin() + n_train));
  s.dev.assign(std::make_move_iterator(corpus.begin() + n_train),
               std::make_move_iterator(corpus.begin() + n_train + n_dev));
  s.test.assign(std::make_move_iterator(corpus.begin() + n_train + n_dev),
                std::make_move_iterator(corpus.end()));
  return s;
}

std::vector<long> emotion_counts(const std::vector<Utterance>& utts) {
  std::vector<long> counts(kNumEmotions, 0);
  for (const Utterance& u : utts) counts.at(u.emotion)++;
  return counts;
}

// ---------------------------------------------------------------------------
// feature files
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'L', 'S', 'F', '1'};
constexpr std::uint8_t kVersion = 1;

void put_u32le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_features(const fs::path& path, const LayerStack& stack) {
  std::string payload;
  payload.reserve(17 + stack.layers.numel() * 4);
  payload.append(kMagic, 4);
  payload.push_back(static_cast<char>(kVersion));
  put_u32le(payload, static_cast<std::uint32_t>(stack.num_layers()));
  put_u32le(payload, static_cast<std::uint32_t>(stack.num_frames()));
  put_u32le(payload, static_cast<std::uint32_t>(stack.dim()));
  for (std::size_t i = 0; i < stack.layers.numel(); ++i) {
    const float f = static_cast<float>(stack.layers[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32le(payload, bits);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

LayerStack read_features(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < 17) {
    throw TruncationError(path.string() + ": file shorter than header");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw MagicError(path.string() + ": bad magic");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (p[4] != kVersion) {
    throw VersionError(path.string() + ": unsupported version " +
                       std::to_string(static_cast<int>(p[4])));
  }
  const std::uint32_t L = get_u32le(p + 5);
  const std::uint32_t T = get_u32le(p + 9);
  const std::uint32_t D = get_u32le(p + 13);
  const std::size_t count = static_cast<std::size_t>(L) * T * D;
  if (bytes.size() != 17 + count * 4) {
    throw TruncationError(path.string() +
                          ": header dims inconsistent with payload length");
  }
  Tensor t({L, T, D});
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = get_u32le(p + 17 + i * 4);
    float f;
    std::memcpy(&f, &bits, 4);
    t[i] = static_cast<double>(f);
  }
  return LayerStack(std::move(t));
}

// ---------------------------------------------------------------------------
// manifests
// ---------------------------------------------------------------------------

void write_manifest(const fs::path& path, const std::vector<Utterance>& utts,
                    const std::vector<std::string>& feature_paths) {
  if (utts.size() != feature_paths.size()) {
    throw ConfigError("write_manifest: path count mismatch");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const Utterance& u = utts[i];
    out << u.id << '\t' << feature_paths[i] << '\t' << u.emotion << '\t'
        << u.gender << '\t' << u.speaker << '\t';
    for (std::size_t k = 0; k < u.tokens.size(); ++k) {
      if (k) out << ' ';
      out << u.tokens[k];
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

int parse_int_field(const std::string& s, std::size_t line_no,
                    const char* what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ManifestError("line " + std::to_string(line_no) + ": bad " + what +
                        " '" + s + "'");
  }
}

}  // namespace

std::vector<Utterance> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const fs::path base = path.has_parent_path() ? path.parent_path() : ".";

  std::vector<Utterance> utts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      if (tab == std::string::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    if (fields.size() != 6) {
      throw ManifestError("line " + std::to_string(line_no) + ": expected 6 " +
                          "tab-separated fields, got " +
                          std::to_string(fields.size()));
    }
    Utterance u;
    u.id = fields[0];
    if (u.id.empty()) {
      throw ManifestError("line " + std::to_string(line_no) + ": empty id");
    }
    u.emotion = parse_int_field(fields[2], line_no, "emotion");
    u.gender = parse_int_field(fields[3], line_no, "gender");
    u.speaker = parse_int_field(fields[4], line_no, "speaker");
    if (u.emotion < 0 || u.emotion >= kNumEmotions) {
      throw ManifestError("line " + std::to_string(line_no) + ": emotion " +
                          std::to_string(u.emotion) + " out of [0," +
                          std::to_string(kNumEmotions) + ")");
    }
    if (u.gender < 0 || u.gender >= kNumGenders) {
      throw ManifestError("line " + std::to_string(line_no) + ": gender " +
                          std::to_string(u.gender) + " out of {0,1}");
    }
    if (u.speaker < 0) {
      throw ManifestError("line " + std::to_string(line_no) +
                          ": negative speaker id");
    }
    std::istringstream toks(fields[5]);
    std::string tok;
    while (toks >> tok) {
      const int v = parse_int_field(tok, line_no, "token");
      if (v < 1) {
        throw ManifestError("line " + std::to_string(line_no) + ": token " +
                            std::to_string(v) + " must be >= 1 (0 is blank)");
      }
      u.tokens.push_back(v);
    }
    const fs::path feat = base / fields[1];
    if (!fs::exists(feat)) {
      throw IoError("line " + std::to_string(line_no) + ": missing feature " +
                    "file " + feat.string());
    }
    u.stack = read_features(feat);
    utts.push_back(std::move(u));
  }
  return utts;
}

void write_corpus_dir(const fs::path& dir, const CorpusSplits& splits) {
  fs::create_directories(dir / "features");
  auto write_split = [&](const std::vector<Utterance>& utts,
                         const std::string& name) {
    std::vector<std::string> rel;
    rel.reserve(utts.size());
    for (const Utterance& u : utts) {
      const std::string r = "features/" + u.id + ".lsf";
      write_features(dir / r, u.stack);
      rel.push_back(r);
    }
    write_manifest(dir / name, utts, rel);
  };
  write_split(splits.train, "train.tsv");
  write_split(splits.dev, "dev.tsv");
  write_split(splits.test, "test.tsv");
}

CorpusSplits load_corpus_dir(const fs::path& dir) {
  CorpusSplits s;
  s.train = load_manifest(dir / "train.tsv");
  s.dev = load_manifest(dir / "dev.tsv");
  s.test = load_manifest(dir / "test.tsv");
  return s;
}

}  // namespace sermtl
