#include "sermtl/config.hpp"

#include <fstream>
#include <sstream>

namespace sermtl {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size() || v < 0) throw std::invalid_argument("bad");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" +
                      value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + value + "'");
}

}  // namespace

void apply_config_key(CliConfig& cfg, const std::string& key,
                      const std::string& value) {
  // data.*
  if (key == "data.n_utterances") {
    cfg.data.n_utterances = parse_size(key, value);
  } else if (key == "data.class_probs") {
    std::istringstream in(value);
    std::string item;
    std::size_t i = 0;
    while (std::getline(in, item, ',')) {
      if (i >= cfg.data.class_probs.size()) {
        throw ConfigError(key + ": expected " +
                          std::to_string(cfg.data.class_probs.size()) +
                          " comma-separated values");
      }
      cfg.data.class_probs[i++] = parse_double(key, trim(item));
    }
    if (i != cfg.data.class_probs.size()) {
      throw ConfigError(key + ": expected " +
                        std::to_string(cfg.data.class_probs.size()) +
                        " comma-separated values, got " + std::to_string(i));
    }
  } else if (key == "data.n_speakers") {
    cfg.data.n_speakers = parse_size(key, value);
  } else if (key == "data.layers") {
    cfg.data.n_layers = parse_size(key, value);
  } else if (key == "data.t_min") {
    cfg.data.t_min = parse_size(key, value);
  } else if (key == "data.t_max") {
    cfg.data.t_max = parse_size(key, value);
  } else if (key == "data.dim") {
    cfg.data.feature_dim = parse_size(key, value);
  } else if (key == "data.vocab_size") {
    cfg.data.vocab_size = parse_size(key, value);
  } else if (key == "data.noise_scale") {
    cfg.data.noise_scale = parse_double(key, value);
  } else if (key == "data.seed") {
    cfg.data.seed = parse_size(key, value);
    // train.*
  } else if (key == "train.lr") {
    cfg.train.lr = parse_double(key, value);
  } else if (key == "train.batch_size") {
    cfg.train.batch_size = parse_size(key, value);
  } else if (key == "train.epochs") {
    cfg.train.epochs = parse_size(key, value);
  } else if (key == "train.seed") {
    cfg.train.seed = parse_size(key, value);
  } else if (key == "train.alpha") {
    cfg.train.objective.alpha = parse_double(key, value);
  } else if (key == "train.beta") {
    cfg.train.objective.beta = parse_double(key, value);
  } else if (key == "train.use_mtl") {
    cfg.train.use_mtl = parse_bool(key, value);
  } else if (key == "train.use_coattention") {
    cfg.train.use_coattention = parse_bool(key, value);
  } else if (key == "train.use_swfc") {
    cfg.train.use_swfc = parse_bool(key, value);
  } else if (key == "train.fusion") {
    if (value == "learnable") {
      cfg.train.fusion = FusionMode::learnable;
    } else if (value == "last") {
      cfg.train.fusion = FusionMode::last;
    } else {
      throw ConfigError(key + ": expected learnable|last, got '" + value +
                        "'");
    }
  } else if (key == "train.tasks") {
    TaskMask mask{false, false, false};
    std::istringstream in(value);
    std::string item;
    while (std::getline(in, item, ',')) {
      const std::string t = trim(item);
      if (t == "asr") {
        mask.asr = true;
      } else if (t == "gender") {
        mask.gender = true;
      } else if (t == "speaker") {
        mask.speaker = true;
      } else if (!t.empty()) {
        throw ConfigError(key + ": unknown task '" + t + "'");
      }
    }
    cfg.train.tasks = mask;
  } else if (key == "train.d_hidden") {
    cfg.train.d_hidden = parse_size(key, value);
  } else if (key == "train.d_recurrent") {
    cfg.train.d_recurrent = parse_size(key, value);
  } else if (key == "train.d_attn") {
    cfg.train.d_attn = parse_size(key, value);
  } else if (key == "train.d_coattn") {
    cfg.train.d_coattn = parse_size(key, value);
  } else if (key == "train.dropout") {
    cfg.train.dropout = parse_double(key, value);
  } else if (key == "train.parallel_batch") {
    cfg.train.parallel_batch = parse_bool(key, value);
    // swfc.*
  } else if (key == "swfc.tau") {
    cfg.train.swfc.tau = parse_double(key, value);
  } else if (key == "swfc.gamma") {
    cfg.train.swfc.gamma = parse_double(key, value);
  } else if (key == "swfc.variant") {
    if (value == "eq2_literal") {
      cfg.train.swfc.variant = SwfcVariant::eq2_literal;
    } else if (value == "focal_supcon") {
      cfg.train.swfc.variant = SwfcVariant::focal_supcon;
    } else {
      throw ConfigError(key + ": expected eq2_literal|focal_supcon, got '" +
                        value + "'");
    }
  } else if (key == "swfc.weight_mode") {
    if (value == "uniform") {
      cfg.train.swfc.weight_mode = WeightMode::uniform;
    } else if (value == "inverse_frequency") {
      cfg.train.swfc.weight_mode = WeightMode::inverse_frequency;
    } else {
      throw ConfigError(key +
                        ": expected uniform|inverse_frequency, got '" +
                        value + "'");
    }
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

CliConfig load_config_file(const std::filesystem::path& path,
                           CliConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      apply_config_key(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": " +
                        e.what());
    }
  }
  return base;
}

void validate(const CliConfig& cfg) {
  validate(cfg.data);
  validate(cfg.train);
}

std::string config_schema() {
  return
      "data.n_utterances ........ corpus size (default 2000)\n"
      "data.class_probs ......... 8 comma-separated probabilities, sum 1\n"
      "data.n_speakers .......... speaker count, >= 2 (default 20)\n"
      "data.layers .............. hidden layers L (default 4)\n"
      "data.t_min, data.t_max ... frame-count range (default 12..20)\n"
      "data.dim ................. feature dimension D, >= 4 (default 24)\n"
      "data.vocab_size .......... token vocabulary (default 12)\n"
      "data.noise_scale ......... feature noise sigma (default 1.0)\n"
      "data.seed ................ generator seed\n"
      "train.lr ................. learning rate (default 1e-3; paper 1e-5)\n"
      "train.batch_size ......... default 16\n"
      "train.epochs ............. default 60\n"
      "train.seed ............... training seed\n"
      "train.alpha .............. auxiliary weight, in [0, 1/3)\n"
      "train.beta ............... contrastive weight, >= 0\n"
      "train.use_mtl ............ true|false\n"
      "train.use_coattention .... true|false (requires use_mtl)\n"
      "train.use_swfc ........... true|false\n"
      "train.fusion ............. learnable|last\n"
      "train.tasks .............. comma subset of asr,gender,speaker\n"
      "train.d_hidden ........... classifier hidden width (default 256)\n"
      "train.d_recurrent ........ LSTM width (default 128)\n"
      "train.d_attn ............. pooling attention width (0 = D/2)\n"
      "train.d_coattn ........... co-attention width (0 = d_hidden)\n"
      "train.dropout ............ dropout rate in [0,1)\n"
      "train.parallel_batch ..... true|false (results identical)\n"
      "swfc.tau ................. temperature > 0 (default 0.07)\n"
      "swfc.gamma ............... focusing exponent >= 0 (default 2)\n"
      "swfc.variant ............. eq2_literal|focal_supcon\n"
      "swfc.weight_mode ......... uniform|inverse_frequency\n";
}

}  // namespace sermtl
