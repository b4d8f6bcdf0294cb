// Line-oriented "key = value" configuration shared by the config file
// and command-line overrides. Unknown keys are rejected; every embedded
// config invariant is enforced at parse time.

#pragma once

#include <filesystem>
#include <string>

#include "sermtl/data.hpp"
#include "sermtl/trainer.hpp"

namespace sermtl {

struct CliConfig {
  GeneratorConfig data;
  TrainConfig train;
};

// Applies one "key = value" assignment. Throws ConfigError with the key
// name on unknown keys or bad values.
void apply_config_key(CliConfig& cfg, const std::string& key,
                      const std::string& value);

// '#' starts a comment; blank lines are skipped.
CliConfig load_config_file(const std::filesystem::path& path,
                           CliConfig base = {});

// Runs the embedded validators (train + data).
void validate(const CliConfig& cfg);

// Human-readable list of accepted keys.
std::string config_schema();

}  // namespace sermtl
