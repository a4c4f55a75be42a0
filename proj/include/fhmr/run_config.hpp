#pragma once

// Run configuration: every hyperparameter of a training or evaluation run,
// read from a `key = value` text file. Unknown keys, duplicates and invalid
// values are rejected with the offending line. docs/config.md lists the keys.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fhmr/losses.hpp"
#include "fhmr/model.hpp"
#include "fhmr/nn.hpp"

namespace fhmr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;
  LossWeights weights;
  LossSwitches switches;
  AdamOptions adam;
  int batch_size = 16;
  int epochs = 50;
  int64_t max_steps = 0;  // 0: no cap beyond the epoch count
  uint64_t seed = 0;

  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string type;
  std::string default_value;
  std::string description;
};

// Every accepted key with its default, in file order.
const std::vector<ConfigKey>& config_schema();

// Applies `key = value` lines on top of `base`. '#' starts a comment.
RunConfig parse_config(const std::string& text, const RunConfig& base = {});
RunConfig load_config(const std::filesystem::path& path, const RunConfig& base = {});

// Applies a single override, e.g. from the command line.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

// All keys, one per line, in schema order. parse_config(to_text(c)) == c.
std::string to_text(const RunConfig& config);

bool same_model(const ModelConfig& a, const ModelConfig& b);

}  // namespace fhmr
