#pragma once

// Checkpoint files: the run configuration, the body asset and every
// parameter and buffer of a model. Layout in docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "fhmr/body_model.hpp"
#include "fhmr/model.hpp"
#include "fhmr/run_config.hpp"

namespace fhmr {

inline constexpr uint32_t kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  Shape shape;
  std::vector<double> values;
  bool buffer = false;
};

struct Checkpoint {
  RunConfig config;
  body::BodyModelAsset asset;
  int64_t step = 0;
  int epoch = 0;
  std::map<std::string, StoredTensor> tensors;
};

Checkpoint capture(const HumanModel& model, const RunConfig& config, int64_t step, int epoch);
void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies stored values into the model. Every model tensor must be present
// with the same shape unless `skip_mismatched` is set, in which case tensors
// whose shape differs keep their fresh values and are returned by name.
std::vector<std::string> restore(HumanModel& model, const Checkpoint& checkpoint, bool skip_mismatched = false);

// Builds the model described by the checkpoint and restores its weights.
std::unique_ptr<HumanModel> instantiate(const Checkpoint& checkpoint);

}  // namespace fhmr
