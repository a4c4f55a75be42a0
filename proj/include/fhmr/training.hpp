#pragma once

// Training loop and canonical-view evaluation.

#include <cstdint>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "fhmr/example.hpp"
#include "fhmr/losses.hpp"
#include "fhmr/metrics.hpp"
#include "fhmr/model.hpp"
#include "fhmr/run_config.hpp"

namespace fhmr {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int64_t step) : std::runtime_error(what), step(step) {}
  int64_t step;
};

struct StepRecord {
  int64_t step = 0;  // 1-based
  int epoch = 0;     // 0-based
  LossBreakdown loss;
};

struct TrainHooks {
  std::ostream* log = nullptr;  // one JSON object per line
  std::function<void(int epoch, int64_t step)> epoch_end;
};

struct TrainResult {
  int64_t steps = 0;
  int epochs_completed = 0;
  std::vector<StepRecord> history;
  double final_loss() const { return history.empty() ? 0.0 : history.back().loss.total; }
};

// Adam on all parameters jointly. Shuffling and per-step sampling are drawn
// from streams derived from config.seed, so a run replays exactly. A
// non-finite loss, or any failure inside a step, aborts with a TrainingError
// carrying the step.
TrainResult train(HumanModel& model, const RunConfig& config, const std::vector<LabeledExample>& data,
                  const TrainHooks& hooks = {});

std::string to_json_line(const StepRecord& record);

// Canonical-view inference on the 3D-labelled examples, in chunks.
metrics::EvalReport evaluate(HumanModel& model, const std::vector<LabeledExample>& data, int chunk = 32);

}  // namespace fhmr
