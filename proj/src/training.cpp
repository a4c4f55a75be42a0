#include "fhmr/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

namespace fhmr {

namespace {

enum Stream : uint32_t { kShuffle = 1, kStep = 2 };

std::mt19937_64 derived_rng(uint64_t seed, Stream stream, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(stream),
                    static_cast<uint32_t>(index), static_cast<uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

body::Points3 rows_of(const Tensor& t, int64_t b) {
  const int64_t rows = t.dim(1);
  body::Points3 p(rows, 3);
  for (int64_t r = 0; r < rows; ++r)
    for (int c = 0; c < 3; ++c) p(r, c) = t[(b * rows + r) * 3 + c];
  return p;
}

}  // namespace

std::string to_json_line(const StepRecord& r) {
  const nlohmann::json j{{"event", "step"},
                         {"step", r.step},
                         {"epoch", r.epoch},
                         {"loss", r.loss.total},
                         {"canonical", r.loss.canonical},
                         {"imagination", r.loss.imagination},
                         {"consistency", r.loss.consistency},
                         {"examples_3d", r.loss.examples_3d},
                         {"examples_2d", r.loss.examples_2d}};
  return j.dump();
}

TrainResult train(HumanModel& model, const RunConfig& config, const std::vector<LabeledExample>& data,
                  const TrainHooks& hooks) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("training set is empty");
  for (const auto& e : data)
    if (e.image_size != model.config().image_size)
      throw std::invalid_argument("training image size differs from the model input size");

  Adam adam(config.adam);
  TrainResult result;
  std::vector<size_t> order(data.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), size_t{0});
    auto shuffle_rng = derived_rng(config.seed, kShuffle, static_cast<uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      if (config.max_steps > 0 && result.steps >= config.max_steps) return result;
      const int64_t step = result.steps + 1;
      Batch batch;
      for (size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) batch.push_back(&data[order[i]]);

      auto rng = derived_rng(config.seed, kStep, static_cast<uint64_t>(step));
      model.store().zero_grad();
      LossBreakdown breakdown;
      try {
        const TotalLoss loss = total_loss(model, batch, config.weights, config.switches, rng);
        breakdown = loss.breakdown;
        if (!std::isfinite(breakdown.total))
          throw TrainingError("non-finite loss at step " + std::to_string(step), step);
        loss.value.backward();
      } catch (const TrainingError&) {
        throw;
      } catch (const std::exception& e) {
        // Diverged weights trip the forward finiteness checks before a loss exists.
        throw TrainingError("step " + std::to_string(step) + ": " + e.what(), step);
      }
      adam.step(model.store());

      StepRecord record{step, epoch, breakdown};
      if (hooks.log) *hooks.log << to_json_line(record) << '\n' << std::flush;
      result.history.push_back(record);
      result.steps = step;
    }
    result.epochs_completed = epoch + 1;
    if (hooks.epoch_end) hooks.epoch_end(epoch, result.steps);
  }
  return result;
}

metrics::EvalReport evaluate(HumanModel& model, const std::vector<LabeledExample>& data, int chunk) {
  if (chunk < 1) throw std::invalid_argument("chunk must be positive");
  NoGradGuard guard;
  std::vector<const LabeledExample*> labelled;
  for (const auto& e : data)
    if (e.has_3d) labelled.push_back(&e);
  std::vector<metrics::ExampleMetrics> per_example;
  for (size_t start = 0; start < labelled.size(); start += static_cast<size_t>(chunk)) {
    std::vector<const std::vector<uint8_t>*> images;
    const size_t end = std::min(labelled.size(), start + chunk);
    for (size_t i = start; i < end; ++i) images.push_back(&labelled[i]->image);
    const ViewPrediction pred = model.infer(images_to_tensor(images, model.config().image_size));
    for (size_t i = start; i < end; ++i) {
      const int64_t b = static_cast<int64_t>(i - start);
      per_example.push_back(metrics::evaluate_example(rows_of(pred.joints3d, b), labelled[i]->joints3d,
                                                      rows_of(pred.vertices, b), labelled[i]->vertices));
    }
  }
  return metrics::summarize(std::move(per_example));
}

}  // namespace fhmr
