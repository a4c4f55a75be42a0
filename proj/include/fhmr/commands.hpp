#pragma once

// The operations behind the command-line tool. Each returns a JSON report
// and writes its files; failures throw one of the module error types.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fhmr/checkpoint.hpp"
#include "fhmr/metrics.hpp"
#include "fhmr/run_config.hpp"
#include "fhmr/synth_data.hpp"

namespace fhmr::cmd {

using nlohmann::json;
namespace fs = std::filesystem;

struct TrainArgs {
  RunConfig config;
  fs::path data;
  fs::path out_dir;
  std::optional<fs::path> asset;  // defaults to the built-in toy body
};
// Writes config.txt, train_log.jsonl, epoch_<n>.ckpt and final.ckpt.
json train(const TrainArgs& args, std::ostream* progress = nullptr);

enum class Split { kTrain, kVal };
Split parse_split(const std::string& text);

struct EvalArgs {
  fs::path checkpoint;
  fs::path data;
  Split split = Split::kVal;
  std::optional<ModelConfig> expected_model;  // from --config; must match the checkpoint
};
json eval(const EvalArgs& args);
json to_json(const metrics::EvalReport& report);

// One input image: a binary PPM file or a dataset record.
struct ImageSource {
  std::optional<fs::path> ppm;
  std::optional<fs::path> data;
  Split split = Split::kVal;
  int index = 0;
};

struct RenderArgs {
  fs::path checkpoint;
  ImageSource image;
  std::vector<double> angles_deg = {0, 90, 180, 270};
  fs::path out_dir;
};
// Per angle: view_<deg>.obj, silhouette_<deg>.pgm and the regressed values.
json render_views(const RenderArgs& args);

struct EsvArgs {
  fs::path checkpoint;
  ImageSource image;
  bool whole_split = false;  // sweep every image of the split instead of one
  int limit = 0;             // cap on images when sweeping a split; 0 = all
  double step_deg = 1.0;
};
json esv(const EsvArgs& args);
json to_json(const metrics::ESVReport& report);

struct BenchArgs {
  fs::path checkpoint;
  std::vector<int> resolutions = {1, 2, 4, 6};
  int iterations = 10000;
  int warmup = 100;
  uint64_t seed = 0;
};
// Frames per second of the canonical inference path, image in to
// parameters out. Resolutions other than the checkpoint's reuse every
// tensor whose shape still fits; the rest keep fresh initial values.
json bench(const BenchArgs& args);

// Netpbm helpers for image input and silhouette output.
std::vector<uint8_t> read_ppm(const fs::path& path, int expected_size);
void write_ppm(const fs::path& path, const std::vector<uint8_t>& rgb, int size);
void write_pgm(const fs::path& path, const std::vector<double>& gray, int size);
void write_obj(const fs::path& path, const body::Points3& vertices, const std::vector<std::array<int, 3>>& faces);

}  // namespace fhmr::cmd
