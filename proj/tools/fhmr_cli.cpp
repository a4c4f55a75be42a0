// Command-line entry point: asset and data generation, training, evaluation,
// view sweeps, shape-view entanglement and inference speed.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "fhmr/commands.hpp"
#include "fhmr/training.hpp"

namespace {

using fhmr::cmd::json;
namespace fs = std::filesystem;

void emit(const json& report, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << report.dump(2) << '\n';
    return;
  }
  const fs::path p(out);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::trunc);
  f << report.dump(2) << '\n';
  if (!f) throw std::runtime_error("cannot write " + out);
  std::cerr << "wrote " << out << '\n';
}

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) {
    std::istringstream v(item);
    T x;
    if (!(v >> x) || !(v >> std::ws).eof()) throw std::invalid_argument("bad list entry '" + item + "'");
    out.push_back(x);
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Human mesh recovery with implicit view representations"};
  app.require_subcommand(1);

  std::string config_path, out;
  int64_t seed = -1;
  std::vector<std::string> overrides;
  auto common = [&](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
      sub->add_option("--set", overrides, "extra key=value settings, applied after --config");
    }
    sub->add_option("--seed", seed, "seed (overrides the configuration)");
    sub->add_option("--out", out, "output path");
  };

  auto* make_asset = app.add_subcommand("make-asset", "write the procedural toy body asset");
  common(make_asset, false);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  common(gen, false);
  std::string asset_path;
  fhmr::synth::DatasetManifest manifest;
  manifest.n_train = 2000;
  manifest.n_val = 200;
  gen->add_option("--asset", asset_path, "body asset (default: built-in toy body)")->check(CLI::ExistingFile);
  gen->add_option("--n-train", manifest.n_train, "training examples")->capture_default_str();
  gen->add_option("--n-val", manifest.n_val, "validation examples")->capture_default_str();
  gen->add_option("--image-size", manifest.image_size, "image side")->capture_default_str();
  gen->add_option("--fraction-3d", manifest.fraction_3d, "fraction with 3D labels")->capture_default_str();

  auto* train = app.add_subcommand("train", "train a model");
  common(train, true);
  std::string data_path;
  train->add_option("--data", data_path, "dataset file")->required()->check(CLI::ExistingFile);
  train->add_option("--asset", asset_path, "body asset (default: built-in toy body)")->check(CLI::ExistingFile);

  std::string checkpoint, split = "val";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint at the canonical view");
  common(eval, true);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_path, "dataset file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split, "train or val")->capture_default_str();

  std::string image_path, angles = "0,90,180,270";
  int index = 0;
  auto* render = app.add_subcommand("render-views", "export meshes and silhouettes over viewing directions");
  common(render, false);
  render->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  render->add_option("--image", image_path, "binary PPM input image")->check(CLI::ExistingFile);
  render->add_option("--data", data_path, "dataset file (with --index)")->check(CLI::ExistingFile);
  render->add_option("--split", split, "train or val")->capture_default_str();
  render->add_option("--index", index, "example index in the split")->capture_default_str();
  render->add_option("--angles", angles, "comma-separated degrees")->capture_default_str();

  double step_deg = 1.0;
  int limit = 0;
  auto* esv = app.add_subcommand("esv", "shape spread over a full turn of viewing directions");
  common(esv, false);
  esv->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  esv->add_option("--image", image_path, "binary PPM input image")->check(CLI::ExistingFile);
  esv->add_option("--data", data_path, "dataset file; sweeps the split unless --index is given")
      ->check(CLI::ExistingFile);
  esv->add_option("--split", split, "train or val")->capture_default_str();
  auto* esv_index = esv->add_option("--index", index, "single example index");
  esv->add_option("--limit", limit, "at most this many images of the split; 0 = all")->capture_default_str();
  esv->add_option("--step", step_deg, "angular step in degrees")->capture_default_str();

  std::string resolutions = "1,2,4,6";
  int iterations = 10000, warmup = 100;
  auto* bench = app.add_subcommand("bench", "inference speed per rendering resolution");
  common(bench, false);
  bench->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  bench->add_option("--res", resolutions, "comma-separated feature map sides")->capture_default_str();
  bench->add_option("--iters", iterations, "timed inferences per resolution")->capture_default_str();
  bench->add_option("--warmup", warmup, "untimed inferences first")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (make_asset->parsed()) {
      if (out.empty()) throw std::invalid_argument("--out is required");
      const auto asset = fhmr::body::make_toy_asset(seed < 0 ? 0 : static_cast<uint64_t>(seed));
      fhmr::body::save_asset(asset, out);
      std::cerr << "wrote " << out << " (" << asset.content_hash() << ")\n";
    } else if (gen->parsed()) {
      if (out.empty()) throw std::invalid_argument("--out is required");
      const auto asset = asset_path.empty() ? fhmr::body::make_toy_asset(0) : fhmr::body::load_asset(asset_path);
      manifest.seed = seed < 0 ? 0 : static_cast<uint64_t>(seed);
      fhmr::synth::write_dataset(fhmr::synth::generate_dataset(manifest, asset), out);
      std::cerr << "wrote " << out << '\n';
    } else if (train->parsed()) {
      if (out.empty()) throw std::invalid_argument("--out is required");
      fhmr::cmd::TrainArgs args;
      if (!config_path.empty()) args.config = fhmr::load_config(config_path);
      for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw fhmr::ConfigError("--set expects key=value, got '" + kv + "'");
        fhmr::set_config_value(args.config, kv.substr(0, eq), kv.substr(eq + 1));
      }
      if (seed >= 0) args.config.seed = static_cast<uint64_t>(seed);
      args.config.validate();
      args.data = data_path;
      args.out_dir = out;
      if (!asset_path.empty()) args.asset = asset_path;
      emit(fhmr::cmd::train(args, &std::cerr), "-");
    } else if (eval->parsed()) {
      fhmr::cmd::EvalArgs args;
      args.checkpoint = checkpoint;
      args.data = data_path;
      args.split = fhmr::cmd::parse_split(split);
      if (!config_path.empty() || !overrides.empty()) {
        fhmr::RunConfig c = config_path.empty() ? fhmr::RunConfig{} : fhmr::load_config(config_path);
        for (const auto& kv : overrides) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) throw fhmr::ConfigError("--set expects key=value, got '" + kv + "'");
          fhmr::set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
        }
        args.expected_model = c.model;
      }
      emit(fhmr::cmd::eval(args), out);
    } else if (render->parsed()) {
      if (out.empty()) throw std::invalid_argument("--out is required");
      fhmr::cmd::RenderArgs args;
      args.checkpoint = checkpoint;
      if (!image_path.empty()) args.image.ppm = image_path;
      if (!data_path.empty()) args.image.data = data_path;
      args.image.split = fhmr::cmd::parse_split(split);
      args.image.index = index;
      args.angles_deg = parse_list<double>(angles);
      args.out_dir = out;
      const json report = fhmr::cmd::render_views(args);
      emit(report, (fs::path(out) / "views.json").string());
    } else if (esv->parsed()) {
      fhmr::cmd::EsvArgs args;
      args.checkpoint = checkpoint;
      if (!image_path.empty()) args.image.ppm = image_path;
      if (!data_path.empty()) args.image.data = data_path;
      args.image.split = fhmr::cmd::parse_split(split);
      args.image.index = index;
      args.whole_split = !data_path.empty() && esv_index->count() == 0;
      args.limit = limit;
      args.step_deg = step_deg;
      emit(fhmr::cmd::esv(args), out);
    } else if (bench->parsed()) {
      fhmr::cmd::BenchArgs args;
      args.checkpoint = checkpoint;
      args.resolutions = parse_list<int>(resolutions);
      args.iterations = iterations;
      args.warmup = warmup;
      args.seed = seed < 0 ? 0 : static_cast<uint64_t>(seed);
      const json report = fhmr::cmd::bench(args);
      for (const auto& row : report["bench"])
        std::cerr << "res " << row["resolution"] << ": " << row["fps"].get<double>() << " fps\n";
      emit(report, out);
    }
  } catch (const fhmr::TrainingError& e) {
    std::cerr << "error: training aborted at step " << e.step << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
