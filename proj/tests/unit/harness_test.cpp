#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <unistd.h>

#include "fhmr/checkpoint.hpp"
#include "fhmr/commands.hpp"
#include "fhmr/rasterizer.hpp"
#include "fhmr/run_config.hpp"
#include "fhmr/synth_data.hpp"
#include "fhmr/training.hpp"

using namespace fhmr;
namespace fs = std::filesystem;

namespace {

const body::BodyModelAsset& toy() {
  static const body::BodyModelAsset asset = body::make_toy_asset(0);
  return asset;
}

RunConfig tiny_run() {
  RunConfig c;
  c.model.image_size = 16;
  c.model.channels = 8;
  c.model.field_width = 8;
  c.model.field_layers = 2;
  c.model.samples_per_ray = 4;
  c.model.feature_map_res = 2;
  c.model.point_octaves = 2;
  c.model.direction_octaves = 1;
  c.model.regressor_width = 16;
  c.model.regressor_iterations = 2;
  c.batch_size = 4;
  c.epochs = 1;
  c.seed = 11;
  return c;
}

// Fresh scratch directory, removed at scope exit.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& tag) {
    dir = fs::temp_directory_path() / ("fhmr_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  fs::path operator/(const std::string& name) const { return dir / name; }
};

synth::Dataset small_dataset(int n_train, int n_val, uint64_t seed, double fraction = 0.5) {
  synth::DatasetManifest m;
  m.seed = seed;
  m.n_train = n_train;
  m.n_val = n_val;
  m.image_size = 16;
  m.fraction_3d = fraction;
  return synth::generate_dataset(m, toy());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

body::Points3 read_obj_vertices(const fs::path& p) {
  std::vector<std::array<double, 3>> v;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("v ", 0) != 0) continue;
    std::istringstream s(line.substr(2));
    std::array<double, 3> x{};
    s >> x[0] >> x[1] >> x[2];
    v.push_back(x);
  }
  body::Points3 out(static_cast<int>(v.size()), 3);
  for (size_t i = 0; i < v.size(); ++i)
    for (int c = 0; c < 3; ++c) out(static_cast<int>(i), c) = v[i][c];
  return out;
}

}  // namespace

TEST_CASE("config: defaults, schema and text round trip") {
  const RunConfig d;
  CHECK(d.model.samples_per_ray == 32);
  CHECK(d.model.feature_map_res == 4);
  CHECK(d.model.point_octaves == 10);
  CHECK(d.model.direction_octaves == 4);
  CHECK(d.model.regressor_iterations == 3);
  CHECK(d.adam.learning_rate == doctest::Approx(5e-5));
  CHECK(d.batch_size == 16);

  // Schema defaults are exactly what a default config prints.
  const auto text = to_text(d);
  std::string expected;
  for (const auto& k : config_schema()) {
    CHECK_FALSE(k.description.empty());
    expected += k.name + " = " + k.default_value + "\n";
  }
  CHECK(text == expected);

  RunConfig c = tiny_run();
  c.weights.silhouette = 0.125;
  c.switches.consistency = false;
  c.max_steps = 7;
  c.adam.beta2 = 0.99;
  const RunConfig back = parse_config(to_text(c));
  CHECK(to_text(back) == to_text(c));
  CHECK(same_model(back.model, c.model));
  CHECK_FALSE(same_model(back.model, d.model));
}

TEST_CASE("config: rejects unknown, duplicate and invalid entries with the line") {
  const auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("# comment\n\nseed = 3  # trailing\n").empty());
  CHECK(parse_config("seed = 3 # x\n").seed == 3);
  CHECK(message("seed = 1\nbogus = 2\n").find("line 2") != std::string::npos);
  CHECK(message("seed = 1\nbogus = 2\n").find("bogus") != std::string::npos);
  CHECK(message("seed = 1\nseed = 2\n").find("line 2") != std::string::npos);
  CHECK_FALSE(message("batch_size = 0\n").empty());
  CHECK_FALSE(message("batch_size = 3x\n").empty());
  CHECK_FALSE(message("learning_rate = -1\n").empty());
  CHECK_FALSE(message("use_imagination = maybe\n").empty());
  CHECK_FALSE(message("samples_per_ray\n").empty());
  CHECK_FALSE(message("aggregation = median\n").empty());

  RunConfig c;
  set_config_value(c, "epochs", "4");
  CHECK(c.epochs == 4);
  CHECK_THROWS_AS(set_config_value(c, "nope", "1"), ConfigError);
}

TEST_CASE("checkpoint: save, load, save is byte-identical and restores exactly") {
  Scratch tmp("ckpt");
  const RunConfig cfg = tiny_run();
  HumanModel model(cfg.model, toy(), cfg.seed);
  const Checkpoint a = capture(model, cfg, 5, 1);
  write_checkpoint(a, tmp / "a.ckpt");
  const Checkpoint b = read_checkpoint(tmp / "a.ckpt");
  write_checkpoint(b, tmp / "b.ckpt");
  CHECK(slurp(tmp / "a.ckpt") == slurp(tmp / "b.ckpt"));
  CHECK(b.step == 5);
  CHECK(b.epoch == 1);
  CHECK(to_text(b.config) == to_text(cfg));
  CHECK(b.asset.content_hash() == toy().content_hash());

  // A model built from another seed becomes identical after restore.
  HumanModel other(cfg.model, toy(), cfg.seed + 1);
  CHECK(restore(other, b).empty());
  for (const auto& [name, t] : model.store().parameters()) {
    const auto u = other.store().parameter(name).values();
    const auto v = t.values();
    CHECK_MESSAGE(std::equal(v.begin(), v.end(), u.begin(), u.end()), name);
  }
  const auto inst = instantiate(b);
  const auto images = small_dataset(2, 1, 4).train;
  NoGradGuard guard;
  const auto p = model.infer(images_to_tensor({&images[0].image}, 16));
  const auto q = inst->infer(images_to_tensor({&images[0].image}, 16));
  for (int64_t i = 0; i < p.vertices.numel(); ++i) CHECK(p.vertices[i] == q.vertices[i]);
}

TEST_CASE("checkpoint: mismatches and damaged files are explicit failures") {
  Scratch tmp("ckpt_bad");
  const RunConfig cfg = tiny_run();
  HumanModel model(cfg.model, toy(), cfg.seed);
  write_checkpoint(capture(model, cfg, 0, 0), tmp / "m.ckpt");
  const Checkpoint ck = read_checkpoint(tmp / "m.ckpt");

  ModelConfig wider = cfg.model;
  wider.channels = 16;
  HumanModel big(wider, toy(), 0);
  CHECK_THROWS_AS(restore(big, ck), CheckpointError);
  CHECK_FALSE(restore(big, ck, true).empty());

  RunConfig mismatched = cfg;
  mismatched.model.samples_per_ray = 8;
  CHECK_THROWS_AS(capture(model, mismatched, 0, 0), CheckpointError);

  auto bytes = slurp(tmp / "m.ckpt");
  {
    std::ofstream(tmp / "trunc.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 9);
    std::ofstream(tmp / "extra.ckpt", std::ios::binary) << bytes << "xx";
    auto magic = bytes;
    magic[0] = 'X';
    std::ofstream(tmp / "magic.ckpt", std::ios::binary) << magic;
  }
  CHECK_THROWS_AS(read_checkpoint(tmp / "trunc.ckpt"), CheckpointError);
  CHECK_THROWS_AS(read_checkpoint(tmp / "extra.ckpt"), CheckpointError);
  CHECK_THROWS_AS(read_checkpoint(tmp / "magic.ckpt"), CheckpointError);
  CHECK_THROWS_AS(read_checkpoint(tmp / "missing.ckpt"), CheckpointError);

  // eval refuses a config whose model differs from the checkpoint's.
  synth::write_dataset(small_dataset(4, 4, 2), tmp / "d.bin");
  cmd::EvalArgs args;
  args.checkpoint = tmp / "m.ckpt";
  args.data = tmp / "d.bin";
  args.expected_model = mismatched.model;
  CHECK_THROWS_AS(cmd::eval(args), CheckpointError);
  args.expected_model = cfg.model;
  CHECK_NOTHROW(cmd::eval(args));
}

TEST_CASE("train: fixed seed replays exactly; zero epochs leaves the initialization") {
  const auto data = small_dataset(16, 1, 9).train;
  RunConfig cfg = tiny_run();
  cfg.epochs = 2;
  cfg.max_steps = 6;
  HumanModel m1(cfg.model, toy(), cfg.seed), m2(cfg.model, toy(), cfg.seed);
  std::ostringstream log1, log2;
  TrainHooks h1, h2;
  h1.log = &log1;
  h2.log = &log2;
  const TrainResult r1 = train(m1, cfg, data, h1);
  const TrainResult r2 = train(m2, cfg, data, h2);
  CHECK(r1.steps == 6);
  CHECK(r1.epochs_completed == 1);
  CHECK(r1.final_loss() == r2.final_loss());
  CHECK(log1.str() == log2.str());
  for (const auto& [name, t] : m1.store().parameters()) {
    const auto u = m2.store().parameter(name).values();
    const auto v = t.values();
    CHECK_MESSAGE(std::equal(v.begin(), v.end(), u.begin(), u.end()), name);
  }
  // Per-step breakdown is a JSON object per line.
  std::istringstream in(log1.str());
  int n = 0;
  for (std::string line; std::getline(in, line); ++n) {
    const auto j = cmd::json::parse(line);
    CHECK(j["step"] == n + 1);
    CHECK(j.contains("canonical"));
    CHECK(j.contains("imagination"));
    CHECK(j.contains("consistency"));
  }
  CHECK(n == 6);

  RunConfig other = cfg;
  other.seed = cfg.seed + 1;
  HumanModel m3(other.model, toy(), other.seed);
  CHECK(train(m3, other, data).final_loss() != r1.final_loss());

  Scratch tmp("zero");
  synth::write_dataset(small_dataset(8, 2, 9), tmp / "d.bin");
  cmd::TrainArgs args;
  args.config = tiny_run();
  args.config.epochs = 0;
  args.data = tmp / "d.bin";
  args.out_dir = tmp / "run";
  const auto summary = cmd::train(args);
  CHECK(summary["steps"] == 0);
  HumanModel init(args.config.model, toy(), args.config.seed);
  write_checkpoint(capture(init, args.config, 0, 0), tmp / "init.ckpt");
  CHECK(slurp(tmp / "init.ckpt") == slurp(tmp / "run" / "final.ckpt"));
  CHECK(parse_config(slurp(tmp / "run" / "config.txt")).seed == args.config.seed);
}

TEST_CASE("train: the silhouette decoder beats its initialization on held-out views") {
  const auto data = small_dataset(64, 12, 31, 1.0);
  RunConfig cfg = tiny_run();
  cfg.switches.consistency = false;
  cfg.adam.learning_rate = 1e-3;
  cfg.epochs = 4;
  HumanModel model(cfg.model, toy(), cfg.seed);

  const std::vector<double> phis = {0.0, 0.9, 2.3, 4.1};
  std::vector<const std::vector<uint8_t>*> images;
  for (const auto& e : data.val) images.push_back(&e.image);
  const Tensor batch = images_to_tensor(images, cfg.model.image_size);
  // Mean binary cross-entropy of decoded against rasterized silhouettes.
  auto held_out_bce = [&] {
    NoGradGuard guard;
    const Tensor latent = model.encode(batch, false);
    raster::SilhouetteFraming framing;
    framing.size = cfg.model.silhouette_size();
    double sum = 0.0;
    int64_t count = 0;
    for (double phi : phis) {
      std::vector<int64_t> rows;
      for (int64_t i = 0; i < static_cast<int64_t>(data.val.size()); ++i) rows.push_back(i);
      std::mt19937_64 rng(5);
      const ViewPrediction pred =
          model.view(latent, rows, std::vector<double>(rows.size(), phi), false, true, rng);
      const auto decoded = pred.silhouette.values();
      for (size_t i = 0; i < rows.size(); ++i) {
        const auto mask = raster::rasterize_gt_silhouette(toy(), data.val[i].params(), phi, framing);
        for (size_t k = 0; k < mask.values.size(); ++k) {
          const double p = std::clamp(decoded[i * mask.values.size() + k], 1e-12, 1.0 - 1e-12);
          sum -= mask.values[k] ? std::log(p) : std::log(1.0 - p);
          ++count;
        }
      }
    }
    return sum / static_cast<double>(count);
  };
  const double before = held_out_bce();
  train(model, cfg, data.train);
  const double after = held_out_bce();
  INFO("bce before " << before << ", after " << after);
  CHECK(std::isfinite(after));
  CHECK(after < before);
}

TEST_CASE("train: a non-finite loss aborts naming the step") {
  auto data = small_dataset(16, 1, 12).train;
  data[9].keypoints2d(0, 0) = std::numeric_limits<double>::quiet_NaN();
  RunConfig cfg = tiny_run();
  HumanModel model(cfg.model, toy(), cfg.seed);
  std::ostringstream log;
  TrainHooks hooks;
  hooks.log = &log;
  int64_t failed = -1;
  try {
    train(model, cfg, data, hooks);
  } catch (const TrainingError& e) {
    failed = e.step;
    CHECK(std::string(e.what()).find(std::to_string(e.step)) != std::string::npos);
  }
  REQUIRE(failed >= 1);
  // Every earlier step was logged; the failing one was not.
  std::istringstream in(log.str());
  int64_t logged = 0;
  for (std::string line; std::getline(in, line);) ++logged;
  CHECK(logged == failed - 1);

  // Through the command: a diverging step size, since stored datasets
  // cannot hold non-finite labels.
  Scratch tmp("nan");
  synth::write_dataset(small_dataset(16, 1, 12), tmp / "d.bin");
  cmd::TrainArgs args;
  args.config = cfg;
  args.config.adam.learning_rate = 1e300;
  args.data = tmp / "d.bin";
  args.out_dir = tmp / "run";
  int64_t aborted = -1;
  try {
    cmd::train(args);
  } catch (const TrainingError& e) {
    aborted = e.step;
  }
  REQUIRE(aborted >= 2);
  const auto lines = lines_of(tmp / "run" / "train_log.jsonl");
  REQUIRE(lines.size() == static_cast<size_t>(aborted));
  const auto last = cmd::json::parse(lines.back());
  CHECK(last["event"] == "abort");
  CHECK(last["step"] == aborted);
  CHECK_FALSE(fs::exists(tmp / "run" / "final.ckpt"));
}

TEST_CASE("eval, render-views, esv and bench commands") {
  Scratch tmp("cmds");
  const RunConfig cfg = tiny_run();
  HumanModel model(cfg.model, toy(), cfg.seed);
  write_checkpoint(capture(model, cfg, 0, 0), tmp / "m.ckpt");
  const synth::Dataset d = small_dataset(6, 6, 21, 1.0);
  synth::write_dataset(d, tmp / "d.bin");

  SUBCASE("eval is read-only, canonical and decoder-free") {
    const std::string before = slurp(tmp / "m.ckpt");
    cmd::EvalArgs args;
    args.checkpoint = tmp / "m.ckpt";
    args.data = tmp / "d.bin";
    const auto report = cmd::eval(args);
    CHECK(slurp(tmp / "m.ckpt") == before);
    CHECK(report["decoder_calls"] == 0);
    CHECK(report["examples"] == 6);
    CHECK(std::isfinite(report["mpjpe"].get<double>()));
    CHECK(std::isfinite(report["pa_mpjpe"].get<double>()));
    CHECK(std::isfinite(report["pve"].get<double>()));
    args.split = cmd::Split::kTrain;
    CHECK(std::isfinite(cmd::eval(args)["mpjpe"].get<double>()));
  }

  SUBCASE("render-views at 0 degrees reproduces the evaluated mesh") {
    cmd::RenderArgs args;
    args.checkpoint = tmp / "m.ckpt";
    args.image.data = tmp / "d.bin";
    args.image.index = 2;
    args.angles_deg = {0, 90, 180, 270};
    args.out_dir = tmp / "views";
    const auto report = cmd::render_views(args);
    REQUIRE(report["views"].size() == 4);
    for (const char* tag : {"000", "090", "180", "270"}) {
      CHECK(fs::exists(tmp / "views" / (std::string("view_") + tag + ".obj")));
      CHECK(fs::exists(tmp / "views" / (std::string("silhouette_") + tag + ".pgm")));
    }
    const auto mesh = read_obj_vertices(tmp / "views" / "view_000.obj");
    NoGradGuard guard;
    const auto pred = model.infer(images_to_tensor({&d.val[2].image}, 16));
    REQUIRE(mesh.rows() == pred.vertices.dim(1));
    double worst = 0;
    for (int i = 0; i < mesh.rows(); ++i)
      for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(mesh(i, c) - pred.vertices[i * 3 + c]));
    CHECK(worst < 1e-8);  // text export keeps nine significant digits

    const auto pgm = slurp(tmp / "views" / "silhouette_000.pgm");
    const int s = cfg.model.silhouette_size();
    CHECK(pgm.rfind("P5\n" + std::to_string(s) + " " + std::to_string(s) + "\n255\n", 0) == 0);

    // Shape spread over the four exported views stays within the sweep's
    // entanglement plus three standard deviations of its per-coefficient spread.
    cmd::EsvArgs e;
    e.checkpoint = tmp / "m.ckpt";
    e.image.data = tmp / "d.bin";
    e.image.index = 2;
    const auto sweep = cmd::esv(e);
    const auto sig = sweep["per_coefficient_sigma"].get<std::vector<double>>();
    double mean_sig = 0, var_sig = 0;
    for (double x : sig) mean_sig += x / sig.size();
    for (double x : sig) var_sig += (x - mean_sig) * (x - mean_sig) / sig.size();
    const auto& views = report["views"];
    const size_t nb = views[0]["shape"].size();
    double spread = 0;
    for (size_t b = 0; b < nb; ++b) {
      double m = 0, v = 0;
      for (const auto& w : views) m += w["shape"][b].get<double>() / 4;
      for (const auto& w : views) v += std::pow(w["shape"][b].get<double>() - m, 2) / 4;
      spread += std::sqrt(v) / nb;
    }
    CHECK(spread <= sweep["esv"].get<double>() + 3 * std::sqrt(var_sig));
  }

  SUBCASE("esv over a split lists every coefficient") {
    cmd::EsvArgs e;
    e.checkpoint = tmp / "m.ckpt";
    e.image.data = tmp / "d.bin";
    e.whole_split = true;
    e.limit = 3;
    e.step_deg = 10;
    const auto r = cmd::esv(e);
    CHECK(r["images"] == 3);
    CHECK(r["per_coefficient_sigma"].size() == static_cast<size_t>(toy().num_shape_coeffs()));
    CHECK(r["esv"].get<double>() >= 0);
  }

  SUBCASE("image input as a PPM file") {
    cmd::write_ppm(tmp / "x.ppm", d.val[1].image, 16);
    CHECK(cmd::read_ppm(tmp / "x.ppm", 16) == d.val[1].image);
    CHECK_THROWS(cmd::read_ppm(tmp / "x.ppm", 32));
    cmd::EsvArgs e;
    e.checkpoint = tmp / "m.ckpt";
    e.image.ppm = tmp / "x.ppm";
    e.step_deg = 30;
    CHECK(cmd::esv(e)["images"] == 1);
    e.image.data = tmp / "d.bin";
    CHECK_THROWS(cmd::esv(e));
  }

  SUBCASE("bench reports one row per resolution") {
    cmd::BenchArgs b;
    b.checkpoint = tmp / "m.ckpt";
    b.iterations = 5;
    b.warmup = 1;
    const auto r = cmd::bench(b);
    REQUIRE(r["bench"].size() == 4);
    for (const auto& row : r["bench"]) {
      CHECK(row["fps"].get<double>() > 0);
      if (row["resolution"] == cfg.model.feature_map_res) CHECK(row["reinitialized"].empty());
    }
  }
}

