#include "fhmr/commands.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "fhmr/training.hpp"

namespace fhmr::cmd {

namespace {

const std::vector<LabeledExample>& pick(const synth::Dataset& d, Split s) { return s == Split::kTrain ? d.train : d.val; }

std::string split_name(Split s) { return s == Split::kTrain ? "train" : "val"; }

std::string angle_tag(double deg) {
  std::ostringstream s;
  s << std::setfill('0') << std::setw(3) << std::lround(deg);
  return s.str();
}

json vector_json(const Tensor& t, int64_t row) {
  const int64_t w = t.numel() / t.dim(0);
  std::vector<double> v(static_cast<size_t>(w));
  for (int64_t i = 0; i < w; ++i) v[i] = t[row * w + i];
  return v;
}

body::Points3 points_of(const Tensor& t, int64_t row) {
  const int64_t n = t.dim(1);
  body::Points3 p(n, 3);
  for (int64_t r = 0; r < n; ++r)
    for (int c = 0; c < 3; ++c) p(r, c) = t[(row * n + r) * 3 + c];
  return p;
}

Tensor load_image(const ImageSource& src, int size) {
  if (src.ppm.has_value() == src.data.has_value()) throw std::invalid_argument("give either an image file or a dataset");
  if (src.ppm) {
    const auto bytes = read_ppm(*src.ppm, size);
    return images_to_tensor({&bytes}, size);
  }
  const auto d = synth::read_dataset(*src.data);
  const auto& set = pick(d, src.split);
  if (src.index < 0 || src.index >= static_cast<int>(set.size()))
    throw std::invalid_argument("image index " + std::to_string(src.index) + " is outside the " +
                                split_name(src.split) + " split");
  if (set[src.index].image_size != size) throw std::invalid_argument("dataset image size differs from the model input");
  return images_to_tensor({&set[src.index].image}, size);
}

uint64_t file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  uint64_t h = 1469598103934665603ull;
  char c;
  while (in.get(c)) h = (h ^ static_cast<uint8_t>(c)) * 1099511628211ull;
  return h;
}

}  // namespace

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  throw std::invalid_argument("split must be train or val, got '" + text + "'");
}

json train(const TrainArgs& args, std::ostream* progress) {
  args.config.validate();
  const body::BodyModelAsset asset = args.asset ? body::load_asset(*args.asset) : body::make_toy_asset(0);
  const synth::Dataset data = synth::read_dataset(args.data, &asset);
  if (data.manifest.image_size != args.config.model.image_size)
    throw ConfigError("image_size " + std::to_string(args.config.model.image_size) + " does not match the dataset (" +
                      std::to_string(data.manifest.image_size) + ")");
  fs::create_directories(args.out_dir);
  {
    std::ofstream cfg(args.out_dir / "config.txt");
    cfg << to_text(args.config);
  }

  HumanModel model(args.config.model, asset, args.config.seed);
  std::ofstream log(args.out_dir / "train_log.jsonl", std::ios::trunc);
  TrainHooks hooks;
  hooks.log = &log;
  hooks.epoch_end = [&](int epoch, int64_t step) {
    write_checkpoint(capture(model, args.config, step, epoch + 1),
                     args.out_dir / ("epoch_" + std::to_string(epoch + 1) + ".ckpt"));
    if (progress) *progress << "epoch " << epoch + 1 << " done at step " << step << '\n';
  };
  TrainResult result;
  try {
    result = train(model, args.config, data.train, hooks);
  } catch (const TrainingError& e) {
    log << json{{"event", "abort"}, {"step", e.step}, {"reason", e.what()}}.dump() << '\n';
    throw;
  }
  write_checkpoint(capture(model, args.config, result.steps, result.epochs_completed), args.out_dir / "final.ckpt");
  const json summary{{"event", "done"},
                     {"steps", result.steps},
                     {"epochs", result.epochs_completed},
                     {"final_loss", result.final_loss()},
                     {"checkpoint", (args.out_dir / "final.ckpt").string()}};
  log << summary.dump() << '\n';
  return summary;
}

json to_json(const metrics::EvalReport& r) {
  json per = json::array();
  for (const auto& m : r.per_example)
    per.push_back({{"mpjpe", m.mpjpe}, {"pa_mpjpe", m.pa_mpjpe}, {"pve", m.pve}, {"degenerate", m.degenerate}});
  return {{"mpjpe", r.mpjpe},
          {"pa_mpjpe", r.pa_mpjpe},
          {"pve", r.pve},
          {"examples", r.per_example.size()},
          {"degenerate", r.degenerate},
          {"per_example", per}};
}

json to_json(const metrics::ESVReport& r) {
  return {{"esv", r.esv}, {"per_coefficient_sigma", r.per_coefficient_sigma}};
}

json eval(const EvalArgs& args) {
  const uint64_t before = file_digest(args.checkpoint);
  const Checkpoint ckpt = read_checkpoint(args.checkpoint);
  if (args.expected_model && !same_model(*args.expected_model, ckpt.config.model))
    throw CheckpointError("the configuration does not match the checkpoint's model");
  const auto model = instantiate(ckpt);
  const synth::Dataset data = synth::read_dataset(args.data, &ckpt.asset);
  const auto& set = pick(data, args.split);
  if (!set.empty() && set[0].image_size != ckpt.config.model.image_size)
    throw std::invalid_argument("dataset image size differs from the model input");
  json out = to_json(evaluate(*model, set));
  out["split"] = split_name(args.split);
  out["decoder_calls"] = model->decoder_calls();
  if (file_digest(args.checkpoint) != before) throw CheckpointError("checkpoint changed during evaluation");
  return out;
}

json render_views(const RenderArgs& args) {
  const Checkpoint ckpt = read_checkpoint(args.checkpoint);
  const auto model = instantiate(ckpt);
  const Tensor image = load_image(args.image, ckpt.config.model.image_size);
  fs::create_directories(args.out_dir);
  NoGradGuard guard;
  const Tensor latent = model->encode(image, false);
  json views = json::array();
  std::mt19937_64 unused(0);
  for (double deg : args.angles_deg) {
    const double phi = deg * M_PI / 180.0;
    const auto pred = model->view(latent, {0}, {phi}, false, true, unused);
    const std::string tag = angle_tag(deg);
    write_obj(args.out_dir / ("view_" + tag + ".obj"), points_of(pred.vertices, 0), ckpt.asset.faces);
    const int s = static_cast<int>(pred.silhouette.dim(2));
    const auto sv = pred.silhouette.values();
    write_pgm(args.out_dir / ("silhouette_" + tag + ".pgm"), std::vector<double>(sv.begin(), sv.end()), s);
    views.push_back({{"angle_deg", deg},
                     {"mesh", "view_" + tag + ".obj"},
                     {"silhouette", "silhouette_" + tag + ".pgm"},
                     {"shape", vector_json(pred.params.shape, 0)},
                     {"camera", vector_json(pred.params.camera, 0)},
                     {"joints3d", vector_json(pred.joints3d, 0)}});
  }
  return {{"views", views}};
}

json esv(const EsvArgs& args) {
  const Checkpoint ckpt = read_checkpoint(args.checkpoint);
  const auto model = instantiate(ckpt);
  const int size = ckpt.config.model.image_size;
  std::vector<metrics::ESVReport> reports;
  if (args.whole_split) {
    if (!args.image.data) throw std::invalid_argument("sweeping a split needs a dataset");
    const auto d = synth::read_dataset(*args.image.data, &ckpt.asset);
    const auto& set = pick(d, args.image.split);
    const size_t n = args.limit > 0 ? std::min(set.size(), static_cast<size_t>(args.limit)) : set.size();
    for (size_t i = 0; i < n; ++i)
      reports.push_back(metrics::esv(*model, images_to_tensor({&set[i].image}, size), args.step_deg));
  } else {
    reports.push_back(metrics::esv(*model, load_image(args.image, size), args.step_deg));
  }
  json out = to_json(metrics::average(reports));
  out["images"] = reports.size();
  out["step_deg"] = args.step_deg;
  return out;
}

json bench(const BenchArgs& args) {
  if (args.iterations < 1 || args.warmup < 0) throw std::invalid_argument("iterations must be positive");
  const Checkpoint ckpt = read_checkpoint(args.checkpoint);
  const int size = ckpt.config.model.image_size;
  std::mt19937_64 rng(args.seed);
  std::uniform_int_distribution<int> byte(0, 255);
  std::vector<uint8_t> pixels(static_cast<size_t>(size) * size * 3);
  for (auto& p : pixels) p = static_cast<uint8_t>(byte(rng));

  json rows = json::array();
  for (int res : args.resolutions) {
    if (res < 1) throw std::invalid_argument("resolution must be positive");
    ModelConfig mc = ckpt.config.model;
    mc.feature_map_res = res;
    HumanModel model(mc, ckpt.asset, ckpt.config.seed);
    const auto fresh = restore(model, ckpt, true);
    NoGradGuard guard;
    double sink = 0;
    for (int i = 0; i < args.warmup; ++i) sink += model.infer(images_to_tensor({&pixels}, size)).params.camera[0];
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < args.iterations; ++i) sink += model.infer(images_to_tensor({&pixels}, size)).params.camera[0];
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(sink)) throw std::runtime_error("non-finite inference output during benchmark");
    rows.push_back({{"resolution", res},
                    {"iterations", args.iterations},
                    {"seconds", seconds},
                    {"fps", args.iterations / seconds},
                    {"reinitialized", fresh}});
  }
  return {{"bench", rows}, {"image_size", size}};
}

std::vector<uint8_t> read_ppm(const fs::path& path, int expected_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open image " + path.string());
  std::string magic;
  in >> magic;
  auto next_int = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    int v = -1;
    in >> v;
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
    throw std::invalid_argument(path.string() + " is not an 8-bit binary PPM image");
  if (w != expected_size || h != expected_size)
    throw std::invalid_argument(path.string() + " is " + std::to_string(w) + "x" + std::to_string(h) +
                                ", the model expects " + std::to_string(expected_size) + " pixels square");
  in.get();
  std::vector<uint8_t> rgb(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!in) throw std::invalid_argument(path.string() + " is truncated");
  return rgb;
}

void write_ppm(const fs::path& path, const std::vector<uint8_t>& rgb, int size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << "P6\n" << size << ' ' << size << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

void write_pgm(const fs::path& path, const std::vector<double>& gray, int size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << "P5\n" << size << ' ' << size << "\n255\n";
  for (double g : gray) out.put(static_cast<char>(std::lround(std::clamp(g, 0.0, 1.0) * 255.0)));
}

void write_obj(const fs::path& path, const body::Points3& vertices, const std::vector<std::array<int, 3>>& faces) {
  std::ofstream out(path, std::ios::trunc);
  out << std::setprecision(9);
  for (int i = 0; i < vertices.rows(); ++i)
    out << "v " << vertices(i, 0) << ' ' << vertices(i, 1) << ' ' << vertices(i, 2) << '\n';
  for (const auto& f : faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

}  // namespace fhmr::cmd
