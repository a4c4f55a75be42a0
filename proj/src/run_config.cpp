#include "fhmr/run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace fhmr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int64_t parse_int(const std::string& v) {
  int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& v) {
  size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out)) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::string real_text(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

struct Field {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field int_field(std::string name, std::string doc, T RunConfig::*group, int (T::*member)) {
  return {{name, "int", "", std::move(doc)},
          [=](RunConfig& c, const std::string& v) {
            const int64_t x = parse_int(v);
            if (x < INT32_MIN || x > INT32_MAX) throw ConfigError("value out of range");
            (c.*group).*member = static_cast<int>(x);
          },
          [=](const RunConfig& c) { return std::to_string((c.*group).*member); }};
}

template <typename T>
Field real_field(std::string name, std::string doc, T RunConfig::*group, double(T::*member)) {
  return {{name, "real", "", std::move(doc)},
          [=](RunConfig& c, const std::string& v) { (c.*group).*member = parse_real(v); },
          [=](const RunConfig& c) { return real_text((c.*group).*member); }};
}

template <typename T>
Field bool_field(std::string name, std::string doc, T RunConfig::*group, bool(T::*member)) {
  return {{name, "bool", "", std::move(doc)},
          [=](RunConfig& c, const std::string& v) { (c.*group).*member = parse_bool(v); },
          [=](const RunConfig& c) { return std::string((c.*group).*member ? "true" : "false"); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    using M = ModelConfig;
    std::vector<Field> f = {
        int_field("image_size", "input image side in pixels", &RunConfig::model, &M::image_size),
        int_field("channels", "encoder, latent and rendered feature width", &RunConfig::model, &M::channels),
        int_field("field_width", "hidden width of the feature field", &RunConfig::model, &M::field_width),
        int_field("field_layers", "hidden layers of the feature field", &RunConfig::model, &M::field_layers),
        int_field("samples_per_ray", "points sampled along each ray", &RunConfig::model, &M::samples_per_ray),
        int_field("feature_map_res", "rendered feature map side", &RunConfig::model, &M::feature_map_res),
        int_field("point_octaves", "positional encoding octaves for points", &RunConfig::model, &M::point_octaves),
        int_field("direction_octaves", "positional encoding octaves for ray directions", &RunConfig::model,
                  &M::direction_octaves),
        {{"aggregation", "gap|conv|depthwise", "", "feature map to vector reduction"},
         [](RunConfig& c, const std::string& v) {
           try {
             c.model.aggregation = parse_aggregation(v);
           } catch (const std::invalid_argument& e) {
             throw ConfigError(e.what());
           }
         },
         [](const RunConfig& c) { return to_string(c.model.aggregation); }},
        bool_field("attention", "foreground attention before pooling", &RunConfig::model, &M::attention),
        int_field("regressor_iterations", "iterative regression steps", &RunConfig::model, &M::regressor_iterations),
        int_field("regressor_width", "hidden width of the regressor", &RunConfig::model, &M::regressor_width),
    };
    auto geo = [](std::string name, std::string doc, double rays::OrbitGeometry::*member) {
      return Field{{name, "real", "", std::move(doc)},
                   [=](RunConfig& c, const std::string& v) { c.model.geometry.*member = parse_real(v); },
                   [=](const RunConfig& c) { return real_text(c.model.geometry.*member); }};
    };
    f.push_back(geo("orbit_radius", "camera distance from the body centre", &rays::OrbitGeometry::orbit_radius));
    f.push_back(geo("near", "first sample depth along a ray", &rays::OrbitGeometry::near));
    f.push_back(geo("far", "last sample depth along a ray", &rays::OrbitGeometry::far));
    f.push_back(geo("bounding_radius", "radius of the sphere holding the body", &rays::OrbitGeometry::bounding_radius));
    f.push_back(real_field("weight_keypoints2d", "2D keypoint loss weight", &RunConfig::weights, &LossWeights::keypoints2d));
    f.push_back(real_field("weight_joints3d", "3D joint loss weight", &RunConfig::weights, &LossWeights::joints3d));
    f.push_back(real_field("weight_pose", "pose loss weight", &RunConfig::weights, &LossWeights::pose));
    f.push_back(real_field("weight_shape", "shape loss weight", &RunConfig::weights, &LossWeights::shape));
    f.push_back(real_field("weight_silhouette", "silhouette loss weight", &RunConfig::weights, &LossWeights::silhouette));
    f.push_back(bool_field("use_imagination", "arbitrary-view loss on 3D-labelled examples", &RunConfig::switches,
                           &LossSwitches::imagination));
    f.push_back(bool_field("use_consistency", "two-view consistency loss on 2D-only examples", &RunConfig::switches,
                           &LossSwitches::consistency));
    f.push_back(bool_field("use_silhouette", "silhouette supervision inside the arbitrary-view loss",
                           &RunConfig::switches, &LossSwitches::silhouette));
    f.push_back(real_field("learning_rate", "Adam step size", &RunConfig::adam, &AdamOptions::learning_rate));
    f.push_back(real_field("adam_beta1", "Adam first moment decay", &RunConfig::adam, &AdamOptions::beta1));
    f.push_back(real_field("adam_beta2", "Adam second moment decay", &RunConfig::adam, &AdamOptions::beta2));
    f.push_back(real_field("adam_epsilon", "Adam denominator offset", &RunConfig::adam, &AdamOptions::epsilon));
    f.push_back({{"batch_size", "int", "", "examples per step"},
                 [](RunConfig& c, const std::string& v) { c.batch_size = static_cast<int>(parse_int(v)); },
                 [](const RunConfig& c) { return std::to_string(c.batch_size); }});
    f.push_back({{"epochs", "int", "", "passes over the training split"},
                 [](RunConfig& c, const std::string& v) { c.epochs = static_cast<int>(parse_int(v)); },
                 [](const RunConfig& c) { return std::to_string(c.epochs); }});
    f.push_back({{"max_steps", "int", "", "stop after this many steps; 0 disables the cap"},
                 [](RunConfig& c, const std::string& v) { c.max_steps = parse_int(v); },
                 [](const RunConfig& c) { return std::to_string(c.max_steps); }});
    f.push_back({{"seed", "int", "", "seed for initialization, shuffling and sampling"},
                 [](RunConfig& c, const std::string& v) {
                   const int64_t x = parse_int(v);
                   if (x < 0) throw ConfigError("seed must be non-negative");
                   c.seed = static_cast<uint64_t>(x);
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    const RunConfig defaults;
    for (auto& x : f) x.key.default_value = x.get(defaults);
    return f;
  }();
  return all;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key.name == key) return &f;
  return nullptr;
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (!(adam.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ConfigError("Adam decays must be in [0, 1)");
  if (!(adam.epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
}

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown key '" + key + "'");
  f->set(config, value);
}

RunConfig parse_config(const std::string& text, const RunConfig& base) {
  RunConfig c = base;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  for (int number = 1; std::getline(in, line); ++number) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(number) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      set_config_value(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config(buf.str(), base);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key.name + " = " + f.get(config) + "\n";
  return out;
}

bool same_model(const ModelConfig& a, const ModelConfig& b) {
  RunConfig x, y;
  x.model = a;
  y.model = b;
  for (const auto& f : fields()) {
    // Only the model-shaping keys matter here.
    if (f.key.name == "weight_keypoints2d") break;
    if (f.get(x) != f.get(y)) return false;
  }
  return true;
}

}  // namespace fhmr
