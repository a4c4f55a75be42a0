#include "fhmr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace fhmr {

static_assert(std::endian::native == std::endian::little, "checkpoints are written in little-endian order");

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'F', 'H', 'M', 'R', 'C', 'K', 'P', 'T'};

void copy_tensors(const std::map<std::string, Tensor>& from, bool buffer, std::map<std::string, StoredTensor>& to) {
  for (const auto& [name, t] : from) {
    const auto v = t.values();
    to[name] = StoredTensor{t.shape(), std::vector<double>(v.begin(), v.end()), buffer};
  }
}

}  // namespace

Checkpoint capture(const HumanModel& model, const RunConfig& config, int64_t step, int epoch) {
  if (!same_model(config.model, model.config())) throw CheckpointError("run configuration does not describe this model");
  if (config.seed != model.seed()) throw CheckpointError("run seed does not match the model seed");
  Checkpoint c;
  c.config = config;
  c.asset = model.asset();
  c.step = step;
  c.epoch = epoch;
  copy_tensors(model.store().parameters(), false, c.tensors);
  copy_tensors(model.store().buffers(), true, c.tensors);
  return c;
}

void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  json tensors = json::array();
  for (const auto& [name, t] : c.tensors) {
    if (static_cast<int64_t>(t.values.size()) != numel_of(t.shape))
      throw CheckpointError("tensor " + name + " has the wrong number of values");
    tensors.push_back({{"name", name}, {"shape", t.shape}, {"kind", t.buffer ? "buffer" : "parameter"}});
  }
  const json header{{"config", to_text(c.config)},
                    {"asset", body::asset_to_json(c.asset)},
                    {"step", c.step},
                    {"epoch", c.epoch},
                    {"tensors", tensors}};
  const std::string text = header.dump();
  const uint64_t length = text.size();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&kCheckpointFormatVersion), sizeof(kCheckpointFormatVersion));
    out.write(reinterpret_cast<const char*>(&length), sizeof(length));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : c.tensors)
      out.write(reinterpret_cast<const char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  uint32_t version = 0;
  uint64_t length = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint file");
  if (version != kCheckpointFormatVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported");
  if (length > (1ull << 32)) throw CheckpointError("checkpoint header is implausibly large");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw CheckpointError("checkpoint header is truncated");

  Checkpoint c;
  try {
    const json header = json::parse(text);
    c.config = parse_config(header.at("config").get<std::string>());
    c.asset = body::asset_from_json(header.at("asset").get<std::string>(), path.string());
    c.step = header.at("step").get<int64_t>();
    c.epoch = header.at("epoch").get<int>();
    for (const auto& t : header.at("tensors")) {
      StoredTensor s;
      s.shape = t.at("shape").get<Shape>();
      s.buffer = t.at("kind").get<std::string>() == "buffer";
      s.values.resize(static_cast<size_t>(numel_of(s.shape)));
      in.read(reinterpret_cast<char*>(s.values.data()), static_cast<std::streamsize>(s.values.size() * sizeof(double)));
      if (!in) throw CheckpointError("checkpoint data is truncated at " + t.at("name").get<std::string>());
      c.tensors[t.at("name").get<std::string>()] = std::move(s);
    }
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint header: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint configuration: " + std::string(e.what()));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("unexpected bytes after checkpoint data");
  return c;
}

std::vector<std::string> restore(HumanModel& model, const Checkpoint& c, bool skip_mismatched) {
  std::vector<std::string> skipped;
  auto load = [&](const std::map<std::string, Tensor>& targets, bool buffer) {
    for (const auto& [name, t] : targets) {
      const auto it = c.tensors.find(name);
      if (it == c.tensors.end() || it->second.buffer != buffer)
        throw CheckpointError("checkpoint has no " + std::string(buffer ? "buffer " : "parameter ") + name);
      if (it->second.shape != t.shape()) {
        if (!skip_mismatched)
          throw CheckpointError("shape mismatch for " + name + ": checkpoint " + shape_str(it->second.shape) +
                                ", model " + shape_str(t.shape()));
        skipped.push_back(name);
        continue;
      }
      std::copy(it->second.values.begin(), it->second.values.end(), t.mutable_values().begin());
    }
  };
  load(model.store().parameters(), false);
  load(model.store().buffers(), true);
  const size_t expected = model.store().parameters().size() + model.store().buffers().size();
  if (c.tensors.size() != expected) throw CheckpointError("checkpoint holds tensors this model does not have");
  return skipped;
}

std::unique_ptr<HumanModel> instantiate(const Checkpoint& c) {
  auto model = std::make_unique<HumanModel>(c.config.model, c.asset, c.config.seed);
  restore(*model, c);
  return model;
}

}  // namespace fhmr
