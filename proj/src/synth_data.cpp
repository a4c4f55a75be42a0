#include "fhmr/synth_data.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <Eigen/Geometry>

#include "fhmr/rasterizer.hpp"

namespace fhmr::synth {

static_assert(std::endian::native == std::endian::little, "dataset files are written in little-endian order");

namespace {

constexpr char kMagic[8] = {'F', 'H', 'M', 'R', 'D', 'A', 'T', 'A'};

uint8_t to_byte(double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

uint32_t crc_of(const std::string& bytes) {
  return static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void doubles(const double* p, size_t n) { bytes(p, n * sizeof(double)); }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::string context) : buf_(buf), context_(std::move(context)) {}
  template <typename T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* p, size_t n) {
    if (pos_ + n > buf_.size()) throw DatasetError(context_ + ": unexpected end of data");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  void doubles(double* p, size_t n) { bytes(p, n * sizeof(double)); }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::string context_;
  size_t pos_ = 0;
};

struct Sizes {
  uint32_t vertices = 0, joints = 0, regressed = 0, shape = 0;
};

std::string encode_record(const LabeledExample& e, uint32_t index, uint8_t split) {
  Writer w;
  w.put(index);
  w.put(split);
  w.put<uint8_t>(e.has_3d ? 1 : 0);
  w.bytes(e.image.data(), e.image.size());
  w.doubles(e.keypoints2d.data(), static_cast<size_t>(e.keypoints2d.size()));
  if (e.has_3d) {
    w.doubles(e.joints3d.data(), static_cast<size_t>(e.joints3d.size()));
    w.doubles(e.pose_theta.data(), static_cast<size_t>(e.pose_theta.size()));
    w.doubles(e.shape_beta.data(), static_cast<size_t>(e.shape_beta.size()));
    w.doubles(e.vertices.data(), static_cast<size_t>(e.vertices.size()));
  }
  return w.str();
}

std::mt19937_64 example_rng(uint64_t seed, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(index),
                    static_cast<uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

void DatasetManifest::validate() const {
  if (n_train < 1 || n_val < 1) throw std::invalid_argument("dataset counts must be at least 1");
  if (!(fraction_3d >= 0.0 && fraction_3d <= 1.0)) throw std::invalid_argument("fraction_3d must be in [0, 1]");
  if (image_size < 7) throw std::invalid_argument("image_size must be at least 7");
}

std::vector<uint8_t> render_image(const body::BodyModelAsset& asset, const body::Points3& vertices,
                                  const body::Camera& camera, int image_size) {
  const body::Points2 projected = body::project(vertices, camera);
  body::Points3 screen(vertices.rows(), 3);
  screen.leftCols<2>() = projected;
  screen.col(2) = vertices.col(2);
  const auto buf = raster::rasterize_depth(screen, asset.faces, image_size);

  // Per face: flat shading from the posed normal and the dominant joint.
  const int k = asset.num_joints();
  std::vector<double> shade(asset.faces.size()), part(asset.faces.size());
  for (size_t f = 0; f < asset.faces.size(); ++f) {
    const auto& t = asset.faces[f];
    const Eigen::Vector3d a = vertices.row(t[0]), b = vertices.row(t[1]), c = vertices.row(t[2]);
    const Eigen::Vector3d n = (b - a).cross(c - a);
    shade[f] = n.norm() > 0 ? 0.25 + 0.75 * std::abs(n.normalized().z()) : 0.25;
    Eigen::Index best = 0;
    (asset.skinning_weights.row(t[0]) + asset.skinning_weights.row(t[1]) + asset.skinning_weights.row(t[2]))
        .maxCoeff(&best);
    part[f] = (best + 1.0) / k;
  }

  std::vector<uint8_t> img(static_cast<size_t>(image_size) * image_size * 3, 0);
  for (size_t p = 0; p < buf.face.size(); ++p) {
    const int f = buf.face[p];
    if (f < 0) continue;
    img[p * 3 + 0] = to_byte(shade[f]);
    img[p * 3 + 1] = to_byte(0.5 + 0.5 * buf.depth[p] / 1.2);
    img[p * 3 + 2] = to_byte(part[f]);
  }
  return img;
}

LabeledExample sample_example(const body::BodyModelAsset& asset, int image_size, double fraction_3d,
                              std::mt19937_64& rng, const SamplingRanges& ranges) {
  std::normal_distribution<double> normal(0.0, ranges.shape_sd);
  std::uniform_real_distribution<double> joint(-ranges.joint_limit, ranges.joint_limit);
  std::uniform_real_distribution<double> yaw(-ranges.root_yaw_limit, ranges.root_yaw_limit);
  std::uniform_real_distribution<double> jitter(-ranges.translation_jitter, ranges.translation_jitter);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  body::BodyParams p = body::BodyParams::zeros(asset);
  for (int b = 0; b < p.shape_beta.size(); ++b) p.shape_beta[b] = normal(rng);
  p.pose_theta[1] = yaw(rng);
  for (int i = 3; i < p.pose_theta.size(); ++i) p.pose_theta[i] = joint(rng);
  p.camera = {ranges.camera_scale, jitter(rng), jitter(rng)};
  const bool with_3d = unit(rng) < fraction_3d;

  const auto out = body::forward(asset, p);
  LabeledExample e;
  e.image_size = image_size;
  e.image = render_image(asset, out.vertices, p.camera, image_size);
  e.keypoints2d = out.keypoints2d;
  e.has_3d = with_3d;
  if (with_3d) {
    e.joints3d = out.joints3d;
    e.pose_theta = p.pose_theta;
    e.shape_beta = p.shape_beta;
    e.vertices = out.vertices;
  }
  return e;
}

Dataset generate_dataset(const DatasetManifest& manifest, const body::BodyModelAsset& asset) {
  manifest.validate();
  Dataset d;
  d.manifest = manifest;
  d.manifest.asset_id = asset.content_hash();
  d.manifest.format_version = kDatasetFormatVersion;
  const int total = manifest.n_train + manifest.n_val;
  for (int i = 0; i < total; ++i) {
    auto rng = example_rng(manifest.seed, static_cast<uint64_t>(i));
    auto e = sample_example(asset, manifest.image_size, manifest.fraction_3d, rng);
    (i < manifest.n_train ? d.train : d.val).push_back(std::move(e));
  }
  return d;
}

void write_dataset(const Dataset& d, const std::filesystem::path& path) {
  const auto& m = d.manifest;
  m.validate();
  if (static_cast<int>(d.train.size()) != m.n_train || static_cast<int>(d.val.size()) != m.n_val)
    throw std::invalid_argument("dataset counts disagree with the manifest");
  const LabeledExample& first = d.train.front();
  Sizes sizes;
  sizes.regressed = static_cast<uint32_t>(first.keypoints2d.rows());
  for (const auto* split : {&d.train, &d.val})
    for (const auto& e : *split)
      if (e.has_3d) {
        sizes.vertices = static_cast<uint32_t>(e.vertices.rows());
        sizes.joints = static_cast<uint32_t>(e.pose_theta.size() / 3);
        sizes.shape = static_cast<uint32_t>(e.shape_beta.size());
      }

  Writer h;
  h.bytes(kMagic, sizeof(kMagic));
  h.put(m.format_version);
  h.put(m.seed);
  h.put(static_cast<uint32_t>(m.n_train));
  h.put(static_cast<uint32_t>(m.n_val));
  h.put(static_cast<uint32_t>(m.image_size));
  h.put(m.fraction_3d);
  h.put(static_cast<uint32_t>(m.asset_id.size()));
  h.bytes(m.asset_id.data(), m.asset_id.size());
  h.put(sizes.vertices);
  h.put(sizes.joints);
  h.put(sizes.regressed);
  h.put(sizes.shape);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open " + path.string() + " for writing");
  const uint32_t header_crc = crc_of(h.str());
  out.write(h.str().data(), static_cast<std::streamsize>(h.str().size()));
  out.write(reinterpret_cast<const char*>(&header_crc), sizeof(header_crc));
  uint32_t index = 0;
  for (uint8_t split = 0; split < 2; ++split) {
    for (const auto& e : split == 0 ? d.train : d.val) {
      if (e.image_size != m.image_size) throw std::invalid_argument("example image size differs from the manifest");
      const std::string payload = encode_record(e, index++, split);
      const uint32_t len = static_cast<uint32_t>(payload.size());
      const uint32_t crc = crc_of(payload);
      out.write(reinterpret_cast<const char*>(&len), sizeof(len));
      out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
      out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    }
  }
  if (!out) throw DatasetError("failed writing " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path, const body::BodyModelAsset* asset) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Reader r(buf, "dataset header");
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw DatasetError(path.string() + " is not a dataset file");
  Dataset d;
  auto& m = d.manifest;
  m.format_version = r.get<uint32_t>();
  if (m.format_version != kDatasetFormatVersion)
    throw DatasetError("dataset format version " + std::to_string(m.format_version) + " is not supported (expected " +
                       std::to_string(kDatasetFormatVersion) + ")");
  m.seed = r.get<uint64_t>();
  m.n_train = static_cast<int>(r.get<uint32_t>());
  m.n_val = static_cast<int>(r.get<uint32_t>());
  m.image_size = static_cast<int>(r.get<uint32_t>());
  m.fraction_3d = r.get<double>();
  m.asset_id.resize(r.get<uint32_t>());
  r.bytes(m.asset_id.data(), m.asset_id.size());
  Sizes sizes;
  sizes.vertices = r.get<uint32_t>();
  sizes.joints = r.get<uint32_t>();
  sizes.regressed = r.get<uint32_t>();
  sizes.shape = r.get<uint32_t>();
  const size_t header_end = 8 + 4 + 8 + 4 * 3 + 8 + 4 + m.asset_id.size() + 4 * 4;
  const uint32_t stored_header_crc = r.get<uint32_t>();
  if (stored_header_crc != crc_of(buf.substr(0, header_end))) throw DatasetError("dataset header checksum mismatch");
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw DatasetError(std::string("invalid dataset manifest: ") + e.what());
  }
  if (asset) {
    if (asset->content_hash() != m.asset_id)
      throw DatasetError("dataset was generated with body asset " + m.asset_id + ", not " + asset->content_hash());
  }

  const size_t image_bytes = static_cast<size_t>(m.image_size) * m.image_size * 3;
  const int total = m.n_train + m.n_val;
  for (int i = 0; i < total; ++i) {
    const std::string where = "record " + std::to_string(i);
    const uint32_t len = r.get<uint32_t>();
    std::string payload(len, '\0');
    try {
      r.bytes(payload.data(), len);
    } catch (const DatasetError&) {
      throw DatasetError(where + ": truncated");
    }
    uint32_t crc = 0;
    try {
      crc = r.get<uint32_t>();
    } catch (const DatasetError&) {
      throw DatasetError(where + ": truncated");
    }
    if (crc != crc_of(payload)) throw DatasetError(where + ": checksum mismatch");

    Reader p(payload, where);
    LabeledExample e;
    const uint32_t index = p.get<uint32_t>();
    const uint8_t split = p.get<uint8_t>();
    if (index != static_cast<uint32_t>(i) || split != (i < m.n_train ? 0 : 1))
      throw DatasetError(where + ": out of order");
    e.has_3d = p.get<uint8_t>() != 0;
    e.image_size = m.image_size;
    e.image.resize(image_bytes);
    p.bytes(e.image.data(), image_bytes);
    e.keypoints2d.resize(sizes.regressed, 2);
    p.doubles(e.keypoints2d.data(), static_cast<size_t>(e.keypoints2d.size()));
    if (e.has_3d) {
      e.joints3d.resize(sizes.regressed, 3);
      p.doubles(e.joints3d.data(), static_cast<size_t>(e.joints3d.size()));
      e.pose_theta.resize(3 * sizes.joints);
      p.doubles(e.pose_theta.data(), static_cast<size_t>(e.pose_theta.size()));
      e.shape_beta.resize(sizes.shape);
      p.doubles(e.shape_beta.data(), static_cast<size_t>(e.shape_beta.size()));
      e.vertices.resize(sizes.vertices, 3);
      p.doubles(e.vertices.data(), static_cast<size_t>(e.vertices.size()));
    }
    if (!p.done()) throw DatasetError(where + ": unexpected trailing bytes");
    if (asset) {
      try {
        e.validate(*asset);
      } catch (const std::invalid_argument& err) {
        throw DatasetError(where + ": " + err.what());
      }
    }
    (i < m.n_train ? d.train : d.val).push_back(std::move(e));
  }
  if (!r.done()) throw DatasetError("unexpected bytes after the last record");
  return d;
}

}  // namespace fhmr::synth
