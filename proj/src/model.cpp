#include "fhmr/model.hpp"

#include <numeric>
#include <stdexcept>

namespace fhmr {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

// Independent initialization stream per component, so that toggling one
// component leaves the others' initial weights unchanged.
std::mt19937_64 component_rng(uint64_t seed, uint64_t component) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(component)};
  return std::mt19937_64(seq);
}

}  // namespace

void ModelConfig::validate() const {
  require(image_size >= ImageEncoder::kGrid, "image_size must be at least 7");
  require(channels >= 1, "channels must be positive");
  require(field_width >= 1 && field_layers >= 1, "field width and depth must be positive");
  require(samples_per_ray >= 2, "samples_per_ray must be at least 2");
  require(feature_map_res >= 1, "feature_map_res must be positive");
  require(point_octaves >= 0 && direction_octaves >= 0, "octaves must be non-negative");
  require(regressor_iterations >= 1 && regressor_width >= 1, "regressor iterations and width must be positive");
  geometry.validate();
}

RenderSettings ModelConfig::render_settings() const {
  RenderSettings s;
  s.height = s.width = feature_map_res;
  s.samples = samples_per_ray;
  s.point_octaves = point_octaves;
  s.direction_octaves = direction_octaves;
  s.geometry = geometry;
  return s;
}

HumanModel::HumanModel(const ModelConfig& config, const body::BodyModelAsset& asset, uint64_t seed)
    : config_(config), asset_(std::make_shared<const body::BodyModelAsset>(asset)), seed_(seed) {
  config_.validate();
  asset_->validate();
  const int c = config_.channels;
  auto rng = component_rng(seed, 0);
  encoder_ = ImageEncoder(store_, "encoder", config_.image_size, c, rng);
  rng = component_rng(seed, 1);
  attention_ = ForegroundAttention(store_, "attention", config_.attention, rng);
  rng = component_rng(seed, 2);
  field_ = FeatureField(store_, "field", rays::encoded_width(config_.point_octaves),
                        rays::encoded_width(config_.direction_octaves), c, config_.field_width, config_.field_layers, c,
                        rng);
  rng = component_rng(seed, 3);
  aggregator_ = Aggregator(store_, "aggregation", config_.aggregation, c, config_.feature_map_res,
                           config_.feature_map_res, rng);
  rng = component_rng(seed, 4);
  regressor_ = Regressor(store_, "regressor", c, asset_->num_joints(), asset_->num_shape_coeffs(),
                         config_.regressor_width, config_.regressor_iterations, rng);
  rng = component_rng(seed, 5);
  decoder_ = SilhouetteDecoder(store_, "decoder", c, config_.feature_map_res, rng);
  body_ = std::make_unique<body::DifferentiableBody>(*asset_);
}

Tensor HumanModel::encode(const Tensor& images, bool training) { return attention_(encoder_(images, training)); }

ViewPrediction HumanModel::view(const Tensor& latent, const std::vector<int64_t>& rows, const std::vector<double>& phis,
                                bool training, bool with_silhouette, std::mt19937_64& rng) {
  require(rows.size() == phis.size() && !rows.empty(), "one latent row per viewing direction is required");
  ViewPrediction out;
  out.phis = phis;
  bool identity = static_cast<int64_t>(rows.size()) == latent.dim(0);
  for (size_t i = 0; identity && i < rows.size(); ++i) identity = rows[i] == static_cast<int64_t>(i);
  const Tensor z = identity ? latent : ops::index_rows(latent, rows);
  const RenderInputs inputs = prepare_views(phis, config_.render_settings(), training, rng);
  out.feature_map = volume_render(field_, z, inputs);
  out.view_feature = aggregator_(out.feature_map);
  out.params = regressor_(out.view_feature);
  const auto mesh = (*body_)(out.params.rotations, out.params.shape);
  out.vertices = mesh.vertices;
  out.joints3d = mesh.joints3d;
  out.keypoints2d = body::project_batched(mesh.joints3d, out.params.camera);
  if (with_silhouette) {
    out.silhouette = decoder_(out.feature_map, training);
    ++decoder_calls_;
  }
  return out;
}

ViewPrediction HumanModel::infer(const Tensor& images) {
  const Tensor latent = encode(images, false);
  std::vector<int64_t> rows(static_cast<size_t>(latent.dim(0)));
  std::iota(rows.begin(), rows.end(), 0);
  std::mt19937_64 unused(0);
  return view(latent, rows, std::vector<double>(rows.size(), 0.0), false, false, unused);
}

ViewPrediction HumanModel::infer_views(const Tensor& image, const std::vector<double>& phis) {
  require(image.dim(0) == 1, "infer_views takes a single image");
  const Tensor latent = encode(image, false);
  std::mt19937_64 unused(0);
  return view(latent, std::vector<int64_t>(phis.size(), 0), phis, false, false, unused);
}

Tensor images_to_tensor(const std::vector<const std::vector<uint8_t>*>& images, int size) {
  const int64_t n = static_cast<int64_t>(images.size());
  const int64_t plane = static_cast<int64_t>(size) * size;
  std::vector<double> v(static_cast<size_t>(n * 3 * plane));
  for (int64_t b = 0; b < n; ++b) {
    const auto& img = *images[b];
    require(static_cast<int64_t>(img.size()) == plane * 3, "image byte count does not match the image size");
    for (int64_t p = 0; p < plane; ++p)
      for (int c = 0; c < 3; ++c) v[(b * 3 + c) * plane + p] = img[p * 3 + c] / 255.0;
  }
  return Tensor({n, 3, size, size}, std::move(v));
}

}  // namespace fhmr
