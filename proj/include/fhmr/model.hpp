#pragma once

// The full network: encoder, foreground attention, feature field, volume
// rendering for a viewing direction, aggregation, regression, the body
// model and (training only) the silhouette decoder.

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fhmr/body_model.hpp"
#include "fhmr/feature_fields.hpp"
#include "fhmr/nn.hpp"
#include "fhmr/regression_heads.hpp"

namespace fhmr {

struct ModelConfig {
  int image_size = 64;
  int channels = 128;
  int field_width = 128;
  int field_layers = 4;
  int samples_per_ray = 32;
  int feature_map_res = 4;
  int point_octaves = 10;
  int direction_octaves = 4;
  Aggregation aggregation = Aggregation::kDepthwise;
  bool attention = true;
  int regressor_iterations = 3;
  int regressor_width = 256;
  rays::OrbitGeometry geometry;

  void validate() const;
  RenderSettings render_settings() const;
  int silhouette_size() const { return feature_map_res << SilhouetteDecoder::kStages; }
};

// Everything predicted for one batch of views.
struct ViewPrediction {
  std::vector<double> phis;
  Tensor feature_map;   // [N, C, h, w]
  Tensor view_feature;  // [N, C]
  RegressedParams params;
  Tensor vertices;      // [N, V, 3]
  Tensor joints3d;      // [N, Nj, 3]
  Tensor keypoints2d;   // [N, Nj, 2]
  Tensor silhouette;    // [N, 1, s, s]; undefined unless requested
};

class HumanModel {
 public:
  HumanModel(const ModelConfig& config, const body::BodyModelAsset& asset, uint64_t seed);
  HumanModel(const HumanModel&) = delete;
  HumanModel& operator=(const HumanModel&) = delete;

  const ModelConfig& config() const { return config_; }
  const body::BodyModelAsset& asset() const { return *asset_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }

  // images: [N, 3, S, S] in [0, 1] -> foreground latent [N, C].
  Tensor encode(const Tensor& images, bool training);

  // Renders and regresses one view per entry of `phis`; view b uses latent
  // row rows[b]. Training mode uses stratified samples and batch statistics.
  ViewPrediction view(const Tensor& latent, const std::vector<int64_t>& rows, const std::vector<double>& phis,
                      bool training, bool with_silhouette, std::mt19937_64& rng);

  // Test-time path: canonical direction, deterministic sampling, no decoder.
  ViewPrediction infer(const Tensor& images);

  // Same as infer but at the given directions for a single image.
  ViewPrediction infer_views(const Tensor& image, const std::vector<double>& phis);

  // Number of silhouette decoder evaluations so far.
  int64_t decoder_calls() const { return decoder_calls_; }
  uint64_t seed() const { return seed_; }

 private:
  ModelConfig config_;
  std::shared_ptr<const body::BodyModelAsset> asset_;
  ParameterStore store_;
  uint64_t seed_;
  ImageEncoder encoder_;
  ForegroundAttention attention_;
  FeatureField field_;
  Aggregator aggregator_;
  Regressor regressor_;
  std::unique_ptr<body::DifferentiableBody> body_;
  SilhouetteDecoder decoder_;
  int64_t decoder_calls_ = 0;
};

// [N, S, S, 3] bytes in row-major HWC -> [N, 3, S, S] in [0, 1].
Tensor images_to_tensor(const std::vector<const std::vector<uint8_t>*>& images, int size);

}  // namespace fhmr
