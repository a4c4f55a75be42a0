#pragma once

// Image encoder, foreground attention, the latent-conditioned feature field
// and volume rendering of a feature map for a viewing direction.

#include <random>
#include <string>
#include <vector>

#include "fhmr/camera_rays.hpp"
#include "fhmr/nn.hpp"
#include "fhmr/tensor.hpp"

namespace fhmr {

// Blocks of a stride-2 and a stride-1 3x3 conv, each with batch norm and
// ReLU, down to at least 7x7, then a valid conv to exactly 7x7 with batch
// norm and no ReLU. Images are [N, 3, S, S]; the output is
// [N, channels, 7, 7].
class ImageEncoder {
 public:
  static constexpr int kGrid = 7;

  ImageEncoder() = default;
  ImageEncoder(ParameterStore& store, const std::string& name, int image_size, int channels, std::mt19937_64& rng);
  Tensor operator()(const Tensor& images, bool training);

  int image_size() const { return image_size_; }
  int stride_blocks() const { return static_cast<int>(convs_.size() - 1) / 2; }

 private:
  int image_size_ = 0;
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm2d> norms_;
};

// Spatial attention from channel-wise mean and max, a 7x7 conv and a sigmoid.
class ForegroundAttention {
 public:
  ForegroundAttention() = default;
  ForegroundAttention(ParameterStore& store, const std::string& name, bool enabled, std::mt19937_64& rng);

  bool enabled() const { return enabled_; }
  // [N, C, H, W] -> [N, 1, H, W] in (0, 1).
  Tensor attention_map(const Tensor& grid) const;
  // [N, C, H, W] -> [N, C]; plain spatial mean when disabled.
  Tensor operator()(const Tensor& grid) const;

 private:
  bool enabled_ = true;
  Conv2d conv_;
};

// Mean over the spatial cells of map * grid; map is [N, 1, H, W].
Tensor pool_with_map(const Tensor& grid, const Tensor& map);

struct FieldOutput {
  Tensor sigma;    // [N, R, S], non-negative
  Tensor feature;  // [N, R, S, M]
};

// h(gamma(x), gamma(r), z): density from the point and latent only; the
// feature additionally sees the ray direction.
class FeatureField {
 public:
  FeatureField() = default;
  FeatureField(ParameterStore& store, const std::string& name, int point_width, int direction_width,
               int latent_width, int hidden_width, int hidden_layers, int feature_width, std::mt19937_64& rng);

  // points: [N, R, S, point_width], directions: [N, R, direction_width], latent: [N, latent_width].
  FieldOutput operator()(const Tensor& points, const Tensor& directions, const Tensor& latent) const;

  int point_width() const { return point_width_; }
  int direction_width() const { return direction_width_; }
  int latent_width() const { return latent_width_; }
  int feature_width() const { return feature_width_; }

 private:
  int point_width_ = 0, direction_width_ = 0, latent_width_ = 0, feature_width_ = 0;
  Tensor input_points_, input_latent_, input_bias_;
  std::vector<Linear> hidden_;
  Linear sigma_head_;
  Linear view_hidden_;
  Tensor view_direction_;
  Linear feature_head_;
};

// Weights tau_n * alpha_n with alpha_n = 1 - exp(-sigma_n delta_n) and
// tau_n = prod_{k<n} (1 - alpha_k), for one ray.
std::vector<double> compositing_weights(const std::vector<double>& sigma, const std::vector<double>& delta);

// sigma, delta: [..., S]; features: [..., S, M] -> [..., M] = sum_n w_n f_n.
// delta is treated as a constant.
Tensor composite(const Tensor& sigma, const Tensor& delta, const Tensor& features);

// Constant per-view inputs: encoded sample points, ray directions and deltas.
struct RenderInputs {
  int height = 0, width = 0, samples = 0;
  Tensor points;      // [N, R, S, 6(Lx+1)]
  Tensor directions;  // [N, R, 6(Lr+1)]
  Tensor deltas;      // [N, R, S]
};

struct RenderSettings {
  int height = 4, width = 4;
  int samples = 32;
  int point_octaves = 10;
  int direction_octaves = 4;
  rays::OrbitGeometry geometry;
};

// One view per batch entry. Positions are divided by the bounding radius
// before encoding.
RenderInputs prepare_views(const std::vector<double>& phis, const RenderSettings& settings, bool stratified,
                           std::mt19937_64& rng);

// Composites the field along every ray -> [N, M, H, W].
Tensor volume_render(const FeatureField& field, const Tensor& latent, const RenderInputs& inputs);

enum class Aggregation { kGap, kConv, kDepthwise };

std::string to_string(Aggregation mode);
Aggregation parse_aggregation(const std::string& text);

// Collapses a [N, C, H, W] map to [N, C].
class Aggregator {
 public:
  Aggregator() = default;
  Aggregator(ParameterStore& store, const std::string& name, Aggregation mode, int channels, int height, int width,
             std::mt19937_64& rng);
  Tensor operator()(const Tensor& map) const;
  Aggregation mode() const { return mode_; }

 private:
  Aggregation mode_ = Aggregation::kDepthwise;
  int channels_ = 0, cells_ = 0;
  Tensor weight_;  // depthwise [C, H*W]; conv [C*H*W, C]
  Tensor bias_;
};

}  // namespace fhmr
