#include "fhmr/feature_fields.hpp"

#include <cmath>
#include <stdexcept>

namespace fhmr {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

}  // namespace

ImageEncoder::ImageEncoder(ParameterStore& store, const std::string& name, int image_size, int channels,
                           std::mt19937_64& rng)
    : image_size_(image_size) {
  require(image_size >= kGrid, "image size must be at least 7");
  require(channels >= 1, "encoder channels must be positive");
  int size = image_size, blocks = 0;
  while ((size + 1) / 2 >= kGrid) {
    size = (size + 1) / 2;
    ++blocks;
  }
  int in = 3;
  for (int b = 0; b < blocks; ++b) {
    const int out = std::max(1, channels >> (blocks - 1 - b));
    const std::string block = name + ".block" + std::to_string(b);
    convs_.emplace_back(store, block + ".conv", in, out, 3, 2, 1, rng);
    norms_.emplace_back(store, block + ".norm", out);
    convs_.emplace_back(store, block + ".conv2", out, out, 3, 1, 1, rng);
    norms_.emplace_back(store, block + ".norm2", out);
    in = out;
  }
  const std::string last = name + ".block" + std::to_string(blocks);
  convs_.emplace_back(store, last + ".conv", in, channels, size - kGrid + 1, 1, 0, rng);
  norms_.emplace_back(store, last + ".norm", channels);
}

Tensor ImageEncoder::operator()(const Tensor& images, bool training) {
  require(images.rank() == 4 && images.dim(1) == 3 && images.dim(2) == image_size_ && images.dim(3) == image_size_,
          "encoder expects images of shape [N, 3, " + std::to_string(image_size_) + ", " +
              std::to_string(image_size_) + "], got " + shape_str(images.shape()));
  Tensor x = images;
  for (size_t i = 0; i < convs_.size(); ++i) {
    x = norms_[i](convs_[i](x), training);
    if (i + 1 < convs_.size()) x = ops::relu(x);
  }
  return x;
}

ForegroundAttention::ForegroundAttention(ParameterStore& store, const std::string& name, bool enabled,
                                         std::mt19937_64& rng)
    : enabled_(enabled) {
  if (enabled_) conv_ = Conv2d(store, name + ".conv", 2, 1, 7, 1, 3, rng);
}

Tensor ForegroundAttention::attention_map(const Tensor& grid) const {
  require(enabled_, "attention is disabled");
  const Shape s = grid.shape();
  const Tensor avg = ops::reshape(ops::mean_axis(grid, 1), {s[0], 1, s[2], s[3]});
  const Tensor max = ops::reshape(ops::max_axis(grid, 1), {s[0], 1, s[2], s[3]});
  return ops::sigmoid(conv_(ops::concat({avg, max}, 1)));
}

Tensor ForegroundAttention::operator()(const Tensor& grid) const {
  require(grid.rank() == 4, "attention expects [N, C, H, W]");
  if (!enabled_) {
    const Shape s = grid.shape();
    return ops::mean_axis(ops::reshape(grid, {s[0], s[1], s[2] * s[3]}), 2);
  }
  return pool_with_map(grid, attention_map(grid));
}

Tensor pool_with_map(const Tensor& grid, const Tensor& map) {
  const Shape s = grid.shape();
  return ops::mean_axis(ops::reshape(ops::mul(grid, map), {s[0], s[1], s[2] * s[3]}), 2);
}

FeatureField::FeatureField(ParameterStore& store, const std::string& name, int point_width, int direction_width,
                           int latent_width, int hidden_width, int hidden_layers, int feature_width,
                           std::mt19937_64& rng)
    : point_width_(point_width),
      direction_width_(direction_width),
      latent_width_(latent_width),
      feature_width_(feature_width) {
  require(hidden_layers >= 1, "field needs at least one hidden layer");
  // The first layer acts on the concatenation (gamma(x), z); its weight is
  // stored as the two row blocks.
  const double fan_in = point_width + latent_width;
  input_points_ = store.add_parameter(name + ".input.points", uniform_init({point_width, hidden_width}, fan_in, rng));
  input_latent_ = store.add_parameter(name + ".input.latent", uniform_init({latent_width, hidden_width}, fan_in, rng));
  input_bias_ = store.add_parameter(name + ".input.bias", uniform_init({hidden_width}, fan_in, rng));
  for (int l = 1; l < hidden_layers; ++l)
    hidden_.emplace_back(store, name + ".hidden" + std::to_string(l), hidden_width, hidden_width, rng);
  sigma_head_ = Linear(store, name + ".sigma", hidden_width, 1, rng);
  const double view_fan_in = hidden_width + direction_width;
  view_hidden_ = Linear(store, name + ".view.hidden", hidden_width, hidden_width, rng);
  view_direction_ =
      store.add_parameter(name + ".view.direction", uniform_init({direction_width, hidden_width}, view_fan_in, rng));
  feature_head_ = Linear(store, name + ".feature", hidden_width, feature_width, rng);
}

FieldOutput FeatureField::operator()(const Tensor& points, const Tensor& directions, const Tensor& latent) const {
  require(points.rank() == 4 && points.dim(3) == point_width_, "field point encoding width mismatch: got " +
                                                                   shape_str(points.shape()) + ", want last dim " +
                                                                   std::to_string(point_width_));
  const int64_t n = points.dim(0), r = points.dim(1), s = points.dim(2);
  require(directions.rank() == 3 && directions.dim(0) == n && directions.dim(1) == r &&
              directions.dim(2) == direction_width_,
          "field direction encoding width mismatch: got " + shape_str(directions.shape()));
  require(latent.rank() == 2 && latent.dim(0) == n && latent.dim(1) == latent_width_,
          "field latent width mismatch: got " + shape_str(latent.shape()));
  const int64_t width = input_bias_.dim(0);

  const Tensor from_points = ops::reshape(ops::matmul(ops::reshape(points, {n * r * s, point_width_}), input_points_),
                                          {n, r * s, width});
  const Tensor from_latent =
      ops::reshape(ops::add(ops::matmul(latent, input_latent_), input_bias_), {n, 1, width});
  Tensor h = ops::relu(ops::add(from_points, from_latent));
  for (const auto& layer : hidden_) h = ops::relu(layer(h));

  FieldOutput out;
  out.sigma = ops::reshape(ops::softplus(sigma_head_(h)), {n, r, s});
  const Tensor view = ops::reshape(view_hidden_(h), {n, r, s, width});
  const Tensor from_direction =
      ops::reshape(ops::matmul(ops::reshape(directions, {n * r, direction_width_}), view_direction_), {n, r, 1, width});
  out.feature = feature_head_(ops::relu(ops::add(view, from_direction)));
  return out;
}

std::vector<double> compositing_weights(const std::vector<double>& sigma, const std::vector<double>& delta) {
  require(sigma.size() == delta.size(), "sigma and delta lengths differ");
  std::vector<double> w(sigma.size());
  double transmittance = 1.0;
  for (size_t n = 0; n < sigma.size(); ++n) {
    const double alpha = -std::expm1(-sigma[n] * delta[n]);
    w[n] = transmittance * alpha;
    transmittance *= 1.0 - alpha;
  }
  return w;
}

Tensor composite(const Tensor& sigma, const Tensor& delta, const Tensor& features) {
  require(sigma.shape() == delta.shape(), "sigma and delta shapes differ");
  require(features.rank() == sigma.rank() + 1, "features need one more axis than sigma");
  for (int i = 0; i < sigma.rank(); ++i) require(features.dim(i) == sigma.dim(i), "features and sigma disagree");
  const int64_t samples = sigma.dim(sigma.rank() - 1);
  const int64_t m = features.dim(features.rank() - 1);
  const int64_t rays = sigma.numel() / samples;

  // Per sample: weight w_n and transmittance after the sample, T_{n+1}.
  auto weights = std::make_shared<std::vector<double>>(static_cast<size_t>(rays * samples));
  auto after = std::make_shared<std::vector<double>>(static_cast<size_t>(rays * samples));
  const auto sv = sigma.values();
  const auto dv = delta.values();
  const auto fv = features.values();
  std::vector<double> out(static_cast<size_t>(rays * m), 0.0);
  for (int64_t q = 0; q < rays; ++q) {
    double transmittance = 1.0;
    for (int64_t n = 0; n < samples; ++n) {
      const int64_t k = q * samples + n;
      const double alpha = -std::expm1(-sv[k] * dv[k]);
      const double w = transmittance * alpha;
      transmittance *= 1.0 - alpha;
      (*weights)[k] = w;
      (*after)[k] = transmittance;
      const double* f = &fv[k * m];
      double* o = &out[q * m];
      for (int64_t c = 0; c < m; ++c) o[c] += w * f[c];
    }
  }

  Shape out_shape(sigma.shape().begin(), sigma.shape().end() - 1);
  out_shape.push_back(m);
  return make_op_result(std::move(out_shape), std::move(out), {sigma, delta, features},
                        [weights, after, rays, samples, m](Node& self) {
                          Node& sig = *self.inputs[0];
                          Node& del = *self.inputs[1];
                          Node& feat = *self.inputs[2];
                          const auto& g = self.grad;
                          if (feat.requires_grad) {
                            auto& gf = feat.ensure_grad();
                            for (int64_t k = 0; k < rays * samples; ++k) {
                              const double w = (*weights)[k];
                              const double* gq = &g[(k / samples) * m];
                              double* dst = &gf[k * m];
                              for (int64_t c = 0; c < m; ++c) dst[c] += w * gq[c];
                            }
                          }
                          if (sig.requires_grad) {
                            auto& gs = sig.ensure_grad();
                            std::vector<double> proj(static_cast<size_t>(samples));
                            for (int64_t q = 0; q < rays; ++q) {
                              const double* gq = &g[q * m];
                              for (int64_t n = 0; n < samples; ++n) {
                                const double* f = &feat.value[(q * samples + n) * m];
                                double acc = 0.0;
                                for (int64_t c = 0; c < m; ++c) acc += gq[c] * f[c];
                                proj[n] = acc;
                              }
                              // d out.g / d sigma_j = delta_j (G_j T_{j+1} - sum_{n>j} G_n w_n)
                              double tail = 0.0;
                              for (int64_t n = samples; n-- > 0;) {
                                const int64_t k = q * samples + n;
                                gs[k] += del.value[k] * (proj[n] * (*after)[k] - tail);
                                tail += proj[n] * (*weights)[k];
                              }
                            }
                          }
                        });
}

RenderInputs prepare_views(const std::vector<double>& phis, const RenderSettings& settings, bool stratified,
                           std::mt19937_64& rng) {
  require(!phis.empty(), "need at least one view");
  const int64_t n = static_cast<int64_t>(phis.size());
  const int64_t r = static_cast<int64_t>(settings.height) * settings.width;
  const int64_t s = settings.samples;
  const int px = rays::encoded_width(settings.point_octaves);
  const int dx = rays::encoded_width(settings.direction_octaves);
  std::vector<double> points(static_cast<size_t>(n * r * s * px));
  std::vector<double> directions(static_cast<size_t>(n * r * dx));
  std::vector<double> deltas(static_cast<size_t>(n * r * s));
  const double inv_radius = 1.0 / settings.geometry.bounding_radius;
  for (int64_t b = 0; b < n; ++b) {
    const auto bundle = rays::make_rays(phis[b], settings.height, settings.width, settings.geometry);
    const auto samples = rays::sample_along(bundle, settings.samples, stratified, rng);
    for (int64_t q = 0; q < r; ++q) {
      rays::encode_vector(bundle.directions[q], settings.direction_octaves, &directions[(b * r + q) * dx]);
      for (int64_t k = 0; k < s; ++k) {
        const int64_t src = q * s + k;
        const int64_t dst = (b * r + q) * s + k;
        rays::encode_vector(samples.positions[src] * inv_radius, settings.point_octaves, &points[dst * px]);
        deltas[dst] = samples.deltas[src];
      }
    }
  }
  RenderInputs out;
  out.height = settings.height;
  out.width = settings.width;
  out.samples = settings.samples;
  out.points = Tensor({n, r, s, px}, std::move(points));
  out.directions = Tensor({n, r, dx}, std::move(directions));
  out.deltas = Tensor({n, r, s}, std::move(deltas));
  return out;
}

Tensor volume_render(const FeatureField& field, const Tensor& latent, const RenderInputs& inputs) {
  const FieldOutput f = field(inputs.points, inputs.directions, latent);
  const Tensor pixels = composite(f.sigma, inputs.deltas, f.feature);  // [N, R, M]
  const int64_t n = pixels.dim(0), m = pixels.dim(2);
  return ops::permute(ops::reshape(pixels, {n, inputs.height, inputs.width, m}), {0, 3, 1, 2});
}

std::string to_string(Aggregation mode) {
  switch (mode) {
    case Aggregation::kGap: return "gap";
    case Aggregation::kConv: return "conv";
    case Aggregation::kDepthwise: return "depthwise";
  }
  return "unknown";
}

Aggregation parse_aggregation(const std::string& text) {
  if (text == "gap") return Aggregation::kGap;
  if (text == "conv") return Aggregation::kConv;
  if (text == "depthwise") return Aggregation::kDepthwise;
  throw std::invalid_argument("unknown aggregation mode '" + text + "' (expected gap, conv or depthwise)");
}

Aggregator::Aggregator(ParameterStore& store, const std::string& name, Aggregation mode, int channels, int height,
                       int width, std::mt19937_64& rng)
    : mode_(mode), channels_(channels), cells_(height * width) {
  switch (mode_) {
    case Aggregation::kGap:
      break;
    case Aggregation::kDepthwise:
      weight_ = store.add_parameter(name + ".weight", uniform_init({channels, cells_}, cells_, rng));
      bias_ = store.add_parameter(name + ".bias", Tensor::zeros({channels}));
      break;
    case Aggregation::kConv:
      weight_ = store.add_parameter(name + ".weight",
                                    uniform_init({static_cast<int64_t>(channels) * cells_, channels},
                                                 static_cast<double>(channels) * cells_, rng));
      bias_ = store.add_parameter(name + ".bias", Tensor::zeros({channels}));
      break;
  }
}

Tensor Aggregator::operator()(const Tensor& map) const {
  require(map.rank() == 4 && map.dim(1) == channels_ && map.dim(2) * map.dim(3) == cells_,
          "aggregation expects [N, " + std::to_string(channels_) + ", H, W] with " + std::to_string(cells_) +
              " cells, got " + shape_str(map.shape()));
  const int64_t n = map.dim(0);
  const Tensor flat = ops::reshape(map, {n, channels_, cells_});
  switch (mode_) {
    case Aggregation::kGap:
      return ops::mean_axis(flat, 2);
    case Aggregation::kDepthwise:
      return ops::add(ops::sum_axis(ops::mul(flat, weight_), 2), bias_);
    case Aggregation::kConv:
      return ops::linear(ops::reshape(map, {n, static_cast<int64_t>(channels_) * cells_}), weight_, bias_);
  }
  throw std::logic_error("unreachable aggregation mode");
}

}  // namespace fhmr
