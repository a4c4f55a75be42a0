#include "fhmr/regression_heads.hpp"

#include <cmath>
#include <stdexcept>

namespace fhmr {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

}  // namespace

Tensor rotation_from_6d(const Tensor& sixd, int joints) {
  const int64_t n = sixd.dim(0);
  const Tensor pairs = ops::reshape(sixd, {n, joints, 2, 3});
  const Tensor a1 = ops::slice(pairs, 2, 0, 1);
  const Tensor a2 = ops::slice(pairs, 2, 1, 2);
  const Tensor b1 = ops::normalize_last(a1);
  const Tensor along = ops::sum_axis(ops::mul(b1, a2), 3);  // [N, K, 1]
  const Tensor b2 = ops::normalize_last(ops::sub(a2, ops::mul(ops::reshape(along, {n, joints, 1, 1}), b1)));
  const Tensor b3 = ops::cross_last(b1, b2);
  // Rows of the stacked tensor are the columns of the rotation.
  return ops::permute(ops::concat({b1, b2, b3}, 2), {0, 1, 3, 2});
}

std::vector<double> Regressor::initial_state(int joints, int shape_coeffs) {
  std::vector<double> s(static_cast<size_t>(6 * joints + shape_coeffs + 3), 0.0);
  for (int k = 0; k < joints; ++k) {
    s[6 * k + 0] = 1.0;
    s[6 * k + 4] = 1.0;
  }
  return s;
}

Regressor::Regressor(ParameterStore& store, const std::string& name, int latent_width, int joints, int shape_coeffs,
                     int hidden_width, int iterations, std::mt19937_64& rng)
    : latent_width_(latent_width), joints_(joints), shape_coeffs_(shape_coeffs), iterations_(iterations) {
  require(iterations >= 1, "regressor needs at least one iteration");
  const int width = state_width();
  init_ = store.add_buffer(name + ".init", Tensor({width}, initial_state(joints, shape_coeffs)));
  const double fan_in = latent_width + width;
  input_latent_.weight = store.add_parameter(name + ".input.latent", uniform_init({latent_width, hidden_width}, fan_in, rng));
  input_latent_.bias = store.add_parameter(name + ".input.bias", uniform_init({hidden_width}, fan_in, rng));
  input_state_ = store.add_parameter(name + ".input.state", uniform_init({width, hidden_width}, fan_in, rng));
  hidden_ = Linear(store, name + ".hidden", hidden_width, hidden_width, rng);
  // Small initial updates keep the first estimates near the initial state.
  output_ = Linear(store, name + ".output", hidden_width, width, rng, 0.01);
}

RegressedParams Regressor::operator()(const Tensor& latent) const {
  require(latent.rank() == 2 && latent.dim(1) == latent_width_,
          "regressor expects [N, " + std::to_string(latent_width_) + "], got " + shape_str(latent.shape()));
  for (double v : latent.values()) require(std::isfinite(v), "regressor input is not finite");
  const int64_t n = latent.dim(0);
  const int64_t width = state_width();
  const Tensor from_latent = input_latent_(latent);  // constant across iterations
  Tensor state = ops::add(Tensor::zeros({n, width}), ops::reshape(init_, {1, width}));
  for (int it = 0; it < iterations_; ++it) {
    const Tensor h1 = ops::relu(ops::add(from_latent, ops::matmul(state, input_state_)));
    const Tensor h2 = ops::relu(hidden_(h1));
    state = ops::add(state, output_(h2));
  }
  return decode_state(state);
}

RegressedParams Regressor::decode_state(const Tensor& state) const {
  RegressedParams out;
  out.state = state;
  const int64_t rot = 6 * joints_;
  out.rotations = rotation_from_6d(ops::slice(state, 1, 0, rot), joints_);
  out.shape = ops::slice(state, 1, rot, rot + shape_coeffs_);
  const Tensor log_scale = ops::slice(state, 1, rot + shape_coeffs_, rot + shape_coeffs_ + 1);
  const Tensor translation = ops::slice(state, 1, rot + shape_coeffs_ + 1, rot + shape_coeffs_ + 3);
  out.camera = ops::concat({ops::exp(log_scale), translation}, 1);
  return out;
}

SilhouetteDecoder::SilhouetteDecoder(ParameterStore& store, const std::string& name, int channels, int map_size,
                                     std::mt19937_64& rng)
    : channels_(channels), map_size_(map_size) {
  int in = channels;
  for (int i = 0; i < kStages; ++i) {
    const int out = i + 1 == kStages ? 1 : std::max(1, channels >> (i + 1));
    const std::string stage = name + ".stage" + std::to_string(i);
    layers_.emplace_back(store, stage + ".deconv", in, out, 4, 2, 1, rng);
    if (i + 1 < kStages) norms_.emplace_back(store, stage + ".norm", out);
    in = out;
  }
}

Tensor SilhouetteDecoder::operator()(const Tensor& map, bool training) {
  require(map.rank() == 4 && map.dim(1) == channels_ && map.dim(2) == map_size_ && map.dim(3) == map_size_,
          "silhouette decoder expects [N, " + std::to_string(channels_) + ", " + std::to_string(map_size_) + ", " +
              std::to_string(map_size_) + "], got " + shape_str(map.shape()));
  Tensor x = map;
  for (int i = 0; i < kStages; ++i) {
    x = layers_[i](x);
    x = i + 1 < kStages ? ops::relu(norms_[i](x, training)) : ops::sigmoid(x);
  }
  return x;
}

}  // namespace fhmr
