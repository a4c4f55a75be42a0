#pragma once

// Iterative body-parameter regressor and the silhouette decoder.

#include <random>
#include <string>
#include <vector>

#include "fhmr/nn.hpp"
#include "fhmr/tensor.hpp"

namespace fhmr {

// Regressed parameters for a batch. Rotations are per-joint local rotation
// matrices; camera holds (s, tx, ty) with s > 0.
struct RegressedParams {
  Tensor state;      // [N, 6K + B + 3] raw regressor state
  Tensor rotations;  // [N, K, 3, 3]
  Tensor shape;      // [N, B]
  Tensor camera;     // [N, 3]
};

// Gram-Schmidt map from two 3-vectors per joint to a rotation matrix whose
// first two columns span them. [N, K*6] -> [N, K, 3, 3].
Tensor rotation_from_6d(const Tensor& sixd, int joints);

// Iterative error feedback: state += MLP(z, state), a fixed number of times,
// starting from a stored initial state (identity rotations, zero shape,
// unit scale, zero translation). The camera scale is carried as log s.
class Regressor {
 public:
  Regressor() = default;
  Regressor(ParameterStore& store, const std::string& name, int latent_width, int joints, int shape_coeffs,
            int hidden_width, int iterations, std::mt19937_64& rng);

  RegressedParams operator()(const Tensor& latent) const;
  RegressedParams decode_state(const Tensor& state) const;

  int joints() const { return joints_; }
  int shape_coeffs() const { return shape_coeffs_; }
  int state_width() const { return 6 * joints_ + shape_coeffs_ + 3; }
  int iterations() const { return iterations_; }

  // The initial state with the given parameters in the stored layout.
  static std::vector<double> initial_state(int joints, int shape_coeffs);

 private:
  int latent_width_ = 0, joints_ = 0, shape_coeffs_ = 0, iterations_ = 0;
  Tensor init_;  // buffer [state_width]
  Linear input_latent_;  // first layer split into latent and state blocks
  Tensor input_state_;
  Linear hidden_;
  Linear output_;
};

// Five stride-2 transposed convolutions (normalization and ReLU between,
// sigmoid at the end): [N, C, r, r] -> [N, 1, 32r, 32r].
class SilhouetteDecoder {
 public:
  static constexpr int kStages = 5;

  SilhouetteDecoder() = default;
  SilhouetteDecoder(ParameterStore& store, const std::string& name, int channels, int map_size, std::mt19937_64& rng);
  Tensor operator()(const Tensor& map, bool training);

  int map_size() const { return map_size_; }
  int output_size() const { return map_size_ << kStages; }

 private:
  int channels_ = 0, map_size_ = 0;
  std::vector<ConvTranspose2d> layers_;
  std::vector<BatchNorm2d> norms_;
};

}  // namespace fhmr
