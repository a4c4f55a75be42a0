#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "fhmr/body_model.hpp"

namespace fhmr {

// One training or evaluation example. The image is S x S x 3 bytes,
// row-major with channels last. The 3D labels are present iff has_3d.
struct LabeledExample {
  int image_size = 0;
  std::vector<uint8_t> image;
  bool has_3d = false;
  body::Points2 keypoints2d;
  body::Points3 joints3d;
  Eigen::VectorXd pose_theta;
  Eigen::VectorXd shape_beta;
  body::Points3 vertices;

  bool operator==(const LabeledExample& other) const;
  // Throws std::invalid_argument when a present field has the wrong size.
  void validate(const body::BodyModelAsset& asset) const;
  body::BodyParams params() const;
};

}  // namespace fhmr
