#include "fhmr/example.hpp"

#include <stdexcept>

namespace fhmr {

namespace {

template <typename A>
bool same(const A& a, const A& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
}

}  // namespace

bool LabeledExample::operator==(const LabeledExample& other) const {
  return image_size == other.image_size && image == other.image && has_3d == other.has_3d &&
         same(keypoints2d, other.keypoints2d) && same(joints3d, other.joints3d) &&
         same(pose_theta, other.pose_theta) && same(shape_beta, other.shape_beta) && same(vertices, other.vertices);
}

void LabeledExample::validate(const body::BodyModelAsset& asset) const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
  };
  require(image_size > 0 && image.size() == static_cast<size_t>(image_size) * image_size * 3,
          "image size does not match its byte count");
  require(keypoints2d.rows() == asset.num_regressed_joints(), "keypoint count does not match the body model");
  require(keypoints2d.allFinite(), "keypoints are not finite");
  if (has_3d) {
    require(joints3d.rows() == asset.num_regressed_joints(), "3D joint count does not match the body model");
    require(pose_theta.size() == 3 * asset.num_joints(), "pose size does not match the body model");
    require(shape_beta.size() == asset.num_shape_coeffs(), "shape size does not match the body model");
    require(vertices.rows() == asset.num_vertices(), "vertex count does not match the body model");
    require(joints3d.allFinite() && pose_theta.allFinite() && shape_beta.allFinite() && vertices.allFinite(),
            "3D labels are not finite");
  } else {
    require(joints3d.size() == 0 && pose_theta.size() == 0 && shape_beta.size() == 0 && vertices.size() == 0,
            "2D-only example carries 3D labels");
  }
}

body::BodyParams LabeledExample::params() const {
  if (!has_3d) throw std::logic_error("2D-only example has no body parameters");
  body::BodyParams p;
  p.pose_theta = pose_theta;
  p.shape_beta = shape_beta;
  return p;
}

}  // namespace fhmr
