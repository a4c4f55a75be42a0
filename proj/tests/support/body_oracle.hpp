#pragma once

// Independent reference implementations used only by tests.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>

#include "fhmr/body_model.hpp"

namespace fhmr::testing {

// Rotation matrix through the unit-quaternion path.
inline Eigen::Matrix3d quaternion_rotation(const Eigen::Vector3d& axis_angle) {
  const double theta = axis_angle.norm();
  if (theta == 0.0) return Eigen::Matrix3d::Identity();
  const Eigen::Vector3d axis = axis_angle / theta;
  const double w = std::cos(theta / 2), s = std::sin(theta / 2);
  const double x = axis.x() * s, y = axis.y() * s, z = axis.z() * s;
  Eigen::Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),  //
      2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),   //
      2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y);
  return r;
}

// 4x4 world transform G_k of joint k, built by walking the parent chain.
inline Eigen::Matrix4d world_transform(const body::BodyModelAsset& asset, const Eigen::VectorXd& pose, int joint) {
  Eigen::Matrix4d local = Eigen::Matrix4d::Identity();
  local.topLeftCorner<3, 3>() = quaternion_rotation(pose.segment<3>(3 * joint));
  const int parent = asset.parent_of[joint];
  const Eigen::Vector3d rest = asset.rest_joints.row(joint).transpose();
  if (parent < 0) {
    local.topRightCorner<3, 1>() = rest;
    return local;
  }
  local.topRightCorner<3, 1>() = rest - asset.rest_joints.row(parent).transpose();
  return world_transform(asset, pose, parent) * local;
}

// Brute force: x'_v = sum_k w_vk * G_k * G_k(rest)^-1 * x_v, one vertex at a time.
inline body::Points3 skinning_oracle(const body::BodyModelAsset& asset, const body::BodyParams& params) {
  const int v = asset.num_vertices(), k = asset.num_joints();
  body::Points3 out(v, 3);
  for (int i = 0; i < v; ++i) {
    Eigen::Vector4d x;
    x.head<3>() = asset.template_vertices.row(i).transpose();
    for (int b = 0; b < asset.num_shape_coeffs(); ++b)
      x.head<3>() += params.shape_beta[b] * asset.shape_basis.row(b).segment<3>(3 * i).transpose();
    x[3] = 1.0;
    Eigen::Vector4d acc = Eigen::Vector4d::Zero();
    for (int j = 0; j < k; ++j) {
      Eigen::Matrix4d inv_rest = Eigen::Matrix4d::Identity();
      inv_rest.topRightCorner<3, 1>() = -asset.rest_joints.row(j).transpose();
      acc += asset.skinning_weights(i, j) * (world_transform(asset, params.pose_theta, j) * inv_rest * x);
    }
    out.row(i) = acc.head<3>().transpose();
  }
  return out;
}

}  // namespace fhmr::testing
