#pragma once

// Parametric articulated body: shape and pose to mesh vertices, regressed
// 3D joints and weak-perspective 2D keypoints.
//
// Model space is y-up, the body is about 1.7 units tall and the root joint
// sits at the origin, so global rotations act about the origin.

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fhmr/tensor.hpp"

namespace fhmr::body {

using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

class AssetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kAssetFormatVersion = 1;

struct BodyModelAsset {
  std::string name;
  Points3 template_vertices;                // V x 3
  Eigen::MatrixXd shape_basis;              // B x 3V, row b is the displacement of coefficient b
  Eigen::MatrixXd skinning_weights;         // V x K
  std::vector<int> parent_of;               // K entries, -1 marks the root
  Points3 rest_joints;                      // K x 3
  Eigen::MatrixXd joint_regressor;          // Nj x V
  std::vector<std::array<int, 3>> faces;    // triangles for silhouette rendering

  int num_vertices() const { return static_cast<int>(template_vertices.rows()); }
  int num_joints() const { return static_cast<int>(parent_of.size()); }
  int num_shape_coeffs() const { return static_cast<int>(shape_basis.rows()); }
  int num_regressed_joints() const { return static_cast<int>(joint_regressor.rows()); }

  // Joints ordered so that every parent precedes its children.
  std::vector<int> topological_order() const;

  // Throws AssetError naming the first violated invariant.
  void validate() const;

  // Stable 64-bit FNV-1a digest of all fields, as 16 hex characters.
  std::string content_hash() const;
};

struct Camera {
  double scale = 1.0;
  double tx = 0.0;
  double ty = 0.0;
};

struct BodyParams {
  Eigen::VectorXd pose_theta;  // 3K axis-angle, block 0 is the global orientation
  Eigen::VectorXd shape_beta;  // B
  Camera camera;

  // theta = 0, beta = 0, s = 1, t = 0.
  static BodyParams zeros(const BodyModelAsset& asset);
};

struct MeshAndJoints {
  Points3 vertices;
  Points3 joints3d;
  Points2 keypoints2d;
};

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle);
Eigen::Vector3d axis_angle_from_matrix(const Eigen::Matrix3d& rotation);
Eigen::Matrix3d rotation_about_vertical(double angle);

MeshAndJoints forward(const BodyModelAsset& asset, const BodyParams& params);

// out = s * (x, y) + (tx, ty); depth is discarded. Rejects s <= 0.
Points2 project(const Points3& points, const Camera& camera);

Points3 rotate_about_vertical(const Points3& points, double angle);

// Re-expresses a pose for a viewing direction changed by `delta`: the global
// orientation becomes R_y(-delta) * R_global and all other joints are kept.
// With this sign, rotating ground truth by -phi1 and then adjusting by
// (phi2 - phi1) equals rotating it by -phi2.
Eigen::VectorXd rotate_global_orient(const Eigen::VectorXd& pose_theta, double delta);

// Batched differentiable evaluation of the same model.
class DifferentiableBody {
 public:
  explicit DifferentiableBody(const BodyModelAsset& asset);

  struct Output {
    Tensor vertices;  // [N, V, 3]
    Tensor joints3d;  // [N, Nj, 3]
  };

  // rotations: [N, K, 3, 3] per-joint local rotation matrices; shape: [N, B].
  Output operator()(const Tensor& rotations, const Tensor& shape) const;

  const BodyModelAsset& asset() const { return *asset_; }

 private:
  const BodyModelAsset* asset_;
  Tensor template_;         // [3V]
  Tensor basis_;            // [B, 3V]
  Tensor skin_;             // [V, K]
  Tensor regressor_;        // [Nj, V]
  std::vector<int> order_;
};

// points: [N, P, 3], camera: [N, 3] holding (s, tx, ty) -> [N, P, 2].
Tensor project_batched(const Tensor& points, const Tensor& camera);

// Procedural capsule humanoid: 8 joints (pelvis, spine, chest, head, two arms,
// two legs), about 190 vertices, 10 orthogonal smooth shape directions and 8
// regressed joints. Deterministic in the seed.
BodyModelAsset make_toy_asset(uint64_t seed);

void save_asset(const BodyModelAsset& asset, const std::filesystem::path& path);
BodyModelAsset load_asset(const std::filesystem::path& path);
std::string asset_to_json(const BodyModelAsset& asset);
BodyModelAsset asset_from_json(const std::string& text, const std::string& source = "<memory>");

}  // namespace fhmr::body
