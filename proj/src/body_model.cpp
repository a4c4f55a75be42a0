#include "fhmr/body_model.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace fhmr::body {

namespace {

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d k;
  k << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return k;
}

bool all_finite(const Eigen::Ref<const Eigen::MatrixXd>& m) { return m.allFinite(); }

}  // namespace

BodyParams BodyParams::zeros(const BodyModelAsset& asset) {
  BodyParams p;
  p.pose_theta = Eigen::VectorXd::Zero(3 * asset.num_joints());
  p.shape_beta = Eigen::VectorXd::Zero(asset.num_shape_coeffs());
  return p;
}

std::vector<int> BodyModelAsset::topological_order() const {
  const int k = num_joints();
  std::vector<std::vector<int>> children(static_cast<size_t>(k));
  int root = -1;
  for (int j = 0; j < k; ++j) {
    const int p = parent_of[j];
    if (p < 0) {
      root = j;
    } else if (p < k) {
      children[p].push_back(j);
    }
  }
  std::vector<int> order;
  if (root < 0) return order;
  std::deque<int> queue{root};
  while (!queue.empty()) {
    const int j = queue.front();
    queue.pop_front();
    order.push_back(j);
    for (int c : children[j]) queue.push_back(c);
  }
  return order;
}

void BodyModelAsset::validate() const {
  const int v = num_vertices(), k = num_joints(), b = num_shape_coeffs(), nj = num_regressed_joints();
  if (v < 3) throw AssetError("asset: fewer than 3 template vertices");
  if (b < 1) throw AssetError("asset: shape basis must have at least one coefficient");
  if (k < 2) throw AssetError("asset: kinematic tree needs at least two joints");
  if (nj < 1) throw AssetError("asset: joint regressor needs at least one row");
  if (shape_basis.cols() != 3 * v) throw AssetError("asset: shape basis width is not 3V");
  if (skinning_weights.rows() != v || skinning_weights.cols() != k)
    throw AssetError("asset: skinning weights are not V x K");
  if (rest_joints.rows() != k) throw AssetError("asset: rest joints are not K x 3");
  if (joint_regressor.cols() != v) throw AssetError("asset: joint regressor is not Nj x V");
  if (!all_finite(template_vertices) || !all_finite(shape_basis) || !all_finite(skinning_weights) ||
      !all_finite(rest_joints) || !all_finite(joint_regressor))
    throw AssetError("asset: non-finite values");

  int roots = 0;
  for (int j = 0; j < k; ++j) {
    const int p = parent_of[j];
    if (p == -1) {
      ++roots;
    } else if (p < 0 || p >= k || p == j) {
      throw AssetError("asset: joint " + std::to_string(j) + " has invalid parent " + std::to_string(p));
    }
  }
  if (roots != 1) throw AssetError("asset: kinematic tree must have exactly one root");
  if (static_cast<int>(topological_order().size()) != k)
    throw AssetError("asset: kinematic tree has a cycle or unreachable joints");

  for (int i = 0; i < v; ++i) {
    if ((skinning_weights.row(i).array() < 0).any())
      throw AssetError("asset: negative skinning weight at vertex " + std::to_string(i));
    if (std::abs(skinning_weights.row(i).sum() - 1.0) > 1e-6)
      throw AssetError("asset: skinning weights of vertex " + std::to_string(i) + " do not sum to 1");
  }
  for (int r = 0; r < nj; ++r) {
    if (std::abs(joint_regressor.row(r).sum() - 1.0) > 1e-6)
      throw AssetError("asset: joint regressor row " + std::to_string(r) + " does not sum to 1");
  }
  for (const auto& f : faces) {
    for (int idx : f)
      if (idx < 0 || idx >= v) throw AssetError("asset: face index out of range");
  }
}

std::string BodyModelAsset::content_hash() const {
  uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* data, size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  auto feed_matrix = [&](const auto& m) {
    const int64_t dims[2] = {static_cast<int64_t>(m.rows()), static_cast<int64_t>(m.cols())};
    feed(dims, sizeof(dims));
    for (int64_t r = 0; r < m.rows(); ++r)
      for (int64_t c = 0; c < m.cols(); ++c) {
        const double x = m(r, c);
        feed(&x, sizeof(x));
      }
  };
  feed_matrix(template_vertices);
  feed_matrix(shape_basis);
  feed_matrix(skinning_weights);
  feed_matrix(rest_joints);
  feed_matrix(joint_regressor);
  feed(parent_of.data(), parent_of.size() * sizeof(int));
  for (const auto& f : faces) feed(f.data(), sizeof(int) * 3);
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle) {
  const double theta = axis_angle.norm();
  const Eigen::Matrix3d k = skew(axis_angle);
  if (theta < 1e-8) return Eigen::Matrix3d::Identity() + k + 0.5 * k * k;
  const Eigen::Matrix3d kn = k / theta;
  return Eigen::Matrix3d::Identity() + std::sin(theta) * kn + (1.0 - std::cos(theta)) * kn * kn;
}

Eigen::Vector3d axis_angle_from_matrix(const Eigen::Matrix3d& rotation) {
  const Eigen::AngleAxisd aa(rotation);
  return aa.angle() * aa.axis();
}

Eigen::Matrix3d rotation_about_vertical(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  Eigen::Matrix3d r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

MeshAndJoints forward(const BodyModelAsset& asset, const BodyParams& params) {
  const int v = asset.num_vertices(), k = asset.num_joints();
  if (params.pose_theta.size() != 3 * k)
    throw std::invalid_argument("forward: pose has " + std::to_string(params.pose_theta.size()) +
                                " entries, asset expects " + std::to_string(3 * k));
  if (params.shape_beta.size() != asset.num_shape_coeffs())
    throw std::invalid_argument("forward: shape has " + std::to_string(params.shape_beta.size()) +
                                " entries, asset expects " + std::to_string(asset.num_shape_coeffs()));

  const Eigen::VectorXd offsets = asset.shape_basis.transpose() * params.shape_beta;
  Points3 shaped = asset.template_vertices;
  for (int i = 0; i < v; ++i) shaped.row(i) += offsets.segment<3>(3 * i).transpose();

  // World transform of each joint, then the skinning transform relative to rest.
  std::vector<Eigen::Matrix3d> world_rot(static_cast<size_t>(k));
  std::vector<Eigen::Vector3d> world_t(static_cast<size_t>(k));
  for (int j : asset.topological_order()) {
    const Eigen::Matrix3d local = rodrigues(params.pose_theta.segment<3>(3 * j));
    const Eigen::Vector3d rest = asset.rest_joints.row(j).transpose();
    const int p = asset.parent_of[j];
    if (p < 0) {
      world_rot[j] = local;
      world_t[j] = rest;
    } else {
      const Eigen::Vector3d rest_parent = asset.rest_joints.row(p).transpose();
      world_rot[j] = world_rot[p] * local;
      world_t[j] = world_rot[p] * (rest - rest_parent) + world_t[p];
    }
  }
  std::vector<Eigen::Matrix<double, 3, 4>> skin(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) {
    skin[j].leftCols<3>() = world_rot[j];
    skin[j].col(3) = world_t[j] - world_rot[j] * asset.rest_joints.row(j).transpose();
  }

  MeshAndJoints out;
  out.vertices.resize(v, 3);
  for (int i = 0; i < v; ++i) {
    Eigen::Matrix<double, 3, 4> blended = Eigen::Matrix<double, 3, 4>::Zero();
    for (int j = 0; j < k; ++j) {
      const double w = asset.skinning_weights(i, j);
      if (w != 0.0) blended += w * skin[j];
    }
    out.vertices.row(i) = (blended.leftCols<3>() * shaped.row(i).transpose() + blended.col(3)).transpose();
  }
  out.joints3d = asset.joint_regressor * out.vertices;
  out.keypoints2d = project(out.joints3d, params.camera);
  return out;
}

Points2 project(const Points3& points, const Camera& camera) {
  if (!(camera.scale > 0) || !std::isfinite(camera.scale))
    throw std::invalid_argument("project: camera scale must be positive and finite");
  Points2 out(points.rows(), 2);
  for (int64_t i = 0; i < points.rows(); ++i) {
    out(i, 0) = camera.scale * points(i, 0) + camera.tx;
    out(i, 1) = camera.scale * points(i, 1) + camera.ty;
  }
  return out;
}

Points3 rotate_about_vertical(const Points3& points, double angle) {
  const Eigen::Matrix3d r = rotation_about_vertical(angle);
  return points * r.transpose();
}

Eigen::VectorXd rotate_global_orient(const Eigen::VectorXd& pose_theta, double delta) {
  Eigen::VectorXd out = pose_theta;
  const Eigen::Matrix3d global = rodrigues(pose_theta.head<3>());
  out.head<3>() = axis_angle_from_matrix(rotation_about_vertical(-delta) * global);
  return out;
}

namespace {

Tensor tensor_from(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  // Row-major copy.
  std::vector<double> v(static_cast<size_t>(m.size()));
  for (int64_t r = 0; r < m.rows(); ++r)
    for (int64_t c = 0; c < m.cols(); ++c) v[static_cast<size_t>(r * m.cols() + c)] = m(r, c);
  return Tensor({m.rows(), m.cols()}, std::move(v));
}

}  // namespace

DifferentiableBody::DifferentiableBody(const BodyModelAsset& asset)
    : asset_(&asset), order_(asset.topological_order()) {
  Eigen::MatrixXd flat(1, 3 * asset.num_vertices());
  for (int i = 0; i < asset.num_vertices(); ++i)
    for (int c = 0; c < 3; ++c) flat(0, 3 * i + c) = asset.template_vertices(i, c);
  template_ = ops::reshape(tensor_from(flat), {3 * asset.num_vertices()});
  basis_ = tensor_from(asset.shape_basis);
  skin_ = tensor_from(asset.skinning_weights);
  regressor_ = tensor_from(asset.joint_regressor);
}

DifferentiableBody::Output DifferentiableBody::operator()(const Tensor& rotations, const Tensor& shape) const {
  const BodyModelAsset& a = *asset_;
  const int64_t k = a.num_joints(), v = a.num_vertices(), nj = a.num_regressed_joints();
  if (rotations.rank() != 4 || rotations.dim(1) != k || rotations.dim(2) != 3 || rotations.dim(3) != 3)
    throw std::invalid_argument("body: rotations must be [N,K,3,3], got " + shape_str(rotations.shape()));
  const int64_t n = rotations.dim(0);
  if (shape.rank() != 2 || shape.dim(0) != n || shape.dim(1) != a.num_shape_coeffs())
    throw std::invalid_argument("body: shape must be [N,B], got " + shape_str(shape.shape()));

  Tensor shaped = ops::reshape(ops::add(ops::matmul(shape, basis_), template_), {n, v, 3});

  auto column = [](const Eigen::Vector3d& p) { return Tensor({3, 1}, {p.x(), p.y(), p.z()}); };
  // Applies [N,3,3] to a constant 3-vector -> [N,3].
  auto apply = [n](const Tensor& rot, const Tensor& vec) {
    return ops::reshape(ops::matmul(ops::reshape(rot, {n * 3, 3}), vec), {n, 3});
  };

  std::vector<Tensor> world_rot(static_cast<size_t>(k)), world_t(static_cast<size_t>(k));
  for (int j : order_) {
    Tensor local = ops::reshape(ops::slice(rotations, 1, j, j + 1), {n, 3, 3});
    const Eigen::Vector3d rest = a.rest_joints.row(j).transpose();
    const int p = a.parent_of[j];
    if (p < 0) {
      world_rot[j] = local;
      world_t[j] = ops::add(Tensor::zeros({n, 3}), Tensor({3}, {rest.x(), rest.y(), rest.z()}));
    } else {
      const Eigen::Vector3d bone = rest - a.rest_joints.row(p).transpose();
      world_rot[j] = ops::bmm(world_rot[p], local);
      world_t[j] = ops::add(apply(world_rot[p], column(bone)), world_t[p]);
    }
  }
  std::vector<Tensor> transforms;
  for (int j = 0; j < k; ++j) {
    const Eigen::Vector3d rest = a.rest_joints.row(j).transpose();
    Tensor trans = ops::sub(world_t[j], apply(world_rot[j], column(rest)));
    Tensor m = ops::concat({world_rot[j], ops::reshape(trans, {n, 3, 1})}, 2);  // [N,3,4]
    transforms.push_back(ops::reshape(m, {1, n * 12}));
  }
  Tensor stacked = ops::concat(transforms, 0);                              // [K, N*12]
  Tensor blended = ops::reshape(ops::matmul(skin_, stacked), {v, n, 12});   // [V, N, 12]
  blended = ops::reshape(ops::permute(blended, {1, 0, 2}), {n * v, 3, 4});
  Tensor homog = ops::concat({shaped, Tensor::full({n, v, 1}, 1.0)}, 2);    // [N, V, 4]
  Tensor posed = ops::reshape(ops::bmm(blended, ops::reshape(homog, {n * v, 4, 1})), {n, v, 3});

  Tensor by_vertex = ops::reshape(ops::permute(posed, {1, 0, 2}), {v, n * 3});
  Tensor joints = ops::reshape(ops::matmul(regressor_, by_vertex), {nj, n, 3});
  return {posed, ops::permute(joints, {1, 0, 2})};
}

Tensor project_batched(const Tensor& points, const Tensor& camera) {
  const int64_t n = points.dim(0);
  Tensor xy = ops::slice(points, 2, 0, 2);                                      // [N,P,2]
  Tensor s = ops::reshape(ops::slice(camera, 1, 0, 1), {n, 1, 1});
  Tensor t = ops::reshape(ops::slice(camera, 1, 1, 3), {n, 1, 2});
  return ops::add(ops::mul(xy, s), t);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

using nlohmann::json;

json matrix_json(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  std::vector<double> data;
  data.reserve(static_cast<size_t>(m.size()));
  for (int64_t r = 0; r < m.rows(); ++r)
    for (int64_t c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return json{{"shape", {m.rows(), m.cols()}}, {"data", data}};
}

Eigen::MatrixXd matrix_from_json(const json& j, const std::string& field, int64_t rows, int64_t cols) {
  if (!j.contains(field)) throw AssetError("asset: missing field " + field);
  const auto& e = j.at(field);
  const auto shape = e.at("shape").get<std::vector<int64_t>>();
  if (shape.size() != 2 || (rows >= 0 && shape[0] != rows) || (cols >= 0 && shape[1] != cols))
    throw AssetError("asset: field " + field + " has unexpected shape");
  const auto data = e.at("data").get<std::vector<double>>();
  if (static_cast<int64_t>(data.size()) != shape[0] * shape[1])
    throw AssetError("asset: field " + field + " has " + std::to_string(data.size()) + " values for its shape");
  Eigen::MatrixXd m(shape[0], shape[1]);
  for (int64_t r = 0; r < shape[0]; ++r)
    for (int64_t c = 0; c < shape[1]; ++c) m(r, c) = data[static_cast<size_t>(r * shape[1] + c)];
  return m;
}

}  // namespace

std::string asset_to_json(const BodyModelAsset& asset) {
  asset.validate();
  json faces = json::array();
  for (const auto& f : asset.faces) faces.push_back({f[0], f[1], f[2]});
  json j{{"format", "fhmr-body-asset"},
         {"format_version", kAssetFormatVersion},
         {"name", asset.name},
         {"template_vertices", matrix_json(asset.template_vertices)},
         {"shape_basis", matrix_json(asset.shape_basis)},
         {"skinning_weights", matrix_json(asset.skinning_weights)},
         {"parent_of", asset.parent_of},
         {"rest_joints", matrix_json(asset.rest_joints)},
         {"joint_regressor", matrix_json(asset.joint_regressor)},
         {"faces", faces}};
  return j.dump(1);
}

BodyModelAsset asset_from_json(const std::string& text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw AssetError("asset: malformed file " + source + ": " + e.what());
  }
  try {
    if (j.value("format", std::string{}) != "fhmr-body-asset") throw AssetError("asset: not a body asset file");
    const int version = j.at("format_version").get<int>();
    if (version != kAssetFormatVersion)
      throw AssetError("asset: unsupported format_version " + std::to_string(version));
    BodyModelAsset a;
    a.name = j.value("name", std::string{});
    a.template_vertices = matrix_from_json(j, "template_vertices", -1, 3);
    const int64_t v = a.template_vertices.rows();
    a.parent_of = j.at("parent_of").get<std::vector<int>>();
    const int64_t k = static_cast<int64_t>(a.parent_of.size());
    a.shape_basis = matrix_from_json(j, "shape_basis", -1, 3 * v);
    a.skinning_weights = matrix_from_json(j, "skinning_weights", v, k);
    a.rest_joints = matrix_from_json(j, "rest_joints", k, 3);
    a.joint_regressor = matrix_from_json(j, "joint_regressor", -1, v);
    for (const auto& f : j.at("faces")) a.faces.push_back({f.at(0).get<int>(), f.at(1).get<int>(), f.at(2).get<int>()});
    a.validate();
    return a;
  } catch (const json::exception& e) {
    throw AssetError("asset: malformed field in " + source + ": " + e.what());
  }
}

void save_asset(const BodyModelAsset& asset, const std::filesystem::path& path) {
  const std::string text = asset_to_json(asset);
  std::ofstream out(path);
  if (!out) throw AssetError("asset: cannot write " + path.string());
  out << text << '\n';
}

BodyModelAsset load_asset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw AssetError("asset: cannot open " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return asset_from_json(text, path.string());
}

}  // namespace fhmr::body
