#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Geometry>

#include "fhmr/body_model.hpp"

namespace fhmr::body {

namespace {

enum Joint { kPelvis, kSpine, kChest, kHead, kLeftArm, kRightArm, kLeftLeg, kRightLeg, kNumJoints };

struct Ring {
  double fraction;  // position between the two poles
  double radius_u;
  double radius_w;
};

// One closed tube: a pole, rings of vertices and another pole.
struct Tube {
  Eigen::Vector3d pole_start, pole_end;
  std::vector<Ring> rings;
  int around = 8;
};

struct MeshBuilder {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<Eigen::Vector3d> outward;   // unit radial direction per vertex
  std::vector<double> axial;              // position along the owning tube in [0, 1]
  std::vector<int> tube_of;
  std::vector<int> ring_of;               // -1 for poles
  std::vector<std::array<int, 3>> faces;

  int add(const Tube& t, int tube_id) {
    const Eigen::Vector3d axis = (t.pole_end - t.pole_start).normalized();
    Eigen::Vector3d u = axis.cross(Eigen::Vector3d::UnitZ());
    if (u.norm() < 1e-9) u = Eigen::Vector3d::UnitX();
    u.normalize();
    const Eigen::Vector3d w = u.cross(axis).normalized();
    const int start = static_cast<int>(vertices.size());
    auto push = [&](const Eigen::Vector3d& p, const Eigen::Vector3d& n, double s, int ring) {
      vertices.push_back(p);
      outward.push_back(n);
      axial.push_back(s);
      tube_of.push_back(tube_id);
      ring_of.push_back(ring);
    };
    push(t.pole_start, -axis, 0.0, -1);
    for (size_t r = 0; r < t.rings.size(); ++r) {
      const Ring& ring = t.rings[r];
      const Eigen::Vector3d center = t.pole_start + ring.fraction * (t.pole_end - t.pole_start);
      for (int a = 0; a < t.around; ++a) {
        const double ang = 2.0 * M_PI * a / t.around;
        const Eigen::Vector3d dir = std::cos(ang) * u + std::sin(ang) * w;
        const Eigen::Vector3d p = center + ring.radius_u * std::cos(ang) * u + ring.radius_w * std::sin(ang) * w;
        push(p, dir, ring.fraction, static_cast<int>(r));
      }
    }
    push(t.pole_end, axis, 1.0, -1);

    const int n_rings = static_cast<int>(t.rings.size());
    auto ring_vertex = [&](int r, int a) { return start + 1 + r * t.around + (a % t.around); };
    const int last = start + 1 + n_rings * t.around;
    for (int a = 0; a < t.around; ++a) {
      faces.push_back({start, ring_vertex(0, a + 1), ring_vertex(0, a)});
      faces.push_back({last, ring_vertex(n_rings - 1, a), ring_vertex(n_rings - 1, a + 1)});
    }
    for (int r = 0; r + 1 < n_rings; ++r) {
      for (int a = 0; a < t.around; ++a) {
        faces.push_back({ring_vertex(r, a), ring_vertex(r, a + 1), ring_vertex(r + 1, a + 1)});
        faces.push_back({ring_vertex(r, a), ring_vertex(r + 1, a + 1), ring_vertex(r + 1, a)});
      }
    }
    return start;
  }
};

std::vector<Ring> uniform_rings(int count, double radius) {
  std::vector<Ring> rings;
  for (int i = 0; i < count; ++i) rings.push_back({(i + 1.0) / (count + 1.0), radius, radius});
  return rings;
}

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

}  // namespace

BodyModelAsset make_toy_asset(uint64_t seed) {
  BodyModelAsset asset;
  asset.name = "toy-capsule-humanoid";
  asset.parent_of = {-1, kPelvis, kSpine, kChest, kChest, kChest, kPelvis, kPelvis};
  asset.rest_joints.resize(kNumJoints, 3);
  asset.rest_joints << 0.0, 0.0, 0.0,  //
      0.0, 0.20, 0.0,                  //
      0.0, 0.42, 0.0,                  //
      0.0, 0.55, 0.0,                  //
      0.20, 0.45, 0.0,                 //
      -0.20, 0.45, 0.0,                //
      0.10, -0.05, 0.0,                //
      -0.10, -0.05, 0.0;

  enum TubeId { kTorso, kHeadTube, kLeftArmTube, kRightArmTube, kLeftLegTube, kRightLegTube };
  MeshBuilder mb;

  Tube torso{{0, -0.14, 0}, {0, 0.52, 0}, {}, 8};
  for (double y : {-0.10, 0.02, 0.14, 0.26, 0.38, 0.48}) {
    const double taper = (y < -0.05 || y > 0.45) ? 0.85 : 1.0;
    torso.rings.push_back({(y + 0.14) / 0.66, 0.15 * taper, 0.10 * taper});
  }
  mb.add(torso, kTorso);

  Tube head{{0, 0.57, 0}, {0, 0.81, 0}, {}, 8};
  for (int i = 1; i <= 4; ++i) {
    const double f = i / 5.0;
    const double dy = (f - 0.5) * 0.24;
    const double r = std::sqrt(std::max(0.0, 0.12 * 0.12 - dy * dy));
    head.rings.push_back({f, r, r});
  }
  mb.add(head, kHeadTube);

  const double arm_len = 0.5, arm_r = 0.045, splay = 20.0 * M_PI / 180.0;
  for (int side : {1, -1}) {
    const Eigen::Vector3d shoulder(0.22 * side, 0.45, 0);
    const Eigen::Vector3d dir(std::sin(splay) * side, -std::cos(splay), 0);
    Tube arm{shoulder - arm_r * dir, shoulder + (arm_len + arm_r) * dir, uniform_rings(4, arm_r), 6};
    mb.add(arm, side > 0 ? kLeftArmTube : kRightArmTube);
  }
  const double leg_r = 0.065;
  for (int side : {1, -1}) {
    Tube leg{{0.10 * side, -0.02, 0}, {0.10 * side, -0.85, 0}, uniform_rings(4, leg_r), 6};
    mb.add(leg, side > 0 ? kLeftLegTube : kRightLegTube);
  }

  const int v = static_cast<int>(mb.vertices.size());
  asset.template_vertices.resize(v, 3);
  for (int i = 0; i < v; ++i) asset.template_vertices.row(i) = mb.vertices[i].transpose();
  asset.faces = mb.faces;

  // Skinning: piecewise-linear blends near each attachment.
  asset.skinning_weights = Eigen::MatrixXd::Zero(v, kNumJoints);
  for (int i = 0; i < v; ++i) {
    auto& row = asset.skinning_weights;
    const double y = mb.vertices[i].y();
    const double s = mb.axial[i];
    switch (mb.tube_of[i]) {
      case kTorso: {
        if (y <= 0.0) {
          row(i, kPelvis) = 1;
        } else if (y <= 0.20) {
          const double t = y / 0.20;
          row(i, kPelvis) = 1 - t;
          row(i, kSpine) = t;
        } else if (y <= 0.42) {
          const double t = (y - 0.20) / 0.22;
          row(i, kSpine) = 1 - t;
          row(i, kChest) = t;
        } else {
          row(i, kChest) = 1;
        }
        break;
      }
      case kHeadTube: {
        const double t = clamp01((y - 0.57) / 0.10);
        row(i, kHead) = 0.5 + 0.5 * t;
        row(i, kChest) = 0.5 - 0.5 * t;
        break;
      }
      case kLeftArmTube:
      case kRightArmTube: {
        const int j = mb.tube_of[i] == kLeftArmTube ? kLeftArm : kRightArm;
        const double t = clamp01(0.5 + s / 0.4);
        row(i, j) = t;
        row(i, kChest) = 1 - t;
        break;
      }
      default: {
        const int j = mb.tube_of[i] == kLeftLegTube ? kLeftLeg : kRightLeg;
        const double t = clamp01(0.5 + s / 0.4);
        row(i, j) = t;
        row(i, kPelvis) = 1 - t;
        break;
      }
    }
  }

  // Regressed joints: means of chosen rings (plus the end pole for limbs).
  constexpr int kRegressed = 8;
  asset.joint_regressor = Eigen::MatrixXd::Zero(kRegressed, v);
  auto regress_from = [&](int row, auto&& pick) {
    int count = 0;
    for (int i = 0; i < v; ++i) count += pick(i) ? 1 : 0;
    for (int i = 0; i < v; ++i)
      if (pick(i)) asset.joint_regressor(row, i) = 1.0 / count;
  };
  regress_from(0, [&](int i) { return mb.tube_of[i] == kTorso && mb.ring_of[i] == 1; });
  regress_from(1, [&](int i) { return mb.tube_of[i] == kTorso && mb.ring_of[i] == 2; });
  regress_from(2, [&](int i) { return mb.tube_of[i] == kTorso && mb.ring_of[i] == 4; });
  regress_from(3, [&](int i) { return mb.tube_of[i] == kHeadTube; });
  int slot = 4;
  for (int tube : {kLeftArmTube, kRightArmTube, kLeftLegTube, kRightLegTube}) {
    regress_from(slot++, [&](int i) { return mb.tube_of[i] == tube && (mb.ring_of[i] == 3 || mb.axial[i] == 1.0); });
  }

  // Shape directions: smooth random displacement fields plus radial
  // thickness modes, orthonormalized and scaled to 0.02 RMS per vertex.
  constexpr int kShape = 10;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> ux(-0.4, 0.4), uy(-0.85, 0.85), uz(-0.15, 0.15);
  Eigen::MatrixXd basis(kShape, 3 * v);
  for (int b = 0; b < kShape; ++b) {
    Eigen::VectorXd field = Eigen::VectorXd::Zero(3 * v);
    for (int m = 0; m < 3; ++m) {
      const Eigen::Vector3d c(ux(rng), uy(rng), uz(rng));
      const Eigen::Vector3d dir(normal(rng), normal(rng), normal(rng));
      for (int i = 0; i < v; ++i) {
        const double g = std::exp(-(mb.vertices[i] - c).squaredNorm() / (2 * 0.3 * 0.3));
        field.segment<3>(3 * i) += g * dir;
      }
    }
    const double a0 = normal(rng), a1 = normal(rng);
    for (int i = 0; i < v; ++i) {
      field.segment<3>(3 * i) += 2.0 * (a0 + a1 * mb.vertices[i].y()) * mb.outward[i];
    }
    for (int prev = 0; prev < b; ++prev) {
      const Eigen::VectorXd p = basis.row(prev).transpose();
      field -= field.dot(p) / p.squaredNorm() * p;
    }
    basis.row(b) = field.normalized().transpose() * (0.02 * std::sqrt(static_cast<double>(v)));
  }
  asset.shape_basis = basis;
  asset.validate();
  return asset;
}

}  // namespace fhmr::body
