#include "fhmr/camera_rays.hpp"

#include <cmath>
#include <stdexcept>

#include "fhmr/body_model.hpp"

namespace fhmr::rays {

void OrbitGeometry::validate() const {
  if (!(near > 0.0) || !(far > near)) throw std::invalid_argument("ray bounds need 0 < near < far");
  if (!(orbit_radius > bounding_radius) || !(bounding_radius > 0.0))
    throw std::invalid_argument("orbit radius must exceed the bounding radius");
}

Eigen::Vector3d camera_position(double phi, const OrbitGeometry& geometry) {
  return body::rotation_about_vertical(phi) * Eigen::Vector3d(0.0, 0.0, geometry.orbit_radius);
}

RayBundle make_rays(double phi, int h, int w, const OrbitGeometry& geometry) {
  if (h < 1 || w < 1) throw std::invalid_argument("ray grid must be at least 1x1");
  geometry.validate();
  const Eigen::Matrix3d turn = body::rotation_about_vertical(phi);
  const Eigen::Vector3d origin = turn * Eigen::Vector3d(0.0, 0.0, geometry.orbit_radius);
  const double t = geometry.tan_half_angle();

  RayBundle out;
  out.height = h;
  out.width = w;
  out.near = geometry.near;
  out.far = geometry.far;
  out.origins.assign(static_cast<size_t>(h * w), origin);
  out.directions.reserve(static_cast<size_t>(h * w));
  for (int i = 0; i < h; ++i) {
    const double v = (1.0 - 2.0 * (i + 0.5) / h) * t;
    for (int j = 0; j < w; ++j) {
      const double u = (2.0 * (j + 0.5) / w - 1.0) * t;
      out.directions.push_back(turn * Eigen::Vector3d(u, v, -1.0).normalized());
    }
  }
  return out;
}

SamplePoints sample_along(const RayBundle& rays, int n_s, bool stratified, std::mt19937_64& rng) {
  if (n_s < 2) throw std::invalid_argument("need at least two samples per ray");
  const double span = rays.far - rays.near;
  std::vector<double> grid(static_cast<size_t>(n_s));
  for (int n = 0; n < n_s; ++n) grid[n] = rays.near + span * n / (n_s - 1);

  SamplePoints out;
  out.rays = rays.count();
  out.per_ray = n_s;
  const size_t total = static_cast<size_t>(out.rays) * n_s;
  out.depths.resize(total);
  out.positions.resize(total);
  out.deltas.resize(total);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int r = 0; r < out.rays; ++r) {
    double* depth = &out.depths[static_cast<size_t>(r) * n_s];
    for (int n = 0; n < n_s; ++n) {
      if (!stratified) {
        depth[n] = grid[n];
        continue;
      }
      const double lo = n == 0 ? rays.near : 0.5 * (grid[n - 1] + grid[n]);
      const double hi = n == n_s - 1 ? rays.far : 0.5 * (grid[n] + grid[n + 1]);
      depth[n] = lo + (hi - lo) * unit(rng);
    }
    for (int n = 0; n < n_s; ++n) {
      const size_t k = static_cast<size_t>(r) * n_s + n;
      out.positions[k] = rays.origins[r] + depth[n] * rays.directions[r];
    }
    for (int n = 0; n < n_s; ++n) {
      const size_t k = static_cast<size_t>(r) * n_s + n;
      out.deltas[k] = n + 1 < n_s ? (out.positions[k + 1] - out.positions[k]).norm() : span / n_s;
    }
  }
  return out;
}

std::vector<double> positional_encode(double value, int octaves) {
  if (octaves < 0) throw std::invalid_argument("octaves must be non-negative");
  std::vector<double> out;
  out.reserve(2 * static_cast<size_t>(octaves + 1));
  for (int l = 0; l <= octaves; ++l) {
    const double arg = std::ldexp(value, l) * M_PI;
    out.push_back(std::sin(arg));
    out.push_back(std::cos(arg));
  }
  return out;
}

void encode_vector(const Eigen::Vector3d& v, int octaves, double* out) {
  for (int c = 0; c < 3; ++c) {
    for (int l = 0; l <= octaves; ++l) {
      const double arg = std::ldexp(v[c], l) * M_PI;
      *out++ = std::sin(arg);
      *out++ = std::cos(arg);
    }
  }
}

}  // namespace fhmr::rays
