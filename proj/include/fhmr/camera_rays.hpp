#pragma once

// Zero-elevation orbit camera, per-cell ray generation, sampling along rays
// and sinusoidal positional encoding.
//
// The camera for azimuth phi sits at R_y(phi) * (0, 0, orbit_radius) and
// looks at the origin with +y up, so phi = 0 looks down -z.

#include <random>
#include <vector>

#include <Eigen/Core>

namespace fhmr::rays {

struct OrbitGeometry {
  double orbit_radius = 2.5;
  double near = 1.3;
  double far = 3.7;
  double bounding_radius = 1.2;  // sphere enclosing the body in every pose

  // Square frustum whose half-angle is atan(bounding_radius / orbit_radius).
  double tan_half_angle() const { return bounding_radius / orbit_radius; }
  void validate() const;
};

// Rays stored row-major over the h x w grid.
struct RayBundle {
  int height = 0;
  int width = 0;
  double near = 0.0;
  double far = 0.0;
  std::vector<Eigen::Vector3d> origins;
  std::vector<Eigen::Vector3d> directions;

  int count() const { return height * width; }
};

// Per ray, `per_ray` samples ordered by depth. Index (r, n) maps to r * per_ray + n.
struct SamplePoints {
  int rays = 0;
  int per_ray = 0;
  std::vector<double> depths;
  std::vector<Eigen::Vector3d> positions;
  std::vector<double> deltas;  // distance to the next sample; the last uses (far - near) / per_ray
};

Eigen::Vector3d camera_position(double phi, const OrbitGeometry& geometry = {});

// One ray through the centre of each cell of an h x w grid on the image plane.
RayBundle make_rays(double phi, int h, int w, const OrbitGeometry& geometry = {});

// Unstratified: depths evenly spaced from near to far inclusive.
// Stratified: one uniform draw inside each bin around those depths.
SamplePoints sample_along(const RayBundle& rays, int n_s, bool stratified, std::mt19937_64& rng);

// (sin(2^0 v pi), cos(2^0 v pi), ..., sin(2^L v pi), cos(2^L v pi)).
std::vector<double> positional_encode(double value, int octaves);

inline int encoded_width(int octaves) { return 6 * (octaves + 1); }

// Writes the per-coordinate encoding of a 3-vector (x block, then y, then z)
// into out[0 .. encoded_width(octaves)).
void encode_vector(const Eigen::Vector3d& v, int octaves, double* out);

}  // namespace fhmr::rays
