#include "fhmr/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fhmr::raster {

namespace {

struct Pixel {
  double x, y;
};

// Normalized coordinates to continuous pixel units (column, row).
Pixel to_pixel(double x, double y, int size) { return {(x + 1.0) * 0.5 * size, (1.0 - y) * 0.5 * size}; }

double edge(const Pixel& a, const Pixel& b, double px, double py) {
  return (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
}

// Calls visit(row, col, barycentric weights) for every covered pixel centre.
template <typename Visit>
void scan_triangle(Pixel a, Pixel b, Pixel c, int size, Visit&& visit) {
  const double area = edge(a, b, c.x, c.y);
  if (area == 0.0 || !std::isfinite(area)) return;
  const double lo_x = std::min({a.x, b.x, c.x}), hi_x = std::max({a.x, b.x, c.x});
  const double lo_y = std::min({a.y, b.y, c.y}), hi_y = std::max({a.y, b.y, c.y});
  const int c0 = std::max(0, static_cast<int>(std::ceil(lo_x - 0.5)));
  const int c1 = std::min(size - 1, static_cast<int>(std::floor(hi_x - 0.5)));
  const int r0 = std::max(0, static_cast<int>(std::ceil(lo_y - 0.5)));
  const int r1 = std::min(size - 1, static_cast<int>(std::floor(hi_y - 0.5)));
  const double inv = 1.0 / area;
  for (int r = r0; r <= r1; ++r) {
    const double py = r + 0.5;
    for (int col = c0; col <= c1; ++col) {
      const double px = col + 0.5;
      const double wa = edge(b, c, px, py) * inv;
      const double wb = edge(c, a, px, py) * inv;
      const double wc = edge(a, b, px, py) * inv;
      if (wa >= 0.0 && wb >= 0.0 && wc >= 0.0) visit(r, col, wa, wb, wc);
    }
  }
}

void check_faces(const std::vector<std::array<int, 3>>& faces, Eigen::Index count) {
  for (const auto& f : faces)
    for (int v : f)
      if (v < 0 || v >= count) throw std::invalid_argument("face references a missing vertex");
}

}  // namespace

double Mask::coverage() const {
  if (values.empty()) return 0.0;
  size_t on = 0;
  for (uint8_t v : values) on += v;
  return static_cast<double>(on) / static_cast<double>(values.size());
}

Mask rasterize(const body::Points2& points, const std::vector<std::array<int, 3>>& faces, int size) {
  if (size < 1) throw std::invalid_argument("raster size must be positive");
  check_faces(faces, points.rows());
  Mask m;
  m.size = size;
  m.values.assign(static_cast<size_t>(size) * size, 0);
  for (const auto& f : faces) {
    const Pixel a = to_pixel(points(f[0], 0), points(f[0], 1), size);
    const Pixel b = to_pixel(points(f[1], 0), points(f[1], 1), size);
    const Pixel c = to_pixel(points(f[2], 0), points(f[2], 1), size);
    scan_triangle(a, b, c, size, [&](int r, int col, double, double, double) {
      m.values[static_cast<size_t>(r) * size + col] = 1;
    });
  }
  return m;
}

DepthBuffer rasterize_depth(const body::Points3& points, const std::vector<std::array<int, 3>>& faces, int size) {
  if (size < 1) throw std::invalid_argument("raster size must be positive");
  check_faces(faces, points.rows());
  DepthBuffer buf;
  buf.size = size;
  buf.face.assign(static_cast<size_t>(size) * size, -1);
  buf.depth.assign(static_cast<size_t>(size) * size, -std::numeric_limits<double>::infinity());
  for (size_t fi = 0; fi < faces.size(); ++fi) {
    const auto& f = faces[fi];
    const Pixel a = to_pixel(points(f[0], 0), points(f[0], 1), size);
    const Pixel b = to_pixel(points(f[1], 0), points(f[1], 1), size);
    const Pixel c = to_pixel(points(f[2], 0), points(f[2], 1), size);
    const double za = points(f[0], 2), zb = points(f[1], 2), zc = points(f[2], 2);
    scan_triangle(a, b, c, size, [&](int r, int col, double wa, double wb, double wc) {
      const size_t k = static_cast<size_t>(r) * size + col;
      const double z = wa * za + wb * zb + wc * zc;
      if (z > buf.depth[k]) {
        buf.depth[k] = z;
        buf.face[k] = static_cast<int>(fi);
      }
    });
  }
  return buf;
}

Mask rasterize_mesh(const body::Points3& vertices, const std::vector<std::array<int, 3>>& faces,
                    const SilhouetteFraming& framing) {
  const double k = framing.fill / framing.bounding_radius;
  body::Points2 projected(vertices.rows(), 2);
  projected.col(0) = k * vertices.col(0);
  projected.col(1) = k * vertices.col(1);
  return rasterize(projected, faces, framing.size);
}

Mask rasterize_gt_silhouette(const body::BodyModelAsset& asset, const body::BodyParams& params, double phi,
                             const SilhouetteFraming& framing) {
  const body::Points3 mesh = body::forward(asset, params).vertices;
  return rasterize_mesh(body::rotate_about_vertical(mesh, -phi), asset.faces, framing);
}

}  // namespace fhmr::raster
