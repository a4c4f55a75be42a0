#pragma once

// Hard-coverage triangle rasterization for ground-truth silhouettes and the
// synthetic image renderer.

#include <array>
#include <cstdint>
#include <vector>

#include "fhmr/body_model.hpp"

namespace fhmr::raster {

// Square grid over normalized coordinates [-1, 1]^2, +y up. Row 0 is the top.
struct Mask {
  int size = 0;
  std::vector<uint8_t> values;  // 0 or 1, row-major

  double coverage() const;
  uint8_t at(int row, int col) const { return values[static_cast<size_t>(row) * size + col]; }
};

// A pixel is covered when its centre lies inside (or on the edge of) a
// triangle. Zero-area triangles are skipped.
Mask rasterize(const body::Points2& points, const std::vector<std::array<int, 3>>& faces, int size);

// Per pixel: index of the nearest face (largest z) or -1, and its depth.
struct DepthBuffer {
  int size = 0;
  std::vector<int> face;
  std::vector<double> depth;
};

DepthBuffer rasterize_depth(const body::Points3& points, const std::vector<std::array<int, 3>>& faces, int size);

// Orthographic framing: the body bounding sphere fills `fill` of the frame.
struct SilhouetteFraming {
  int size = 128;
  double bounding_radius = 1.2;
  double fill = 0.9;
};

Mask rasterize_mesh(const body::Points3& vertices, const std::vector<std::array<int, 3>>& faces,
                    const SilhouetteFraming& framing = {});

// Ground-truth silhouette seen from azimuth phi: the posed mesh rotated by
// R_y(-phi), then projected along z.
Mask rasterize_gt_silhouette(const body::BodyModelAsset& asset, const body::BodyParams& params, double phi,
                             const SilhouetteFraming& framing = {});

}  // namespace fhmr::raster
