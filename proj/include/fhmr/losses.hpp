#pragma once

// Training objectives: canonical-view regression, arbitrary-view imagination
// and cross-view consistency, with label-dependent dispatch.
//
// Every distance is a squared L2 sum; rotations are compared as per-joint
// rotation matrices (squared Frobenius) and silhouettes as a per-pixel mean.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "fhmr/example.hpp"
#include "fhmr/model.hpp"

namespace fhmr {

struct LossWeights {
  double keypoints2d = 300.0;
  double joints3d = 300.0;
  double pose = 60.0;
  double shape = 0.06;
  double silhouette = 30.0;

  void validate() const;
};

// Which of the view-dependent objectives are active.
struct LossSwitches {
  bool imagination = true;
  bool consistency = true;
  bool silhouette = true;
};

using Batch = std::vector<const LabeledExample*>;

// Per-joint rotation matrices of axis-angle poses, [N, K, 3, 3].
Tensor rotation_matrices(const std::vector<Eigen::VectorXd>& poses);

// Per-example losses, shape [N]. The prediction must come from phi = 0.
// Examples without 3D labels contribute only the keypoint term.
Tensor canonical_loss(const ViewPrediction& pred, const Batch& batch, const LossWeights& w);

// Per-example losses at pred.phis against the ground truth rotated by -phi.
// Every example needs 3D labels. The silhouette term is used when
// pred.silhouette is defined; targets are rasterized from `asset`.
Tensor imagination_loss(const ViewPrediction& pred, const Batch& batch, const body::BodyModelAsset& asset,
                        const LossWeights& w);

// Per-example losses between two views of the same images.
Tensor consistency_loss(const ViewPrediction& first, const ViewPrediction& second, const LossWeights& w);

struct LossBreakdown {
  double total = 0.0;
  double canonical = 0.0;
  double imagination = 0.0;
  double consistency = 0.0;
  int examples_3d = 0;
  int examples_2d = 0;
};

struct TotalLoss {
  Tensor value;  // scalar
  LossBreakdown breakdown;
};

// Batch mean of: canonical loss always; for 3D examples one phi ~ U[0, 2pi)
// for imagination; for 2D examples a pair (phi1, phi2) for consistency.
// Directions are drawn for every example even when a term is switched off,
// so the random stream does not depend on the switches. Each rendering pass
// samples from its own stream seeded from `rng`.
TotalLoss total_loss(HumanModel& model, const Batch& batch, const LossWeights& w, const LossSwitches& switches,
                     std::mt19937_64& rng);

}  // namespace fhmr
