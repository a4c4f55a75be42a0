#pragma once

// Evaluation metrics. Lengths are in body-model units.

#include <functional>
#include <vector>

#include <Eigen/Core>

#include "fhmr/body_model.hpp"
#include "fhmr/tensor.hpp"

namespace fhmr {
class HumanModel;
}

namespace fhmr::metrics {

// Mean joint distance after subtracting each set's root joint.
double mpjpe(const body::Points3& pred, const body::Points3& gt, int root = 0);

// Similarity transform with target ~= scale * rotation * source + translation.
struct Similarity {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  double scale = 1.0;
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  bool degenerate = false;  // either point set is (nearly) collinear

  body::Points3 apply(const body::Points3& points) const;
};

// Least-squares similarity alignment (orthogonal Procrustes with scale).
Similarity align(const body::Points3& source, const body::Points3& target);

struct AlignedError {
  double value = 0.0;
  bool degenerate = false;
};

// Mean joint distance after aligning pred onto gt.
AlignedError pa_mpjpe(const body::Points3& pred, const body::Points3& gt);

// Mean vertex distance, no alignment.
double pve(const body::Points3& pred, const body::Points3& gt);

struct ExampleMetrics {
  double mpjpe = 0.0;
  double pa_mpjpe = 0.0;
  double pve = 0.0;
  bool degenerate = false;
};

struct EvalReport {
  std::vector<ExampleMetrics> per_example;
  double mpjpe = 0.0;
  double pa_mpjpe = 0.0;
  double pve = 0.0;
  int degenerate = 0;
};

ExampleMetrics evaluate_example(const body::Points3& pred_joints, const body::Points3& gt_joints,
                                const body::Points3& pred_vertices, const body::Points3& gt_vertices);
EvalReport summarize(std::vector<ExampleMetrics> per_example);

struct ESVReport {
  std::vector<double> per_coefficient_sigma;
  double esv = 0.0;
};

// Population standard deviation of each coefficient over the given shapes,
// and its mean.
ESVReport shape_spread(const std::vector<Eigen::VectorXd>& shapes);

// Sweeps phi = 0, step, ..., 360 - step degrees through `shape_at`.
ESVReport esv(const std::function<Eigen::VectorXd(double phi)>& shape_at, double step_deg = 1.0);

// The same sweep through the network for one image [1, 3, S, S], evaluated
// in chunks of `chunk` directions.
ESVReport esv(HumanModel& model, const Tensor& image, double step_deg = 1.0, int chunk = 60);

// Mean of per-coefficient spreads over several images.
ESVReport average(const std::vector<ESVReport>& reports);

}  // namespace fhmr::metrics
