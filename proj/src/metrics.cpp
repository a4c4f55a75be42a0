#include "fhmr/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/LU>
#include <Eigen/SVD>

#include "fhmr/model.hpp"

namespace fhmr::metrics {

namespace {

void same_shape(const body::Points3& a, const body::Points3& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("point sets differ in size: " + std::to_string(a.rows()) + " vs " +
                                std::to_string(b.rows()));
  if (a.rows() == 0) throw std::invalid_argument("empty point set");
}

double mean_distance(const body::Points3& a, const body::Points3& b) { return (a - b).rowwise().norm().mean(); }

bool collinear(const body::Points3& centered) {
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  const auto s = svd.singularValues();
  return s.size() < 2 || s(1) <= 1e-9 * std::max(s(0), 1e-300);
}

}  // namespace

double mpjpe(const body::Points3& pred, const body::Points3& gt, int root) {
  same_shape(pred, gt);
  if (root < 0 || root >= pred.rows()) throw std::invalid_argument("root joint out of range");
  return mean_distance(pred.rowwise() - pred.row(root), gt.rowwise() - gt.row(root));
}

body::Points3 Similarity::apply(const body::Points3& points) const {
  return ((scale * points * rotation.transpose()).rowwise() + translation.transpose()).eval();
}

Similarity align(const body::Points3& source, const body::Points3& target) {
  same_shape(source, target);
  if (source.rows() < 3) throw std::invalid_argument("alignment needs at least 3 points");
  const Eigen::RowVector3d mu_s = source.colwise().mean(), mu_t = target.colwise().mean();
  const body::Points3 xs = source.rowwise() - mu_s, xt = target.rowwise() - mu_t;
  const double n = static_cast<double>(source.rows());

  Similarity out;
  out.degenerate = collinear(xs) || collinear(xt);
  const Eigen::Matrix3d cov = xt.transpose() * xs / n;
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d sign = Eigen::Vector3d::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) sign(2) = -1.0;
  out.rotation = svd.matrixU() * sign.asDiagonal() * svd.matrixV().transpose();
  const double var_s = xs.squaredNorm() / n;
  out.scale = var_s > 0 ? svd.singularValues().dot(sign) / var_s : 1.0;
  out.translation = mu_t.transpose() - out.scale * out.rotation * mu_s.transpose();
  return out;
}

AlignedError pa_mpjpe(const body::Points3& pred, const body::Points3& gt) {
  const Similarity s = align(pred, gt);
  return {mean_distance(s.apply(pred), gt), s.degenerate};
}

double pve(const body::Points3& pred, const body::Points3& gt) {
  same_shape(pred, gt);
  return mean_distance(pred, gt);
}

ExampleMetrics evaluate_example(const body::Points3& pred_joints, const body::Points3& gt_joints,
                                const body::Points3& pred_vertices, const body::Points3& gt_vertices) {
  ExampleMetrics m;
  m.mpjpe = mpjpe(pred_joints, gt_joints);
  const auto pa = pa_mpjpe(pred_joints, gt_joints);
  m.pa_mpjpe = pa.value;
  m.degenerate = pa.degenerate;
  m.pve = pve(pred_vertices, gt_vertices);
  return m;
}

EvalReport summarize(std::vector<ExampleMetrics> per_example) {
  EvalReport r;
  r.per_example = std::move(per_example);
  if (r.per_example.empty()) return r;
  for (const auto& m : r.per_example) {
    r.mpjpe += m.mpjpe;
    r.pa_mpjpe += m.pa_mpjpe;
    r.pve += m.pve;
    r.degenerate += m.degenerate ? 1 : 0;
  }
  const double n = static_cast<double>(r.per_example.size());
  r.mpjpe /= n;
  r.pa_mpjpe /= n;
  r.pve /= n;
  return r;
}

ESVReport shape_spread(const std::vector<Eigen::VectorXd>& shapes) {
  if (shapes.empty()) throw std::invalid_argument("no shapes to summarize");
  const Eigen::Index b = shapes[0].size();
  // Offsets from the first shape keep a constant sequence exactly at zero.
  const Eigen::VectorXd origin = shapes[0];
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(b);
  for (const auto& s : shapes) {
    if (s.size() != b) throw std::invalid_argument("shapes differ in size");
    mean += s - origin;
  }
  mean /= static_cast<double>(shapes.size());
  Eigen::VectorXd var = Eigen::VectorXd::Zero(b);
  for (const auto& s : shapes) var += (s - origin - mean).cwiseAbs2();
  var /= static_cast<double>(shapes.size());

  ESVReport r;
  r.per_coefficient_sigma.resize(static_cast<size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) r.per_coefficient_sigma[i] = std::sqrt(var[i]);
  r.esv = b > 0 ? var.cwiseSqrt().mean() : 0.0;
  return r;
}

ESVReport esv(const std::function<Eigen::VectorXd(double phi)>& shape_at, double step_deg) {
  if (!(step_deg > 0.0 && step_deg <= 360.0)) throw std::invalid_argument("step must be in (0, 360]");
  const int steps = static_cast<int>(std::lround(360.0 / step_deg));
  std::vector<Eigen::VectorXd> shapes;
  shapes.reserve(static_cast<size_t>(steps));
  for (int i = 0; i < steps; ++i) shapes.push_back(shape_at(i * step_deg * M_PI / 180.0));
  return shape_spread(shapes);
}

ESVReport esv(HumanModel& model, const Tensor& image, double step_deg, int chunk) {
  if (!(step_deg > 0.0 && step_deg <= 360.0)) throw std::invalid_argument("step must be in (0, 360]");
  if (chunk < 1) throw std::invalid_argument("chunk must be positive");
  const int steps = static_cast<int>(std::lround(360.0 / step_deg));
  std::vector<Eigen::VectorXd> shapes;
  NoGradGuard guard;
  for (int start = 0; start < steps; start += chunk) {
    std::vector<double> phis;
    for (int i = start; i < std::min(steps, start + chunk); ++i) phis.push_back(i * step_deg * M_PI / 180.0);
    const auto pred = model.infer_views(image, phis);
    const int64_t b = pred.params.shape.dim(1);
    for (size_t v = 0; v < phis.size(); ++v) {
      Eigen::VectorXd s(b);
      for (int64_t i = 0; i < b; ++i) s[i] = pred.params.shape[static_cast<int64_t>(v) * b + i];
      shapes.push_back(std::move(s));
    }
  }
  return shape_spread(shapes);
}

ESVReport average(const std::vector<ESVReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("no reports to average");
  ESVReport r;
  r.per_coefficient_sigma.assign(reports[0].per_coefficient_sigma.size(), 0.0);
  for (const auto& x : reports) {
    if (x.per_coefficient_sigma.size() != r.per_coefficient_sigma.size())
      throw std::invalid_argument("reports differ in coefficient count");
    for (size_t i = 0; i < x.per_coefficient_sigma.size(); ++i) r.per_coefficient_sigma[i] += x.per_coefficient_sigma[i];
  }
  double sum = 0;
  for (auto& s : r.per_coefficient_sigma) {
    s /= static_cast<double>(reports.size());
    sum += s;
  }
  r.esv = r.per_coefficient_sigma.empty() ? 0.0 : sum / static_cast<double>(r.per_coefficient_sigma.size());
  return r;
}

}  // namespace fhmr::metrics
