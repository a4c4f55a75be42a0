#include "fhmr/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "fhmr/rasterizer.hpp"

namespace fhmr {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

// Squared L2 distance per batch entry -> [N].
Tensor per_example_sq(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "loss operands differ in shape: " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  return ops::sum_axis(ops::reshape(ops::square(ops::sub(a, b)), {a.dim(0), -1}), 1);
}

template <typename Rows>
Tensor stack_rows(const Batch& batch, int64_t rows, int64_t cols, Rows&& rows_of) {
  const int64_t n = static_cast<int64_t>(batch.size());
  std::vector<double> v(static_cast<size_t>(n * rows * cols), 0.0);
  for (int64_t b = 0; b < n; ++b) {
    const auto m = rows_of(*batch[b]);
    if (m.size() == 0) continue;
    require(m.rows() == rows && m.cols() == cols, "label has unexpected size");
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c) v[(b * rows + r) * cols + c] = m(r, c);
  }
  return Tensor({n, rows, cols}, std::move(v));
}

Tensor shape_targets(const Batch& batch, int64_t coeffs) {
  const int64_t n = static_cast<int64_t>(batch.size());
  std::vector<double> v(static_cast<size_t>(n * coeffs), 0.0);
  for (int64_t b = 0; b < n; ++b) {
    if (!batch[b]->has_3d) continue;
    require(batch[b]->shape_beta.size() == coeffs, "shape label has unexpected size");
    for (int64_t i = 0; i < coeffs; ++i) v[b * coeffs + i] = batch[b]->shape_beta[i];
  }
  return Tensor({n, coeffs}, std::move(v));
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {keypoints2d, joints3d, pose, shape, silhouette})
    require(v >= 0.0 && std::isfinite(v), "loss weights must be finite and non-negative");
}

Tensor rotation_matrices(const std::vector<Eigen::VectorXd>& poses) {
  require(!poses.empty(), "no poses given");
  const int64_t n = static_cast<int64_t>(poses.size());
  const int64_t k = poses[0].size() / 3;
  std::vector<double> v;
  v.reserve(static_cast<size_t>(n * k * 9));
  for (const auto& pose : poses) {
    require(pose.size() == 3 * k, "poses differ in joint count");
    for (int64_t j = 0; j < k; ++j) {
      const Eigen::Matrix3d r = body::rodrigues(pose.segment<3>(3 * j));
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) v.push_back(r(a, b));
    }
  }
  return Tensor({n, k, 3, 3}, std::move(v));
}

Tensor canonical_loss(const ViewPrediction& pred, const Batch& batch, const LossWeights& w) {
  const int64_t n = static_cast<int64_t>(batch.size());
  require(pred.keypoints2d.dim(0) == n, "prediction and batch sizes differ");
  for (double phi : pred.phis) require(phi == 0.0, "canonical loss needs predictions at phi = 0");
  const int64_t nj = pred.keypoints2d.dim(1), k = pred.params.rotations.dim(1), b = pred.params.shape.dim(1);

  const Tensor k2d = stack_rows(batch, nj, 2, [](const LabeledExample& e) { return e.keypoints2d; });
  Tensor loss = ops::scale(per_example_sq(pred.keypoints2d, k2d), w.keypoints2d);

  std::vector<double> mask(static_cast<size_t>(n));
  std::vector<Eigen::VectorXd> poses;
  for (int64_t i = 0; i < n; ++i) {
    mask[i] = batch[i]->has_3d ? 1.0 : 0.0;
    poses.push_back(batch[i]->has_3d ? batch[i]->pose_theta : Eigen::VectorXd::Zero(3 * k));
  }
  if (std::none_of(mask.begin(), mask.end(), [](double m) { return m > 0.0; })) return loss;

  const Tensor j3d = stack_rows(batch, nj, 3, [](const LabeledExample& e) {
    return e.has_3d ? body::Points3(e.joints3d) : body::Points3(0, 3);
  });
  Tensor three_d = ops::scale(per_example_sq(pred.joints3d, j3d), w.joints3d);
  three_d = ops::add(three_d, ops::scale(per_example_sq(pred.params.rotations, rotation_matrices(poses)), w.pose));
  three_d = ops::add(three_d, ops::scale(per_example_sq(pred.params.shape, shape_targets(batch, b)), w.shape));
  return ops::add(loss, ops::mul(three_d, Tensor({n}, std::move(mask))));
}

Tensor imagination_loss(const ViewPrediction& pred, const Batch& batch, const body::BodyModelAsset& asset,
                        const LossWeights& w) {
  const int64_t n = static_cast<int64_t>(batch.size());
  require(pred.joints3d.dim(0) == n && static_cast<int64_t>(pred.phis.size()) == n,
          "prediction and batch sizes differ");
  const int64_t nj = pred.joints3d.dim(1), b = pred.params.shape.dim(1);

  std::vector<double> joints(static_cast<size_t>(n * nj * 3));
  std::vector<Eigen::VectorXd> poses;
  for (int64_t i = 0; i < n; ++i) {
    const LabeledExample& e = *batch[i];
    require(e.has_3d, "imagination loss needs 3D labels");
    const body::Points3 turned = body::rotate_about_vertical(e.joints3d, -pred.phis[i]);
    std::copy(turned.data(), turned.data() + nj * 3, joints.begin() + i * nj * 3);
    poses.push_back(body::rotate_global_orient(e.pose_theta, pred.phis[i]));
  }
  Tensor loss = ops::scale(per_example_sq(pred.joints3d, Tensor({n, nj, 3}, std::move(joints))), w.joints3d);
  loss = ops::add(loss, ops::scale(per_example_sq(pred.params.rotations, rotation_matrices(poses)), w.pose));
  loss = ops::add(loss, ops::scale(per_example_sq(pred.params.shape, shape_targets(batch, b)), w.shape));

  if (pred.silhouette.defined()) {
    raster::SilhouetteFraming framing;
    framing.size = static_cast<int>(pred.silhouette.dim(2));
    const int64_t pixels = static_cast<int64_t>(framing.size) * framing.size;
    std::vector<double> masks(static_cast<size_t>(n * pixels));
    for (int64_t i = 0; i < n; ++i) {
      const auto m = raster::rasterize_gt_silhouette(asset, batch[i]->params(), pred.phis[i], framing);
      std::copy(m.values.begin(), m.values.end(), masks.begin() + i * pixels);
    }
    const Tensor target({n, 1, framing.size, framing.size}, std::move(masks));
    loss = ops::add(loss, ops::scale(per_example_sq(pred.silhouette, target), w.silhouette / pixels));
  }
  return loss;
}

Tensor consistency_loss(const ViewPrediction& first, const ViewPrediction& second, const LossWeights& w) {
  const int64_t n = first.params.rotations.dim(0), k = first.params.rotations.dim(1);
  require(second.params.rotations.dim(0) == n && first.phis.size() == second.phis.size() &&
              static_cast<int64_t>(first.phis.size()) == n,
          "consistency needs two predictions of the same batch");
  // Re-express the first view's global orientation for the second direction.
  std::vector<double> adjust;
  adjust.reserve(static_cast<size_t>(n * 9));
  for (int64_t i = 0; i < n; ++i) {
    const Eigen::Matrix3d r = body::rotation_about_vertical(-(second.phis[i] - first.phis[i]));
    for (int a = 0; a < 3; ++a)
      for (int c = 0; c < 3; ++c) adjust.push_back(r(a, c));
  }
  const Tensor global = ops::reshape(ops::slice(first.params.rotations, 1, 0, 1), {n, 3, 3});
  const Tensor turned = ops::reshape(ops::bmm(Tensor({n, 3, 3}, std::move(adjust)), global), {n, 1, 3, 3});
  const Tensor rotations =
      k > 1 ? ops::concat({turned, ops::slice(first.params.rotations, 1, 1, k)}, 1) : turned;
  Tensor loss = ops::scale(per_example_sq(rotations, second.params.rotations), w.pose);
  return ops::add(loss, ops::scale(per_example_sq(first.params.shape, second.params.shape), w.shape));
}

TotalLoss total_loss(HumanModel& model, const Batch& batch, const LossWeights& w, const LossSwitches& switches,
                     std::mt19937_64& rng) {
  require(!batch.empty(), "empty batch");
  const int64_t n = static_cast<int64_t>(batch.size());
  std::uniform_real_distribution<double> direction(0.0, 2.0 * M_PI);
  std::vector<int64_t> rows3d, rows2d;
  std::vector<double> phis3d, phis2d_first, phis2d_second;
  Batch batch3d;
  for (int64_t i = 0; i < n; ++i) {
    if (batch[i]->has_3d) {
      rows3d.push_back(i);
      batch3d.push_back(batch[i]);
      phis3d.push_back(direction(rng));
    } else {
      rows2d.push_back(i);
      phis2d_first.push_back(direction(rng));
      phis2d_second.push_back(direction(rng));
    }
  }

  // Separate sample streams per rendering pass.
  std::array<uint64_t, 4> pass_seed;
  for (auto& s : pass_seed) s = rng();
  std::mt19937_64 canonical_rng(pass_seed[0]), imagination_rng(pass_seed[1]), first_rng(pass_seed[2]),
      second_rng(pass_seed[3]);

  std::vector<const std::vector<uint8_t>*> images;
  for (const auto* e : batch) images.push_back(&e->image);
  const Tensor latent = model.encode(images_to_tensor(images, model.config().image_size), true);

  std::vector<int64_t> all(static_cast<size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  const ViewPrediction canonical = model.view(latent, all, std::vector<double>(all.size(), 0.0), true, false, canonical_rng);
  const Tensor canon = ops::sum(canonical_loss(canonical, batch, w));
  Tensor total = canon;

  TotalLoss out;
  out.breakdown.examples_3d = static_cast<int>(rows3d.size());
  out.breakdown.examples_2d = static_cast<int>(rows2d.size());
  out.breakdown.canonical = canon.item() / n;
  if (switches.imagination && !rows3d.empty()) {
    const ViewPrediction turned = model.view(latent, rows3d, phis3d, true, switches.silhouette, imagination_rng);
    const Tensor imag = ops::sum(imagination_loss(turned, batch3d, model.asset(), w));
    out.breakdown.imagination = imag.item() / n;
    total = ops::add(total, imag);
  }
  if (switches.consistency && !rows2d.empty()) {
    const ViewPrediction first = model.view(latent, rows2d, phis2d_first, true, false, first_rng);
    const ViewPrediction second = model.view(latent, rows2d, phis2d_second, true, false, second_rng);
    const Tensor cons = ops::sum(consistency_loss(first, second, w));
    out.breakdown.consistency = cons.item() / n;
    total = ops::add(total, cons);
  }
  out.value = ops::scale(total, 1.0 / n);
  out.breakdown.total = out.value.item();
  return out;
}

}  // namespace fhmr
