#include <doctest.h>

#include <cmath>
#include <random>

#include "fhmr/body_model.hpp"
#include "fhmr/losses.hpp"
#include "fhmr/model.hpp"
#include "fhmr/rasterizer.hpp"
#include "fhmr/synth_data.hpp"
#include "../support/gradcheck.hpp"

using namespace fhmr;
using fhmr::testing::grad_check;

namespace {

const body::BodyModelAsset& toy() {
  static const body::BodyModelAsset asset = body::make_toy_asset(0);
  return asset;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.channels = 8;
  c.field_width = 8;
  c.field_layers = 2;
  c.samples_per_ray = 4;
  c.feature_map_res = 2;
  c.point_octaves = 2;
  c.direction_octaves = 1;
  c.regressor_width = 16;
  c.regressor_iterations = 2;
  return c;
}

std::vector<LabeledExample> examples(int n, double fraction_3d, uint64_t seed, int image_size = 16) {
  synth::DatasetManifest m;
  m.seed = seed;
  m.n_train = n;
  m.n_val = 1;
  m.image_size = image_size;
  m.fraction_3d = fraction_3d;
  return synth::generate_dataset(m, toy()).train;
}

Batch as_batch(const std::vector<LabeledExample>& v) {
  Batch b;
  for (const auto& e : v) b.push_back(&e);
  return b;
}

Tensor from_rows(const std::vector<Eigen::MatrixXd>& rows) {
  const int64_t n = static_cast<int64_t>(rows.size()), r = rows[0].rows(), c = rows[0].cols();
  std::vector<double> v;
  for (const auto& m : rows)
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) v.push_back(m(i, j));
  return Tensor({n, r, c}, std::move(v));
}

// A prediction that reproduces the body parameters exactly, seen at `phis`.
ViewPrediction exact_prediction(const std::vector<body::BodyParams>& params, const std::vector<double>& phis) {
  ViewPrediction p;
  p.phis = phis;
  std::vector<Eigen::MatrixXd> joints, keypoints, vertices, shape;
  std::vector<Eigen::VectorXd> poses;
  for (const auto& bp : params) {
    const auto out = body::forward(toy(), bp);
    joints.push_back(out.joints3d);
    keypoints.push_back(out.keypoints2d);
    vertices.push_back(out.vertices);
    shape.push_back(bp.shape_beta.transpose());
    poses.push_back(bp.pose_theta);
  }
  p.joints3d = from_rows(joints);
  p.keypoints2d = from_rows(keypoints);
  p.vertices = from_rows(vertices);
  p.params.rotations = rotation_matrices(poses);
  p.params.shape = ops::reshape(from_rows(shape), {static_cast<int64_t>(params.size()), -1});
  return p;
}

body::BodyParams label_params(const LabeledExample& e, const body::Camera& cam) {
  body::BodyParams p = e.params();
  p.camera = cam;
  return p;
}

// Recovers the camera used for an example's keypoints.
body::Camera camera_of(const LabeledExample& e) {
  const Eigen::RowVector2d t = e.keypoints2d.row(0) - 0.75 * e.joints3d.row(0).leftCols<2>();
  return {0.75, t.x(), t.y()};
}

double frob2(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) { return (a - b).squaredNorm(); }

}  // namespace

TEST_CASE("canonical loss: zero at the labels, isolated keypoint term, loop oracle") {
  const auto data = examples(4, 1.0, 11);
  const Batch batch = as_batch(data);
  std::vector<body::BodyParams> params;
  for (const auto& e : data) params.push_back(label_params(e, camera_of(e)));
  const LossWeights w;
  ViewPrediction pred = exact_prediction(params, std::vector<double>(4, 0.0));
  const Tensor zero = canonical_loss(pred, batch, w);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(zero[i]) < 1e-20);

  // Perturb one keypoint of example 2 by v: loss = 300 |v|^2 there only.
  auto kp = pred.keypoints2d.mutable_values();
  const int nj = toy().num_regressed_joints();
  kp[(2 * nj + 3) * 2 + 0] += 0.01;
  kp[(2 * nj + 3) * 2 + 1] -= 0.02;
  const Tensor one = canonical_loss(pred, batch, w);
  CHECK(one[2] == doctest::Approx(300.0 * (0.01 * 0.01 + 0.02 * 0.02)).epsilon(1e-10));
  CHECK(std::abs(one[0]) < 1e-20);

  // Random prediction against a scalar oracle, with one example 2D-only.
  std::vector<LabeledExample> mixed = data;
  mixed[1] = examples(1, 0.0, 12)[0];
  const Batch mb = as_batch(mixed);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0.0, 0.3);
  std::vector<body::BodyParams> guess = params;
  for (auto& g : guess) {
    for (int i = 0; i < g.pose_theta.size(); ++i) g.pose_theta[i] += noise(rng);
    for (int i = 0; i < g.shape_beta.size(); ++i) g.shape_beta[i] += noise(rng);
    g.camera.tx += noise(rng);
  }
  const ViewPrediction rp = exact_prediction(guess, std::vector<double>(4, 0.0));
  const Tensor got = canonical_loss(rp, mb, w);
  for (int i = 0; i < 4; ++i) {
    const auto out = body::forward(toy(), guess[i]);
    const auto& e = mixed[i];
    double expect = w.keypoints2d * (out.keypoints2d - e.keypoints2d).squaredNorm();
    if (e.has_3d) {
      expect += w.joints3d * (out.joints3d - e.joints3d).squaredNorm();
      for (int k = 0; k < toy().num_joints(); ++k)
        expect += w.pose * frob2(body::rodrigues(guess[i].pose_theta.segment<3>(3 * k)),
                                 body::rodrigues(e.pose_theta.segment<3>(3 * k)));
      expect += w.shape * (guess[i].shape_beta - e.shape_beta).squaredNorm();
    }
    CHECK(got[i] == doctest::Approx(expect).epsilon(1e-10));
  }

  pred.phis[0] = 0.5;
  CHECK_THROWS_AS(canonical_loss(pred, batch, w), std::invalid_argument);
}

TEST_CASE("imagination loss: rotated ground truth, shape invariance, silhouette term") {
  const auto data = examples(3, 1.0, 21);
  const Batch batch = as_batch(data);
  const std::vector<double> phis = {0.0, 1.1, 4.0};
  const LossWeights w;

  // Predicting the ground truth turned by -phi costs nothing.
  std::vector<body::BodyParams> turned;
  for (size_t i = 0; i < data.size(); ++i) {
    body::BodyParams p = label_params(data[i], camera_of(data[i]));
    p.pose_theta = body::rotate_global_orient(p.pose_theta, phis[i]);
    turned.push_back(p);
  }
  ViewPrediction pred = exact_prediction(turned, phis);
  Tensor loss = imagination_loss(pred, batch, toy(), w);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(loss[i]) < 1e-18);

  // The unrotated prediction is penalised at phi != 0 only.
  std::vector<body::BodyParams> unturned;
  for (const auto& e : data) unturned.push_back(label_params(e, camera_of(e)));
  const Tensor stale = imagination_loss(exact_prediction(unturned, phis), batch, toy(), w);
  CHECK(std::abs(stale[0]) < 1e-18);
  CHECK(stale[1] > 1.0);
  CHECK(stale[2] > 1.0);

  // Oracle for the rotated targets on a noisy prediction.
  std::mt19937_64 rng(8);
  std::normal_distribution<double> noise(0.0, 0.2);
  std::vector<body::BodyParams> guess = turned;
  for (auto& g : guess) {
    for (int i = 0; i < g.pose_theta.size(); ++i) g.pose_theta[i] += noise(rng);
    for (int i = 0; i < g.shape_beta.size(); ++i) g.shape_beta[i] += noise(rng);
  }
  const Tensor got = imagination_loss(exact_prediction(guess, phis), batch, toy(), w);
  for (int i = 0; i < 3; ++i) {
    const auto out = body::forward(toy(), guess[i]);
    const auto& e = data[i];
    // Targets built independently: rotate the labelled joints and root.
    const Eigen::Matrix3d ry = body::rotation_about_vertical(-phis[i]);
    double expect = w.joints3d * (out.joints3d - e.joints3d * ry.transpose()).squaredNorm();
    for (int k = 0; k < toy().num_joints(); ++k) {
      Eigen::Matrix3d target = body::rodrigues(e.pose_theta.segment<3>(3 * k));
      if (k == 0) target = ry * target;
      expect += w.pose * frob2(body::rodrigues(guess[i].pose_theta.segment<3>(3 * k)), target);
    }
    expect += w.shape * (guess[i].shape_beta - e.shape_beta).squaredNorm();
    CHECK(got[i] == doctest::Approx(expect).epsilon(1e-10));
  }

  // Silhouette term: exact masks cost nothing, a flat 0.5 costs w / 4.
  const int size = 64;
  std::vector<double> masks;
  for (size_t i = 0; i < data.size(); ++i) {
    raster::SilhouetteFraming framing;
    framing.size = size;
    const auto m = raster::rasterize_gt_silhouette(toy(), data[i].params(), phis[i], framing);
    masks.insert(masks.end(), m.values.begin(), m.values.end());
  }
  pred.silhouette = Tensor({3, 1, size, size}, masks);
  loss = imagination_loss(pred, batch, toy(), w);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(loss[i]) < 1e-18);
  pred.silhouette = Tensor::full({3, 1, size, size}, 0.5);
  loss = imagination_loss(pred, batch, toy(), w);
  for (int i = 0; i < 3; ++i) CHECK(loss[i] == doctest::Approx(w.silhouette * 0.25).epsilon(1e-12));

  const auto flat = examples(1, 0.0, 2);
  Batch with_2d = batch;
  with_2d[0] = &flat[0];
  CHECK_THROWS_AS(imagination_loss(pred, with_2d, toy(), w), std::invalid_argument);
}

TEST_CASE("consistency loss: fixed point and oracle") {
  const auto data = examples(3, 1.0, 31);
  std::vector<body::BodyParams> first, second;
  const std::vector<double> phi1 = {0.3, 2.0, 5.5}, phi2 = {1.0, 0.1, 5.5};
  for (size_t i = 0; i < data.size(); ++i) {
    body::BodyParams p = label_params(data[i], camera_of(data[i]));
    first.push_back(p);
    p.pose_theta = body::rotate_global_orient(p.pose_theta, phi2[i] - phi1[i]);
    second.push_back(p);
  }
  const LossWeights w;
  const Tensor fixed = consistency_loss(exact_prediction(first, phi1), exact_prediction(second, phi2), w);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(fixed[i]) < 1e-18);

  // Symmetric under swapping the views.
  std::mt19937_64 rng(4);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (auto& s : second) {
    for (int i = 0; i < s.pose_theta.size(); ++i) s.pose_theta[i] += noise(rng);
    for (int i = 0; i < s.shape_beta.size(); ++i) s.shape_beta[i] += noise(rng);
  }
  const Tensor a = consistency_loss(exact_prediction(first, phi1), exact_prediction(second, phi2), w);
  const Tensor b = consistency_loss(exact_prediction(second, phi2), exact_prediction(first, phi1), w);
  for (int i = 0; i < 3; ++i) {
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-10));
    double expect = w.shape * (first[i].shape_beta - second[i].shape_beta).squaredNorm();
    for (int k = 0; k < toy().num_joints(); ++k) {
      Eigen::Matrix3d r1 = body::rodrigues(first[i].pose_theta.segment<3>(3 * k));
      if (k == 0) r1 = body::rotation_about_vertical(-(phi2[i] - phi1[i])) * r1;
      expect += w.pose * frob2(r1, body::rodrigues(second[i].pose_theta.segment<3>(3 * k)));
    }
    CHECK(a[i] == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("total loss dispatch and determinism") {
  HumanModel model(tiny_config(), toy(), 5);
  const LossWeights w;
  const auto only3d = examples(3, 1.0, 41);
  const auto only2d = examples(3, 0.0, 42);

  std::mt19937_64 rng(1);
  const auto t3 = total_loss(model, as_batch(only3d), w, {}, rng);
  CHECK(t3.breakdown.examples_3d == 3);
  CHECK(t3.breakdown.consistency == 0.0);
  CHECK(t3.breakdown.imagination > 0.0);

  const auto t2 = total_loss(model, as_batch(only2d), w, {}, rng);
  CHECK(t2.breakdown.examples_2d == 3);
  CHECK(t2.breakdown.imagination == 0.0);
  CHECK(t2.breakdown.consistency > 0.0);

  std::vector<LabeledExample> mixed = {only3d[0], only2d[0], only3d[1], only2d[1]};
  std::mt19937_64 r1(9), r2(9), r3(9);
  const auto a = total_loss(model, as_batch(mixed), w, {}, r1);
  const auto b = total_loss(model, as_batch(mixed), w, {}, r2);
  CHECK(a.breakdown.total == b.breakdown.total);
  CHECK(a.breakdown.total == doctest::Approx(a.breakdown.canonical + a.breakdown.imagination +
                                             a.breakdown.consistency)
                                 .epsilon(1e-12));

  // The canonical term does not depend on the switches or the random stream.
  const auto c = total_loss(model, as_batch(mixed), w, {false, false, false}, r3);
  CHECK(c.breakdown.canonical == a.breakdown.canonical);
  CHECK(c.breakdown.total == c.breakdown.canonical);
  CHECK(r1() == r3());
}

TEST_CASE("total loss gradients reach every parameter group") {
  HumanModel model(tiny_config(), toy(), 7);
  const auto e3 = examples(2, 1.0, 51);
  const auto e2 = examples(2, 0.0, 52);
  const std::vector<LabeledExample> mixed = {e3[0], e2[0], e3[1], e2[1]};
  const Batch batch = as_batch(mixed);
  LossWeights w;
  auto loss = [&] {
    std::mt19937_64 rng(17);
    return total_loss(model, batch, w, {}, rng).value;
  };
  const int64_t calls_before = model.decoder_calls();
  for (const auto& [name, param] : model.store().parameters()) {
    CAPTURE(name);
    const auto r = fhmr::testing::directional_check(loss, param);
    // Biases feeding a batch norm are cancelled by it: both sides vanish.
    if (r.analytic < 1e-12)
      CHECK(r.worst_absolute < 1e-9);
    else
      CHECK(r.worst_relative < 1e-4);
  }
  CHECK(model.decoder_calls() > calls_before);

  // The test-time path never evaluates the decoder.
  const int64_t calls = model.decoder_calls();
  std::vector<const std::vector<uint8_t>*> images = {&mixed[0].image, &mixed[1].image};
  const auto pred = model.infer(images_to_tensor(images, 16));
  CHECK(!pred.silhouette.defined());
  CHECK(model.decoder_calls() == calls);
  const auto views = model.infer_views(images_to_tensor({&mixed[0].image}, 16), {0.0, 1.0, 2.0});
  CHECK(views.joints3d.dim(0) == 3);
  CHECK(model.decoder_calls() == calls);
}
