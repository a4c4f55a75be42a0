#include <doctest.h>

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <random>

#include "fhmr/metrics.hpp"
#include "fhmr/model.hpp"
#include "../support/alignment_oracle.hpp"

using namespace fhmr;

namespace {

body::Points3 random_points(int n, std::mt19937_64& rng, double spread = 1.0) {
  std::normal_distribution<double> d(0.0, spread);
  body::Points3 p(n, 3);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = d(rng);
  return p;
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  Eigen::Quaterniond q(d(rng), d(rng), d(rng), d(rng));
  return q.normalized().toRotationMatrix();
}

}  // namespace

TEST_CASE("mpjpe: zero, translation invariance, loop oracle") {
  std::mt19937_64 rng(1);
  const auto gt = random_points(8, rng);
  CHECK(metrics::mpjpe(gt, gt) == 0.0);
  const body::Points3 shifted = gt.rowwise() + Eigen::RowVector3d(0.3, -2.0, 5.0);
  CHECK(metrics::mpjpe(shifted, gt) < 1e-14);

  for (int t = 0; t < 20; ++t) {
    const auto a = random_points(8, rng), b = random_points(8, rng);
    double sum = 0;
    for (int j = 0; j < 8; ++j) {
      double d2 = 0;
      for (int c = 0; c < 3; ++c) {
        const double d = (a(j, c) - a(0, c)) - (b(j, c) - b(0, c));
        d2 += d * d;
      }
      sum += std::sqrt(d2);
    }
    CHECK(metrics::mpjpe(a, b) == doctest::Approx(sum / 8).epsilon(1e-12));
  }
  CHECK_THROWS_AS(metrics::mpjpe(random_points(8, rng), random_points(7, rng)), std::invalid_argument);
}

TEST_CASE("pa_mpjpe: exact similarity, bound by mpjpe, SVD-free oracle") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> scale(0.2, 3.0), shift(-2.0, 2.0);
  for (int t = 0; t < 200; ++t) {
    const auto gt = random_points(8, rng);
    const Eigen::Matrix3d r = random_rotation(rng);
    const double s = scale(rng);
    const Eigen::RowVector3d tr(shift(rng), shift(rng), shift(rng));
    const body::Points3 pred = ((s * gt * r.transpose()).rowwise() + tr).eval();
    const auto pa = metrics::pa_mpjpe(pred, gt);
    CHECK(pa.value < 1e-8);
    CHECK(!pa.degenerate);
  }
  CHECK(metrics::pa_mpjpe(random_points(8, rng), random_points(8, rng)).value >= 0.0);

  for (int t = 0; t < 200; ++t) {
    const auto a = random_points(8, rng), b = random_points(8, rng);
    const auto pa = metrics::pa_mpjpe(a, b);
    CHECK(pa.value <= metrics::mpjpe(a, b) + 1e-9);

    const auto oracle = fhmr::testing::horn_alignment(a, b);
    const body::Points3 aligned =
        ((oracle.scale * a * oracle.rotation.transpose()).rowwise() + oracle.translation.transpose()).eval();
    CHECK(pa.value == doctest::Approx((aligned - b).rowwise().norm().mean()).epsilon(1e-6));
    const auto sim = metrics::align(a, b);
    CHECK((sim.rotation - oracle.rotation).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(sim.scale == doctest::Approx(oracle.scale).epsilon(1e-6));
    CHECK(std::abs(sim.rotation.determinant() - 1.0) < 1e-12);
  }
}

TEST_CASE("pa_mpjpe flags collinear configurations") {
  body::Points3 line(5, 3);
  for (int i = 0; i < 5; ++i) line.row(i) = Eigen::RowVector3d(1.0, 2.0, -1.0) * i;
  std::mt19937_64 rng(3);
  const auto r = metrics::pa_mpjpe(random_points(5, rng), line);
  CHECK(r.degenerate);
  CHECK(std::isfinite(r.value));
  CHECK_THROWS_AS(metrics::pa_mpjpe(random_points(2, rng), random_points(2, rng)), std::invalid_argument);
}

TEST_CASE("pve: zero, uniform offset, loop oracle") {
  std::mt19937_64 rng(4);
  const auto gt = random_points(50, rng);
  CHECK(metrics::pve(gt, gt) == 0.0);
  const Eigen::RowVector3d dir = Eigen::RowVector3d(1, -2, 2) / 3.0;
  CHECK(metrics::pve(gt.rowwise() + 0.37 * dir, gt) == doctest::Approx(0.37).epsilon(1e-14));
  const auto pred = random_points(50, rng);
  double sum = 0;
  for (int i = 0; i < 50; ++i) sum += std::sqrt((pred.row(i) - gt.row(i)).squaredNorm());
  CHECK(metrics::pve(pred, gt) == doctest::Approx(sum / 50).epsilon(1e-12));
  CHECK_THROWS_AS(metrics::pve(pred, random_points(49, rng)), std::invalid_argument);
}

TEST_CASE("summaries are per-example and order independent") {
  std::mt19937_64 rng(5);
  std::vector<metrics::ExampleMetrics> ms;
  for (int i = 0; i < 5; ++i)
    ms.push_back(metrics::evaluate_example(random_points(8, rng), random_points(8, rng), random_points(20, rng),
                                           random_points(20, rng)));
  const auto a = metrics::summarize(ms);
  std::reverse(ms.begin(), ms.end());
  const auto b = metrics::summarize(ms);
  CHECK(a.mpjpe == doctest::Approx(b.mpjpe).epsilon(1e-14));
  CHECK(a.pa_mpjpe == doctest::Approx(b.pa_mpjpe).epsilon(1e-14));
  CHECK(a.pve == doctest::Approx(b.pve).epsilon(1e-14));
  for (const auto& m : a.per_example) CHECK(m.pa_mpjpe <= m.mpjpe + 1e-9);
}

TEST_CASE("esv on stubs") {
  const Eigen::VectorXd constant = Eigen::VectorXd::LinSpaced(10, -1, 1);
  const auto zero = metrics::esv([&](double) { return constant; });
  CHECK(zero.esv == 0.0);
  CHECK(zero.per_coefficient_sigma.size() == 10);

  int calls = 0;
  const auto unit = metrics::esv([&](double) {
    const double sign = (calls++ % 2 == 0) ? 1.0 : -1.0;
    return Eigen::VectorXd::Constant(10, sign);
  });
  CHECK(calls == 360);
  CHECK(unit.esv == doctest::Approx(1.0).epsilon(1e-12));
  for (double s : unit.per_coefficient_sigma) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));

  // Population statistic: independent of sweep order.
  std::vector<Eigen::VectorXd> shapes;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> d;
  for (int i = 0; i < 360; ++i) shapes.push_back(Eigen::VectorXd::NullaryExpr(4, [&] { return d(rng); }));
  const auto fwd = metrics::shape_spread(shapes);
  std::shuffle(shapes.begin(), shapes.end(), rng);
  const auto shuffled = metrics::shape_spread(shapes);
  CHECK(fwd.esv == doctest::Approx(shuffled.esv).epsilon(1e-12));
  double mean = 0;
  for (double s : fwd.per_coefficient_sigma) mean += s / 4;
  CHECK(fwd.esv == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("esv sweep through a model matches per-direction inference") {
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
  HumanModel model(c, body::make_toy_asset(0), 3);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> pixels(3 * 16 * 16);
  for (auto& p : pixels) p = u(rng);
  const Tensor image({1, 3, 16, 16}, pixels);

  const auto swept = metrics::esv(model, image, 30.0, 5);
  const auto direct = metrics::esv(
      [&](double phi) {
        const auto p = model.infer_views(image, {phi});
        Eigen::VectorXd s(p.params.shape.dim(1));
        for (int i = 0; i < s.size(); ++i) s[i] = p.params.shape[i];
        return s;
      },
      30.0);
  CHECK(swept.esv == doctest::Approx(direct.esv).epsilon(1e-9));
  CHECK(swept.esv > 0.0);
  CHECK(model.decoder_calls() == 0);
}
