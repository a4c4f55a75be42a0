#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "fhmr/body_model.hpp"
#include "fhmr/camera_rays.hpp"

using namespace fhmr::rays;

TEST_CASE("canonical single ray") {
  auto rays = make_rays(0.0, 1, 1);
  REQUIRE(rays.count() == 1);
  CHECK((rays.origins[0] - Eigen::Vector3d(0, 0, 2.5)).norm() < 1e-15);
  CHECK((rays.directions[0] - Eigen::Vector3d(0, 0, -1)).norm() < 1e-15);
  CHECK(rays.near == 1.3);
  CHECK(rays.far == 3.7);
  CHECK_THROWS_AS(make_rays(0.0, 0, 3), std::invalid_argument);
}

TEST_CASE("opposite azimuth mirrors x and z") {
  auto a = make_rays(0.0, 3, 5);
  auto b = make_rays(M_PI, 3, 5);
  for (int k = 0; k < a.count(); ++k) {
    const Eigen::Vector3d m(-a.directions[k].x(), a.directions[k].y(), -a.directions[k].z());
    CHECK((b.directions[k] - m).norm() < 1e-12);
  }
}

TEST_CASE("4x4 rays are unit and hit the bounding sphere") {
  for (double phi : {0.0, 0.7, 2.0, 4.5}) {
    auto rays = make_rays(phi, 4, 4);
    REQUIRE(rays.count() == 16);
    for (int k = 0; k < 16; ++k) {
      const Eigen::Vector3d& o = rays.origins[k];
      const Eigen::Vector3d& d = rays.directions[k];
      CHECK(std::abs(d.norm() - 1.0) < 1e-12);
      // |o + t d|^2 = r^2 has a real root with t > 0.
      const double b = o.dot(d), c = o.squaredNorm() - 1.2 * 1.2;
      const double disc = b * b - c;
      CHECK(disc > 0.0);
      CHECK(-b - std::sqrt(disc) > 0.0);
    }
  }
}

TEST_CASE("orbit is a group action") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ang(0, 2 * M_PI);
  const auto base = make_rays(0.0, 4, 4);
  for (int t = 0; t < 20; ++t) {
    const double phi = ang(rng);
    const auto rays = make_rays(phi, 4, 4);
    const Eigen::Matrix3d back = fhmr::body::rotation_about_vertical(-phi);
    for (int k = 0; k < 16; ++k) {
      CHECK((back * rays.origins[k] - base.origins[k]).norm() < 1e-6);
      CHECK((back * rays.directions[k] - base.directions[k]).norm() < 1e-6);
    }
  }
}

TEST_CASE("unstratified samples") {
  RayBundle rays;
  rays.height = rays.width = 1;
  rays.near = 1.0;
  rays.far = 3.0;
  rays.origins = {Eigen::Vector3d::Zero()};
  rays.directions = {Eigen::Vector3d(0, 0, -1)};
  std::mt19937_64 rng(0);
  auto s = sample_along(rays, 3, false, rng);
  CHECK(s.depths == std::vector<double>{1.0, 2.0, 3.0});
  CHECK(s.deltas[0] == doctest::Approx(1.0));
  CHECK(s.deltas[1] == doctest::Approx(1.0));
  CHECK(s.deltas[2] == doctest::Approx(2.0 / 3.0));
  CHECK((s.positions[1] - Eigen::Vector3d(0, 0, -2)).norm() < 1e-15);
  CHECK_THROWS_AS(sample_along(rays, 1, false, rng), std::invalid_argument);

  auto full = make_rays(1.0, 4, 4);
  auto many = sample_along(full, 32, false, rng);
  for (int r = 0; r < many.rays; ++r) {
    double total = 0.0;
    for (int n = 0; n < 32; ++n) {
      total += many.deltas[r * 32 + n];
      if (n > 0) CHECK(many.depths[r * 32 + n] > many.depths[r * 32 + n - 1]);
    }
    // Spacing sums to the span; the final delta adds one more bin width.
    CHECK(total == doctest::Approx(2.4 + 2.4 / 32).epsilon(1e-12));
  }
}

TEST_CASE("stratified samples stay in their bins and replay") {
  auto rays = make_rays(0.3, 2, 2);
  std::mt19937_64 rng(5);
  auto s = sample_along(rays, 8, true, rng);
  const double step = 2.4 / 7;
  for (int r = 0; r < s.rays; ++r) {
    for (int n = 0; n < 8; ++n) {
      const double centre = 1.3 + step * n;
      const double lo = n == 0 ? 1.3 : centre - step / 2, hi = n == 7 ? 3.7 : centre + step / 2;
      const double d = s.depths[r * 8 + n];
      CHECK(d >= lo);
      CHECK(d <= hi);
      CHECK(s.deltas[r * 8 + n] > 0.0);
    }
  }
  std::mt19937_64 a(99), b(99);
  auto s1 = sample_along(rays, 8, true, a);
  auto s2 = sample_along(rays, 8, true, b);
  CHECK(s1.depths == s2.depths);
  CHECK(s1.deltas == s2.deltas);
  CHECK(std::memcmp(s1.positions.data(), s2.positions.data(), s1.positions.size() * sizeof(Eigen::Vector3d)) == 0);
}

TEST_CASE("positional encoding") {
  auto e = positional_encode(0.0, 1);
  CHECK(e == std::vector<double>{0.0, 1.0, 0.0, 1.0});
  e = positional_encode(0.5, 0);
  REQUIRE(e.size() == 2);
  CHECK(e[0] == doctest::Approx(1.0));
  CHECK(std::abs(e[1]) < 1e-15);
  CHECK(encoded_width(10) == 66);
  CHECK(encoded_width(4) == 30);

  const Eigen::Vector3d v(0.3, -0.7, 0.11);
  std::vector<double> packed(encoded_width(4));
  encode_vector(v, 4, packed.data());
  for (int c = 0; c < 3; ++c) {
    auto single = positional_encode(v[c], 4);
    for (size_t i = 0; i < single.size(); ++i) CHECK(packed[c * 10 + i] == single[i]);
    for (int l = 0; l <= 4; ++l) CHECK(single[2 * l] == doctest::Approx(std::sin(std::pow(2.0, l) * v[c] * M_PI)));
  }
}
