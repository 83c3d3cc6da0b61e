// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "mmpos/measurement.hpp"

using namespace mmpos;

namespace {

Scenario va_scenario() {
  Scenario s;
  s.bs = {0.0, 0.0, 5.0};
  s.ue.position = {20.0, 10.0, 0.0};
  s.ue.orientation = 0.0;
  s.ue.clock_bias = 0.0;
  s.vas = {{{-20.0, 0.0, 5.0}, 1},
           {{80.0, 0.0, 5.0}, 2},
           {{0.0, -20.0, 5.0}, 3},
           {{0.0, 80.0, 5.0}, 4}};
  s.los = true;
  return s;
}

constexpr double kLog2Pi = 1.8378770664093453;

}  // namespace

TEST_CASE("zero covariance reproduces the forward model exactly") {
  const Scenario s = va_scenario();
  NoiseSpec noise;
  noise.sigma_override = Matrix5d::Zero();

  const MeasurementSet set = generate_measurements(s, noise, 42);
  REQUIRE(set.size() == 5);
  const auto etas = forward_model_all(s);
  for (const auto& m : set.measurements) {
    CHECK((m.z - etas[m.id].vec()).norm() == 0.0);
  }
}

TEST_CASE("the reference scenario yields 1 LOS + 4 NLOS measurements") {
  const MeasurementSet set = generate_measurements(va_scenario(), {}, 7);
  CHECK(set.size() == 5);

  std::set<int> ids;
  for (const auto& m : set.measurements) ids.insert(m.id);
  CHECK(ids.size() == 5);

  const auto sources = generation_sources(va_scenario());
  REQUIRE(sources.size() == 5);
  CHECK(sources[0] == kLosPath);
  CHECK(sources[1] == 1);
  CHECK(sources[4] == 4);
}

TEST_CASE("generation is a pure function of scenario, noise and seed") {
  const Scenario s = va_scenario();
  const MeasurementSet a = generate_measurements(s, {}, 123);
  const MeasurementSet b = generate_measurements(s, {}, 123);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.measurements[i].id == b.measurements[i].id);
    CHECK(a.measurements[i].z == b.measurements[i].z);
  }
  const MeasurementSet c = generate_measurements(s, {}, 124);
  bool any_different = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.measurements[i].z != c.measurements[i].z) any_different = true;
  }
  CHECK(any_different);
}

TEST_CASE("empirical TOA noise std matches the configured value") {
  Scenario s = va_scenario();
  s.vas.clear();  // LOS only, one measurement per draw
  const auto eta = forward_model_all(s)[0].vec();

  double sum = 0.0;
  double sum_sq = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const MeasurementSet set = generate_measurements(s, {}, 1000 + i);
    const double d = set.measurements[0].z(kToaComponent) - eta(kToaComponent);
    sum += d;
    sum_sq += d * d;
  }
  const double std = std::sqrt(sum_sq / n - (sum / n) * (sum / n));
  CHECK(std == doctest::Approx(0.1).epsilon(0.03));
}

TEST_CASE("non-PD covariance is rejected") {
  Matrix5d bad = Matrix5d::Identity();
  bad(0, 0) = -1.0;
  NoiseSpec noise;
  noise.sigma_override = bad;
  CHECK_THROWS_AS(generate_measurements(va_scenario(), noise, 1),
                  std::invalid_argument);
}

TEST_CASE("log_likelihood at the mean is the normalization constant") {
  Vector5d z;
  z << 22.9, 0.21, -2.67, -0.22, 0.46;
  const Matrix5d sigma = NoiseSpec{}.sigma();
  const double det = sigma.determinant();
  CHECK(log_likelihood(z, z, sigma) ==
        doctest::Approx(-0.5 * (5.0 * kLog2Pi + std::log(det))));
}

TEST_CASE("azimuth residuals are wrapped") {
  Vector5d eta = Vector5d::Zero();
  const Matrix5d sigma = Matrix5d::Identity();

  Vector5d z = eta;
  const double at_mean = log_likelihood(z, eta, sigma);
  z(kDoaAzComponent) += 2.0 * M_PI;
  z(kDodAzComponent) -= 4.0 * M_PI;
  CHECK(log_likelihood(z, eta, sigma) == doctest::Approx(at_mean));

  // Non-azimuth components are not wrapped.
  Vector5d z2 = eta;
  z2(kToaComponent) += 2.0 * M_PI;
  CHECK(log_likelihood(z2, eta, sigma) < at_mean - 1.0);
}

TEST_CASE("unit-std residual of all ones costs 2.5 nats") {
  const Matrix5d sigma = Matrix5d::Identity();
  Vector5d eta = Vector5d::Zero();
  Vector5d z = Vector5d::Ones();
  const double constant = -0.5 * 5.0 * kLog2Pi;
  CHECK(log_likelihood(z, eta, sigma) == doctest::Approx(constant - 2.5));
}

TEST_CASE("component masks restrict the density") {
  const Matrix5d sigma = NoiseSpec{}.sigma();
  Vector5d eta;
  eta << 22.9, 0.21, -2.67, -0.22, 0.46;
  Vector5d z = eta;
  z(kToaComponent) += 50.0;  // wildly off in TOA only

  ComponentMask no_toa = kAllComponents;
  no_toa[kToaComponent] = false;
  const double with_toa = log_likelihood(z, eta, sigma);
  const double without_toa = log_likelihood(z, eta, sigma, no_toa);
  CHECK(without_toa > with_toa + 100.0);

  // Masked constant: 4 remaining angle components with std 0.01.
  const double want =
      -0.5 * (4.0 * kLog2Pi + 4.0 * std::log(0.01 * 0.01));
  CHECK(without_toa == doctest::Approx(want));
}

TEST_CASE("1-D normalization against a grid integral") {
  const Matrix5d sigma = NoiseSpec{}.sigma();
  Vector5d eta;
  eta << 22.9, 0.21, -2.67, -0.22, 0.46;

  // Integrate exp(log_likelihood) over the TOA axis with the other
  // components fixed at the mean; compare to the 1-D Gaussian mass of the
  // remaining constant.
  const double h = 1e-3;
  double integral = 0.0;
  for (double d = -1.0; d <= 1.0; d += h) {
    Vector5d z = eta;
    z(kToaComponent) += d;
    integral += std::exp(log_likelihood(z, eta, sigma)) * h;
  }
  ComponentMask angles_only = kAllComponents;
  angles_only[kToaComponent] = false;
  const double density_at_mean =
      std::exp(log_likelihood(eta, eta, sigma, angles_only));
  CHECK(integral == doctest::Approx(density_at_mean).epsilon(1e-3));
}
