// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#include "mmpos/measurement.hpp"

#include <Eigen/Cholesky>
#include <cmath>

#include "mmpos/rng.hpp"

namespace mmpos {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

bool is_azimuth_component(int i) {
  return i == kDoaAzComponent || i == kDodAzComponent;
}

void check_positive_definite(const Matrix5d& sigma) {
  if (!sigma.isApprox(sigma.transpose(), 1e-12)) {
    throw std::invalid_argument("measurement covariance must be symmetric");
  }
  Eigen::LLT<Matrix5d> llt(sigma);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument(
        "measurement covariance must be positive definite");
  }
}

}  // namespace

Matrix5d NoiseSpec::sigma() const {
  if (sigma_override) return *sigma_override;
  Matrix5d s = Matrix5d::Zero();
  s(0, 0) = toa_std * toa_std;
  for (int i = 1; i < 5; ++i) s(i, i) = angle_std * angle_std;
  return s;
}

MeasurementSet generate_measurements(const Scenario& scenario,
                                     const NoiseSpec& noise,
                                     std::uint64_t seed) {
  const Matrix5d sigma = noise.sigma();
  const bool noiseless = sigma.isZero(0.0);
  if (!noiseless) check_positive_definite(sigma);

  Eigen::LLT<Matrix5d> llt(sigma);
  const Matrix5d chol =
      noiseless ? Matrix5d::Zero() : Matrix5d(llt.matrixL());

  Rng rng(derive_seed(seed, 0x6d656173ULL));
  MeasurementSet set;
  int id = 0;
  for (const ChannelParams& eta : forward_model_all(scenario)) {
    Vector5d n;
    for (int i = 0; i < 5; ++i) n(i) = rng.normal();
    Vector5d z = eta.vec() + chol * n;
    for (int i = 0; i < 5; ++i) {
      if (is_azimuth_component(i)) z(i) = wrap_angle(z(i));
    }
    // Elevations stay in range at the configured noise scales; clamp anyway
    // so downstream asin/atan2 inversions always see a valid value.
    z(kDoaElComponent) = std::clamp(z(kDoaElComponent), -M_PI_2, M_PI_2);
    z(kDodElComponent) = std::clamp(z(kDodElComponent), -M_PI_2, M_PI_2);
    Measurement m;
    m.z = z;
    m.sigma = sigma;
    m.id = id++;
    set.measurements.push_back(m);
  }

  // Fisher-Yates shuffle so consumers cannot infer the source from position.
  for (std::size_t i = set.measurements.size(); i > 1; --i) {
    std::swap(set.measurements[i - 1], set.measurements[rng.index(i)]);
  }
  return set;
}

std::vector<int> generation_sources(const Scenario& scenario) {
  std::vector<int> sources;
  if (scenario.los) sources.push_back(kLosPath);
  for (const auto& va : scenario.vas) sources.push_back(va.id);
  return sources;
}

double log_likelihood(const Vector5d& z, const Vector5d& eta,
                      const Matrix5d& sigma, const ComponentMask& mask) {
  int k = 0;
  for (bool b : mask) k += b ? 1 : 0;
  if (k == 0) return 0.0;

  Eigen::VectorXd r(k);
  Eigen::MatrixXd s(k, k);
  int ii = 0;
  for (int i = 0; i < 5; ++i) {
    if (!mask[i]) continue;
    double d = z(i) - eta(i);
    if (is_azimuth_component(i)) d = wrap_angle(d);
    r(ii) = d;
    int jj = 0;
    for (int j = 0; j < 5; ++j) {
      if (!mask[j]) continue;
      s(ii, jj++) = sigma(i, j);
    }
    ++ii;
  }

  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument(
        "masked measurement covariance must be positive definite");
  }
  const Eigen::VectorXd half = llt.matrixL().solve(r);
  double log_det = 0.0;
  for (int i = 0; i < k; ++i) log_det += std::log(llt.matrixL()(i, i));
  return -0.5 * (k * kLog2Pi + half.squaredNorm()) - log_det;
}

}  // namespace mmpos
