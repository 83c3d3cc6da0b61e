// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#ifndef MMPOS_MEASUREMENT_HPP
#define MMPOS_MEASUREMENT_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "mmpos/geometry.hpp"

namespace mmpos {

/// Selects which components of the 5-vector (toa, doa_el, doa_az, dod_el,
/// dod_az) enter a likelihood. Used to reproduce the association variants
/// that ignore TOA and/or azimuth DOA.
using ComponentMask = std::array<bool, 5>;

inline constexpr ComponentMask kAllComponents = {true, true, true, true, true};

inline constexpr int kToaComponent = 0;
inline constexpr int kDoaElComponent = 1;
inline constexpr int kDoaAzComponent = 2;
inline constexpr int kDodElComponent = 3;
inline constexpr int kDodAzComponent = 4;

/// One noisy channel-parameter estimate. `id` is the generation index; it
/// identifies the true source via generation_sources() and is never consulted
/// by estimators.
struct Measurement {
  Vector5d z = Vector5d::Zero();
  Matrix5d sigma = Matrix5d::Identity();
  int id = 0;
};

/// Unordered collection of path measurements, presented in randomized order.
struct MeasurementSet {
  std::vector<Measurement> measurements;

  std::size_t size() const { return measurements.size(); }
};

/// Per-path measurement covariance. Diagonal by default with the configured
/// TOA and angle standard deviations; an explicit 5x5 override wins.
struct NoiseSpec {
  double toa_std = 0.1;     // meters
  double angle_std = 0.01;  // radians
  std::optional<Matrix5d> sigma_override;

  Matrix5d sigma() const;
};

/// Draws z_l = eta_l + n_l, n_l ~ N(0, Sigma), wraps azimuths, and shuffles
/// the path order. Pure function of (scenario, noise, seed).
MeasurementSet generate_measurements(const Scenario& scenario,
                                     const NoiseSpec& noise,
                                     std::uint64_t seed);

/// True source of each generation index, in the same order used by
/// generate_measurements: kLosPath first when present, then VA ids in
/// scenario order.
std::vector<int> generation_sources(const Scenario& scenario);

/// Gaussian log-density of z around eta with azimuth residuals wrapped.
/// Includes the -1/2 log((2 pi)^k |Sigma|) constant over the masked
/// components.
double log_likelihood(const Vector5d& z, const Vector5d& eta,
                      const Matrix5d& sigma,
                      const ComponentMask& mask = kAllComponents);

}  // namespace mmpos

#endif  // MMPOS_MEASUREMENT_HPP
