// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#include "mmpos/geometry.hpp"

#include <cmath>

namespace mmpos {

namespace {
constexpr double kUnitNormTol = 1e-9;
constexpr double kDegenerateTol = 1e-12;
}  // namespace

const VirtualAnchor& Scenario::va_by_id(int id) const {
  for (const auto& va : vas) {
    if (va.id == id) return va;
  }
  throw std::invalid_argument("scenario has no virtual anchor with id " +
                              std::to_string(id));
}

double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * M_PI);
  if (w <= -M_PI) w += 2.0 * M_PI;
  return w;
}

double azimuth(const Eigen::Vector3d& v, bool* degenerate) {
  const double h = std::hypot(v.x(), v.y());
  if (degenerate) *degenerate = false;
  if (h < kDegenerateTol) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return std::atan2(v.y(), v.x());
}

double elevation(const Eigen::Vector3d& v) {
  return std::atan2(v.z(), std::hypot(v.x(), v.y()));
}

Eigen::Vector3d va_from_surface(const ReflectingSurface& surface,
                                const Eigen::Vector3d& bs) {
  const Eigen::Vector3d& u = surface.normal_u;
  if (std::abs(u.norm() - 1.0) > kUnitNormTol) {
    throw std::invalid_argument("surface normal must be a unit vector");
  }
  // Householder reflection plus translation onto the plane.
  return bs - 2.0 * u.dot(bs) * u + 2.0 * surface.point_f.dot(u) * u;
}

ReflectingSurface surface_from_va(const Eigen::Vector3d& va,
                                  const Eigen::Vector3d& bs) {
  const Eigen::Vector3d d = bs - va;
  const double n = d.norm();
  if (n < kDegenerateTol) {
    throw DegenerateGeometry("virtual anchor coincides with the base station");
  }
  ReflectingSurface s;
  s.normal_u = d / n;
  s.point_f = 0.5 * (bs + va);
  return s;
}

Eigen::Vector3d incidence_point(const Eigen::Vector3d& va,
                                const Eigen::Vector3d& ue,
                                const Eigen::Vector3d& bs) {
  const ReflectingSurface s = surface_from_va(va, bs);
  const Eigen::Vector3d w = ue - va;
  const double denom = w.dot(s.normal_u);
  if (std::abs(denom) < kDegenerateTol) {
    throw DegenerateGeometry("UE lies in the reflecting plane through the VA");
  }
  const double num = (s.point_f - va).dot(s.normal_u);
  return va + (num / denom) * w;
}

namespace {

// Direction angles of `v` with the azimuth rotated into the UE frame when
// `frame_rotation` is nonzero.
void direction_angles(const Eigen::Vector3d& v, double frame_rotation,
                      double* el, double* az, bool* degenerate) {
  bool deg = false;
  double a = azimuth(v, &deg);
  *el = elevation(v);
  *az = wrap_angle(a - frame_rotation);
  if (deg) *az = 0.0;
  if (degenerate) *degenerate = *degenerate || deg;
}

}  // namespace

ChannelParams forward_model(const UEState& state,
                            const std::optional<VirtualAnchor>& va,
                            const Eigen::Vector3d& bs) {
  const Eigen::Vector3d& ue = state.position;
  if ((ue - bs).norm() < kDegenerateTol) {
    throw DegenerateGeometry("UE coincides with the base station");
  }

  ChannelParams p;
  if (!va) {
    p.source_va = kLosPath;
    p.toa = (bs - ue).norm() + state.clock_bias;
    // DOD from the BS toward the UE; DOA at the UE toward the BS, azimuth in
    // the vehicle frame. az(bs - ue) equals pi + az(ue - bs) after wrapping.
    direction_angles(ue - bs, 0.0, &p.dod_el, &p.dod_az, &p.degenerate_azimuth);
    direction_angles(bs - ue, state.orientation, &p.doa_el, &p.doa_az,
                     &p.degenerate_azimuth);
  } else {
    const Eigen::Vector3d& x_va = va->position;
    const Eigen::Vector3d x_s = incidence_point(x_va, ue, bs);
    p.source_va = va->id;
    p.toa = (x_va - ue).norm() + state.clock_bias;
    direction_angles(x_s - bs, 0.0, &p.dod_el, &p.dod_az,
                     &p.degenerate_azimuth);
    direction_angles(x_va - ue, state.orientation, &p.doa_el, &p.doa_az,
                     &p.degenerate_azimuth);
  }
  return p;
}

std::vector<ChannelParams> forward_model_all(const Scenario& scenario) {
  std::vector<ChannelParams> out;
  if (scenario.los) {
    out.push_back(forward_model(scenario.ue, std::nullopt, scenario.bs));
  }
  for (const auto& va : scenario.vas) {
    out.push_back(forward_model(scenario.ue, va, scenario.bs));
  }
  return out;
}

bool ue_on_bs_side(const Eigen::Vector3d& ue, const Eigen::Vector3d& va,
                   const Eigen::Vector3d& bs) {
  // (x_ue - x_s)^T (x_bs - x_va) has the sign of the UE's signed distance
  // from the plane, measured toward the BS side.
  const ReflectingSurface s = surface_from_va(va, bs);
  return (ue - s.point_f).dot(s.normal_u) >= 0.0;
}

}  // namespace mmpos
