// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#ifndef MMPOS_GEOMETRY_HPP
#define MMPOS_GEOMETRY_HPP

#include <Eigen/Dense>
#include <optional>
#include <stdexcept>
#include <vector>

namespace mmpos {

using Vector5d = Eigen::Matrix<double, 5, 1>;
using Matrix5d = Eigen::Matrix<double, 5, 5>;

/// Path label for the direct base-station path; reflected paths carry the id
/// of their virtual anchor.
inline constexpr int kLosPath = -1;

/// Thrown when a geometric construction is undefined (coincident points,
/// ray parallel to a surface, zero-length normal projections).
struct DegenerateGeometry : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Vehicle state: position in meters, heading about the vertical axis in
/// radians, and clock bias expressed as a range offset in meters (c * bias).
struct UEState {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  double orientation = 0.0;  // (-pi, pi]
  double clock_bias = 0.0;   // meters
};

/// Planar reflector given by a point on the plane and a unit normal.
struct ReflectingSurface {
  Eigen::Vector3d point_f = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal_u = Eigen::Vector3d::UnitX();
};

/// Mirror image of the base station across a reflecting surface. A specular
/// reflection behaves as a direct path from this point.
struct VirtualAnchor {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  int id = 0;
};

/// Channel parameters of one propagation path. Angles are radians; the TOA is
/// range-equivalent (c * delay) in meters and includes the clock bias.
/// The 5-vector ordering (toa, doa_el, doa_az, dod_el, dod_az) is fixed
/// project-wide.
struct ChannelParams {
  double toa = 0.0;
  double doa_el = 0.0;
  double doa_az = 0.0;
  double dod_el = 0.0;
  double dod_az = 0.0;
  int source_va = kLosPath;
  /// Set when an azimuth was undefined (path along the vertical axis); the
  /// azimuth is reported as 0 in that case.
  bool degenerate_azimuth = false;

  Vector5d vec() const {
    Vector5d v;
    v << toa, doa_el, doa_az, dod_el, dod_az;
    return v;
  }
};

/// Ground-truth world: one base station, the virtual anchors of the
/// reflecting surfaces, and the true vehicle state.
struct Scenario {
  Eigen::Vector3d bs = Eigen::Vector3d::Zero();
  std::vector<VirtualAnchor> vas;
  UEState ue;
  bool los = true;

  const VirtualAnchor& va_by_id(int id) const;
};

/// Wraps an angle to (-pi, pi].
double wrap_angle(double a);

/// Azimuth (four-quadrant) and elevation of a direction vector. A vertical
/// direction has no azimuth; `degenerate` is set and 0 returned.
double azimuth(const Eigen::Vector3d& v, bool* degenerate = nullptr);
double elevation(const Eigen::Vector3d& v);

/// Mirror image of the base station across the surface:
/// x = (I - 2 u u^T) x_bs + 2 (f^T u) u.
Eigen::Vector3d va_from_surface(const ReflectingSurface& surface,
                                const Eigen::Vector3d& bs);

/// Recovers the surface from a virtual anchor: normal from VA toward the BS,
/// point at the midpoint. Inverse of va_from_surface.
ReflectingSurface surface_from_va(const Eigen::Vector3d& va,
                                  const Eigen::Vector3d& bs);

/// Point where the VA-UE line crosses the reflecting surface; the physical
/// reflection point of the path.
Eigen::Vector3d incidence_point(const Eigen::Vector3d& va,
                                const Eigen::Vector3d& ue,
                                const Eigen::Vector3d& bs);

/// Channel parameters of the direct path (va == nullopt) or of the specular
/// path via the given virtual anchor.
ChannelParams forward_model(const UEState& state,
                            const std::optional<VirtualAnchor>& va,
                            const Eigen::Vector3d& bs);

/// All present paths of a scenario in generation order (LOS first, then VAs
/// in listed order).
std::vector<ChannelParams> forward_model_all(const Scenario& scenario);

/// True when the UE is on the base-station side of the surface associated
/// with `va`, i.e. (x_ue - x_s)^T (x_bs - x_va) >= 0. Samples violating this
/// describe a reflection from the wrong side and have zero likelihood.
bool ue_on_bs_side(const Eigen::Vector3d& ue, const Eigen::Vector3d& va,
                   const Eigen::Vector3d& bs);

}  // namespace mmpos

#endif  // MMPOS_GEOMETRY_HPP
