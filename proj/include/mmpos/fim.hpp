// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#ifndef MMPOS_FIM_HPP
#define MMPOS_FIM_HPP

#include <cstdint>
#include <vector>

#include "mmpos/association.hpp"
#include "mmpos/measurement.hpp"

namespace mmpos {

/// Scene used for Fisher-information analysis: the UE state plus the anchors
/// of the present paths. The location-parameter vector is laid out as
/// [x_ue (3), alpha, B, x_va_1 (3), ..., x_va_{L-1} (3)].
struct FimScene {
  Eigen::Vector3d bs = Eigen::Vector3d::Zero();
  UEState ue;
  std::vector<Eigen::Vector3d> vas;  // NLOS anchors, path order
  bool los = true;

  int n_paths() const { return (los ? 1 : 0) + static_cast<int>(vas.size()); }
  int zeta_dim() const { return 5 + 3 * static_cast<int>(vas.size()); }
};

/// Analytic Jacobian d eta / d zeta, 5 rows per path in the fixed component
/// order (toa, doa_el, doa_az, dod_el, dod_az).
Eigen::MatrixXd fim_jacobian(const FimScene& scene);

/// Channel-parameter FIM: blkdiag of per-path Sigma^-1.
Eigen::MatrixXd channel_fim(const FimScene& scene, const NoiseSpec& noise);

/// Location-parameter FIM: J = grad^T blkdiag(Sigma^-1) grad.
Eigen::MatrixXd location_fim(const FimScene& scene, const NoiseSpec& noise);

/// Which location parameters are treated as known (removed from zeta) in the
/// non-Bayesian analysis.
struct KnownParams {
  bool map = false;   // all VA positions known
  bool bias = false;  // clock bias known
};

/// Indices of the retained zeta entries under `known`, in layout order.
std::vector<int> zeta_indices(const FimScene& scene, const KnownParams& known);

/// Rows/columns of `j` restricted to the retained parameters.
Eigen::MatrixXd reduce_fim(const Eigen::MatrixXd& j, const FimScene& scene,
                           const KnownParams& known);

/// Diagonal prior precision in the full zeta layout. Zero entries encode no
/// prior; the UE and VA vertical coordinates carry precision `z_precision`
/// (perfect vertical knowledge).
struct HybridPriors {
  double ue_position_std = 3.2;     // horizontal
  double orientation_std = M_PI / 2;
  double clock_bias_std = 100.0;
  std::vector<double> va_stds;      // per NLOS path; <=0 means no prior
  double z_precision = 1e12;

  Eigen::VectorXd precision_diag(const FimScene& scene) const;
};

/// J_hybrid = J + J_prior for a fixed parameter value.
Eigen::MatrixXd hybrid_fim(const Eigen::MatrixXd& j_location,
                           const Eigen::VectorXd& prior_precision_diag);

/// Error bounds extracted from the inverse FIM. Singular information yields
/// infinite bounds with identifiable = false; the pseudo-inverse values are
/// still reported with `pseudo_inverse` set.
struct BoundSet {
  double peb = 0.0;
  double oeb = 0.0;
  double beb = 0.0;
  std::vector<double> vaeb;
  bool identifiable = true;
  bool pseudo_inverse = false;
};

/// Extracts PEB/OEB/BEB/VAEB from a FIM over the retained parameters of
/// `scene` under `known`. Rank deficiency is judged by the smallest singular
/// value relative to the largest (threshold 1e-9); with `rank_gate` false
/// (hybrid FIMs, whose prior precisions legitimately span many decades) the
/// test runs on the diagonally balanced matrix instead.
BoundSet bounds(const Eigen::MatrixXd& j, const FimScene& scene,
                const KnownParams& known = {}, bool rank_gate = true);

struct FimResult {
  Eigen::MatrixXd j_channel;
  Eigen::MatrixXd jacobian;
  Eigen::MatrixXd j_location;  // reduced per KnownParams
  BoundSet location_bounds;
  bool identifiable = false;
};

FimResult analyze_scene(const FimScene& scene, const NoiseSpec& noise,
                        const KnownParams& known = {});

struct IdentConfig {
  bool los = true;
  int n_nlos = 0;
  bool known_map = false;
  bool known_bias = false;
};

struct IdentRow {
  IdentConfig config;
  bool identifiable = false;
  BoundSet bounds;
};

/// Evaluates identifiability and bounds over path configurations. The first
/// n_nlos anchors come from the scenario VA list; extra anchors are placed
/// uniformly in `box` at the BS height, at least 1 m away from the BS.
std::vector<IdentRow> identifiability_table(
    const Scenario& scenario, const NoiseSpec& noise,
    const std::vector<IdentConfig>& configs, const UniformBox& box,
    std::uint64_t seed);

}  // namespace mmpos

#endif  // MMPOS_FIM_HPP
