// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#include "mmpos/fim.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <limits>

#include "mmpos/rng.hpp"

namespace mmpos {

namespace {

// Gradients of range/azimuth/elevation of a direction vector v.
Eigen::RowVector3d d_range(const Eigen::Vector3d& v) {
  return v.transpose() / v.norm();
}

Eigen::RowVector3d d_azimuth(const Eigen::Vector3d& v) {
  const double rho2 = v.x() * v.x() + v.y() * v.y();
  return {-v.y() / rho2, v.x() / rho2, 0.0};
}

Eigen::RowVector3d d_elevation(const Eigen::Vector3d& v) {
  const double rho = std::hypot(v.x(), v.y());
  const double r2 = v.squaredNorm();
  return {-v.x() * v.z() / (r2 * rho), -v.y() * v.z() / (r2 * rho), rho / r2};
}

struct IncidenceJacobians {
  Eigen::Vector3d x_s;
  Eigen::Matrix3d d_ue;
  Eigen::Matrix3d d_va;
};

// x_s = va + kappa (ue - va) with kappa = |v|^2 / (2 (ue - va)^T v),
// v = bs - va.
IncidenceJacobians incidence_jacobians(const Eigen::Vector3d& va,
                                       const Eigen::Vector3d& ue,
                                       const Eigen::Vector3d& bs) {
  const Eigen::Vector3d v = bs - va;
  const Eigen::Vector3d w = ue - va;
  const double c = v.squaredNorm();
  const double d = w.dot(v);
  if (std::abs(d) < 1e-12) {
    throw DegenerateGeometry("incidence point undefined for Jacobian");
  }
  const double kappa = c / (2.0 * d);

  IncidenceJacobians out;
  out.x_s = va + kappa * w;

  const Eigen::RowVector3d dk_due = -(c / (2.0 * d * d)) * v.transpose();
  out.d_ue = kappa * Eigen::Matrix3d::Identity() + w * dk_due;

  const Eigen::RowVector3d dk_dva =
      (-2.0 * v.transpose() * d + c * (v + w).transpose()) / (2.0 * d * d);
  out.d_va = (1.0 - kappa) * Eigen::Matrix3d::Identity() + w * dk_dva;
  return out;
}

}  // namespace

Eigen::MatrixXd fim_jacobian(const FimScene& scene) {
  const int n_paths = scene.n_paths();
  const int dim = scene.zeta_dim();
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(5 * n_paths, dim);

  const Eigen::Vector3d& ue = scene.ue.position;
  const Eigen::Vector3d& bs = scene.bs;
  constexpr int kAlpha = 3;
  constexpr int kBias = 4;

  int row = 0;
  int path = 0;
  if (scene.los) {
    const Eigen::Vector3d to_bs = bs - ue;  // DOA direction
    const Eigen::Vector3d to_ue = ue - bs;  // DOD direction
    // toa
    jac.block<1, 3>(row + 0, 0) = d_range(to_ue);
    jac(row + 0, kBias) = 1.0;
    // doa_el, doa_az (UE frame: azimuth shifted by -alpha)
    jac.block<1, 3>(row + 1, 0) = -d_elevation(to_bs);
    jac.block<1, 3>(row + 2, 0) = -d_azimuth(to_bs);
    jac(row + 2, kAlpha) = -1.0;
    // dod_el, dod_az
    jac.block<1, 3>(row + 3, 0) = d_elevation(to_ue);
    jac.block<1, 3>(row + 4, 0) = d_azimuth(to_ue);
    row += 5;
    ++path;
  }

  for (std::size_t m = 0; m < scene.vas.size(); ++m) {
    const Eigen::Vector3d& va = scene.vas[m];
    const int vcol = 5 + 3 * static_cast<int>(m);
    const Eigen::Vector3d to_va = va - ue;

    // toa = |va - ue| + B
    jac.block<1, 3>(row + 0, 0) = -d_range(to_va);
    jac.block<1, 3>(row + 0, vcol) = d_range(to_va);
    jac(row + 0, kBias) = 1.0;

    // doa via direction (va - ue), azimuth in the UE frame
    jac.block<1, 3>(row + 1, 0) = -d_elevation(to_va);
    jac.block<1, 3>(row + 1, vcol) = d_elevation(to_va);
    jac.block<1, 3>(row + 2, 0) = -d_azimuth(to_va);
    jac.block<1, 3>(row + 2, vcol) = d_azimuth(to_va);
    jac(row + 2, kAlpha) = -1.0;

    // dod via the incidence point
    const IncidenceJacobians inc = incidence_jacobians(va, ue, bs);
    const Eigen::Vector3d w_s = inc.x_s - bs;
    jac.block<1, 3>(row + 3, 0) = d_elevation(w_s) * inc.d_ue;
    jac.block<1, 3>(row + 3, vcol) = d_elevation(w_s) * inc.d_va;
    jac.block<1, 3>(row + 4, 0) = d_azimuth(w_s) * inc.d_ue;
    jac.block<1, 3>(row + 4, vcol) = d_azimuth(w_s) * inc.d_va;

    row += 5;
    ++path;
  }
  (void)path;
  return jac;
}

Eigen::MatrixXd channel_fim(const FimScene& scene, const NoiseSpec& noise) {
  const int n_paths = scene.n_paths();
  const Matrix5d sigma_inv = noise.sigma().inverse();
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(5 * n_paths, 5 * n_paths);
  for (int p = 0; p < n_paths; ++p) {
    j.block<5, 5>(5 * p, 5 * p) = sigma_inv;
  }
  return j;
}

Eigen::MatrixXd location_fim(const FimScene& scene, const NoiseSpec& noise) {
  const Eigen::MatrixXd jac = fim_jacobian(scene);
  const Eigen::MatrixXd j_eta = channel_fim(scene, noise);
  return jac.transpose() * j_eta * jac;
}

std::vector<int> zeta_indices(const FimScene& scene, const KnownParams& known) {
  std::vector<int> idx = {0, 1, 2, 3};
  if (!known.bias) idx.push_back(4);
  if (!known.map) {
    for (int i = 5; i < scene.zeta_dim(); ++i) idx.push_back(i);
  }
  return idx;
}

Eigen::MatrixXd reduce_fim(const Eigen::MatrixXd& j, const FimScene& scene,
                           const KnownParams& known) {
  const std::vector<int> idx = zeta_indices(scene, known);
  Eigen::MatrixXd r(idx.size(), idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a) {
    for (std::size_t b = 0; b < idx.size(); ++b) {
      r(a, b) = j(idx[a], idx[b]);
    }
  }
  return r;
}

Eigen::VectorXd HybridPriors::precision_diag(const FimScene& scene) const {
  Eigen::VectorXd d = Eigen::VectorXd::Zero(scene.zeta_dim());
  const double ue_prec =
      ue_position_std > 0 ? 1.0 / (ue_position_std * ue_position_std) : 0.0;
  d(0) = ue_prec;
  d(1) = ue_prec;
  d(2) = z_precision;
  d(3) = orientation_std > 0 ? 1.0 / (orientation_std * orientation_std) : 0.0;
  d(4) = clock_bias_std > 0 ? 1.0 / (clock_bias_std * clock_bias_std) : 0.0;
  for (std::size_t m = 0; m < scene.vas.size(); ++m) {
    const double std = m < va_stds.size() ? va_stds[m] : 0.0;
    const double prec = std > 0 ? 1.0 / (std * std) : 0.0;
    d(5 + 3 * m + 0) = prec;
    d(5 + 3 * m + 1) = prec;
    d(5 + 3 * m + 2) = z_precision;
  }
  return d;
}

Eigen::MatrixXd hybrid_fim(const Eigen::MatrixXd& j_location,
                           const Eigen::VectorXd& prior_precision_diag) {
  if (j_location.rows() != prior_precision_diag.size()) {
    throw std::invalid_argument("prior precision dimension mismatch");
  }
  Eigen::MatrixXd j = j_location;
  j.diagonal() += prior_precision_diag;
  return j;
}

BoundSet bounds(const Eigen::MatrixXd& j, const FimScene& scene,
                const KnownParams& known, bool rank_gate) {
  constexpr double kRankTol = 1e-9;
  const std::vector<int> idx = zeta_indices(scene, known);
  if (j.rows() != static_cast<Eigen::Index>(idx.size())) {
    throw std::invalid_argument("FIM dimension does not match retained zeta");
  }

  // Diagonal balancing keeps the inversion accurate when prior precisions
  // span many orders of magnitude (known vertical coordinates).
  Eigen::VectorXd scale(j.rows());
  for (Eigen::Index i = 0; i < j.rows(); ++i) {
    scale(i) = 1.0 / std::sqrt(std::max(std::abs(j(i, i)), 1e-30));
  }
  const Eigen::MatrixXd balanced =
      scale.asDiagonal() * j * scale.asDiagonal();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(rank_gate ? j : balanced);
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double max_ev = ev.cwiseAbs().maxCoeff();

  BoundSet out;
  out.identifiable = max_ev > 0 && ev.minCoeff() > kRankTol * max_ev;

  Eigen::MatrixXd inv;
  if (out.identifiable) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esb(balanced);
    Eigen::MatrixXd binv = esb.operatorInverseSqrt();
    inv = scale.asDiagonal() * (binv * binv) * scale.asDiagonal();
  } else {
    // Moore-Penrose on the spectrum; reported values flagged as pseudo.
    out.pseudo_inverse = true;
    Eigen::VectorXd inv_ev(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
      inv_ev(i) = ev(i) > kRankTol * max_ev ? 1.0 / ev(i) : 0.0;
    }
    inv = es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
    if (!rank_gate) {
      inv = scale.asDiagonal() * inv * scale.asDiagonal();
    }
  }

  // Positions of the quantities inside the reduced matrix.
  const double inf = std::numeric_limits<double>::infinity();
  auto pos_of = [&idx](int zeta_index) -> int {
    for (std::size_t a = 0; a < idx.size(); ++a) {
      if (idx[a] == zeta_index) return static_cast<int>(a);
    }
    return -1;
  };

  out.peb = std::sqrt(inv.block<3, 3>(0, 0).trace());
  out.oeb = std::sqrt(inv(3, 3));
  const int b = pos_of(4);
  out.beb = b >= 0 ? std::sqrt(inv(b, b)) : 0.0;
  if (!known.map) {
    for (std::size_t m = 0; m < scene.vas.size(); ++m) {
      const int v = pos_of(5 + 3 * static_cast<int>(m));
      out.vaeb.push_back(std::sqrt(inv.block<3, 3>(v, v).trace()));
    }
  }
  if (!out.identifiable) {
    out.peb = inf;
    out.oeb = inf;
    if (b >= 0) out.beb = inf;
    for (double& v : out.vaeb) v = inf;
  }
  return out;
}

FimResult analyze_scene(const FimScene& scene, const NoiseSpec& noise,
                        const KnownParams& known) {
  FimResult r;
  r.jacobian = fim_jacobian(scene);
  r.j_channel = channel_fim(scene, noise);
  r.j_location =
      reduce_fim(r.jacobian.transpose() * r.j_channel * r.jacobian, scene, known);
  r.location_bounds = bounds(r.j_location, scene, known);
  r.identifiable = r.location_bounds.identifiable;
  return r;
}

std::vector<IdentRow> identifiability_table(
    const Scenario& scenario, const NoiseSpec& noise,
    const std::vector<IdentConfig>& configs, const UniformBox& box,
    std::uint64_t seed) {
  std::vector<IdentRow> rows;
  Rng rng(derive_seed(seed, 0x6964656eULL));

  int max_extra = 0;
  for (const auto& c : configs) {
    max_extra = std::max(
        max_extra, c.n_nlos - static_cast<int>(scenario.vas.size()));
  }
  // One shared pool of extra anchors so configs differ only in path count.
  std::vector<Eigen::Vector3d> extras;
  while (static_cast<int>(extras.size()) < max_extra) {
    Eigen::Vector3d p(rng.uniform(box.x_min, box.x_max),
                      rng.uniform(box.y_min, box.y_max), scenario.bs.z());
    if ((p - scenario.bs).norm() >= 1.0) extras.push_back(p);
  }

  for (const auto& c : configs) {
    FimScene scene;
    scene.bs = scenario.bs;
    scene.ue = scenario.ue;
    scene.los = c.los;
    for (int m = 0; m < c.n_nlos; ++m) {
      if (m < static_cast<int>(scenario.vas.size())) {
        scene.vas.push_back(scenario.vas[m].position);
      } else {
        scene.vas.push_back(extras[m - scenario.vas.size()]);
      }
    }
    KnownParams known{c.known_map, c.known_bias};
    IdentRow row;
    row.config = c;
    if (scene.n_paths() == 0) {
      row.identifiable = false;
      row.bounds.identifiable = false;
      const double inf = std::numeric_limits<double>::infinity();
      row.bounds.peb = inf;
      row.bounds.oeb = inf;
      row.bounds.beb = c.known_bias ? 0.0 : inf;
    } else {
      const FimResult r = analyze_scene(scene, noise, known);
      row.identifiable = r.identifiable;
      row.bounds = r.location_bounds;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mmpos
