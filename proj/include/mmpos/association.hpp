// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#ifndef MMPOS_ASSOCIATION_HPP
#define MMPOS_ASSOCIATION_HPP

#include <cstdint>
#include <optional>
#include <vector>

#include "mmpos/measurement.hpp"

namespace mmpos {

/// Assignment label for a measurement explained as a previously unseen
/// virtual anchor.
inline constexpr int kNewVa = -2;

struct Gaussian1D {
  double mean = 0.0;
  double std = 1.0;
};

/// Isotropic horizontal Gaussian; the vertical coordinate is known.
struct Gaussian2D {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  double std = 1.0;
};

struct UniformBox {
  double x_min = -100.0;
  double x_max = 100.0;
  double y_min = -100.0;
  double y_max = 100.0;

  bool contains(double x, double y) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }
  double area() const { return (x_max - x_min) * (y_max - y_min); }
};

struct VaPrior {
  enum class Kind { Gaussian, Box, None };
  Kind kind = Kind::None;
  Gaussian2D gaussian;
  UniformBox box;
};

/// Factorized prior on the UE state and the VA positions. Standard
/// deviations of zero encode perfect knowledge (point-mass priors).
struct PriorSpec {
  Gaussian2D ue_position;
  double ue_z = 0.0;
  Gaussian1D orientation;
  Gaussian1D clock_bias;
  std::vector<std::pair<int, VaPrior>> va_priors;  // keyed by VA id
  double va_z = 0.0;
  UniformBox new_va_box;

  const VaPrior* find_va(int id) const;
  void validate() const;
};

/// Candidate source of a measurement: the base station (direct path), a VA
/// with prior information, or a brand-new VA.
struct SourceCandidate {
  enum class Kind { Los, Va, NewVa };
  Kind kind = Kind::Los;
  int va_id = kLosPath;

  static SourceCandidate los() { return {Kind::Los, kLosPath}; }
  static SourceCandidate va(int id) { return {Kind::Va, id}; }
  static SourceCandidate new_va() { return {Kind::NewVa, kNewVa}; }
  int label() const { return kind == Kind::NewVa ? kNewVa : va_id; }
};

/// Joint prior draw used by the association likelihoods.
struct JointSample {
  Eigen::Vector3d ue = Eigen::Vector3d::Zero();
  Eigen::Vector3d va = Eigen::Vector3d::Zero();
  double orientation = 0.0;
  double clock_bias = 0.0;
  bool degenerate = false;
};

/// Removes joint draws where the UE lies on the wrong side of the reflecting
/// surface (zero joint density). Degenerate draws (VA at the BS) are dropped
/// and counted via `n_degenerate` when given.
std::vector<JointSample> filter_invalid_samples(
    const std::vector<JointSample>& samples, const Eigen::Vector3d& bs,
    int* n_degenerate = nullptr);

/// Monte-Carlo estimate of E{ p(z | source, priors) } over prior draws of
/// (x_ue, alpha, B, x_va), restricted to the masked components. Wrong-side
/// draws contribute zero.
double expected_likelihood(const Measurement& z, const SourceCandidate& source,
                           const PriorSpec& priors, const Eigen::Vector3d& bs,
                           int n_samples, std::uint64_t rng_seed,
                           const ComponentMask& mask = kAllComponents);

/// Association cost matrix S = [S^D, beta_n * I_L].
struct CostMatrix {
  Eigen::MatrixXd s_d;  // L x M expected likelihoods
  double beta_n = 0.0;
  std::vector<SourceCandidate> columns;  // size M

  Eigen::MatrixXd full() const;
};

/// Builds S^D over the candidate columns (BS first, then every VA with a
/// prior). When beta_n is unset it defaults to half the smallest positive
/// S^D entry, below the minimum as the association rule requires.
CostMatrix build_cost_matrix(const MeasurementSet& set, const PriorSpec& priors,
                             const Eigen::Vector3d& bs,
                             std::optional<double> beta_n, int n_samples,
                             std::uint64_t seed,
                             const ComponentMask& mask = kAllComponents);

/// Per-measurement source labels, aligned with the measurement order of the
/// set the cost matrix was built from.
struct Assignment {
  std::vector<SourceCandidate> labels;
};

/// Exact maximizer of sum log S_{l,m} under one-source-per-measurement and
/// at-most-one-measurement-per-source constraints (Kuhn-Munkres). Zero
/// entries are floored at `likelihood_floor` before taking logs.
Assignment solve_assignment(const CostMatrix& s,
                            double likelihood_floor = 1e-300);

/// Minimum-cost rectangular assignment, rows <= columns; returns the column
/// matched to each row. O(rows^2 * cols).
std::vector<int> solve_min_cost_assignment(const Eigen::MatrixXd& cost);

/// Prior shape without means; per-trial means are drawn consistently around
/// the scenario truth (truth ~ prior).
struct PriorTemplate {
  double ue_position_std = 3.2;
  double orientation_std = M_PI / 2;
  double clock_bias_std = 100.0;
  struct VaEntry {
    int id = 0;
    VaPrior::Kind kind = VaPrior::Kind::Gaussian;
    double std = 10.0;
  };
  std::vector<VaEntry> vas;
  UniformBox new_va_box;
};

PriorSpec draw_priors(const Scenario& scenario, const PriorTemplate& tmpl,
                      std::uint64_t seed);

struct DaErrorConfig {
  Scenario scenario;
  NoiseSpec noise;  // covariance assumed by the association likelihoods
  /// Noise used to draw the measurements; defaults to `noise`. Lets tests
  /// feed exact measurements while evaluating under the nominal covariance.
  std::optional<NoiseSpec> generation_noise;
  PriorTemplate priors;
  ComponentMask mask = kAllComponents;
  int trials = 200;
  int mc_samples = 1000;
  std::uint64_t seed = 1;
  std::optional<double> beta_n;
};

/// Fraction of measurements whose assigned label differs from the generation
/// ground truth, averaged over Monte-Carlo trials. Measurements from VAs
/// without prior information are correctly explained by the NewVa label.
double da_error_probability(const DaErrorConfig& config);

/// Per-trial correctness indicators (one bool per measurement per trial),
/// for paired comparisons between association variants.
std::vector<std::vector<bool>> da_trial_outcomes(const DaErrorConfig& config);

}  // namespace mmpos

#endif  // MMPOS_ASSOCIATION_HPP
