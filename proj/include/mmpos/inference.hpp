// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#ifndef MMPOS_INFERENCE_HPP
#define MMPOS_INFERENCE_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmpos/association.hpp"
#include "mmpos/measurement.hpp"
#include "mmpos/rng.hpp"

namespace mmpos {

/// Thrown when a message or belief degenerates to all-zero weights after the
/// bandwidth-inflation retries; carries the offending factor or variable.
struct ResampleFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Weighted-sample representation of a marginal density. Positions are 2-D
/// (horizontal, vertical coordinate known), bias and orientation 1-D; the
/// orientation lives on the circle.
struct ParticleBelief {
  Eigen::MatrixXd samples;        // N x d
  Eigen::VectorXd weights;        // normalized, length N
  Eigen::VectorXd kde_bandwidth;  // per dimension
  bool circular = false;

  int size() const { return static_cast<int>(samples.rows()); }
  int dim() const { return static_cast<int>(samples.cols()); }
};

struct PointEstimate {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Weighted mean and covariance; circular mean for orientation beliefs.
PointEstimate point_estimate(const ParticleBelief& belief);

/// Variable identity inside one factor graph.
struct VarRef {
  enum class Kind { UePosition, Orientation, Bias, VaPosition };
  Kind kind = Kind::UePosition;
  int va_index = -1;  // meaningful for VaPosition

  static VarRef ue() { return {Kind::UePosition, -1}; }
  static VarRef orientation() { return {Kind::Orientation, -1}; }
  static VarRef bias() { return {Kind::Bias, -1}; }
  static VarRef va(int idx) { return {Kind::VaPosition, idx}; }
};

/// One likelihood factor. Each path contributes three: the TOA scalar, the
/// DOA pair (el, az) and the DOD pair (el, az). With a diagonal measurement
/// covariance the pair factors are products of two Gaussians.
struct Factor {
  enum class Kind { Toa, Doa, Dod };
  Kind kind = Kind::Toa;
  int path = 0;       // path index, measurement order
  bool los = false;   // anchor is the BS; no VA variable
  int va_index = -1;  // NLOS: index of the path's VA variable

  double z_toa = 0.0, sigma_toa = 0.1;
  double z_el = 0.0, z_az = 0.0, sigma_el = 0.01, sigma_az = 0.01;

  bool touches_bias() const { return kind == Kind::Toa; }
  bool touches_orientation() const { return kind == Kind::Doa; }
  std::string name() const;
};

/// Prior attached to one VA variable of the graph: Gaussian when the
/// association matched a known VA, the uniform new-VA box otherwise.
struct VaNodePrior {
  bool gaussian = true;
  Gaussian2D gauss;
  UniformBox box;
};

/// Factor graph of the single-epoch posterior after data association.
/// Variables: x_ue, alpha, B and one x_va per NLOS path.
struct FactorGraph {
  Eigen::Vector3d bs = Eigen::Vector3d::Zero();
  double ue_z = 0.0;
  double va_z = 0.0;

  std::vector<Factor> factors;
  int n_vas = 0;

  Gaussian2D ue_prior;
  Gaussian1D orientation_prior;
  Gaussian1D bias_prior;
  std::vector<VaNodePrior> va_priors;  // size n_vas

  bool has_los() const;
};

/// Assembles the graph from associated measurements. Measurements labeled
/// NewVa get the uniform-box prior; the LOS-labeled measurement (if any)
/// contributes the three direct-path factors. Throws on an empty set.
FactorGraph build_factor_graph(const MeasurementSet& set,
                               const Assignment& assignment,
                               const PriorSpec& priors,
                               const Eigen::Vector3d& bs);

struct BpOptions {
  int iterations = 10;
  int particles = 2000;
  int message_support = 256;  // particle count of factor->variable messages
  std::uint64_t seed = 1;
};

struct VariableSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct IterationSummary {
  VariableSummary ue;
  VariableSummary orientation;
  VariableSummary bias;
  std::vector<VariableSummary> vas;
};

struct BpResult {
  std::vector<IterationSummary> iterations;
  ParticleBelief ue;
  ParticleBelief orientation;
  ParticleBelief bias;
  std::vector<ParticleBelief> vas;
};

/// Executes the message-passing schedule: step 0 fuses the UE prior with the
/// LOS-DOD message once, then `iterations` rounds of steps 1-4. Returns the
/// final beliefs (product of prior and all incoming messages) plus a
/// per-iteration summary trace.
BpResult run_bp(const FactorGraph& graph, const BpOptions& options);

/// Incoming variable->factor messages of a factor's neighbor variables.
/// Only the members matching the factor's scope are consulted.
struct FactorInputs {
  const ParticleBelief* ue = nullptr;
  const ParticleBelief* va = nullptr;
  const ParticleBelief* bias = nullptr;
  const ParticleBelief* orientation = nullptr;
};

/// Message from a factor to one of its variables, realized by importance
/// sampling: joint draws from the incoming messages, inverse-geometry
/// projection onto the target, Jacobian-corrected weights. Wrong-side joint
/// draws are discarded for NLOS factors.
ParticleBelief factor_to_variable_message(const FactorGraph& graph,
                                          const Factor& factor,
                                          const VarRef& target,
                                          const FactorInputs& inputs,
                                          int n_out, Rng& rng);

/// Message from a variable to a factor: the product of the variable's prior
/// and all incoming messages except the target's, sampled at a common
/// candidate set with kernel-density evaluation.
ParticleBelief variable_to_factor_message(
    const FactorGraph& graph, const VarRef& variable,
    const std::vector<const ParticleBelief*>& incoming, int exclude_index,
    int n_out, Rng& rng);

}  // namespace mmpos

#endif  // MMPOS_INFERENCE_HPP
