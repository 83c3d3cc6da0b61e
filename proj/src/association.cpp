// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#include "mmpos/association.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmpos/rng.hpp"

namespace mmpos {

const VaPrior* PriorSpec::find_va(int id) const {
  for (const auto& [vid, prior] : va_priors) {
    if (vid == id) return &prior;
  }
  return nullptr;
}

void PriorSpec::validate() const {
  if (ue_position.std < 0 || orientation.std < 0 || clock_bias.std < 0) {
    throw std::invalid_argument("prior standard deviations must be >= 0");
  }
  for (const auto& [id, prior] : va_priors) {
    if (prior.kind == VaPrior::Kind::Gaussian && prior.gaussian.std < 0) {
      throw std::invalid_argument("VA prior std must be >= 0");
    }
    if (prior.kind == VaPrior::Kind::Box && prior.box.area() <= 0) {
      throw std::invalid_argument("VA prior box must be non-empty");
    }
  }
  if (new_va_box.area() <= 0) {
    throw std::invalid_argument("new-VA box must be non-empty");
  }
}

std::vector<JointSample> filter_invalid_samples(
    const std::vector<JointSample>& samples, const Eigen::Vector3d& bs,
    int* n_degenerate) {
  std::vector<JointSample> kept;
  kept.reserve(samples.size());
  int degenerate = 0;
  for (const auto& s : samples) {
    if (s.degenerate || (s.va - bs).norm() < 1e-12) {
      ++degenerate;
      continue;
    }
    if (ue_on_bs_side(s.ue, s.va, bs)) kept.push_back(s);
  }
  if (n_degenerate) *n_degenerate = degenerate;
  return kept;
}

namespace {

Eigen::Vector3d draw_ue(const PriorSpec& priors, Rng& rng) {
  return {priors.ue_position.mean.x() + priors.ue_position.std * rng.normal(),
          priors.ue_position.mean.y() + priors.ue_position.std * rng.normal(),
          priors.ue_z};
}

Eigen::Vector3d draw_va(const VaPrior& prior, const PriorSpec& priors,
                        Rng& rng) {
  switch (prior.kind) {
    case VaPrior::Kind::Gaussian:
      return {prior.gaussian.mean.x() + prior.gaussian.std * rng.normal(),
              prior.gaussian.mean.y() + prior.gaussian.std * rng.normal(),
              priors.va_z};
    case VaPrior::Kind::Box:
      return {rng.uniform(prior.box.x_min, prior.box.x_max),
              rng.uniform(prior.box.y_min, prior.box.y_max), priors.va_z};
    case VaPrior::Kind::None:
      break;
  }
  throw std::invalid_argument("candidate source has no prior");
}

}  // namespace

double expected_likelihood(const Measurement& z, const SourceCandidate& source,
                           const PriorSpec& priors, const Eigen::Vector3d& bs,
                           int n_samples, std::uint64_t rng_seed,
                           const ComponentMask& mask) {
  if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");

  const VaPrior* va_prior = nullptr;
  VaPrior box_prior;
  if (source.kind == SourceCandidate::Kind::Va) {
    va_prior = priors.find_va(source.va_id);
    if (!va_prior || va_prior->kind == VaPrior::Kind::None) {
      throw std::invalid_argument("candidate VA has no prior information");
    }
  } else if (source.kind == SourceCandidate::Kind::NewVa) {
    box_prior.kind = VaPrior::Kind::Box;
    box_prior.box = priors.new_va_box;
    va_prior = &box_prior;
  }

  Rng rng(rng_seed);
  double sum = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    UEState state;
    state.position = draw_ue(priors, rng);
    state.orientation =
        wrap_angle(priors.orientation.mean + priors.orientation.std * rng.normal());
    state.clock_bias = priors.clock_bias.mean + priors.clock_bias.std * rng.normal();

    std::optional<VirtualAnchor> va;
    if (va_prior) {
      VirtualAnchor anchor;
      anchor.position = draw_va(*va_prior, priors, rng);
      anchor.id = source.va_id;
      va = anchor;
      if ((anchor.position - bs).norm() < 1e-9) continue;  // degenerate draw
      if (!ue_on_bs_side(state.position, anchor.position, bs)) continue;
    }
    try {
      const ChannelParams eta = forward_model(state, va, bs);
      sum += std::exp(log_likelihood(z.z, eta.vec(), z.sigma, mask));
    } catch (const DegenerateGeometry&) {
      // zero contribution
    }
  }
  return sum / static_cast<double>(n_samples);
}

Eigen::MatrixXd CostMatrix::full() const {
  const Eigen::Index l = s_d.rows();
  const Eigen::Index m = s_d.cols();
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(l, m + l);
  f.leftCols(m) = s_d;
  f.rightCols(l) = beta_n * Eigen::MatrixXd::Identity(l, l);
  return f;
}

CostMatrix build_cost_matrix(const MeasurementSet& set, const PriorSpec& priors,
                             const Eigen::Vector3d& bs,
                             std::optional<double> beta_n, int n_samples,
                             std::uint64_t seed, const ComponentMask& mask) {
  if (set.size() < 1) throw std::invalid_argument("empty measurement set");

  CostMatrix cm;
  cm.columns.push_back(SourceCandidate::los());
  for (const auto& [id, prior] : priors.va_priors) {
    if (prior.kind != VaPrior::Kind::None) {
      cm.columns.push_back(SourceCandidate::va(id));
    }
  }

  const Eigen::Index l = static_cast<Eigen::Index>(set.size());
  const Eigen::Index m = static_cast<Eigen::Index>(cm.columns.size());
  cm.s_d.resize(l, m);
  for (Eigen::Index i = 0; i < l; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      cm.s_d(i, j) = expected_likelihood(
          set.measurements[i], cm.columns[j], priors, bs, n_samples,
          derive_seed(seed, static_cast<std::uint64_t>(i * 8192 + j)), mask);
    }
  }

  if (beta_n) {
    cm.beta_n = *beta_n;
  } else {
    double min_positive = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < l; ++i) {
      for (Eigen::Index j = 0; j < m; ++j) {
        if (cm.s_d(i, j) > 0.0) min_positive = std::min(min_positive, cm.s_d(i, j));
      }
    }
    cm.beta_n = std::isfinite(min_positive) ? 0.5 * min_positive : 1e-300;
  }
  return cm;
}

std::vector<int> solve_min_cost_assignment(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  if (n > m) throw std::invalid_argument("assignment needs rows <= columns");
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // Kuhn-Munkres with potentials and shortest augmenting paths (1-indexed).
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  }
  return row_to_col;
}

Assignment solve_assignment(const CostMatrix& s, double likelihood_floor) {
  const Eigen::MatrixXd full = s.full();
  Eigen::MatrixXd cost = full;
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    for (Eigen::Index j = 0; j < cost.cols(); ++j) {
      cost(i, j) = -std::log(std::max(full(i, j), likelihood_floor));
    }
  }
  const std::vector<int> cols = solve_min_cost_assignment(cost);

  Assignment a;
  const int m = static_cast<int>(s.columns.size());
  for (int col : cols) {
    a.labels.push_back(col < m ? s.columns[col] : SourceCandidate::new_va());
  }
  return a;
}

PriorSpec draw_priors(const Scenario& scenario, const PriorTemplate& tmpl,
                      std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x7072696fULL));
  PriorSpec p;
  p.ue_z = scenario.ue.position.z();
  p.va_z = scenario.bs.z();
  p.new_va_box = tmpl.new_va_box;

  p.ue_position.std = tmpl.ue_position_std;
  p.ue_position.mean =
      scenario.ue.position.head<2>() +
      tmpl.ue_position_std * Eigen::Vector2d(rng.normal(), rng.normal());
  p.orientation.std = tmpl.orientation_std;
  p.orientation.mean =
      wrap_angle(scenario.ue.orientation + tmpl.orientation_std * rng.normal());
  p.clock_bias.std = tmpl.clock_bias_std;
  p.clock_bias.mean =
      scenario.ue.clock_bias + tmpl.clock_bias_std * rng.normal();

  for (const auto& entry : tmpl.vas) {
    VaPrior prior;
    prior.kind = entry.kind;
    if (entry.kind == VaPrior::Kind::Gaussian) {
      const Eigen::Vector3d truth = scenario.va_by_id(entry.id).position;
      prior.gaussian.std = entry.std;
      prior.gaussian.mean =
          truth.head<2>() +
          entry.std * Eigen::Vector2d(rng.normal(), rng.normal());
    } else if (entry.kind == VaPrior::Kind::Box) {
      prior.box = tmpl.new_va_box;
    }
    p.va_priors.emplace_back(entry.id, prior);
  }
  return p;
}

std::vector<std::vector<bool>> da_trial_outcomes(const DaErrorConfig& config) {
  const std::vector<int> truth = generation_sources(config.scenario);
  std::vector<std::vector<bool>> outcomes;
  outcomes.reserve(config.trials);

  const NoiseSpec& gen_noise =
      config.generation_noise ? *config.generation_noise : config.noise;
  const Matrix5d eval_sigma = config.noise.sigma();

  for (int t = 0; t < config.trials; ++t) {
    const std::uint64_t trial_seed = derive_seed(config.seed, 1000003ULL * t);
    MeasurementSet set =
        generate_measurements(config.scenario, gen_noise, trial_seed);
    for (auto& m : set.measurements) m.sigma = eval_sigma;
    const PriorSpec priors =
        draw_priors(config.scenario, config.priors, trial_seed);
    const CostMatrix cm =
        build_cost_matrix(set, priors, config.scenario.bs, config.beta_n,
                          config.mc_samples, trial_seed, config.mask);
    const Assignment assignment = solve_assignment(cm);

    std::vector<bool> correct(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
      const int true_source = truth[set.measurements[i].id];
      const int label = assignment.labels[i].label();
      bool ok = false;
      if (true_source == kLosPath) {
        ok = (label == kLosPath);
      } else {
        const VaPrior* prior = priors.find_va(true_source);
        const bool known = prior && prior->kind != VaPrior::Kind::None;
        ok = known ? (label == true_source) : (label == kNewVa);
      }
      correct[i] = ok;
    }
    outcomes.push_back(std::move(correct));
  }
  return outcomes;
}

double da_error_probability(const DaErrorConfig& config) {
  if (config.trials < 1) throw std::invalid_argument("trials must be >= 1");
  const auto outcomes = da_trial_outcomes(config);
  std::size_t total = 0;
  std::size_t errors = 0;
  for (const auto& trial : outcomes) {
    for (bool ok : trial) {
      ++total;
      errors += ok ? 0 : 1;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(errors) / total;
}

}  // namespace mmpos
