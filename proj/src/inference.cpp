// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#include "mmpos/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>

namespace mmpos {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double logsumexp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

// ---------------------------------------------------------------------------
// ParticleBelief utilities

void validate_belief(const ParticleBelief& b, const std::string& who) {
  if (b.size() == 0) throw ResampleFailure(who + ": empty belief");
  if (!b.samples.allFinite() || !b.weights.allFinite()) {
    throw ResampleFailure(who + ": non-finite samples or weights");
  }
  if (std::abs(b.weights.sum() - 1.0) > 1e-6) {
    throw ResampleFailure(who + ": weights not normalized");
  }
}

double ess(const Eigen::VectorXd& w) {
  const double s2 = w.squaredNorm();
  return s2 > 0 ? 1.0 / s2 : 0.0;
}

double circular_mean(const Eigen::VectorXd& theta, const Eigen::VectorXd& w) {
  double s = 0.0, c = 0.0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    s += w(i) * std::sin(theta(i));
    c += w(i) * std::cos(theta(i));
  }
  return std::atan2(s, c);
}

Eigen::VectorXd weighted_std(const ParticleBelief& b) {
  Eigen::VectorXd out(b.dim());
  if (b.circular) {
    const double mu = circular_mean(b.samples.col(0), b.weights);
    double var = 0.0;
    for (int i = 0; i < b.size(); ++i) {
      const double d = wrap_angle(b.samples(i, 0) - mu);
      var += b.weights(i) * d * d;
    }
    out(0) = std::sqrt(var);
    return out;
  }
  for (int k = 0; k < b.dim(); ++k) {
    const double mu = b.weights.dot(b.samples.col(k));
    double var = 0.0;
    for (int i = 0; i < b.size(); ++i) {
      const double d = b.samples(i, k) - mu;
      var += b.weights(i) * d * d;
    }
    out(k) = std::sqrt(std::max(var, 0.0));
  }
  return out;
}

Eigen::VectorXd silverman_bandwidth(const ParticleBelief& b,
                                    double floor_value) {
  const int d = b.dim();
  const double n = std::max(ess(b.weights), 2.0);
  const double factor =
      d == 1 ? std::pow(4.0 / 3.0, 0.2)
             : std::pow(4.0 / (d + 2.0), 1.0 / (d + 4.0));
  const Eigen::VectorXd sigma = weighted_std(b);
  Eigen::VectorXd h(d);
  for (int k = 0; k < d; ++k) {
    h(k) = std::max(factor * sigma(k) * std::pow(n, -1.0 / (d + 4.0)),
                    floor_value);
  }
  return h;
}

Eigen::VectorXd kde_log_density(const ParticleBelief& belief,
                                const Eigen::MatrixXd& points) {
  const int n = static_cast<int>(points.rows());
  const int m = belief.size();
  const int d = belief.dim();

  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(n, m);
  for (int k = 0; k < d; ++k) {
    const double h = belief.kde_bandwidth(k);
    if (belief.circular) {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
          const double diff =
              wrap_angle(points(i, k) - belief.samples(j, k)) / h;
          q(i, j) += diff * diff;
        }
      }
    } else {
      const Eigen::ArrayXXd diff =
          (points.col(k).replicate(1, m).array() -
           belief.samples.col(k).transpose().replicate(n, 1).array()) /
          h;
      q.array() += diff.square();
    }
  }

  Eigen::RowVectorXd logw = belief.weights.array().log().matrix().transpose();
  Eigen::MatrixXd terms = (-0.5 * q).rowwise() + logw;

  double log_norm = -0.5 * d * kLog2Pi;
  for (int k = 0; k < d; ++k) log_norm -= std::log(belief.kde_bandwidth(k));

  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) {
    const double mx = terms.row(i).maxCoeff();
    out(i) = std::isfinite(mx)
                 ? mx + std::log((terms.row(i).array() - mx).exp().sum()) +
                       log_norm
                 : kNegInf;
  }
  return out;
}

int draw_index(const Eigen::VectorXd& cumulative, Rng& rng) {
  const double u = rng.uniform() * cumulative(cumulative.size() - 1);
  const double* begin = cumulative.data();
  const double* end = begin + cumulative.size();
  const int i = static_cast<int>(std::upper_bound(begin, end, u) - begin);
  return std::min<int>(i, static_cast<int>(cumulative.size()) - 1);
}

Eigen::VectorXd cumulative_weights(const Eigen::VectorXd& w) {
  Eigen::VectorXd c(w.size());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    acc += w(i);
    c(i) = acc;
  }
  return c;
}

Eigen::RowVectorXd sample_from_kde(const ParticleBelief& b,
                                   const Eigen::VectorXd& cumulative,
                                   Rng& rng) {
  const int j = draw_index(cumulative, rng);
  Eigen::RowVectorXd x = b.samples.row(j);
  for (int k = 0; k < b.dim(); ++k) {
    x(k) += b.kde_bandwidth(k) * rng.normal();
  }
  if (b.circular) x(0) = wrap_angle(x(0));
  return x;
}

std::vector<int> systematic_resample(const Eigen::VectorXd& weights, int n,
                                     Rng& rng) {
  std::vector<int> idx(n);
  const double step = 1.0 / n;
  double u = rng.uniform() * step;
  double acc = weights(0);
  int j = 0;
  for (int i = 0; i < n; ++i) {
    while (u > acc && j + 1 < weights.size()) acc += weights(++j);
    idx[i] = j;
    u += step;
  }
  return idx;
}

// Equal-weight subsample used as an integration support set.
Eigen::MatrixXd subsample_support(const ParticleBelief& b, int n, Rng& rng) {
  const std::vector<int> idx = systematic_resample(b.weights, n, rng);
  Eigen::MatrixXd out(n, b.dim());
  for (int i = 0; i < n; ++i) out.row(i) = b.samples.row(idx[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Variable priors as analytic densities

struct VariablePrior {
  int dim = 1;
  bool circular = false;
  double bandwidth_floor = 1e-8;
  std::function<double(const Eigen::RowVectorXd&)> logpdf;
  std::function<Eigen::RowVectorXd(Rng&)> sample;
};

VariablePrior make_gaussian2d(const Gaussian2D& g) {
  VariablePrior p;
  p.dim = 2;
  const double std = std::max(g.std, 1e-9);
  p.bandwidth_floor = 1e-4 * std;
  const Eigen::Vector2d mean = g.mean;
  p.logpdf = [mean, std](const Eigen::RowVectorXd& x) {
    const double dx = (x(0) - mean.x()) / std;
    const double dy = (x(1) - mean.y()) / std;
    return -0.5 * (dx * dx + dy * dy) - kLog2Pi - 2.0 * std::log(std);
  };
  p.sample = [mean, std](Rng& rng) {
    Eigen::RowVectorXd x(2);
    x << mean.x() + std * rng.normal(), mean.y() + std * rng.normal();
    return x;
  };
  return p;
}

VariablePrior make_gaussian1d(const Gaussian1D& g, bool circular) {
  VariablePrior p;
  p.dim = 1;
  p.circular = circular;
  const double std = std::max(g.std, 1e-9);
  p.bandwidth_floor = 1e-4 * std;
  const double mean = g.mean;
  p.logpdf = [mean, std, circular](const Eigen::RowVectorXd& x) {
    double d = x(0) - mean;
    if (circular) d = wrap_angle(d);
    d /= std;
    return -0.5 * d * d - 0.5 * kLog2Pi - std::log(std);
  };
  p.sample = [mean, std, circular](Rng& rng) {
    Eigen::RowVectorXd x(1);
    x(0) = mean + std * rng.normal();
    if (circular) x(0) = wrap_angle(x(0));
    return x;
  };
  return p;
}

VariablePrior make_box(const UniformBox& box) {
  VariablePrior p;
  p.dim = 2;
  p.bandwidth_floor = 1e-4 * (box.x_max - box.x_min) / std::sqrt(12.0);
  const double log_density = -std::log(box.area());
  p.logpdf = [box, log_density](const Eigen::RowVectorXd& x) {
    return box.contains(x(0), x(1)) ? log_density : kNegInf;
  };
  p.sample = [box](Rng& rng) {
    Eigen::RowVectorXd x(2);
    x << rng.uniform(box.x_min, box.x_max), rng.uniform(box.y_min, box.y_max);
    return x;
  };
  return p;
}

VariablePrior prior_for(const FactorGraph& g, const VarRef& var) {
  switch (var.kind) {
    case VarRef::Kind::UePosition:
      return make_gaussian2d(g.ue_prior);
    case VarRef::Kind::Orientation:
      return make_gaussian1d(g.orientation_prior, true);
    case VarRef::Kind::Bias:
      return make_gaussian1d(g.bias_prior, false);
    case VarRef::Kind::VaPosition: {
      const VaNodePrior& vp = g.va_priors.at(var.va_index);
      return vp.gaussian ? make_gaussian2d(vp.gauss) : make_box(vp.box);
    }
  }
  throw std::logic_error("unknown variable kind");
}

std::string var_name(const VarRef& v) {
  switch (v.kind) {
    case VarRef::Kind::UePosition:
      return "x_ue";
    case VarRef::Kind::Orientation:
      return "alpha";
    case VarRef::Kind::Bias:
      return "bias";
    case VarRef::Kind::VaPosition:
      return "x_va_" + std::to_string(v.va_index);
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Generic product of a prior with incoming message densities. Candidates are
// drawn from the mixture of the prior and the sampling pools; every product
// over a message subset reuses the same draws via importance correction.

struct MessageTerm {
  // Sampling pool (particles + KDE) used for the candidate proposal.
  const ParticleBelief* pool = nullptr;
  // Log density of the message at candidate points. When absent, the pool's
  // KDE doubles as the density (exact for the scalar mixture messages).
  std::function<Eigen::VectorXd(const Eigen::MatrixXd&)> log_density;
};

struct ProductSet {
  ParticleBelief belief;
  std::vector<ParticleBelief> exclusions;
};

ParticleBelief resample_to_belief(const Eigen::MatrixXd& candidates,
                                  const Eigen::VectorXd& log_w, int n_out,
                                  bool circular, double bw_floor, Rng& rng,
                                  const std::string& who) {
  const double mx = log_w.maxCoeff();
  if (!std::isfinite(mx)) throw ResampleFailure(who + ": all-zero weights");
  Eigen::VectorXd w = (log_w.array() - mx).exp();
  w /= w.sum();

  const std::vector<int> idx = systematic_resample(w, n_out, rng);
  ParticleBelief out;
  out.samples.resize(n_out, candidates.cols());
  for (int i = 0; i < n_out; ++i) out.samples.row(i) = candidates.row(idx[i]);
  out.weights = Eigen::VectorXd::Constant(n_out, 1.0 / n_out);
  out.circular = circular;
  out.kde_bandwidth = silverman_bandwidth(out, bw_floor);
  validate_belief(out, who);
  return out;
}

using Constraint = std::function<bool(const Eigen::RowVectorXd&)>;

ProductSet product_terms(const VariablePrior& prior,
                         const std::vector<MessageTerm>& terms,
                         int n_candidates, int n_belief, int n_exclusion,
                         Rng& rng, const Constraint& constraint,
                         const std::string& who, bool want_exclusions,
                         const ParticleBelief* warm_start = nullptr) {
  const int k = static_cast<int>(terms.size());

  for (int retry = 0;; ++retry) {
    std::vector<ParticleBelief> pools;
    pools.reserve(k + 1);
    const double inflate = std::pow(2.0, retry);
    for (const auto& t : terms) {
      pools.push_back(*t.pool);
      pools.back().kde_bandwidth *= inflate;
    }
    // The previous belief, when given, joins the proposal: it concentrates
    // candidates where the product mass ended up last iteration.
    if (warm_start) {
      pools.push_back(*warm_start);
      pools.back().kde_bandwidth *= inflate;
    }
    const int n_pools = static_cast<int>(pools.size());

    Eigen::MatrixXd candidates(n_candidates, prior.dim);
    std::vector<Eigen::VectorXd> cums;
    cums.reserve(n_pools);
    for (const auto& p : pools) cums.push_back(cumulative_weights(p.weights));
    for (int i = 0; i < n_candidates; ++i) {
      const int comp = i % (n_pools + 1);
      candidates.row(i) =
          comp == 0 ? prior.sample(rng)
                    : sample_from_kde(pools[comp - 1], cums[comp - 1], rng);
    }

    Eigen::VectorXd log_prior(n_candidates);
    for (int i = 0; i < n_candidates; ++i) {
      log_prior(i) = prior.logpdf(candidates.row(i));
      if (constraint && std::isfinite(log_prior(i)) &&
          !constraint(candidates.row(i))) {
        log_prior(i) = kNegInf;
      }
    }

    // Proposal density of the candidate mixture (pool KDEs + prior).
    Eigen::MatrixXd log_pool(n_candidates, n_pools);
    for (int j = 0; j < n_pools; ++j) {
      log_pool.col(j) = kde_log_density(pools[j], candidates);
    }
    Eigen::VectorXd log_q(n_candidates);
    {
      Eigen::VectorXd row(n_pools + 1);
      for (int i = 0; i < n_candidates; ++i) {
        row(0) = prior.logpdf(candidates.row(i));
        for (int j = 0; j < n_pools; ++j) row(j + 1) = log_pool(i, j);
        log_q(i) = logsumexp(row) - std::log(static_cast<double>(n_pools + 1));
      }
    }

    // Target densities of the messages themselves.
    Eigen::MatrixXd log_msgs(n_candidates, k);
    for (int j = 0; j < k; ++j) {
      log_msgs.col(j) = terms[j].log_density ? terms[j].log_density(candidates)
                                             : log_pool.col(j);
    }

    Eigen::VectorXd belief_logw = log_prior + log_msgs.rowwise().sum() - log_q;

    const double mx = belief_logw.maxCoeff();
    bool degenerate = !std::isfinite(mx);
    if (!degenerate) {
      Eigen::VectorXd w = (belief_logw.array() - mx).exp();
      w /= w.sum();
      degenerate = ess(w) < 0.01 * n_candidates;
    }
    if (degenerate && retry < 3) continue;
    if (degenerate && retry == 3) {
      std::fprintf(stderr,
                   "mmpos: low effective sample size in product for %s\n",
                   who.c_str());
    }

    ProductSet out;
    // The belief keeps the full weighted candidate set; only the messages
    // flowing back into factors are resampled to equal weights.
    {
      const double bmx = belief_logw.maxCoeff();
      if (!std::isfinite(bmx)) throw ResampleFailure(who + ": all-zero weights");
      Eigen::VectorXd w = (belief_logw.array() - bmx).exp();
      w /= w.sum();
      out.belief.samples = candidates;
      out.belief.weights = w;
      out.belief.circular = prior.circular;
      out.belief.kde_bandwidth =
          silverman_bandwidth(out.belief, prior.bandwidth_floor);
      validate_belief(out.belief, who);
      if (n_belief < n_candidates) {
        out.belief = resample_to_belief(candidates, belief_logw, n_belief,
                                        prior.circular, prior.bandwidth_floor,
                                        rng, who);
      }
    }
    if (want_exclusions) {
      out.exclusions.reserve(k);
      for (int j = 0; j < k; ++j) {
        out.exclusions.push_back(resample_to_belief(
            candidates, belief_logw - log_msgs.col(j), n_exclusion,
            prior.circular, prior.bandwidth_floor, rng, who + " (exclusion)"));
      }
    }
    return out;
  }
}

// ---------------------------------------------------------------------------
// Inverse-geometry sampling of factor-to-variable messages

struct JointDraw {
  Eigen::Vector3d ue;
  Eigen::Vector3d anchor;  // VA position, or the BS for LOS factors
  double orientation = 0.0;
  double bias = 0.0;
};

class FactorSampler {
 public:
  FactorSampler(const FactorGraph& g, const Factor& f, const FactorInputs& in)
      : g_(g), f_(f), in_(in) {
    if (in.ue) ue_cum_ = cumulative_weights(in.ue->weights);
    if (in.va) va_cum_ = cumulative_weights(in.va->weights);
    if (in.bias) bias_cum_ = cumulative_weights(in.bias->weights);
    if (in.orientation) {
      orient_cum_ = cumulative_weights(in.orientation->weights);
    }
  }

  JointDraw draw(Rng& rng, bool need_ue, bool need_anchor, bool need_bias,
                 bool need_orientation) const {
    JointDraw d;
    if (need_ue) {
      if (!in_.ue) {
        throw std::invalid_argument(f_.name() + ": missing UE message");
      }
      const Eigen::RowVectorXd x = sample_from_kde(*in_.ue, ue_cum_, rng);
      d.ue = {x(0), x(1), g_.ue_z};
    }
    if (need_anchor) {
      if (f_.los) {
        d.anchor = g_.bs;
      } else {
        if (!in_.va) {
          throw std::invalid_argument(f_.name() + ": missing VA message");
        }
        const Eigen::RowVectorXd x = sample_from_kde(*in_.va, va_cum_, rng);
        d.anchor = {x(0), x(1), g_.va_z};
      }
    }
    if (need_bias) {
      if (!in_.bias) {
        throw std::invalid_argument(f_.name() + ": missing bias message");
      }
      d.bias = sample_from_kde(*in_.bias, bias_cum_, rng)(0);
    }
    if (need_orientation) {
      if (!in_.orientation) {
        throw std::invalid_argument(f_.name() + ": missing orientation message");
      }
      d.orientation = sample_from_kde(*in_.orientation, orient_cum_, rng)(0);
    }
    return d;
  }

  bool side_ok(const Eigen::Vector3d& ue, const Eigen::Vector3d& va) const {
    if (f_.los) return true;
    if ((va - g_.bs).norm() < 1e-9) return false;
    return ue_on_bs_side(ue, va, g_.bs);
  }

 private:
  const FactorGraph& g_;
  const Factor& f_;
  const FactorInputs& in_;
  Eigen::VectorXd ue_cum_, va_cum_, bias_cum_, orient_cum_;
};

bool ray_to_plane(const Eigen::Vector3d& origin, double az, double el,
                  double z_target, Eigen::Vector2d* point) {
  const double se = std::sin(el);
  if (std::abs(se) < 1e-9) return false;
  const double t = (z_target - origin.z()) / se;
  if (t <= 0.0) return false;
  const double rho = t * std::cos(el);
  if (rho <= 1e-9) return false;
  *point = origin.head<2>() + rho * Eigen::Vector2d(std::cos(az), std::sin(az));
  return true;
}

// DOD inversion toward the UE: follow the departure ray to the reflecting
// plane of the sampled VA, reflect, continue to the UE height.
bool dod_invert_ue(const FactorGraph& g, const Eigen::Vector3d& va, double az,
                   double el, Eigen::Vector2d* ue) {
  const Eigen::Vector3d d(std::cos(el) * std::cos(az),
                          std::cos(el) * std::sin(az), std::sin(el));
  const Eigen::Vector3d diff = g.bs - va;
  const double dist = diff.norm();
  if (dist < 1e-9) return false;
  const Eigen::Vector3d u = diff / dist;
  const double denom = d.dot(u);
  if (denom >= -1e-12) return false;
  const double t = (-0.5 * dist) / denom;
  const Eigen::Vector3d xs = g.bs + t * d;
  const Eigen::Vector3d dr = d - 2.0 * denom * u;
  if (std::abs(dr.z()) < 1e-12) return false;
  const double s = (g.ue_z - xs.z()) / dr.z();
  if (s <= 0.0) return false;
  *ue = (xs + s * dr).head<2>();
  return true;
}

// DOD inversion toward the VA: the departure ray fixes the incidence point;
// mirroring the BS range beyond it must land at the VA height.
bool dod_invert_va(const FactorGraph& g, const Eigen::Vector3d& ue, double az,
                   double el, Eigen::Vector2d* va) {
  const Eigen::Vector3d d(std::cos(el) * std::cos(az),
                          std::cos(el) * std::sin(az), std::sin(el));
  const Eigen::Vector3d a = g.bs - ue;
  const double dz = d.z();
  if (std::abs(dz) < 1e-12) return false;
  const double denom = 2.0 * dz * (dz * a.dot(d) - a.z());
  if (std::abs(denom) < 1e-12) return false;
  const double t = (a.z() * a.z() - dz * dz * a.squaredNorm()) / denom;
  if (t <= 0.0) return false;
  const Eigen::Vector3d xs = g.bs + t * d;
  const Eigen::Vector3d to_ue = xs - ue;
  const double n = to_ue.norm();
  if (n < 1e-9) return false;
  if (std::abs(dz * n + (a.z() + t * dz)) > 1e-6 * (1.0 + n)) return false;
  const Eigen::Vector3d p = xs + t * (to_ue / n);
  if (std::abs(p.z() - g.va_z) > 1e-6) return false;
  *va = p.head<2>();
  return true;
}

}  // namespace

std::string Factor::name() const {
  const char* k =
      kind == Kind::Toa ? "toa" : (kind == Kind::Doa ? "doa" : "dod");
  return std::string("f_") + k + "_" + std::to_string(path);
}

bool FactorGraph::has_los() const {
  for (const auto& f : factors) {
    if (f.los) return true;
  }
  return false;
}

ParticleBelief factor_to_variable_message(const FactorGraph& g,
                                          const Factor& f, const VarRef& target,
                                          const FactorInputs& inputs, int n_out,
                                          Rng& rng) {
  const bool target_is_va = target.kind == VarRef::Kind::VaPosition;
  if (target.kind == VarRef::Kind::Orientation && f.kind != Factor::Kind::Doa) {
    throw std::invalid_argument(f.name() + " has no orientation edge");
  }
  if (target.kind == VarRef::Kind::Bias && f.kind != Factor::Kind::Toa) {
    throw std::invalid_argument(f.name() + " has no bias edge");
  }
  if (target_is_va && (f.los || f.va_index != target.va_index)) {
    throw std::invalid_argument(f.name() + " has no edge to " +
                                var_name(target));
  }

  const FactorSampler sampler(g, f, inputs);
  const int dim =
      (target.kind == VarRef::Kind::UePosition || target_is_va) ? 2 : 1;
  const bool circular = target.kind == VarRef::Kind::Orientation;
  const bool scalar_target = dim == 1;

  double bw_floor = 1e-8;
  {
    const VariablePrior p = prior_for(g, target);
    bw_floor = p.bandwidth_floor;
  }

  for (int redraw = 0;; ++redraw) {
    Eigen::MatrixXd samples(n_out, dim);
    Eigen::VectorXd log_w(n_out);
    int accepted = 0;
    const int max_draws = 16 * n_out;

    for (int it = 0; it < max_draws && accepted < n_out; ++it) {
      double weight_log = 0.0;
      Eigen::RowVectorXd out(dim);

      switch (f.kind) {
        case Factor::Kind::Toa: {
          if (target.kind == VarRef::Kind::Bias) {
            // Exact mixture component: deterministic inversion point, the
            // TOA noise becomes the kernel bandwidth.
            const JointDraw d = sampler.draw(rng, true, true, false, false);
            if (!sampler.side_ok(d.ue, d.anchor)) continue;
            out(0) = f.z_toa - (d.anchor - d.ue).norm();
          } else {
            const bool to_ue = target.kind == VarRef::Kind::UePosition;
            const JointDraw d = sampler.draw(rng, !to_ue, to_ue, true, false);
            const double r = f.z_toa - d.bias + f.sigma_toa * rng.normal();
            const double dz =
                f.los ? g.bs.z() - g.ue_z : g.va_z - g.ue_z;
            if (r <= 0.0 || r * r <= dz * dz) continue;
            const double h = std::sqrt(r * r - dz * dz);
            const double psi = rng.uniform(0.0, 2.0 * M_PI);
            const Eigen::Vector2d center =
                to_ue ? Eigen::Vector2d(d.anchor.head<2>())
                      : Eigen::Vector2d(d.ue.head<2>());
            out << center.x() + h * std::cos(psi),
                center.y() + h * std::sin(psi);
            weight_log = std::log(r);
            if (!f.los) {
              const Eigen::Vector3d ue3 =
                  to_ue ? Eigen::Vector3d(out(0), out(1), g.ue_z) : d.ue;
              const Eigen::Vector3d va3 =
                  to_ue ? d.anchor : Eigen::Vector3d(out(0), out(1), g.va_z);
              if (!sampler.side_ok(ue3, va3)) continue;
            }
          }
          break;
        }

        case Factor::Kind::Doa: {
          if (target.kind == VarRef::Kind::Orientation) {
            const JointDraw d = sampler.draw(rng, true, true, false, false);
            if (!sampler.side_ok(d.ue, d.anchor)) continue;
            const Eigen::Vector3d v = d.anchor - d.ue;
            bool deg = false;
            const double az = azimuth(v, &deg);
            if (deg) continue;
            out(0) = wrap_angle(az - f.z_az);
            const double el_res = f.z_el - elevation(v);
            weight_log = -0.5 * (el_res / f.sigma_el) * (el_res / f.sigma_el);
          } else {
            const bool to_ue = target.kind == VarRef::Kind::UePosition;
            const JointDraw d = sampler.draw(rng, !to_ue, to_ue, false, true);
            const double az =
                f.z_az + d.orientation + f.sigma_az * rng.normal();
            const double el = f.z_el + f.sigma_el * rng.normal();
            Eigen::Vector2d p;
            if (to_ue) {
              if (!ray_to_plane(d.anchor, az + M_PI, -el, g.ue_z, &p)) continue;
              out << p.x(), p.y();
              if (!sampler.side_ok({p.x(), p.y(), g.ue_z}, d.anchor)) continue;
            } else {
              if (!ray_to_plane(d.ue, az, el, g.va_z, &p)) continue;
              out << p.x(), p.y();
              if (!sampler.side_ok(d.ue, {p.x(), p.y(), g.va_z})) continue;
            }
          }
          break;
        }

        case Factor::Kind::Dod: {
          const double az = f.z_az + f.sigma_az * rng.normal();
          const double el = f.z_el + f.sigma_el * rng.normal();
          if (f.los) {
            Eigen::Vector2d p;
            if (!ray_to_plane(g.bs, az, el, g.ue_z, &p)) continue;
            out << p.x(), p.y();
          } else if (target.kind == VarRef::Kind::UePosition) {
            const JointDraw d = sampler.draw(rng, false, true, false, false);
            Eigen::Vector2d p;
            if (!dod_invert_ue(g, d.anchor, az, el, &p)) continue;
            out << p.x(), p.y();
            if (!sampler.side_ok({p.x(), p.y(), g.ue_z}, d.anchor)) continue;
          } else {
            const JointDraw d = sampler.draw(rng, true, false, false, false);
            Eigen::Vector2d p;
            if (!dod_invert_va(g, d.ue, az, el, &p)) continue;
            out << p.x(), p.y();
            if (!sampler.side_ok(d.ue, {p.x(), p.y(), g.va_z})) continue;
          }
          break;
        }
      }

      samples.row(accepted) = out;
      log_w(accepted) = weight_log;
      ++accepted;
    }

    if (accepted == 0) {
      throw ResampleFailure("factor message degenerate: " + f.name() + " -> " +
                            var_name(target));
    }

    ParticleBelief msg;
    msg.samples = samples.topRows(accepted);
    Eigen::VectorXd w = log_w.head(accepted);
    const double mx = w.maxCoeff();
    Eigen::VectorXd ew = (w.array() - mx).exp();
    ew /= ew.sum();
    msg.weights = ew;
    msg.circular = circular;
    if (scalar_target) {
      // Exact Gaussian-mixture representation: the factor noise is the kernel.
      const double sigma =
          f.kind == Factor::Kind::Toa ? f.sigma_toa : f.sigma_az;
      msg.kde_bandwidth = Eigen::VectorXd::Constant(1, std::max(sigma, bw_floor));
    } else {
      msg.kde_bandwidth = silverman_bandwidth(msg, bw_floor);
    }

    if (ess(msg.weights) >= 0.01 * accepted || redraw >= 3) {
      if (ess(msg.weights) < 0.01 * accepted) {
        std::fprintf(stderr, "mmpos: low effective sample size in %s -> %s\n",
                     f.name().c_str(), var_name(target).c_str());
      }
      validate_belief(msg, f.name());
      return msg;
    }
    // Degenerate weight spread: redraw with fresh joint samples.
  }
}

ParticleBelief variable_to_factor_message(
    const FactorGraph& g, const VarRef& variable,
    const std::vector<const ParticleBelief*>& incoming, int exclude_index,
    int n_out, Rng& rng) {
  std::vector<MessageTerm> terms;
  for (int j = 0; j < static_cast<int>(incoming.size()); ++j) {
    if (j != exclude_index) terms.push_back({incoming[j], nullptr});
  }
  const VariablePrior prior = prior_for(g, variable);
  ProductSet p = product_terms(prior, terms, std::max(4 * n_out, 256), n_out,
                               n_out, rng, nullptr, var_name(variable), false);
  return std::move(p.belief);
}

PointEstimate point_estimate(const ParticleBelief& belief) {
  if (std::abs(belief.weights.sum() - 1.0) > 1e-9) {
    throw std::invalid_argument("belief weights must be normalized");
  }
  PointEstimate est;
  const int d = belief.dim();
  est.mean.resize(d);
  est.cov = Eigen::MatrixXd::Zero(d, d);

  if (belief.circular) {
    const double mu = circular_mean(belief.samples.col(0), belief.weights);
    est.mean(0) = mu;
    double var = 0.0;
    for (int i = 0; i < belief.size(); ++i) {
      const double dd = wrap_angle(belief.samples(i, 0) - mu);
      var += belief.weights(i) * dd * dd;
    }
    est.cov(0, 0) = var;
    return est;
  }

  for (int k = 0; k < d; ++k) {
    est.mean(k) = belief.weights.dot(belief.samples.col(k));
  }
  for (int i = 0; i < belief.size(); ++i) {
    const Eigen::VectorXd diff = belief.samples.row(i).transpose() - est.mean;
    est.cov += belief.weights(i) * diff * diff.transpose();
  }
  return est;
}

FactorGraph build_factor_graph(const MeasurementSet& set,
                               const Assignment& assignment,
                               const PriorSpec& priors,
                               const Eigen::Vector3d& bs) {
  if (set.size() == 0) {
    throw std::invalid_argument(
        "cannot build a factor graph without measurements");
  }
  if (assignment.labels.size() != set.size()) {
    throw std::invalid_argument("assignment does not match the measurement set");
  }

  FactorGraph g;
  g.bs = bs;
  g.ue_z = priors.ue_z;
  g.va_z = priors.va_z;
  g.ue_prior = priors.ue_position;
  g.orientation_prior = priors.orientation;
  g.bias_prior = priors.clock_bias;

  for (std::size_t i = 0; i < set.size(); ++i) {
    const Measurement& m = set.measurements[i];
    const SourceCandidate& label = assignment.labels[i];
    const bool los = label.kind == SourceCandidate::Kind::Los;

    int va_index = -1;
    if (!los) {
      VaNodePrior vp;
      if (label.kind == SourceCandidate::Kind::Va) {
        const VaPrior* prior = priors.find_va(label.va_id);
        if (!prior) {
          throw std::invalid_argument("assigned VA has no prior entry");
        }
        if (prior->kind == VaPrior::Kind::Gaussian) {
          vp.gaussian = true;
          vp.gauss = prior->gaussian;
        } else {
          vp.gaussian = false;
          vp.box = prior->kind == VaPrior::Kind::Box ? prior->box
                                                     : priors.new_va_box;
        }
      } else {
        vp.gaussian = false;
        vp.box = priors.new_va_box;
      }
      va_index = g.n_vas++;
      g.va_priors.push_back(vp);
    }

    const Eigen::VectorXd sd = m.sigma.diagonal().cwiseSqrt();

    Factor toa;
    toa.kind = Factor::Kind::Toa;
    toa.path = static_cast<int>(i);
    toa.los = los;
    toa.va_index = va_index;
    toa.z_toa = m.z(kToaComponent);
    toa.sigma_toa = sd(kToaComponent);
    g.factors.push_back(toa);

    Factor doa;
    doa.kind = Factor::Kind::Doa;
    doa.path = static_cast<int>(i);
    doa.los = los;
    doa.va_index = va_index;
    doa.z_el = m.z(kDoaElComponent);
    doa.z_az = m.z(kDoaAzComponent);
    doa.sigma_el = sd(kDoaElComponent);
    doa.sigma_az = sd(kDoaAzComponent);
    g.factors.push_back(doa);

    Factor dod;
    dod.kind = Factor::Kind::Dod;
    dod.path = static_cast<int>(i);
    dod.los = los;
    dod.va_index = va_index;
    dod.z_el = m.z(kDodElComponent);
    dod.z_az = m.z(kDodAzComponent);
    dod.sigma_el = sd(kDodElComponent);
    dod.sigma_az = sd(kDodAzComponent);
    g.factors.push_back(dod);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Engine: analytic factor-to-position message densities

namespace {

struct ScalarMoments {
  double mean = 0.0;
  double var = 0.0;
};

ScalarMoments moments_of(const ParticleBelief& b) {
  const PointEstimate est = point_estimate(b);
  // Kernel width counts toward the represented spread.
  const double h = b.kde_bandwidth(0);
  return {est.mean(0), est.cov(0, 0) + h * h};
}

// Log density of a factor's message to a position variable, evaluated at
// candidate points: the factor likelihood integrated over the neighbor
// variables' particles, with scalar neighbors entering as Gaussian moments.
// The wrong-side indicator applies per (candidate, support) pair.
struct PositionEvaluator {
  const FactorGraph* g = nullptr;
  const Factor* f = nullptr;
  bool target_is_ue = true;
  Eigen::MatrixXd support;  // J x 2: the other position's particles
  ScalarMoments scalar;     // bias (TOA) or orientation (DOA)

  Eigen::VectorXd operator()(const Eigen::MatrixXd& pts) const {
    const int n = static_cast<int>(pts.rows());
    const int j_n = f->los ? 1 : static_cast<int>(support.rows());
    Eigen::VectorXd out(n);
    Eigen::VectorXd terms(j_n);

    for (int i = 0; i < n; ++i) {
      const Eigen::Vector3d cand =
          target_is_ue ? Eigen::Vector3d(pts(i, 0), pts(i, 1), g->ue_z)
                       : Eigen::Vector3d(pts(i, 0), pts(i, 1), g->va_z);
      for (int j = 0; j < j_n; ++j) {
        Eigen::Vector3d other;
        if (f->los) {
          other = g->bs;
        } else {
          other = target_is_ue
                      ? Eigen::Vector3d(support(j, 0), support(j, 1), g->va_z)
                      : Eigen::Vector3d(support(j, 0), support(j, 1), g->ue_z);
        }
        const Eigen::Vector3d ue = target_is_ue ? cand : other;
        const Eigen::Vector3d va = target_is_ue ? other : cand;

        if (!f->los && !ue_on_bs_side(ue, va, g->bs)) {
          terms(j) = kNegInf;
          continue;
        }

        double lp = 0.0;
        switch (f->kind) {
          case Factor::Kind::Toa: {
            const double r = (va - ue).norm();  // == |bs - ue| for LOS
            const double s2 = f->sigma_toa * f->sigma_toa + scalar.var;
            const double d = f->z_toa - scalar.mean - r;
            lp = -0.5 * d * d / s2;
            break;
          }
          case Factor::Kind::Doa: {
            const Eigen::Vector3d v = (f->los ? g->bs : va) - ue;
            const double del = (f->z_el - elevation(v)) / f->sigma_el;
            const double s2 = f->sigma_az * f->sigma_az + scalar.var;
            const double daz =
                wrap_angle(azimuth(v) - scalar.mean - f->z_az);
            lp = -0.5 * (del * del + daz * daz / s2);
            break;
          }
          case Factor::Kind::Dod: {
            Eigen::Vector3d ref;
            if (f->los) {
              ref = ue - g->bs;
            } else {
              try {
                ref = incidence_point(va, ue, g->bs) - g->bs;
              } catch (const DegenerateGeometry&) {
                terms(j) = kNegInf;
                continue;
              }
            }
            const double del = (f->z_el - elevation(ref)) / f->sigma_el;
            const double daz = wrap_angle(f->z_az - azimuth(ref)) / f->sigma_az;
            lp = -0.5 * (del * del + daz * daz);
            break;
          }
        }
        terms(j) = lp;
      }
      out(i) = logsumexp(terms) - std::log(static_cast<double>(j_n));
    }
    return out;
  }
};

VariableSummary summarize(const ParticleBelief& b) {
  const PointEstimate est = point_estimate(b);
  return {est.mean, est.cov};
}

}  // namespace

BpResult run_bp(const FactorGraph& g, const BpOptions& opt) {
  if (opt.iterations < 1) throw std::invalid_argument("iterations must be >= 1");
  if (opt.particles < 16) throw std::invalid_argument("particles must be >= 16");
  if (opt.message_support < 16) {
    throw std::invalid_argument("message support must be >= 16");
  }

  Rng rng(derive_seed(opt.seed, 0x6270ULL));
  const int F = static_cast<int>(g.factors.size());
  const int N = opt.particles;
  const int M = opt.message_support;
  const int J = std::min(M, 128);  // integration support per position message

  const VariablePrior ue_prior = prior_for(g, VarRef::ue());
  const VariablePrior alpha_prior = prior_for(g, VarRef::orientation());
  const VariablePrior bias_prior = prior_for(g, VarRef::bias());
  std::vector<VariablePrior> va_prior;
  for (int v = 0; v < g.n_vas; ++v) {
    va_prior.push_back(prior_for(g, VarRef::va(v)));
  }

  // Step 0: the LOS DOD message is fixed for the whole run.
  int phi0 = -1;
  for (int f = 0; f < F; ++f) {
    if (g.factors[f].los && g.factors[f].kind == Factor::Kind::Dod) phi0 = f;
  }
  std::optional<ParticleBelief> phi0_pool;
  if (phi0 >= 0) {
    phi0_pool = factor_to_variable_message(g, g.factors[phi0], VarRef::ue(), {},
                                           M, rng);
  }
  PositionEvaluator phi0_eval;
  if (phi0 >= 0) {
    phi0_eval = {&g, &g.factors[phi0], true, {}, {}};
  }

  auto prior_samples = [&](const VariablePrior& p, int n) {
    ParticleBelief b;
    b.samples.resize(n, p.dim);
    for (int i = 0; i < n; ++i) b.samples.row(i) = p.sample(rng);
    b.weights = Eigen::VectorXd::Constant(n, 1.0 / n);
    b.circular = p.circular;
    b.kde_bandwidth = silverman_bandwidth(b, p.bandwidth_floor);
    return b;
  };

  // Position -> factor messages; at the first iteration the fused step-0
  // message and the VA priors, later the leave-one-out belief products.
  std::vector<ParticleBelief> ue_to_factor(F);
  std::vector<ParticleBelief> va_to_factor(F);
  {
    std::vector<MessageTerm> fuse;
    if (phi0_pool) fuse.push_back({&*phi0_pool, phi0_eval});
    ProductSet base = product_terms(ue_prior, fuse, N, N, N, rng, nullptr,
                                    "x_ue (step 0)", false);
    for (int f = 0; f < F; ++f) ue_to_factor[f] = base.belief;
  }
  {
    std::vector<ParticleBelief> va_base;
    for (int v = 0; v < g.n_vas; ++v) {
      va_base.push_back(prior_samples(va_prior[v], std::max(N / 2, M)));
    }
    for (int f = 0; f < F; ++f) {
      if (!g.factors[f].los) va_to_factor[f] = va_base[g.factors[f].va_index];
    }
  }

  Eigen::Vector2d ue_mean = point_estimate(ue_to_factor[0]).mean;
  std::vector<Eigen::Vector2d> va_mean(g.n_vas);
  std::vector<bool> va_tight(g.n_vas, false);

  BpResult result;
  std::vector<ParticleBelief> to_bias(F), to_alpha(F);
  std::vector<ParticleBelief> bias_to_factor(F), alpha_to_factor(F);
  std::vector<ParticleBelief> to_ue_pool(F), to_va_pool(F);
  std::vector<PositionEvaluator> to_ue_eval(F), to_va_eval(F);

  ParticleBelief ue_belief, alpha_belief, bias_belief;
  std::vector<ParticleBelief> va_beliefs(g.n_vas);

  for (int iteration = 0; iteration < opt.iterations; ++iteration) {
    // Step 2: TOA factors message the bias, DOA factors the orientation.
    std::vector<int> toa_factors, doa_factors;
    for (int f = 0; f < F; ++f) {
      const Factor& fac = g.factors[f];
      FactorInputs in;
      in.ue = &ue_to_factor[f];
      if (!fac.los) in.va = &va_to_factor[f];
      if (fac.kind == Factor::Kind::Toa) {
        to_bias[f] =
            factor_to_variable_message(g, fac, VarRef::bias(), in, M, rng);
        toa_factors.push_back(f);
      } else if (fac.kind == Factor::Kind::Doa) {
        to_alpha[f] = factor_to_variable_message(g, fac, VarRef::orientation(),
                                                 in, M, rng);
        doa_factors.push_back(f);
      }
    }

    // Step 3: scalar products with per-factor exclusions.
    {
      std::vector<MessageTerm> terms;
      for (int f : toa_factors) terms.push_back({&to_bias[f], nullptr});
      ProductSet p = product_terms(bias_prior, terms, 2 * N, 2 * N, N, rng, nullptr,
                                   "bias", true,
                                   iteration > 0 ? &bias_belief : nullptr);
      bias_belief = std::move(p.belief);
      for (std::size_t j = 0; j < toa_factors.size(); ++j) {
        bias_to_factor[toa_factors[j]] = std::move(p.exclusions[j]);
      }
    }
    {
      std::vector<MessageTerm> terms;
      for (int f : doa_factors) terms.push_back({&to_alpha[f], nullptr});
      ProductSet p = product_terms(alpha_prior, terms, 2 * N, 2 * N, N, rng, nullptr,
                                   "alpha", true,
                                   iteration > 0 ? &alpha_belief : nullptr);
      alpha_belief = std::move(p.belief);
      for (std::size_t j = 0; j < doa_factors.size(); ++j) {
        alpha_to_factor[doa_factors[j]] = std::move(p.exclusions[j]);
      }
    }

    // Step 4: factor messages to the positions. Sampling pools come from the
    // geometric inversions; the product densities are evaluated analytically.
    for (int f = 0; f < F; ++f) {
      const Factor& fac = g.factors[f];
      FactorInputs in;
      if (!fac.los) in.va = &va_to_factor[f];
      if (fac.kind == Factor::Kind::Toa) in.bias = &bias_to_factor[f];
      if (fac.kind == Factor::Kind::Doa) in.orientation = &alpha_to_factor[f];

      ScalarMoments sm;
      if (fac.kind == Factor::Kind::Toa) sm = moments_of(bias_to_factor[f]);
      if (fac.kind == Factor::Kind::Doa) sm = moments_of(alpha_to_factor[f]);

      if (f == phi0) {
        to_ue_pool[f] = *phi0_pool;
        to_ue_eval[f] = phi0_eval;
        continue;
      }

      to_ue_pool[f] = factor_to_variable_message(g, fac, VarRef::ue(), in, M, rng);
      to_ue_eval[f] = {&g, &fac, true,
                       fac.los ? Eigen::MatrixXd()
                               : subsample_support(va_to_factor[f], J, rng),
                       sm};
      if (!fac.los) {
        FactorInputs in_va = in;
        in_va.va = nullptr;
        in_va.ue = &ue_to_factor[f];
        to_va_pool[f] = factor_to_variable_message(
            g, fac, VarRef::va(fac.va_index), in_va, M, rng);
        to_va_eval[f] = {&g, &fac, false,
                         subsample_support(ue_to_factor[f], J, rng), sm};
      }
    }

    // Beliefs and the next round of position -> factor messages.
    for (int v = 0; v < g.n_vas; ++v) {
      std::vector<MessageTerm> terms;
      std::vector<int> factor_of_msg;
      for (int f = 0; f < F; ++f) {
        if (!g.factors[f].los && g.factors[f].va_index == v) {
          terms.push_back({&to_va_pool[f], to_va_eval[f]});
          factor_of_msg.push_back(f);
        }
      }
      const Eigen::Vector2d ue_ref = ue_mean;
      Constraint va_side = [&g, ue_ref](const Eigen::RowVectorXd& x) {
        const Eigen::Vector3d va3(x(0), x(1), g.va_z);
        if ((va3 - g.bs).norm() < 1e-6) return false;
        return ue_on_bs_side({ue_ref.x(), ue_ref.y(), g.ue_z}, va3, g.bs);
      };
      ProductSet p = product_terms(va_prior[v], terms, 2 * N, 2 * N, N, rng, va_side,
                                   var_name(VarRef::va(v)), true,
                                   iteration > 0 ? &va_beliefs[v] : nullptr);
      va_beliefs[v] = std::move(p.belief);
      for (std::size_t j = 0; j < factor_of_msg.size(); ++j) {
        va_to_factor[factor_of_msg[j]] = std::move(p.exclusions[j]);
      }
      const PointEstimate est = point_estimate(va_beliefs[v]);
      va_mean[v] = est.mean;
      va_tight[v] = est.cov.trace() < 25.0;
    }

    {
      std::vector<MessageTerm> terms;
      std::vector<int> factor_of_msg;
      for (int f = 0; f < F; ++f) {
        terms.push_back({&to_ue_pool[f], to_ue_eval[f]});
        factor_of_msg.push_back(f);
      }
      // Posterior UE samples stay on the BS side of every surface whose VA
      // is already localized.
      std::vector<Eigen::Vector3d> gates;
      for (int v = 0; v < g.n_vas; ++v) {
        if (va_tight[v]) {
          gates.push_back({va_mean[v].x(), va_mean[v].y(), g.va_z});
        }
      }
      Constraint ue_side = [&g, gates](const Eigen::RowVectorXd& x) {
        const Eigen::Vector3d ue3(x(0), x(1), g.ue_z);
        for (const auto& va3 : gates) {
          if (!ue_on_bs_side(ue3, va3, g.bs)) return false;
        }
        return true;
      };
      ProductSet p =
          product_terms(ue_prior, terms, 2 * N, 2 * N, N, rng, ue_side, "x_ue", true,
                        iteration > 0 ? &ue_belief : &ue_to_factor[0]);
      ue_belief = std::move(p.belief);
      for (std::size_t j = 0; j < factor_of_msg.size(); ++j) {
        ue_to_factor[factor_of_msg[j]] = std::move(p.exclusions[j]);
      }
      ue_mean = point_estimate(ue_belief).mean;
    }

    IterationSummary summary;
    summary.ue = summarize(ue_belief);
    summary.orientation = summarize(alpha_belief);
    summary.bias = summarize(bias_belief);
    for (int v = 0; v < g.n_vas; ++v) {
      summary.vas.push_back(summarize(va_beliefs[v]));
    }
    result.iterations.push_back(std::move(summary));
  }

  result.ue = std::move(ue_belief);
  result.orientation = std::move(alpha_belief);
  result.bias = std::move(bias_belief);
  result.vas = std::move(va_beliefs);
  return result;
}

}  // namespace mmpos
