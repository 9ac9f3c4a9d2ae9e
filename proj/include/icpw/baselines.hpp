#pragma once

// Comparator IPW estimators whose propensity model handles the cluster
// effect directly: one intercept per cluster (fixed effects), or a normal
// random intercept integrated out by adaptive Gauss-Hermite quadrature.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "icpw/cmle.hpp"
#include "icpw/data_model.hpp"
#include "icpw/error.hpp"
#include "icpw/estimators.hpp"

namespace icpw {

inline double expit(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + exp(z))
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

enum class PropensityKind { fixed_effect, random_intercept };

enum class PredictionRule {
  conditional_mode,  ///< plug in the per-cluster posterior mode of U_i
  marginal,          ///< predict with U_i = 0
};

struct PropensityFit {
  PropensityKind kind = PropensityKind::fixed_effect;
  double intercept = 0.0;             ///< random-intercept model only; absorbed into cluster effects otherwise
  Eigen::VectorXd beta;               ///< length p
  std::vector<double> cluster_effects;   ///< plug-in U_i used by propensity()
  std::vector<double> posterior_modes;   ///< random-intercept only: per-cluster posterior modes of U_i
  double variance_component = 0.0;   ///< sigma_U^2
  bool converged = false;
  bool boundary = false;              ///< sigma_U^2 collapsed to ~0
  int iterations = 0;
  double loglik = 0.0;
  std::vector<double> loglik_trace;   ///< objective after each accepted step
  std::vector<std::string> inestimable;
  std::vector<std::string> notes;

  /// P(A = 1 | X, U_hat) for unit j of cluster i.
  double propensity(const Cluster& c, std::size_t i, int j) const {
    return expit(intercept + c.design().row(j).dot(beta) + cluster_effects.at(i));
  }
};

// ---------------------------------------------------------------------------
// Fixed effects

namespace detail {

/// Solves sum_j (A_j - expit(eta_j + u)) = 0 for u by damped Newton.
inline double solve_cluster_effect(const Eigen::VectorXd& eta, const Eigen::VectorXi& A, double u) {
  const double target = A.cast<double>().sum();
  for (int it = 0; it < 200; ++it) {
    double f = target, info = 0.0;
    for (Eigen::Index j = 0; j < eta.size(); ++j) {
      const double p = expit(eta(j) + u);
      f -= p;
      info += p * (1.0 - p);
    }
    if (std::abs(f) < 1e-13 * (1.0 + target)) break;
    double step = f / std::max(info, 1e-300);
    step = std::clamp(step, -5.0, 5.0);
    u += step;
  }
  return u;
}

}  // namespace detail

struct LogisticOptions {
  int max_iter = 100;
  double score_tol = 1e-8;
  double rel_loglik_tol = 1e-12;
  double separation_threshold = 1e3;
};

/// Logistic propensity model with one intercept per cluster, fitted by
/// Newton iteration on the coefficients with the cluster intercepts
/// profiled out.
inline PropensityFit fit_fixed_logistic(const Dataset& data, const LogisticOptions& opt = {}) {
  if (!data.binary()) fail(ErrorCode::invalid_argument, "fixed-effect logistic model needs binary treatment");
  for (const auto& c : data.clusters())
    if (!admits_permutations(c))
      fail(ErrorCode::separation, "cluster '" + c.id() + "' has constant treatment; its fixed effect diverges");

  PropensityFit fit;
  fit.kind = PropensityKind::fixed_effect;
  fit.beta = Eigen::VectorXd::Zero(data.p());
  fit.inestimable = uninformative_covariates(data);
  std::vector<Eigen::Index> active;
  for (int k = 0; k < data.p(); ++k)
    if (std::find(fit.inestimable.begin(), fit.inestimable.end(), data.covariate_names()[static_cast<std::size_t>(k)]) ==
        fit.inestimable.end())
      active.push_back(k);
  if (!fit.inestimable.empty()) fit.notes.push_back("coefficients without within-cluster variation fixed at 0");

  const auto m = static_cast<std::size_t>(data.m());
  std::vector<double> u(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto& c = data.cluster(i);
    const double frac = c.treatments().cast<double>().mean();
    u[i] = std::log(frac / (1.0 - frac));
  }
  const auto d = static_cast<Eigen::Index>(active.size());

  // Profile log-likelihood, score and Hessian at beta (active coordinates).
  struct Eval {
    double ll = 0.0;
    Eigen::VectorXd g;
    Eigen::MatrixXd H;
    std::vector<double> u;
  };
  auto evaluate = [&](const Eigen::VectorXd& beta, const std::vector<double>& u0) {
    Eval ev;
    ev.g = Eigen::VectorXd::Zero(d);
    ev.H = Eigen::MatrixXd::Zero(d, d);
    ev.u.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      const auto& c = data.cluster(i);
      const Eigen::VectorXd eta = c.design() * beta;
      ev.u[i] = detail::solve_cluster_effect(eta, c.treatments(), u0[i]);
      Eigen::VectorXd sx = Eigen::VectorXd::Zero(d);
      double sw = 0.0;
      for (int j = 0; j < c.size(); ++j) {
        const double lin = eta(j) + ev.u[i];
        const double p = expit(lin);
        const double w = p * (1.0 - p);
        ev.ll += c.treatments()(j) * lin - softplus(lin);
        Eigen::VectorXd x(d);
        for (Eigen::Index k = 0; k < d; ++k) x(k) = c.design()(j, active[static_cast<std::size_t>(k)]);
        ev.g += (c.treatments()(j) - p) * x;
        ev.H -= w * x * x.transpose();
        sx += w * x;
        sw += w;
      }
      if (sw > 0) ev.H += sx * sx.transpose() / sw;
    }
    return ev;
  };
  auto expand = [&](const Eigen::VectorXd& b) {
    Eigen::VectorXd full = Eigen::VectorXd::Zero(data.p());
    for (Eigen::Index k = 0; k < d; ++k) full(active[static_cast<std::size_t>(k)]) = b(k);
    return full;
  };

  Eigen::VectorXd b = Eigen::VectorXd::Zero(d);
  auto cur = evaluate(expand(b), u);
  fit.loglik_trace.push_back(cur.ll);
  for (fit.iterations = 0; fit.iterations < opt.max_iter && d > 0;) {
    if (cur.g.lpNorm<Eigen::Infinity>() <= opt.score_tol) {
      fit.converged = true;
      break;
    }
    const Eigen::VectorXd dir = newton_direction(cur.H, cur.g);
    double step = 1.0;
    bool accepted = false;
    Eval next;
    for (int h = 0; h <= 50; ++h, step *= 0.5) {
      next = evaluate(expand(b + step * dir), cur.u);
      if (std::isfinite(next.ll) && next.ll >= cur.ll) {
        accepted = true;
        break;
      }
    }
    ++fit.iterations;
    if (!accepted) {
      fit.converged = cur.g.lpNorm<Eigen::Infinity>() <= 1e-6 * (1.0 + data.n());
      break;
    }
    const double change = std::abs(next.ll - cur.ll) / (1.0 + std::abs(cur.ll));
    b += step * dir;
    cur = std::move(next);
    fit.loglik_trace.push_back(cur.ll);
    if (b.norm() > opt.separation_threshold)
      fail(ErrorCode::separation, "fixed-effect logistic coefficients diverge (separation)");
    if (change <= opt.rel_loglik_tol) {
      fit.converged = cur.g.lpNorm<Eigen::Infinity>() <= 1e-6 * (1.0 + data.n());
      break;
    }
  }
  if (d == 0) fit.converged = true;
  fit.beta = expand(b);
  fit.cluster_effects = cur.u;
  fit.loglik = cur.ll;
  for (double ui : fit.cluster_effects)
    if (!std::isfinite(ui) || std::abs(ui) > opt.separation_threshold)
      fail(ErrorCode::separation, "a cluster fixed effect diverged");
  return fit;
}

// ---------------------------------------------------------------------------
// Random intercept

/// Gauss-Hermite rule for weight exp(-x^2) by the Golub-Welsch eigenproblem.
struct GaussHermite {
  std::vector<double> nodes;
  std::vector<double> log_weights;
};

inline GaussHermite gauss_hermite(int n) {
  if (n < 1) fail(ErrorCode::invalid_argument, "quadrature needs at least one node");
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(k / 2.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  GaussHermite gh;
  for (int k = 0; k < n; ++k) {
    gh.nodes.push_back(es.eigenvalues()(k));
    const double v0 = es.eigenvectors()(0, k);
    gh.log_weights.push_back(0.5 * std::log(std::numbers::pi) + 2.0 * std::log(std::abs(v0)));
  }
  return gh;
}

struct RandomLogisticOptions {
  int quadrature_nodes = 15;
  int max_iter = 100;
  double score_tol = 1e-6;
  double rel_loglik_tol = 1e-12;
  double min_log_sigma = -10.0;
  double boundary_variance = 1e-4;  ///< sigma^2 below this is reported as a boundary fit
  double separation_threshold = 1e3;
  PredictionRule prediction = PredictionRule::marginal;
};

namespace detail {

struct ClusterQuadrature {
  double loglik = 0.0;
  Eigen::VectorXd score;  ///< d/d(intercept, beta, log sigma)
  double mode = 0.0;
};

/// Marginal log-likelihood contribution of one cluster with the random
/// intercept integrated by quadrature centred at the posterior mode and
/// scaled by its curvature.
inline ClusterQuadrature cluster_marginal(const Cluster& c, double intercept, const Eigen::VectorXd& beta, double log_sigma,
                                          const GaussHermite& gh, double mode_start) {
  const int n = c.size();
  const auto p = beta.size();
  const double sigma2 = std::exp(2.0 * log_sigma);
  const Eigen::VectorXd eta = (c.design() * beta).array() + intercept;
  const auto& A = c.treatments();
  const double tsum = A.cast<double>().sum();

  double u = mode_start, curv = 0.0;
  for (int it = 0; it < 100; ++it) {
    double g = tsum - u / sigma2, info = 1.0 / sigma2;
    for (int j = 0; j < n; ++j) {
      const double pr = expit(eta(j) + u);
      g -= pr;
      info += pr * (1.0 - pr);
    }
    curv = info;
    const double step = std::clamp(g / info, -5.0, 5.0);
    u += step;
    if (std::abs(step) < 1e-12 * (1.0 + std::abs(u))) break;
  }
  {
    double info = 1.0 / sigma2;
    for (int j = 0; j < n; ++j) {
      const double pr = expit(eta(j) + u);
      info += pr * (1.0 - pr);
    }
    curv = info;
  }
  const double scale = std::sqrt(2.0 / curv);

  const auto K = gh.nodes.size();
  std::vector<double> logterm(K);
  std::vector<Eigen::VectorXd> dterm(K, Eigen::VectorXd::Zero(p + 2));
  double mx = kNegInf;
  for (std::size_t k = 0; k < K; ++k) {
    const double x = gh.nodes[k];
    const double uk = u + scale * x;
    double h = -0.5 * uk * uk / sigma2;
    auto& dk = dterm[k];
    for (int j = 0; j < n; ++j) {
      const double lin = eta(j) + uk;
      h += A(j) * lin - softplus(lin);
      const double r = A(j) - expit(lin);
      dk(0) += r;
      dk.segment(1, p) += r * c.design().row(j).transpose();
    }
    dk(p + 1) = uk * uk / sigma2 - 1.0;
    logterm[k] = gh.log_weights[k] + x * x + h;
    mx = std::max(mx, logterm[k]);
  }
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) total += std::exp(logterm[k] - mx);
  ClusterQuadrature out;
  out.mode = u;
  out.score = Eigen::VectorXd::Zero(p + 2);
  for (std::size_t k = 0; k < K; ++k) out.score += std::exp(logterm[k] - mx) / total * dterm[k];
  out.loglik = mx + std::log(total) + std::log(scale) - log_sigma - 0.5 * std::log(2.0 * std::numbers::pi);
  return out;
}

struct MarginalEval {
  double ll = 0.0;
  Eigen::VectorXd score;
  std::vector<double> modes;
};

inline MarginalEval marginal_eval(const Dataset& data, const Eigen::VectorXd& theta, const GaussHermite& gh,
                                  const std::vector<double>& mode_start) {
  const auto p = theta.size() - 2;
  MarginalEval ev;
  ev.score = Eigen::VectorXd::Zero(theta.size());
  ev.modes.resize(static_cast<std::size_t>(data.m()));
  const Eigen::VectorXd beta = theta.segment(1, p);
  for (std::size_t i = 0; i < ev.modes.size(); ++i) {
    const auto q = cluster_marginal(data.cluster(i), theta(0), beta, theta(p + 1), gh, mode_start[i]);
    ev.ll += q.loglik;
    ev.score += q.score;
    ev.modes[i] = q.mode;
  }
  return ev;
}

/// Unpenalized pooled logistic regression with intercept (start values).
inline Eigen::VectorXd pooled_logistic(const Dataset& data) {
  const auto p = data.p();
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p + 1);
  for (int it = 0; it < 50; ++it) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p + 1);
    Eigen::MatrixXd I = Eigen::MatrixXd::Zero(p + 1, p + 1);
    for (const auto& c : data.clusters())
      for (int j = 0; j < c.size(); ++j) {
        Eigen::VectorXd x(p + 1);
        x(0) = 1.0;
        x.tail(p) = c.design().row(j).transpose();
        const double pr = expit(x.dot(b));
        g += (c.treatments()(j) - pr) * x;
        I += pr * (1.0 - pr) * x * x.transpose();
      }
    const Eigen::VectorXd step = I.ldlt().solve(g);
    if (!step.allFinite()) break;
    b += step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-12) break;
  }
  return b;
}

}  // namespace detail

/// Logistic mixed model with a normal random intercept, maximized by Newton
/// iteration on (intercept, beta, log sigma_U) with a finite-difference
/// Hessian of the quadrature score and step halving.
inline PropensityFit fit_random_logistic(const Dataset& data, const RandomLogisticOptions& opt = {}) {
  if (!data.binary()) fail(ErrorCode::invalid_argument, "random-intercept logistic model needs binary treatment");
  const auto gh = gauss_hermite(opt.quadrature_nodes);
  const auto p = static_cast<Eigen::Index>(data.p());
  const auto d = p + 2;

  Eigen::VectorXd theta(d);
  const Eigen::VectorXd pooled = detail::pooled_logistic(data);
  theta.head(p + 1) = pooled.allFinite() ? pooled : Eigen::VectorXd::Zero(p + 1);
  theta(p + 1) = 0.0;
  std::vector<double> modes(static_cast<std::size_t>(data.m()), 0.0);

  PropensityFit fit;
  fit.kind = PropensityKind::random_intercept;
  auto cur = detail::marginal_eval(data, theta, gh, modes);
  fit.loglik_trace.push_back(cur.ll);
  bool sigma_frozen = false;

  auto score_free = [&](const Eigen::VectorXd& g) {
    Eigen::VectorXd out = g;
    if (sigma_frozen) out(p + 1) = 0.0;
    return out;
  };

  for (fit.iterations = 0; fit.iterations < opt.max_iter;) {
    sigma_frozen = theta(p + 1) <= opt.min_log_sigma + 1e-12 && cur.score(p + 1) <= 0.0;
    const Eigen::VectorXd g = score_free(cur.score);
    if (g.lpNorm<Eigen::Infinity>() <= opt.score_tol) {
      fit.converged = true;
      break;
    }
    const auto modes_now = cur.modes;
    auto score_at = [&](const Eigen::VectorXd& th) { return detail::marginal_eval(data, th, gh, modes_now).score; };
    Eigen::MatrixXd H = fd_hessian(score_at, theta);
    if (sigma_frozen) {
      H.row(p + 1).setZero();
      H.col(p + 1).setZero();
      H(p + 1, p + 1) = -1.0;
    }
    const Eigen::VectorXd dir = newton_direction(H, g);
    double step = 1.0;
    bool accepted = false;
    detail::MarginalEval next;
    Eigen::VectorXd cand;
    for (int h = 0; h <= 50; ++h, step *= 0.5) {
      cand = theta + step * dir;
      cand(p + 1) = std::max(cand(p + 1), opt.min_log_sigma);
      next = detail::marginal_eval(data, cand, gh, cur.modes);
      if (std::isfinite(next.ll) && next.ll >= cur.ll) {
        accepted = true;
        break;
      }
    }
    ++fit.iterations;
    if (!accepted) {
      fit.converged = g.lpNorm<Eigen::Infinity>() <= 1e-4 * (1.0 + data.n());
      break;
    }
    const double change = std::abs(next.ll - cur.ll) / (1.0 + std::abs(cur.ll));
    theta = cand;
    cur = std::move(next);
    fit.loglik_trace.push_back(cur.ll);
    if (theta.head(p + 1).norm() > opt.separation_threshold)
      fail(ErrorCode::separation, "random-intercept logistic coefficients diverge (separation)");
    if (change <= opt.rel_loglik_tol) {
      fit.converged = score_free(cur.score).lpNorm<Eigen::Infinity>() <= 1e-4 * (1.0 + data.n());
      break;
    }
  }

  fit.intercept = theta(0);
  fit.beta = theta.segment(1, p);
  fit.variance_component = std::exp(2.0 * theta(p + 1));
  fit.loglik = cur.ll;
  fit.boundary = fit.variance_component < opt.boundary_variance;
  if (fit.boundary) fit.notes.push_back("variance component at the zero boundary; model reduces to pooled logistic");
  fit.posterior_modes = cur.modes;
  if (opt.prediction == PredictionRule::conditional_mode) {
    fit.cluster_effects = cur.modes;
  } else {
    fit.cluster_effects.assign(static_cast<std::size_t>(data.m()), 0.0);
  }
  return fit;
}

/// (1/n) sum 1{A = a} Y / P(A = a) under the fitted propensity.
inline EffectEstimate ipw_mean_from_propensity(const Dataset& data, const PropensityFit& fit, int a,
                                               double prob_floor = kDefaultProbFloor) {
  if (!data.binary()) fail(ErrorCode::invalid_argument, "propensity-model IPW needs binary treatment");
  if (a != 0 && a != 1) fail(ErrorCode::invalid_argument, "treatment level out of range");
  if (fit.cluster_effects.size() != static_cast<std::size_t>(data.m()))
    fail(ErrorCode::invalid_argument, "propensity fit does not match the dataset's clusters");
  EffectEstimate est;
  est.method = fit.kind == PropensityKind::fixed_effect ? Method::ipw_fixed : Method::ipw_random;
  est.estimand = {EstimandKind::mean_potential, a};
  if (!fit.converged) est.warnings.push_back("propensity model fit did not converge");
  double sum = 0.0;
  int extreme = 0;
  for (std::size_t i = 0; i < static_cast<std::size_t>(data.m()); ++i) {
    const auto& c = data.cluster(i);
    for (int j = 0; j < c.size(); ++j) {
      if (c.treatments()(j) != a) continue;
      const double e = a == 1 ? fit.propensity(c, i, j) : 1.0 - fit.propensity(c, i, j);
      if (e < prob_floor) ++extreme;
      sum += c.outcomes()(j) / e;
    }
  }
  if (extreme > 0)
    est.warnings.push_back("extreme weights: " + std::to_string(extreme) + " propensities below " + std::to_string(prob_floor));
  est.point = sum / data.n();
  est.n_used = data.n();
  return est;
}

/// (1/n) sum {A Y / e - (1 - A) Y / (1 - e)} with e the fitted propensity.
inline EffectEstimate ipw_tau_from_propensity(const Dataset& data, const PropensityFit& fit,
                                              double prob_floor = kDefaultProbFloor) {
  if (!data.binary()) fail(ErrorCode::invalid_argument, "IPW average effect needs binary treatment");
  if (fit.cluster_effects.size() != static_cast<std::size_t>(data.m()))
    fail(ErrorCode::invalid_argument, "propensity fit does not match the dataset's clusters");
  EffectEstimate est;
  est.method = fit.kind == PropensityKind::fixed_effect ? Method::ipw_fixed : Method::ipw_random;
  est.estimand = {EstimandKind::tau, 1};
  if (!fit.converged) est.warnings.push_back("propensity model fit did not converge");
  double sum = 0.0;
  int extreme = 0;
  for (std::size_t i = 0; i < static_cast<std::size_t>(data.m()); ++i) {
    const auto& c = data.cluster(i);
    for (int j = 0; j < c.size(); ++j) {
      const double e = fit.propensity(c, i, j);
      if (e < prob_floor || e > 1.0 - prob_floor) ++extreme;
      const double y = c.outcomes()(j);
      sum += c.treatments()(j) == 1 ? y / e : -y / (1.0 - e);
    }
  }
  if (extreme > 0)
    est.warnings.push_back("extreme weights: " + std::to_string(extreme) + " propensities within " +
                           std::to_string(prob_floor) + " of 0 or 1");
  est.point = sum / data.n();
  est.n_used = data.n();
  return est;
}

}  // namespace icpw
