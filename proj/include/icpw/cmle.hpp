#pragma once

// Conditional maximum likelihood for the treatment-model coefficients.
// The default objective is the product over all units of their conditional
// probabilities given the cluster counts (a composite likelihood; units in
// one cluster are not treated as independent when forming standard errors,
// see inference.hpp). The classical conditional-logit objective, the joint
// probability of each cluster's assignment given its counts, is available as
// CondLikelihood::cluster.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "icpw/cond_prob.hpp"
#include "icpw/data_model.hpp"
#include "icpw/error.hpp"

namespace icpw {

enum class CondLikelihood { composite, cluster };

inline const char* to_string(CondLikelihood l) { return l == CondLikelihood::cluster ? "cluster" : "composite"; }

inline CondLikelihood parse_cond_likelihood(const std::string& s) {
  if (s == "composite") return CondLikelihood::composite;
  if (s == "cluster") return CondLikelihood::cluster;
  fail(ErrorCode::invalid_argument, "unknown likelihood '" + s + "' (expected composite or cluster)");
}

struct FitOptions {
  CondLikelihood likelihood = CondLikelihood::composite;
  int max_iter = 100;
  double score_tol = 1e-8;       ///< max-norm of the score
  double rel_loglik_tol = 1e-12;
  double separation_threshold = 1e3;
  double separation_step = 0.1;  ///< Newton step length at a flat score that signals separation
  int max_halvings = 50;
  std::size_t max_states = kDefaultMaxStates;
  std::optional<Eigen::VectorXd> start;  ///< defaults to zero
};

enum class StopReason { score, loglik_change, max_iter, line_search };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::score: return "score";
    case StopReason::loglik_change: return "loglik_change";
    case StopReason::max_iter: return "max_iter";
    case StopReason::line_search: return "line_search";
  }
  return "unknown";
}

struct CondFit {
  Eigen::VectorXd beta;  ///< length p*K; block k-1 belongs to level k
  double log_cond_lik = 0.0;
  int iterations = 0;
  bool converged = false;
  StopReason stop_reason = StopReason::max_iter;
  double grad_norm_at_solution = 0.0;  ///< max-norm of the score at beta
  Eigen::MatrixXd beta_cov;            ///< filled by attach_sandwich()
  int K = 1;
  CondLikelihood likelihood = CondLikelihood::composite;
};

namespace detail {

inline void require_retained(const Cluster& c) {
  if (!admits_permutations(c))
    fail(ErrorCode::internal, "cluster '" + c.id() + "' has constant treatment; positivity filter was not applied");
}

}  // namespace detail

struct LikelihoodEval {
  double loglik = 0.0;
  Eigen::VectorXd score;
};

/// Log conditional likelihood and (optionally) its score in one pass.
inline LikelihoodEval cond_loglik_and_score(const Dataset& data, const Eigen::VectorXd& beta, bool with_score,
                                            CondLikelihood likelihood = CondLikelihood::composite,
                                            std::size_t max_states = kDefaultMaxStates) {
  const int K = data.K();
  LikelihoodEval ev;
  if (with_score) ev.score = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(data.p()) * K);
  for (const auto& c : data.clusters()) {
    detail::require_retained(c);
    const auto lp = linear_predictors(c, beta, K);
    if (likelihood == CondLikelihood::cluster) {
      const auto joint = cluster_joint_log_prob(lp, c.treatments(), with_score, max_states);
      ev.loglik += joint.log_prob;
      if (with_score) ev.score += joint.grad_log_prob;
      continue;
    }
    const auto probs = cluster_cond_probs(lp, sufficient_stat(c, K), with_score, max_states);
    for (int j = 0; j < c.size(); ++j) {
      const int a = c.treatments()(j);
      ev.loglik += probs.log_prob(j, a);
      if (with_score) ev.score += probs.grad[static_cast<std::size_t>(j)].col(a);
    }
  }
  return ev;
}

inline double cond_loglik(const Dataset& data, const Eigen::VectorXd& beta,
                          CondLikelihood likelihood = CondLikelihood::composite) {
  return cond_loglik_and_score(data, beta, false, likelihood).loglik;
}

inline Eigen::VectorXd cond_score(const Dataset& data, const Eigen::VectorXd& beta,
                                  CondLikelihood likelihood = CondLikelihood::composite) {
  return cond_loglik_and_score(data, beta, true, likelihood).score;
}

/// Per-cluster matrices of per-unit scores (dim x n_i), evaluated at the
/// observed treatments. Under CondLikelihood::cluster each matrix has a
/// single column, the score of the cluster's joint probability.
inline std::vector<Eigen::MatrixXd> unit_scores(const Dataset& data, const Eigen::VectorXd& beta,
                                                CondLikelihood likelihood = CondLikelihood::composite) {
  const int K = data.K();
  std::vector<Eigen::MatrixXd> out;
  out.reserve(static_cast<std::size_t>(data.m()));
  for (const auto& c : data.clusters()) {
    detail::require_retained(c);
    const auto lp = linear_predictors(c, beta, K);
    if (likelihood == CondLikelihood::cluster) {
      out.emplace_back(cluster_joint_log_prob(lp, c.treatments(), true).grad_log_prob);
      continue;
    }
    const auto probs = cluster_cond_probs(lp, sufficient_stat(c, K), true);
    Eigen::MatrixXd s(lp.dim(), c.size());
    for (int j = 0; j < c.size(); ++j) s.col(j) = probs.grad[static_cast<std::size_t>(j)].col(c.treatments()(j));
    out.push_back(std::move(s));
  }
  return out;
}

/// Names of covariates that never vary inside any cluster. Their
/// coefficients are not identified by the conditional likelihood.
inline std::vector<std::string> uninformative_covariates(const Dataset& data) {
  std::vector<std::string> out;
  for (int k = 0; k < data.p(); ++k) {
    bool varies = false;
    for (const auto& c : data.clusters()) {
      const auto col = c.design().col(k);
      if ((col.array() != col(0)).any()) {
        varies = true;
        break;
      }
    }
    if (!varies) out.push_back(data.covariate_names()[static_cast<std::size_t>(k)]);
  }
  return out;
}

/// Central finite-difference Jacobian of the score (the Hessian of the log
/// conditional likelihood), symmetrized.
template <class ScoreFn>
Eigen::MatrixXd fd_hessian(ScoreFn&& score, const Eigen::VectorXd& beta) {
  const auto d = beta.size();
  Eigen::MatrixXd H(d, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    const double h = 1e-5 * (1.0 + std::abs(beta(k)));
    Eigen::VectorXd up = beta, down = beta;
    up(k) += h;
    down(k) -= h;
    H.col(k) = (score(up) - score(down)) / (2.0 * h);
  }
  return 0.5 * (H + H.transpose());
}

/// Newton ascent step direction; falls back to a ridge-shifted system when
/// the Hessian is not negative definite.
inline Eigen::VectorXd newton_direction(const Eigen::MatrixXd& H, const Eigen::VectorXd& g) {
  const Eigen::MatrixXd neg = -H;
  Eigen::LLT<Eigen::MatrixXd> llt(neg);
  if (llt.info() == Eigen::Success) return llt.solve(g);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(neg);
  const double shift = std::max(0.0, -es.eigenvalues().minCoeff()) + 1e-6 * (1.0 + es.eigenvalues().cwiseAbs().maxCoeff());
  return (neg + shift * Eigen::MatrixXd::Identity(H.rows(), H.cols())).ldlt().solve(g);
}

inline CondFit fit_cmle(const Dataset& data, const FitOptions& options = {}) {
  if (auto flat = uninformative_covariates(data); !flat.empty()) {
    std::string names;
    for (const auto& s : flat) names += (names.empty() ? "" : ", ") + s;
    fail(ErrorCode::no_information, "covariates without within-cluster variation carry no conditional information: " + names);
  }
  const auto d = static_cast<Eigen::Index>(data.p()) * data.K();
  if (d == 0) fail(ErrorCode::no_information, "no covariates to fit");

  CondFit fit;
  fit.K = data.K();
  fit.likelihood = options.likelihood;
  fit.beta = options.start.value_or(Eigen::VectorXd::Zero(d));
  if (fit.beta.size() != d) fail(ErrorCode::invalid_argument, "start vector has wrong length");

  auto eval = [&](const Eigen::VectorXd& b) { return cond_loglik_and_score(data, b, true, options.likelihood, options.max_states); };
  auto score = [&](const Eigen::VectorXd& b) { return eval(b).score; };

  auto cur = eval(fit.beta);
  // A flat score with a long Newton step means the objective still rises
  // along some direction: the supremum is at infinity.
  auto check_bounded = [&](const Eigen::VectorXd& step_dir) {
    if (step_dir.lpNorm<Eigen::Infinity>() > options.separation_step)
      fail(ErrorCode::separation, "conditional likelihood keeps increasing along a direction at |score| " +
                                      std::to_string(cur.score.lpNorm<Eigen::Infinity>()) + " (separation)");
  };
  Eigen::VectorXd dir;
  for (fit.iterations = 0; fit.iterations < options.max_iter;) {
    const Eigen::MatrixXd H = fd_hessian(score, fit.beta);
    dir = newton_direction(H, cur.score);
    if (cur.score.lpNorm<Eigen::Infinity>() <= options.score_tol) {
      check_bounded(dir);
      fit.converged = true;
      fit.stop_reason = StopReason::score;
      break;
    }
    double step = 1.0;
    bool accepted = false;
    LikelihoodEval next;
    Eigen::VectorXd cand;
    for (int h = 0; h <= options.max_halvings; ++h, step *= 0.5) {
      cand = fit.beta + step * dir;
      next = eval(cand);
      if (std::isfinite(next.loglik) && next.loglik >= cur.loglik) {
        accepted = true;
        break;
      }
    }
    ++fit.iterations;
    if (!accepted) {
      fit.stop_reason = StopReason::line_search;
      // Stalled at the floating-point floor of the objective.
      fit.converged = cur.score.lpNorm<Eigen::Infinity>() <= 1e-6 * (1.0 + data.n());
      if (fit.converged) check_bounded(dir);
      break;
    }
    const double change = std::abs(next.loglik - cur.loglik) / (1.0 + std::abs(cur.loglik));
    fit.beta = cand;
    cur = std::move(next);
    if (fit.beta.norm() > options.separation_threshold)
      fail(ErrorCode::separation, "coefficient norm exceeded " + std::to_string(options.separation_threshold) +
                                      "; conditional likelihood appears unbounded (separation)");
    if (change <= options.rel_loglik_tol) {
      fit.stop_reason = StopReason::loglik_change;
      fit.converged = cur.score.lpNorm<Eigen::Infinity>() <= 1e-6 * (1.0 + data.n());
      if (fit.converged) check_bounded(newton_direction(fd_hessian(score, fit.beta), cur.score));
      break;
    }
  }
  if (!fit.converged && fit.iterations >= options.max_iter) fit.stop_reason = StopReason::max_iter;
  fit.log_cond_lik = cur.loglik;
  fit.grad_norm_at_solution = cur.score.lpNorm<Eigen::Infinity>();
  return fit;
}

}  // namespace icpw
