#pragma once

// Standard errors: the sandwich covariance of the conditional MLE with the
// delta-method variance of the weighted estimators, and the cluster
// bootstrap over any estimator pipeline.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "icpw/baselines.hpp"
#include "icpw/cmle.hpp"
#include "icpw/cond_prob.hpp"
#include "icpw/data_model.hpp"
#include "icpw/error.hpp"
#include "icpw/estimators.hpp"
#include "icpw/parallel.hpp"

namespace icpw {

struct SandwichParts {
  Eigen::MatrixXd B2;  ///< (1/n) sum of unit Hessians of log P(A_ij | X_i, T_i)
  Eigen::MatrixXd B3;  ///< (1/n) sum of outer products of cluster score sums
  Eigen::MatrixXd B1;  ///< B2^-1 B3 B2^-1
  Eigen::VectorXd H1;  ///< influence of beta on the mean potential outcome at h1_level
  int h1_level = 1;
  Eigen::VectorXd H2;  ///< influence of beta on the average treatment effect
  double V1 = 0.0;
  double V2 = 0.0;
};

inline constexpr double kMaxConditionNumber = 1e12;

namespace detail {

inline std::string describe_direction(const Eigen::VectorXd& v, const Dataset& data) {
  std::ostringstream os;
  os.precision(3);
  const auto p = static_cast<Eigen::Index>(data.p());
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    if (std::abs(v(k)) < 1e-3) continue;
    if (os.tellp() > 0) os << " ";
    os << (v(k) >= 0 ? "+" : "") << v(k) << "*" << data.covariate_names()[static_cast<std::size_t>(k % p)];
    if (data.K() > 1) os << "[level " << k / p + 1 << "]";
  }
  return os.str();
}

}  // namespace detail

/// B2, B3 and B1 at fit.beta.
inline SandwichParts sandwich_beta_cov(const Dataset& data, const CondFit& fit) {
  if (!fit.converged) fail(ErrorCode::invalid_argument, "sandwich covariance needs a converged fit");
  const double n = data.n();
  const auto d = fit.beta.size();
  SandwichParts parts;

  parts.B3 = Eigen::MatrixXd::Zero(d, d);
  for (const auto& s : unit_scores(data, fit.beta, fit.likelihood)) {
    const Eigen::VectorXd total = s.rowwise().sum();
    parts.B3 += total * total.transpose();
  }
  parts.B3 /= n;

  auto score = [&](const Eigen::VectorXd& b) { return cond_score(data, b, fit.likelihood); };
  parts.B2 = fd_hessian(score, fit.beta) / n;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(parts.B2);
  const Eigen::VectorXd mag = es.eigenvalues().cwiseAbs();
  Eigen::Index weakest = 0;
  const double smallest = mag.minCoeff(&weakest);
  if (!(smallest > 0.0) || mag.maxCoeff() / smallest > kMaxConditionNumber)
    fail(ErrorCode::singular, "information matrix is singular along direction " +
                                  detail::describe_direction(es.eigenvectors().col(weakest), data));
  const Eigen::MatrixXd inv = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  parts.B1 = inv * parts.B3 * inv;
  parts.B1 = 0.5 * (parts.B1 + parts.B1.transpose());
  return parts;
}

/// Stores the sandwich covariance of beta_hat, B1 / n, on the fit.
inline SandwichParts attach_sandwich(const Dataset& data, CondFit& fit) {
  auto parts = sandwich_beta_cov(data, fit);
  fit.beta_cov = parts.B1 / data.n();
  return parts;
}

/// H1(a) = (1/n) sum 1{A = a} Y grad(P(A = a)) / P(A = a)^2, which is minus
/// the derivative of the weighted mean at level a with respect to beta.
inline Eigen::VectorXd influence_mean_potential(const Dataset& data, const CondFit& fit, int a,
                                                double prob_floor = kDefaultProbFloor) {
  if (a < 0 || a > data.K()) fail(ErrorCode::invalid_argument, "treatment level out of range");
  Eigen::VectorXd H = Eigen::VectorXd::Zero(fit.beta.size());
  for (const auto& c : data.clusters()) {
    detail::require_retained(c);
    const auto lp = linear_predictors(c, fit.beta, data.K());
    const auto probs = cluster_cond_probs(lp, sufficient_stat(c, data.K()), true);
    for (int j = 0; j < c.size(); ++j) {
      if (c.treatments()(j) != a) continue;
      const double pr = std::exp(probs.log_prob(j, a));
      if (!(pr >= prob_floor)) fail(ErrorCode::domain, "conditional probability below the floor in cluster '" + c.id() + "'");
      // grad(phi) / phi^2 = grad(log phi) / phi
      H += c.outcomes()(j) / pr * probs.grad[static_cast<std::size_t>(j)].col(a);
    }
  }
  return H / data.n();
}

/// H2 = H1(1) - H1(0): for binary treatment with phi = P(A = 1), this is
/// (1/n) sum {A / phi^2 + (1 - A) / (1 - phi)^2} Y grad(phi).
inline Eigen::VectorXd influence_tau(const Dataset& data, const CondFit& fit, double prob_floor = kDefaultProbFloor) {
  if (!data.binary()) fail(ErrorCode::invalid_argument, "average treatment effect needs binary treatment");
  return influence_mean_potential(data, fit, 1, prob_floor) - influence_mean_potential(data, fit, 0, prob_floor);
}

/// V = H' B1 H; tiny negative values from rounding are clamped to 0.
inline double delta_variance(const Eigen::VectorXd& H, const Eigen::MatrixXd& B1) {
  if (H.size() != B1.rows()) fail(ErrorCode::invalid_argument, "influence vector and covariance differ in dimension");
  const double V = H.dot(B1 * H);
  const double scale = 1.0 + H.squaredNorm() * B1.cwiseAbs().maxCoeff();
  if (V < -1e-10 * scale) fail(ErrorCode::numerical, "negative delta-method variance " + std::to_string(V));
  return std::max(0.0, V);
}

/// Fills H1 (at level a), V1 and, for binary treatment, H2 and V2.
inline void fill_influence(SandwichParts& parts, const Dataset& data, const CondFit& fit, int a) {
  parts.h1_level = a;
  parts.H1 = influence_mean_potential(data, fit, a);
  parts.V1 = delta_variance(parts.H1, parts.B1);
  if (data.binary()) {
    parts.H2 = influence_tau(data, fit);
    parts.V2 = delta_variance(parts.H2, parts.B1);
  }
}

enum class SeTarget { mean_potential, tau };

/// sqrt(V / n) for the requested target.
inline double asymptotic_se(const SandwichParts& parts, int n, SeTarget target) {
  if (n < 1) fail(ErrorCode::invalid_argument, "n must be positive");
  const double V = target == SeTarget::tau ? parts.V2 : parts.V1;
  if (V < 0) fail(ErrorCode::numerical, "negative variance");
  return std::sqrt(V / n);
}

inline double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }

inline Interval wald_interval(double point, double se, double level) {
  const double z = normal_quantile(0.5 + level / 2.0);
  return {point - z * se, point + z * se};
}

// ---------------------------------------------------------------------------
// Pipelines

struct EstimatorRecipe {
  Method method = Method::icpw;
  Estimand estimand{EstimandKind::tau, 1};
  NaiveVariant naive_variant = NaiveVariant::printed;
  WeightingOptions weighting;
  FitOptions fit;
  LogisticOptions fixed;
  RandomLogisticOptions random;
  bool sandwich = false;  ///< attach the delta-method se (ICPW only)
  double level = 0.95;
};

struct PipelineResult {
  EffectEstimate estimate;
  std::optional<CondFit> cond_fit;
  std::optional<PropensityFit> propensity;
  std::optional<SandwichParts> sandwich;
  std::vector<std::string> dropped_clusters;
};

namespace detail {

inline void merge_warnings(std::vector<std::string>& into, const std::vector<std::string>& from) {
  for (const auto& w : from)
    if (std::find(into.begin(), into.end(), w) == into.end()) into.push_back(w);
}

inline EffectEstimate naive_mean(const Dataset& data, int a, NaiveVariant variant) {
  double s = 0.0;
  int count = 0;
  for (const auto& c : data.clusters())
    for (int j = 0; j < c.size(); ++j)
      if (c.treatments()(j) == a) {
        s += c.outcomes()(j);
        ++count;
      }
  EffectEstimate e;
  e.method = Method::naive;
  e.estimand = {EstimandKind::mean_potential, a};
  e.n_used = data.n();
  if (variant == NaiveVariant::printed) {
    e.point = s / data.n();
  } else {
    if (count == 0) fail(ErrorCode::estimability, "a treatment arm is empty");
    e.point = s / count;
  }
  return e;
}

}  // namespace detail

/// Positivity filter, model fit and estimation for one method and estimand.
inline PipelineResult run_pipeline(const Dataset& raw, const EstimatorRecipe& r) {
  PipelineResult out;
  auto filtered = filter_positivity(raw);
  const Dataset& data = filtered.retained;
  out.dropped_clusters = filtered.dropped_cluster_ids;

  const bool contrast = r.estimand.kind == EstimandKind::risk_difference || r.estimand.kind == EstimandKind::relative_risk ||
                        r.estimand.kind == EstimandKind::odds_ratio;
  if ((r.estimand.kind == EstimandKind::tau || contrast) && !data.binary())
    fail(ErrorCode::invalid_argument, to_string(r.estimand) + " needs binary treatment");
  if (r.method != Method::icpw && !data.binary())
    fail(ErrorCode::invalid_argument, to_string(r.method) + " supports binary treatment only");

  auto mean_at = [&](int a) -> EffectEstimate {
    switch (r.method) {
      case Method::naive: return detail::naive_mean(data, a, r.naive_variant);
      case Method::icpw: return icpw_mean_potential(data, *out.cond_fit, a, r.weighting);
      default: return ipw_mean_from_propensity(data, *out.propensity, a, r.weighting.prob_floor);
    }
  };

  switch (r.method) {
    case Method::naive: break;
    case Method::icpw: out.cond_fit = fit_cmle(data, r.fit); break;
    case Method::ipw_fixed: out.propensity = fit_fixed_logistic(data, r.fixed); break;
    case Method::ipw_random: out.propensity = fit_random_logistic(data, r.random); break;
  }

  EffectEstimate est;
  double d1 = 1.0, d0 = -1.0;  // derivative of the target in (p1, p0)
  EffectEstimate p1, p0;
  if (r.estimand.kind == EstimandKind::mean_potential) {
    est = mean_at(r.estimand.level);
  } else if (r.estimand.kind == EstimandKind::tau) {
    switch (r.method) {
      case Method::naive: est = naive_tau(data, r.naive_variant); break;
      case Method::icpw: est = icpw_tau(data, *out.cond_fit, r.weighting); break;
      default: est = ipw_tau_from_propensity(data, *out.propensity, r.weighting.prob_floor); break;
    }
  } else {
    p1 = mean_at(1);
    p0 = mean_at(0);
    est = effect_contrast(p1, p0, r.estimand.kind);
    detail::merge_warnings(est.warnings, p1.warnings);
    detail::merge_warnings(est.warnings, p0.warnings);
    if (r.estimand.kind == EstimandKind::relative_risk) {
      d1 = 1.0 / p0.point;
      d0 = -p1.point / (p0.point * p0.point);
    } else if (r.estimand.kind == EstimandKind::odds_ratio) {
      d1 = est.point / (p1.point * (1.0 - p1.point));
      d0 = -est.point / (p0.point * (1.0 - p0.point));
    }
  }
  est.method = r.method;
  est.n_used = data.n();
  est.clusters_dropped = static_cast<int>(filtered.dropped_cluster_ids.size());
  est.ci_level = r.level;
  if (est.clusters_dropped > 0)
    est.warnings.push_back(std::to_string(est.clusters_dropped) + " cluster(s) with constant treatment dropped (" +
                           std::to_string(filtered.dropped_unit_count) + " units)");
  if (r.method == Method::icpw && out.cond_fit && !out.cond_fit->converged) {
    const std::string w = "treatment model fit did not converge";
    if (std::find(est.warnings.begin(), est.warnings.end(), w) == est.warnings.end()) est.warnings.push_back(w);
  }

  if (r.sandwich && r.method == Method::icpw) {
    auto parts = attach_sandwich(data, *out.cond_fit);
    Eigen::VectorXd H;
    if (r.estimand.kind == EstimandKind::mean_potential) {
      fill_influence(parts, data, *out.cond_fit, r.estimand.level);
      H = parts.H1;
    } else {
      fill_influence(parts, data, *out.cond_fit, 1);
      // the target's derivative is -(d1 H1(1) + d0 H1(0))
      H = d1 * parts.H1 + d0 * influence_mean_potential(data, *out.cond_fit, 0);
    }
    est.se = std::sqrt(delta_variance(H, parts.B1) / data.n());
    est.ci = wald_interval(est.point, *est.se, r.level);
    out.sandwich = std::move(parts);
  }
  out.estimate = std::move(est);
  return out;
}

// ---------------------------------------------------------------------------
// Cluster bootstrap

struct BootstrapResult {
  EffectEstimate estimate;                      ///< full-data point with bootstrap se and percentile ci
  std::vector<std::optional<double>> replicates;  ///< by replicate index; empty where the refit failed
  std::vector<std::string> failure_messages;    ///< by replicate index; empty string where it succeeded
  int failures = 0;
};

inline constexpr double kMaxBootstrapFailureRate = 0.2;

/// Draws the clusters of replicate `rep`: m indices sampled with replacement.
inline std::vector<std::size_t> bootstrap_indices(std::size_t m, std::uint64_t seed, std::uint64_t rep) {
  auto rng = substream(seed, rep, 0x62'6f'6f'74);
  std::uniform_int_distribution<std::size_t> pick(0, m - 1);
  std::vector<std::size_t> idx(m);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

inline Dataset resample_clusters(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<Cluster> chosen;
  chosen.reserve(idx.size());
  for (auto i : idx) chosen.push_back(data.cluster(i));
  return Dataset(std::move(chosen), data.K(), data.covariate_names());
}

/// Resamples clusters with replacement B times, reruns the pipeline on each
/// replicate and summarizes the replicate estimates.
inline BootstrapResult cluster_bootstrap(const Dataset& data, EstimatorRecipe recipe, int B, std::uint64_t seed,
                                         double level = 0.95, int threads = 1) {
  if (B < 2) fail(ErrorCode::invalid_argument, "bootstrap needs at least 2 replicates");
  if (!(level > 0.0 && level < 1.0)) fail(ErrorCode::invalid_argument, "confidence level must lie in (0, 1)");
  recipe.level = level;
  BootstrapResult res;
  res.estimate = run_pipeline(data, recipe).estimate;

  EstimatorRecipe rep_recipe = recipe;
  rep_recipe.sandwich = false;
  res.replicates.assign(static_cast<std::size_t>(B), std::nullopt);
  res.failure_messages.assign(static_cast<std::size_t>(B), "");
  parallel_for(static_cast<std::size_t>(B), threads, [&](std::size_t r) {
    try {
      const auto sample = resample_clusters(data, bootstrap_indices(static_cast<std::size_t>(data.m()), seed, r));
      const double v = run_pipeline(sample, rep_recipe).estimate.point;
      if (!std::isfinite(v)) fail(ErrorCode::numerical, "non-finite replicate estimate");
      res.replicates[r] = v;
    } catch (const Error& e) {
      res.failure_messages[r] = std::string(to_string(e.code())) + ": " + e.what();
    }
  });

  std::vector<double> ok;
  for (const auto& v : res.replicates)
    if (v) ok.push_back(*v);
  res.failures = B - static_cast<int>(ok.size());
  if (res.failures > kMaxBootstrapFailureRate * B)
    fail(ErrorCode::bootstrap_unreliable, std::to_string(res.failures) + " of " + std::to_string(B) +
                                              " bootstrap replicates failed");
  if (ok.size() < 2) fail(ErrorCode::bootstrap_unreliable, "fewer than 2 successful bootstrap replicates");

  // shifted by the first value so identical replicates give exactly 0
  double shift_mean = 0.0;
  for (double v : ok) shift_mean += v - ok.front();
  shift_mean /= static_cast<double>(ok.size());
  double ss = 0.0;
  for (double v : ok) ss += (v - ok.front() - shift_mean) * (v - ok.front() - shift_mean);
  res.estimate.se = std::sqrt(ss / static_cast<double>(ok.size() - 1));
  const double alpha = 1.0 - level;
  res.estimate.ci = Interval{detail::quantile_type7(ok, alpha / 2.0), detail::quantile_type7(ok, 1.0 - alpha / 2.0)};
  res.estimate.ci_level = level;
  if (res.failures > 0)
    res.estimate.warnings.push_back(std::to_string(res.failures) + " bootstrap replicate(s) failed and were excluded");
  return res;
}

}  // namespace icpw
