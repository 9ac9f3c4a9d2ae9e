#pragma once

// Oracle suites run by `icpw selftest`: dynamic programming against
// enumeration, analytic scores against finite differences, invariance of the
// conditional probabilities to the cluster effect, and exact conditional
// unbiasedness of the weighted cluster sums.

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "icpw/baselines.hpp"
#include "icpw/cmle.hpp"
#include "icpw/cond_prob.hpp"
#include "icpw/data_model.hpp"
#include "icpw/error.hpp"
#include "icpw/parallel.hpp"

namespace icpw {

struct SuiteResult {
  std::string name;
  bool passed = false;
  int checks = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
};

struct SelftestOptions {
  std::uint64_t seed = 20240601;
  int instances = 100;
  double perturbation = 0.0;  ///< added to every library value under test; nonzero makes the suites fail
};

inline const std::vector<std::string>& selftest_suites() {
  static const std::vector<std::string> names{"dp", "gradients", "u_invariance", "unbiasedness"};
  return names;
}

namespace detail {

struct RandomCluster {
  LinearPredictors lp;
  std::vector<int> a;
  SufficientStat stat;
};

inline RandomCluster random_cluster(std::mt19937_64& rng, int n, int K, int p) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd X(n, p);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < p; ++k) X(j, k) = normal(rng);
  Eigen::VectorXd beta(p * K);
  for (int k = 0; k < p * K; ++k) beta(k) = normal(rng);
  RandomCluster rc{linear_predictors(X, beta, K), {}, {}};
  // redraw until at least two levels occur
  std::uniform_int_distribution<int> level(0, K);
  do {
    rc.a.assign(static_cast<std::size_t>(n), 0);
    for (auto& v : rc.a) v = level(rng);
  } while (std::all_of(rc.a.begin(), rc.a.end(), [&](int v) { return v == rc.a.front(); }));
  std::vector<int> counts(static_cast<std::size_t>(K) + 1, 0);
  for (int v : rc.a) ++counts[static_cast<std::size_t>(v)];
  rc.stat.counts = K == 1 ? std::vector<int>{counts[1]} : std::vector<int>(counts.begin(), counts.end() - 1);
  return rc;
}

inline double rel_err(double x, double ref) { return std::abs(x - ref) / std::max(1.0, std::abs(ref)); }

/// P(A_j = a | sum = t, U) by Bayes over the joint Bernoulli model with
/// cluster effect u added to every linear predictor.
inline double bayes_conditional(const LinearPredictors& lp, int t, int j, int a, double u) {
  const int n = lp.size();
  double num = 0.0, den = 0.0;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (std::popcount(mask) != t) continue;
    double pr = 1.0;
    for (int l = 0; l < n; ++l) {
      const double e = expit(lp.eta(l, 0) + u);
      pr *= (mask >> l & 1u) ? e : 1.0 - e;
    }
    den += pr;
    if (static_cast<int>(mask >> j & 1u) == a) num += pr;
  }
  return num / den;
}

}  // namespace detail

inline SuiteResult selftest_dp(const SelftestOptions& opt) {
  SuiteResult r{"dp", true, 0, 0.0, 1e-9};
  auto rng = substream(opt.seed, 1);
  for (int inst = 0; inst < opt.instances; ++inst) {
    const int K = inst % 4 == 3 ? 2 : 1;
    const int n = std::uniform_int_distribution<int>(2, K == 1 ? 10 : 6)(rng);
    const auto rc = detail::random_cluster(rng, n, K, 2);
    const auto all = cluster_cond_probs(rc.lp, rc.stat, false);
    for (int j = 0; j < n; ++j)
      for (int a = 0; a <= K; ++a) {
        if (all.log_prob(j, a) == kNegInf) continue;
        const double ref = cond_prob_bruteforce(rc.lp, rc.stat, j, a).prob;
        const double got = std::exp(all.log_prob(j, a)) + opt.perturbation;
        r.max_error = std::max(r.max_error, detail::rel_err(got, ref));
        ++r.checks;
      }
  }
  r.passed = r.max_error <= r.tolerance;
  return r;
}

inline SuiteResult selftest_gradients(const SelftestOptions& opt) {
  SuiteResult r{"gradients", true, 0, 0.0, 1e-6};
  auto rng = substream(opt.seed, 2);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int inst = 0; inst < opt.instances; ++inst) {
    const int K = inst % 4 == 3 ? 2 : 1;
    const int n = std::uniform_int_distribution<int>(2, 7)(rng);
    const auto rc = detail::random_cluster(rng, n, K, 2);
    const int j = std::uniform_int_distribution<int>(0, n - 1)(rng);
    const int a = rc.a[static_cast<std::size_t>(j)];
    Eigen::VectorXd beta(2 * K);
    for (int k = 0; k < 2 * K; ++k) beta(k) = normal(rng);
    auto logp = [&](const Eigen::VectorXd& b) {
      const auto lp = linear_predictors(rc.lp.design, b, K);
      return K == 1 ? cond_prob_binary(lp, rc.stat.counts[0], j, a) : cond_prob_multinomial(lp, rc.stat, j, a);
    };
    const Eigen::VectorXd g = logp(beta).grad_log_prob;
    for (int k = 0; k < beta.size(); ++k) {
      const double h = 1e-5;
      Eigen::VectorXd up = beta, dn = beta;
      up(k) += h;
      dn(k) -= h;
      const double fd = (logp(up).log_prob - logp(dn).log_prob) / (2 * h);
      const double err = std::abs(g(k) + opt.perturbation - fd) / std::max(1.0, std::abs(fd));
      r.max_error = std::max(r.max_error, err);
      ++r.checks;
    }
  }
  r.passed = r.max_error <= r.tolerance;
  return r;
}

inline SuiteResult selftest_u_invariance(const SelftestOptions& opt) {
  SuiteResult r{"u_invariance", true, 0, 0.0, 1e-10};
  auto rng = substream(opt.seed, 3);
  for (int inst = 0; inst < opt.instances; ++inst) {
    const int n = std::uniform_int_distribution<int>(2, 8)(rng);
    const auto rc = detail::random_cluster(rng, n, 1, 2);
    const int t = rc.stat.counts[0];
    for (int j = 0; j < n; ++j) {
      const double dp = cond_prob_binary(rc.lp, t, j, 1).prob + opt.perturbation;
      for (double u : {-3.0, -1.0, 0.0, 1.0, 3.0}) {
        r.max_error = std::max(r.max_error, detail::rel_err(dp, detail::bayes_conditional(rc.lp, t, j, 1, u)));
        ++r.checks;
      }
    }
  }
  r.passed = r.max_error <= r.tolerance;
  return r;
}

inline SuiteResult selftest_unbiasedness(const SelftestOptions& opt) {
  SuiteResult r{"unbiasedness", true, 0, 0.0, 1e-10};
  auto rng = substream(opt.seed, 4);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int inst = 0; inst < opt.instances; ++inst) {
    const int n = std::uniform_int_distribution<int>(2, 8)(rng);
    const auto rc = detail::random_cluster(rng, n, 1, 2);
    const int t = rc.stat.counts[0];
    std::vector<double> y0(static_cast<std::size_t>(n)), y1(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
      y0[static_cast<std::size_t>(j)] = normal(rng);
      y1[static_cast<std::size_t>(j)] = 2.0 + normal(rng);
    }
    std::vector<double> phi1(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) phi1[static_cast<std::size_t>(j)] = cond_prob_binary(rc.lp, t, j, 1).prob + opt.perturbation;
    // E[sum_j 1{A_j = a} Y_j(a) / phi_j(a) | T = t] over every arrangement with sum t
    double log_den = kNegInf;
    std::vector<std::pair<unsigned, double>> support;
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
      if (std::popcount(mask) != t) continue;
      double s = 0.0;
      for (int l = 0; l < n; ++l)
        if (mask >> l & 1u) s += rc.lp.eta(l, 0);
      support.emplace_back(mask, s);
      log_den = log_add(log_den, s);
    }
    for (int a : {0, 1}) {
      double expect = 0.0, truth = 0.0;
      for (const auto& [mask, s] : support) {
        const double pr = std::exp(s - log_den);
        double sum = 0.0;
        for (int l = 0; l < n; ++l) {
          const auto lu = static_cast<std::size_t>(l);
          if (static_cast<int>(mask >> l & 1u) != a) continue;
          sum += a == 1 ? y1[lu] / phi1[lu] : y0[lu] / (1.0 - phi1[lu]);
        }
        expect += pr * sum;
      }
      for (int l = 0; l < n; ++l) truth += a == 1 ? y1[static_cast<std::size_t>(l)] : y0[static_cast<std::size_t>(l)];
      r.max_error = std::max(r.max_error, detail::rel_err(expect, truth));
      ++r.checks;
    }
  }
  r.passed = r.max_error <= r.tolerance;
  return r;
}

inline SuiteResult run_selftest_suite(const std::string& name, const SelftestOptions& opt = {}) {
  if (name == "dp") return selftest_dp(opt);
  if (name == "gradients") return selftest_gradients(opt);
  if (name == "u_invariance") return selftest_u_invariance(opt);
  if (name == "unbiasedness") return selftest_unbiasedness(opt);
  fail(ErrorCode::invalid_argument, "unknown selftest suite '" + name + "'");
}

}  // namespace icpw
