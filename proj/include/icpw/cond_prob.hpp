#pragma once

// Probability of a unit's treatment given the cluster covariates and the
// cluster treatment-count statistic. Conditioning on the counts removes the
// cluster intercept from the treatment model, so none of these functions
// take or need the unobserved cluster effect.
//
// Binary treatment: the permutation sums are elementary symmetric
// polynomials e_t(w) of w_l = exp(eta_l), evaluated by the prefix recurrence
//   e_t(1..l) = e_t(1..l-1) + w_l e_{t-1}(1..l-1)
// in log space. The gradient of log e_t is carried through the same
// recurrence as a mixture of the two branches.
//
// Multinomial treatment: the same recursion runs over the lattice of
// per-level count vectors.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "icpw/data_model.hpp"
#include "icpw/error.hpp"

namespace icpw {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log(exp(a) + exp(b)) without overflow.
inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

/// Linear predictors of one cluster. Column k-1 of `eta` holds x_j' beta_k
/// for treatment level k (level 0 is the reference with predictor 0).
/// `design` is kept so that gradients with respect to beta can be formed.
struct LinearPredictors {
  Eigen::MatrixXd eta;     ///< n x K
  Eigen::MatrixXd design;  ///< n x p

  int size() const { return static_cast<int>(eta.rows()); }
  int levels() const { return static_cast<int>(eta.cols()); }
  int p() const { return static_cast<int>(design.cols()); }
  int dim() const { return p() * levels(); }

  /// Predictor of level a (0..K) for unit j.
  double at(int j, int a) const { return a == 0 ? 0.0 : eta(j, a - 1); }
};

/// beta holds K blocks of length p; block k-1 belongs to level k.
inline LinearPredictors linear_predictors(const Eigen::MatrixXd& design, const Eigen::VectorXd& beta, int K) {
  const auto p = design.cols();
  if (beta.size() != p * K)
    fail(ErrorCode::invalid_argument, "beta has length " + std::to_string(beta.size()) + ", expected " + std::to_string(p * K));
  LinearPredictors lp{Eigen::MatrixXd(design.rows(), K), design};
  for (int k = 0; k < K; ++k) lp.eta.col(k) = design * beta.segment(k * p, p);
  return lp;
}

inline LinearPredictors linear_predictors(const Cluster& cluster, const Eigen::VectorXd& beta, int K) {
  return linear_predictors(cluster.design(), beta, K);
}

struct CondProbResult {
  double log_prob = 0.0;
  double prob = 1.0;
  Eigen::VectorXd grad_log_prob;  ///< d log P / d beta, length p*K
};

namespace detail {

/// log e_k and grad log e_k for k = 0..tmax over all units except `skip`.
struct EspTable {
  std::vector<double> log_e;
  Eigen::MatrixXd grad;  ///< p x (tmax+1); empty when gradients are off
};

inline EspTable esp_table(const Eigen::VectorXd& eta, const Eigen::MatrixXd* design, int skip, int tmax) {
  EspTable tab;
  tab.log_e.assign(static_cast<std::size_t>(tmax) + 1, kNegInf);
  tab.log_e[0] = 0.0;
  const bool with_grad = design != nullptr;
  if (with_grad) tab.grad = Eigen::MatrixXd::Zero(design->cols(), tmax + 1);
  int processed = 0;
  for (Eigen::Index l = 0; l < eta.size(); ++l) {
    if (l == skip) continue;
    ++processed;
    for (int k = std::min(processed, tmax); k >= 1; --k) {
      const auto ku = static_cast<std::size_t>(k);
      const double keep = tab.log_e[ku];
      const double take = eta(l) + tab.log_e[ku - 1];
      const double total = log_add(keep, take);
      if (with_grad && total != kNegInf) {
        const double w_keep = keep == kNegInf ? 0.0 : std::exp(keep - total);
        tab.grad.col(k) = w_keep * tab.grad.col(k) + (1.0 - w_keep) * (design->row(l).transpose() + tab.grad.col(k - 1));
      }
      tab.log_e[ku] = total;
    }
  }
  return tab;
}

/// Lattice of count vectors over levels 0..K-1 bounded by `full[k]`; level K
/// is implied by the number of processed units.
struct CountLattice {
  std::vector<int> bound;       ///< per tracked level
  std::vector<std::size_t> stride;
  std::size_t states = 1;
  std::vector<int> digit_sum;   ///< per state
  std::vector<int> digits;      ///< states x K, row-major

  CountLattice(const std::vector<int>& full, std::size_t max_states) {
    const auto K = full.size() - 1;
    bound.assign(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(K));
    stride.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      stride[k] = states;
      const auto radix = static_cast<std::size_t>(bound[k]) + 1;
      if (states > max_states / radix)
        fail(ErrorCode::size_limit, "count lattice exceeds " + std::to_string(max_states) + " states");
      states *= radix;
    }
    digit_sum.assign(states, 0);
    digits.assign(states * K, 0);
    for (std::size_t s = 0; s < states; ++s) {
      std::size_t rem = s;
      for (std::size_t k = 0; k < K; ++k) {
        const auto radix = static_cast<std::size_t>(bound[k]) + 1;
        const int d = static_cast<int>(rem % radix);
        rem /= radix;
        digits[s * K + k] = d;
        digit_sum[s] += d;
      }
    }
  }

  std::size_t index(const std::vector<int>& counts) const {
    std::size_t s = 0;
    for (std::size_t k = 0; k < bound.size(); ++k) s += static_cast<std::size_t>(counts[k]) * stride[k];
    return s;
  }
};

struct LatticeTable {
  std::vector<double> log_z;  ///< per state
  Eigen::MatrixXd grad;       ///< dim x states; empty when gradients are off
  int processed = 0;
};

inline LatticeTable lattice_table(const LinearPredictors& lp, const std::vector<int>& full, const CountLattice& lat,
                                  int skip, bool with_grad) {
  const int K = lp.levels();
  const int p = lp.p();
  LatticeTable cur;
  cur.log_z.assign(lat.states, kNegInf);
  cur.log_z[0] = 0.0;
  if (with_grad) cur.grad = Eigen::MatrixXd::Zero(lp.dim(), static_cast<Eigen::Index>(lat.states));
  LatticeTable next = cur;
  for (int l = 0; l < lp.size(); ++l) {
    if (l == skip) continue;
    std::fill(next.log_z.begin(), next.log_z.end(), kNegInf);
    if (with_grad) next.grad.setZero();
    for (std::size_t s = 0; s < lat.states; ++s) {
      const double base = cur.log_z[s];
      if (base == kNegInf) continue;
      const int implied_last = cur.processed - lat.digit_sum[s];
      for (int a = 0; a <= K; ++a) {
        std::size_t target = s;
        if (a < K) {
          if (lat.digits[s * static_cast<std::size_t>(K) + static_cast<std::size_t>(a)] + 1 > lat.bound[static_cast<std::size_t>(a)])
            continue;
          target = s + lat.stride[static_cast<std::size_t>(a)];
        } else if (implied_last + 1 > full[static_cast<std::size_t>(K)]) {
          continue;
        }
        const double val = base + lp.at(l, a);
        const double old = next.log_z[target];
        const double total = log_add(old, val);
        if (with_grad) {
          const double w_old = old == kNegInf ? 0.0 : std::exp(old - total);
          auto g = next.grad.col(static_cast<Eigen::Index>(target));
          g = w_old * g + (1.0 - w_old) * cur.grad.col(static_cast<Eigen::Index>(s));
          if (a >= 1) g.segment((a - 1) * p, p) += (1.0 - w_old) * lp.design.row(l).transpose();
        }
        next.log_z[target] = total;
      }
    }
    next.processed = cur.processed + 1;
    std::swap(cur, next);
  }
  return cur;
}

inline void check_unit(const LinearPredictors& lp, int j, int a) {
  if (j < 0 || j >= lp.size()) fail(ErrorCode::invalid_argument, "unit index " + std::to_string(j) + " out of range");
  if (a < 0 || a > lp.levels()) fail(ErrorCode::invalid_argument, "treatment level " + std::to_string(a) + " out of range");
  if (!lp.eta.allFinite()) fail(ErrorCode::numerical, "non-finite linear predictor");
}

}  // namespace detail

/// log e_t(w), the degree-t elementary symmetric polynomial of positive weights.
inline double log_elem_sym(std::span<const double> weights, int t) {
  const auto n = static_cast<int>(weights.size());
  if (t < 0 || t > n) fail(ErrorCode::domain, "degree " + std::to_string(t) + " outside 0.." + std::to_string(n));
  Eigen::VectorXd eta(n);
  for (int l = 0; l < n; ++l) {
    const double w = weights[static_cast<std::size_t>(l)];
    if (!(w > 0.0) || !std::isfinite(w)) fail(ErrorCode::domain, "weights must be positive and finite");
    eta(l) = std::log(w);
  }
  return detail::esp_table(eta, nullptr, -1, t).log_e[static_cast<std::size_t>(t)];
}

/// P(A_j = a | X, sum A = t; beta) for binary treatment, with its gradient.
inline CondProbResult cond_prob_binary(const LinearPredictors& lp, int t, int j, int a) {
  if (lp.levels() != 1) fail(ErrorCode::invalid_argument, "binary conditional probability needs K = 1");
  detail::check_unit(lp, j, a);
  const int n = lp.size();
  if (t <= 0 || t >= n)
    fail(ErrorCode::degeneracy, "treatment sum " + std::to_string(t) + " is degenerate for cluster size " + std::to_string(n));
  const Eigen::VectorXd eta = lp.eta.col(0);
  const auto full = detail::esp_table(eta, &lp.design, -1, t);
  const auto loo = detail::esp_table(eta, &lp.design, j, t);
  CondProbResult r;
  const auto tu = static_cast<std::size_t>(t);
  if (a == 1) {
    r.log_prob = eta(j) + loo.log_e[tu - 1] - full.log_e[tu];
    r.grad_log_prob = lp.design.row(j).transpose() + loo.grad.col(t - 1) - full.grad.col(t);
  } else {
    r.log_prob = loo.log_e[tu] - full.log_e[tu];
    r.grad_log_prob = loo.grad.col(t) - full.grad.col(t);
  }
  r.prob = std::exp(r.log_prob);
  return r;
}

inline constexpr std::size_t kDefaultMaxStates = 1'000'000;

/// P(A_j = a | X, level counts; beta) for K+1 treatment levels.
inline CondProbResult cond_prob_multinomial(const LinearPredictors& lp, const SufficientStat& stat, int j, int a,
                                            std::size_t max_states = kDefaultMaxStates) {
  detail::check_unit(lp, j, a);
  const int K = lp.levels();
  const auto full = full_level_counts(stat, K, lp.size());
  if (full[static_cast<std::size_t>(a)] == 0)
    fail(ErrorCode::degeneracy, "level " + std::to_string(a) + " has zero count; unit cannot take it");
  const detail::CountLattice lat(full, max_states);
  const auto all = detail::lattice_table(lp, full, lat, -1, true);
  const auto loo = detail::lattice_table(lp, full, lat, j, true);
  const auto target = lat.index(full);
  auto reduced = full;
  --reduced[static_cast<std::size_t>(a)];
  const auto target_loo = lat.index(reduced);
  CondProbResult r;
  r.log_prob = lp.at(j, a) + loo.log_z[target_loo] - all.log_z[target];
  r.grad_log_prob = loo.grad.col(static_cast<Eigen::Index>(target_loo)) - all.grad.col(static_cast<Eigen::Index>(target));
  if (a >= 1) r.grad_log_prob.segment((a - 1) * lp.p(), lp.p()) += lp.design.row(j).transpose();
  r.prob = std::exp(r.log_prob);
  return r;
}

inline constexpr int kBruteForceCapBinary = 14;
inline constexpr int kBruteForceCapMultinomial = 9;

/// Reference value by full enumeration of every treatment vector sharing the
/// statistic. Exponential cost; test and small-data use only.
inline CondProbResult cond_prob_bruteforce(const LinearPredictors& lp, const SufficientStat& stat, int j, int a,
                                           int cap = -1) {
  detail::check_unit(lp, j, a);
  const int K = lp.levels();
  const int n = lp.size();
  if (cap < 0) cap = K == 1 ? kBruteForceCapBinary : kBruteForceCapMultinomial;
  if (n > cap) fail(ErrorCode::size_limit, "cluster of size " + std::to_string(n) + " exceeds enumeration cap " + std::to_string(cap));
  const auto full = full_level_counts(stat, K, n);
  const int d = lp.dim();
  const int p = lp.p();

  double log_den = kNegInf, log_num = kNegInf;
  Eigen::VectorXd g_den = Eigen::VectorXd::Zero(d), g_num = Eigen::VectorXd::Zero(d);
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  std::vector<int> counts(static_cast<std::size_t>(K) + 1);
  Eigen::VectorXd dscore(d);
  while (true) {
    std::fill(counts.begin(), counts.end(), 0);
    for (int v : assign) ++counts[static_cast<std::size_t>(v)];
    if (counts == full) {
      double score = 0.0;
      dscore.setZero();
      for (int l = 0; l < n; ++l) {
        const int lev = assign[static_cast<std::size_t>(l)];
        score += lp.at(l, lev);
        if (lev >= 1) dscore.segment((lev - 1) * p, p) += lp.design.row(l).transpose();
      }
      auto accumulate = [&](double& acc, Eigen::VectorXd& g) {
        const double total = log_add(acc, score);
        const double w_old = acc == kNegInf ? 0.0 : std::exp(acc - total);
        g = w_old * g + (1.0 - w_old) * dscore;
        acc = total;
      };
      accumulate(log_den, g_den);
      if (assign[static_cast<std::size_t>(j)] == a) accumulate(log_num, g_num);
    }
    int pos = 0;
    while (pos < n && assign[static_cast<std::size_t>(pos)] == K) assign[static_cast<std::size_t>(pos++)] = 0;
    if (pos == n) break;
    ++assign[static_cast<std::size_t>(pos)];
  }
  if (log_num == kNegInf) fail(ErrorCode::degeneracy, "no arrangement gives unit the requested level");
  CondProbResult r;
  r.log_prob = log_num - log_den;
  r.prob = std::exp(r.log_prob);
  r.grad_log_prob = g_num - g_den;
  return r;
}

/// Conditional log-probabilities of every level for every unit of a cluster,
/// sharing one full and one leave-one-out table per unit.
struct ClusterCondProbs {
  Eigen::MatrixXd log_prob;            ///< n x (K+1); -inf where a level is infeasible
  std::vector<Eigen::MatrixXd> grad;   ///< per unit: dim x (K+1); empty without gradients
};

inline ClusterCondProbs cluster_cond_probs(const LinearPredictors& lp, const SufficientStat& stat, bool with_grad,
                                           std::size_t max_states = kDefaultMaxStates) {
  if (!lp.eta.allFinite()) fail(ErrorCode::numerical, "non-finite linear predictor");
  const int n = lp.size();
  const int K = lp.levels();
  const int d = lp.dim();
  ClusterCondProbs out;
  out.log_prob = Eigen::MatrixXd::Constant(n, K + 1, kNegInf);
  if (with_grad) out.grad.assign(static_cast<std::size_t>(n), Eigen::MatrixXd::Zero(d, K + 1));
  const auto full = full_level_counts(stat, K, n);

  if (K == 1) {
    const int t = full[1];
    const Eigen::VectorXd eta = lp.eta.col(0);
    const Eigen::MatrixXd* X = with_grad ? &lp.design : nullptr;
    const auto all = detail::esp_table(eta, X, -1, t);
    const auto tu = static_cast<std::size_t>(t);
    for (int j = 0; j < n; ++j) {
      const auto loo = detail::esp_table(eta, X, j, t);
      if (t >= 1) {
        out.log_prob(j, 1) = eta(j) + loo.log_e[tu - 1] - all.log_e[tu];
        if (with_grad) out.grad[static_cast<std::size_t>(j)].col(1) = lp.design.row(j).transpose() + loo.grad.col(t - 1) - all.grad.col(t);
      }
      if (t <= n - 1) {
        out.log_prob(j, 0) = loo.log_e[tu] - all.log_e[tu];
        if (with_grad) out.grad[static_cast<std::size_t>(j)].col(0) = loo.grad.col(t) - all.grad.col(t);
      }
    }
    return out;
  }

  const detail::CountLattice lat(full, max_states);
  const auto all = detail::lattice_table(lp, full, lat, -1, with_grad);
  const auto target = lat.index(full);
  for (int j = 0; j < n; ++j) {
    const auto loo = detail::lattice_table(lp, full, lat, j, with_grad);
    for (int a = 0; a <= K; ++a) {
      if (full[static_cast<std::size_t>(a)] == 0) continue;
      auto reduced = full;
      --reduced[static_cast<std::size_t>(a)];
      const auto t_loo = lat.index(reduced);
      out.log_prob(j, a) = lp.at(j, a) + loo.log_z[t_loo] - all.log_z[target];
      if (with_grad) {
        auto g = out.grad[static_cast<std::size_t>(j)].col(a);
        g = loo.grad.col(static_cast<Eigen::Index>(t_loo)) - all.grad.col(static_cast<Eigen::Index>(target));
        if (a >= 1) g.segment((a - 1) * lp.p(), lp.p()) += lp.design.row(j).transpose();
      }
    }
  }
  return out;
}

/// log P(A_i = assignment | T_i) for a whole cluster: the sum of the
/// assigned linear predictors minus the log normalizer over all assignments
/// sharing the counts.
inline CondProbResult cluster_joint_log_prob(const LinearPredictors& lp, const Eigen::VectorXi& assignment, bool with_grad,
                                             std::size_t max_states = kDefaultMaxStates) {
  if (!lp.eta.allFinite()) fail(ErrorCode::numerical, "non-finite linear predictor");
  const int n = lp.size();
  const int K = lp.levels();
  if (assignment.size() != n) fail(ErrorCode::invalid_argument, "assignment length differs from cluster size");
  std::vector<int> full(static_cast<std::size_t>(K) + 1, 0);
  CondProbResult r;
  if (with_grad) r.grad_log_prob = Eigen::VectorXd::Zero(lp.dim());
  for (int j = 0; j < n; ++j) {
    const int a = assignment(j);
    if (a < 0 || a > K) fail(ErrorCode::range, "treatment code outside {0..K}");
    ++full[static_cast<std::size_t>(a)];
    r.log_prob += lp.at(j, a);
    if (with_grad && a >= 1) r.grad_log_prob.segment((a - 1) * lp.p(), lp.p()) += lp.design.row(j).transpose();
  }
  if (K == 1) {
    const int t = full[1];
    const Eigen::VectorXd eta = lp.eta.col(0);
    const auto all = detail::esp_table(eta, with_grad ? &lp.design : nullptr, -1, t);
    r.log_prob -= all.log_e[static_cast<std::size_t>(t)];
    if (with_grad) r.grad_log_prob -= all.grad.col(t);
  } else {
    const detail::CountLattice lat(full, max_states);
    const auto all = detail::lattice_table(lp, full, lat, -1, with_grad);
    const auto target = lat.index(full);
    r.log_prob -= all.log_z[target];
    if (with_grad) r.grad_log_prob -= all.grad.col(static_cast<Eigen::Index>(target));
  }
  r.prob = std::exp(r.log_prob);
  return r;
}

}  // namespace icpw
