#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <numeric>
#include <random>

#include "icpw/cond_prob.hpp"
#include "test_support.hpp"

using namespace icpw;
using icpw::testing::rel_diff;

namespace {

LinearPredictors binary_lp(const std::vector<double>& eta) {
  const auto n = static_cast<Eigen::Index>(eta.size());
  Eigen::MatrixXd X(n, 1);
  for (Eigen::Index j = 0; j < n; ++j) X(j, 0) = eta[static_cast<std::size_t>(j)];
  return linear_predictors(X, Eigen::VectorXd::Ones(1), 1);
}

LinearPredictors random_lp(std::mt19937_64& rng, int n, int p, int K, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd X(n, p);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < p; ++k) X(j, k) = normal(rng);
  Eigen::VectorXd beta(p * K);
  for (int k = 0; k < p * K; ++k) beta(k) = scale * normal(rng);
  return linear_predictors(X, beta, K);
}

/// Direct-space enumeration: sum of exp(sum_l eta_{l, a_l}) over every
/// assignment with the given full level counts, restricted to a_j = a.
double enumerate(const LinearPredictors& lp, const std::vector<int>& full, int j, int a) {
  const int n = lp.size(), K = lp.levels();
  double num = 0.0, den = 0.0;
  std::vector<int> as(static_cast<std::size_t>(n), 0);
  const long total = static_cast<long>(std::pow(K + 1, n));
  for (long code = 0; code < total; ++code) {
    long c = code;
    std::vector<int> counts(static_cast<std::size_t>(K) + 1, 0);
    for (int l = 0; l < n; ++l) {
      as[static_cast<std::size_t>(l)] = static_cast<int>(c % (K + 1));
      c /= K + 1;
      ++counts[static_cast<std::size_t>(as[static_cast<std::size_t>(l)])];
    }
    if (counts != full) continue;
    double s = 0.0;
    for (int l = 0; l < n; ++l) s += lp.at(l, as[static_cast<std::size_t>(l)]);
    den += std::exp(s);
    if (as[static_cast<std::size_t>(j)] == a) num += std::exp(s);
  }
  return num / den;
}

std::vector<int> random_counts(std::mt19937_64& rng, int n, int K) {
  std::uniform_int_distribution<int> level(0, K);
  std::vector<int> full(static_cast<std::size_t>(K) + 1, 0);
  do {
    std::fill(full.begin(), full.end(), 0);
    for (int l = 0; l < n; ++l) ++full[static_cast<std::size_t>(level(rng))];
  } while (*std::max_element(full.begin(), full.end()) == n);
  return full;
}

SufficientStat stat_from_full(const std::vector<int>& full) {
  const int K = static_cast<int>(full.size()) - 1;
  if (K == 1) return {{full[1]}};
  return {std::vector<int>(full.begin(), full.end() - 1)};
}

}  // namespace

TEST(LogElemSym, SmallCases) {
  const std::vector<double> w{1, 2, 4};
  EXPECT_NEAR(log_elem_sym(w, 1), std::log(7.0), 1e-14);
  EXPECT_NEAR(log_elem_sym(w, 2), std::log(14.0), 1e-14);
  EXPECT_NEAR(log_elem_sym(w, 3), std::log(8.0), 1e-14);
  EXPECT_EQ(log_elem_sym(w, 0), 0.0);
  EXPECT_THROW(log_elem_sym(w, 4), Error);
  EXPECT_THROW(log_elem_sym(w, -1), Error);
  const std::vector<double> bad{1.0, 0.0};
  EXPECT_THROW(log_elem_sym(bad, 1), Error);
}

TEST(LogElemSym, NoOverflowForLargeWeights) {
  std::vector<double> w(60, std::exp(300.0));
  // e_30 of 60 equal weights = C(60,30) * w^30
  const double expected = std::lgamma(61.0) - 2 * std::lgamma(31.0) + 30 * 300.0;
  EXPECT_LT(rel_diff(log_elem_sym(w, 30), expected), 1e-12);
}

TEST(CondProbBinary, SpecExamples) {
  EXPECT_NEAR(cond_prob_binary(binary_lp({0, 0}), 1, 0, 1).prob, 0.5, 1e-15);
  const auto lp = binary_lp({std::log(1.0), std::log(2.0), std::log(4.0)});
  EXPECT_NEAR(cond_prob_binary(lp, 1, 0, 1).prob, 1.0 / 7.0, 1e-14);
  EXPECT_NEAR(cond_prob_binary(lp, 1, 1, 1).prob, 2.0 / 7.0, 1e-14);
  EXPECT_NEAR(cond_prob_binary(lp, 1, 2, 1).prob, 4.0 / 7.0, 1e-14);
  EXPECT_NEAR(cond_prob_binary(lp, 2, 0, 1).prob, 3.0 / 7.0, 1e-14);
  EXPECT_NEAR(cond_prob_binary(lp, 2, 0, 0).prob, 4.0 / 7.0, 1e-14);
}

TEST(CondProbBinary, DegenerateSumsAreRejected) {
  const auto lp = binary_lp({0.1, 0.2});
  try {
    cond_prob_binary(lp, 0, 0, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::degeneracy);
  }
  EXPECT_THROW(cond_prob_binary(lp, 2, 0, 1), Error);
  EXPECT_THROW(cond_prob_binary(lp, 1, 2, 1), Error);
}

TEST(CondProbBinary, TwoUnitClosedForm) {
  const auto lp = binary_lp({0.3, -1.1});
  const double expected = std::exp(0.3) / (std::exp(0.3) + std::exp(-1.1));
  EXPECT_NEAR(cond_prob_binary(lp, 1, 0, 1).prob, expected, 1e-15);
  EXPECT_NEAR(cond_prob_bruteforce(lp, {{1}}, 0, 1).prob, expected, 1e-15);
}

TEST(CondProbBinary, MatchesEnumeration) {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int inst = 0; inst < 300; ++inst) {
    const int n = std::uniform_int_distribution<int>(2, 10)(rng);
    const auto lp = random_lp(rng, n, 2, 1);
    const auto full = random_counts(rng, n, 1);
    const int j = std::uniform_int_distribution<int>(0, n - 1)(rng);
    for (int a : {0, 1}) {
      const double ref = enumerate(lp, full, j, a);
      worst = std::max(worst, rel_diff(cond_prob_binary(lp, full[1], j, a).prob, ref));
      worst = std::max(worst, rel_diff(cond_prob_bruteforce(lp, {{full[1]}}, j, a).prob, ref));
    }
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(CondProbMultinomial, SpecExamples) {
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(2, 1);
  const auto lp = linear_predictors(X, Eigen::VectorXd::Zero(2), 2);
  EXPECT_NEAR(cond_prob_multinomial(lp, {{1, 1}}, 0, 0).prob, 0.5, 1e-15);

  Eigen::MatrixXd X3(3, 1);
  X3 << 0.2, -0.4, 0.7;
  Eigen::VectorXd b(2);
  b << 0.5, -1.3;
  const auto lp3 = linear_predictors(X3, b, 2);
  for (int j = 0; j < 3; ++j)
    for (int a = 0; a <= 2; ++a)
      EXPECT_LT(rel_diff(cond_prob_multinomial(lp3, {{1, 1}}, j, a).prob, enumerate(lp3, {1, 1, 1}, j, a)), 1e-13);
}

TEST(CondProbMultinomial, BinarySpecialization) {
  std::mt19937_64 rng(7);
  for (int inst = 0; inst < 50; ++inst) {
    const int n = std::uniform_int_distribution<int>(2, 9)(rng);
    const auto lp = random_lp(rng, n, 3, 1);
    const auto full = random_counts(rng, n, 1);
    for (int j = 0; j < n; ++j)
      for (int a : {0, 1}) {
        const auto m = cond_prob_multinomial(lp, {{full[1]}}, j, a);
        const auto b = cond_prob_binary(lp, full[1], j, a);
        EXPECT_NEAR(m.log_prob, b.log_prob, 1e-12);
        EXPECT_LT((m.grad_log_prob - b.grad_log_prob).lpNorm<Eigen::Infinity>(), 1e-12);
      }
  }
}

TEST(CondProbMultinomial, MatchesEnumeration) {
  std::mt19937_64 rng(202);
  double worst = 0.0;
  for (int inst = 0; inst < 150; ++inst) {
    const int K = inst % 3 == 0 ? 3 : 2;
    const int n = std::uniform_int_distribution<int>(2, K == 3 ? 6 : 7)(rng);
    const auto lp = random_lp(rng, n, 2, K);
    const auto full = random_counts(rng, n, K);
    const int j = std::uniform_int_distribution<int>(0, n - 1)(rng);
    for (int a = 0; a <= K; ++a) {
      if (full[static_cast<std::size_t>(a)] == 0) {
        EXPECT_THROW(cond_prob_multinomial(lp, stat_from_full(full), j, a), Error);
        continue;
      }
      worst = std::max(worst, rel_diff(cond_prob_multinomial(lp, stat_from_full(full), j, a).prob, enumerate(lp, full, j, a)));
    }
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(CondProbMultinomial, StateCapIsEnforced) {
  std::mt19937_64 rng(3);
  const auto lp = random_lp(rng, 12, 1, 2);
  try {
    cond_prob_multinomial(lp, {{4, 4}}, 0, 0, 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::size_limit);
  }
}

TEST(CondProbBruteforce, CapExceeded) {
  std::mt19937_64 rng(5);
  const auto lp = random_lp(rng, 15, 1, 1);
  try {
    cond_prob_bruteforce(lp, {{7}}, 0, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::size_limit);
  }
}

TEST(CondProbProperties, Normalization) {
  std::mt19937_64 rng(9);
  for (int inst = 0; inst < 100; ++inst) {
    const int K = 1 + inst % 3;
    const int n = std::uniform_int_distribution<int>(2, 8)(rng);
    const auto lp = random_lp(rng, n, 2, K, 1.5);
    const auto full = random_counts(rng, n, K);
    const auto all = cluster_cond_probs(lp, stat_from_full(full), false);
    for (int j = 0; j < n; ++j) EXPECT_NEAR(all.log_prob.row(j).array().exp().sum(), 1.0, 1e-10);
  }
}

TEST(CondProbProperties, UInvarianceByBayes) {
  std::mt19937_64 rng(13);
  for (int inst = 0; inst < 100; ++inst) {
    const int n = std::uniform_int_distribution<int>(2, 8)(rng);
    const auto lp = random_lp(rng, n, 2, 1);
    const auto full = random_counts(rng, n, 1);
    const int t = full[1];
    for (int j = 0; j < n; ++j) {
      const double dp = cond_prob_binary(lp, t, j, 1).prob;
      for (double u : {-3.0, -1.0, 0.0, 1.0, 3.0}) {
        // joint Bernoulli model with cluster effect u, conditioned on the sum
        double num = 0.0, den = 0.0;
        for (unsigned mask = 0; mask < (1u << n); ++mask) {
          if (std::popcount(mask) != t) continue;
          double pr = 1.0;
          for (int l = 0; l < n; ++l) {
            const double e = 1.0 / (1.0 + std::exp(-(lp.eta(l, 0) + u)));
            pr *= (mask >> l & 1u) ? e : 1.0 - e;
          }
          den += pr;
          if (mask >> j & 1u) num += pr;
        }
        EXPECT_LT(rel_diff(num / den, dp), 1e-10);
      }
    }
  }
}

TEST(CondProbProperties, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(17);
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const int K = inst % 2 == 0 ? 1 : 2;
    const int p = 2;
    const int n = std::uniform_int_distribution<int>(2, 7)(rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd X(n, p);
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < p; ++k) X(j, k) = normal(rng);
    Eigen::VectorXd beta(p * K);
    for (int k = 0; k < p * K; ++k) beta(k) = normal(rng);
    const auto full = random_counts(rng, n, K);
    const auto stat = stat_from_full(full);
    const int j = std::uniform_int_distribution<int>(0, n - 1)(rng);
    int a = 0;
    while (full[static_cast<std::size_t>(a)] == 0) ++a;
    auto logp = [&](const Eigen::VectorXd& b) {
      const auto lp = linear_predictors(X, b, K);
      return K == 1 ? cond_prob_binary(lp, full[1], j, a) : cond_prob_multinomial(lp, stat, j, a);
    };
    const Eigen::VectorXd g = logp(beta).grad_log_prob;
    const Eigen::VectorXd gb = cond_prob_bruteforce(linear_predictors(X, beta, K), stat, j, a).grad_log_prob;
    for (int k = 0; k < beta.size(); ++k) {
      Eigen::VectorXd up = beta, dn = beta;
      up(k) += 1e-5;
      dn(k) -= 1e-5;
      const double fd = (logp(up).log_prob - logp(dn).log_prob) / 2e-5;
      worst = std::max(worst, rel_diff(g(k), fd));
      worst = std::max(worst, rel_diff(gb(k), fd));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(CondProbProperties, TranslationInvariance) {
  std::mt19937_64 rng(19);
  for (int inst = 0; inst < 50; ++inst) {
    const int n = std::uniform_int_distribution<int>(2, 9)(rng);
    auto lp = random_lp(rng, n, 2, 1);
    const auto full = random_counts(rng, n, 1);
    const auto base = cluster_cond_probs(lp, {{full[1]}}, false);
    lp.eta.array() += 4.25;
    const auto shifted = cluster_cond_probs(lp, {{full[1]}}, false);
    EXPECT_LT((base.log_prob - shifted.log_prob).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(CondProbProperties, PermutationEquivariance) {
  std::mt19937_64 rng(23);
  for (int inst = 0; inst < 50; ++inst) {
    const int K = 1 + inst % 2;
    const int n = std::uniform_int_distribution<int>(3, 7)(rng);
    const auto lp = random_lp(rng, n, 2, K);
    const auto full = random_counts(rng, n, K);
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    LinearPredictors q = lp;
    for (int r = 0; r < n; ++r) {
      q.eta.row(r) = lp.eta.row(perm[static_cast<std::size_t>(r)]);
      q.design.row(r) = lp.design.row(perm[static_cast<std::size_t>(r)]);
    }
    const auto a = cluster_cond_probs(lp, stat_from_full(full), false);
    const auto b = cluster_cond_probs(q, stat_from_full(full), false);
    for (int r = 0; r < n; ++r)
      for (int lev = 0; lev <= K; ++lev) {
        const double x = a.log_prob(perm[static_cast<std::size_t>(r)], lev), y = b.log_prob(r, lev);
        if (x == kNegInf) {
          EXPECT_EQ(y, kNegInf);
        } else {
          EXPECT_NEAR(x, y, 1e-12);
        }
      }
  }
}

TEST(ClusterCondProbs, AgreesWithPerUnitCalls) {
  std::mt19937_64 rng(29);
  for (int inst = 0; inst < 40; ++inst) {
    const int K = 1 + inst % 2;
    const int n = std::uniform_int_distribution<int>(2, 7)(rng);
    const auto lp = random_lp(rng, n, 2, K);
    const auto full = random_counts(rng, n, K);
    const auto stat = stat_from_full(full);
    const auto all = cluster_cond_probs(lp, stat, true);
    for (int j = 0; j < n; ++j)
      for (int a = 0; a <= K; ++a) {
        if (full[static_cast<std::size_t>(a)] == 0) continue;
        const auto one = K == 1 ? cond_prob_binary(lp, full[1], j, a) : cond_prob_multinomial(lp, stat, j, a);
        EXPECT_NEAR(all.log_prob(j, a), one.log_prob, 1e-12);
        EXPECT_LT((all.grad[static_cast<std::size_t>(j)].col(a) - one.grad_log_prob).lpNorm<Eigen::Infinity>(), 1e-10);
      }
  }
}

TEST(ClusterJointLogProb, MatchesEnumeration) {
  std::mt19937_64 rng(31);
  for (int inst = 0; inst < 60; ++inst) {
    const int K = 1 + inst % 2;
    const int n = std::uniform_int_distribution<int>(2, 6)(rng);
    const auto lp = random_lp(rng, n, 2, K);
    Eigen::VectorXi a(n);
    std::uniform_int_distribution<int> level(0, K);
    for (int j = 0; j < n; ++j) a(j) = level(rng);
    std::vector<int> full(static_cast<std::size_t>(K) + 1, 0);
    for (int j = 0; j < n; ++j) ++full[static_cast<std::size_t>(a(j))];
    // P(A = a | counts) = exp(sum eta_{l,a_l}) / sum over assignments with the same counts
    double den = 0.0, num = 0.0;
    const long total = static_cast<long>(std::pow(K + 1, n));
    for (long code = 0; code < total; ++code) {
      long c = code;
      std::vector<int> counts(static_cast<std::size_t>(K) + 1, 0);
      double s = 0.0;
      bool same = true;
      for (int l = 0; l < n; ++l) {
        const int v = static_cast<int>(c % (K + 1));
        c /= K + 1;
        ++counts[static_cast<std::size_t>(v)];
        s += lp.at(l, v);
        same &= v == a(l);
      }
      if (counts != full) continue;
      den += std::exp(s);
      if (same) num = std::exp(s);
    }
    const auto r = cluster_joint_log_prob(lp, a, true);
    EXPECT_LT(rel_diff(r.prob, num / den), 1e-12);

    const Eigen::MatrixXd X = lp.design;
    Eigen::VectorXd beta(lp.dim());
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int k = 0; k < beta.size(); ++k) beta(k) = normal(rng);
    const auto at = linear_predictors(X, beta, K);
    const Eigen::VectorXd g = cluster_joint_log_prob(at, a, true).grad_log_prob;
    for (int k = 0; k < beta.size(); ++k) {
      Eigen::VectorXd up = beta, dn = beta;
      up(k) += 1e-5;
      dn(k) -= 1e-5;
      const double fd = (cluster_joint_log_prob(linear_predictors(X, up, K), a, false).log_prob -
                         cluster_joint_log_prob(linear_predictors(X, dn, K), a, false).log_prob) /
                        2e-5;
      EXPECT_LT(rel_diff(g(k), fd), 1e-6);
    }
  }
}
