#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "icpw/cmle.hpp"
#include "icpw/simulate.hpp"
#include "test_support.hpp"

using namespace icpw;
using icpw::testing::make_cluster;
using icpw::testing::random_dataset;
using icpw::testing::rel_diff;

namespace {

Dataset symmetric_pair() {
  return Dataset({make_cluster("a", {1, 0}, {0, 0}, {{0}, {1}}), make_cluster("b", {0, 1}, {0, 0}, {{0}, {1}})}, 1, {"x"});
}

double bruteforce_loglik(const Dataset& d, const Eigen::VectorXd& beta) {
  double ll = 0.0;
  for (const auto& c : d.clusters()) {
    const auto lp = linear_predictors(c, beta, d.K());
    for (int j = 0; j < c.size(); ++j) ll += cond_prob_bruteforce(lp, sufficient_stat(c, d.K()), j, c.treatments()(j)).log_prob;
  }
  return ll;
}

/// Maximizer of a one-dimensional concave function by grid then golden
/// section on the bracketing cell.
template <class F>
double argmax_1d(F&& f, double lo, double hi) {
  const int grid = 400;
  double best = lo, best_v = f(lo);
  for (int k = 1; k <= grid; ++k) {
    const double x = lo + (hi - lo) * k / grid;
    const double v = f(x);
    if (v > best_v) {
      best_v = v;
      best = x;
    }
  }
  double a = best - (hi - lo) / grid, b = best + (hi - lo) / grid;
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 200; ++it) {
    const double c = b - g * (b - a), e = a + g * (b - a);
    if (f(c) > f(e)) {
      b = e;
    } else {
      a = c;
    }
  }
  return 0.5 * (a + b);
}

}  // namespace

TEST(CondLoglik, SpecExamples) {
  const Dataset one({make_cluster("a", {1, 0}, {0, 0}, {{0}, {0}})}, 1, {"x"});
  EXPECT_NEAR(cond_loglik(one, Eigen::VectorXd::Zero(1)), 2 * std::log(0.5), 1e-15);
  EXPECT_NEAR(cond_loglik(symmetric_pair(), Eigen::VectorXd::Zero(1)), 4 * std::log(0.5), 1e-15);
  EXPECT_NEAR(cond_score(symmetric_pair(), Eigen::VectorXd::Zero(1))(0), 0.0, 1e-15);
}

TEST(CondLoglik, MatchesBruteForce) {
  std::mt19937_64 rng(41);
  for (int inst = 0; inst < 20; ++inst) {
    const int K = 1 + inst % 2;
    const auto d = random_dataset(rng, 6, 2, 7, 2, K);
    Eigen::VectorXd beta = Eigen::VectorXd::Random(2 * K);
    EXPECT_LT(rel_diff(cond_loglik(d, beta), bruteforce_loglik(d, beta)), 1e-10);
  }
}

TEST(CondScore, MatchesFiniteDifferences) {
  std::mt19937_64 rng(43);
  for (auto lik : {CondLikelihood::composite, CondLikelihood::cluster}) {
    for (int inst = 0; inst < 10; ++inst) {
      const int K = 1 + inst % 2;
      const auto d = random_dataset(rng, 8, 2, 8, 3, K);
      const Eigen::VectorXd beta = 0.7 * Eigen::VectorXd::Random(3 * K);
      const Eigen::VectorXd g = cond_score(d, beta, lik);
      for (int k = 0; k < g.size(); ++k) {
        Eigen::VectorXd up = beta, dn = beta;
        up(k) += 1e-5;
        dn(k) -= 1e-5;
        const double fd = (cond_loglik(d, up, lik) - cond_loglik(d, dn, lik)) / 2e-5;
        EXPECT_LT(rel_diff(g(k), fd), 1e-6);
      }
    }
  }
}

TEST(CondScore, ZeroCovariatesGiveZeroScore) {
  const Dataset d({make_cluster("a", {1, 0, 0}, {0, 0, 0}, {{0}, {0}, {0}}), make_cluster("b", {0, 1}, {0, 0}, {{0}, {0}})}, 1,
                  {"x"});
  for (double b : {-3.0, 0.0, 2.5}) EXPECT_EQ(cond_score(d, Eigen::VectorXd::Constant(1, b))(0), 0.0);
}

TEST(UnitScores, SumToTheScore) {
  std::mt19937_64 rng(47);
  const auto d = random_dataset(rng, 10, 2, 6, 2);
  const Eigen::VectorXd beta = Eigen::VectorXd::Random(2);
  for (auto lik : {CondLikelihood::composite, CondLikelihood::cluster}) {
    Eigen::VectorXd total = Eigen::VectorXd::Zero(2);
    for (const auto& s : unit_scores(d, beta, lik)) total += s.rowwise().sum();
    EXPECT_LT((total - cond_score(d, beta, lik)).lpNorm<Eigen::Infinity>(), 1e-12);
  }
}

TEST(CondLoglik, ConstantTreatmentClusterIsAContractBreach) {
  const Dataset d({make_cluster("a", {1, 1}, {0, 0}, {{0}, {1}}), make_cluster("b", {0, 1}, {0, 0}, {{0}, {1}})}, 1, {"x"});
  try {
    cond_loglik(d, Eigen::VectorXd::Zero(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::internal);
  }
}

TEST(FitCmle, SymmetricDatasetGivesZero) {
  const auto d = symmetric_pair();
  const auto fit = fit_cmle(d);
  EXPECT_TRUE(fit.converged);
  EXPECT_EQ(fit.beta(0), 0.0);
  const double grid = argmax_1d([&](double b) { return cond_loglik(d, Eigen::VectorXd::Constant(1, b)); }, -5.0, 5.0);
  EXPECT_NEAR(grid, 0.0, 1e-6);
}

TEST(FitCmle, MatchesOneDimensionalSearch) {
  std::mt19937_64 rng(53);
  for (auto lik : {CondLikelihood::composite, CondLikelihood::cluster}) {
    for (int inst = 0; inst < 5; ++inst) {
      const auto d = random_dataset(rng, 25, 2, 7, 1);
      FitOptions opt;
      opt.likelihood = lik;
      const auto fit = fit_cmle(d, opt);
      ASSERT_TRUE(fit.converged);
      EXPECT_EQ(fit.likelihood, lik);
      const double ref = argmax_1d([&](double b) { return cond_loglik(d, Eigen::VectorXd::Constant(1, b), lik); }, -6.0, 6.0);
      EXPECT_NEAR(fit.beta(0), ref, 1e-6);
      EXPECT_LE(fit.grad_norm_at_solution, 1e-6);
      EXPECT_NEAR(fit.log_cond_lik, cond_loglik(d, fit.beta, lik), 1e-12);
    }
  }
}

TEST(FitCmle, StartingPointsAgree) {
  std::mt19937_64 rng(59);
  const auto d = random_dataset(rng, 60, 2, 6, 3);
  const auto base = fit_cmle(d);
  ASSERT_TRUE(base.converged);
  std::uniform_real_distribution<double> start(-2.0, 2.0);
  for (int r = 0; r < 5; ++r) {
    FitOptions opt;
    Eigen::VectorXd s(3);
    for (int k = 0; k < 3; ++k) s(k) = start(rng);
    opt.start = s;
    const auto fit = fit_cmle(d, opt);
    ASSERT_TRUE(fit.converged);
    EXPECT_LT((fit.beta - base.beta).lpNorm<Eigen::Infinity>(), 1e-6);
  }
}

TEST(FitCmle, InvariantToClusterConstantCovariateShifts) {
  std::mt19937_64 rng(61);
  const auto d = random_dataset(rng, 40, 2, 6, 2);
  std::vector<Cluster> shifted;
  std::normal_distribution<double> normal(0.0, 3.0);
  for (const auto& c : d.clusters()) {
    const double s0 = normal(rng), s1 = normal(rng);
    std::vector<UnitRecord> units(c.units().begin(), c.units().end());
    for (auto& u : units) {
      u.covariates[0] += s0;
      u.covariates[1] += s1;
    }
    shifted.emplace_back(c.id(), std::move(units));
  }
  const Dataset e(std::move(shifted), 1, d.covariate_names());
  EXPECT_LT((fit_cmle(d).beta - fit_cmle(e).beta).lpNorm<Eigen::Infinity>(), 1e-7);
}

TEST(FitCmle, Deterministic) {
  std::mt19937_64 rng(67);
  const auto d = random_dataset(rng, 30, 2, 6, 2, 2);
  const auto a = fit_cmle(d), b = fit_cmle(d);
  EXPECT_EQ(a.beta, b.beta);
  EXPECT_EQ(a.iterations, b.iterations);
  EXPECT_TRUE(a.converged);
}

TEST(FitCmle, NoWithinClusterVariationIsRejected) {
  const Dataset d({make_cluster("a", {1, 0}, {0, 0}, {{1, 2}, {1, 2}}), make_cluster("b", {0, 1, 0}, {0, 0, 0}, {{3, 0}, {3, 0}, {3, 0}})},
                  1, {"u", "v"});
  try {
    fit_cmle(d);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::no_information);
    EXPECT_NE(std::string(e.what()).find("u, v"), std::string::npos);
  }
}

TEST(FitCmle, SeparationIsDetected) {
  // within every cluster the treated unit has the larger covariate
  const Dataset d({make_cluster("a", {0, 1}, {0, 0}, {{0}, {1}}), make_cluster("b", {1, 0, 0}, {0, 0, 0}, {{2}, {0.5}, {-1}}),
                   make_cluster("c", {0, 1, 1}, {0, 0, 0}, {{-2}, {0}, {1}})},
                  1, {"x"});
  for (auto lik : {CondLikelihood::composite, CondLikelihood::cluster}) {
    FitOptions opt;
    opt.likelihood = lik;
    try {
      const auto fit = fit_cmle(d, opt);
      FAIL() << "beta " << fit.beta.transpose() << " converged " << fit.converged;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::separation) << e.what();
    }
  }
}

TEST(FitCmle, NonConvergenceIsReported) {
  std::mt19937_64 rng(71);
  const auto d = random_dataset(rng, 30, 2, 6, 2);
  FitOptions opt;
  opt.max_iter = 1;
  const auto fit = fit_cmle(d, opt);
  EXPECT_FALSE(fit.converged);
  EXPECT_EQ(fit.stop_reason, StopReason::max_iter);
}

TEST(FitCmle, ScenarioOneRecoversTrueCoefficients) {
  auto cfg = scenario_config(1, 1);
  cfg.seed = 2024;
  const int reps = 20;
  Eigen::MatrixXd est(reps, 2);
  for (int r = 0; r < reps; ++r) {
    const auto gen = generate_dataset(cfg, static_cast<std::uint64_t>(r));
    const auto fit = fit_cmle(filter_positivity(gen.data).retained);
    ASSERT_TRUE(fit.converged);
    est.row(r) = fit.beta.transpose();
  }
  for (int k = 0; k < 2; ++k) {
    const double mean = est.col(k).mean();
    const double sd = std::sqrt((est.col(k).array() - mean).square().sum() / (reps - 1));
    EXPECT_LT(std::abs(mean - 1.0), 3.0 * sd / std::sqrt(reps)) << "coefficient " << k;
  }
}

TEST(FitCmle, MultinomialRecoversCoefficients) {
  std::mt19937_64 rng(73);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::VectorXd truth(4);
  truth << 0.8, -0.5, -0.6, 1.0;  // level 1 block, level 2 block
  std::vector<Cluster> cs;
  for (int i = 0; i < 600; ++i) {
    const std::string id = "m" + std::to_string(i);
    const double u = 2.0 * normal(rng);
    std::vector<UnitRecord> units;
    for (int j = 0; j < 4; ++j) {
      const double x1 = normal(rng), x2 = normal(rng);
      const double e1 = std::exp(x1 * truth(0) + x2 * truth(1) + u), e2 = std::exp(x1 * truth(2) + x2 * truth(3) - u);
      const double r = unif(rng) * (1 + e1 + e2);
      units.push_back({id, r < 1 ? 0 : (r < 1 + e1 ? 1 : 2), 0.0, {x1, x2}});
    }
    cs.emplace_back(id, std::move(units));
  }
  const auto d = filter_positivity(Dataset(std::move(cs), 2, {"x1", "x2"})).retained;
  const auto fit = fit_cmle(d);
  ASSERT_TRUE(fit.converged);
  EXPECT_LT((fit.beta - truth).lpNorm<Eigen::Infinity>(), 0.25) << fit.beta.transpose();
}

TEST(NewtonDirection, FallsBackWhenNotNegativeDefinite) {
  Eigen::MatrixXd H(2, 2);
  H << 1.0, 0.0, 0.0, -2.0;
  const Eigen::VectorXd g = Eigen::VectorXd::Ones(2);
  const Eigen::VectorXd dir = newton_direction(H, g);
  EXPECT_TRUE(dir.allFinite());
  EXPECT_GT(dir.dot(g), 0.0);
}
