#include <cmath>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "narb/links.hpp"
#include "narb/outcome_model.hpp"
#include "support/oracles.hpp"

using namespace narb;

namespace {

struct LassoData {
  Matrix X;
  Vector y;
  Vector beta_true;
};

LassoData make_linear(testing::Rng& rng, Index n, Index p, int k, double sigma) {
  LassoData d;
  d.X = testing::randn_matrix(n, p, rng);
  d.beta_true = Vector::Zero(p);
  for (int j = 0; j < k; ++j) d.beta_true[j] = (j % 2 == 0 ? 1.0 : -0.8);
  d.y = d.X * d.beta_true + sigma * testing::randn_vector(n, rng);
  return d;
}

LassoData make_curved(testing::Rng& rng, Index n, Index p, int k, const LinkSpec& link,
                      double sigma) {
  LassoData d = make_linear(rng, n, p, k, 0.0);
  d.beta_true *= 0.6;
  const Vector z = d.X * d.beta_true;
  d.y = link.apply(z, 0) + sigma * testing::randn_vector(n, rng);
  return d;
}

}  // namespace

TEST_CASE("identity-link proximal fit matches coordinate descent") {
  testing::Rng rng(1001);
  const LinkSpec id = LinkSpec::identity();
  for (int t = 0; t < 25; ++t) {
    const LassoData d = make_linear(rng, 80, 25, 4, 0.4);
    const double lambda = 0.02 + 0.02 * (t % 5);
    SolverOptions opts;
    opts.tolerance = 1e-11;
    opts.max_iters = 50000;
    const FittedOutcomeModel fit = fit_nls_lasso(d.X, d.y, id, lambda, opts);
    const Vector oracle = testing::cd_lasso(d.X, d.y, lambda);
    const double f_lib = testing::lasso_objective(d.X, d.y, lambda, fit.beta_hat);
    const double f_orc = testing::lasso_objective(d.X, d.y, lambda, oracle);
    CHECK(f_lib <= f_orc + 1e-9);
    CHECK(f_orc <= f_lib + 1e-9);
    CHECK((fit.beta_hat - oracle).lpNorm<Eigen::Infinity>() <= 1e-5);
  }
}

TEST_CASE("KKT certificate passes on converged fits across links") {
  testing::Rng rng(1002);
  SolverOptions opts;
  opts.tolerance = 1e-10;
  opts.max_iters = 60000;

  SUBCASE("identity nls") {
    const LassoData d = make_linear(rng, 120, 30, 4, 0.5);
    const FittedOutcomeModel fit = fit_nls_lasso(d.X, d.y, LinkSpec::identity(), 0.05, opts);
    REQUIRE(fit.converged);
    const KktReport kk = kkt_check(fit, d.X, d.y, LinkSpec::identity(), opts);
    CHECK(kk.pass);
    CHECK(kk.tolerance == doctest::Approx(10.0 * opts.tolerance));
  }
  SUBCASE("logistic nls") {
    const LassoData d = make_curved(rng, 150, 20, 3, LinkSpec::logistic(), 0.1);
    const FittedOutcomeModel fit =
        fit_nls_lasso(d.X, d.y, LinkSpec::logistic(), 0.01, opts);
    REQUIRE(fit.converged);
    CHECK(kkt_check(fit, d.X, d.y, LinkSpec::logistic(), opts).pass);
  }
  SUBCASE("logistic glm") {
    const LassoData d = make_curved(rng, 150, 20, 3, LinkSpec::logistic(), 0.1);
    const FittedOutcomeModel fit =
        fit_glm_lasso(d.X, d.y, LinkSpec::logistic(), 0.01, opts);
    REQUIRE(fit.converged);
    CHECK(kkt_check(fit, d.X, d.y, LinkSpec::logistic(), opts).pass);
  }
  SUBCASE("exponential nls") {
    const LassoData d = make_curved(rng, 200, 15, 3, LinkSpec::exponential(), 0.2);
    const FittedOutcomeModel fit =
        fit_nls_lasso(d.X, d.y, LinkSpec::exponential(), 0.02, opts);
    REQUIRE(fit.converged);
    CHECK(kkt_check(fit, d.X, d.y, LinkSpec::exponential(), opts).pass);
  }
  SUBCASE("pv linear") {
    const LassoData d = make_curved(rng, 200, 15, 3, LinkSpec::logistic(), 0.1);
    const FittedOutcomeModel fit = fit_pv_linear_lasso(d.X, d.y, 0.01, true, opts);
    REQUIRE(fit.converged);
    CHECK(kkt_check(fit, d.X, d.y, LinkSpec::identity(), opts).pass);
  }
}

TEST_CASE("objective trace is non-increasing") {
  testing::Rng rng(1003);
  const LassoData d = make_curved(rng, 100, 12, 3, LinkSpec::logistic(), 0.2);
  const FittedOutcomeModel fit =
      fit_nls_lasso(d.X, d.y, LinkSpec::logistic(), 0.02, SolverOptions{});
  REQUIRE(fit.objective_trace.size() >= 2);
  for (size_t i = 1; i < fit.objective_trace.size(); ++i)
    CHECK(fit.objective_trace[i] <= fit.objective_trace[i - 1] + 1e-12);
}

TEST_CASE("a large enough penalty kills every coefficient") {
  testing::Rng rng(1004);
  const LassoData d = make_linear(rng, 60, 10, 3, 0.3);
  // lambda_max for the identity link is ||X'y/n||_inf.
  const double lam_max = (d.X.transpose() * d.y / d.X.rows()).lpNorm<Eigen::Infinity>();
  const FittedOutcomeModel fit =
      fit_nls_lasso(d.X, d.y, LinkSpec::identity(), 1.01 * lam_max, SolverOptions{});
  CHECK(fit.beta_hat.lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(fit.support.empty());
}

TEST_CASE("support and sparsity bookkeeping") {
  testing::Rng rng(1005);
  const LassoData d = make_linear(rng, 120, 25, 4, 0.3);
  const FittedOutcomeModel fit =
      fit_nls_lasso(d.X, d.y, LinkSpec::identity(), 0.08, SolverOptions{});
  for (Index j : fit.support) CHECK(fit.beta_hat[j] != 0.0);
  Index nnz = 0;
  for (Index j = 0; j < fit.beta_hat.size(); ++j) nnz += fit.beta_hat[j] != 0.0;
  CHECK(nnz == static_cast<Index>(fit.support.size()));
}

TEST_CASE("pv route returns a unit direction and a positive scale") {
  testing::Rng rng(1006);
  const LassoData d = make_curved(rng, 300, 20, 3, LinkSpec::logistic(), 0.1);
  const FittedOutcomeModel fit = fit_pv_linear_lasso(d.X, d.y, 0.01, true, SolverOptions{});
  CHECK(fit.method == OutcomeMethod::pv_linear_lasso);
  CHECK(fit.beta_hat.norm() == doctest::Approx(1.0).epsilon(1e-10));
  REQUIRE(fit.pv_mu_hat.has_value());
  CHECK(*fit.pv_mu_hat > 0.0);
  CHECK(fit.pv_whitened);
  // The realized direction should correlate strongly with the truth here.
  const Vector dir = d.beta_true / d.beta_true.norm();
  CHECK(std::abs(dir.dot(fit.beta_hat)) > 0.9);
}

TEST_CASE("pv route reports degeneracy instead of a zero direction") {
  testing::Rng rng(1007);
  const LassoData d = make_curved(rng, 100, 10, 2, LinkSpec::logistic(), 0.1);
  CHECK_THROWS_AS((void)fit_pv_linear_lasso(d.X, d.y, 1e6, true, SolverOptions{}),
                  DegenerateDirectionError);
}

TEST_CASE("theory-rate lambda follows the pinned-scale formula") {
  testing::Rng rng(1008);
  const LassoData d = make_linear(rng, 90, 30, 3, 0.5);
  SolverOptions opts;
  opts.sigma_hat = 0.7;
  opts.rate_constant = 1.3;
  const double lam = select_lambda(d.X, d.y, LinkSpec::identity(), LambdaRule::theory_rate,
                                   OutcomeMethod::nls_lasso, opts);
  CHECK(lam == doctest::Approx(1.3 * 0.7 * std::sqrt(std::log(30.0) / 90.0)).epsilon(1e-12));
}

TEST_CASE("theory-rate pilot scale reacts to the noise level") {
  testing::Rng rng(1009);
  SolverOptions opts;  // sigma_hat <= 0 engages the pilot
  const LassoData quiet = make_curved(rng, 400, 20, 3, LinkSpec::logistic(), 0.05);
  const LassoData loud = make_curved(rng, 400, 20, 3, LinkSpec::logistic(), 0.8);
  const double lam_q = select_lambda(quiet.X, quiet.y, LinkSpec::logistic(),
                                     LambdaRule::theory_rate, OutcomeMethod::nls_lasso, opts);
  const double lam_l = select_lambda(loud.X, loud.y, LinkSpec::logistic(),
                                     LambdaRule::theory_rate, OutcomeMethod::nls_lasso, opts);
  CHECK(lam_q > 0.0);
  CHECK(lam_l > 2.0 * lam_q);
}

TEST_CASE("cross-validated lambda is deterministic and on the grid") {
  testing::Rng rng(1010);
  const LassoData d = make_linear(rng, 60, 15, 3, 0.4);
  SolverOptions opts;
  opts.cv_folds = 4;
  opts.cv_seed = 9;
  const double a = select_lambda(d.X, d.y, LinkSpec::identity(), LambdaRule::kfold_cv,
                                 OutcomeMethod::nls_lasso, opts);
  const double b = select_lambda(d.X, d.y, LinkSpec::identity(), LambdaRule::kfold_cv,
                                 OutcomeMethod::nls_lasso, opts);
  CHECK(a == b);
  // Grid membership: lam_max * 1e-3^(g/19).
  const Vector g0 = d.X.transpose() * d.y / static_cast<double>(d.X.rows());
  const double lam_max = g0.lpNorm<Eigen::Infinity>();
  bool on_grid = false;
  for (int g = 0; g < 20; ++g)
    on_grid |= std::abs(a - lam_max * std::pow(1e-3, g / 19.0)) <= 1e-12 * lam_max;
  CHECK(on_grid);
}

TEST_CASE("shape mismatches are rejected") {
  testing::Rng rng(1011);
  const Matrix X = testing::randn_matrix(20, 5, rng);
  const Vector y = testing::randn_vector(19, rng);
  CHECK_THROWS_AS((void)fit_nls_lasso(X, y, LinkSpec::identity(), 0.1, SolverOptions{}),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)select_lambda(X, y, LinkSpec::identity(), LambdaRule::theory_rate,
                                      OutcomeMethod::nls_lasso, SolverOptions{}),
                  std::invalid_argument);
}
