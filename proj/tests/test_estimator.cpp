#include <cmath>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "narb/balancer.hpp"
#include "narb/estimator.hpp"
#include "narb/links.hpp"
#include "narb/simharness.hpp"
#include "support/oracles.hpp"

using namespace narb;

namespace {

Dataset make_linear_dataset(testing::Rng& rng, Index n, Index p, double noise) {
  Dataset d;
  d.X = testing::randn_matrix(n, p, rng);
  Vector beta = Vector::Zero(p);
  beta[0] = 1.0;
  beta[1] = -0.7;
  beta[2] = 0.5;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  d.W.resize(n);
  const Vector z = d.X * beta;
  for (Index i = 0; i < n; ++i) {
    const double prob = 1.0 / (1.0 + std::exp(-(-0.8 + 0.6 * z[i])));
    d.W[i] = u(rng) < prob ? 1 : 0;
  }
  d.Y = z + 0.4 * d.X.col(0) + noise * testing::randn_vector(n, rng);
  for (Index i = 0; i < n; ++i)
    if (d.W[i] == 1) d.Y[i] += 0.5;
  return d;
}

// Linear-path reference: the same two-fold pipeline assembled by hand from
// the public pieces, with every link evaluation replaced by its raw linear
// form. Agreement with estimate_att under the identity link shows the
// generic machinery specializes exactly.
double linear_arb_tau(const Dataset& d, const EstimatorConfig& cfg) {
  const FoldPlan plan = split_folds(d.n(), d.W, 2, cfg.fold_seed);
  std::vector<std::vector<Index>> tr_rows(2), ctl_rows(2);
  for (Index i = 0; i < d.n(); ++i)
    (d.W[i] == 1 ? tr_rows : ctl_rows)[plan.fold_assignment[i]].push_back(i);

  double tau_num = 0.0, weight_sum = 0.0;
  for (const auto& [train, eval] : {std::pair{0, 1}, std::pair{1, 0}}) {
    const Matrix X_tr = d.rows(ctl_rows[train]);
    const Vector y_tr = d.outcomes(ctl_rows[train]);
    const double lambda = select_lambda(X_tr, y_tr, LinkSpec::identity(), cfg.lambda_rule,
                                        cfg.outcome_method, cfg.solver);
    const Vector beta =
        fit_nls_lasso(X_tr, y_tr, LinkSpec::identity(), lambda, cfg.solver).beta_hat;

    const Matrix X_t = d.rows(tr_rows[eval]);
    const Vector y_t = d.outcomes(tr_rows[eval]);
    const Matrix X_c = d.rows(ctl_rows[eval]);
    const Vector y_c = d.outcomes(ctl_rows[eval]);

    BalanceTargets targets;
    targets.first_order_target = X_t.colwise().mean().transpose();
    targets.first_order_design = X_c;
    targets.second_order_target = Matrix::Zero(d.p(), d.p());
    targets.second_order_weights = Vector::Zero(X_c.rows());
    const BalancingWeights w = solve_weights_hard(targets, X_c, cfg.balance);

    const double mu_c =
        (X_t * beta).mean() + w.gamma.dot(y_c - X_c * beta);
    const double tau = y_t.mean() - mu_c;
    const double n_t = static_cast<double>(tr_rows[eval].size());
    tau_num += n_t * tau;
    weight_sum += n_t;
  }
  return tau_num / weight_sum;
}

}  // namespace

TEST_CASE("fold split is deterministic, stratified, and balanced") {
  testing::Rng rng(31);
  const Index n = 101;
  std::vector<int> w(n);
  for (Index i = 0; i < n; ++i) w[i] = (rng() % 3) == 0;
  const FoldPlan a = split_folds(n, w, 2, 7);
  const FoldPlan b = split_folds(n, w, 2, 7);
  CHECK(a.fold_assignment == b.fold_assignment);
  const FoldPlan c = split_folds(n, w, 2, 8);
  CHECK(a.fold_assignment != c.fold_assignment);

  for (int K : {2, 3}) {
    const FoldPlan plan = split_folds(n, w, K, 3);
    std::vector<int> treated(K, 0), control(K, 0);
    for (Index i = 0; i < n; ++i)
      (w[i] ? treated : control)[plan.fold_assignment[i]]++;
    const auto [tmin, tmax] = std::minmax_element(treated.begin(), treated.end());
    const auto [cmin, cmax] = std::minmax_element(control.begin(), control.end());
    CHECK(*tmax - *tmin <= 1);
    CHECK(*cmax - *cmin <= 1);
  }
  CHECK_THROWS_AS((void)split_folds(n, w, 4, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)split_folds(3, {1, 0, 1}, 2, 1), std::invalid_argument);
}

TEST_CASE("identity link reduces exactly to the linear pipeline") {
  testing::Rng rng(4001);
  for (int t = 0; t < 5; ++t) {
    const Dataset d = make_linear_dataset(rng, 240, 20, 0.5);
    EstimatorConfig cfg;
    cfg.link = LinkSpec::identity();
    cfg.balance.k1 = 2.5;
    const EffectEstimate est = estimate_att(d, cfg);
    const double tau_ref = linear_arb_tau(d, cfg);
    CHECK(std::abs(est.tau_hat - tau_ref) <= 1e-8);
  }
}

TEST_CASE("curvature radius is irrelevant under the identity link") {
  testing::Rng rng(4002);
  const Dataset d = make_linear_dataset(rng, 220, 15, 0.5);
  EstimatorConfig cfg;
  cfg.link = LinkSpec::identity();
  cfg.balance.k1 = 2.5;
  cfg.balance.k2 = -2.0;
  const double base = estimate_att(d, cfg).tau_hat;
  for (double k2 : {0.001, 0.5, 250.0}) {
    cfg.balance.k2 = k2;
    CHECK(std::abs(estimate_att(d, cfg).tau_hat - base) <= 1e-8);
  }
  cfg.balance.k2 = -2.0;
  cfg.balance.k2_floor_margin = 1.2;
  CHECK(std::abs(estimate_att(d, cfg).tau_hat - base) <= 1e-8);
}

TEST_CASE("estimate_mu_c implements plug-in plus residual correction") {
  Matrix X_t(2, 2), X_c(2, 2);
  X_t << 1.0, 0.0, 0.0, 1.0;
  X_c << 0.5, 0.5, -0.5, 0.25;
  Vector y_c(2);
  y_c << 1.2, -0.3;
  Vector beta(2);
  beta << 0.4, -0.1;
  Vector gamma(2);
  gamma << 0.7, 0.3;
  const LinkSpec link = LinkSpec::exponential();
  const double plug =
      0.5 * (std::exp(X_t.row(0).dot(beta)) + std::exp(X_t.row(1).dot(beta)));
  const double corr = gamma[0] * (y_c[0] - std::exp(X_c.row(0).dot(beta))) +
                      gamma[1] * (y_c[1] - std::exp(X_c.row(1).dot(beta)));
  CHECK(estimate_mu_c(X_t, X_c, y_c, beta, gamma, link) ==
        doctest::Approx(plug + corr).epsilon(1e-14));

  Vector resid(3);
  resid << 0.5, -1.0, 0.25;
  Vector g3(3);
  g3 << 0.1, 0.6, 0.3;
  CHECK(variance_estimate(g3, resid) ==
        doctest::Approx(0.01 * 0.25 + 0.36 * 1.0 + 0.09 * 0.0625).epsilon(1e-14));
}

TEST_CASE("cross-fit bookkeeping is internally consistent") {
  testing::Rng rng(4003);
  const Dataset d = make_linear_dataset(rng, 260, 18, 0.5);
  EstimatorConfig cfg;
  cfg.link = LinkSpec::identity();
  cfg.balance.k1 = kAutoK1;
  const EffectEstimate est = estimate_att(d, cfg);

  REQUIRE(est.per_fold.size() == 2);
  double wsum = 0.0, tau = 0.0;
  for (const FoldDetail& f : est.per_fold) {
    wsum += f.weight;
    tau += f.weight * f.tau;
    CHECK(f.tau == doctest::Approx(f.mu_t - f.mu_c).epsilon(1e-12));
    CHECK(std::abs(f.gamma.sum() - 1.0) <= 1e-8);
    CHECK(static_cast<Index>(f.eval_control_rows.size()) == f.gamma.size());
    CHECK(f.ess > 0.0);
  }
  CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(est.tau_hat == doctest::Approx(tau).epsilon(1e-12));
  CHECK(est.s_n > 0.0);
  CHECK(est.ci_lo < est.tau_hat);
  CHECK(est.ci_hi > est.tau_hat);
  CHECK(est.ci_hi - est.tau_hat ==
        doctest::Approx(est.tau_hat - est.ci_lo).epsilon(1e-10));
  CHECK(est.n_t + est.n_c == d.n());
}

TEST_CASE("infeasible balance: throw or keep per configuration") {
  testing::Rng rng(4004);
  const Dataset d = make_linear_dataset(rng, 160, 10, 0.4);
  EstimatorConfig cfg;
  cfg.link = LinkSpec::identity();
  cfg.balance.radius1_override = 1e-10;  // unattainable
  cfg.balance.max_iters = 4000;
  cfg.on_infeasible = InfeasibleAction::fail;
  CHECK_THROWS_AS((void)estimate_att(d, cfg), InfeasibleBalanceError);

  cfg.on_infeasible = InfeasibleAction::keep;
  const EffectEstimate est = estimate_att(d, cfg);
  CHECK_FALSE(est.all_folds_feasible);
  CHECK(std::isfinite(est.tau_hat));
}

TEST_CASE("decomposition audit bounds hold on oracle instances") {
  testing::Rng rng(4005);
  SimConfig sc = baseline_config();
  sc.n = 260;
  sc.p = 25;
  sc.estimator.balance.k1 = kAutoK1;
  for (int rep = 0; rep < 12; ++rep) {
    const LinkSpec link = rep % 2 == 0 ? LinkSpec::logistic() : LinkSpec::exponential();
    sc.link = link;
    sc.beta_scale = rep % 2 == 0 ? 1.0 : 0.5;
    const GeneratedData gen = generate_dataset(sc, rep);
    const Dataset& d = gen.data;
    const std::vector<Index> tr = d.treated_rows(), co = d.control_rows();
    const Matrix X_t = d.rows(tr);
    const Matrix X_c = d.rows(co);
    const Vector y_c = d.outcomes(co);

    EstimatorConfig cfg;
    cfg.link = link;
    const FittedOutcomeModel fit = fit_outcome_model(X_c, y_c, cfg, link);
    const Vector beta = index_coefficients(fit);
    const BalanceTargets targets = build_targets(X_t, X_c, beta, link);
    BalanceConfig bc;
    bc.k1 = kAutoK1;
    const BalancingWeights w = solve_weights_hard(targets, X_c, bc);
    REQUIRE(w.feasible);

    const Vector resid = y_c - link.apply(X_c * gen.truth.beta_c, 0);
    const DecompositionAudit audit =
        decomposition_audit(X_t, X_c, gen.truth.beta_c, beta, w.gamma, link, resid);
    CHECK(audit.bound_holds);
    CHECK(audit.fd_bound_holds);
    CHECK(audit.abs_error <= audit.bound + 1e-12);
    CHECK(audit.abs_error <= audit.fd_bound + 1e-12);
    CHECK(audit.m2_star >= 0.0);
    CHECK(audit.l1_error == doctest::Approx((beta - gen.truth.beta_c).lpNorm<1>()));
  }
}

TEST_CASE("ATE runs both directions and nests the ATT pieces") {
  testing::Rng rng(4006);
  const Dataset d = make_linear_dataset(rng, 300, 12, 0.5);
  EstimatorConfig cfg;
  cfg.link = LinkSpec::identity();
  cfg.balance.k1 = kAutoK1;
  const EffectEstimate est = estimate_ate(d, cfg);
  CHECK(est.estimand == Estimand::ate);
  CHECK(std::isfinite(est.tau_hat));
  CHECK(est.tau_hat == doctest::Approx(est.mu_t_hat - est.mu_c_hat).epsilon(1e-10));
  CHECK(est.s_n > 0.0);
  for (const FoldDetail& f : est.per_fold) {
    CHECK(f.gamma.size() > 0);
    CHECK(f.gamma_treated.size() > 0);
    CHECK(std::abs(f.gamma_treated.sum() - 1.0) <= 1e-8);
  }
}

TEST_CASE("single-index mode produces a finite, feasible estimate") {
  SimConfig sc = baseline_config();
  sc.n = 900;
  sc.p = 10;
  sc.k = 3;
  sc.link = LinkSpec::logistic();
  sc.beta_scale = 1.5;
  const GeneratedData gen = generate_dataset(sc, 0);

  EstimatorConfig cfg;
  cfg.link_mode = LinkMode::single_index;
  cfg.folds = 3;
  cfg.balance.k1 = kAutoK1;
  const EffectEstimate est = estimate_att(gen.data, cfg);
  CHECK(std::isfinite(est.tau_hat));
  CHECK(est.s_n > 0.0);
  REQUIRE(est.per_fold.size() == 3);
  for (const FoldDetail& f : est.per_fold) {
    CHECK(f.bandwidth > 0.0);
    CHECK(f.beta_hat.norm() == doctest::Approx(1.0).epsilon(1e-8));
  }
  // Wrong fold count is rejected in both modes.
  cfg.folds = 2;
  CHECK_THROWS_AS((void)estimate_att(gen.data, cfg), std::invalid_argument);
  EstimatorConfig known;
  known.folds = 3;
  CHECK_THROWS_AS((void)estimate_att(gen.data, known), std::invalid_argument);
}
