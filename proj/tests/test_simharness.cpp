#include <cmath>
#include <set>

#include "doctest.h"
#include "narb/simharness.hpp"
#include "support/oracles.hpp"

using namespace narb;

TEST_CASE("generated data is deterministic in (seed, replicate)") {
  SimConfig sc = baseline_config();
  sc.n = 150;
  sc.p = 30;
  const GeneratedData a = generate_dataset(sc, 3);
  const GeneratedData b = generate_dataset(sc, 3);
  CHECK((a.data.X.array() == b.data.X.array()).all());
  CHECK((a.data.Y.array() == b.data.Y.array()).all());
  CHECK(a.data.W == b.data.W);
  CHECK(a.truth.true_att == b.truth.true_att);

  const GeneratedData c = generate_dataset(sc, 4);
  CHECK_FALSE((a.data.X.array() == c.data.X.array()).all());
  sc.base_seed += 1;
  const GeneratedData d = generate_dataset(sc, 3);
  CHECK_FALSE((a.data.X.array() == d.data.X.array()).all());
}

TEST_CASE("recorded truth matches a recomputation from the draw") {
  SimConfig sc = baseline_config();
  sc.n = 200;
  sc.p = 40;
  sc.link = LinkSpec::exponential();
  sc.beta_scale = 0.4;
  const GeneratedData g = generate_dataset(sc, 7);

  // Coefficient structure: k leading nonzeros scaled by beta_scale, and the
  // treated arm shifts only the first coordinate by true_tau.
  int nnz = 0;
  for (Index j = 0; j < g.truth.beta_c.size(); ++j)
    if (g.truth.beta_c[j] != 0.0) ++nnz;
  CHECK(nnz == sc.k);
  Vector shift = g.truth.beta_t - g.truth.beta_c;
  CHECK(shift[0] == doctest::Approx(sc.true_tau).epsilon(1e-14));
  CHECK(shift.tail(shift.size() - 1).lpNorm<Eigen::Infinity>() == 0.0);

  // Realized sample ATT over the treated rows.
  double att = 0.0, mu_c = 0.0;
  int n_t = 0;
  for (Index i = 0; i < g.data.n(); ++i) {
    if (g.data.W[i] != 1) continue;
    const double zt = g.data.X.row(i).dot(g.truth.beta_t);
    const double zc = g.data.X.row(i).dot(g.truth.beta_c);
    att += std::exp(zt) - std::exp(zc);
    mu_c += std::exp(zc);
    ++n_t;
  }
  att /= n_t;
  mu_c /= n_t;
  CHECK(g.truth.true_att == doctest::Approx(att).epsilon(1e-12));
  CHECK(g.truth.mu_c_true == doctest::Approx(mu_c).epsilon(1e-12));
}

TEST_CASE("selection intercept hits the requested treated fraction") {
  SimConfig sc = baseline_config();
  sc.n = 4000;
  sc.p = 20;
  const double index_sd = sc.selection_scale * sc.beta_scale * std::sqrt(double(sc.k));
  sc.treat_param = selection_intercept_for_fraction(0.35, index_sd);
  double frac = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    const GeneratedData g = generate_dataset(sc, rep);
    for (int w : g.data.W) frac += w;
  }
  frac /= 10.0 * double(sc.n);
  CHECK(frac == doctest::Approx(0.35).epsilon(0.05));

  // Degenerate fractions are rejected.
  CHECK_THROWS_AS((void)selection_intercept_for_fraction(0.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS((void)selection_intercept_for_fraction(1.0, 1.0), std::invalid_argument);
}

TEST_CASE("design and noise variants alter the draw as documented") {
  SimConfig sc = baseline_config();
  sc.n = 400;
  sc.p = 12;
  sc.design = DesignKind::bounded_uniform;
  const GeneratedData g = generate_dataset(sc, 0);
  CHECK(g.data.X.maxCoeff() <= std::sqrt(3.0) + 1e-12);
  CHECK(g.data.X.minCoeff() >= -std::sqrt(3.0) - 1e-12);

  sc.design = DesignKind::ar1;
  sc.rho_x = 0.9;
  const GeneratedData h = generate_dataset(sc, 0);
  double corr01 = (h.data.X.col(0).array() * h.data.X.col(1).array()).mean();
  CHECK(corr01 == doctest::Approx(0.9).epsilon(0.15));

  sc.treatment = TreatmentKind::random_coin;
  sc.treat_param = 0.5;
  const GeneratedData coin = generate_dataset(sc, 1);
  int n_t = 0;
  for (int w : coin.data.W) n_t += w;
  CHECK(n_t > 120);
  CHECK(n_t < 280);
}

TEST_CASE("monte carlo report is internally consistent and reproducible") {
  SimConfig sc = baseline_config();
  sc.n = 150;
  sc.p = 12;
  sc.k = 3;
  sc.replicates = 8;
  sc.estimators = {SimEstimator::plugin, SimEstimator::second_order};
  sc.estimator.balance.k1 = kAutoK1;

  const SimReport a = run_monte_carlo(sc);
  REQUIRE(a.rows.size() == 16);
  REQUIRE(a.summaries.size() == 2);

  // Rows arrive sorted by (replicate, estimator-list order).
  for (size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].replicate == int(i / 2));
    CHECK(a.rows[i].estimator == (i % 2 == 0 ? SimEstimator::plugin
                                             : SimEstimator::second_order));
  }

  // Summaries recompute from the rows.
  for (const EstimatorSummary& s : a.summaries) {
    double bias = 0.0, mse = 0.0, cover = 0.0, width = 0.0, feas = 0.0;
    int n_ok = 0;
    for (const ReplicateRow& r : a.rows) {
      if (r.estimator != s.estimator || r.failed) continue;
      ++n_ok;
      bias += r.tau_hat - r.true_att;
      mse += (r.tau_hat - r.true_att) * (r.tau_hat - r.true_att);
      cover += r.covered;
      width += r.ci_hi - r.ci_lo;
      feas += r.feasible;
    }
    REQUIRE(n_ok == s.n_ok);
    CHECK(s.n_failed == 0);
    CHECK(s.mean_bias == doctest::Approx(bias / n_ok).epsilon(1e-12));
    CHECK(s.rmse == doctest::Approx(std::sqrt(mse / n_ok)).epsilon(1e-12));
    CHECK(s.coverage == doctest::Approx(cover / n_ok).epsilon(1e-12));
    CHECK(s.mean_ci_width == doctest::Approx(width / n_ok).epsilon(1e-12));
    CHECK(s.feasibility_rate == doctest::Approx(feas / n_ok).epsilon(1e-12));
  }

  // Identical at any thread count.
  const SimReport b = run_monte_carlo(sc);
  for (size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].tau_hat == b.rows[i].tau_hat);
    CHECK(a.rows[i].s_n == b.rows[i].s_n);
  }
}

TEST_CASE("identity-link truth makes the two correction levels coincide") {
  SimConfig sc = baseline_config();
  sc.link = LinkSpec::identity();
  sc.n = 150;
  sc.p = 10;
  sc.k = 3;
  sc.replicates = 4;
  sc.estimators = {SimEstimator::first_order, SimEstimator::second_order};
  sc.estimator.balance.k1 = 2.5;
  const SimReport rep = run_monte_carlo(sc);
  for (int r = 0; r < sc.replicates; ++r) {
    const ReplicateRow& fo = rep.rows[2 * r];
    const ReplicateRow& so = rep.rows[2 * r + 1];
    REQUIRE(fo.estimator == SimEstimator::first_order);
    REQUIRE(so.estimator == SimEstimator::second_order);
    CHECK(std::abs(fo.tau_hat - so.tau_hat) <= 1e-8);
  }
}

TEST_CASE("plugin rows ignore the balance configuration") {
  SimConfig sc = baseline_config();
  sc.n = 150;
  sc.p = 10;
  sc.replicates = 3;
  sc.estimators = {SimEstimator::plugin};
  const SimReport a = run_monte_carlo(sc);
  sc.estimator.balance.k1 = 0.9;
  sc.estimator.balance.k2 = 17.0;
  const SimReport b = run_monte_carlo(sc);
  for (size_t i = 0; i < a.rows.size(); ++i)
    CHECK(a.rows[i].tau_hat == b.rows[i].tau_hat);
}

TEST_CASE("estimator name round trips") {
  CHECK(std::string(estimator_name(SimEstimator::plugin)) == "plugin");
  CHECK(std::string(estimator_name(SimEstimator::first_order)) == "first-order");
  CHECK(std::string(estimator_name(SimEstimator::second_order)) == "second-order");
  CHECK(std::string(estimator_name(SimEstimator::sim_mode)) == "sim-mode");
  CHECK(std::string(design_name(DesignKind::ar1)) == "ar1");
  CHECK(std::string(treatment_name(TreatmentKind::random_coin)) == "random-coin");
  CHECK(std::string(noise_name(NoiseKind::scaled_uniform)) == "scaled-uniform");
}
