#include "narb/simharness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <thread>

#include "narb/math_util.hpp"

namespace narb {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_config(const SimConfig& c) {
  if (c.n < 10 || c.p < 1) throw std::invalid_argument("simharness: n or p too small");
  if (c.k < 1 || c.k > c.p) throw std::invalid_argument("simharness: need 1 <= k <= p");
  if (!(c.sigma > 0.0)) throw std::invalid_argument("simharness: sigma must be positive");
  if (c.replicates < 1) throw std::invalid_argument("simharness: replicates must be >= 1");
  if (c.treatment == TreatmentKind::random_coin &&
      !(c.treat_param > 0.0 && c.treat_param < 1.0))
    throw std::invalid_argument("simharness: coin probability must lie in (0,1)");
  if (c.design == DesignKind::ar1 && !(std::abs(c.rho_x) < 1.0))
    throw std::invalid_argument("simharness: ar1 correlation must lie in (-1,1)");
  if (c.estimators.empty()) throw std::invalid_argument("simharness: no estimators enabled");
}

Matrix draw_design(const SimConfig& c, Rng& rng) {
  switch (c.design) {
    case DesignKind::isotropic_gaussian:
      return gauss_matrix(c.n, c.p, rng);
    case DesignKind::ar1: {
      // Stationary AR(1) across columns with unit marginal variance.
      Matrix X = gauss_matrix(c.n, c.p, rng);
      const double carry = std::sqrt(1.0 - c.rho_x * c.rho_x);
      for (Index j = 1; j < c.p; ++j)
        X.col(j) = c.rho_x * X.col(j - 1) + carry * X.col(j);
      return X;
    }
    case DesignKind::bounded_uniform: {
      // Uniform on [-sqrt(3), sqrt(3)]: mean zero, unit variance.
      std::uniform_real_distribution<double> u(-std::sqrt(3.0), std::sqrt(3.0));
      Matrix X(c.n, c.p);
      for (Index j = 0; j < c.p; ++j)
        for (Index i = 0; i < c.n; ++i) X(i, j) = u(rng);
      return X;
    }
  }
  throw std::logic_error("simharness: unreachable design kind");
}

int threads_from_env(int replicates) {
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NLB_THREADS")) {
    const int parsed = std::atoi(env);
    if (parsed > 0) threads = parsed;
  }
  return std::clamp(threads, 1, replicates);
}

EstimatorConfig variant_config(const SimConfig& c, SimEstimator which) {
  EstimatorConfig cfg = c.estimator;
  cfg.link = c.link;
  cfg.link_mode = LinkMode::known;
  cfg.folds = 2;
  switch (which) {
    case SimEstimator::plugin:
    case SimEstimator::second_order:
      break;
    case SimEstimator::first_order:
      // An infinite curvature radius switches (C2) off entirely.
      cfg.balance.radius2_override = std::numeric_limits<double>::infinity();
      break;
    case SimEstimator::sim_mode:
      cfg.link_mode = LinkMode::single_index;
      cfg.folds = 3;
      break;
  }
  return cfg;
}

// Cross-fitted plug-in comparator: tau = Ybar_t - sum_f w_f * plug_f with no
// residual correction, CI from the treated-arm mean variance alone.
EffectEstimate run_plugin(const Dataset& data, const EstimatorConfig& cfg) {
  const FoldPlan plan = split_folds(data.n(), data.W, 2, cfg.fold_seed);
  std::vector<std::vector<Index>> fold_controls(2), fold_treated(2);
  for (Index i = 0; i < data.n(); ++i) {
    auto& dst = data.W[i] == 1 ? fold_treated : fold_controls;
    dst[plan.fold_assignment[i]].push_back(i);
  }
  for (int f = 0; f < 2; ++f)
    if (fold_treated[f].empty() || fold_controls[f].empty())
      throw std::invalid_argument("plugin comparator: a fold has an empty arm");

  EffectEstimate est;
  est.estimand = Estimand::att;
  est.ci_level = cfg.ci_level;
  est.n_t = data.n_treated();
  est.n_c = data.n_control();
  double total_nt = 0.0;
  for (int f = 0; f < 2; ++f) total_nt += static_cast<double>(fold_treated[f].size());

  for (const auto& [train, eval] : {std::pair{0, 1}, std::pair{1, 0}}) {
    Matrix X_tr(static_cast<Index>(fold_controls[train].size()), data.p());
    Vector y_tr(X_tr.rows());
    for (Index i = 0; i < X_tr.rows(); ++i) {
      X_tr.row(i) = data.X.row(fold_controls[train][i]);
      y_tr[i] = data.Y[fold_controls[train][i]];
    }
    const double lambda =
        cfg.lambda_override >= 0.0
            ? cfg.lambda_override
            : select_lambda(X_tr, y_tr, cfg.link, cfg.lambda_rule, cfg.outcome_method,
                            cfg.solver);
    FittedOutcomeModel fit;
    switch (cfg.outcome_method) {
      case OutcomeMethod::nls_lasso:
        fit = fit_nls_lasso(X_tr, y_tr, cfg.link, lambda, cfg.solver);
        break;
      case OutcomeMethod::glm_lasso:
        fit = fit_glm_lasso(X_tr, y_tr, cfg.link, lambda, cfg.solver);
        break;
      case OutcomeMethod::pv_linear_lasso:
        fit = fit_pv_linear_lasso(X_tr, y_tr, lambda, true, cfg.solver);
        break;
    }
    Vector beta = fit.beta_hat;
    if (fit.method == OutcomeMethod::pv_linear_lasso && fit.pv_mu_hat)
      beta *= *fit.pv_mu_hat;

    FoldDetail fd;
    fd.train_fold = train;
    fd.eval_fold = eval;
    fd.n_t = static_cast<Index>(fold_treated[eval].size());
    fd.n_c = static_cast<Index>(fold_controls[eval].size());
    Vector y_t(fd.n_t);
    double plug = 0.0;
    for (Index i = 0; i < fd.n_t; ++i) {
      const Index row = fold_treated[eval][i];
      y_t[i] = data.Y[row];
      plug += cfg.link.evaluate(data.X.row(row).dot(beta), 0);
    }
    plug /= static_cast<double>(fd.n_t);
    fd.mu_c = plug;
    fd.mu_t = y_t.mean();
    fd.tau = fd.mu_t - fd.mu_c;
    fd.weight = static_cast<double>(fd.n_t) / total_nt;
    const double n_t = static_cast<double>(fd.n_t);
    fd.var_treated = (y_t.array() - fd.mu_t).square().sum() / (n_t * n_t);
    fd.lambda = lambda;
    fd.beta_hat = beta;
    fd.feasible = true;
    est.per_fold.push_back(std::move(fd));
  }
  double s_sq = 0.0;
  for (const FoldDetail& fd : est.per_fold) {
    est.tau_hat += fd.weight * fd.tau;
    est.mu_c_hat += fd.weight * fd.mu_c;
    est.mu_t_hat += fd.weight * fd.mu_t;
    s_sq += fd.weight * fd.weight * fd.var_treated;
  }
  est.s_n = std::sqrt(s_sq);
  const double z = normal_two_sided_critical(cfg.ci_level);
  est.ci_lo = est.tau_hat - z * est.s_n;
  est.ci_hi = est.tau_hat + z * est.s_n;
  est.all_folds_feasible = true;
  return est;
}

ReplicateRow run_one(const SimConfig& c, const GeneratedData& gen, SimEstimator which,
                     int replicate) {
  ReplicateRow row;
  row.replicate = replicate;
  row.estimator = which;
  row.true_att = gen.truth.true_att;
  try {
    const EstimatorConfig cfg = variant_config(c, which);
    const EffectEstimate est = which == SimEstimator::plugin
                                   ? run_plugin(gen.data, cfg)
                                   : estimate_att(gen.data, cfg);
    row.tau_hat = est.tau_hat;
    row.s_n = est.s_n;
    row.ci_lo = est.ci_lo;
    row.ci_hi = est.ci_hi;
    row.covered = (est.ci_lo <= row.true_att && row.true_att <= est.ci_hi) ? 1 : 0;
    row.feasible = est.all_folds_feasible ? 1 : 0;
    double ess = 0.0;
    for (const FoldDetail& fd : est.per_fold) ess += fd.ess;
    row.mean_ess = est.per_fold.empty() ? 0.0 : ess / est.per_fold.size();
  } catch (const std::exception&) {
    row.failed = 1;
    row.tau_hat = row.s_n = row.ci_lo = row.ci_hi = kNan;
  }
  return row;
}

}  // namespace

const char* design_name(DesignKind kind) {
  switch (kind) {
    case DesignKind::isotropic_gaussian: return "isotropic-gaussian";
    case DesignKind::ar1: return "ar1";
    case DesignKind::bounded_uniform: return "bounded-uniform";
  }
  return "?";
}

const char* treatment_name(TreatmentKind kind) {
  switch (kind) {
    case TreatmentKind::random_coin: return "random-coin";
    case TreatmentKind::logistic_selection: return "logistic-selection";
  }
  return "?";
}

const char* noise_name(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::gaussian: return "gaussian";
    case NoiseKind::scaled_uniform: return "scaled-uniform";
  }
  return "?";
}

const char* estimator_name(SimEstimator which) {
  switch (which) {
    case SimEstimator::plugin: return "plugin";
    case SimEstimator::first_order: return "first-order";
    case SimEstimator::second_order: return "second-order";
    case SimEstimator::sim_mode: return "sim-mode";
  }
  return "?";
}

double selection_intercept_for_fraction(double fraction, double index_sd) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("selection intercept: fraction must lie in (0,1)");
  if (!(index_sd >= 0.0) || !std::isfinite(index_sd))
    throw std::invalid_argument("selection intercept: bad index sd");
  // Marginal treated fraction under alpha: E sigmoid(alpha + Z), Z~N(0,sd^2),
  // by fixed-grid quadrature; monotone in alpha, solved by bisection.
  auto marginal = [&](double alpha) {
    if (index_sd == 0.0) return stable_sigmoid(alpha);
    const int grid = 4001;
    const double span = 8.0 * index_sd;
    const double step = 2.0 * span / (grid - 1);
    double acc = 0.0, mass = 0.0;
    for (int g = 0; g < grid; ++g) {
      const double z = -span + g * step;
      const double w = std::exp(-0.5 * z * z / (index_sd * index_sd));
      acc += w * stable_sigmoid(alpha + z);
      mass += w;
    }
    return acc / mass;
  };
  double lo = -40.0, hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (marginal(mid) < fraction ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

SimConfig baseline_config() {
  SimConfig c;
  c.n = 600;
  c.p = 100;
  c.k = 4;
  c.link = LinkSpec::logistic();
  c.beta_scale = 1.0;
  c.treatment = TreatmentKind::logistic_selection;
  c.selection_scale = 0.5;
  // Index sd under the baseline: beta has k unit entries, isotropic design.
  c.treat_param = selection_intercept_for_fraction(
      0.35, c.selection_scale * c.beta_scale * std::sqrt(static_cast<double>(c.k)));
  c.noise = NoiseKind::gaussian;
  c.sigma = 0.5;
  c.design = DesignKind::isotropic_gaussian;
  c.true_tau = 0.5;
  c.replicates = 100;
  c.base_seed = 12345;
  c.estimators = {SimEstimator::second_order};
  // Adaptive first-order radius (1.1x the witnessed floor); a fixed
  // k1 sqrt(log p / n) radius is far too loose at this scale to bind.
  c.estimator.balance.k1 = kAutoK1;
  return c;
}

GeneratedData generate_dataset(const SimConfig& config, int replicate) {
  check_config(config);
  if (replicate < 0) throw std::invalid_argument("simharness: replicate must be >= 0");
  Rng rng(config.base_seed + static_cast<std::uint64_t>(replicate));

  GeneratedData out;
  const Matrix X = draw_design(config, rng);

  Vector beta_c = Vector::Zero(config.p);
  for (int j = 0; j < config.k; ++j)
    beta_c[j] = (j % 2 == 0 ? 1.0 : -1.0) * config.beta_scale;
  Vector beta_t = beta_c;
  beta_t[0] += config.true_tau;

  std::vector<int> W(config.n);
  {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (config.treatment == TreatmentKind::random_coin) {
      for (Index i = 0; i < config.n; ++i) W[i] = u(rng) < config.treat_param ? 1 : 0;
    } else {
      const Vector score =
          ((config.selection_scale * (X * beta_c)).array() + config.treat_param).matrix();
      for (Index i = 0; i < config.n; ++i)
        W[i] = u(rng) < stable_sigmoid(score[i]) ? 1 : 0;
    }
  }

  Vector noise(config.n);
  if (config.noise == NoiseKind::gaussian) {
    noise = config.sigma * gauss_vector(config.n, rng);
  } else {
    std::uniform_real_distribution<double> u(-std::sqrt(3.0), std::sqrt(3.0));
    for (Index i = 0; i < config.n; ++i) noise[i] = config.sigma * u(rng);
  }

  const Vector mean_c = config.link.apply(X * beta_c, 0);
  const Vector mean_t = config.link.apply(X * beta_t, 0);
  Vector Y(config.n);
  Index n_treated = 0;
  double att = 0.0, mu_c_true = 0.0;
  for (Index i = 0; i < config.n; ++i) {
    Y[i] = (W[i] == 1 ? mean_t[i] : mean_c[i]) + noise[i];
    if (W[i] == 1) {
      ++n_treated;
      att += mean_t[i] - mean_c[i];
      mu_c_true += mean_c[i];
    }
  }
  if (n_treated == 0 || n_treated == config.n)
    throw std::runtime_error("simharness: degenerate draw left an arm empty");
  att /= static_cast<double>(n_treated);
  mu_c_true /= static_cast<double>(n_treated);

  out.data.X = X;
  out.data.W = std::move(W);
  out.data.Y = std::move(Y);
  out.truth.beta_c = std::move(beta_c);
  out.truth.beta_t = std::move(beta_t);
  out.truth.true_att = att;
  out.truth.mu_c_true = mu_c_true;
  return out;
}

SimReport run_monte_carlo(const SimConfig& config) {
  check_config(config);
  const int R = config.replicates;
  const int E = static_cast<int>(config.estimators.size());
  SimReport report;
  report.rows.resize(static_cast<size_t>(R) * E);

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int rep = next.fetch_add(1);
      if (rep >= R) return;
      try {
        const GeneratedData gen = generate_dataset(config, rep);
        for (int e = 0; e < E; ++e)
          report.rows[static_cast<size_t>(rep) * E + e] =
              run_one(config, gen, config.estimators[e], rep);
      } catch (const std::exception&) {
        // A degenerate draw fails every estimator for this replicate.
        for (int e = 0; e < E; ++e) {
          ReplicateRow& row = report.rows[static_cast<size_t>(rep) * E + e];
          row.replicate = rep;
          row.estimator = config.estimators[e];
          row.failed = 1;
          row.tau_hat = row.s_n = row.ci_lo = row.ci_hi = row.true_att = kNan;
        }
      }
    }
  };
  const int threads = threads_from_env(R);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  for (int e = 0; e < E; ++e) {
    EstimatorSummary s;
    s.estimator = config.estimators[e];
    double bias = 0.0, sq = 0.0, cover = 0.0, width = 0.0, ess = 0.0, feas = 0.0;
    for (int rep = 0; rep < R; ++rep) {
      const ReplicateRow& row = report.rows[static_cast<size_t>(rep) * E + e];
      if (row.failed) {
        ++s.n_failed;
        continue;
      }
      ++s.n_ok;
      bias += row.tau_hat - row.true_att;
      sq += (row.tau_hat - row.true_att) * (row.tau_hat - row.true_att);
      cover += row.covered;
      width += row.ci_hi - row.ci_lo;
      ess += row.mean_ess;
      feas += row.feasible;
    }
    if (s.n_ok > 0) {
      const double n = static_cast<double>(s.n_ok);
      s.mean_bias = bias / n;
      s.rmse = std::sqrt(sq / n);
      s.coverage = cover / n;
      s.mean_ci_width = width / n;
      s.mean_ess = ess / n;
      s.feasibility_rate = feas / n;
    }
    report.summaries.push_back(s);
  }
  return report;
}

}  // namespace narb
