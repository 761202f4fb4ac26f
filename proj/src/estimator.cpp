#include "narb/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "narb/math_util.hpp"

namespace narb {

namespace {

Matrix rows_of(const Matrix& X, const std::vector<Index>& idx) {
  Matrix out(static_cast<Index>(idx.size()), X.cols());
  for (Index i = 0; i < out.rows(); ++i) out.row(i) = X.row(idx[i]);
  return out;
}

Vector elems_of(const Vector& y, const std::vector<Index>& idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (Index i = 0; i < out.size(); ++i) out[i] = y[idx[i]];
  return out;
}

}  // namespace

Vector index_coefficients(const FittedOutcomeModel& fit) {
  if (fit.method == OutcomeMethod::pv_linear_lasso && fit.pv_mu_hat)
    return *fit.pv_mu_hat * fit.beta_hat;
  return fit.beta_hat;
}

FittedOutcomeModel fit_outcome_model(const Matrix& X, const Vector& y,
                                     const EstimatorConfig& cfg, const LinkSpec& link) {
  const double lambda =
      cfg.lambda_override >= 0.0
          ? cfg.lambda_override
          : select_lambda(X, y, link, cfg.lambda_rule, cfg.outcome_method, cfg.solver);
  switch (cfg.outcome_method) {
    case OutcomeMethod::nls_lasso:
      return fit_nls_lasso(X, y, link, lambda, cfg.solver);
    case OutcomeMethod::glm_lasso:
      return fit_glm_lasso(X, y, link, lambda, cfg.solver);
    case OutcomeMethod::pv_linear_lasso:
      return fit_pv_linear_lasso(X, y, lambda, true, cfg.solver);
  }
  throw std::logic_error("estimator: unreachable outcome method");
}

BalancingWeights solve_balance_weights(const BalanceTargets& targets, const Matrix& X_donor,
                                       const EstimatorConfig& cfg,
                                       const std::vector<Index>& support) {
  switch (cfg.balance_mode) {
    case BalanceMode::hard:
      return solve_weights_hard(targets, X_donor, cfg.balance);
    case BalanceMode::penalized:
      return solve_weights_penalized(targets, X_donor, cfg.balance);
    case BalanceMode::l2:
      return solve_weights_l2(targets, X_donor, cfg.balance);
    case BalanceMode::support_restricted: {
      if (!support.empty())
        return solve_weights_support_restricted(targets, X_donor, support, cfg.balance);
      // An empty fitted support leaves nothing to restrict to; balance all
      // coordinates instead.
      std::vector<Index> full(targets.dim());
      std::iota(full.begin(), full.end(), Index{0});
      return solve_weights_support_restricted(targets, X_donor, full, cfg.balance);
    }
  }
  throw std::logic_error("estimator: unreachable balance mode");
}

namespace {

void enforce_feasibility(const BalancingWeights& w, const EstimatorConfig& cfg,
                         int eval_fold) {
  if (w.feasible || cfg.on_infeasible == InfeasibleAction::keep) return;
  throw InfeasibleBalanceError(
      "balancing infeasible on fold " + std::to_string(eval_fold) +
          ": first-order residual " + std::to_string(w.solver_report.c1_residual) +
          ", curvature residual " + std::to_string(w.solver_report.c2_residual) +
          ", attainable violation " + std::to_string(w.solver_report.min_violation),
      w.solver_report.min_violation);
}

struct FoldArms {
  std::vector<Index> treated;
  std::vector<Index> control;
};

// Global row indices per fold, split by arm.
std::vector<FoldArms> arms_by_fold(const Dataset& data, const FoldPlan& plan) {
  std::vector<FoldArms> out(plan.K);
  for (Index i = 0; i < data.n(); ++i) {
    FoldArms& fa = out[plan.fold_assignment[i]];
    (data.W[i] == 1 ? fa.treated : fa.control).push_back(i);
  }
  return out;
}

struct Aggregate {
  double tau = 0.0, mu_c = 0.0, mu_t = 0.0, s_sq = 0.0;
};

// n_t-weighted cross-fit aggregation; the treated-arm variance enters once
// when every fold shares the same treated sample.
Aggregate aggregate_folds(std::vector<FoldDetail>& folds, bool shared_treated) {
  double total = 0.0;
  for (const FoldDetail& f : folds) total += static_cast<double>(f.n_t);
  Aggregate agg;
  for (FoldDetail& f : folds) {
    f.weight = static_cast<double>(f.n_t) / total;
    agg.tau += f.weight * f.tau;
    agg.mu_c += f.weight * f.mu_c;
    agg.mu_t += f.weight * f.mu_t;
    agg.s_sq += f.weight * f.weight * f.var_control;
    if (!shared_treated) agg.s_sq += f.weight * f.weight * f.var_treated;
  }
  if (shared_treated) agg.s_sq += folds.front().var_treated;
  return agg;
}

EffectEstimate assemble(Estimand estimand, std::vector<FoldDetail> folds,
                        const Aggregate& agg, const Dataset& data, double ci_level) {
  EffectEstimate est;
  est.estimand = estimand;
  est.tau_hat = agg.tau;
  est.mu_c_hat = agg.mu_c;
  est.mu_t_hat = agg.mu_t;
  est.s_n = std::sqrt(agg.s_sq);
  est.ci_level = ci_level;
  const double z = normal_two_sided_critical(ci_level);
  est.ci_lo = est.tau_hat - z * est.s_n;
  est.ci_hi = est.tau_hat + z * est.s_n;
  est.n_t = data.n_treated();
  est.n_c = data.n_control();
  est.all_folds_feasible = true;
  for (const FoldDetail& f : folds) est.all_folds_feasible &= f.feasible;
  est.per_fold = std::move(folds);
  return est;
}

double uniform_mean_variance(const Vector& y) {
  // Variance piece of a plain mean: sum (1/n)^2 (y_i - ybar)^2.
  const double n = static_cast<double>(y.size());
  const double mean = y.mean();
  return (y.array() - mean).square().sum() / (n * n);
}

EffectEstimate att_known_link(const Dataset& data, const EstimatorConfig& cfg) {
  if (cfg.folds != 2)
    throw std::invalid_argument("estimate_att: known-link mode uses 2 folds");
  const FoldPlan plan = split_folds(data.n(), data.W, 2, cfg.fold_seed);
  const std::vector<FoldArms> arms = arms_by_fold(data, plan);
  for (const FoldArms& fa : arms)
    if (fa.treated.empty() || fa.control.empty())
      throw std::invalid_argument("estimate_att: a fold has an empty arm");

  std::vector<Index> all_treated;
  for (Index i = 0; i < data.n(); ++i)
    if (data.W[i] == 1) all_treated.push_back(i);

  std::vector<FoldDetail> folds;
  for (const auto& [train, eval] : {std::pair{0, 1}, std::pair{1, 0}}) {
    const Matrix X_tr_c = rows_of(data.X, arms[train].control);
    const Vector y_tr_c = elems_of(data.Y, arms[train].control);
    const FittedOutcomeModel fit = fit_outcome_model(X_tr_c, y_tr_c, cfg, cfg.link);
    const Vector beta = index_coefficients(fit);

    const std::vector<Index>& target_rows =
        cfg.target_global_treated ? all_treated : arms[eval].treated;
    const Matrix X_target = rows_of(data.X, target_rows);
    const Vector y_target = elems_of(data.Y, target_rows);
    const Matrix X_ev_c = rows_of(data.X, arms[eval].control);
    const Vector y_ev_c = elems_of(data.Y, arms[eval].control);

    const BalanceTargets targets = build_targets(X_target, X_ev_c, beta, cfg.link);
    const BalancingWeights w = solve_balance_weights(targets, X_ev_c, cfg, fit.support);
    enforce_feasibility(w, cfg, eval);

    FoldDetail fd;
    fd.train_fold = train;
    fd.eval_fold = eval;
    fd.mu_c = estimate_mu_c(X_target, X_ev_c, y_ev_c, beta, w.gamma, cfg.link);
    fd.mu_t = estimate_mu_t_bar(y_target);
    fd.tau = fd.mu_t - fd.mu_c;
    fd.n_t = static_cast<Index>(target_rows.size());
    fd.n_c = static_cast<Index>(arms[eval].control.size());
    const Vector resid_c = y_ev_c - cfg.link.apply(X_ev_c * beta, 0);
    fd.var_control = variance_estimate(w.gamma, resid_c);
    fd.var_treated = uniform_mean_variance(y_target);
    fd.feasible = w.feasible;
    fd.achieved_c1 = w.achieved_c1;
    fd.achieved_c2 = w.achieved_c2;
    fd.ess = w.ell2_norm_sq > 0.0 ? 1.0 / w.ell2_norm_sq : 0.0;
    fd.lambda = fit.lambda;
    fd.beta_hat = beta;
    fd.gamma = w.gamma;
    fd.eval_control_rows = arms[eval].control;
    fd.eval_treated_rows = target_rows;
    folds.push_back(std::move(fd));
  }
  const Aggregate agg = aggregate_folds(folds, cfg.target_global_treated);
  return assemble(Estimand::att, std::move(folds), agg, data, cfg.ci_level);
}

EffectEstimate att_single_index(const Dataset& data, const EstimatorConfig& cfg) {
  if (cfg.folds != 3)
    throw std::invalid_argument("estimate_att: single-index mode uses 3 folds");
  std::vector<Index> treated_rows, control_rows;
  for (Index i = 0; i < data.n(); ++i)
    (data.W[i] == 1 ? treated_rows : control_rows).push_back(i);
  if (treated_rows.empty()) throw std::invalid_argument("estimate_att: no treated units");

  // The A/B/C scheme partitions the control sample only; every rotation
  // shares the full treated sample for targets and the tau formula.
  const Index n_c = static_cast<Index>(control_rows.size());
  const std::vector<int> zeros(n_c, 0);
  const FoldPlan plan = split_folds(n_c, zeros, 3, cfg.fold_seed);
  std::vector<std::vector<Index>> fold_rows(3);
  for (Index i = 0; i < n_c; ++i)
    fold_rows[plan.fold_assignment[i]].push_back(control_rows[i]);
  for (const auto& fr : fold_rows)
    if (static_cast<int>(fr.size()) < cfg.smoother_degree + 2)
      throw std::invalid_argument("estimate_att: control fold too small for the smoother");

  const Matrix X_t = rows_of(data.X, treated_rows);
  const Vector y_t = elems_of(data.Y, treated_rows);

  std::vector<FoldDetail> folds;
  for (int r = 0; r < 3; ++r) {
    const int fold_a = r, fold_b = (r + 1) % 3, fold_c = (r + 2) % 3;
    const Matrix X_a = rows_of(data.X, fold_rows[fold_a]);
    const Vector y_a = elems_of(data.Y, fold_rows[fold_a]);

    const double lambda =
        cfg.lambda_override >= 0.0
            ? cfg.lambda_override
            : select_lambda(X_a, y_a, cfg.link, cfg.lambda_rule,
                            OutcomeMethod::pv_linear_lasso, cfg.solver);
    const FittedOutcomeModel fit = fit_pv_linear_lasso(X_a, y_a, lambda, true, cfg.solver);
    const Vector beta_dir = fit.beta_hat;  // unit-norm index direction

    const Matrix X_b = rows_of(data.X, fold_rows[fold_b]);
    const Vector y_b = elems_of(data.Y, fold_rows[fold_b]);
    const Vector z_b = X_b * beta_dir;
    const double bandwidth =
        cfg.smoother_bandwidth > 0.0
            ? cfg.smoother_bandwidth
            : select_bandwidth(z_b, y_b, cfg.smoother_degree, cfg.bandwidth_method);
    const LinkSpec link =
        LinkSpec::from_smoother(fit_local_poly(z_b, y_b, cfg.smoother_degree, bandwidth));

    const Matrix X_c = rows_of(data.X, fold_rows[fold_c]);
    const Vector y_c = elems_of(data.Y, fold_rows[fold_c]);

    const BalanceTargets targets = build_targets(X_t, X_c, beta_dir, link);
    BalanceConfig bc = cfg.balance;
    const double n_b = static_cast<double>(fold_rows[fold_b].size());
    if (bc.r1 <= 0.0) bc.r1 = std::pow(n_b, -2.0 / 7.0);
    if (bc.r2 <= 0.0) bc.r2 = std::pow(n_b, -1.0 / 7.0);
    bc.k_sparsity = std::max<int>(1, static_cast<int>(fit.support.size()));
    const BalancingWeights w = solve_weights_l2(targets, X_c, bc);
    enforce_feasibility(w, cfg, fold_c);

    FoldDetail fd;
    fd.train_fold = fold_a;
    fd.eval_fold = fold_c;
    fd.mu_c = estimate_mu_c(X_t, X_c, y_c, beta_dir, w.gamma, link);
    fd.mu_t = estimate_mu_t_bar(y_t);
    fd.tau = fd.mu_t - fd.mu_c;
    fd.n_t = static_cast<Index>(treated_rows.size());
    fd.n_c = static_cast<Index>(fold_rows[fold_c].size());
    const Vector resid_c = y_c - link.apply(X_c * beta_dir, 0);
    fd.var_control = variance_estimate(w.gamma, resid_c);
    fd.var_treated = uniform_mean_variance(y_t);
    fd.feasible = w.feasible;
    fd.achieved_c1 = w.achieved_c1;
    fd.achieved_c2 = w.achieved_c2;
    fd.ess = w.ell2_norm_sq > 0.0 ? 1.0 / w.ell2_norm_sq : 0.0;
    fd.lambda = lambda;
    fd.bandwidth = bandwidth;
    fd.beta_hat = beta_dir;
    fd.gamma = w.gamma;
    fd.eval_control_rows = fold_rows[fold_c];
    fd.eval_treated_rows = treated_rows;
    folds.push_back(std::move(fd));
  }
  const Aggregate agg = aggregate_folds(folds, /*shared_treated=*/true);
  return assemble(Estimand::att, std::move(folds), agg, data, cfg.ci_level);
}

}  // namespace

FoldPlan split_folds(Index n, const std::vector<int>& treatment, int K, int seed) {
  if (K != 2 && K != 3) throw std::invalid_argument("split_folds: K must be 2 or 3");
  if (n < 2 * K) throw std::invalid_argument("split_folds: need n >= 2K");
  if (static_cast<Index>(treatment.size()) != n)
    throw std::invalid_argument("split_folds: treatment length mismatch");
  std::vector<Index> treated, control;
  for (Index i = 0; i < n; ++i) {
    if (treatment[i] != 0 && treatment[i] != 1)
      throw std::invalid_argument("split_folds: treatment must be 0/1");
    (treatment[i] == 1 ? treated : control).push_back(i);
  }
  Rng rng(static_cast<std::uint64_t>(seed));
  std::shuffle(treated.begin(), treated.end(), rng);
  std::shuffle(control.begin(), control.end(), rng);

  FoldPlan plan;
  plan.n = n;
  plan.K = K;
  plan.seed = seed;
  plan.stratified_by_treatment = true;
  plan.fold_assignment.assign(n, 0);
  // Round-robin within each arm keeps per-fold arm counts within one of
  // each other, which pins the treated fraction near the global one.
  for (size_t i = 0; i < treated.size(); ++i)
    plan.fold_assignment[treated[i]] = static_cast<int>(i % K);
  for (size_t i = 0; i < control.size(); ++i)
    plan.fold_assignment[control[i]] = static_cast<int>(i % K);
  return plan;
}

double estimate_mu_c(const Matrix& X_t, const Matrix& X_c, const Vector& y_c,
                     const Vector& beta_hat, const Vector& gamma, const LinkSpec& link) {
  if (X_t.cols() != beta_hat.size() || X_c.cols() != beta_hat.size())
    throw std::invalid_argument("estimate_mu_c: coefficient length mismatch");
  if (gamma.size() != X_c.rows() || y_c.size() != X_c.rows())
    throw std::invalid_argument("estimate_mu_c: donor-side length mismatch");
  if (X_t.rows() == 0) throw std::invalid_argument("estimate_mu_c: empty target sample");
  const double plug_in = link.apply(X_t * beta_hat, 0).mean();
  const Vector resid = y_c - link.apply(X_c * beta_hat, 0);
  return plug_in + gamma.dot(resid);
}

double estimate_mu_t_bar(const Vector& y_t) {
  if (y_t.size() == 0) throw std::invalid_argument("estimate_mu_t_bar: empty treated arm");
  return y_t.mean();
}

double variance_estimate(const Vector& gamma, const Vector& residuals) {
  if (gamma.size() != residuals.size())
    throw std::invalid_argument("variance_estimate: length mismatch");
  return gamma.cwiseAbs2().dot(residuals.cwiseAbs2());
}

EffectEstimate estimate_att(const Dataset& data, const EstimatorConfig& cfg) {
  data.validate();
  return cfg.link_mode == LinkMode::known ? att_known_link(data, cfg)
                                          : att_single_index(data, cfg);
}

EffectEstimate estimate_ate(const Dataset& data, const EstimatorConfig& cfg) {
  data.validate();
  if (cfg.link_mode != LinkMode::known)
    throw std::invalid_argument("estimate_ate: single-index mode supports ATT only");
  if (cfg.folds != 2) throw std::invalid_argument("estimate_ate: uses 2 folds");
  const FoldPlan plan = split_folds(data.n(), data.W, 2, cfg.fold_seed);
  const std::vector<FoldArms> arms = arms_by_fold(data, plan);
  for (const FoldArms& fa : arms)
    if (fa.treated.empty() || fa.control.empty())
      throw std::invalid_argument("estimate_ate: a fold has an empty arm");

  std::vector<FoldDetail> folds;
  for (const auto& [train, eval] : {std::pair{0, 1}, std::pair{1, 0}}) {
    const FittedOutcomeModel fit_c =
        fit_outcome_model(rows_of(data.X, arms[train].control),
                    elems_of(data.Y, arms[train].control), cfg, cfg.link);
    const FittedOutcomeModel fit_t =
        fit_outcome_model(rows_of(data.X, arms[train].treated),
                    elems_of(data.Y, arms[train].treated), cfg, cfg.link);
    const Vector beta_c = index_coefficients(fit_c);
    const Vector beta_t = index_coefficients(fit_t);

    // Both arms balance toward first/second-order targets over the whole
    // evaluation fold, each with its own fitted coefficients.
    std::vector<Index> eval_rows = arms[eval].control;
    eval_rows.insert(eval_rows.end(), arms[eval].treated.begin(), arms[eval].treated.end());
    std::sort(eval_rows.begin(), eval_rows.end());
    const Matrix X_full = rows_of(data.X, eval_rows);
    const Matrix X_c = rows_of(data.X, arms[eval].control);
    const Vector y_c = elems_of(data.Y, arms[eval].control);
    const Matrix X_t = rows_of(data.X, arms[eval].treated);
    const Vector y_t = elems_of(data.Y, arms[eval].treated);

    const BalanceTargets targets_c = build_targets(X_full, X_c, beta_c, cfg.link);
    const BalanceTargets targets_t = build_targets(X_full, X_t, beta_t, cfg.link);
    const BalancingWeights w_c = solve_balance_weights(targets_c, X_c, cfg, fit_c.support);
    enforce_feasibility(w_c, cfg, eval);
    const BalancingWeights w_t = solve_balance_weights(targets_t, X_t, cfg, fit_t.support);
    enforce_feasibility(w_t, cfg, eval);

    FoldDetail fd;
    fd.train_fold = train;
    fd.eval_fold = eval;
    fd.mu_c = estimate_mu_c(X_full, X_c, y_c, beta_c, w_c.gamma, cfg.link);
    fd.mu_t = estimate_mu_c(X_full, X_t, y_t, beta_t, w_t.gamma, cfg.link);
    fd.tau = fd.mu_t - fd.mu_c;
    // Aggregation weights follow the evaluation fold's total size: the
    // estimand averages over the whole fold, not one arm.
    fd.n_t = static_cast<Index>(eval_rows.size());
    fd.n_c = static_cast<Index>(arms[eval].control.size());
    const Vector resid_c = y_c - cfg.link.apply(X_c * beta_c, 0);
    const Vector resid_t = y_t - cfg.link.apply(X_t * beta_t, 0);
    fd.var_control = variance_estimate(w_c.gamma, resid_c);
    fd.var_treated = variance_estimate(w_t.gamma, resid_t);
    fd.feasible = w_c.feasible && w_t.feasible;
    fd.achieved_c1 = std::max(w_c.achieved_c1, w_t.achieved_c1);
    fd.achieved_c2 = std::max(w_c.achieved_c2, w_t.achieved_c2);
    const double norms = w_c.ell2_norm_sq + w_t.ell2_norm_sq;
    fd.ess = norms > 0.0 ? 2.0 / norms : 0.0;
    fd.lambda = fit_c.lambda;
    fd.beta_hat = beta_c;
    fd.gamma = w_c.gamma;
    fd.gamma_treated = w_t.gamma;
    fd.eval_control_rows = arms[eval].control;
    fd.eval_treated_rows = arms[eval].treated;
    folds.push_back(std::move(fd));
  }
  const Aggregate agg = aggregate_folds(folds, /*shared_treated=*/false);
  EffectEstimate est = assemble(Estimand::ate, std::move(folds), agg, data, cfg.ci_level);
  // mu_t here is the corrected treated-arm mean, not the raw treated average.
  return est;
}

DecompositionAudit decomposition_audit(const Matrix& X_t, const Matrix& X_c,
                                       const Vector& beta_true, const Vector& beta_hat,
                                       const Vector& gamma, const LinkSpec& link,
                                       const Vector& residuals) {
  if (!link.analytic())
    throw std::invalid_argument("decomposition_audit: needs a closed-form link");
  if (beta_true.size() != beta_hat.size() || X_t.cols() != beta_true.size() ||
      X_c.cols() != beta_true.size())
    throw std::invalid_argument("decomposition_audit: coefficient length mismatch");
  if (gamma.size() != X_c.rows() || residuals.size() != X_c.rows())
    throw std::invalid_argument("decomposition_audit: donor-side length mismatch");

  const Vector z_t_true = X_t * beta_true;
  const Vector z_t_hat = X_t * beta_hat;
  const Vector z_c_true = X_c * beta_true;
  const Vector z_c_hat = X_c * beta_hat;
  const Vector y_c = link.apply(z_c_true, 0) + residuals;

  DecompositionAudit audit;
  const double mu_c = link.apply(z_t_true, 0).mean();
  const double mu_hat = estimate_mu_c(X_t, X_c, y_c, beta_hat, gamma, link);
  audit.abs_error = std::abs(mu_hat - mu_c);

  const Vector delta = beta_hat - beta_true;
  audit.l1_error = delta.lpNorm<1>();
  audit.noise_term = std::abs(gamma.dot(residuals));

  // Realized index hull: every Taylor midpoint below lies inside it.
  const double lo = std::min({z_t_true.minCoeff(), z_t_hat.minCoeff(),
                              z_c_true.minCoeff(), z_c_hat.minCoeff()});
  const double hi = std::max({z_t_true.maxCoeff(), z_t_hat.maxCoeff(),
                              z_c_true.maxCoeff(), z_c_hat.maxCoeff()});
  audit.m2_star = link.max_abs_second_derivative(lo, hi);
  audit.m3_star = link.max_abs_third_derivative(lo, hi);

  const Vector row_inf_t = X_t.cwiseAbs().rowwise().maxCoeff();
  const Vector row_inf_c = X_c.cwiseAbs().rowwise().maxCoeff();
  const double design_sq =
      row_inf_t.cwiseAbs2().mean() + gamma.cwiseAbs().dot(row_inf_c.cwiseAbs2());
  const double design_cube = row_inf_t.array().cube().mean() +
                             gamma.cwiseAbs().dot(row_inf_c.array().cube().matrix());

  // Plug-in decomposition anchored at beta_true.
  const BalanceTargets targets_true = build_targets(X_t, X_c, beta_true, link);
  const double c1_true = first_order_imbalance(targets_true, gamma);
  audit.first_order_term = c1_true * audit.l1_error;
  audit.quadratic_term = 0.5 * audit.m2_star * design_sq * audit.l1_error * audit.l1_error;
  audit.bound = audit.first_order_term + audit.quadratic_term + audit.noise_term;
  const double slack = 1e-10 * (1.0 + std::abs(mu_c) + audit.bound);
  audit.bound_holds = audit.abs_error <= audit.bound + slack;

  // Feasible decomposition anchored at beta_hat with a cubic remainder.
  const BalanceTargets targets_hat = build_targets(X_t, X_c, beta_hat, link);
  audit.fd_first_order = first_order_imbalance(targets_hat, gamma) * audit.l1_error;
  audit.fd_second_order = 0.5 * second_order_imbalance(targets_hat, X_c, gamma) *
                          audit.l1_error * audit.l1_error;
  audit.fd_cubic_term = audit.m3_star / 6.0 * design_cube * audit.l1_error *
                        audit.l1_error * audit.l1_error;
  audit.fd_bound =
      audit.fd_first_order + audit.fd_second_order + audit.fd_cubic_term + audit.noise_term;
  audit.fd_bound_holds = audit.abs_error <= audit.fd_bound + slack;
  return audit;
}

}  // namespace narb
