#pragma once

#include <vector>

#include "narb/balancer.hpp"
#include "narb/dataset.hpp"
#include "narb/links.hpp"
#include "narb/outcome_model.hpp"
#include "narb/smoother.hpp"
#include "narb/types.hpp"

namespace narb {

enum class Estimand { att, ate };
enum class LinkMode { known, single_index };
enum class BalanceMode { hard, penalized, l2, support_restricted };
enum class InfeasibleAction { fail, keep };

struct EstimatorConfig {
  LinkMode link_mode = LinkMode::known;
  LinkSpec link = LinkSpec::logistic();  // ignored in single-index mode

  OutcomeMethod outcome_method = OutcomeMethod::nls_lasso;
  SolverOptions solver;
  LambdaRule lambda_rule = LambdaRule::theory_rate;
  double lambda_override = -1.0;  // >= 0 pins lambda in every fold

  BalanceMode balance_mode = BalanceMode::hard;
  BalanceConfig balance;

  int folds = 2;  // 2 for the known-link pipeline, 3 for single-index
  int fold_seed = 1;
  double ci_level = 0.95;

  //! Balance targets come from the evaluation fold's treated units; the
  //! flag switches to all treated units (the weights still live on the
  //! evaluation fold's controls).
  bool target_global_treated = false;

  InfeasibleAction on_infeasible = InfeasibleAction::fail;

  // Single-index mode: index direction via pv lasso, then a local
  // polynomial for the link and its derivatives.
  int smoother_degree = 3;
  double smoother_bandwidth = -1.0;  // <= 0: chosen by bandwidth_method
  BandwidthMethod bandwidth_method = BandwidthMethod::rule_of_thumb;
};

struct FoldPlan {
  Index n = 0;
  std::vector<int> fold_assignment;  // values in 0..K-1
  int K = 2;
  int seed = 0;
  bool stratified_by_treatment = true;
};

//! Deterministic stratified fold assignment: each arm is shuffled by the
//! seed and dealt round-robin, so per-fold arm counts differ by at most one.
FoldPlan split_folds(Index n, const std::vector<int>& treatment, int K, int seed);

//! Everything one cross-fit pairing produced. gamma and beta_hat are kept
//! so audits can recompute the weights and the variance pieces verbatim.
struct FoldDetail {
  int train_fold = 0;
  int eval_fold = 0;
  double mu_c = 0.0;
  double mu_t = 0.0;
  double tau = 0.0;
  double weight = 0.0;        // aggregation weight, sums to 1 across folds
  Index n_t = 0;              // evaluation-fold arm sizes
  Index n_c = 0;
  double var_control = 0.0;   // sum gamma_i^2 ehat_i^2 over evaluation controls
  double var_treated = 0.0;   // treated-arm analogue
  bool feasible = true;
  double achieved_c1 = 0.0;
  double achieved_c2 = 0.0;
  double ess = 0.0;
  double lambda = 0.0;
  double bandwidth = 0.0;     // single-index mode only
  Vector beta_hat;
  Vector gamma;               // control-arm weights (evaluation fold order)
  Vector gamma_treated;       // ATE only: treated-arm weights
  std::vector<Index> eval_control_rows;
  std::vector<Index> eval_treated_rows;
};

struct EffectEstimate {
  Estimand estimand = Estimand::att;
  double tau_hat = 0.0;
  double mu_c_hat = 0.0;
  double mu_t_hat = 0.0;
  double s_n = 0.0;
  double ci_level = 0.95;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  Index n_t = 0;
  Index n_c = 0;
  bool all_folds_feasible = true;
  std::vector<FoldDetail> per_fold;
};

//! Plug-in mean over the target sample plus the weighted residual
//! correction over the donors:
//!   (1/n_target) sum psi(x_i'beta) + sum gamma_i (y_i - psi(x_i'beta)).
double estimate_mu_c(const Matrix& X_t, const Matrix& X_c, const Vector& y_c,
                     const Vector& beta_hat, const Vector& gamma, const LinkSpec& link);

double estimate_mu_t_bar(const Vector& y_t);

//! sum gamma_i^2 residual_i^2.
double variance_estimate(const Vector& gamma, const Vector& residuals);

EffectEstimate estimate_att(const Dataset& data, const EstimatorConfig& config);
EffectEstimate estimate_ate(const Dataset& data, const EstimatorConfig& config);

//! Fit the configured outcome model on (X, y): lambda from the override or
//! the configured rule, then the configured lasso variant.
FittedOutcomeModel fit_outcome_model(const Matrix& X, const Vector& y,
                                     const EstimatorConfig& config, const LinkSpec& link);

//! Coefficient vector the link is evaluated with. The pv route returns a
//! unit direction plus a scale; the product recovers the index coefficients.
Vector index_coefficients(const FittedOutcomeModel& fit);

//! Dispatch to the configured balancing program. support feeds the
//! support-restricted mode (empty support balances every coordinate).
BalancingWeights solve_balance_weights(const BalanceTargets& targets, const Matrix& X_donor,
                                       const EstimatorConfig& config,
                                       const std::vector<Index>& support);

//! Exact finite-sample error decomposition of mu_c_hat around the truth.
//! Both bounds below are algebraic identities plus worst-case remainder
//! bounds with the derivative sups taken over the realized index hull, so
//! bound_holds failing indicates an implementation bug, not bad luck.
struct DecompositionAudit {
  double abs_error = 0.0;         // |mu_c_hat - mu_c(beta_true)|
  // Anchored at beta_true (plug-in decomposition):
  double first_order_term = 0.0;  // imbalance at beta_true times l1 error
  double quadratic_term = 0.0;    // realized-curvature remainder
  double noise_term = 0.0;        // |gamma' eps|
  double bound = 0.0;
  bool bound_holds = false;
  // Anchored at beta_hat (feasible decomposition with a cubic remainder):
  double fd_first_order = 0.0;    // achieved first-order imbalance term
  double fd_second_order = 0.0;   // achieved curvature-gap term
  double fd_cubic_term = 0.0;
  double fd_bound = 0.0;
  bool fd_bound_holds = false;
  double m2_star = 0.0;           // sup |psi''| over the realized hull
  double m3_star = 0.0;           // sup |psi'''| over the realized hull
  double l1_error = 0.0;          // ||beta_hat - beta_true||_1
};

//! residuals are the true noise on the donors: y_c - psi(X_c beta_true).
DecompositionAudit decomposition_audit(const Matrix& X_t, const Matrix& X_c,
                                       const Vector& beta_true, const Vector& beta_hat,
                                       const Vector& gamma, const LinkSpec& link,
                                       const Vector& residuals);

}  // namespace narb
