#pragma once

#include <stdexcept>
#include <utility>
#include <vector>

#include "narb/links.hpp"
#include "narb/types.hpp"

namespace narb {

//! Moment targets and donor-side pieces for the balancing programs. The
//! first-order design stores psi'-scaled donor rows, so the first-order gap
//! is target - design^T gamma with no further link evaluation.
struct BalanceTargets {
  Vector first_order_target;    // p: (1/n_t) X_t' psi'(X_t beta)
  Matrix first_order_design;    // n_c x p: row i = psi'(x_i'beta) * x_i'
  Matrix second_order_target;   // p x p: (1/n_t) sum_t psi''(x_i'beta) x_i x_i'
  Vector second_order_weights;  // n_c: psi''(x_i'beta) on donors

  Index n_donors() const { return first_order_design.rows(); }
  Index dim() const { return first_order_target.size(); }
  //! True when every curvature entry vanishes (identity link).
  bool curvature_inert() const;
};

BalanceTargets build_targets(const Matrix& X_target, const Matrix& X_donor,
                             const Vector& beta_hat, const LinkSpec& link);

//! Entrywise-max absolute first-order gap at gamma.
double first_order_imbalance(const BalanceTargets& targets, const Vector& gamma);
//! Euclidean norm of the first-order gap.
double first_order_imbalance_l2(const BalanceTargets& targets, const Vector& gamma);
//! Entrywise-max absolute entry of the second-order gap matrix.
double second_order_imbalance(const BalanceTargets& targets, const Matrix& X_donor,
                              const Vector& gamma);
//! Frobenius norm of the second-order gap matrix.
double second_order_imbalance_l2(const BalanceTargets& targets, const Matrix& X_donor,
                                 const Vector& gamma);

//! Exact Euclidean projection onto {g : sum g = 1, 0 <= g_i <= cap} by
//! sorted-breakpoint water filling. Throws when cap * n < 1 (empty set).
Vector project_capped_simplex(const Vector& v, double cap);

enum class ConstraintNorm { max, l2 };

//! Canonical 'auto' radius: 1.1x the witnessed feasibility floor.
inline constexpr double kAutoK1 = -1.1;

struct BalanceConfig {
  //! k1 > 0: first-order radius k1 sqrt(log p / n_donors).
  //! k1 < 0: adaptive radius |k1| times the smallest first-order gap the
  //! box/simplex set admits (found by a phase-1 pass), so the constraint
  //! binds near the attainable floor and stays feasible by construction.
  double k1 = 4.0;
  //! k2 >= 0: absolute curvature radius. k2 < 0: |k2| * max
  //! |second_order_target| (the default -2 is the documented auto rule).
  double k2 = -2.0;
  //! > 0: replace the k2 rule with margin * the smallest curvature gap
  //! attainable subject to (C1) at the resolved radius (phase-1 witness),
  //! so the second-order constraint binds instead of staying vacuous.
  double k2_floor_margin = -1.0;
  double cap_exponent = 2.0 / 3.0;
  double cap_override = -1.0;   // > 0 replaces n_donors^(-cap_exponent)
  bool normalize = true;        // sum-to-one on; off gives the box-only form
  ConstraintNorm constraint_norm = ConstraintNorm::max;
  double zeta = 0.5;            // penalized mode mix: norm vs imbalance
  double eta = 0.5;             // penalized mode mix: first vs second order
  double tol = 1e-7;            // terminal constraint residual
  int max_iters = 50000;

  // l2-variant radius inflation (single-index mode)
  double c1 = 1.0;
  double c2 = 1.0;
  double b_x = -1.0;            // <= 0: sqrt(trace(sample covariance of donors))
  double r1 = 0.0;              // smoother L2 error rates
  double r2 = 0.0;
  int k_sparsity = 1;           // |support| of the index estimate

  // Direct radius overrides for diagnostics and degenerate cases (p = 1
  // makes the log-p radius collapse to zero). Negative means unused.
  double radius1_override = -1.0;
  double radius2_override = -1.0;

  Index max_p_second_order = 2000;  // refuse the p x p mode beyond this
};

struct SolverReport {
  int iterations = 0;       // inner iterations across all penalty stages
  int stages = 0;           // penalty escalations performed
  double c1_residual = 0.0; // max(0, achieved - radius) at exit
  double c2_residual = 0.0;
  double final_penalty = 0.0;
  bool stalled = false;     // residuals never got below tol
  double min_violation = 0.0;  // phase-1 achievable violation when stalled
  bool polished = false;    // active-set refinement produced a certified point
  double radius_c1 = 0.0;   // radii the program actually used
  double radius_c2 = 0.0;
};

struct BalancingWeights {
  Vector gamma;
  double sum_gamma = 0.0;
  double cap = 0.0;
  double achieved_c1 = 0.0;     // entrywise-max first-order imbalance
  double achieved_c2 = 0.0;     // entrywise-max second-order imbalance
  double achieved_c1_l2 = 0.0;
  double achieved_c2_l2 = 0.0;
  double ell2_norm_sq = 0.0;
  bool feasible = false;
  SolverReport solver_report;
};

//! Minimize ||gamma||_2^2 subject to the first/second-order imbalance
//! constraints (norm per config), the box [0, cap], and optionally
//! sum gamma = 1. Radii: k1 sqrt(log p / n_donors) and k2 (auto: twice the
//! second-order target's max entry).
BalancingWeights solve_weights_hard(const BalanceTargets& targets, const Matrix& X_donor,
                                    const BalanceConfig& config);

//! Penalized form: (1-zeta)||g||^2 + zeta(eta ||gap1||_inf^2 +
//! (1-eta) ||gap2||_inf^2) over the capped simplex, by projected subgradient
//! with averaging; returns the best-objective iterate.
BalancingWeights solve_weights_penalized(const BalanceTargets& targets,
                                         const Matrix& X_donor,
                                         const BalanceConfig& config);

//! l2-norm constraints with smoother-error-inflated radii
//! k1 sqrt(k log p / n) + c1 B_X r1 and k2 + c2 B_X^2 r2.
BalancingWeights solve_weights_l2(const BalanceTargets& targets, const Matrix& X_donor,
                                  const BalanceConfig& config);

//! First-order balance restricted to the given coordinates, second order
//! disabled (beta-min regime). achieved_c1 reports the restricted gap.
BalancingWeights solve_weights_support_restricted(const BalanceTargets& targets,
                                                  const Matrix& X_donor,
                                                  const std::vector<Index>& support,
                                                  const BalanceConfig& config);

struct BalanceReport {
  double achieved_c1 = 0.0;
  double achieved_c2 = 0.0;
  double gamma_max = 0.0;       // ||gamma||_inf
  double ell2_norm_sq = 0.0;
  double ess = 0.0;             // 1 / ||gamma||_2^2
  // Worst first-order offenders: (coordinate, |gap|), largest first, <= 10.
  std::vector<std::pair<Index, double>> worst_coordinates;
};

BalanceReport balance_report(const BalancingWeights& weights, const BalanceTargets& targets,
                             const Matrix& X_donor);

//! Balancing infeasible and the caller asked for hard failure.
class InfeasibleBalanceError : public std::runtime_error {
 public:
  InfeasibleBalanceError(const std::string& what, double min_violation)
      : std::runtime_error(what), min_violation(min_violation) {}
  double min_violation;
};

}  // namespace narb
