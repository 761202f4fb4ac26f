#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "narb/links.hpp"
#include "narb/types.hpp"

namespace narb {

enum class OutcomeMethod { nls_lasso, glm_lasso, pv_linear_lasso };

struct SolverOptions {
  double tolerance = 1e-8;     // max-norm iterate change declaring convergence
  int max_iters = 10000;
  double backtrack = 0.5;      // step shrink factor in the line search
  double initial_step = 1.0;
  bool init_from_pv = false;   // curved links: also try a pv-lasso warm start
  double sigma_hat = 0.0;      // pilot scale for theory-rate lambda; <=0 -> sd(y)
  double rate_constant = 1.1;  // c in lambda = c * sigma * sqrt(log p / n)
  int cv_folds = 5;
  std::uint64_t cv_seed = 1;
};

//! A fitted l1-penalized outcome model. Losses are mean-normalized:
//!   nls:  (1/(2n)) sum (y_i - psi(x_i'b))^2
//!   glm:  (1/n) sum [A(x_i'b) - y_i x_i'b], canonical A with A' = psi
//!   pv:   (1/(2n)) ||y - X theta||^2 on the (optionally whitened) design
//! so the same lambda scale sqrt(log p / n) applies to all three.
struct FittedOutcomeModel {
  Vector beta_hat;                     // direction for pv, coefficients otherwise
  double lambda = 0.0;
  std::vector<Index> support;          // nonzero pattern of beta_hat
  std::vector<double> objective_trace; // accepted iterates, non-increasing
  OutcomeMethod method = OutcomeMethod::nls_lasso;
  std::optional<double> pv_mu_hat;     // ||theta_raw||_2 for the pv route

  bool converged = false;              // true when the tolerance test fired
  std::string stop_reason;             // "tolerance" | "max_iters"
  int iterations = 0;

  // pv route bookkeeping: the lasso solution in the solved (possibly
  // whitened) coordinates, and whether whitening was applied. Needed to
  // recompute the KKT certificate and to read off the sparsity level.
  Vector pv_theta;
  bool pv_whitened = false;
};

//! Backtracking proximal gradient hit a step-size floor without descending,
//! or the objective went non-finite. Carries the last iterate.
class SolverStallError : public std::runtime_error {
 public:
  SolverStallError(const std::string& what, Vector last)
      : std::runtime_error(what), last_iterate(std::move(last)) {}
  Vector last_iterate;
};

//! The pv lasso killed every coefficient; the direction theta/||theta|| is
//! undefined. Lower lambda and retry.
class DegenerateDirectionError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

FittedOutcomeModel fit_nls_lasso(const Matrix& X, const Vector& y, const LinkSpec& link,
                                 double lambda, const SolverOptions& opts = {});

FittedOutcomeModel fit_glm_lasso(const Matrix& X, const Vector& y, const LinkSpec& link,
                                 double lambda, const SolverOptions& opts = {});

FittedOutcomeModel fit_pv_linear_lasso(const Matrix& X, const Vector& y, double lambda,
                                       bool whiten, const SolverOptions& opts = {});

enum class LambdaRule { theory_rate, kfold_cv };

//! theory_rate: c * sigma_hat * sqrt(log p / n). kfold_cv: minimize held-out
//! squared error over a geometric grid below the data-driven lambda_max,
//! breaking ties toward the larger penalty.
double select_lambda(const Matrix& X, const Vector& y, const LinkSpec& link,
                     LambdaRule rule, OutcomeMethod method = OutcomeMethod::nls_lasso,
                     const SolverOptions& opts = {});

struct KktReport {
  bool pass = false;
  double max_violation = 0.0;  // distance outside the allowed subgradient band
  double tolerance = 0.0;      // 10x solver tolerance
};

//! Subgradient optimality certificate: on the support |grad_j| must lie in
//! [lambda - tol, lambda + tol], off the support |grad_j| <= lambda + tol.
KktReport kkt_check(const FittedOutcomeModel& fit, const Matrix& X, const Vector& y,
                    const LinkSpec& link, const SolverOptions& opts = {});

}  // namespace narb
