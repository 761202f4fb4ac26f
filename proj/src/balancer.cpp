#include "narb/balancer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "narb/math_util.hpp"

namespace narb {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Matrix second_order_sum(const BalanceTargets& targets, const Matrix& X_donor,
                        const Vector& gamma) {
  // sum_i gamma_i psi''_i x_i x_i' as X' diag(gamma .* psi'') X.
  const Vector w = gamma.cwiseProduct(targets.second_order_weights);
  return X_donor.transpose() * w.asDiagonal() * X_donor;
}

Vector first_order_gap(const BalanceTargets& targets, const Vector& gamma) {
  return targets.first_order_target - targets.first_order_design.transpose() * gamma;
}

Matrix second_order_gap(const BalanceTargets& targets, const Matrix& X_donor,
                        const Vector& gamma) {
  return targets.second_order_target - second_order_sum(targets, X_donor, gamma);
}

// Row-wise dot products of two equally shaped matrices.
Vector rowwise_dot(const Matrix& a, const Matrix& b) {
  return (a.array() * b.array()).rowwise().sum().matrix();
}

void check_inputs(const BalanceTargets& targets, const Matrix& X_donor) {
  if (X_donor.rows() != targets.n_donors() || X_donor.cols() != targets.dim())
    throw std::invalid_argument("balancer: donor matrix shape does not match targets");
  if (!all_finite(targets.first_order_target) || !all_finite(targets.first_order_design) ||
      !all_finite(targets.second_order_target) || !all_finite(targets.second_order_weights) ||
      !all_finite(X_donor))
    throw std::invalid_argument("balancer: non-finite targets or donors");
}

// ---------------------------------------------------------------------------
// Penalty-stage machinery shared by the hard and l2 solvers.

struct ProgramSpec {
  const BalanceTargets* targets = nullptr;
  const Matrix* X_donor = nullptr;
  double radius1 = 0.0;
  double radius2 = 0.0;
  double cap = 0.0;
  bool normalize = true;
  ConstraintNorm norm = ConstraintNorm::max;
  bool curvature = false;  // second-order machinery in play at all
};

Vector project_feasible(const ProgramSpec& ps, const Vector& v) {
  if (ps.normalize) return project_capped_simplex(v, ps.cap);
  return v.cwiseMax(0.0).cwiseMin(ps.cap);
}

// Penalty value and gradient at gamma. mu scales the norm term; the hinge
// penalties are active per flags. c2_on enables the O(n p^2) curvature part.
struct PenaltyEval {
  double value = 0.0;
  double viol1 = 0.0;  // max(0, achieved - radius) in the program norm
  double viol2 = 0.0;
};

PenaltyEval eval_program(const ProgramSpec& ps, double mu, bool c2_on, const Vector& gamma,
                         Vector* grad) {
  const BalanceTargets& t = *ps.targets;
  PenaltyEval out;
  if (grad) *grad = 2.0 * mu * gamma;
  out.value = mu * gamma.squaredNorm();

  const Vector gap1 = first_order_gap(t, gamma);
  if (ps.norm == ConstraintNorm::max) {
    Vector s = Vector::Zero(gap1.size());
    for (Index j = 0; j < gap1.size(); ++j) {
      const double h = std::abs(gap1[j]) - ps.radius1;
      if (h > 0.0) {
        out.value += h * h;
        out.viol1 = std::max(out.viol1, h);
        if (grad) s[j] = 2.0 * h * (gap1[j] > 0.0 ? 1.0 : -1.0);
      }
    }
    if (grad && out.viol1 > 0.0) *grad -= t.first_order_design * s;
  } else {
    const double nrm = gap1.norm();
    const double h = nrm - ps.radius1;
    if (h > 0.0) {
      out.value += h * h;
      out.viol1 = h;
      if (grad) *grad -= t.first_order_design * ((2.0 * h / nrm) * gap1);
    }
  }

  if (c2_on && ps.curvature) {
    const Matrix gap2 = second_order_gap(t, *ps.X_donor, gamma);
    if (ps.norm == ConstraintNorm::max) {
      Matrix H = Matrix::Zero(gap2.rows(), gap2.cols());
      bool any = false;
      for (Index c = 0; c < gap2.cols(); ++c)
        for (Index r = 0; r < gap2.rows(); ++r) {
          const double h = std::abs(gap2(r, c)) - ps.radius2;
          if (h > 0.0) {
            out.value += h * h;
            out.viol2 = std::max(out.viol2, h);
            if (grad) H(r, c) = 2.0 * h * (gap2(r, c) > 0.0 ? 1.0 : -1.0);
            any = true;
          }
        }
      if (grad && any) {
        const Matrix M = (*ps.X_donor) * H;
        grad->array() -=
            rowwise_dot(M, *ps.X_donor).cwiseProduct(t.second_order_weights).array();
      }
    } else {
      const double nrm = gap2.norm();  // Frobenius
      const double h = nrm - ps.radius2;
      if (h > 0.0) {
        out.value += h * h;
        out.viol2 = h;
        if (grad) {
          const Matrix M = (*ps.X_donor) * gap2;
          *grad -= (2.0 * h / nrm) *
                   rowwise_dot(M, *ps.X_donor).cwiseProduct(t.second_order_weights);
        }
      }
    }
  }
  return out;
}

double spectral_norm_sq(const Matrix& a) {
  // Power iteration on a'a with a deterministic start.
  const Index p = a.cols();
  if (p == 0 || a.rows() == 0) return 0.0;
  Vector u = Vector::Ones(p);
  for (Index j = 0; j < p; ++j) u[j] += 1e-3 * static_cast<double>(j % 7);
  u.normalize();
  double lam = 0.0;
  for (int it = 0; it < 60; ++it) {
    Vector v = a.transpose() * (a * u);
    const double n = v.norm();
    if (n == 0.0) return 0.0;
    v /= n;
    const double lam_new = (a * v).squaredNorm();
    if (std::abs(lam_new - lam) <= 1e-10 * std::max(1.0, lam_new)) return lam_new;
    lam = lam_new;
    u = std::move(v);
  }
  return lam;
}

struct StageResult {
  int iterations = 0;
  PenaltyEval last;
};

// FISTA with projection, gradient-mapping restart, and a safety doubling of
// the Lipschitz estimate when the quadratic model check fails.
StageResult fista_stage(const ProgramSpec& ps, double mu, bool c2_on, double lipschitz,
                        Vector& gamma, int budget) {
  StageResult sr;
  Vector x = gamma, x_prev = gamma, y = gamma, grad(gamma.size());
  sr.last = eval_program(ps, mu, c2_on, gamma, nullptr);
  double L = std::max(lipschitz, 1e-12);
  double theta = 1.0;
  double last_change = kInf;
  for (int it = 0; it < budget; ++it) {
    sr.iterations = it + 1;
    const PenaltyEval ev = eval_program(ps, mu, c2_on, y, &grad);
    Vector x_new = project_feasible(ps, y - grad / L);
    const Vector d = x_new - y;
    const PenaltyEval ev_new = eval_program(ps, mu, c2_on, x_new, nullptr);
    if (ev_new.value > ev.value + grad.dot(d) + 0.5 * L * d.squaredNorm() +
                           1e-14 * std::max(1.0, ev.value)) {
      L *= 2.0;
      continue;
    }
    sr.last = ev_new;
    // Restart the momentum when it points against descent.
    if (grad.dot(x_new - x) > 0.0) theta = 1.0;
    const double theta_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * theta * theta));
    const double omega = (theta - 1.0) / theta_new;
    last_change = (x_new - x).lpNorm<Eigen::Infinity>();
    x_prev = std::move(x);
    x = std::move(x_new);
    y = x + omega * (x - x_prev);
    theta = theta_new;
    if (last_change < 1e-10 * (1.0 + x.lpNorm<Eigen::Infinity>()) && it > 8) break;
  }
  gamma = std::move(x);
  return sr;
}

// ---------------------------------------------------------------------------
// Active-set refinement. On modest instances the penalty solution's active
// set is re-solved as an equality-constrained projection and certified by
// exact KKT checks; certified points are optimal to linear-solver precision.

struct ActiveRow {
  // kind: 0 sum, 1 C1 up, 2 C1 lo, 3 C2 up, 4 C2 lo, 5 box up, 6 box lo
  int kind = 0;
  Index j = 0, k = 0;
};

struct PolishOutcome {
  bool certified = false;
  Vector gamma;
};

PolishOutcome polish_active_set(const ProgramSpec& ps, const Vector& start) {
  PolishOutcome out;
  if (ps.norm != ConstraintNorm::max) return out;
  const BalanceTargets& t = *ps.targets;
  const Matrix& Xd = *ps.X_donor;
  const Index n = t.n_donors(), p = t.dim();
  if (n > 400) return out;

  const double scale1 = std::max(1.0, t.first_order_target.lpNorm<Eigen::Infinity>());
  const double act_tol = 1e-6 * scale1;
  const double primal_tol = 1e-9 * scale1;
  const double dual_tol = 1e-9;

  // Row c and offset d of a constraint written as c'gamma <= d (or = d for
  // the sum row).
  auto fill_row = [&](const ActiveRow& r, Vector& c, double& d) {
    c.setZero();
    switch (r.kind) {
      case 0: c.setOnes(); d = 1.0; break;
      case 1: c = -t.first_order_design.col(r.j);
              d = ps.radius1 - t.first_order_target[r.j]; break;
      case 2: c = t.first_order_design.col(r.j);
              d = ps.radius1 + t.first_order_target[r.j]; break;
      case 3:
      case 4: {
        for (Index i = 0; i < n; ++i)
          c[i] = t.second_order_weights[i] * Xd(i, r.j) * Xd(i, r.k);
        if (r.kind == 3) { c = -c; d = ps.radius2 - t.second_order_target(r.j, r.k); }
        else { d = ps.radius2 + t.second_order_target(r.j, r.k); }
        break;
      }
      case 5: c[r.j] = 1.0; d = ps.cap; break;
      case 6: c[r.j] = -1.0; d = 0.0; break;
    }
  };

  std::vector<ActiveRow> rows;
  if (ps.normalize) rows.push_back({0, 0, 0});
  {
    const Vector gap1 = first_order_gap(t, start);
    for (Index j = 0; j < p; ++j) {
      if (ps.radius1 - gap1[j] <= act_tol) rows.push_back({1, j, 0});
      else if (ps.radius1 + gap1[j] <= act_tol) rows.push_back({2, j, 0});
    }
    if (ps.curvature && std::isfinite(ps.radius2)) {
      const Matrix gap2 = second_order_gap(t, Xd, start);
      for (Index j = 0; j < p; ++j)
        for (Index k = 0; k <= j; ++k) {
          if (ps.radius2 - gap2(j, k) <= act_tol) rows.push_back({3, j, k});
          else if (ps.radius2 + gap2(j, k) <= act_tol) rows.push_back({4, j, k});
        }
    }
    for (Index i = 0; i < n; ++i) {
      if (start[i] <= act_tol * 1e-2) rows.push_back({6, i, 0});
      else if (ps.cap - start[i] <= act_tol * 1e-2) rows.push_back({5, i, 0});
    }
  }

  Vector gamma;
  Vector crow(n);
  for (int round = 0; round < 60; ++round) {
    const Index m = static_cast<Index>(rows.size());
    Matrix M(m, n);
    Vector d(m);
    for (Index r = 0; r < m; ++r) {
      fill_row(rows[r], crow, d[r]);
      M.row(r) = crow.transpose();
    }
    // Min-norm point of the affine set M gamma = d: gamma = M'(MM')^{-1} d.
    const Matrix G = M * M.transpose();
    Eigen::LDLT<Matrix> ldlt(G);
    if (ldlt.info() != Eigen::Success) return out;
    const Vector w = ldlt.solve(d);
    gamma = M.transpose() * w;
    if ((M * gamma - d).lpNorm<Eigen::Infinity>() > primal_tol) return out;
    const Vector lambda = 2.0 * w;

    // Dual feasibility: inequality rows need lambda_r <= 0.
    Index worst_dual = -1;
    double worst_dual_val = dual_tol;
    for (Index r = 0; r < m; ++r) {
      if (rows[r].kind == 0) continue;
      if (lambda[r] > worst_dual_val) {
        worst_dual_val = lambda[r];
        worst_dual = r;
      }
    }
    if (worst_dual >= 0) {
      rows.erase(rows.begin() + worst_dual);
      continue;
    }

    // Primal feasibility over everything not in the active set.
    ActiveRow add;
    double worst_primal = primal_tol;
    auto consider = [&](const ActiveRow& r, double violation) {
      if (violation > worst_primal) {
        worst_primal = violation;
        add = r;
      }
    };
    const Vector gap1 = first_order_gap(t, gamma);
    for (Index j = 0; j < p; ++j) {
      consider({1, j, 0}, gap1[j] - ps.radius1);
      consider({2, j, 0}, -gap1[j] - ps.radius1);
    }
    if (ps.curvature && std::isfinite(ps.radius2)) {
      const Matrix gap2 = second_order_gap(t, Xd, gamma);
      for (Index j = 0; j < p; ++j)
        for (Index k = 0; k <= j; ++k) {
          consider({3, j, k}, gap2(j, k) - ps.radius2);
          consider({4, j, k}, -gap2(j, k) - ps.radius2);
        }
    }
    for (Index i = 0; i < n; ++i) {
      consider({5, i, 0}, gamma[i] - ps.cap);
      consider({6, i, 0}, -gamma[i]);
    }
    if (worst_primal <= primal_tol) {
      out.certified = true;
      out.gamma = std::move(gamma);
      return out;
    }
    // Guard against re-adding a row that is already present.
    bool dup = false;
    for (const ActiveRow& r : rows)
      if (r.kind == add.kind && r.j == add.j && r.k == add.k) dup = true;
    if (dup) return out;
    rows.push_back(add);
  }
  return out;
}

BalancingWeights finalize(const ProgramSpec& ps, Vector gamma, SolverReport report) {
  const BalanceTargets& t = *ps.targets;
  BalancingWeights w;
  w.sum_gamma = gamma.sum();
  w.cap = ps.cap;
  w.achieved_c1 = first_order_imbalance(t, gamma);
  w.achieved_c1_l2 = first_order_imbalance_l2(t, gamma);
  if (ps.curvature) {
    w.achieved_c2 = second_order_imbalance(t, *ps.X_donor, gamma);
    w.achieved_c2_l2 = second_order_imbalance_l2(t, *ps.X_donor, gamma);
  } else {
    w.achieved_c2 = t.second_order_target.size() > 0
                        ? t.second_order_target.cwiseAbs().maxCoeff()
                        : 0.0;
    w.achieved_c2_l2 = t.second_order_target.norm();
    // Inert curvature keeps both at zero by construction.
  }
  w.ell2_norm_sq = gamma.squaredNorm();
  const double a1 = ps.norm == ConstraintNorm::max ? w.achieved_c1 : w.achieved_c1_l2;
  const double a2 = ps.norm == ConstraintNorm::max ? w.achieved_c2 : w.achieved_c2_l2;
  report.c1_residual = std::max(0.0, a1 - ps.radius1);
  report.c2_residual = std::max(0.0, a2 - ps.radius2);
  report.radius_c1 = ps.radius1;
  report.radius_c2 = ps.radius2;
  const double tol_box = 1e-8;
  bool box_ok = true;
  for (Index i = 0; i < gamma.size(); ++i)
    if (gamma[i] < -1e-9 || gamma[i] > ps.cap + 1e-9) box_ok = false;
  const bool sum_ok = !ps.normalize || std::abs(w.sum_gamma - 1.0) <= tol_box;
  w.feasible = box_ok && sum_ok && report.c1_residual <= 1e-7 + 1e-12 &&
               report.c2_residual <= 1e-7 + 1e-12 && !report.stalled;
  w.gamma = std::move(gamma);
  w.solver_report = report;
  return w;
}

// Shared penalty-stage driver for the hard-constrained programs. A warm
// start, when given, must already lie in the box/simplex set.
BalancingWeights solve_constrained(const ProgramSpec& ps, const BalanceConfig& config,
                                   const Vector* start = nullptr) {
  const BalanceTargets& t = *ps.targets;
  const Index n = t.n_donors();
  SolverReport report;

  Vector gamma = start ? *start
                       : project_feasible(ps, Vector::Constant(n, 1.0 / static_cast<double>(n)));
  const double sigma1_sq = spectral_norm_sq(t.first_order_design);
  double sigma2_sq = 0.0;
  if (ps.curvature) {
    for (Index i = 0; i < n; ++i) {
      const double r2 = ps.X_donor->row(i).squaredNorm();
      sigma2_sq += t.second_order_weights[i] * t.second_order_weights[i] * r2 * r2;
    }
  }

  // Best feasible iterate seen anywhere, by objective. A binding curvature
  // constraint can stall the penalty stages, and a warm start from a floor
  // pass is feasible by construction; returning the best feasible point is
  // then strictly more truthful than declaring the program infeasible.
  Vector best;
  double best_obj = std::numeric_limits<double>::infinity();
  const double accept_tol = std::min(config.tol, 1e-7);
  auto offer = [&](const Vector& g) {
    const double a1 = ps.norm == ConstraintNorm::max ? first_order_imbalance(t, g)
                                                     : first_order_imbalance_l2(t, g);
    if (a1 > ps.radius1 + accept_tol) return;
    if (ps.curvature) {
      const double a2 = ps.norm == ConstraintNorm::max
                            ? second_order_imbalance(t, *ps.X_donor, g)
                            : second_order_imbalance_l2(t, *ps.X_donor, g);
      if (a2 > ps.radius2 + accept_tol) return;
    }
    const double obj = g.squaredNorm();
    if (obj < best_obj) {
      best_obj = obj;
      best = g;
    }
  };
  if (start) offer(gamma);

  // The curvature penalty costs O(n p^2) per iteration, so it stays off
  // until a stage-end check actually sees (C2) violated.
  bool c2_on = false;
  int remaining = config.max_iters;
  const int stage_budget = std::max(2000, config.max_iters / 12);
  bool done = false;
  for (int attempt = 0; attempt < 2 && !done; ++attempt) {
    double mu = 1.0;
    for (int stage = 0; stage < 17 && remaining > 0; ++stage, mu *= 0.1) {
      const double lipschitz = 2.0 * mu + 2.0 * sigma1_sq + (c2_on ? 2.0 * sigma2_sq : 0.0);
      const StageResult sr = fista_stage(ps, mu, c2_on, lipschitz, gamma,
                                         std::min(stage_budget, remaining));
      remaining -= sr.iterations;
      report.iterations += sr.iterations;
      ++report.stages;
      report.final_penalty = 1.0 / mu;

      double v1 = sr.last.viol1;
      double v2 = 0.0;
      if (ps.curvature) {
        const double a2 = ps.norm == ConstraintNorm::max
                              ? second_order_imbalance(t, *ps.X_donor, gamma)
                              : second_order_imbalance_l2(t, *ps.X_donor, gamma);
        v2 = std::max(0.0, a2 - ps.radius2);
        if (!c2_on && v2 > config.tol) {
          c2_on = true;
          mu *= 10.0;  // repeat this stage with the curvature penalty live
          --stage;
          continue;
        }
      }
      offer(gamma);
      if (v1 <= config.tol && v2 <= config.tol) {
        done = true;
        break;
      }
    }
    if (done) break;
    // Feasibility never reached: minimize pure violation (mu = 0). If that
    // point is feasible the norm bias was the obstacle; retry the stage
    // loop once from it.
    fista_stage(ps, 0.0, ps.curvature, 2.0 * sigma1_sq + 2.0 * sigma2_sq, gamma,
                std::max(2000, remaining));
    offer(gamma);
    const PenaltyEval ev = eval_program(ps, 0.0, ps.curvature, gamma, nullptr);
    report.min_violation = std::max(ev.viol1, ev.viol2);
    if (report.min_violation <= config.tol && attempt == 0) continue;
    report.stalled = best_obj == std::numeric_limits<double>::infinity();
    break;
  }

  if (!done && !report.stalled) gamma = best;
  if (!report.stalled) {
    const PolishOutcome po = polish_active_set(ps, gamma);
    if (po.certified) {
      gamma = po.gamma;
      report.polished = true;
    }
  }
  return finalize(ps, std::move(gamma), report);
}

double resolve_cap(const BalanceConfig& config, Index n, bool need_simplex) {
  const double cap = config.cap_override > 0.0
                         ? config.cap_override
                         : std::pow(static_cast<double>(n), -config.cap_exponent);
  if (!(cap > 0.0)) throw std::invalid_argument("balancer: cap must be positive");
  if (need_simplex && cap * static_cast<double>(n) < 1.0 - 1e-12)
    throw std::invalid_argument("balancer: cap * n_donors < 1, feasible set empty");
  return cap;
}

double resolve_radius1(const BalanceConfig& config, Index p, Index n) {
  if (config.radius1_override >= 0.0) return config.radius1_override;
  return config.k1 * std::sqrt(std::log(static_cast<double>(p)) / static_cast<double>(n));
}

//! Adaptive first-order radius (k1 < 0): drive the first-order gap as low
//! as the box/simplex set allows, then stand off by the |k1| margin. The
//! floor pass minimizes the squared l2 gap (zero-radius l2 hinge), which is
//! smooth, so FISTA actually reaches the floor instead of zigzagging on the
//! max coordinate; the radius is then read off in the program's own norm at
//! that point, making it feasible by construction. The attainable floor is
//! a max of centered donor sums, so the radius keeps the sqrt(log p / n)
//! order without a hand-picked constant. The floor point comes back as a
//! warm start for the norm-minimizing solve.
double adaptive_radius1(ProgramSpec ps, const BalanceConfig& config, Vector* warm) {
  ps.radius1 = 0.0;
  ps.norm = ConstraintNorm::l2;
  ps.curvature = false;  // the caller's radius2 stays in force in the main solve
  const BalanceTargets& t = *ps.targets;
  const Index n = t.n_donors();
  Vector gamma = project_feasible(ps, Vector::Constant(n, 1.0 / static_cast<double>(n)));
  const double sigma1_sq = spectral_norm_sq(t.first_order_design);
  fista_stage(ps, 0.0, false, 2.0 * sigma1_sq, gamma, std::max(3000, config.max_iters / 8));

  if (config.constraint_norm == ConstraintNorm::l2) {
    const double floor_gap = first_order_imbalance_l2(t, gamma);
    if (warm) *warm = std::move(gamma);
    return -config.k1 * floor_gap + 1e-12;
  }

  // Max-norm programs: the l2 minimizer equalizes energy, not peaks, and its
  // largest coordinate overshoots the Chebyshev floor severalfold. Continue
  // with smooth q-norm surrogates; ||g||_16 is within p^(1/16) of ||g||_inf,
  // so the witnessed floor is tight enough for the margin to absorb.
  const Matrix& A = t.first_order_design;
  auto qnorm_obj = [&](double q, const Vector& g, Vector* grad) {
    const Vector gap = t.first_order_target - A.transpose() * g;
    const double m = gap.cwiseAbs().maxCoeff();
    if (m <= 0.0) {
      if (grad) grad->setZero(g.size());
      return 0.0;
    }
    const Eigen::ArrayXd r = (gap.array() / m).abs();
    const double s = r.pow(q).sum();
    const double nrm = m * std::pow(s, 1.0 / q);
    if (grad) {
      // d||gap||_q / d gap_j = (|gap_j| / ||gap||_q)^(q-1) sign(gap_j)
      const Eigen::ArrayXd d =
          (r * (m / nrm)).pow(q - 1.0) * gap.array().sign();
      *grad = -2.0 * nrm * (A * d.matrix());
    }
    return nrm * nrm;
  };
  for (double q : {4.0, 8.0, 16.0}) {
    double L = 2.0 * (q - 1.0) * sigma1_sq;
    Vector x = gamma, v = gamma, grad(n);
    double theta = 1.0;
    double f = qnorm_obj(q, x, &grad);
    for (int it = 0; it < 500; ++it) {
      const Vector y = x + theta * (v - x);
      const double fy = qnorm_obj(q, y, &grad);
      Vector x_new = project_feasible(ps, y - grad / L);
      const double f_new = qnorm_obj(q, x_new, nullptr);
      const Vector d = x_new - y;
      if (f_new > fy + grad.dot(d) + 0.5 * L * d.squaredNorm() + 1e-15 * std::abs(fy)) {
        L *= 2.0;
        continue;
      }
      if (f_new > f) {  // monotone restart
        v = x;
        theta = 1.0;
        continue;
      }
      v = x + (x_new - x) / theta;
      x = std::move(x_new);
      const double improve = f - f_new;
      f = f_new;
      theta = 0.5 * (std::sqrt(theta * theta * (theta * theta + 4.0)) - theta * theta);
      if (it > 8 && improve < 1e-12 * (1.0 + f)) break;
    }
    gamma = std::move(x);
  }
  const double floor_gap = first_order_imbalance(t, gamma);
  if (warm) *warm = std::move(gamma);
  return -config.k1 * floor_gap + 1e-12;
}

//! Largest squared singular value of the map gamma -> curvature moment
//! matrix, by power iteration with the same O(n p^2) kernels the solver uses.
double curvature_norm_sq(const BalanceTargets& t, const Matrix& X) {
  const Index n = X.rows();
  if (n == 0 || t.curvature_inert()) return 0.0;
  Vector u = Vector::Ones(n);
  for (Index i = 0; i < n; ++i) u[i] += 1e-3 * static_cast<double>(i % 7);
  u.normalize();
  double lam = 0.0;
  for (int it = 0; it < 40; ++it) {
    const Matrix M =
        X.transpose() * u.cwiseProduct(t.second_order_weights).asDiagonal() * X;
    Vector v = rowwise_dot(X * M, X).cwiseProduct(t.second_order_weights);
    const double nv = v.norm();
    if (nv == 0.0) return 0.0;
    v /= nv;
    const Matrix Mv =
        X.transpose() * v.cwiseProduct(t.second_order_weights).asDiagonal() * X;
    const double lam_new = Mv.squaredNorm();
    if (std::abs(lam_new - lam) <= 1e-9 * std::max(1.0, lam_new)) return lam_new;
    lam = lam_new;
    u = std::move(v);
  }
  return lam;
}

//! Smallest curvature gap attainable subject to (C1) at ps.radius1, witnessed
//! by a phase-1 pass: radius2 = 0 turns the max-mode hinge into the summed
//! squared gap, so fista_stage minimizes ||curvature gap||_F^2 + (C1)
//! violation^2 directly; q-norm refinement then drives the peak entry down.
double adaptive_radius2(const ProgramSpec& ps_main, const BalanceConfig& config,
                        Vector* warm) {
  ProgramSpec ps = ps_main;
  ps.radius2 = 0.0;
  const BalanceTargets& t = *ps.targets;
  const Matrix& X = *ps.X_donor;
  const Index n = t.n_donors();
  Vector gamma = warm && warm->size() == n
                     ? *warm
                     : project_feasible(ps, Vector::Constant(n, 1.0 / static_cast<double>(n)));
  const double sigma1_sq = spectral_norm_sq(t.first_order_design);
  const double sigma2_sq = curvature_norm_sq(t, X);
  fista_stage(ps, 0.0, true, 2.0 * sigma1_sq + 2.0 * sigma2_sq, gamma,
              std::max(1500, config.max_iters / 16));

  if (ps.norm == ConstraintNorm::l2) {
    const double floor_gap = second_order_imbalance_l2(t, X, gamma);
    if (warm) *warm = std::move(gamma);
    return config.k2_floor_margin * floor_gap + 1e-12;
  }

  auto obj = [&](double q, const Vector& g, Vector* grad) {
    double val = 0.0;
    if (grad) grad->setZero(n);
    const Vector gap1 = first_order_gap(t, g);
    Vector s = Vector::Zero(gap1.size());
    bool any1 = false;
    for (Index j = 0; j < gap1.size(); ++j) {
      const double h = std::abs(gap1[j]) - ps.radius1;
      if (h > 0.0) {
        val += h * h;
        if (grad) s[j] = 2.0 * h * (gap1[j] > 0.0 ? 1.0 : -1.0);
        any1 = true;
      }
    }
    if (grad && any1) *grad -= t.first_order_design * s;

    const Matrix gap2 = second_order_gap(t, X, g);
    const double m = gap2.cwiseAbs().maxCoeff();
    if (m > 0.0) {
      const Eigen::ArrayXXd r = (gap2.array() / m).abs();
      const double sum_q = r.pow(q).sum();
      const double nrm = m * std::pow(sum_q, 1.0 / q);
      val += nrm * nrm;
      if (grad) {
        const Matrix H = (2.0 * nrm) *
                         ((r * (m / nrm)).pow(q - 1.0) * gap2.array().sign()).matrix();
        *grad -= rowwise_dot(X * H, X).cwiseProduct(t.second_order_weights);
      }
    }
    return val;
  };
  for (double q : {4.0, 8.0, 16.0}) {
    double L = 2.0 * sigma1_sq + 2.0 * (q - 1.0) * sigma2_sq;
    Vector x = gamma, v = gamma, grad(n);
    double theta = 1.0;
    double f = obj(q, x, &grad);
    for (int it = 0; it < 400; ++it) {
      const Vector y = x + theta * (v - x);
      const double fy = obj(q, y, &grad);
      Vector x_new = project_feasible(ps, y - grad / L);
      const double f_new = obj(q, x_new, nullptr);
      const Vector d = x_new - y;
      if (f_new > fy + grad.dot(d) + 0.5 * L * d.squaredNorm() + 1e-15 * std::abs(fy)) {
        L *= 2.0;
        continue;
      }
      if (f_new > f) {
        v = x;
        theta = 1.0;
        continue;
      }
      v = x + (x_new - x) / theta;
      x = std::move(x_new);
      const double improve = f - f_new;
      f = f_new;
      theta = 0.5 * (std::sqrt(theta * theta * (theta * theta + 4.0)) - theta * theta);
      if (it > 8 && improve < 1e-12 * (1.0 + f)) break;
    }
    gamma = std::move(x);
  }
  // The q-norm pass may float slightly outside (C1), which makes its floor
  // optimistic. Certify the radius by phase-1 feasibility restoration and
  // inflate to the restored point's own gap until both constraints clear;
  // the witness doubles as a feasible warm start for the main solve.
  double rho = config.k2_floor_margin * second_order_imbalance(t, X, gamma) + 1e-12;
  const double lipschitz = 2.0 * sigma1_sq + 2.0 * sigma2_sq;
  for (int round = 0; round < 6; ++round) {
    ps.radius2 = rho;
    fista_stage(ps, 0.0, true, lipschitz, gamma, std::max(2500, config.max_iters / 8));
    const double a1 = ps.norm == ConstraintNorm::max ? first_order_imbalance(t, gamma)
                                                     : first_order_imbalance_l2(t, gamma);
    const double a2 = second_order_imbalance(t, X, gamma);
    if (a1 <= ps.radius1 + 0.5 * config.tol && a2 <= rho + 0.5 * config.tol) break;
    rho = std::max(a2 + 1e-9, rho * 1.05);
  }
  if (warm) *warm = std::move(gamma);
  return rho;
}

double resolve_radius2(const BalanceConfig& config, const BalanceTargets& targets) {
  if (config.radius2_override >= 0.0) return config.radius2_override;
  if (config.k2 >= 0.0) return config.k2;
  const double mx = targets.second_order_target.size() > 0
                        ? targets.second_order_target.cwiseAbs().maxCoeff()
                        : 0.0;
  return -config.k2 * mx;
}

void check_second_order_scale(const BalanceConfig& config, const BalanceTargets& targets) {
  if (!targets.curvature_inert() && targets.dim() > config.max_p_second_order)
    throw std::invalid_argument("balancer: p exceeds max_p_second_order for the p x p mode");
}

}  // namespace

bool BalanceTargets::curvature_inert() const {
  return second_order_weights.isZero(0.0) && second_order_target.isZero(0.0);
}

BalanceTargets build_targets(const Matrix& X_target, const Matrix& X_donor,
                             const Vector& beta_hat, const LinkSpec& link) {
  if (X_target.cols() != beta_hat.size() || X_donor.cols() != beta_hat.size())
    throw std::invalid_argument("build_targets: column counts do not match beta length");
  if (X_target.rows() == 0 || X_donor.rows() == 0)
    throw std::invalid_argument("build_targets: empty target or donor sample");
  BalanceTargets t;
  const Index p = beta_hat.size();
  const double inv_nt = 1.0 / static_cast<double>(X_target.rows());

  const Vector z_t = X_target * beta_hat;
  const Vector psi1_t = link.apply(z_t, 1);
  t.first_order_target = inv_nt * (X_target.transpose() * psi1_t);

  const Vector z_c = X_donor * beta_hat;
  const Vector psi1_c = link.apply(z_c, 1);
  t.first_order_design = psi1_c.asDiagonal() * X_donor;

  // The curvature target lives in p x p form; the Kronecker vectorization is
  // never materialized. Links without curvature keep the whole block zero.
  if (link.has_curvature()) {
    const Vector psi2_t = link.apply(z_t, 2);
    t.second_order_target =
        inv_nt * (X_target.transpose() * psi2_t.asDiagonal() * X_target);
    t.second_order_weights = link.apply(z_c, 2);
  } else {
    t.second_order_target = Matrix::Zero(p, p);
    t.second_order_weights = Vector::Zero(X_donor.rows());
  }
  return t;
}

double first_order_imbalance(const BalanceTargets& targets, const Vector& gamma) {
  if (gamma.size() != targets.n_donors())
    throw std::invalid_argument("first_order_imbalance: gamma length mismatch");
  return first_order_gap(targets, gamma).lpNorm<Eigen::Infinity>();
}

double first_order_imbalance_l2(const BalanceTargets& targets, const Vector& gamma) {
  if (gamma.size() != targets.n_donors())
    throw std::invalid_argument("first_order_imbalance: gamma length mismatch");
  return first_order_gap(targets, gamma).norm();
}

double second_order_imbalance(const BalanceTargets& targets, const Matrix& X_donor,
                              const Vector& gamma) {
  if (gamma.size() != targets.n_donors())
    throw std::invalid_argument("second_order_imbalance: gamma length mismatch");
  const Matrix gap = second_order_gap(targets, X_donor, gamma);
  return gap.size() > 0 ? gap.cwiseAbs().maxCoeff() : 0.0;
}

double second_order_imbalance_l2(const BalanceTargets& targets, const Matrix& X_donor,
                                 const Vector& gamma) {
  if (gamma.size() != targets.n_donors())
    throw std::invalid_argument("second_order_imbalance: gamma length mismatch");
  return second_order_gap(targets, X_donor, gamma).norm();
}

Vector project_capped_simplex(const Vector& v, double cap) {
  const Index n = v.size();
  if (!(cap > 0.0)) throw std::invalid_argument("project_capped_simplex: cap must be > 0");
  if (cap * static_cast<double>(n) < 1.0 - 1e-12)
    throw std::invalid_argument("project_capped_simplex: cap * n < 1, set is empty");
  if (n == 0) throw std::invalid_argument("project_capped_simplex: empty vector");

  // gamma_i(tau) = clamp(v_i - tau, 0, cap); g(tau) = sum gamma_i(tau) is
  // piecewise linear and nonincreasing with breakpoints at v_i and v_i - cap.
  std::vector<double> vs(v.data(), v.data() + n);
  std::sort(vs.begin(), vs.end(), std::greater<double>());
  std::vector<double> prefix(n + 1, 0.0);
  for (Index i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + vs[i];

  auto mass_at = [&](double tau) {
    // Entries with v >= tau + cap sit at the cap; entries with v > tau are
    // interior. vs is sorted descending.
    const auto sat_end = std::lower_bound(vs.begin(), vs.end(), tau + cap,
                                          std::greater<double>());
    const auto act_end = std::upper_bound(vs.begin(), vs.end(), tau,
                                          std::greater<double>());
    const Index n_sat = sat_end - vs.begin();
    const Index n_act = std::max<Index>(0, (act_end - vs.begin()) - n_sat);
    const double active_sum = prefix[n_sat + n_act] - prefix[n_sat];
    return cap * static_cast<double>(n_sat) + active_sum -
           static_cast<double>(n_act) * tau;
  };

  std::vector<double> brk;
  brk.reserve(2 * n);
  for (double x : vs) {
    brk.push_back(x);
    brk.push_back(x - cap);
  }
  std::sort(brk.begin(), brk.end());
  brk.erase(std::unique(brk.begin(), brk.end()), brk.end());

  // Locate the segment where g crosses 1, then solve the linear piece.
  double tau;
  if (mass_at(brk.front()) <= 1.0) {
    // Everything saturates: cap * n == 1 within tolerance.
    tau = brk.front() - 1.0;
  } else if (mass_at(brk.back()) >= 1.0) {
    tau = brk.back();
  } else {
    size_t lo = 0, hi = brk.size() - 1;  // g(brk[lo]) > 1 >= g(brk[hi])
    while (hi - lo > 1) {
      const size_t mid = (lo + hi) / 2;
      (mass_at(brk[mid]) > 1.0 ? lo : hi) = mid;
    }
    const double g_lo = mass_at(brk[lo]);
    // Within (brk[lo], brk[hi]) the counts are constant; interpolate.
    const double tau_probe = 0.5 * (brk[lo] + brk[hi]);
    const auto sat_end = std::lower_bound(vs.begin(), vs.end(), tau_probe + cap,
                                          std::greater<double>());
    const auto act_end = std::upper_bound(vs.begin(), vs.end(), tau_probe,
                                          std::greater<double>());
    const Index n_sat = sat_end - vs.begin();
    const Index n_act = std::max<Index>(0, (act_end - vs.begin()) - n_sat);
    if (n_act == 0) {
      tau = brk[hi];  // flat piece: g is already 1 on the whole segment
    } else {
      // g(tau) = g(brk[lo]) - n_act * (tau - brk[lo]) = 1.
      tau = brk[lo] + (g_lo - 1.0) / static_cast<double>(n_act);
    }
  }
  Vector out(n);
  for (Index i = 0; i < n; ++i) out[i] = std::clamp(v[i] - tau, 0.0, cap);
  return out;
}

BalancingWeights solve_weights_hard(const BalanceTargets& targets, const Matrix& X_donor,
                                    const BalanceConfig& config) {
  check_inputs(targets, X_donor);
  check_second_order_scale(config, targets);
  ProgramSpec ps;
  ps.targets = &targets;
  ps.X_donor = &X_donor;
  ps.cap = resolve_cap(config, targets.n_donors(), config.normalize);
  ps.normalize = config.normalize;
  ps.norm = config.constraint_norm;
  ps.curvature = !targets.curvature_inert();
  ps.radius2 = resolve_radius2(config, targets);
  Vector warm;
  bool warmed = false;
  if (config.radius1_override < 0.0 && config.k1 < 0.0) {
    ps.radius1 = adaptive_radius1(ps, config, &warm);
    warmed = true;
  } else {
    ps.radius1 = resolve_radius1(config, targets.dim(), targets.n_donors());
  }
  if (ps.curvature && config.radius2_override < 0.0 && config.k2_floor_margin > 0.0) {
    ps.radius2 = adaptive_radius2(ps, config, &warm);
    warmed = true;
  }
  return solve_constrained(ps, config, warmed ? &warm : nullptr);
}

BalancingWeights solve_weights_l2(const BalanceTargets& targets, const Matrix& X_donor,
                                  const BalanceConfig& config) {
  check_inputs(targets, X_donor);
  check_second_order_scale(config, targets);
  if (config.r1 < 0.0 || config.r2 < 0.0)
    throw std::invalid_argument("solve_weights_l2: r1, r2 must be >= 0");
  ProgramSpec ps;
  ps.targets = &targets;
  ps.X_donor = &X_donor;
  ps.cap = resolve_cap(config, targets.n_donors(), config.normalize);
  ps.normalize = config.normalize;
  ps.norm = ConstraintNorm::l2;
  ps.curvature = !targets.curvature_inert();

  double b_x = config.b_x;
  if (b_x <= 0.0) {
    // sqrt of the trace of the donors' sample covariance.
    const Vector mean = X_donor.colwise().mean();
    const Matrix centered = X_donor.rowwise() - mean.transpose();
    const double denom = std::max<double>(1.0, X_donor.rows() - 1);
    b_x = std::sqrt(centered.squaredNorm() / denom);
  }
  const double n_donors = static_cast<double>(targets.n_donors());
  const double p = static_cast<double>(targets.dim());
  if (config.radius2_override >= 0.0) {
    ps.radius2 = config.radius2_override;
  } else {
    const double base = config.k2 >= 0.0 ? config.k2
                                         : -config.k2 * (targets.second_order_target.size() > 0
                                                             ? targets.second_order_target
                                                                   .cwiseAbs()
                                                                   .maxCoeff()
                                                             : 0.0);
    ps.radius2 = base + config.c2 * b_x * b_x * config.r2;
  }
  if (config.radius1_override >= 0.0) {
    ps.radius1 = config.radius1_override;
  } else if (config.k1 < 0.0) {
    // Adaptive base radius, inflated by the derivative-estimation allowance.
    Vector warm;
    ps.radius1 = adaptive_radius1(ps, config, &warm) + config.c1 * b_x * config.r1;
    return solve_constrained(ps, config, &warm);
  } else {
    ps.radius1 = config.k1 * std::sqrt(static_cast<double>(config.k_sparsity) *
                                       std::log(p) / n_donors) +
                 config.c1 * b_x * config.r1;
  }
  return solve_constrained(ps, config);
}

BalancingWeights solve_weights_support_restricted(const BalanceTargets& targets,
                                                  const Matrix& X_donor,
                                                  const std::vector<Index>& support,
                                                  const BalanceConfig& config) {
  check_inputs(targets, X_donor);
  if (support.empty())
    throw std::invalid_argument("solve_weights_support_restricted: empty support");
  for (Index j : support)
    if (j < 0 || j >= targets.dim())
      throw std::invalid_argument("solve_weights_support_restricted: index out of range");

  // Restrict the first-order system to the support and disable curvature;
  // the radius keeps the full-p log factor.
  BalanceTargets sub;
  const Index s = static_cast<Index>(support.size());
  sub.first_order_target.resize(s);
  sub.first_order_design.resize(targets.n_donors(), s);
  for (Index a = 0; a < s; ++a) {
    sub.first_order_target[a] = targets.first_order_target[support[a]];
    sub.first_order_design.col(a) = targets.first_order_design.col(support[a]);
  }
  sub.second_order_target = Matrix::Zero(s, s);
  sub.second_order_weights = Vector::Zero(targets.n_donors());

  Matrix Xd_sub(X_donor.rows(), s);
  for (Index a = 0; a < s; ++a) Xd_sub.col(a) = X_donor.col(support[a]);

  ProgramSpec ps;
  ps.targets = &sub;
  ps.X_donor = &Xd_sub;
  ps.cap = resolve_cap(config, targets.n_donors(), config.normalize);
  ps.normalize = config.normalize;
  ps.norm = config.constraint_norm;
  ps.curvature = false;
  ps.radius2 = kInf;
  if (config.radius1_override < 0.0 && config.k1 < 0.0) {
    Vector warm;
    ps.radius1 = adaptive_radius1(ps, config, &warm);
    return solve_constrained(ps, config, &warm);
  }
  ps.radius1 = resolve_radius1(config, targets.dim(), targets.n_donors());
  return solve_constrained(ps, config);
}

BalancingWeights solve_weights_penalized(const BalanceTargets& targets, const Matrix& X_donor,
                                         const BalanceConfig& config) {
  check_inputs(targets, X_donor);
  check_second_order_scale(config, targets);
  if (config.zeta < 0.0 || config.zeta > 1.0 || config.eta < 0.0 || config.eta > 1.0)
    throw std::invalid_argument("solve_weights_penalized: zeta, eta must lie in [0,1]");
  const Index n = targets.n_donors();
  const double cap = resolve_cap(config, n, true);
  const bool curved = !targets.curvature_inert();

  auto objective = [&](const Vector& g, Vector* grad) {
    if (grad) *grad = 2.0 * (1.0 - config.zeta) * g;
    double val = (1.0 - config.zeta) * g.squaredNorm();
    const Vector gap1 = first_order_gap(targets, g);
    Index j1 = 0;
    const double m1 = gap1.size() > 0 ? gap1.cwiseAbs().maxCoeff(&j1) : 0.0;
    val += config.zeta * config.eta * m1 * m1;
    if (grad && m1 > 0.0) {
      const double sgn = gap1[j1] > 0.0 ? 1.0 : -1.0;
      *grad -= config.zeta * config.eta * 2.0 * m1 * sgn * targets.first_order_design.col(j1);
    }
    if (curved) {
      const Matrix gap2 = second_order_gap(targets, X_donor, g);
      Index r2 = 0, c2 = 0;
      const double m2 = gap2.cwiseAbs().maxCoeff(&r2, &c2);
      val += config.zeta * (1.0 - config.eta) * m2 * m2;
      if (grad && m2 > 0.0) {
        // d gap2(r2,c2) / d gamma_i = -psi''_i x_{i,r2} x_{i,c2}
        const double sgn = gap2(r2, c2) > 0.0 ? 1.0 : -1.0;
        const Vector col = (X_donor.col(r2).cwiseProduct(X_donor.col(c2)))
                               .cwiseProduct(targets.second_order_weights);
        *grad -= config.zeta * (1.0 - config.eta) * 2.0 * m2 * sgn * col;
      }
    }
    return val;
  };

  // Projected subgradient with averaging from the uniform point, so the
  // returned objective can never exceed the uniform one.
  Vector g = project_capped_simplex(Vector::Constant(n, 1.0 / static_cast<double>(n)), cap);
  Vector grad(n);
  double best_val = objective(g, nullptr);
  Vector best = g;
  Vector avg = Vector::Zero(n);
  const int iters = std::clamp(config.max_iters, 1000, 20000);
  double step0 = 0.0;
  {
    objective(g, &grad);
    step0 = 0.5 / (1.0 + grad.norm());
  }
  for (int k = 0; k < iters; ++k) {
    const double val = objective(g, &grad);
    if (val < best_val) {
      best_val = val;
      best = g;
    }
    avg += g;
    const double step = step0 / std::sqrt(static_cast<double>(k + 1));
    g = project_capped_simplex(g - step * grad, cap);
  }
  avg /= static_cast<double>(iters);
  const double avg_val = objective(avg, nullptr);
  if (avg_val < best_val) {
    best_val = avg_val;
    best = avg;
  }

  ProgramSpec ps;
  ps.targets = &targets;
  ps.X_donor = &X_donor;
  ps.cap = cap;
  ps.normalize = true;
  ps.norm = ConstraintNorm::max;
  ps.curvature = curved;
  ps.radius1 = kInf;
  ps.radius2 = kInf;
  SolverReport report;
  report.iterations = iters;
  BalancingWeights w = finalize(ps, std::move(best), report);
  w.feasible = true;  // membership constraints hold by projection
  return w;
}

BalanceReport balance_report(const BalancingWeights& weights, const BalanceTargets& targets,
                             const Matrix& X_donor) {
  BalanceReport rep;
  rep.achieved_c1 = first_order_imbalance(targets, weights.gamma);
  rep.achieved_c2 = targets.curvature_inert()
                        ? 0.0
                        : second_order_imbalance(targets, X_donor, weights.gamma);
  rep.gamma_max = weights.gamma.size() > 0
                      ? weights.gamma.lpNorm<Eigen::Infinity>()
                      : 0.0;
  rep.ell2_norm_sq = weights.gamma.squaredNorm();
  rep.ess = rep.ell2_norm_sq > 0.0 ? 1.0 / rep.ell2_norm_sq : 0.0;
  const Vector gap = first_order_gap(targets, weights.gamma);
  std::vector<Index> order(gap.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(),
            [&](Index a, Index b) { return std::abs(gap[a]) > std::abs(gap[b]); });
  const Index top = std::min<Index>(10, gap.size());
  for (Index i = 0; i < top; ++i)
    rep.worst_coordinates.emplace_back(order[i], std::abs(gap[order[i]]));
  return rep;
}

}  // namespace narb
