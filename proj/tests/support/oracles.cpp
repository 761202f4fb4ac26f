#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>

namespace narb::testing {

namespace {

double clamp01(double x, double cap) { return std::min(std::max(x, 0.0), cap); }

}  // namespace

// ---------------------------------------------------------------------------
// Projection oracles

Vector project_capped_simplex_grid(const Vector& v, double cap) {
  const Index n = v.size();
  if (cap * static_cast<double>(n) < 1.0)
    throw std::invalid_argument("projection oracle: empty feasible set");
  // sum_i clamp(v_i - theta, 0, cap) is continuous and non-increasing in
  // theta; scan a grid wide enough to bracket the root, then bisect.
  auto mass = [&](double theta) {
    double s = 0.0;
    for (Index i = 0; i < n; ++i) s += clamp01(v[i] - theta, cap);
    return s;
  };
  double lo = v.minCoeff() - cap - 1.0;  // mass = n*cap >= 1
  double hi = v.maxCoeff() + 1.0;        // mass = 0
  const int grid = 4096;
  double bracket_lo = lo, bracket_hi = hi;
  double prev_theta = lo, prev_mass = mass(lo);
  for (int k = 1; k <= grid; ++k) {
    const double theta = lo + (hi - lo) * k / grid;
    const double m = mass(theta);
    if (prev_mass >= 1.0 && m <= 1.0) {
      bracket_lo = prev_theta;
      bracket_hi = theta;
      break;
    }
    prev_theta = theta;
    prev_mass = m;
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (bracket_lo + bracket_hi);
    (mass(mid) >= 1.0 ? bracket_lo : bracket_hi) = mid;
  }
  const double theta = 0.5 * (bracket_lo + bracket_hi);
  Vector g(n);
  for (Index i = 0; i < n; ++i) g[i] = clamp01(v[i] - theta, cap);
  // Flat segments of the mass function can leave a residual; spread it over
  // the interior coordinates (they all share the same multiplier).
  double resid = 1.0 - g.sum();
  if (std::abs(resid) > 1e-12) {
    std::vector<Index> interior;
    for (Index i = 0; i < n; ++i)
      if (g[i] > 1e-12 && g[i] < cap - 1e-12) interior.push_back(i);
    if (!interior.empty())
      for (Index i : interior) g[i] += resid / static_cast<double>(interior.size());
  }
  // KKT verification: one multiplier theta with
  //   g_i = 0   => v_i - theta <= 0
  //   g_i = cap => v_i - theta >= cap
  //   else      => g_i = v_i - theta.
  const double ktol = 1e-8;
  if (std::abs(g.sum() - 1.0) > ktol)
    throw std::runtime_error("projection oracle: mass constraint violated");
  for (Index i = 0; i < n; ++i) {
    const double r = v[i] - theta;
    if (g[i] <= 1e-10) {
      if (r > ktol) throw std::runtime_error("projection oracle: lower KKT violated");
    } else if (g[i] >= cap - 1e-10) {
      if (r < cap - ktol) throw std::runtime_error("projection oracle: upper KKT violated");
    } else if (std::abs(g[i] - r) > ktol) {
      throw std::runtime_error("projection oracle: interior KKT violated");
    }
  }
  return g;
}

Vector project_capped_simplex_enum(const Vector& v, double cap) {
  const Index n = v.size();
  if (n > 12) throw std::invalid_argument("enum oracle: n too large");
  if (cap * static_cast<double>(n) < 1.0)
    throw std::invalid_argument("enum oracle: empty feasible set");
  Vector best;
  double best_dist = std::numeric_limits<double>::infinity();
  std::vector<int> pat(n, 0);  // 0 lower, 1 interior, 2 upper
  const long total = static_cast<long>(std::pow(3.0, static_cast<double>(n)));
  for (long code = 0; code < total; ++code) {
    long c = code;
    int n_free = 0, n_cap = 0;
    for (Index i = 0; i < n; ++i) {
      pat[i] = static_cast<int>(c % 3);
      c /= 3;
      n_free += pat[i] == 1;
      n_cap += pat[i] == 2;
    }
    double fixed = cap * n_cap;
    double free_target = 1.0 - fixed;
    if (n_free == 0) {
      if (std::abs(free_target) > 1e-10) continue;
    } else if (free_target < -1e-12 || free_target > cap * n_free + 1e-12) {
      continue;
    }
    // Interior coordinates share one multiplier: g_i = v_i - theta.
    double theta = 0.0;
    if (n_free > 0) {
      double sv = 0.0;
      for (Index i = 0; i < n; ++i)
        if (pat[i] == 1) sv += v[i];
      theta = (sv - free_target) / n_free;
    } else {
      // Any theta separating the two groups works; pick the midpoint.
      double lo = -std::numeric_limits<double>::infinity();
      double hi = std::numeric_limits<double>::infinity();
      for (Index i = 0; i < n; ++i) {
        if (pat[i] == 0) hi = std::min(hi, v[i]);        // need v_i - theta <= 0
        if (pat[i] == 2) lo = std::max(lo, v[i] - cap);  // need v_i - theta >= cap
      }
      if (lo > hi + 1e-12) continue;
      theta = std::isinf(lo) ? hi : std::isinf(hi) ? lo : 0.5 * (lo + hi);
    }
    Vector g(n);
    bool ok = true;
    for (Index i = 0; i < n && ok; ++i) {
      const double r = v[i] - theta;
      if (pat[i] == 0) {
        g[i] = 0.0;
        ok = r <= 1e-10;
      } else if (pat[i] == 2) {
        g[i] = cap;
        ok = r >= cap - 1e-10;
      } else {
        g[i] = r;
        ok = r >= -1e-10 && r <= cap + 1e-10;
      }
    }
    if (!ok) continue;
    const double dist = (g - v).squaredNorm();
    if (dist < best_dist) {
      best_dist = dist;
      best = g;
    }
  }
  if (best.size() == 0) throw std::runtime_error("enum oracle: no KKT pattern found");
  return best;
}

// ---------------------------------------------------------------------------
// Dykstra

Vector dykstra_min_norm(const MinNormQp& qp, int sweeps, double tol) {
  const Index n = qp.n;
  const Index q = qp.rows.rows();
  Vector g = Vector::Zero(n);
  // One correction per set: index 0 is the capped simplex, 1..q the slabs.
  std::vector<Vector> corr(static_cast<size_t>(q) + 1, Vector::Zero(n));
  Vector row_norm_sq(q);
  for (Index j = 0; j < q; ++j) row_norm_sq[j] = qp.rows.row(j).squaredNorm();
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    const Vector g_before = g;
    {
      Vector z = g + corr[0];
      Vector proj = project_capped_simplex_grid(z, qp.cap);
      corr[0] = z - proj;
      g = proj;
    }
    for (Index j = 0; j < q; ++j) {
      Vector z = g + corr[static_cast<size_t>(j) + 1];
      const double r = qp.rows.row(j).dot(z) - qp.center[j];
      Vector proj = z;
      if (r > qp.radius[j])
        proj -= ((r - qp.radius[j]) / row_norm_sq[j]) * qp.rows.row(j).transpose();
      else if (r < -qp.radius[j])
        proj -= ((r + qp.radius[j]) / row_norm_sq[j]) * qp.rows.row(j).transpose();
      corr[static_cast<size_t>(j) + 1] = z - proj;
      g = proj;
    }
    if ((g - g_before).lpNorm<Eigen::Infinity>() < tol && sweep > 10) break;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Active-set oracle
//
// Constraints are held in one list, written as c_k . g <= u_k:
//   k in [0, n)       :  g_i <= cap
//   k in [n, 2n)      : -g_i <= 0
//   k in [2n, 2n+q)   :  m_j . g <= center_j + radius_j
//   k in [2n+q, 2n+2q): -m_j . g <= radius_j - center_j
// The equality sum g = 1 is always in the working set.

namespace {

struct ConstraintView {
  const MinNormQp* qp;
  Index n, q;

  double value(int k, const Vector& g) const {
    if (k < n) return g[k];
    if (k < 2 * n) return -g[k - n];
    if (k < 2 * n + q) return qp->rows.row(k - 2 * n).dot(g);
    return -qp->rows.row(k - 2 * n - q).dot(g);
  }
  double bound(int k) const {
    if (k < n) return qp->cap;
    if (k < 2 * n) return 0.0;
    if (k < 2 * n + q) return qp->center[k - 2 * n] + qp->radius[k - 2 * n];
    return qp->radius[k - 2 * n - q] - qp->center[k - 2 * n - q];
  }
  Vector normal(int k) const {
    Vector c = Vector::Zero(n);
    if (k < n)
      c[k] = 1.0;
    else if (k < 2 * n)
      c[k - n] = -1.0;
    else if (k < 2 * n + q)
      c = qp->rows.row(k - 2 * n).transpose();
    else
      c = -qp->rows.row(k - 2 * n - q).transpose();
    return c;
  }
  int count() const { return static_cast<int>(2 * n + 2 * q); }
};

}  // namespace

QpOracleResult active_set_min_norm(const MinNormQp& qp, int max_pivots) {
  const Index n = qp.n;
  const Index q = qp.rows.rows();
  ConstraintView cons{&qp, n, q};
  const double feas_tol = 1e-9;

  Vector g = dykstra_min_norm(qp);
  // Dykstra leaves O(tol) constraint slop; verify it is a usable start.
  for (int k = 0; k < cons.count(); ++k)
    if (cons.value(k, g) > cons.bound(k) + 1e-6)
      throw std::runtime_error("active-set oracle: no feasible start");

  std::vector<int> working;  // active inequality indices, equality implicit
  auto solve_eqp = [&](Vector* x, Vector* mult_ineq, double* mult_eq) {
    // minimize ||x||^2 s.t. ones.x = 1 and c_k.x = u_k for k in working.
    const int m = static_cast<int>(working.size()) + 1;
    Matrix C(m, n);
    Vector d(m);
    C.row(0).setOnes();
    d[0] = 1.0;
    for (size_t r = 0; r < working.size(); ++r) {
      C.row(static_cast<Index>(r) + 1) = cons.normal(working[r]).transpose();
      d[static_cast<Index>(r) + 1] = cons.bound(working[r]);
    }
    // Min-norm solution of C x = d, and multipliers from 2x = -C' lambda.
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(C);
    *x = cod.solve(d);
    Eigen::CompleteOrthogonalDecomposition<Matrix> codT(C.transpose());
    Vector lambda = codT.solve(-2.0 * (*x));
    *mult_eq = lambda[0];
    *mult_ineq = lambda.tail(m - 1);
  };

  QpOracleResult out;
  for (int pivot = 0; pivot < max_pivots; ++pivot) {
    Vector x, mu;
    double nu = 0.0;
    solve_eqp(&x, &mu, &nu);
    const Vector d = x - g;
    if (d.lpNorm<Eigen::Infinity>() <= 1e-11) {
      // Candidate optimum for the working set; check multiplier signs.
      int drop = -1;
      for (size_t r = 0; r < working.size(); ++r) {
        if (mu[static_cast<Index>(r)] < -1e-9) {
          if (drop == -1 || working[r] < working[static_cast<size_t>(drop)] )
            drop = static_cast<int>(r);
        }
      }
      if (drop >= 0) {
        working.erase(working.begin() + drop);
        ++out.pivots;
        continue;
      }
      // Full KKT verification against every constraint.
      bool ok = std::abs(g.sum() - 1.0) <= feas_tol;
      for (int k = 0; ok && k < cons.count(); ++k)
        ok = cons.value(k, g) <= cons.bound(k) + feas_tol;
      Vector grad_residual = 2.0 * g + nu * Vector::Ones(n);
      for (size_t r = 0; r < working.size(); ++r)
        grad_residual += mu[static_cast<Index>(r)] * cons.normal(working[r]);
      ok = ok && grad_residual.lpNorm<Eigen::Infinity>() <= 1e-7;
      out.g = g;
      out.objective = g.squaredNorm();
      out.certified = ok;
      if (!ok) throw std::runtime_error("active-set oracle: KKT verification failed");
      return out;
    }
    // Line search toward x over the constraints not in the working set.
    double alpha = 1.0;
    int blocker = -1;
    for (int k = 0; k < cons.count(); ++k) {
      if (std::find(working.begin(), working.end(), k) != working.end()) continue;
      const double cd = cons.normal(k).dot(d);
      if (cd <= 1e-13) continue;
      const double room = cons.bound(k) - cons.value(k, g);
      const double a = std::max(room, 0.0) / cd;
      if (a < alpha - 1e-15 || (a < alpha + 1e-15 && (blocker == -1 || k < blocker))) {
        alpha = std::min(a, alpha);
        blocker = k;
      }
    }
    g += alpha * d;
    if (blocker >= 0 && alpha < 1.0 - 1e-13) {
      working.push_back(blocker);
      std::sort(working.begin(), working.end());
    }
    ++out.pivots;
  }
  throw std::runtime_error("active-set oracle: pivot budget exhausted");
}

MinNormQp qp_from_balance(const BalanceTargets& targets, const Matrix& X_donor,
                          double radius1, double radius2, double cap,
                          bool with_curvature) {
  const Index n = targets.n_donors();
  const Index p = targets.dim();
  const Index q1 = p;
  const Index q2 = with_curvature ? p * (p + 1) / 2 : 0;
  MinNormQp qp;
  qp.n = n;
  qp.cap = cap;
  qp.rows.resize(q1 + q2, n);
  qp.center.resize(q1 + q2);
  qp.radius.resize(q1 + q2);
  for (Index j = 0; j < p; ++j) {
    qp.rows.row(j) = targets.first_order_design.col(j).transpose();
    qp.center[j] = targets.first_order_target[j];
    qp.radius[j] = radius1;
  }
  if (with_curvature) {
    Index r = q1;
    for (Index j = 0; j < p; ++j) {
      for (Index l = j; l < p; ++l) {
        qp.rows.row(r) = (X_donor.col(j).array() * X_donor.col(l).array() *
                          targets.second_order_weights.array())
                             .transpose();
        qp.center[r] = targets.second_order_target(j, l);
        qp.radius[r] = radius2;
        ++r;
      }
    }
  }
  return qp;
}

// ---------------------------------------------------------------------------
// Coordinate-descent lasso

Vector cd_lasso(const Matrix& X, const Vector& y, double lambda, int max_sweeps,
                double tol) {
  const Index n = X.rows(), p = X.cols();
  Vector b = Vector::Zero(p);
  Vector r = y;  // residual y - X b
  Vector col_sq(p);
  for (Index j = 0; j < p; ++j) col_sq[j] = X.col(j).squaredNorm() / n;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double max_change = 0.0;
    for (Index j = 0; j < p; ++j) {
      if (col_sq[j] <= 0.0) continue;
      const double old = b[j];
      const double rho = X.col(j).dot(r) / n + col_sq[j] * old;
      const double s = std::abs(rho) <= lambda ? 0.0
                                               : (rho > 0 ? rho - lambda : rho + lambda);
      const double next = s / col_sq[j];
      if (next != old) {
        r += X.col(j) * (old - next);
        b[j] = next;
        max_change = std::max(max_change, std::abs(next - old));
      }
    }
    if (max_change < tol) break;
  }
  return b;
}

double lasso_objective(const Matrix& X, const Vector& y, double lambda, const Vector& b) {
  const double n = static_cast<double>(X.rows());
  return (y - X * b).squaredNorm() / (2.0 * n) + lambda * b.lpNorm<1>();
}

// ---------------------------------------------------------------------------
// Helpers

Vector randn_vector(Index n, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = gauss(rng);
  return v;
}

Matrix randn_matrix(Index n, Index p, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix m(n, p);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < p; ++j) m(i, j) = gauss(rng);
  return m;
}

Vector random_capped_simplex_point(Index n, double cap, Rng& rng) {
  Vector v = randn_vector(n, rng);
  v = (v.array() / 3.0).exp();
  v /= v.sum();
  return project_capped_simplex_grid(v, cap);
}

}  // namespace narb::testing
