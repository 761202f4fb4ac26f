#include "narb/smoother.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "narb/math_util.hpp"

namespace narb {

namespace {

constexpr double kRidge = 1e-10;

double epanechnikov(double u) {
  const double a = std::abs(u);
  return a < 1.0 ? 0.75 * (1.0 - a * a) : 0.0;
}

double sample_sd(const Vector& z) {
  const Index n = z.size();
  const double mean = z.mean();
  double ss = 0.0;
  for (Index i = 0; i < n; ++i) ss += (z[i] - mean) * (z[i] - mean);
  return std::sqrt(ss / static_cast<double>(n - 1));
}

double rule_of_thumb(const Vector& z, int degree) {
  const double sd = sample_sd(z);
  const double n = static_cast<double>(z.size());
  return 1.5 * sd * std::pow(n, -1.0 / (2.0 * degree + 3.0));
}

// Weighted local polynomial solve around z0 in the scaled basis
// ((z-z0)/h)^j. Returns coefficients of that basis; the window is doubled
// until at least degree+1 points carry positive kernel weight.
struct LocalSolve {
  Eigen::VectorXd coef;
  int widenings = 0;
  double h_used = 0.0;
};

LocalSolve solve_local(const Vector& z, const Vector& y, double z0, double h,
                       int degree, Index skip = -1) {
  const Index n = z.size();
  const int q = degree + 1;
  double h_cur = h;
  int widen = 0;
  for (;;) {
    // z is sorted, so the window is a contiguous run.
    const double lo = z0 - h_cur, hi = z0 + h_cur;
    const auto* base = z.data();
    Index first = std::lower_bound(base, base + n, lo) - base;
    Index last = std::upper_bound(base, base + n, hi) - base;
    int usable = 0;
    for (Index i = first; i < last; ++i) {
      if (i == skip) continue;
      if (std::abs((z[i] - z0) / h_cur) < 1.0) ++usable;
    }
    if (usable < q) {
      h_cur *= 2.0;
      ++widen;
      if (widen > 200) throw std::runtime_error("local fit window never filled");
      continue;
    }
    Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(q, q);
    Eigen::VectorXd xty = Eigen::VectorXd::Zero(q);
    Eigen::VectorXd basis(q);
    for (Index i = first; i < last; ++i) {
      if (i == skip) continue;
      const double u = (z[i] - z0) / h_cur;
      const double w = epanechnikov(u);
      if (w <= 0.0) continue;
      basis[0] = 1.0;
      for (int j = 1; j < q; ++j) basis[j] = basis[j - 1] * u;
      xtx.selfadjointView<Eigen::Lower>().rankUpdate(basis, w);
      xty += w * basis * y[i];
    }
    xtx = xtx.selfadjointView<Eigen::Lower>();
    xtx.diagonal().array() += kRidge;
    return {Eigen::LDLT<Eigen::MatrixXd>(xtx).solve(xty), widen, h_cur};
  }
}

}  // namespace

SmootherFit::SmootherFit(Vector z, Vector y, int degree, double bandwidth)
    : degree_(degree), bandwidth_(bandwidth) {
  if (z.size() != y.size()) throw std::invalid_argument("smoother: z and y length mismatch");
  if (z.size() < degree + 2) throw std::invalid_argument("smoother: need at least degree+2 points");
  if (degree < 3) throw std::invalid_argument("smoother: degree must be >= 3");
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth))
    throw std::invalid_argument("smoother: bandwidth must be positive and finite");
  if (!all_finite(z) || !all_finite(y))
    throw std::invalid_argument("smoother: non-finite input");
  // Sort once by z; evaluation then works on contiguous windows.
  const Index n = z.size();
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return z[a] < z[b]; });
  z_.resize(n);
  y_.resize(n);
  for (Index i = 0; i < n; ++i) {
    z_[i] = z[order[i]];
    y_[i] = y[order[i]];
  }
  z_min_ = z_[0];
  z_max_ = z_[n - 1];
  if (!(z_max_ > z_min_)) throw std::invalid_argument("smoother: z has zero spread");
}

SmootherFit::Eval SmootherFit::evaluate_info(double z, int order) const {
  if (order < 0 || order > degree_ - 1)
    throw std::invalid_argument("smoother: derivative order must lie in [0, degree-1]");
  if (!std::isfinite(z)) throw std::invalid_argument("smoother: non-finite query point");
  Eval out;
  double zq = z;
  if (zq < z_min_) {
    zq = z_min_;
    out.clamped = true;
  } else if (zq > z_max_) {
    zq = z_max_;
    out.clamped = true;
  }
  const LocalSolve ls = solve_local(z_, y_, zq, bandwidth_, degree_);
  out.widenings = ls.widenings;
  if (out.clamped) clamp_count_.fetch_add(1, std::memory_order_relaxed);
  if (ls.widenings) widen_count_.fetch_add(ls.widenings, std::memory_order_relaxed);
  // Scaled-basis coefficient c_r estimates psi^(r)(z0) * h^r / r!.
  double fact = 1.0;
  for (int r = 2; r <= order; ++r) fact *= r;
  out.value = ls.coef[order] * fact / std::pow(ls.h_used, order);
  return out;
}

std::shared_ptr<const SmootherFit> fit_local_poly(const Vector& z, const Vector& y,
                                                  int degree, double bandwidth) {
  const double h = bandwidth > 0.0 ? bandwidth : rule_of_thumb(z, degree);
  return std::make_shared<const SmootherFit>(z, y, degree, h);
}

double eval_derivative(const SmootherFit& fit, double z, int order) {
  return fit.evaluate(z, order);
}

double select_bandwidth(const Vector& z, const Vector& y, int degree,
                        BandwidthMethod method) {
  if (z.size() != y.size()) throw std::invalid_argument("smoother: z and y length mismatch");
  if (z.size() < degree + 2) throw std::invalid_argument("smoother: too few points");
  const double h0 = rule_of_thumb(z, degree);
  if (method == BandwidthMethod::rule_of_thumb) return h0;

  // Leave-one-out CV of the degree-0 prediction over a geometric grid
  // spanning [h0/4, 4*h0]. O(n^2) per grid point; intended for the modest
  // sample sizes the index-regression stage sees.
  const Index n = z.size();
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return z[a] < z[b]; });
  Vector zs(n), ys(n);
  for (Index i = 0; i < n; ++i) {
    zs[i] = z[order[i]];
    ys[i] = y[order[i]];
  }
  const int grid = 12;
  double best_h = h0, best_score = std::numeric_limits<double>::infinity();
  for (int g = 0; g < grid; ++g) {
    const double h = h0 * 0.25 * std::pow(16.0, g / (grid - 1.0));
    double sse = 0.0;
    for (Index i = 0; i < n; ++i) {
      const LocalSolve ls = solve_local(zs, ys, zs[i], h, degree, i);
      const double pred = ls.coef[0];
      sse += (ys[i] - pred) * (ys[i] - pred);
    }
    if (sse < best_score) {
      best_score = sse;
      best_h = h;
    }
  }
  return best_h;
}

}  // namespace narb
