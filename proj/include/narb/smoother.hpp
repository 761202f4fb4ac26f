#pragma once

#include <atomic>
#include <cstdint>
#include <memory>

#include "narb/types.hpp"

namespace narb {

//! Local polynomial regression of y on a scalar index z with the
//! Epanechnikov kernel. A fit is immutable after construction and safe to
//! evaluate concurrently; derivative queries up to degree()-1 read the local
//! polynomial coefficients scaled by r!.
class SmootherFit {
 public:
  //! Fits are built through fit_local_poly; see below.
  SmootherFit(Vector z, Vector y, int degree, double bandwidth);

  struct Eval {
    double value = 0.0;
    bool clamped = false;    // query fell outside [min z, max z]
    int widenings = 0;       // window doublings needed at this query
  };

  //! Value of the r-th derivative estimate at z (r = 0 is the fit itself).
  double evaluate(double z, int order) const { return evaluate_info(z, order).value; }
  Eval evaluate_info(double z, int order) const;

  int degree() const { return degree_; }
  double bandwidth() const { return bandwidth_; }
  double domain_lo() const { return z_min_; }
  double domain_hi() const { return z_max_; }
  Index sample_size() const { return z_.size(); }

  //! Cumulative counters across all evaluations (diagnostics only).
  long total_widenings() const { return widen_count_.load(); }
  long total_clamped() const { return clamp_count_.load(); }

 private:
  Vector z_;        // sorted ascending
  Vector y_;        // reordered to match z_
  int degree_;
  double bandwidth_;
  double z_min_, z_max_;
  mutable std::atomic<long> widen_count_{0};
  mutable std::atomic<long> clamp_count_{0};
};

//! Fit a degree >= 3 local polynomial; bandwidth <= 0 selects the
//! rule-of-thumb value 1.5 * sd(z) * n^(-1/(2*degree+3)).
std::shared_ptr<const SmootherFit> fit_local_poly(const Vector& z, const Vector& y,
                                                  int degree, double bandwidth);

//! r-th derivative of the smoothed regression function at z.
double eval_derivative(const SmootherFit& fit, double z, int order);

enum class BandwidthMethod { rule_of_thumb, loo_cv };

//! Bandwidth selection: the closed-form rule above, or leave-one-out CV of
//! the degree-0 fit over a 12-point geometric grid around it.
double select_bandwidth(const Vector& z, const Vector& y, int degree,
                        BandwidthMethod method);

}  // namespace narb
