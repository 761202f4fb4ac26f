#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "narb/smoother.hpp"
#include "narb/types.hpp"

namespace narb {

enum class LinkKind { identity, logistic, exponential, softplus, smoothed };

//! A scalar link function psi together with its derivatives. The four
//! built-in links carry closed-form derivatives up to order 3; a smoothed
//! link delegates to a fitted local polynomial and supports orders up to
//! its degree minus one.
class LinkSpec {
 public:
  static LinkSpec identity();
  static LinkSpec logistic();
  static LinkSpec exponential();
  static LinkSpec softplus();
  static LinkSpec from_smoother(std::shared_ptr<const SmootherFit> fit);
  //! Keys: "identity", "logistic", "exp", "softplus".
  static LinkSpec from_key(std::string_view key);

  LinkKind kind() const { return kind_; }
  const std::string& name() const { return name_; }
  //! Highest derivative order evaluate() accepts.
  int max_order() const;
  //! False for the identity link (psi'' vanishes identically).
  bool has_curvature() const { return kind_ != LinkKind::identity; }
  //! Whether derivatives come from closed forms rather than a smoother.
  bool analytic() const { return kind_ != LinkKind::smoothed; }

  //! psi^(order)(z); order 0 is psi itself.
  double evaluate(double z, int order) const;
  double value(double z) const { return evaluate(z, 0); }

  //! [psi(z), psi'(z), ..., psi^(max_order)(z)].
  std::vector<double> derivatives(double z, int max_order) const;

  //! Componentwise psi^(order) applied to an index vector.
  Vector apply(const Vector& index, int order) const;

  //! Exact sup of |psi''| (resp. |psi'''|) over the closed interval
  //! [lo, hi]. Closed-form links only; throws std::logic_error for smoothed
  //! links.
  double max_abs_second_derivative(double lo, double hi) const;
  double max_abs_third_derivative(double lo, double hi) const;

  //! Global derivative-bound descriptors (sup |psi''| and sup |psi'''| over
  //! the whole line). Informational metadata: infinite for the exponential
  //! link, NaN for smoothed links, never consulted by the solvers.
  double curvature_growth_constant() const;
  double third_derivative_growth_constant() const;

  const SmootherFit* smoother() const { return fit_.get(); }

 private:
  LinkSpec(LinkKind kind, std::string name) : kind_(kind), name_(std::move(name)) {}
  LinkKind kind_;
  std::string name_;
  std::shared_ptr<const SmootherFit> fit_;
};

}  // namespace narb
