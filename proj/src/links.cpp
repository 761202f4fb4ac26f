#include "narb/links.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace narb {

namespace {

// Overflow-safe sigmoid and softplus.
double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus_val(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

double logistic_deriv(double z, int order) {
  const double s = sigmoid(z);
  const double s1 = s * (1.0 - s);
  switch (order) {
    case 0: return s;
    case 1: return s1;
    case 2: return s1 * (1.0 - 2.0 * s);
    case 3: return s1 * (1.0 - 6.0 * s + 6.0 * s * s);
  }
  throw std::invalid_argument("link: derivative order out of range");
}

}  // namespace

LinkSpec LinkSpec::identity() { return LinkSpec(LinkKind::identity, "identity"); }
LinkSpec LinkSpec::logistic() { return LinkSpec(LinkKind::logistic, "logistic"); }
LinkSpec LinkSpec::exponential() { return LinkSpec(LinkKind::exponential, "exp"); }
LinkSpec LinkSpec::softplus() { return LinkSpec(LinkKind::softplus, "softplus"); }

LinkSpec LinkSpec::from_smoother(std::shared_ptr<const SmootherFit> fit) {
  if (!fit) throw std::invalid_argument("link: null smoother fit");
  if (fit->degree() < 3)
    throw std::invalid_argument("link: smoother degree must be >= 3 to expose psi''");
  LinkSpec spec(LinkKind::smoothed, "smoothed");
  spec.fit_ = std::move(fit);
  return spec;
}

LinkSpec LinkSpec::from_key(std::string_view key) {
  if (key == "identity") return identity();
  if (key == "logistic") return logistic();
  if (key == "exp") return exponential();
  if (key == "softplus") return softplus();
  throw std::invalid_argument("link: unknown key '" + std::string(key) +
                              "' (expected identity|logistic|exp|softplus)");
}

int LinkSpec::max_order() const {
  return kind_ == LinkKind::smoothed ? fit_->degree() - 1 : 3;
}

double LinkSpec::evaluate(double z, int order) const {
  if (order < 0 || order > max_order())
    throw std::invalid_argument("link: derivative order out of range");
  if (!std::isfinite(z)) throw std::domain_error("link: non-finite index value");
  switch (kind_) {
    case LinkKind::identity:
      if (order == 0) return z;
      return order == 1 ? 1.0 : 0.0;
    case LinkKind::exponential:
      return std::exp(z);
    case LinkKind::logistic:
      return logistic_deriv(z, order);
    case LinkKind::softplus:
      // psi = softplus, psi' = sigmoid, and higher orders shift into the
      // logistic derivative ladder.
      return order == 0 ? softplus_val(z) : logistic_deriv(z, order - 1);
    case LinkKind::smoothed:
      return fit_->evaluate(z, order);
  }
  throw std::logic_error("link: unreachable kind");
}

std::vector<double> LinkSpec::derivatives(double z, int max_order_req) const {
  if (max_order_req < 0 || max_order_req > max_order())
    throw std::invalid_argument("link: derivative order out of range");
  std::vector<double> out(max_order_req + 1);
  for (int r = 0; r <= max_order_req; ++r) out[r] = evaluate(z, r);
  return out;
}

Vector LinkSpec::apply(const Vector& index, int order) const {
  Vector out(index.size());
  for (Index i = 0; i < index.size(); ++i) out[i] = evaluate(index[i], order);
  return out;
}

double LinkSpec::max_abs_second_derivative(double lo, double hi) const {
  if (!(lo <= hi)) throw std::invalid_argument("link: interval endpoints out of order");
  auto abs2 = [this](double z) { return std::abs(evaluate(z, 2)); };
  switch (kind_) {
    case LinkKind::identity:
      return 0.0;
    case LinkKind::exponential:
      return std::exp(hi);
    case LinkKind::logistic: {
      // |psi''| peaks at +/- log(2+sqrt(3)); check interior critical points
      // and the endpoints.
      const double zstar = std::log(2.0 + std::sqrt(3.0));
      double best = std::max(abs2(lo), abs2(hi));
      if (lo < zstar && zstar < hi) best = std::max(best, abs2(zstar));
      if (lo < -zstar && -zstar < hi) best = std::max(best, abs2(-zstar));
      return best;
    }
    case LinkKind::softplus: {
      // psi'' = sigma(1-sigma), unimodal with peak 1/4 at the origin.
      double best = std::max(abs2(lo), abs2(hi));
      if (lo < 0.0 && 0.0 < hi) best = std::max(best, 0.25);
      return best;
    }
    case LinkKind::smoothed:
      throw std::logic_error("link: no closed-form curvature bound for smoothed links");
  }
  throw std::logic_error("link: unreachable kind");
}

double LinkSpec::max_abs_third_derivative(double lo, double hi) const {
  if (!(lo <= hi)) throw std::invalid_argument("link: interval endpoints out of order");
  auto abs3 = [this](double z) { return std::abs(evaluate(z, 3)); };
  switch (kind_) {
    case LinkKind::identity:
      return 0.0;
    case LinkKind::exponential:
      return std::exp(hi);
    case LinkKind::logistic: {
      // psi''' is even with critical points at 0 (value -1/8) and at
      // sigma = (3 +/- sqrt(6))/6, i.e. z = +/- log((3+sqrt(6))/(3-sqrt(6))),
      // where it equals 1/24.
      const double s6 = std::sqrt(6.0);
      const double zstar = std::log((3.0 + s6) / (3.0 - s6));
      double best = std::max(abs3(lo), abs3(hi));
      if (lo < 0.0 && 0.0 < hi) best = std::max(best, 0.125);
      if (lo < zstar && zstar < hi) best = std::max(best, abs3(zstar));
      if (lo < -zstar && -zstar < hi) best = std::max(best, abs3(-zstar));
      return best;
    }
    case LinkKind::softplus: {
      // Softplus psi''' is the logistic psi'', peaking at +/- log(2+sqrt(3)).
      const double zstar = std::log(2.0 + std::sqrt(3.0));
      double best = std::max(abs3(lo), abs3(hi));
      if (lo < zstar && zstar < hi) best = std::max(best, abs3(zstar));
      if (lo < -zstar && -zstar < hi) best = std::max(best, abs3(-zstar));
      return best;
    }
    case LinkKind::smoothed:
      throw std::logic_error("link: no closed-form bound for smoothed links");
  }
  throw std::logic_error("link: unreachable kind");
}

double LinkSpec::curvature_growth_constant() const {
  // Informational descriptors of the global second/third derivative bounds;
  // never enforced at runtime.
  switch (kind_) {
    case LinkKind::identity: return 0.0;
    case LinkKind::logistic: return 1.0 / (6.0 * std::sqrt(3.0));
    case LinkKind::softplus: return 0.25;
    case LinkKind::exponential: return std::numeric_limits<double>::infinity();
    case LinkKind::smoothed: return std::numeric_limits<double>::quiet_NaN();
  }
  throw std::logic_error("link: unreachable kind");
}

double LinkSpec::third_derivative_growth_constant() const {
  switch (kind_) {
    case LinkKind::identity: return 0.0;
    case LinkKind::logistic: return 0.125;
    case LinkKind::softplus: return 1.0 / (6.0 * std::sqrt(3.0));
    case LinkKind::exponential: return std::numeric_limits<double>::infinity();
    case LinkKind::smoothed: return std::numeric_limits<double>::quiet_NaN();
  }
  throw std::logic_error("link: unreachable kind");
}

}  // namespace narb
