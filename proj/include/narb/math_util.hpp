#pragma once

#include <cstdint>
#include <random>

#include "narb/types.hpp"

namespace narb {

//! Inverse of the standard normal CDF, accurate to ~1e-15 over (0,1).
//! Throws std::invalid_argument outside the open interval.
double normal_quantile(double prob);

//! Standard normal CDF via erfc.
double normal_cdf(double z);

//! Two-sided critical value for a confidence level, e.g. 0.95 -> 1.959964.
double normal_two_sided_critical(double level);

//! True when every entry of v is finite.
bool all_finite(const Vector& v);
bool all_finite(const Matrix& m);

//! Soft-threshold operator sign(x) * max(|x| - t, 0), t >= 0.
double soft_threshold(double x, double t);

//! Deterministic 64-bit engine used throughout; seeded per call site.
using Rng = std::mt19937_64;

//! Standard normal draws, column vector of length n.
Vector gauss_vector(Index n, Rng& rng);

//! n x p matrix of iid standard normals, filled column-major.
Matrix gauss_matrix(Index n, Index p, Rng& rng);

}  // namespace narb
