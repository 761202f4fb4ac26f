#include "narb/dataset.hpp"

#include <stdexcept>

#include "narb/math_util.hpp"

namespace narb {

Index Dataset::n_treated() const {
  Index c = 0;
  for (int w : W) c += (w == 1);
  return c;
}

std::vector<Index> Dataset::treated_rows() const {
  std::vector<Index> idx;
  for (Index i = 0; i < static_cast<Index>(W.size()); ++i)
    if (W[i] == 1) idx.push_back(i);
  return idx;
}

std::vector<Index> Dataset::control_rows() const {
  std::vector<Index> idx;
  for (Index i = 0; i < static_cast<Index>(W.size()); ++i)
    if (W[i] == 0) idx.push_back(i);
  return idx;
}

Matrix Dataset::rows(const std::vector<Index>& idx) const {
  Matrix out(static_cast<Index>(idx.size()), X.cols());
  for (Index i = 0; i < out.rows(); ++i) out.row(i) = X.row(idx[i]);
  return out;
}

Vector Dataset::outcomes(const std::vector<Index>& idx) const {
  Vector out(static_cast<Index>(idx.size()));
  for (Index i = 0; i < out.size(); ++i) out[i] = Y[idx[i]];
  return out;
}

void Dataset::validate() const {
  const Index nn = X.rows();
  if (static_cast<Index>(W.size()) != nn || Y.size() != nn)
    throw std::invalid_argument("dataset: X, W, Y row counts disagree");
  if (nn == 0 || X.cols() == 0) throw std::invalid_argument("dataset: empty sample");
  if (!column_names.empty() && static_cast<Index>(column_names.size()) != X.cols())
    throw std::invalid_argument("dataset: column_names length does not match p");
  for (int w : W)
    if (w != 0 && w != 1) throw std::invalid_argument("dataset: W must be 0/1");
  if (!all_finite(X) || !all_finite(Y))
    throw std::invalid_argument("dataset: non-finite value in X or Y");
  const Index nt = n_treated();
  if (nt == 0) throw std::invalid_argument("dataset: no treated observations");
  if (nt == nn) throw std::invalid_argument("dataset: no control observations");
}

}  // namespace narb
