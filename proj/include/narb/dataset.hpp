#pragma once

#include <string>
#include <vector>

#include "narb/types.hpp"

namespace narb {

//! One observational sample: covariates X (n x p), binary treatment W and
//! outcome Y. Rows keep their original order; treated/control views are
//! materialized on demand.
struct Dataset {
  Matrix X;
  std::vector<int> W;  // entries 0 or 1
  Vector Y;
  std::vector<std::string> column_names;  // optional, size p when present

  Index n() const { return X.rows(); }
  Index p() const { return X.cols(); }
  Index n_treated() const;
  Index n_control() const { return n() - n_treated(); }

  std::vector<Index> treated_rows() const;
  std::vector<Index> control_rows() const;

  Matrix rows(const std::vector<Index>& idx) const;
  Vector outcomes(const std::vector<Index>& idx) const;

  //! Throws std::invalid_argument on shape mismatch, non-binary W,
  //! non-finite values, or an arm with no observations.
  void validate() const;
};

}  // namespace narb
