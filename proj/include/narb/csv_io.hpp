#pragma once

#include <string>

#include "narb/dataset.hpp"
#include "narb/estimator.hpp"
#include "narb/simharness.hpp"

namespace narb {

//! Column schema for dataset ingestion: which header names hold the
//! treatment indicator and the outcome.  Every other column becomes a
//! covariate, in file order.
struct DatasetSchema {
  std::string treatment_col = "w";
  std::string outcome_col = "y";
};

//! Parse a CSV file (RFC-4180 quoting, header row required) into a Dataset.
//! Throws std::runtime_error naming the offending row/column on a missing
//! schema column, a non-numeric cell, a non-binary treatment value, or a
//! ragged row.
Dataset load_dataset(const std::string& path, const DatasetSchema& schema);

//! Write a dataset as CSV with a header row.  Covariates keep their stored
//! names (or x1..xp when absent); treatment/outcome columns are appended
//! under the schema names.  Numbers carry 17 significant digits so a
//! save/load round trip is lossless.
void save_dataset(const std::string& path, const Dataset& data,
                  const DatasetSchema& schema);

//! Serialize an effect estimate as a versioned JSON document (string form).
//! Includes per-fold diagnostics; weight vectors are omitted to keep the
//! report compact (they live in the balance CSV written alongside).
std::string effect_estimate_json(const EffectEstimate& estimate);

//! Serialize a Monte Carlo summary (per-estimator aggregates) as JSON.
std::string sim_report_json(const SimConfig& config, const SimReport& report);

//! Write per-replicate simulation rows as CSV, one line per
//! (replicate, estimator) pair.
void save_sim_rows(const std::string& path, const SimReport& report);

//! Write per-fold balance diagnostics for a fitted estimate as CSV.
void save_fold_diagnostics(const std::string& path,
                           const EffectEstimate& estimate);

//! Format a double with 17 significant digits (shortest lossless form is
//! not required; fixed %.17g keeps files diffable).
std::string format_double(double v);

}  // namespace narb
