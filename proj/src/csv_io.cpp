#include "narb/csv_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace narb {

namespace {

using nlohmann::json;

constexpr int kSchemaVersion = 1;

//! RFC-4180 field splitter over the whole file: quoted fields may contain
//! commas, doubled quotes and newlines. Returns one vector of fields per
//! record; a trailing newline does not produce an empty record.
std::vector<std::vector<std::string>> parse_csv(const std::string& text,
                                                const std::string& path) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> fields;
  std::string field;
  bool in_quotes = false;
  bool field_was_quoted = false;
  bool record_has_content = false;

  auto end_field = [&]() {
    fields.push_back(field);
    field.clear();
    field_was_quoted = false;
  };
  auto end_record = [&]() {
    end_field();
    records.push_back(fields);
    fields.clear();
    record_has_content = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (field.empty() && !field_was_quoted) {
          in_quotes = true;
          field_was_quoted = true;
          record_has_content = true;
        } else {
          field.push_back(c);  // stray quote mid-field: keep it literal
        }
        break;
      case ',':
        end_field();
        record_has_content = true;
        break;
      case '\r':
        break;  // swallowed; the '\n' (if any) terminates the record
      case '\n':
        if (record_has_content || !field.empty() || !fields.empty()) {
          end_record();
        }
        break;
      default:
        field.push_back(c);
        record_has_content = true;
        break;
    }
  }
  if (in_quotes) {
    throw std::runtime_error(path + ": unterminated quoted field at end of file");
  }
  if (record_has_content || !field.empty() || !fields.empty()) {
    end_record();
  }
  return records;
}

//! stod with full consumption; empty or partial parses are rejected.
double parse_cell(const std::string& cell, std::size_t row,
                  const std::string& col_name, const std::string& path) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != cell.size() || cell.empty()) {
    throw std::runtime_error(path + ": cannot parse '" + cell + "' at row " +
                             std::to_string(row) + ", column '" + col_name +
                             "' as a number");
  }
  return v;
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

const char* link_name(LinkKind kind) {
  switch (kind) {
    case LinkKind::identity: return "identity";
    case LinkKind::logistic: return "logistic";
    case LinkKind::exponential: return "exp";
    case LinkKind::softplus: return "softplus";
    case LinkKind::smoothed: return "smoothed";
  }
  return "unknown";
}

json fold_json(const FoldDetail& fd) {
  json j;
  j["train_fold"] = fd.train_fold;
  j["eval_fold"] = fd.eval_fold;
  j["mu_c"] = fd.mu_c;
  j["mu_t"] = fd.mu_t;
  j["tau"] = fd.tau;
  j["weight"] = fd.weight;
  j["n_t"] = fd.n_t;
  j["n_c"] = fd.n_c;
  j["var_control"] = fd.var_control;
  j["var_treated"] = fd.var_treated;
  j["feasible"] = fd.feasible;
  j["achieved_c1"] = fd.achieved_c1;
  j["achieved_c2"] = fd.achieved_c2;
  j["ess"] = fd.ess;
  j["lambda"] = fd.lambda;
  j["bandwidth"] = fd.bandwidth;
  return j;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Dataset load_dataset(const std::string& path, const DatasetSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  const auto records = parse_csv(ss.str(), path);
  if (records.empty()) throw std::runtime_error(path + ": empty file, expected a header row");

  const auto& header = records[0];
  std::ptrdiff_t w_col = -1;
  std::ptrdiff_t y_col = -1;
  std::vector<std::size_t> x_cols;
  std::vector<std::string> x_names;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == schema.treatment_col) {
      if (w_col >= 0) throw std::runtime_error(path + ": duplicate treatment column '" + schema.treatment_col + "'");
      w_col = static_cast<std::ptrdiff_t>(c);
    } else if (header[c] == schema.outcome_col) {
      if (y_col >= 0) throw std::runtime_error(path + ": duplicate outcome column '" + schema.outcome_col + "'");
      y_col = static_cast<std::ptrdiff_t>(c);
    } else {
      x_cols.push_back(c);
      x_names.push_back(header[c]);
    }
  }
  if (w_col < 0) throw std::runtime_error(path + ": missing treatment column '" + schema.treatment_col + "'");
  if (y_col < 0) throw std::runtime_error(path + ": missing outcome column '" + schema.outcome_col + "'");
  if (x_cols.empty()) throw std::runtime_error(path + ": no covariate columns besides treatment/outcome");

  const std::size_t n = records.size() - 1;
  if (n == 0) throw std::runtime_error(path + ": header only, no data rows");

  Dataset data;
  data.X.resize(static_cast<Index>(n), static_cast<Index>(x_cols.size()));
  data.W.resize(n);
  data.Y.resize(static_cast<Index>(n));
  data.column_names = x_names;

  for (std::size_t r = 0; r < n; ++r) {
    const auto& rec = records[r + 1];
    const std::size_t file_row = r + 2;  // 1-based, header is row 1
    if (rec.size() != header.size()) {
      throw std::runtime_error(path + ": row " + std::to_string(file_row) + " has " +
                               std::to_string(rec.size()) + " fields, header has " +
                               std::to_string(header.size()));
    }
    const double w = parse_cell(rec[static_cast<std::size_t>(w_col)], file_row,
                                schema.treatment_col, path);
    if (w != 0.0 && w != 1.0) {
      throw std::runtime_error(path + ": non-binary treatment value '" +
                               rec[static_cast<std::size_t>(w_col)] + "' at row " +
                               std::to_string(file_row) + ", column '" +
                               schema.treatment_col + "' (must be 0 or 1)");
    }
    data.W[r] = static_cast<int>(w);
    data.Y[static_cast<Index>(r)] =
        parse_cell(rec[static_cast<std::size_t>(y_col)], file_row, schema.outcome_col, path);
    for (std::size_t j = 0; j < x_cols.size(); ++j) {
      data.X(static_cast<Index>(r), static_cast<Index>(j)) =
          parse_cell(rec[x_cols[j]], file_row, x_names[j], path);
    }
  }
  return data;
}

void save_dataset(const std::string& path, const Dataset& data,
                  const DatasetSchema& schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open file for writing");
  const Index p = data.p();
  for (Index j = 0; j < p; ++j) {
    std::string name = (static_cast<Index>(data.column_names.size()) == p)
                           ? data.column_names[static_cast<std::size_t>(j)]
                           : "x" + std::to_string(j + 1);
    out << quote_csv(name) << ',';
  }
  out << quote_csv(schema.treatment_col) << ',' << quote_csv(schema.outcome_col) << '\n';
  for (Index i = 0; i < data.n(); ++i) {
    for (Index j = 0; j < p; ++j) out << format_double(data.X(i, j)) << ',';
    out << data.W[static_cast<std::size_t>(i)] << ','
        << format_double(data.Y(i)) << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

std::string effect_estimate_json(const EffectEstimate& estimate) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["estimand"] = estimate.estimand == Estimand::att ? "att" : "ate";
  j["tau_hat"] = estimate.tau_hat;
  j["mu_c_hat"] = estimate.mu_c_hat;
  j["mu_t_hat"] = estimate.mu_t_hat;
  j["s_n"] = estimate.s_n;
  j["ci_level"] = estimate.ci_level;
  j["ci_lo"] = estimate.ci_lo;
  j["ci_hi"] = estimate.ci_hi;
  j["n_t"] = estimate.n_t;
  j["n_c"] = estimate.n_c;
  j["all_folds_feasible"] = estimate.all_folds_feasible;
  json folds = json::array();
  for (const auto& fd : estimate.per_fold) folds.push_back(fold_json(fd));
  j["folds"] = folds;
  return j.dump(2);
}

std::string sim_report_json(const SimConfig& config, const SimReport& report) {
  json j;
  j["schema_version"] = kSchemaVersion;
  json cfg;
  cfg["n"] = config.n;
  cfg["p"] = config.p;
  cfg["k"] = config.k;
  cfg["link"] = link_name(config.link.kind());
  cfg["beta_scale"] = config.beta_scale;
  cfg["treatment"] = treatment_name(config.treatment);
  cfg["treat_param"] = config.treat_param;
  cfg["selection_scale"] = config.selection_scale;
  cfg["noise"] = noise_name(config.noise);
  cfg["sigma"] = config.sigma;
  cfg["design"] = design_name(config.design);
  cfg["rho_x"] = config.rho_x;
  cfg["true_tau"] = config.true_tau;
  cfg["replicates"] = config.replicates;
  cfg["base_seed"] = config.base_seed;
  json ests = json::array();
  for (auto e : config.estimators) ests.push_back(estimator_name(e));
  cfg["estimators"] = ests;
  j["config"] = cfg;
  json summaries = json::array();
  for (const auto& s : report.summaries) {
    json sj;
    sj["estimator"] = estimator_name(s.estimator);
    sj["n_ok"] = s.n_ok;
    sj["n_failed"] = s.n_failed;
    sj["mean_bias"] = s.mean_bias;
    sj["rmse"] = s.rmse;
    sj["coverage"] = s.coverage;
    sj["mean_ci_width"] = s.mean_ci_width;
    sj["mean_ess"] = s.mean_ess;
    sj["feasibility_rate"] = s.feasibility_rate;
    summaries.push_back(sj);
  }
  j["summaries"] = summaries;
  return j.dump(2);
}

void save_sim_rows(const std::string& path, const SimReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open file for writing");
  out << "replicate,estimator,tau_hat,true_att,s_n,ci_lo,ci_hi,covered,mean_ess,feasible,failed\n";
  for (const auto& r : report.rows) {
    out << r.replicate << ',' << estimator_name(r.estimator) << ','
        << format_double(r.tau_hat) << ',' << format_double(r.true_att) << ','
        << format_double(r.s_n) << ',' << format_double(r.ci_lo) << ','
        << format_double(r.ci_hi) << ',' << (r.covered ? 1 : 0) << ','
        << format_double(r.mean_ess) << ',' << (r.feasible ? 1 : 0) << ','
        << (r.failed ? 1 : 0) << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

void save_fold_diagnostics(const std::string& path,
                           const EffectEstimate& estimate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open file for writing");
  out << "train_fold,eval_fold,mu_c,mu_t,tau,weight,n_t,n_c,var_control,"
         "var_treated,feasible,achieved_c1,achieved_c2,ess,lambda,bandwidth\n";
  for (const auto& fd : estimate.per_fold) {
    out << fd.train_fold << ',' << fd.eval_fold << ',' << format_double(fd.mu_c)
        << ',' << format_double(fd.mu_t) << ',' << format_double(fd.tau) << ','
        << format_double(fd.weight) << ',' << fd.n_t << ',' << fd.n_c << ','
        << format_double(fd.var_control) << ',' << format_double(fd.var_treated)
        << ',' << (fd.feasible ? 1 : 0) << ',' << format_double(fd.achieved_c1)
        << ',' << format_double(fd.achieved_c2) << ',' << format_double(fd.ess)
        << ',' << format_double(fd.lambda) << ',' << format_double(fd.bandwidth)
        << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace narb
