#include "narb/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace narb {

namespace {

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* expected) {
  throw std::invalid_argument("config: key '" + key + "' has value '" + value +
                              "', expected " + expected);
}

}  // namespace

ConfigMap ConfigMap::parse_text(std::string_view text) {
  ConfigMap out;
  std::istringstream stream{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(stream, line)) {
    ++lineno;
    if (const size_t hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " is not 'key = value'");
    const std::string key = trim(std::string_view(stripped).substr(0, eq));
    const std::string value = trim(std::string_view(stripped).substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config: empty key on line " + std::to_string(lineno));
    if (out.values_.count(key))
      throw std::invalid_argument("config: duplicate key '" + key + "'");
    out.values_[key] = value;
  }
  return out;
}

ConfigMap ConfigMap::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str());
}

std::string ConfigMap::get_string(const std::string& key, const std::string& fallback) const {
  consumed_.insert(key);
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double ConfigMap::get_double(const std::string& key, double fallback) const {
  consumed_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) bad_value(key, it->second, "a real number");
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, it->second, "a real number");
  } catch (const std::out_of_range&) {
    bad_value(key, it->second, "a representable real number");
  }
}

int ConfigMap::get_int(const std::string& key, int fallback) const {
  consumed_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t pos = 0;
    const long v = std::stol(it->second, &pos);
    if (pos != it->second.size() || v < std::numeric_limits<int>::min() ||
        v > std::numeric_limits<int>::max())
      bad_value(key, it->second, "an integer");
    return static_cast<int>(v);
  } catch (const std::invalid_argument&) {
    bad_value(key, it->second, "an integer");
  } catch (const std::out_of_range&) {
    bad_value(key, it->second, "a representable integer");
  }
}

std::uint64_t ConfigMap::get_uint64(const std::string& key, std::uint64_t fallback) const {
  consumed_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t pos = 0;
    const unsigned long long v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) bad_value(key, it->second, "a nonnegative integer");
    return static_cast<std::uint64_t>(v);
  } catch (const std::invalid_argument&) {
    bad_value(key, it->second, "a nonnegative integer");
  } catch (const std::out_of_range&) {
    bad_value(key, it->second, "a representable nonnegative integer");
  }
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
  consumed_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, it->second, "a boolean");
}

std::vector<std::string> ConfigMap::unconsumed() const {
  std::vector<std::string> out;
  for (const auto& [key, value] : values_)
    if (!consumed_.count(key)) out.push_back(key);
  return out;
}

void ConfigMap::require_all_consumed(const std::string& context) const {
  const std::vector<std::string> leftover = unconsumed();
  if (leftover.empty()) return;
  std::string msg = "config: unknown key(s) for " + context + ":";
  for (const std::string& key : leftover) msg += " '" + key + "'";
  throw std::invalid_argument(msg);
}

namespace {

LinkSpec link_from(const ConfigMap& cfg, const std::string& key,
                   const std::string& fallback) {
  return LinkSpec::from_key(cfg.get_string(key, fallback));
}

OutcomeMethod outcome_method_from(const std::string& v) {
  if (v == "nls") return OutcomeMethod::nls_lasso;
  if (v == "glm") return OutcomeMethod::glm_lasso;
  if (v == "pv") return OutcomeMethod::pv_linear_lasso;
  throw std::invalid_argument("config: outcome.method must be nls|glm|pv, got '" + v + "'");
}

// "auto" keeps the sentinel that triggers the data-driven default.
double auto_or_double(const ConfigMap& cfg, const std::string& key, double sentinel) {
  const std::string v = cfg.get_string(key, "auto");
  if (v == "auto") return sentinel;
  try {
    size_t pos = 0;
    const double parsed = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return parsed;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' must be 'auto' or a number");
  }
}

}  // namespace

EstimatorConfig estimator_config_from(const ConfigMap& cfg) {
  EstimatorConfig out;

  const std::string mode = cfg.get_string("link_mode", "known");
  if (mode == "known") out.link_mode = LinkMode::known;
  else if (mode == "single-index") out.link_mode = LinkMode::single_index;
  else throw std::invalid_argument("config: link_mode must be known|single-index");
  out.link = link_from(cfg, "link", "logistic");

  out.outcome_method = outcome_method_from(cfg.get_string("outcome.method", "nls"));
  const std::string rule = cfg.get_string("outcome.lambda_rule", "theory");
  if (rule == "theory") out.lambda_rule = LambdaRule::theory_rate;
  else if (rule == "cv") out.lambda_rule = LambdaRule::kfold_cv;
  else throw std::invalid_argument("config: outcome.lambda_rule must be theory|cv");
  out.lambda_override = cfg.get_double("outcome.lambda", -1.0);
  out.solver.tolerance = cfg.get_double("outcome.tolerance", out.solver.tolerance);
  out.solver.max_iters = cfg.get_int("outcome.max_iters", out.solver.max_iters);
  out.solver.rate_constant = cfg.get_double("outcome.rate_constant", out.solver.rate_constant);
  out.solver.sigma_hat = cfg.get_double("outcome.sigma_hat", out.solver.sigma_hat);
  out.solver.cv_folds = cfg.get_int("outcome.cv_folds", out.solver.cv_folds);
  out.solver.cv_seed = cfg.get_uint64("outcome.cv_seed", out.solver.cv_seed);
  out.solver.init_from_pv = cfg.get_bool("outcome.init_from_pv", out.solver.init_from_pv);

  const std::string bmode = cfg.get_string("balance.mode", "hard");
  if (bmode == "hard") out.balance_mode = BalanceMode::hard;
  else if (bmode == "penalized") out.balance_mode = BalanceMode::penalized;
  else if (bmode == "l2") out.balance_mode = BalanceMode::l2;
  else if (bmode == "support-restricted") out.balance_mode = BalanceMode::support_restricted;
  else
    throw std::invalid_argument(
        "config: balance.mode must be hard|penalized|l2|support-restricted");
  // 'auto' selects the adaptive radius (1.1x the witnessed feasibility
  // floor); absent keeps the fixed-rate default.
  if (cfg.get_string("balance.k1", "") == "auto")
    out.balance.k1 = kAutoK1;
  else
    out.balance.k1 = cfg.get_double("balance.k1", out.balance.k1);
  out.balance.k2 = auto_or_double(cfg, "balance.k2", out.balance.k2);
  out.balance.k2_floor_margin =
      cfg.get_double("balance.k2_floor_margin", out.balance.k2_floor_margin);
  out.balance.cap_exponent = cfg.get_double("balance.cap_exponent", out.balance.cap_exponent);
  out.balance.cap_override = cfg.get_double("balance.cap_override", out.balance.cap_override);
  out.balance.normalize = cfg.get_bool("balance.normalize", out.balance.normalize);
  const std::string norm = cfg.get_string("balance.constraint_norm", "max");
  if (norm == "max") out.balance.constraint_norm = ConstraintNorm::max;
  else if (norm == "l2") out.balance.constraint_norm = ConstraintNorm::l2;
  else throw std::invalid_argument("config: balance.constraint_norm must be max|l2");
  out.balance.zeta = cfg.get_double("balance.zeta", out.balance.zeta);
  out.balance.eta = cfg.get_double("balance.eta", out.balance.eta);
  out.balance.tol = cfg.get_double("balance.tol", out.balance.tol);
  out.balance.max_iters = cfg.get_int("balance.max_iters", out.balance.max_iters);
  out.balance.c1 = cfg.get_double("balance.c1", out.balance.c1);
  out.balance.c2 = cfg.get_double("balance.c2", out.balance.c2);
  out.balance.b_x = cfg.get_double("balance.b_x", out.balance.b_x);
  out.balance.r1 = cfg.get_double("balance.r1", out.balance.r1);
  out.balance.r2 = cfg.get_double("balance.r2", out.balance.r2);
  out.balance.k_sparsity = cfg.get_int("balance.k_sparsity", out.balance.k_sparsity);
  out.balance.radius1_override =
      cfg.get_double("balance.radius1_override", out.balance.radius1_override);
  out.balance.radius2_override =
      cfg.get_double("balance.radius2_override", out.balance.radius2_override);
  out.balance.max_p_second_order = cfg.get_int(
      "balance.max_p_second_order", static_cast<int>(out.balance.max_p_second_order));

  out.folds = cfg.get_int("folds", out.link_mode == LinkMode::single_index ? 3 : 2);
  out.fold_seed = cfg.get_int("fold_seed", out.fold_seed);
  out.ci_level = cfg.get_double("ci_level", out.ci_level);
  out.target_global_treated =
      cfg.get_bool("target_global_treated", out.target_global_treated);
  const std::string infeasible = cfg.get_string("on_infeasible", "fail");
  if (infeasible == "fail") out.on_infeasible = InfeasibleAction::fail;
  else if (infeasible == "keep") out.on_infeasible = InfeasibleAction::keep;
  else throw std::invalid_argument("config: on_infeasible must be fail|keep");

  out.smoother_degree = cfg.get_int("smoother.degree", out.smoother_degree);
  out.smoother_bandwidth = auto_or_double(cfg, "smoother.bandwidth", -1.0);
  const std::string bw = cfg.get_string("smoother.bandwidth_method", "rule-of-thumb");
  if (bw == "rule-of-thumb") out.bandwidth_method = BandwidthMethod::rule_of_thumb;
  else if (bw == "cv") out.bandwidth_method = BandwidthMethod::loo_cv;
  else throw std::invalid_argument("config: smoother.bandwidth_method must be rule-of-thumb|cv");
  return out;
}

SimConfig sim_config_from(const ConfigMap& cfg) {
  SimConfig out;
  out.estimator = estimator_config_from(cfg);

  out.n = cfg.get_int("sim.n", static_cast<int>(out.n));
  out.p = cfg.get_int("sim.p", static_cast<int>(out.p));
  out.k = cfg.get_int("sim.k", out.k);
  out.link = link_from(cfg, "link", "logistic");
  out.beta_scale = cfg.get_double("sim.beta_scale", out.beta_scale);

  const std::string treat = cfg.get_string("sim.treatment", "logistic-selection");
  if (treat == "coin") out.treatment = TreatmentKind::random_coin;
  else if (treat == "logistic-selection") out.treatment = TreatmentKind::logistic_selection;
  else throw std::invalid_argument("config: sim.treatment must be coin|logistic-selection");
  out.selection_scale = cfg.get_double("sim.selection_scale", out.selection_scale);

  // treat_param: explicit value, or derived from a target treated fraction.
  const double fraction = cfg.get_double("sim.treated_fraction", -1.0);
  if (cfg.has("sim.treat_param")) {
    out.treat_param = cfg.get_double("sim.treat_param", 0.0);
  } else if (out.treatment == TreatmentKind::random_coin) {
    out.treat_param = fraction > 0.0 ? fraction : 0.5;
  } else {
    const double target = fraction > 0.0 ? fraction : 0.35;
    const double index_sd = out.selection_scale * out.beta_scale *
                            std::sqrt(static_cast<double>(std::min<Index>(out.k, out.p)));
    out.treat_param = selection_intercept_for_fraction(target, index_sd);
  }

  const std::string noise = cfg.get_string("sim.noise", "gaussian");
  if (noise == "gaussian") out.noise = NoiseKind::gaussian;
  else if (noise == "scaled-uniform") out.noise = NoiseKind::scaled_uniform;
  else throw std::invalid_argument("config: sim.noise must be gaussian|scaled-uniform");
  out.sigma = cfg.get_double("sim.sigma", out.sigma);

  const std::string design = cfg.get_string("sim.design", "isotropic-gaussian");
  if (design == "isotropic-gaussian") out.design = DesignKind::isotropic_gaussian;
  else if (design == "ar1") out.design = DesignKind::ar1;
  else if (design == "bounded-uniform") out.design = DesignKind::bounded_uniform;
  else
    throw std::invalid_argument(
        "config: sim.design must be isotropic-gaussian|ar1|bounded-uniform");
  out.rho_x = cfg.get_double("sim.rho_x", out.rho_x);

  out.true_tau = cfg.get_double("sim.true_tau", out.true_tau);
  out.replicates = cfg.get_int("sim.replicates", out.replicates);
  out.base_seed = cfg.get_uint64("sim.base_seed", out.base_seed);

  const std::string list = cfg.get_string("sim.estimators", "second-order");
  out.estimators.clear();
  std::istringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string name = trim(item);
    if (name == "plugin") out.estimators.push_back(SimEstimator::plugin);
    else if (name == "first-order") out.estimators.push_back(SimEstimator::first_order);
    else if (name == "second-order") out.estimators.push_back(SimEstimator::second_order);
    else if (name == "sim-mode") out.estimators.push_back(SimEstimator::sim_mode);
    else
      throw std::invalid_argument("config: unknown estimator '" + name +
                                  "' in sim.estimators");
  }
  if (out.estimators.empty())
    throw std::invalid_argument("config: sim.estimators is empty");
  return out;
}

}  // namespace narb
