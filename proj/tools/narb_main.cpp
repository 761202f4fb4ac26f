//! narb: sparse outcome modeling plus second-order balancing weights for
//! treatment-effect estimation, with a Monte Carlo harness.
//!
//! Subcommands: estimate, simulate, diagnose, project-test.
//! Exit codes: 0 success, 1 input or runtime error, 2 infeasible balance
//! under on_infeasible = fail.

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "narb/balancer.hpp"
#include "narb/config.hpp"
#include "narb/csv_io.hpp"
#include "narb/dataset.hpp"
#include "narb/estimator.hpp"
#include "narb/links.hpp"
#include "narb/math_util.hpp"
#include "narb/outcome_model.hpp"
#include "narb/simharness.hpp"

namespace {

using namespace narb;
using nlohmann::json;

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text << '\n';
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open file for writing");
  out << text << '\n';
  if (!out) throw std::runtime_error(path + ": write failed");
}

struct EstimateArgs {
  std::string data_path;
  std::string treatment = "w";
  std::string outcome = "y";
  std::string config_path;
  std::string link_key;
  std::string estimand = "att";
  std::string out_path;
  std::string folds_out;
  int seed = -1;  // < 0: keep the config's fold seed
};

EstimatorConfig estimator_config_for(const std::string& config_path,
                                     const std::string& link_key, int seed,
                                     const std::string& context) {
  EstimatorConfig cfg;
  if (!config_path.empty()) {
    const ConfigMap map = ConfigMap::parse_file(config_path);
    cfg = estimator_config_from(map);
    map.require_all_consumed(context);
  }
  if (!link_key.empty()) {
    cfg.link = LinkSpec::from_key(link_key);
    cfg.link_mode = LinkMode::known;
  }
  if (seed >= 0) cfg.fold_seed = seed;
  return cfg;
}

int cmd_estimate(const EstimateArgs& a) {
  const EstimatorConfig cfg =
      estimator_config_for(a.config_path, a.link_key, a.seed, "estimate config");
  const Dataset data = load_dataset(a.data_path, {a.treatment, a.outcome});
  data.validate();

  EffectEstimate est;
  if (a.estimand == "att") {
    est = estimate_att(data, cfg);
  } else if (a.estimand == "ate") {
    est = estimate_ate(data, cfg);
  } else {
    throw std::runtime_error("estimate: unknown estimand '" + a.estimand +
                             "' (expected att or ate)");
  }

  write_text(a.out_path, effect_estimate_json(est));
  std::string folds_path = a.folds_out;
  if (folds_path.empty() && !a.out_path.empty()) folds_path = a.out_path + ".folds.csv";
  if (!folds_path.empty()) save_fold_diagnostics(folds_path, est);
  return 0;
}

struct SimulateArgs {
  std::string config_path;
  std::string out_path;
  std::string rows_out;
  int replicates = -1;
  long long seed = -1;
};

int cmd_simulate(const SimulateArgs& a) {
  SimConfig cfg = baseline_config();
  if (!a.config_path.empty()) {
    const ConfigMap map = ConfigMap::parse_file(a.config_path);
    cfg = sim_config_from(map);
    map.require_all_consumed("simulate config");
  }
  if (a.replicates > 0) cfg.replicates = a.replicates;
  if (a.seed >= 0) cfg.base_seed = static_cast<std::uint64_t>(a.seed);

  const SimReport report = run_monte_carlo(cfg);
  write_text(a.out_path, sim_report_json(cfg, report));
  if (!a.rows_out.empty()) save_sim_rows(a.rows_out, report);
  return 0;
}

struct DiagnoseArgs {
  std::string data_path;
  std::string treatment = "w";
  std::string outcome = "y";
  std::string config_path;
  std::string link_key;
  std::string beta_path;
  std::string out_path;
  int seed = -1;
};

Vector read_coefficients(const std::string& path, Index p) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  std::vector<double> vals;
  std::string tok;
  while (in >> tok) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    if (pos != tok.size())
      throw std::runtime_error(path + ": cannot parse coefficient '" + tok + "'");
    vals.push_back(v);
  }
  if (static_cast<Index>(vals.size()) != p)
    throw std::runtime_error(path + ": expected " + std::to_string(p) +
                             " coefficients, found " + std::to_string(vals.size()));
  Vector beta(p);
  for (Index j = 0; j < p; ++j) beta[j] = vals[static_cast<std::size_t>(j)];
  return beta;
}

//! One full-sample balance pass: fit (or load) the outcome coefficients on
//! the controls, build treated-vs-control targets, solve the configured
//! program, and report achieved balance plus solver and KKT diagnostics.
int cmd_diagnose(const DiagnoseArgs& a) {
  EstimatorConfig cfg =
      estimator_config_for(a.config_path, a.link_key, -1, "diagnose config");
  if (a.seed >= 0) cfg.solver.cv_seed = static_cast<std::uint64_t>(a.seed);
  if (cfg.link_mode != LinkMode::known)
    throw std::runtime_error(
        "diagnose: single-index mode has no standalone balance pass; declare a link");

  const Dataset data = load_dataset(a.data_path, {a.treatment, a.outcome});
  data.validate();
  const Matrix X_t = data.rows(data.treated_rows());
  const Matrix X_c = data.rows(data.control_rows());
  const Vector y_c = data.outcomes(data.control_rows());

  json j;
  j["schema_version"] = 1;
  j["n"] = data.n();
  j["p"] = data.p();
  j["n_t"] = data.n_treated();
  j["n_c"] = data.n_control();

  Vector beta;
  std::vector<Index> support;
  if (!a.beta_path.empty()) {
    beta = read_coefficients(a.beta_path, data.p());
    for (Index k = 0; k < beta.size(); ++k)
      if (beta[k] != 0.0) support.push_back(k);
    j["lambda"] = nullptr;
    j["kkt"] = nullptr;
  } else {
    const FittedOutcomeModel fit = fit_outcome_model(X_c, y_c, cfg, cfg.link);
    beta = index_coefficients(fit);
    support = fit.support;
    const KktReport kkt = kkt_check(fit, X_c, y_c, cfg.link, cfg.solver);
    j["lambda"] = fit.lambda;
    j["kkt"] = {{"pass", kkt.pass},
                {"max_violation", kkt.max_violation},
                {"tolerance", kkt.tolerance}};
  }

  const BalanceTargets targets = build_targets(X_t, X_c, beta, cfg.link);
  const BalancingWeights w = solve_balance_weights(targets, X_c, cfg, support);
  const BalanceReport rep = balance_report(w, targets, X_c);

  j["weights"] = {{"feasible", w.feasible},
                  {"sum_gamma", w.sum_gamma},
                  {"cap", w.cap},
                  {"achieved_c1", w.achieved_c1},
                  {"achieved_c2", w.achieved_c2},
                  {"achieved_c1_l2", w.achieved_c1_l2},
                  {"achieved_c2_l2", w.achieved_c2_l2},
                  {"ell2_norm_sq", w.ell2_norm_sq}};
  j["solver"] = {{"iterations", w.solver_report.iterations},
                 {"stages", w.solver_report.stages},
                 {"stalled", w.solver_report.stalled},
                 {"polished", w.solver_report.polished},
                 {"min_violation", w.solver_report.min_violation},
                 {"radius_c1", w.solver_report.radius_c1},
                 {"radius_c2", w.solver_report.radius_c2},
                 {"c1_residual", w.solver_report.c1_residual},
                 {"c2_residual", w.solver_report.c2_residual}};
  json worst = json::array();
  for (const auto& [idx, gap] : rep.worst_coordinates)
    worst.push_back({{"coordinate", idx}, {"abs_gap", gap}});
  j["balance"] = {{"gamma_max", rep.gamma_max},
                  {"ess", rep.ess},
                  {"worst_coordinates", worst}};

  write_text(a.out_path, j.dump(2));
  if (!w.feasible && cfg.on_infeasible == InfeasibleAction::fail) return 2;
  return 0;
}

struct ProjectTestArgs {
  int seed = 1;
  int instances = 200;
};

bool links_fd_suite(Rng& rng, int points) {
  std::uniform_real_distribution<double> unif(-3.0, 3.0);
  const LinkSpec links[] = {LinkSpec::identity(), LinkSpec::logistic(),
                            LinkSpec::exponential(), LinkSpec::softplus()};
  double worst = 0.0;
  for (const LinkSpec& link : links) {
    for (int i = 0; i < points; ++i) {
      double z = unif(rng);
      if (link.kind() == LinkKind::exponential) z *= 2.0 / 3.0;
      const double h = 1e-5 * (1.0 + std::abs(z));
      for (int order = 1; order <= 3; ++order) {
        const double fd =
            (link.evaluate(z + h, order - 1) - link.evaluate(z - h, order - 1)) / (2 * h);
        const double an = link.evaluate(z, order);
        const double rel = std::abs(an - fd) / std::max(1.0, std::abs(an));
        worst = std::max(worst, rel);
      }
    }
  }
  const bool pass = worst <= 1e-5;
  std::cout << (pass ? "[PASS]" : "[FAIL]")
            << " link derivatives vs central differences, worst relative error "
            << worst << "\n";
  return pass;
}

//! KKT check for the capped-simplex projection: interior coordinates share
//! one multiplier, boundary coordinates bound it from the correct side.
bool projection_kkt_suite(Rng& rng, int instances) {
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::uniform_int_distribution<int> size_dist(1, 8);
  double worst = 0.0;
  for (int t = 0; t < instances; ++t) {
    const int n = size_dist(rng);
    std::uniform_real_distribution<double> cap_dist(1.0 / n, 2.0);
    const double cap = cap_dist(rng);
    Vector v(n);
    for (int i = 0; i < n; ++i) v[i] = unif(rng);
    const Vector g = project_capped_simplex(v, cap);

    worst = std::max(worst, std::abs(g.sum() - 1.0));
    worst = std::max(worst, std::max(-g.minCoeff(), g.maxCoeff() - cap));
    double tau_lo = -1e300, tau_hi = 1e300;  // bounds implied by boundary coords
    double tau_in_lo = 1e300, tau_in_hi = -1e300;
    for (int i = 0; i < n; ++i) {
      const double d = v[i] - g[i];
      if (g[i] <= 1e-12) {
        tau_lo = std::max(tau_lo, d);  // clamped at 0: v_i - tau <= 0
      } else if (g[i] >= cap - 1e-12) {
        tau_hi = std::min(tau_hi, d);  // clamped at cap: v_i - tau >= cap
      } else {
        tau_in_lo = std::min(tau_in_lo, d);
        tau_in_hi = std::max(tau_in_hi, d);
      }
    }
    if (tau_in_hi >= tau_in_lo) {  // some interior coordinate exists
      worst = std::max(worst, tau_in_hi - tau_in_lo);
      worst = std::max(worst, tau_lo - tau_in_hi);
      worst = std::max(worst, tau_in_lo - tau_hi);
    } else {
      worst = std::max(worst, tau_lo - tau_hi);
    }
  }
  const bool pass = worst <= 1e-8;
  std::cout << (pass ? "[PASS]" : "[FAIL]")
            << " capped-simplex projection KKT certificates, worst residual " << worst
            << "\n";
  return pass;
}

bool hard_solver_suite(Rng& rng, int instances) {
  std::uniform_int_distribution<int> n_dist(4, 8);
  std::uniform_int_distribution<int> p_dist(1, 2);
  int bad = 0;
  for (int t = 0; t < instances; ++t) {
    const int n = n_dist(rng);
    const int p = p_dist(rng);
    const Matrix X_t = gauss_matrix(4, p, rng);
    const Matrix X_c = gauss_matrix(n, p, rng);
    const Vector beta = gauss_vector(p, rng);
    const BalanceTargets targets = build_targets(X_t, X_c, beta, LinkSpec::logistic());
    BalanceConfig cfg;
    cfg.cap_override = 0.6;
    const BalancingWeights w = solve_weights_hard(targets, X_c, cfg);
    const double scale = 1.0 + targets.first_order_target.cwiseAbs().maxCoeff();
    const bool box_ok = w.gamma.minCoeff() >= -1e-9 && w.gamma.maxCoeff() <= w.cap + 1e-9;
    const bool sum_ok = std::abs(w.sum_gamma - 1.0) <= 1e-9;
    const bool resid_ok =
        !w.feasible || (w.achieved_c1 <= w.solver_report.radius_c1 + 1e-6 * scale &&
                        w.achieved_c2 <= w.solver_report.radius_c2 + 1e-6 * scale);
    if (!(box_ok && sum_ok && resid_ok)) ++bad;
  }
  const bool pass = bad == 0;
  std::cout << (pass ? "[PASS]" : "[FAIL]")
            << " hard-program solutions respect box/sum/reported radii, " << bad
            << " violations\n";
  return pass;
}

int cmd_project_test(const ProjectTestArgs& a) {
  Rng rng(static_cast<std::uint64_t>(a.seed));
  bool ok = true;
  ok &= links_fd_suite(rng, a.instances);
  ok &= projection_kkt_suite(rng, 5 * a.instances);
  ok &= hard_solver_suite(rng, std::max(20, a.instances / 4));
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nonlinear approximate residual balancing"};
  app.require_subcommand(1);

  EstimateArgs est;
  CLI::App* cmd_est = app.add_subcommand("estimate", "Estimate ATT or ATE from a CSV dataset");
  cmd_est->add_option("--data", est.data_path, "CSV file with header row")->required();
  cmd_est->add_option("--treatment", est.treatment, "treatment column name (default w)");
  cmd_est->add_option("--outcome", est.outcome, "outcome column name (default y)");
  cmd_est->add_option("--config", est.config_path, "key = value config file");
  cmd_est->add_option("--link", est.link_key,
                      "link override: identity|logistic|exp|softplus");
  cmd_est->add_option("--estimand", est.estimand, "att (default) or ate");
  cmd_est->add_option("--seed", est.seed, "fold-assignment seed (overrides config)");
  cmd_est->add_option("--out", est.out_path, "JSON report path (default: stdout)");
  cmd_est->add_option("--folds-out", est.folds_out, "per-fold balance CSV path");

  SimulateArgs sim;
  CLI::App* cmd_sim = app.add_subcommand("simulate", "Run the Monte Carlo harness");
  cmd_sim->add_option("--config", sim.config_path, "key = value config file (default: baseline)");
  cmd_sim->add_option("--replicates", sim.replicates, "override replicate count");
  cmd_sim->add_option("--seed", sim.seed, "override the base seed");
  cmd_sim->add_option("--out", sim.out_path, "JSON summary path (default: stdout)");
  cmd_sim->add_option("--rows-out", sim.rows_out, "per-replicate CSV path");

  DiagnoseArgs diag;
  CLI::App* cmd_diag = app.add_subcommand(
      "diagnose", "Full-sample balance diagnostics for a dataset");
  cmd_diag->add_option("--data", diag.data_path, "CSV file with header row")->required();
  cmd_diag->add_option("--treatment", diag.treatment, "treatment column name (default w)");
  cmd_diag->add_option("--outcome", diag.outcome, "outcome column name (default y)");
  cmd_diag->add_option("--config", diag.config_path, "key = value config file");
  cmd_diag->add_option("--link", diag.link_key,
                       "link override: identity|logistic|exp|softplus");
  cmd_diag->add_option("--beta", diag.beta_path,
                       "fitted coefficients file (one value per line); skips fitting");
  cmd_diag->add_option("--seed", diag.seed, "cross-validation seed");
  cmd_diag->add_option("--out", diag.out_path, "JSON report path (default: stdout)");

  ProjectTestArgs pt;
  CLI::App* cmd_pt = app.add_subcommand("project-test", "Run built-in oracle smoke suites");
  cmd_pt->add_option("--seed", pt.seed, "suite seed");
  cmd_pt->add_option("--instances", pt.instances, "instances per suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (cmd_est->parsed()) return cmd_estimate(est);
    if (cmd_sim->parsed()) return cmd_simulate(sim);
    if (cmd_diag->parsed()) return cmd_diagnose(diag);
    if (cmd_pt->parsed()) return cmd_project_test(pt);
  } catch (const InfeasibleBalanceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
