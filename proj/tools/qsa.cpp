// qsa — experiment runner and verification harness for the finite-MDP
// stochastic-approximation laboratory.
//
// Subcommands:
//   solve     value-iteration Q* and projected-Bellman theta* for a config
//   run       closed-loop training runs (ensemble over consecutive seeds)
//   verify    exact-oracle invariant suites (see --list)
//   report    figures + summary table from a run directory's ensemble.csv
//   meanflow  dump A(theta), b(theta), f(theta), eigenvalues at theta0
//   pbe       projected-Bellman root from theta0
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "qsa/basis.hpp"
#include "qsa/io.hpp"
#include "qsa/linalg.hpp"
#include "qsa/mdp.hpp"
#include "qsa/meanflow.hpp"
#include "qsa/policy.hpp"
#include "qsa/qlearn.hpp"
#include "qsa/rng.hpp"
#include "qsa/sa.hpp"
#include "qsa/stats.hpp"

namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;
using namespace qsa;

namespace {

njson vec_json(const Eigen::VectorXd& v) {
  njson a = njson::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

njson mat_json(const Eigen::MatrixXd& m) {
  njson rows = njson::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    njson row = njson::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

Eigen::VectorXd initial_theta(const ExperimentConfig& cfg, const Basis& basis) {
  if (cfg.theta0.size() == 0) return Eigen::VectorXd::Zero(basis.dim());
  if (cfg.theta0.size() != basis.dim()) {
    std::ostringstream os;
    os << "theta0: length " << cfg.theta0.size() << " != basis dimension " << basis.dim();
    throw ConfigError(os.str());
  }
  return cfg.theta0;
}

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

// --- solve ----------------------------------------------------------------

int cmd_solve(const ExperimentConfig& cfg) {
  const ControlledMDP mdp = resolve_mdp(cfg);
  const Basis basis = resolve_basis(cfg, mdp);
  ensure_dir(cfg.out_dir);

  const QTable q_star = value_iteration(mdp, 1e-10);
  const double residual = bellman_error(mdp, q_star).second;

  njson jq;
  jq["gamma"] = mdp.gamma;
  jq["bellman_residual"] = residual;
  jq["cost_scale"] = mdp.cost_scale();
  jq["Q"] = mat_json(q_star);
  write_file(cfg.out_dir + "/qstar.json", jq.dump(2) + "\n");

  // Least-squares projection of Q* onto the basis is the natural Newton start.
  const Eigen::VectorXd qflat = flatten(basis.map, q_star);
  const Eigen::MatrixXd gram = basis.psi * basis.psi.transpose();
  const Eigen::VectorXd theta0 = gram.ldlt().solve(basis.psi * qflat);

  MeanFlowModel model(mdp, cfg.policy, basis);
  const PbeSolution sol = solve_pbe(model, theta0, 1e-10);

  njson jt;
  jt["theta"] = vec_json(sol.theta_star);
  jt["residual"] = sol.residual;
  jt["converged"] = sol.converged;
  jt["iterations"] = sol.iterations;
  write_file(cfg.out_dir + "/theta_star.json", jt.dump(2) + "\n");

  std::cout << "solve: value iteration residual " << residual << " (tol 1e-10)\n"
            << "solve: projected-Bellman residual " << sol.residual << " after "
            << sol.iterations << " iterations\n"
            << "solve: wrote " << cfg.out_dir << "/qstar.json, " << cfg.out_dir
            << "/theta_star.json\n";
  if (!sol.converged) {
    std::cerr << "solve: projected-Bellman iteration did not converge\n";
    return 3;
  }
  return 0;
}

// --- run ------------------------------------------------------------------

int cmd_run(const ExperimentConfig& cfg) {
  const ControlledMDP mdp = resolve_mdp(cfg);
  const Basis basis = resolve_basis(cfg, mdp);
  ensure_dir(cfg.out_dir);

  LinearQ q0{basis, initial_theta(cfg, basis)};
  std::vector<RunRecord> records;
  records.reserve(cfg.n_runs);
  for (int r = 0; r < cfg.n_runs; ++r) {
    const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(r);
    RunRecord rec = run_experiment(mdp, cfg.policy, q0, cfg.estimator, cfg.schedule,
                                   cfg.n_steps, seed);
    write_file(cfg.out_dir + "/run_" + std::to_string(seed) + ".json",
               run_record_to_json(rec));
    std::cout << "run: seed " << seed << "  bellman_max " << rec.final_bellman_max
              << "  span_err " << rec.final_span_err
              << (rec.aborted ? "  [aborted]" : "")
              << (rec.safeguard_hits > 0 ? "  [safeguarded]" : "") << "\n";
    records.push_back(std::move(rec));
  }
  write_file(cfg.out_dir + "/ensemble.csv", ensemble_csv(records));
  write_file(cfg.out_dir + "/config.json", emit_config(cfg));
  std::cout << "run: wrote " << records.size() << " records + ensemble.csv to " << cfg.out_dir
            << "\n";
  return 0;
}

// --- meanflow / pbe -------------------------------------------------------

int cmd_meanflow(const ExperimentConfig& cfg) {
  const ControlledMDP mdp = resolve_mdp(cfg);
  const Basis basis = resolve_basis(cfg, mdp);
  MeanFlowModel model(mdp, cfg.policy, basis);
  const Eigen::VectorXd theta = initial_theta(cfg, basis);

  const auto [A, b] = flow_matrices(model, theta);
  const Eigen::VectorXd f = mean_flow(model, theta);
  Eigen::EigenSolver<Eigen::MatrixXd> es(A);
  const Eigen::VectorXcd eig = es.eigenvalues();
  double max_re = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < eig.size(); ++i) max_re = std::max(max_re, eig(i).real());

  ensure_dir(cfg.out_dir);
  njson j;
  j["theta"] = vec_json(theta);
  j["A"] = mat_json(A);
  j["b"] = vec_json(b);
  j["f"] = vec_json(f);
  njson je = njson::array();
  for (Eigen::Index i = 0; i < eig.size(); ++i)
    je.push_back(njson{{"re", eig(i).real()}, {"im", eig(i).imag()}});
  j["eigenvalues"] = je;
  j["max_real_part"] = max_re;
  write_file(cfg.out_dir + "/meanflow.json", j.dump(2) + "\n");

  std::cout << "meanflow: |f(theta)| = " << f.norm() << "\n";
  for (Eigen::Index i = 0; i < eig.size(); ++i)
    std::cout << "meanflow: eig[" << i << "] = " << eig(i).real() << " + " << eig(i).imag()
              << "i\n";
  std::cout << "meanflow: max real part " << max_re << "; wrote " << cfg.out_dir
            << "/meanflow.json\n";
  return 0;
}

int cmd_pbe(const ExperimentConfig& cfg) {
  const ControlledMDP mdp = resolve_mdp(cfg);
  const Basis basis = resolve_basis(cfg, mdp);
  MeanFlowModel model(mdp, cfg.policy, basis);
  const PbeSolution sol = solve_pbe(model, initial_theta(cfg, basis), 1e-10);

  ensure_dir(cfg.out_dir);
  njson j;
  j["theta"] = vec_json(sol.theta_star);
  j["residual"] = sol.residual;
  j["converged"] = sol.converged;
  j["iterations"] = sol.iterations;
  write_file(cfg.out_dir + "/theta_star.json", j.dump(2) + "\n");

  std::cout << "pbe: residual " << sol.residual << " after " << sol.iterations
            << " iterations; wrote " << cfg.out_dir << "/theta_star.json\n";
  if (!sol.converged) {
    std::cerr << "pbe: iteration did not converge\n";
    return 3;
  }
  return 0;
}

// --- report ---------------------------------------------------------------

struct CsvRow {
  std::uint64_t seed;
  long n;
  double bellman_max, span_err, theta_norm, pr_norm;
};

std::vector<CsvRow> parse_ensemble_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "seed,n,bellman_max,span_err,theta_norm,pr_norm")
    throw std::runtime_error("ensemble.csv: unexpected header");
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    CsvRow r{};
    auto next = [&]() {
      if (!std::getline(ls, cell, ',')) throw std::runtime_error("ensemble.csv: short row");
      return cell;
    };
    r.seed = std::stoull(next());
    r.n = std::stol(next());
    r.bellman_max = std::stod(next());
    r.span_err = std::stod(next());
    r.theta_norm = std::stod(next());
    r.pr_norm = std::stod(next());
    rows.push_back(r);
  }
  return rows;
}

int cmd_report(const std::string& dir) {
  const auto rows = parse_ensemble_csv(read_file(dir + "/ensemble.csv"));
  if (rows.empty()) throw std::runtime_error("ensemble.csv: no data rows");

  std::map<std::uint64_t, std::vector<CsvRow>> by_seed;
  for (const auto& r : rows) by_seed[r.seed].push_back(r);
  const std::vector<long> grid = [&] {
    std::vector<long> g;
    for (const auto& r : by_seed.begin()->second) g.push_back(r.n);
    return g;
  }();
  for (const auto& [seed, rs] : by_seed) {
    if (rs.size() != grid.size()) throw std::runtime_error("runs disagree on snapshot grid");
    for (std::size_t k = 0; k < rs.size(); ++k)
      if (rs[k].n != grid[k]) throw std::runtime_error("runs disagree on snapshot grid");
  }

  const int n_runs = static_cast<int>(by_seed.size());
  const int n_snap = static_cast<int>(grid.size());
  Eigen::MatrixXd span(n_runs, n_snap), bell(n_runs, n_snap);
  {
    int r = 0;
    for (const auto& [seed, rs] : by_seed) {
      for (int k = 0; k < n_snap; ++k) {
        span(r, k) = rs[k].span_err;
        bell(r, k) = rs[k].bellman_max;
      }
      ++r;
    }
  }

  // final-snapshot dispersion
  std::vector<double> final_span(span.rows());
  for (int r = 0; r < span.rows(); ++r) final_span[r] = span(r, n_snap - 1);
  const Histogram hist = histogram(final_span, std::max(10, n_runs / 20));

  Band band;
  band.n = grid;
  band.mean = span.colwise().mean();
  Eigen::VectorXd sd(n_snap);
  for (int k = 0; k < n_snap; ++k) {
    const double m = band.mean(k);
    double s2 = 0.0;
    for (int r = 0; r < n_runs; ++r) s2 += (span(r, k) - m) * (span(r, k) - m);
    sd(k) = n_runs > 1 ? std::sqrt(s2 / (n_runs - 1)) : 0.0;
  }
  band.lo = band.mean - 2.0 * sd;
  band.hi = band.mean + 2.0 * sd;

  write_file(dir + "/histogram_final_span.svg",
             svg_histogram(hist, "final span error across " + std::to_string(n_runs) + " runs"));
  write_file(dir + "/band_span.svg", svg_band(band, "span error, mean +- 2 sd"));
  write_file(dir + "/curves_mean_errors.svg",
             svg_curves(grid,
                        {{"span_err mean", band.mean},
                         {"bellman_max mean", Eigen::VectorXd(bell.colwise().mean())}},
                        "ensemble mean errors"));

  std::ostringstream os;
  os << "runs: " << n_runs << "\nsnapshots: " << n_snap << " (n = " << grid.front() << " .. "
     << grid.back() << ")\n\n";
  os << "n,mean_bellman_max,mean_span_err,sd_span_err\n";
  for (int k = 0; k < n_snap; ++k)
    os << grid[k] << ',' << bell.col(k).mean() << ',' << band.mean(k) << ',' << sd(k) << '\n';
  double fmin = final_span[0], fmax = final_span[0], fsum = 0.0;
  for (double v : final_span) {
    fmin = std::min(fmin, v);
    fmax = std::max(fmax, v);
    fsum += v;
  }
  os << "\nfinal span_err: mean " << fsum / n_runs << ", min " << fmin << ", max " << fmax
     << "\n";
  const double alpha = tail_index(final_span);
  if (std::isfinite(alpha)) os << "tail exponent of final span_err (rank-plot slope): " << alpha << "\n";
  write_file(dir + "/summary.txt", os.str());

  std::cout << "report: " << n_runs << " runs, " << n_snap << " snapshots\n"
            << "report: wrote histogram_final_span.svg, band_span.svg, curves_mean_errors.svg, "
               "summary.txt to "
            << dir << "\n";
  return 0;
}

// --- verify suites --------------------------------------------------------

struct SuiteResult {
  bool pass = true;
  std::ostringstream detail;
};

QTable random_qtable(const ControlledMDP& mdp, CounterRng& rng, double scale) {
  QTable Q = QTable::Zero(mdp.n_states, mdp.n_actions);
  for (int x = 0; x < mdp.n_states; ++x)
    for (int u = 0; u < mdp.n_actions; ++u)
      if (mdp.admissible(x, u)) Q(x, u) = scale * rng.next_gaussian();
  return Q;
}

Eigen::VectorXd random_pmf(int m, CounterRng& rng) {
  Eigen::VectorXd v(m);
  for (int i = 0; i < m; ++i) v(i) = -std::log(rng.next_double_pos());
  return v / v.sum();
}

bool suite_minorization(std::uint64_t seed) {
  CounterRng root(seed, 101);
  double worst_floor = 1e9, worst_prod = 0.0, worst_dom = 1e9, worst_ratio = 1e9;
  for (int k = 0; k < 50; ++k) {
    CounterRng rng = root.split(k + 1);
    const int n = 2 + static_cast<int>(rng.next_u64() % 5);
    const int m = 2 + static_cast<int>(rng.next_u64() % 3);
    const double gamma = 0.3 + 0.6 * rng.next_double();
    const ControlledMDP mdp = random_mdp(n, m, gamma, rng, 0.2);

    PolicySpec policy;
    const int roll = static_cast<int>(rng.next_u64() % 3);
    policy.kind = roll == 0   ? PolicyKind::EpsilonGreedy
                  : roll == 1 ? PolicyKind::Gibbs
                              : PolicyKind::TamedGibbs;
    policy.epsilon = 0.05 + 0.9 * rng.next_double();
    policy.kappa0 = std::exp(rng.next_double() * std::log(50.0));
    if (rng.next_double() < 0.5) policy.nu_exp = random_pmf(m, rng);

    const QTable Q = random_qtable(mdp, rng, 2.0);
    const MinorizationReport rep = minorization_report(mdp, policy, Q);

    if (!(rep.delta_ratio > 0.0)) {
      std::cout << "  [FAIL] instance " << k << ": delta ratio " << rep.delta_ratio << "\n";
      return false;
    }
    worst_ratio = std::min(worst_ratio, rep.delta_ratio);
    for (int x = 0; x < n; ++x)
      for (int u = 0; u < m; ++u)
        if (rep.pi_exp(x, u) > 0.0) {
          const double slack = rep.pi_theta(x, u) - rep.delta_ratio * rep.pi_exp(x, u);
          if (slack < -1e-10) {
            std::cout << "  [FAIL] instance " << k << ": domination slack " << slack << "\n";
            return false;
          }
        }
    worst_floor = std::min(worst_floor, rep.floor_slack);
    worst_prod = std::max(worst_prod, rep.product_form_dev);
    if (rep.floor_slack < -1e-10 || rep.product_form_dev > 1e-10) {
      std::cout << "  [FAIL] instance " << k << ": floor " << rep.floor_slack << ", product dev "
                << rep.product_form_dev << "\n";
      return false;
    }

    // matrix version of the same domination, through a random basis
    const int d = std::min(4, TabularMap::of(mdp).dim());
    const Basis basis = Basis::random(mdp, d, rng);
    MeanFlowModel model(mdp, policy, basis);
    Eigen::VectorXd th(d);
    for (int i = 0; i < d; ++i) th(i) = rng.next_gaussian();
    const QTable Qth = q_table(basis, th);
    const MinorizationReport rep2 = minorization_report(mdp, policy, Qth, th.norm());
    const RMatrixFamily rm = r_matrices(model, th);
    const Eigen::MatrixXd gap = rm.R0 - rep2.delta_ratio * rm.R_EXP;
    const double dom = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gap).eigenvalues()(0);
    worst_dom = std::min(worst_dom, dom);
    if (dom < -1e-10) {
      std::cout << "  [FAIL] instance " << k << ": moment domination eigenvalue " << dom << "\n";
      return false;
    }
  }
  std::cout << "  50 random instances: min delta ratio " << worst_ratio << ", min floor slack "
            << worst_floor << ", max product-form dev " << worst_prod
            << ", min moment-domination eigenvalue " << worst_dom << "\n";
  return true;
}

bool suite_negativity(std::uint64_t seed) {
  struct Case {
    std::string name;
    ControlledMDP mdp;
  };
  CounterRng rng(seed, 103);
  std::vector<Case> cases;
  cases.push_back({"six-state g=0.5", six_state_example(0.5)});
  cases.push_back({"six-state g=0.8", six_state_example(0.8)});
  cases.push_back({"random 5x3 g=0.8", random_mdp(5, 3, 0.8, rng, 0.0)});

  bool ok = true;
  for (const auto& c : cases) {
    const double gamma = c.mdp.gamma;
    const double eps_g = epsilon_gamma(gamma);
    PolicySpec policy;
    policy.kind = PolicyKind::EpsilonGreedy;
    policy.epsilon = 0.5 * eps_g;
    MeanFlowModel model(c.mdp, policy, Basis::tabular(c.mdp));

    const NegativityCertificate good =
        negativity_certificate(model, 0.8 * eps_g, gamma, 200, seed);
    std::cout << "  " << c.name << ": eps = 0.8 eps_gamma = " << 0.8 * eps_g << ", coefficient "
              << good.coefficient << ", worst margins (greedy " << good.worst_margin_greedy
              << ", tamed " << good.worst_margin_tamed << ") -> "
              << (good.bound_holds ? "bound holds" : "BOUND VIOLATED") << "\n";
    if (!good.bound_holds || !good.all_negative || good.expected_failure) ok = false;

    const double eps_bad = std::min(0.99, 1.2 * eps_g);
    const NegativityCertificate bad = negativity_certificate(model, eps_bad, gamma, 50, seed);
    std::cout << "  " << c.name << ": eps = " << eps_bad << " > eps_gamma = " << eps_g
              << " -> coefficient " << bad.coefficient
              << (bad.expected_failure ? " (degenerate, as predicted)" : " UNEXPECTEDLY POSITIVE")
              << "\n";
    if (!bad.expected_failure || bad.coefficient > 0.0) ok = false;
  }
  return ok;
}

bool suite_scale_invariance(std::uint64_t seed) {
  CounterRng root(seed, 105);
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    CounterRng rng = root.split(k + 1);
    const int n = 2 + static_cast<int>(rng.next_u64() % 5);
    const int m = 2 + static_cast<int>(rng.next_u64() % 3);
    const ControlledMDP mdp = random_mdp(n, m, 0.8, rng, 0.2);

    PolicySpec policy;
    policy.kind = k % 2 == 0 ? PolicyKind::TamedGibbs : PolicyKind::EpsilonGreedy;
    policy.epsilon = 0.5 * rng.next_double();
    policy.kappa0 = std::exp(rng.next_double() * std::log(100.0));

    QTable Q = random_qtable(mdp, rng, 1.0);
    const TabularMap map = TabularMap::of(mdp);
    const double norm = flatten(map, Q).norm();
    const double target = 1.0 + 9.0 * rng.next_double();  // |theta| in [1, 10]
    Q *= target / norm;

    for (const double r : {1.5, 7.0, 300.0}) {
      for (int x = 0; x < n; ++x) {
        const Eigen::VectorXd p1 = action_pmf(mdp, policy, Q, x, target);
        const Eigen::VectorXd p2 = action_pmf(mdp, policy, r * Q, x, r * target);
        worst = std::max(worst, (p1 - p2).lpNorm<Eigen::Infinity>());
      }
    }
  }
  std::cout << "  50 random instances, scalings {1.5, 7, 300}: max policy deviation " << worst
            << " (tol 1e-10)\n";
  return worst <= 1e-10;
}

bool suite_softmin(std::uint64_t seed) {
  CounterRng root(seed, 107);
  double worst_lo = 1e9, worst_hi = 1e9;
  for (int k = 0; k < 50; ++k) {
    CounterRng rng = root.split(k + 1);
    const int n = 2 + static_cast<int>(rng.next_u64() % 5);
    const int m = 2 + static_cast<int>(rng.next_u64() % 3);
    const ControlledMDP mdp = random_mdp(n, m, 0.8, rng, 0.2);

    PolicySpec policy;
    policy.kind = PolicyKind::Gibbs;
    policy.epsilon = 0.0;
    policy.kappa0 = std::exp((2.0 * rng.next_double() - 1.0) * std::log(50.0));
    const QTable Q = random_qtable(mdp, rng, 3.0);

    for (int x = 0; x < n; ++x) {
      const Eigen::VectorXd p = theta_component_pmf(mdp, policy, Q, x);
      double v = 0.0;
      for (int u = 0; u < m; ++u) v += p(u) * (p(u) > 0.0 ? Q(x, u) : 0.0);
      const double lo = min_admissible(mdp, Q, x);
      const double hi = lo + std::log(static_cast<double>(mdp.num_admissible(x))) / policy.kappa0;
      worst_lo = std::min(worst_lo, v - lo);
      worst_hi = std::min(worst_hi, hi - v);
      if (v < lo - 1e-10 || v > hi + 1e-10) {
        std::cout << "  [FAIL] instance " << k << " state " << x << ": softmin value " << v
                  << " outside [" << lo << ", " << hi << "]\n";
        return false;
      }
    }
  }
  // temperature floor inside the unit ball, exact 1/|theta| law outside,
  // continuity at the seam
  double kmin = 1e9, kout = 0.0, kjump = 0.0;
  for (const double k0 : {0.3, 1.0, 42.0}) {
    for (double t = 0.0; t <= 1.0; t += 0.005) kmin = std::min(kmin, kappa_theta(k0, t) / k0);
    for (double t = 1.0; t <= 20.0; t += 0.1)
      kout = std::max(kout, std::abs(kappa_theta(k0, t) * t - k0) / k0);
    kjump = std::max(kjump, std::abs(kappa_theta(k0, 1.0 - 1e-9) - kappa_theta(k0, 1.0 + 1e-9)) / k0);
  }
  std::cout << "  sandwich slacks: min lower " << worst_lo << ", min upper " << worst_hi
            << "; temperature floor " << kmin << " (>= 0.5 inside the unit ball), outside-law dev "
            << kout << ", boundary jump " << kjump << "\n";
  return kmin >= 0.5 - 1e-12 && kout <= 1e-12 && kjump <= 1e-6;
}

bool suite_zapzero_spectrum(std::uint64_t seed) {
  const int d = 4;
  auto fast_matrix = [&](const Eigen::MatrixXd& A, const Eigen::MatrixXd& M) {
    Eigen::MatrixXd F = Eigen::MatrixXd::Zero(2 * d, 2 * d);
    F.block(0, d, d, d) = -A;
    F.block(d, 0, d, d) = M * A.transpose();
    F.block(d, d, d, d) = -Eigen::MatrixXd::Identity(d, d);
    return F;
  };
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);

  // A = M = I: every root of lambda^2 + lambda + 1 has real part -1/2
  Eigen::EigenSolver<Eigen::MatrixXd> es(fast_matrix(I, I));
  double dev = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
    dev = std::max(dev, std::abs(es.eigenvalues()(i).real() + 0.5));
  std::cout << "  A = M = I: max |Re(eig) + 1/2| = " << dev << "\n";
  if (dev > 1e-9) return false;

  CounterRng rng(seed, 109);
  double worst_re = -1e9, worst_pred_dev = 0.0;
  for (int k = 0; k < 20; ++k) {
    Eigen::MatrixXd A(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) A(i, j) = rng.next_gaussian();

    Eigen::EigenSolver<Eigen::MatrixXd> ef(fast_matrix(A, I));
    double max_re = -1e9;
    for (Eigen::Index i = 0; i < ef.eigenvalues().size(); ++i)
      max_re = std::max(max_re, ef.eigenvalues()(i).real());

    // prediction from the exact quadratic lambda^2 + lambda + mu, mu in spec(A'A)
    const Eigen::VectorXd mu =
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(A.transpose() * A).eigenvalues();
    double max_pred = -1e9;
    for (int i = 0; i < d; ++i) {
      const double disc = 1.0 - 4.0 * mu(i);
      max_pred = std::max(max_pred, disc >= 0.0 ? 0.5 * (-1.0 + std::sqrt(disc)) : -0.5);
    }
    worst_re = std::max(worst_re, max_re);
    worst_pred_dev = std::max(worst_pred_dev, std::abs(max_re - max_pred));
    if (max_re >= 0.0 || std::abs(max_re - max_pred) > 1e-8) {
      std::cout << "  [FAIL] draw " << k << ": max Re " << max_re << ", predicted " << max_pred
                << "\n";
      return false;
    }
  }
  std::cout << "  20 random draws: max Re(eig) = " << worst_re
            << " (all < 0), max |measured - quadratic prediction| = " << worst_pred_dev << "\n";
  return true;
}

bool suite_bridge(std::uint64_t seed) {
  CounterRng root(seed, 111);
  bool ok = true;
  for (int k = 0; k < 3; ++k) {
    CounterRng rng = root.split(k + 1);
    const ControlledMDP mdp = random_mdp(4, 3, 0.8, rng, 0.15);
    PolicySpec policy;
    if (k == 0) {
      policy = PolicySpec::oblivious_uniform();
    } else if (k == 1) {
      policy.kind = PolicyKind::EpsilonGreedy;
      policy.epsilon = 0.3;
    } else {
      policy.kind = PolicyKind::Gibbs;
      policy.epsilon = 0.2;
      policy.kappa0 = 2.0;
    }
    const Basis basis = Basis::tabular(mdp);
    Eigen::VectorXd theta(basis.dim());
    for (int i = 0; i < theta.size(); ++i) theta(i) = rng.next_gaussian();

    MeanFlowModel model(mdp, policy, basis);
    const Eigen::VectorXd exact = mean_flow(model, theta);
    const StreamAverage sim =
        frozen_stream_average(mdp, policy, LinearQ{basis, theta}, 2000000, seed + k, 32);

    double worst_sigmas = 0.0;
    for (int i = 0; i < exact.size(); ++i) {
      const double se = std::max(sim.std_error(i), 1e-12);
      worst_sigmas = std::max(worst_sigmas, std::abs(sim.mean(i) - exact(i)) / se);
    }
    std::cout << "  triple " << k << ": max |simulated - exact| = " << worst_sigmas
              << " batch-means sigmas (limit 4)\n";
    if (worst_sigmas > 4.0) ok = false;
  }
  return ok;
}

int cmd_verify(const std::string& suite, std::uint64_t seed) {
  struct Entry {
    const char* name;
    bool (*fn)(std::uint64_t);
  };
  const std::vector<Entry> all = {
      {"minorization", suite_minorization},   {"negativity", suite_negativity},
      {"scale-invariance", suite_scale_invariance}, {"softmin", suite_softmin},
      {"zapzero-spectrum", suite_zapzero_spectrum}, {"bridge", suite_bridge},
  };

  std::vector<Entry> selected;
  if (suite == "all") {
    selected = all;
  } else {
    for (const auto& e : all)
      if (suite == e.name) selected.push_back(e);
    if (selected.empty()) {
      std::ostringstream os;
      os << "verify: unknown suite '" << suite << "' (available:";
      for (const auto& e : all) os << ' ' << e.name;
      os << ", all)";
      throw ConfigError(os.str());
    }
  }

  int passed = 0;
  for (const auto& e : selected) {
    std::cout << "suite " << e.name << ":\n";
    const bool ok = e.fn(seed);
    std::cout << (ok ? "[pass] " : "[FAIL] ") << e.name << "\n";
    passed += ok ? 1 : 0;
  }
  std::cout << "verify: " << passed << "/" << selected.size() << " suites passed\n";
  return passed == static_cast<int>(selected.size()) ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"finite-MDP stochastic-approximation laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_override, suite = "all", records_dir;
  std::uint64_t seed_override = 0;
  long steps_override = 0;
  int runs_override = 0;

  auto add_common = [&](CLI::App* sc, bool need_config) {
    auto* opt = sc->add_option("--config", config_path, "experiment configuration (JSON)");
    if (need_config) opt->required();
    sc->add_option("--seed", seed_override, "override the config seed");
    sc->add_option("--out", out_override, "override the output directory");
    sc->add_option("--runs", runs_override, "override the ensemble size");
    sc->add_option("--steps", steps_override, "override the step count");
  };

  CLI::App* sc_solve = app.add_subcommand("solve", "exact Q* and projected-Bellman theta*");
  add_common(sc_solve, true);
  CLI::App* sc_run = app.add_subcommand("run", "closed-loop training runs");
  add_common(sc_run, true);
  CLI::App* sc_meanflow = app.add_subcommand("meanflow", "dump A(theta), b(theta), eigenvalues");
  add_common(sc_meanflow, true);
  CLI::App* sc_pbe = app.add_subcommand("pbe", "projected-Bellman root");
  add_common(sc_pbe, true);

  CLI::App* sc_verify = app.add_subcommand("verify", "exact-oracle invariant suites");
  sc_verify->add_option("suite", suite,
                        "minorization | negativity | scale-invariance | softmin | "
                        "zapzero-spectrum | bridge | all");
  sc_verify->add_option("--seed", seed_override, "suite randomization seed");

  CLI::App* sc_report = app.add_subcommand("report", "figures + summary from a run directory");
  sc_report->add_option("dir", records_dir, "directory holding ensemble.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sc_verify->parsed())
      return cmd_verify(suite, sc_verify->count("--seed") ? seed_override : 2026);
    if (sc_report->parsed()) return cmd_report(records_dir);

    ExperimentConfig cfg;
    try {
      cfg = parse_config(read_file(config_path));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(e.what());  // unreadable config file is a config error
    }
    CLI::App* active = app.get_subcommands().front();
    if (active->count("--seed")) cfg.seed = seed_override;
    if (active->count("--out")) cfg.out_dir = out_override;
    if (active->count("--runs")) {
      if (runs_override < 1) throw ConfigError("runs: expected a positive integer");
      cfg.n_runs = runs_override;
    }
    if (active->count("--steps")) {
      if (steps_override < 1) throw ConfigError("steps: expected a positive integer");
      cfg.n_steps = steps_override;
    }

    if (sc_solve->parsed()) return cmd_solve(cfg);
    if (sc_run->parsed()) return cmd_run(cfg);
    if (sc_meanflow->parsed()) return cmd_meanflow(cfg);
    if (sc_pbe->parsed()) return cmd_pbe(cfg);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
