#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qsa/mdp.hpp"
#include "qsa/policy.hpp"
#include "qsa/qlearn.hpp"
#include "qsa/stats.hpp"

namespace qsa {

// Malformed or inconsistent configuration input. The message always names
// the offending field.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Complete description of an experiment; everything a run needs flows from
// here plus the seed. Serialized as JSON with defaults filled in, so
// parse -> emit -> parse is the identity on the parsed value.
struct ExperimentConfig {
  std::string mdp_builtin = "six-state";  // ignored when mdp_file is set
  std::string mdp_file;
  double gamma = 0.8;

  std::string basis_kind = "tabular";  // "tabular" | "random"
  int basis_dim = 4;                   // random basis only

  PolicySpec policy = PolicySpec::oblivious_uniform();
  EstimatorConfig estimator;
  StepSchedule schedule;

  long n_steps = 100000;
  int n_runs = 1;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  Eigen::VectorXd theta0;  // empty = zero start
};

ExperimentConfig parse_config(const std::string& json_text);
std::string emit_config(const ExperimentConfig& cfg);

// Resolve the configured MDP (builtin by name, or a file) with the
// configured discount applied, and validate it.
ControlledMDP resolve_mdp(const ExperimentConfig& cfg);
Basis resolve_basis(const ExperimentConfig& cfg, const ControlledMDP& mdp);

ControlledMDP mdp_from_json(const std::string& text);
std::string mdp_to_json(const ControlledMDP& mdp);

std::string run_record_to_json(const RunRecord& rec);

// One row per (seed, snapshot); column set is fixed:
//   seed,n,bellman_max,span_err,theta_norm,pr_norm
std::string ensemble_csv(const std::vector<RunRecord>& runs);

// Self-contained figure files; no plotting dependency.
std::string svg_histogram(const Histogram& h, const std::string& title);
std::string svg_band(const Band& band, const std::string& title);
std::string svg_curves(const std::vector<long>& n,
                       const std::vector<std::pair<std::string, Eigen::VectorXd>>& curves,
                       const std::string& title);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace qsa
