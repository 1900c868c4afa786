#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qsa/basis.hpp"
#include "qsa/mdp.hpp"
#include "qsa/policy.hpp"
#include "qsa/sa.hpp"

namespace qsa {

// Linearly parameterized Q-function Q(x,u) = theta . psi(x,u). The tabular
// case is basis = identity, theta = flattened table.
struct LinearQ {
  Basis basis;
  Eigen::VectorXd theta;

  double value(int x, int u) const {
    const int i = basis.map.index(x, u);
    return i >= 0 ? theta.dot(basis.psi.col(i)) : 0.0;
  }
};

// One observed transition of the training chain. u_next is carried only by
// the on-policy stream (-1 otherwise).
struct TransitionSample {
  int x = 0;
  int u = 0;
  int x_next = 0;
  int u_next = -1;
  double cost = 0.0;
};

// Watkins update direction at one sample:
//   f = (c + gamma min_u' Q(x',u') - Q(x,u)) psi(x,u)
// together with the one-sample Jacobian psi_n (gamma psi'_greedy - psi_n)',
// the quantity averaged by the Newton-like schemes. The greedy argmin takes
// the lowest index on ties.
std::pair<Eigen::VectorXd, Eigen::MatrixXd> td_term(const LinearQ& q, const TransitionSample& s,
                                                    double gamma);

// Same temporal difference with the minimum replaced by the action actually
// taken at x': f = (c + gamma Q(x',u') - Q(x,u)) psi(x,u).
Eigen::VectorXd on_policy_td_term(const LinearQ& q, const TransitionSample& s, double gamma);

// Watkins direction shifted by delta times the nu-weighted mean of Q. Its
// stationary fixed point is the optimal table minus the constant
// delta <nu, Q*> / (1 - gamma + delta), so the greedy policy is untouched
// while the flow loses its near-zero eigenvalue at discounts close to one.
Eigen::VectorXd relative_td_term(const LinearQ& q, const TransitionSample& s, double gamma,
                                 double delta, const StateActionPmf& nu);

// Uniform pmf over admissible pairs (the default relative-stream weighting).
StateActionPmf uniform_pair_pmf(const TabularMap& map);

enum class EstimatorKind { Plain, MatrixGain, Zap, ZapZero };
enum class TdVariant { Watkins, OnPolicy, Relative };

struct EstimatorConfig {
  EstimatorKind kind = EstimatorKind::Plain;
  TdVariant td = TdVariant::Watkins;
  double delta = 1.0;         // relative-stream shift rate
  StateActionPmf nu;          // relative-stream weights; empty = uniform
  Eigen::MatrixXd M;          // ZapZero conditioner; empty = identity
  bool safeguard = false;     // project ||theta|| onto a ball instead of overflowing
  double safeguard_radius = 1e8;
};

// Everything a run leaves behind: parameter snapshots on a logarithmic grid,
// running averages, error metrics against the exactly solved instance, and
// an event log. Two runs with equal (config, seed) are bit-identical.
struct RunRecord {
  std::uint64_t seed = 0;
  long n_steps = 0;
  EstimatorConfig config;
  StepSchedule schedule;

  std::vector<long> snap_n;                 // 0, the rounded powers of 1.2, n_steps
  std::vector<Eigen::VectorXd> snap_theta;
  std::vector<Eigen::VectorXd> snap_pr;     // running averages at the same instants
  std::vector<double> snap_bellman_max;     // max |Bellman error| over admissible pairs
  std::vector<double> snap_span_err;        // span seminorm of Q^theta - Q*
  std::vector<double> snap_cond;            // cond(A_hat); Zap runs only

  Eigen::VectorXd theta_final;
  Eigen::VectorXd theta_pr;
  double final_bellman_max = 0.0;
  double final_span_err = 0.0;

  std::vector<int> action_head;             // first recorded actions (stream audit)
  long safeguard_hits = 0;
  long singular_events = 0;
  bool aborted = false;
  std::vector<std::string> events;
};

// n = 0, round(1.2^k) deduplicated, and n_steps itself.
std::vector<long> snapshot_grid(long n_steps);

// Closed-loop simulation: the chain moves under the policy evaluated at the
// current parameter, the chosen temporal-difference stream feeds the chosen
// estimator, and metrics are recorded on the snapshot grid. All randomness
// derives from `seed` through fixed substreams (actions / transitions /
// Jacobian warmup), so records are reproducible bit for bit.
RunRecord run_experiment(const ControlledMDP& mdp, const PolicySpec& policy, const LinearQ& q0,
                         const EstimatorConfig& est, const StepSchedule& sched, long n_steps,
                         std::uint64_t seed);

// Time average of the Watkins direction along a frozen-parameter run, with
// per-coordinate batch-means standard errors. This is the Monte-Carlo side
// of the stationary-expectation bridge.
struct StreamAverage {
  Eigen::VectorXd mean;
  Eigen::VectorXd std_error;
  long n_used = 0;
};

StreamAverage frozen_stream_average(const ControlledMDP& mdp, const PolicySpec& policy,
                                    const LinearQ& q, long n_steps, std::uint64_t seed,
                                    int n_batches = 32);

}  // namespace qsa
