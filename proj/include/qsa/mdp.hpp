#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "qsa/rng.hpp"

namespace qsa {

// Q-functions and state-action pmfs are plain (n_states x n_actions) matrices
// indexed (x,u). Inadmissible pairs are carried along as zeros and excluded
// from every minimum / expectation through the owning ControlledMDP's mask.
using QTable = Eigen::MatrixXd;
using StateActionPmf = Eigen::MatrixXd;

// Finite controlled Markov chain with discounted cost.
//
// Transition matrices are stored per action: P[u](x, x') = P_u(x, x').
// Admissibility is encoded in the cost matrix: an inadmissible (x,u) carries
// cost +infinity, its transition row is an unused self-loop, and it never
// participates in minima, policies, or the tabular basis.
struct ControlledMDP {
  int n_states = 0;
  int n_actions = 0;
  std::vector<Eigen::MatrixXd> P;  // one (n_states x n_states) matrix per action
  Eigen::MatrixXd cost;            // (n_states x n_actions); +inf marks inadmissible
  double gamma = 0.0;

  bool admissible(int x, int u) const { return std::isfinite(cost(x, u)); }

  int num_admissible(int x) const {
    int k = 0;
    for (int u = 0; u < n_actions; ++u) k += admissible(x, u) ? 1 : 0;
    return k;
  }

  // Largest finite |c(x,u)|; the natural scale of one-step costs.
  double cost_scale() const;
};

// Enumeration of admissible (x,u) pairs: flat coordinate i <-> pair (x,u).
// This is the coordinate system of the tabular basis and of every flattened
// parameter vector; pairs are ordered by state, then action index.
struct TabularMap {
  std::vector<std::pair<int, int>> pairs;  // i -> (x,u)
  Eigen::MatrixXi index;                   // (x,u) -> i, or -1 when masked

  static TabularMap of(const ControlledMDP& mdp);
  int dim() const { return static_cast<int>(pairs.size()); }
};

// Report-only consistency check: returns a list of violated invariants
// (row sums, negative probabilities, discount range, admissibility, shapes).
// Empty report means the MDP is well formed.
std::vector<std::string> validate(const ControlledMDP& mdp);

// Minimum of Q(x,.) over admissible actions, and its lowest-index argmin.
double min_admissible(const ControlledMDP& mdp, const QTable& Q, int x);
int greedy_action(const ControlledMDP& mdp, const QTable& Q, int x);

// Vector of min_u Q(x,u) over admissible actions for every state.
Eigen::VectorXd min_vector(const ControlledMDP& mdp, const QTable& Q);

// Successive approximation of the dynamic-programming equation
//   Q(x,u) = c(x,u) + gamma * sum_x' P_u(x,x') min_u' Q(x',u')
// run until the sup-norm Bellman residual is <= tol. Throws if tol is below
// what double precision can achieve for this instance.
QTable value_iteration(const ControlledMDP& mdp, double tol);

// Pointwise Bellman error
//   B(x,u) = c(x,u) + gamma * sum_x' P_u(x,x') min_u' Q(x',u') - Q(x,u)
// on admissible pairs (zero on masked ones), plus its max absolute value.
std::pair<QTable, double> bellman_error(const ControlledMDP& mdp, const QTable& Q);

// Span seminorm of the difference: min_a sup |Q1 - Q2 - a| = (max D - min D)/2.
// The two-argument form ranges over all entries; the mdp-aware form restricts
// to admissible pairs (the masked zeros of a flattened table would otherwise
// pollute the extrema).
double span_seminorm(const QTable& Q1, const QTable& Q2);
double span_seminorm(const ControlledMDP& mdp, const QTable& Q1, const QTable& Q2);

// H = Q - <nu,Q> * 1, the Q-function relative to its nu-average.
QTable relative_qfunction(const QTable& Q, const StateActionPmf& nu);

// Benchmark instance: six nodes, undirected edge set
// {1-2, 1-3, 2-3, 2-4, 3-5, 4-5, 4-6, 5-6}, actions = moves to neighbors
// (indexed by sorted neighbor list), each move succeeds with probability 0.8
// (otherwise the state holds), unit cost per move; node 6 renews to node 1
// deterministically at zero cost. 15 admissible pairs in total.
ControlledMDP six_state_example(double gamma);

// Random dense instance: every transition row of an admissible pair is
// strictly positive (so any full-support policy induces an irreducible joint
// chain), costs are uniform on [0,1), and each pair is masked independently
// with probability mask_prob (every state keeps at least one action).
ControlledMDP random_mdp(int n_states, int n_actions, double gamma, CounterRng& rng,
                         double mask_prob = 0.0);

// One step of the controlled chain: x' ~ P_u(x, .), drawn by inverse CDF.
int sample_transition(const ControlledMDP& mdp, int x, int u, CounterRng& rng);

}  // namespace qsa
