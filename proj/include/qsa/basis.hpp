#pragma once

#include <Eigen/Dense>

#include "qsa/mdp.hpp"
#include "qsa/rng.hpp"

namespace qsa {

// Linear function class for Q approximation: Q_theta(x,u) = theta . psi(x,u).
// psi is stored column-per-admissible-pair in the TabularMap coordinate order,
// so the tabular case is simply psi = identity and theta is the flattened
// Q-table.
struct Basis {
  TabularMap map;
  Eigen::MatrixXd psi;  // d x map.dim()

  int dim() const { return static_cast<int>(psi.rows()); }

  static Basis tabular(const ControlledMDP& mdp);

  // Dense Gaussian basis, d rows; generic draws give full row rank, which is
  // rechecked by the analyses that need positive-definite autocorrelations.
  static Basis random(const ControlledMDP& mdp, int d, CounterRng& rng);
};

// Unflatten theta into a Q-table (zeros on masked pairs).
QTable q_table(const Basis& basis, const Eigen::VectorXd& theta);

// Flatten an admissible-pair table into the tabular coordinate vector.
Eigen::VectorXd flatten(const TabularMap& map, const QTable& Q);

}  // namespace qsa
