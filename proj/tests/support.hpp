#pragma once

// Shared helpers for the unit suites: deterministic instances, independent
// oracles (power iteration, finite differences), and approx comparisons.

#include <Eigen/Dense>
#include <cmath>
#include <functional>

#include "qsa/mdp.hpp"
#include "qsa/policy.hpp"
#include "qsa/rng.hpp"

namespace testsupport {

// Deterministic two-state instance with a hand-solved optimal table at
// gamma = 0.5:
//   Q*(0, stay) = 1.5   Q*(0, switch) = 1.0
//   Q*(1, stay) = 0.0   Q*(1, switch) = 0.5
inline qsa::ControlledMDP two_state(double gamma = 0.5) {
  qsa::ControlledMDP mdp;
  mdp.n_states = 2;
  mdp.n_actions = 2;
  mdp.gamma = gamma;
  mdp.cost.resize(2, 2);
  mdp.cost << 1.0, 1.0, 0.0, 0.0;
  mdp.P.assign(2, Eigen::MatrixXd::Zero(2, 2));
  mdp.P[0](0, 0) = 1.0;  // stay
  mdp.P[0](1, 1) = 1.0;
  mdp.P[1](0, 1) = 1.0;  // switch
  mdp.P[1](1, 0) = 1.0;
  return mdp;
}

// Invariant pmf by brute-force power iteration -- the independent oracle for
// the direct-solve implementation.
inline Eigen::VectorXd power_iteration_pmf(const Eigen::MatrixXd& T, double tol = 1e-13,
                                           int max_iter = 2000000) {
  const int n = static_cast<int>(T.rows());
  Eigen::RowVectorXd pi = Eigen::RowVectorXd::Constant(n, 1.0 / n);
  for (int k = 0; k < max_iter; ++k) {
    Eigen::RowVectorXd next = pi * T;
    next /= next.sum();
    if ((next - pi).lpNorm<Eigen::Infinity>() < tol) return next.transpose();
    pi = next;
  }
  return pi.transpose();
}

// Central finite-difference Jacobian of an arbitrary field.
inline Eigen::MatrixXd fd_jacobian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h = 1e-6) {
  const Eigen::VectorXd f0 = f(x);
  Eigen::MatrixXd J(f0.size(), x.size());
  for (int j = 0; j < x.size(); ++j) {
    Eigen::VectorXd xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    J.col(j) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return J;
}

inline double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).lpNorm<Eigen::Infinity>();
}

inline Eigen::VectorXd gaussian_vector(int d, qsa::CounterRng& rng, double scale = 1.0) {
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v(i) = scale * rng.next_gaussian();
  return v;
}

inline qsa::QTable gaussian_qtable(const qsa::ControlledMDP& mdp, qsa::CounterRng& rng,
                                   double scale = 1.0) {
  qsa::QTable Q = qsa::QTable::Zero(mdp.n_states, mdp.n_actions);
  for (int x = 0; x < mdp.n_states; ++x)
    for (int u = 0; u < mdp.n_actions; ++u)
      if (mdp.admissible(x, u)) Q(x, u) = scale * rng.next_gaussian();
  return Q;
}

}  // namespace testsupport
