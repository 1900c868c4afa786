#pragma once

#include <Eigen/Dense>
#include <stdexcept>

#include "qsa/mdp.hpp"
#include "qsa/rng.hpp"

namespace qsa {

// Thrown when a joint chain fails the uni-chain requirement (the eigenvalue-1
// eigenspace of its transition matrix is not one-dimensional).
struct NotUniChainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class PolicyKind { Oblivious, EpsilonGreedy, Gibbs, TamedGibbs };

// Randomized stationary policy family used to drive training runs.
//
//   Oblivious      fixed conditional pmf phi(u|x), ignores the parameter
//   EpsilonGreedy  (1-eps) * greedy(Q) + eps * nu
//   Gibbs          (1-eps) * softmin_kappa0(Q)  + eps * nu
//   TamedGibbs     like Gibbs, but with parameter-dependent temperature
//                  kappa_theta = kappa0/||theta|| for ||theta|| >= 1 (scale
//                  invariant at large parameters), C^2 interpolation inside
//                  the unit ball.
//
// nu is the exploration distribution; when empty it defaults to uniform, and
// in every case it is restricted and renormalized to the admissible actions
// of the queried state.
struct PolicySpec {
  PolicyKind kind = PolicyKind::EpsilonGreedy;
  double epsilon = 0.0;
  double kappa0 = 1.0;
  Eigen::VectorXd nu_exp;          // length n_actions, or empty for uniform
  Eigen::MatrixXd oblivious_pmf;   // (n_states x n_actions), Oblivious only

  static PolicySpec oblivious_uniform();  // uniform over admissible actions
};

// Joint state-action chain z = (x,u) restricted to admissible pairs:
// T(z,z') = P_u(x,x') * phi(u'|x'). Row-stochastic by construction.
struct JointTransition {
  Eigen::MatrixXd T;
  TabularMap map;
};

// Throws std::invalid_argument when the policy block is malformed for this mdp.
void validate_policy(const ControlledMDP& mdp, const PolicySpec& policy);

// Parameter-dependent inverse temperature: kappa0/||theta|| outside the unit
// ball, and kappa0 * h(||theta||^2) inside, where h is the unique quintic with
// h(0)=1, h'(0)=h''(0)=0 joining r^{-1/2} with two continuous derivatives at
// r=1. Inside the unit ball the value stays >= kappa0/2 (in fact >= kappa0).
double kappa_theta(double kappa0, double theta_norm);
double kappa_theta(double kappa0, const Eigen::VectorXd& theta);

// Exploration threshold: eps_gamma = (1-g)^2 / ((1-g)^2 + g^2).
double epsilon_gamma(double gamma);

// Exploration pmf nu restricted to admissible(x) and renormalized.
Eigen::VectorXd exploration_pmf(const ControlledMDP& mdp, const PolicySpec& policy, int x);

// The parameter-driven component of the policy (the part played with
// probability 1-eps): greedy point mass, softmin pmf, or the stored pmf.
// theta_norm feeds the tamed temperature; pass NaN to use the Frobenius norm
// of Q over admissible pairs (exact in the tabular parameterization).
Eigen::VectorXd theta_component_pmf(const ControlledMDP& mdp, const PolicySpec& policy,
                                    const QTable& Q, int x, double theta_norm = NAN);

// Full action distribution phi~(.|x), the eps-mixture of the component above
// with the exploration pmf (Oblivious policies return their stored row as is).
Eigen::VectorXd action_pmf(const ControlledMDP& mdp, const PolicySpec& policy, const QTable& Q,
                           int x, double theta_norm = NAN);

// T(z,z') = P_u(x,x') * action_pmf(u'|x') over admissible pairs.
JointTransition joint_transition(const ControlledMDP& mdp, const PolicySpec& policy,
                                 const QTable& Q, double theta_norm = NAN);

// Unique invariant pmf of T as a flat vector over admissible pairs, by direct
// linear solve of the invariance system with a normalization row; verified to
// residual ||pi T - pi||_1 <= 1e-10. Throws NotUniChainError when the
// eigenvalue-1 eigenspace is degenerate (singular values below 1e-9 counted
// as rank deficiency).
Eigen::VectorXd invariant_vector(const JointTransition& jt);

// Same measure unflattened to an (x,u) matrix (zeros on masked pairs).
StateActionPmf invariant_pmf(const JointTransition& jt);

// Doeblin-style minorization constants of the training chain, computed from
// exact invariant measures.
struct MinorizationReport {
  StateActionPmf pi_theta;       // invariant pmf of the policy's joint chain
  StateActionPmf pi_exp;         // invariant pmf of the pure-exploration chain
  Eigen::VectorXd mu_theta;      // state marginal of pi_theta
  Eigen::VectorXd mu_exp;        // state marginal of pi_exp
  double delta_ratio = 0.0;      // min_z pi_theta(z)/pi_exp(z) over supp(pi_exp)
  double floor_slack = 0.0;      // min_z [pi_theta(x,u) - eps mu_theta(x) nu_x(u)]
  double product_form_dev = 0.0; // max_z |pi_exp(x,u) - mu_exp(x) nu_x(u)|
};

MinorizationReport minorization_report(const ControlledMDP& mdp, const PolicySpec& policy,
                                       const QTable& Q, double theta_norm = NAN);

// Structural draw: B ~ Bernoulli(eps) selects exploration W ~ nu_x, otherwise
// the parameter-driven component. Marginal distribution equals action_pmf.
int sample_action(const ControlledMDP& mdp, const PolicySpec& policy, const QTable& Q, int x,
                  CounterRng& rng, double theta_norm = NAN);

}  // namespace qsa
