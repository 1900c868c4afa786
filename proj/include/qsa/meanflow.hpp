#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "qsa/basis.hpp"
#include "qsa/mdp.hpp"
#include "qsa/policy.hpp"

namespace qsa {

// Model-based analysis context for a Q-learning setup: the controlled chain,
// the training policy family, and the linear basis. Expectations against the
// stationary law of the induced joint chain are computed exactly (invariant
// pmf by direct solve), never by simulation.
//
// Invariant measures are memoized within the object: policies whose joint
// chain depends on theta only through the greedy selector (oblivious,
// epsilon-greedy) are cached per selector, the Gibbs variants keep a
// last-theta memo. The memo makes the object non-thread-safe; copy the model
// per thread instead of sharing it.
struct MeanFlowModel {
  const ControlledMDP* mdp = nullptr;
  PolicySpec policy;
  Basis basis;

  MeanFlowModel() = default;
  MeanFlowModel(const ControlledMDP& m, PolicySpec p, Basis b);

  // memoization (see above)
  mutable std::map<std::vector<int>, Eigen::VectorXd> pi_by_selector;
  mutable Eigen::VectorXd memo_theta;
  mutable Eigen::VectorXd memo_pi;
  mutable bool memo_valid = false;
  mutable Eigen::VectorXd memo_pi_exp;  // pure-exploration chain (theta-free)

  void clear_memo() const;
};

// Stationary pmf of the joint (x,u) chain at parameter theta, as a flat
// vector over admissible pairs.
Eigen::VectorXd stationary_vector(const MeanFlowModel& model, const Eigen::VectorXd& theta);

// Exact mean flow  f(theta) = E_pi_theta[ psi_n * B(X_n,U_n; theta) ]  with
// B(x,u;theta) = c(x,u) + gamma * sum_x' P_u(x,x') min_u' Q_theta(x',u')
//              - Q_theta(x,u).
Eigen::VectorXd mean_flow(const MeanFlowModel& model, const Eigen::VectorXd& theta);

// The affine decomposition f(theta) = A(theta) theta - b(theta) with
//   A(theta) = -E[ psi_n (psi_n - gamma psi(X_{n+1}, greedy(X_{n+1})))^T ]
//   b(theta) = -E[ psi_n c_n ].
// For epsilon-greedy policies the result is cross-checked internally against
// the autocorrelation decomposition -[R0 - gamma R_minus1] + eps gamma D
// to 1e-10 (throws std::logic_error on disagreement).
std::pair<Eigen::MatrixXd, Eigen::VectorXd> flow_matrices(const MeanFlowModel& model,
                                                          const Eigen::VectorXd& theta);

// Stationary autocorrelation family at theta. R_Theta uses the policy's
// parameter-driven component (the greedy point mass for epsilon-greedy, the
// softmin pmf for the Gibbs variants), which makes the mixture identity
// R0 = (1-eps) R_Theta + eps R_EXP_theta exact for every mixed policy kind.
// D compares the greedy successor feature against the exploration-averaged
// one; E compares it against the component-averaged one (zero for
// epsilon-greedy).
struct RMatrixFamily {
  Eigen::MatrixXd R0, R_minus1, R_Theta, R_EXP_theta, R_EXP, D, E;
  double min_eig_R0 = 0.0;        // PSD checks, recorded at construction
  double min_eig_R_Theta = 0.0;
  double min_eig_R_EXP_theta = 0.0;
  double min_eig_R_EXP = 0.0;
  double mixture_identity_dev = 0.0;  // max-abs dev of the eps-mixture identity
};

RMatrixFamily r_matrices(const MeanFlowModel& model, const Eigen::VectorXd& theta);

// Randomized audit of the drift inequalities behind the stability theory.
// For each sampled theta (norms >= 1) it forms the exploration-mixed A(theta)
// under (i) the epsilon-greedy policy, testing v' A v against the per-theta
// bound -[(1-gamma) - eps gamma eta*] lambda_min(R0(theta)), and (ii) the
// tamed-Gibbs policy, testing theta' A theta against the same bound plus the
// softmin slack gamma (1-eps) (log|U| / kappa0) sqrt(lambda_max(R0)).
struct NegativityCertificate {
  double epsilon = 0.0, gamma = 0.0;
  double eps_threshold = 0.0;      // (1-g)^2 / ((1-g)^2 + g^2)
  double eta_star = 0.0;           // sqrt(1/eps + 1/(1-eps))
  double coefficient = 0.0;        // (1-gamma) - eps gamma eta_star
  bool expected_failure = false;   // eps >= threshold or coefficient <= 0
  int n_samples = 0;
  double lambda_min_R0 = 0.0;      // min over samples of lambda_min(R0(theta))
  double analytic_bound = 0.0;     // -coefficient * lambda_min_R0
  double worst_ratio_greedy = 0.0; // max of v'Av/|v|^2, eps-greedy
  double worst_margin_greedy = 0.0;// max of (ratio - per-theta bound)
  double worst_ratio_tamed = 0.0;  // max of th'A th/|th|^2, tamed Gibbs
  double worst_margin_tamed = 0.0; // max of (ratio - per-theta bound - slack)
  double kappa_slack = 0.0;        // largest softmin slack used
  bool all_negative = false;       // every sampled quadratic form < 0
  bool bound_holds = false;        // all margins <= 1e-9
};

NegativityCertificate negativity_certificate(const MeanFlowModel& model, double epsilon,
                                             double gamma, int n_samples,
                                             std::uint64_t seed = 12345);

// Fixed-step classical Runge-Kutta integration of an arbitrary field.
// Aborts (diverged = true) when the iterate norm passes 1e12.
struct OdeTrajectory {
  std::vector<double> t;
  std::vector<Eigen::VectorXd> theta;
  bool diverged = false;

  const Eigen::VectorXd& back() const { return theta.back(); }
};

using VectorField = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

OdeTrajectory ode_integrate(const VectorField& field, const Eigen::VectorXd& theta0,
                            double horizon, double step);

// Ready-made fields.
VectorField mean_flow_field(const MeanFlowModel& model);
// Newton-Raphson flow -J(theta)^{-1} f(theta) with finite-difference Jacobian.
VectorField newton_flow_field(const MeanFlowModel& model);
// Piecewise flow -theta + A(theta)^{-1} b(theta) (frozen-policy A, regularized
// inverse); inside one greedy continuity region this integrates to an exact
// exponential approach to the region's equilibrium.
VectorField zap_greedy_field(const MeanFlowModel& model);
// -A(theta)^T M f(theta) for a PSD weighting M (identity by default).
VectorField gq_flow_field(const MeanFlowModel& model, Eigen::MatrixXd M = Eigen::MatrixXd());

// Visit-normalized tabular dynamic-programming flow over admissible pairs:
//   dq/dt (x,u) = c(x,u) + gamma sum_x' P_u(x,x') min q(x',.) - q(x,u),
// whose sup-norm distance to the flattened Q* decays at rate (1-gamma).
VectorField dp_flow_field(const ControlledMDP& mdp);
// Same with the relative correction -delta <nu, q> applied to every pair.
VectorField relative_dp_flow_field(const ControlledMDP& mdp, double delta,
                                   const Eigen::VectorXd& nu_weights);

// Exact Jacobians of the two flows above at Q, with the greedy selector
// frozen at its lowest-index argmin: gamma P_phi S_phi - I, where S_phi
// places each state on its selected pair. The frozen-selector form is what
// a finite-difference stencil cannot deliver at a greedy tie. The standard
// flow always carries the eigenvalue -(1-gamma) on the all-ones direction;
// the relative correction -delta 1 nu' moves exactly that mode.
Eigen::MatrixXd dp_flow_jacobian(const ControlledMDP& mdp, const QTable& Q);
Eigen::MatrixXd relative_dp_flow_jacobian(const ControlledMDP& mdp, const QTable& Q, double delta,
                                          const Eigen::VectorXd& nu_weights);

// Scaled limit lim_r f(r theta)/r. Exact radial shortcut A(theta/|theta|)theta
// for policies invariant under parameter scaling (oblivious, eps-greedy, tamed
// Gibbs); finite-r approximation at r = 1e6 otherwise. Returns 0 at theta = 0.
Eigen::VectorXd ode_at_infinity(const MeanFlowModel& model, const Eigen::VectorXd& theta);

// Central finite-difference Jacobian of the mean flow with spectrum report.
// Default fd_step = 1e-5 (1 + |theta|). For epsilon-greedy models the report
// flags evaluation points whose difference stencil straddles a greedy
// switching surface.
struct LinearizationReport {
  Eigen::MatrixXd A_star;
  Eigen::VectorXcd eigenvalues;
  bool hurwitz = false;
  double margin = 0.0;  // max real part
  bool switching_warning = false;
};

LinearizationReport linearize(const MeanFlowModel& model, const Eigen::VectorXd& theta,
                              double fd_step = NAN);

// Damped Newton on the exact mean flow: full step solve J dtheta = -f with a
// pseudo-inverse fallback (singular values below 1e-8 sigma_max dropped),
// backtracking by halving up to 30 times, and a frozen-policy-Jacobian retry
// when the finite-difference Jacobian stalls. Never silent: the residual
// trace rides along in the result.
struct PbeSolution {
  Eigen::VectorXd theta_star;
  double residual = 0.0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> trace;  // residual after each accepted step
};

PbeSolution solve_pbe(const MeanFlowModel& model, const Eigen::VectorXd& theta0, double tol);

// Mean-square Bellman error objective 0.5 E_pi_theta[B^2] and its two descent
// directions: the model-based residual gradient (occupation measure treated
// as frozen -- exact for oblivious training) and the GQ field -A^T M f.
struct ResidualGradient {
  Eigen::VectorXd baird_gradient;
  Eigen::VectorXd gq_field;
};

double mean_square_bellman_error(const MeanFlowModel& model, const Eigen::VectorXd& theta);
ResidualGradient residual_gradient_field(const MeanFlowModel& model, const Eigen::VectorXd& theta,
                                         Eigen::MatrixXd M = Eigen::MatrixXd());

}  // namespace qsa
