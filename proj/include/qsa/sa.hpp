#pragma once

#include <Eigen/Dense>

namespace qsa {

// Polynomial step-size rule alpha_n = min(1, g n^{-rho}). rho in (0.5, 1]
// gives square-summable but not summable steps; rho = 0 is admitted as the
// constant-gain special case used when a visit-count gain supplies the decay.
// Two-time-scale runs carry a second, slower-decaying rule beta_n for the
// auxiliary estimates; construction rejects rho_beta > rho because the
// auxiliary recursion must be the fast one (beta_n / alpha_n -> infinity).
// rho_beta == rho is legal but has no supporting theory; callers can detect
// that configuration through single_time_scale() and flag it.
struct StepSchedule {
  double g = 1.0;
  double rho = 1.0;
  bool has_beta = false;
  double g_beta = 1.0;
  double rho_beta = 0.85;

  StepSchedule() = default;
  StepSchedule(double g_, double rho_);
  StepSchedule(double g_, double rho_, double g_beta_, double rho_beta_);

  bool single_time_scale() const { return !has_beta || rho_beta == rho; }
};

double step_size(const StepSchedule& s, long n);       // alpha_n, n >= 1
double beta_step_size(const StepSchedule& s, long n);  // beta_n (= alpha_n when unset)

// theta_{n+1} = theta_n + alpha f; the unconditioned workhorse recursion.
struct PlainState {
  Eigen::VectorXd theta;
  long n = 0;
};

// Diagonal gain 1/(visit count), the classical asynchronous-update
// normalization: each coordinate advances at its own clock.
struct MatrixGainState {
  Eigen::VectorXd theta;
  Eigen::VectorXi counts;  // visits per coordinate, including the current one
  long n = 0;
};

// Newton-like recursion tracking the update's Jacobian with the fast
// schedule and preconditioning with its inverse.
struct ZapState {
  Eigen::VectorXd theta;
  Eigen::MatrixXd A_hat;
  long n = 0;
  long singular_events = 0;  // times the pseudo-inverse path was taken
};

// Inversion-free variant: auxiliary pair (w, z) chases the Newton direction
// on the fast time scale; the hot path is three matrix-vector products and
// never factorizes anything.
struct ZapZeroState {
  Eigen::VectorXd theta;
  Eigen::VectorXd w;
  Eigen::VectorXd z;
  Eigen::MatrixXd M;  // fixed symmetric positive definite conditioner
  long n = 0;
};

// Validates and installs M (identity when empty). Throws on an M that is not
// symmetric positive definite.
ZapZeroState zap_zero_init(const Eigen::VectorXd& theta0, Eigen::MatrixXd M = {});

// Running average of the iterates, kept as an exact sum / count.
struct PRAverager {
  Eigen::VectorXd sum;
  long count = 0;

  Eigen::VectorXd average() const;
};

void sa_step(PlainState& s, const Eigen::VectorXd& f_value, double alpha);

// Visit count of `coordinate` is bumped first, then the whole (single-
// coordinate-supported) increment is scaled by alpha / count.
void matrix_gain_step(MatrixGainState& s, int coordinate, const Eigen::VectorXd& increment,
                      double alpha);

// A_hat <- A_hat + beta (A_sample - A_hat), then theta <- theta - alpha *
// A_hat^{-1} f_value. Near-singular A_hat falls back to the pseudo-inverse
// and bumps singular_events instead of failing.
void zap_step(ZapState& s, const Eigen::VectorXd& f_value, const Eigen::MatrixXd& A_sample,
              double alpha, double beta);

// The three coupled updates, all right-hand sides evaluated at the incoming
// state:
//   theta <- theta - alpha [theta + M A' w]
//   w     <- w     - beta  [A (theta + z) - f_value]
//   z     <- z     - beta  [z - M A' w]
void zap_zero_step(ZapZeroState& s, const Eigen::VectorXd& f_value,
                   const Eigen::MatrixXd& A_sample, double alpha, double beta);

void pr_update(PRAverager& avg, const Eigen::VectorXd& theta);

}  // namespace qsa
