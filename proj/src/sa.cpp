#include "qsa/sa.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "qsa/linalg.hpp"

namespace qsa {

namespace {

void check_rho(double g, double rho, const char* which) {
  if (!(g > 0.0))
    throw std::invalid_argument(std::string("StepSchedule: ") + which + " gain must be > 0");
  const bool ok = rho == 0.0 || (rho > 0.5 && rho <= 1.0);
  if (!ok)
    throw std::invalid_argument(std::string("StepSchedule: ") + which +
                                " exponent must be 0 or in (0.5, 1]");
}

void check_finite(const Eigen::VectorXd& v, const char* op, long n) {
  if (!v.allFinite())
    throw std::runtime_error(std::string(op) + ": non-finite update at n=" + std::to_string(n));
}

}  // namespace

StepSchedule::StepSchedule(double g_, double rho_) : g(g_), rho(rho_) {
  check_rho(g, rho, "alpha");
}

StepSchedule::StepSchedule(double g_, double rho_, double g_beta_, double rho_beta_)
    : g(g_), rho(rho_), has_beta(true), g_beta(g_beta_), rho_beta(rho_beta_) {
  check_rho(g, rho, "alpha");
  check_rho(g_beta, rho_beta, "beta");
  if (rho_beta > rho)
    throw std::invalid_argument(
        "StepSchedule: beta must decay no faster than alpha (rho_beta <= rho)");
}

double step_size(const StepSchedule& s, long n) {
  if (n < 1) throw std::invalid_argument("step_size: n must be >= 1");
  return std::min(1.0, s.g * std::pow(static_cast<double>(n), -s.rho));
}

double beta_step_size(const StepSchedule& s, long n) {
  if (n < 1) throw std::invalid_argument("beta_step_size: n must be >= 1");
  if (!s.has_beta) return step_size(s, n);
  return std::min(1.0, s.g_beta * std::pow(static_cast<double>(n), -s.rho_beta));
}

ZapZeroState zap_zero_init(const Eigen::VectorXd& theta0, Eigen::MatrixXd M) {
  const int d = static_cast<int>(theta0.size());
  ZapZeroState s;
  s.theta = theta0;
  s.w = Eigen::VectorXd::Zero(d);
  s.z = Eigen::VectorXd::Zero(d);
  if (M.size() == 0) {
    s.M = Eigen::MatrixXd::Identity(d, d);
    return s;
  }
  if (M.rows() != d || M.cols() != d)
    throw std::invalid_argument("zap_zero_init: M dimension mismatch");
  if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + M.cwiseAbs().maxCoeff()))
    throw std::invalid_argument("zap_zero_init: M must be symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() <= 0.0)
    throw std::invalid_argument("zap_zero_init: M must be positive definite");
  s.M = std::move(M);
  return s;
}

Eigen::VectorXd PRAverager::average() const {
  if (count == 0) throw std::logic_error("PRAverager: average of empty stream");
  return sum / static_cast<double>(count);
}

void sa_step(PlainState& s, const Eigen::VectorXd& f_value, double alpha) {
  if (f_value.size() != s.theta.size()) throw std::invalid_argument("sa_step: dimension mismatch");
  check_finite(f_value, "sa_step", s.n);
  s.theta.noalias() += alpha * f_value;
  ++s.n;
}

void matrix_gain_step(MatrixGainState& s, int coordinate, const Eigen::VectorXd& increment,
                      double alpha) {
  if (increment.size() != s.theta.size())
    throw std::invalid_argument("matrix_gain_step: dimension mismatch");
  if (coordinate < 0 || coordinate >= s.counts.size())
    throw std::out_of_range("matrix_gain_step: coordinate out of range");
  check_finite(increment, "matrix_gain_step", s.n);
  const int c = ++s.counts(coordinate);
  s.theta.noalias() += (alpha / static_cast<double>(std::max(c, 1))) * increment;
  ++s.n;
}

void zap_step(ZapState& s, const Eigen::VectorXd& f_value, const Eigen::MatrixXd& A_sample,
              double alpha, double beta) {
  if (f_value.size() != s.theta.size() || A_sample.rows() != s.theta.size() ||
      A_sample.cols() != s.theta.size())
    throw std::invalid_argument("zap_step: dimension mismatch");
  check_finite(f_value, "zap_step", s.n);
  // Jacobian estimate moves first so the very same step is preconditioned
  // with the freshest information.
  s.A_hat += beta * (A_sample - s.A_hat);
  const long solves_before = OpCounters::linear_solves;
  const long singulars_before = OpCounters::pinv_fallbacks;
  const Eigen::VectorXd dir = lu_or_regularized_solve(s.A_hat, f_value);
  (void)solves_before;
  if (OpCounters::pinv_fallbacks != singulars_before) ++s.singular_events;
  s.theta.noalias() -= alpha * dir;
  ++s.n;
}

void zap_zero_step(ZapZeroState& s, const Eigen::VectorXd& f_value,
                   const Eigen::MatrixXd& A_sample, double alpha, double beta) {
  const auto d = s.theta.size();
  if (f_value.size() != d || A_sample.rows() != d || A_sample.cols() != d)
    throw std::invalid_argument("zap_zero_step: dimension mismatch");
  check_finite(f_value, "zap_zero_step", s.n);
  // Three matrix-vector products and no factorization; L = M A' is applied
  // right-to-left, never formed.
  const Eigen::VectorXd At_w = A_sample.transpose() * s.w;
  const Eigen::VectorXd Lw = s.M * At_w;
  const Eigen::VectorXd A_tz = A_sample * (s.theta + s.z);
  OpCounters::matvecs += 3;
  s.theta -= alpha * (s.theta + Lw);
  s.w -= beta * (A_tz - f_value);
  s.z -= beta * (s.z - Lw);
  ++s.n;
}

void pr_update(PRAverager& avg, const Eigen::VectorXd& theta) {
  if (avg.count == 0)
    avg.sum = theta;
  else
    avg.sum += theta;
  ++avg.count;
}

}  // namespace qsa
