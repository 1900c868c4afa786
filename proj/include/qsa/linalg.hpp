#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace qsa {

// Global operation tally for the cost-model tests: every routed linear solve
// and every counted matrix-vector product ticks here. Reset before a probe,
// read after. Not atomic -- the probes run single-threaded by design.
struct OpCounters {
  static long linear_solves;
  static long matvecs;
  static long pinv_fallbacks;  // times lu_or_regularized_solve rejected its LU
  static void reset() { linear_solves = 0; matvecs = 0; pinv_fallbacks = 0; }
};

// Solve A x = rhs through the SVD, dropping singular values below
// rel_tol * sigma_max (pseudo-inverse on the numerically regular part).
// Ticks OpCounters::linear_solves. Returns the number of dropped singular
// values through *dropped when given.
Eigen::VectorXd regularized_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& rhs,
                                  double rel_tol = 1e-8, int* dropped = nullptr);

// LU solve with a residual honesty check; falls back to regularized_solve
// when the factorization is unreliable. Ticks OpCounters::linear_solves once.
Eigen::VectorXd lu_or_regularized_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& rhs);

}  // namespace qsa
