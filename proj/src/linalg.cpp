#include "qsa/linalg.hpp"

namespace qsa {

long OpCounters::linear_solves = 0;
long OpCounters::matvecs = 0;
long OpCounters::pinv_fallbacks = 0;

Eigen::VectorXd regularized_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& rhs,
                                  double rel_tol, int* dropped) {
  ++OpCounters::linear_solves;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double cut = sv.size() ? rel_tol * sv(0) : 0.0;
  Eigen::VectorXd inv_sv = Eigen::VectorXd::Zero(sv.size());
  int n_dropped = 0;
  for (int i = 0; i < sv.size(); ++i) {
    if (sv(i) > cut && sv(i) > 0.0)
      inv_sv(i) = 1.0 / sv(i);
    else
      ++n_dropped;
  }
  if (dropped) *dropped = n_dropped;
  return svd.matrixV() * inv_sv.asDiagonal() * (svd.matrixU().transpose() * rhs);
}

Eigen::VectorXd lu_or_regularized_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& rhs) {
  ++OpCounters::linear_solves;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
  Eigen::VectorXd x = lu.solve(rhs);
  const double resid = (A * x - rhs).norm();
  if (x.allFinite() && resid <= 1e-8 * (1.0 + rhs.norm())) return x;
  --OpCounters::linear_solves;  // the fallback ticks for itself
  ++OpCounters::pinv_fallbacks;
  return regularized_solve(A, rhs);
}

}  // namespace qsa
