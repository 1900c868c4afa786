#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "qsa/mdp.hpp"
#include "qsa/policy.hpp"
#include "qsa/qlearn.hpp"
#include "qsa/sa.hpp"

namespace qsa {

// Cross-run view of an ensemble: all runs share one configuration and differ
// only in seed. `snap_metric(r, k)` is a scalar diagnostic of run r at
// snapshot instant snap_n[k] (what the band plots consume); `finals` feeds
// the covariance scalings.
struct EnsembleResult {
  std::vector<std::uint64_t> seeds;
  long n_final = 0;
  StepSchedule schedule;
  std::vector<Eigen::VectorXd> finals;
  std::vector<long> snap_n;
  Eigen::MatrixXd snap_metric;
};

enum class CovScaling { InverseAlpha, IterationCount };

struct ScaledCovariance {
  Eigen::MatrixXd sigma;  // scaled second moment of theta_final - theta_star
  Eigen::MatrixXd se;     // leave-one-out (jackknife) standard error per entry
  int n_runs = 0;
  bool low_sample_warning = false;  // fewer than 30 runs
};

// Empirical c * E[(theta - theta*)(theta - theta*)'] at the final step, with
// c = 1/alpha_n or c = n. Symmetric PSD by construction.
ScaledCovariance scaled_covariance(const EnsembleResult& ens, const Eigen::VectorXd& theta_star,
                                   CovScaling scaling);

struct NoiseCovariance {
  Eigen::MatrixXd sigma;
  int lags_used = 0;
  double slem = 0.0;       // second-largest eigenvalue modulus of the pair chain
  double tail_norm = 0.0;  // sup-norm of the last lag term processed
};

// Exact-model long-run covariance of the frozen-parameter update stream: the
// lag-zero second moment plus both-sided autocovariances through the chain's
// k-step kernels, truncated once a term falls below 1e-10 (or at `truncation`
// lags). Refuses chains with SLEM > 1 - 1e-6, where the geometric decay
// certificate is worthless.
NoiseCovariance noise_covariance(const ControlledMDP& mdp, const PolicySpec& policy,
                                 const LinearQ& q_star, int truncation);

struct BatchMeans {
  double mean = 0.0;
  double var_of_mean = 0.0;   // dispersion of batch means / n_batches
  double ci_half_width = 0.0; // Student-t, 95% two-sided
  double long_run_var = 0.0;  // batch_len * batch-mean variance
  int n_batches = 0;
  long burn_in = 0;
  long batch_len = 0;
};

// Steady-state mean and error bar from one long run: drop the first 10%,
// split the rest into contiguous batches, treat batch means as near-i.i.d.
BatchMeans batch_means(const std::vector<double>& run, int n_batches);

struct Histogram {
  Eigen::VectorXd edges;   // bins + 1 ascending
  Eigen::VectorXi counts;  // per bin; last edge inclusive
  long n = 0;
};

// Equal-width binning over [min, max]; a degenerate range becomes a unit
// interval centered on the value.
Histogram histogram(const std::vector<double>& values, int bins);

struct Band {
  std::vector<long> n;
  Eigen::VectorXd mean;
  Eigen::VectorXd lo;  // mean - 2 * cross-run std
  Eigen::VectorXd hi;
};

Band confidence_band(const EnsembleResult& ens);

// Heavy-tail heuristic: slope of the log-log rank plot over the top fifth of
// |values|, returned as the implied tail exponent (alpha < 2 means the
// second moment diverges and covariance scalings are meaningless). NaN when
// fewer than 10 positive entries exist.
double tail_index(const std::vector<double>& values);

}  // namespace qsa
