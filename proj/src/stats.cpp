#include "qsa/stats.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qsa {

ScaledCovariance scaled_covariance(const EnsembleResult& ens, const Eigen::VectorXd& theta_star,
                                   CovScaling scaling) {
  const int N = static_cast<int>(ens.finals.size());
  if (N == 0) throw std::invalid_argument("scaled_covariance: empty ensemble");
  if (ens.n_final < 1) throw std::invalid_argument("scaled_covariance: missing final step count");
  const int d = static_cast<int>(theta_star.size());

  const double c = scaling == CovScaling::InverseAlpha
                       ? 1.0 / step_size(ens.schedule, ens.n_final)
                       : static_cast<double>(ens.n_final);

  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(d, d);
  std::vector<Eigen::MatrixXd> outer(N);
  for (int r = 0; r < N; ++r) {
    if (ens.finals[r].size() != d)
      throw std::invalid_argument("scaled_covariance: run dimension mismatch");
    const Eigen::VectorXd e = ens.finals[r] - theta_star;
    outer[r] = e * e.transpose();
    S += outer[r];
  }

  ScaledCovariance out;
  out.n_runs = N;
  out.low_sample_warning = N < 30;
  out.sigma = (c / N) * S;
  out.sigma = 0.5 * (out.sigma + out.sigma.transpose().eval());

  out.se = Eigen::MatrixXd::Zero(d, d);
  if (N >= 2) {
    // Leave-one-out spread of the estimate.
    Eigen::MatrixXd mean_loo = Eigen::MatrixXd::Zero(d, d);
    std::vector<Eigen::MatrixXd> loo(N);
    for (int r = 0; r < N; ++r) {
      loo[r] = (c / (N - 1)) * (S - outer[r]);
      mean_loo += loo[r];
    }
    mean_loo /= N;
    for (int r = 0; r < N; ++r)
      out.se.array() += (loo[r] - mean_loo).array().square();
    out.se = (out.se * (static_cast<double>(N - 1) / N)).cwiseSqrt();
  }
  return out;
}

NoiseCovariance noise_covariance(const ControlledMDP& mdp, const PolicySpec& policy,
                                 const LinearQ& q_star, int truncation) {
  if (truncation < 0) throw std::invalid_argument("noise_covariance: negative truncation");
  const TabularMap& map = q_star.basis.map;
  const int Z = map.dim();
  const int d = q_star.basis.dim();
  const QTable Q = q_table(q_star.basis, q_star.theta);
  const double norm = q_star.theta.norm();

  const JointTransition jt = joint_transition(mdp, policy, Q, norm);
  const Eigen::VectorXd pi = invariant_vector(jt);

  NoiseCovariance out;
  {
    Eigen::VectorXcd ev = Eigen::EigenSolver<Eigen::MatrixXd>(jt.T, false).eigenvalues();
    std::vector<double> mods(ev.size());
    for (int i = 0; i < ev.size(); ++i) mods[i] = std::abs(ev(i));
    std::sort(mods.begin(), mods.end(), std::greater<>());
    out.slem = mods.size() > 1 ? mods[1] : 0.0;
  }
  if (out.slem > 1.0 - 1e-6)
    throw std::runtime_error("noise_covariance: pair chain SLEM " + std::to_string(out.slem) +
                             " leaves no geometric decay margin");

  // Per-pair Bellman quantities of the frozen parameter.
  const Eigen::VectorXd under = min_vector(mdp, Q);
  Eigen::VectorXd dbar(Z);
  for (int i = 0; i < Z; ++i) {
    const auto [x, u] = map.pairs[i];
    dbar(i) = mdp.cost(x, u) + mdp.gamma * mdp.P[u].row(x).dot(under) - Q(x, u);
  }

  // Action-selection kernel S(x, z') and the stationary mean of the stream.
  Eigen::MatrixXd Ssel = Eigen::MatrixXd::Zero(mdp.n_states, Z);
  for (int x = 0; x < mdp.n_states; ++x) {
    const Eigen::VectorXd p = action_pmf(mdp, policy, Q, x, norm);
    for (int u = 0; u < mdp.n_actions; ++u)
      if (map.index(x, u) >= 0) Ssel(x, map.index(x, u)) = p(u);
  }

  Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
  for (int i = 0; i < Z; ++i) mu.noalias() += pi(i) * dbar(i) * q_star.basis.psi.col(i);

  // Lag zero: second moment over the transition draw.
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(d, d);
  for (int i = 0; i < Z; ++i) {
    const auto [x, u] = map.pairs[i];
    double m2 = 0.0;
    for (int xn = 0; xn < mdp.n_states; ++xn) {
      const double dv = mdp.cost(x, u) + mdp.gamma * under(xn) - Q(x, u);
      m2 += mdp.P[u](x, xn) * dv * dv;
    }
    sigma.noalias() += pi(i) * m2 * q_star.basis.psi.col(i) * q_star.basis.psi.col(i).transpose();
  }
  sigma.noalias() -= mu * mu.transpose();

  // Positive lags through the chain's k-step kernels; negative lags are the
  // transposes.
  Eigen::MatrixXd W(Z, d);  // T^{m-1} applied to rows dbar(z) psi_z'
  for (int i = 0; i < Z; ++i) W.row(i) = dbar(i) * q_star.basis.psi.col(i).transpose();
  for (int m = 1; m <= truncation; ++m) {
    const Eigen::MatrixXd V = Ssel * W;  // expected future row given landing state
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(d, d);
    for (int i = 0; i < Z; ++i) {
      const auto [x, u] = map.pairs[i];
      Eigen::RowVectorXd future = Eigen::RowVectorXd::Zero(d);
      for (int xn = 0; xn < mdp.n_states; ++xn) {
        const double p = mdp.P[u](x, xn);
        if (p == 0.0) continue;
        future.noalias() +=
            p * (mdp.cost(x, u) + mdp.gamma * under(xn) - Q(x, u)) * V.row(xn);
      }
      C.noalias() += pi(i) * q_star.basis.psi.col(i) * future;
    }
    C.noalias() -= mu * mu.transpose();
    sigma += C + C.transpose();
    out.lags_used = m;
    out.tail_norm = C.cwiseAbs().maxCoeff();
    if (out.tail_norm < 1e-10) break;
    W = jt.T * W;
  }

  sigma = 0.5 * (sigma + sigma.transpose().eval());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma, Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-8 * scale)
    throw std::logic_error("noise_covariance: truncated sum lost positive semidefiniteness");
  out.sigma = std::move(sigma);
  return out;
}

BatchMeans batch_means(const std::vector<double>& run, int n_batches) {
  if (n_batches < 2) throw std::invalid_argument("batch_means: need at least 2 batches");
  const long L = static_cast<long>(run.size());
  if (L < 100L * n_batches)
    throw std::invalid_argument("batch_means: run shorter than 100 x n_batches");

  BatchMeans out;
  out.n_batches = n_batches;
  out.burn_in = L / 10;
  out.batch_len = (L - out.burn_in) / n_batches;

  std::vector<double> bm(n_batches, 0.0);
  for (int b = 0; b < n_batches; ++b) {
    const long start = out.burn_in + static_cast<long>(b) * out.batch_len;
    for (long k = start; k < start + out.batch_len; ++k) bm[b] += run[k];
    bm[b] /= static_cast<double>(out.batch_len);
    out.mean += bm[b];
  }
  out.mean /= n_batches;

  double s2 = 0.0;
  for (double v : bm) s2 += (v - out.mean) * (v - out.mean);
  s2 /= (n_batches - 1);
  out.var_of_mean = s2 / n_batches;
  out.long_run_var = s2 * static_cast<double>(out.batch_len);
  boost::math::students_t_distribution<double> t(n_batches - 1);
  out.ci_half_width = boost::math::quantile(t, 0.975) * std::sqrt(out.var_of_mean);
  return out;
}

Histogram histogram(const std::vector<double>& values, int bins) {
  if (values.empty()) throw std::invalid_argument("histogram: no values");
  if (bins < 1) throw std::invalid_argument("histogram: need at least one bin");
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (lo == hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram h;
  h.n = static_cast<long>(values.size());
  h.edges = Eigen::VectorXd::LinSpaced(bins + 1, lo, hi);
  h.counts = Eigen::VectorXi::Zero(bins);
  const double w = (hi - lo) / bins;
  for (double v : values) {
    int b = static_cast<int>((v - lo) / w);
    b = std::clamp(b, 0, bins - 1);
    ++h.counts(b);
  }
  return h;
}

Band confidence_band(const EnsembleResult& ens) {
  const int R = static_cast<int>(ens.snap_metric.rows());
  const int K = static_cast<int>(ens.snap_metric.cols());
  if (R == 0 || K == 0 || static_cast<std::size_t>(K) != ens.snap_n.size())
    throw std::invalid_argument("confidence_band: ensemble has no snapshot metrics");
  Band band;
  band.n = ens.snap_n;
  band.mean = ens.snap_metric.colwise().mean();
  Eigen::VectorXd sd = Eigen::VectorXd::Zero(K);
  if (R > 1) {
    for (int k = 0; k < K; ++k) {
      const double m = band.mean(k);
      double s = 0.0;
      for (int r = 0; r < R; ++r) s += (ens.snap_metric(r, k) - m) * (ens.snap_metric(r, k) - m);
      sd(k) = std::sqrt(s / (R - 1));
    }
  }
  band.lo = band.mean - 2.0 * sd;
  band.hi = band.mean + 2.0 * sd;
  return band;
}

double tail_index(const std::vector<double>& values) {
  std::vector<double> mags;
  mags.reserve(values.size());
  for (double v : values)
    if (std::abs(v) > 0.0 && std::isfinite(v)) mags.push_back(std::abs(v));
  if (mags.size() < 10) return NAN;
  std::sort(mags.begin(), mags.end(), std::greater<>());
  const std::size_t m = std::max<std::size_t>(10, mags.size() / 5);
  // Least-squares slope of log(rank) against log(value) over the upper tail.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < m && i < mags.size(); ++i) {
    const double lx = std::log(mags[i]);
    const double ly = std::log(static_cast<double>(i + 1));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double k = static_cast<double>(std::min(m, mags.size()));
  const double denom = k * sxx - sx * sx;
  if (std::abs(denom) < 1e-12) return NAN;
  const double slope = (k * sxy - sx * sy) / denom;
  return -slope;
}

}  // namespace qsa
