#include "qsa/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace qsa {

namespace {
constexpr double kPmfTol = 1e-12;
constexpr double kRankTol = 1e-9;  // singular values below this count as zero

double admissible_frobenius(const ControlledMDP& mdp, const QTable& Q) {
  double s = 0.0;
  for (int x = 0; x < mdp.n_states; ++x)
    for (int u = 0; u < mdp.n_actions; ++u)
      if (mdp.admissible(x, u)) s += Q(x, u) * Q(x, u);
  return std::sqrt(s);
}

double resolve_norm(const ControlledMDP& mdp, const QTable& Q, double theta_norm) {
  return std::isnan(theta_norm) ? admissible_frobenius(mdp, Q) : theta_norm;
}
}  // namespace

PolicySpec PolicySpec::oblivious_uniform() {
  PolicySpec p;
  p.kind = PolicyKind::Oblivious;
  p.epsilon = 0.0;
  return p;  // empty oblivious_pmf means "uniform over admissible" (filled per state)
}

void validate_policy(const ControlledMDP& mdp, const PolicySpec& policy) {
  if (!(policy.epsilon >= 0.0 && policy.epsilon <= 1.0))
    throw std::invalid_argument("policy: epsilon out of [0,1]");
  if (!(policy.kappa0 > 0.0)) throw std::invalid_argument("policy: kappa0 must be > 0");
  if (policy.nu_exp.size() != 0) {
    if (policy.nu_exp.size() != mdp.n_actions)
      throw std::invalid_argument("policy: nu_exp length != n_actions");
    if (policy.nu_exp.minCoeff() < 0.0 || std::abs(policy.nu_exp.sum() - 1.0) > kPmfTol)
      throw std::invalid_argument("policy: nu_exp is not a pmf");
  }
  if (policy.kind == PolicyKind::Oblivious && policy.oblivious_pmf.size() != 0) {
    if (policy.oblivious_pmf.rows() != mdp.n_states ||
        policy.oblivious_pmf.cols() != mdp.n_actions)
      throw std::invalid_argument("policy: oblivious pmf shape mismatch");
    for (int x = 0; x < mdp.n_states; ++x) {
      double s = 0.0;
      for (int u = 0; u < mdp.n_actions; ++u) {
        const double p = policy.oblivious_pmf(x, u);
        if (p < 0.0) throw std::invalid_argument("policy: negative oblivious pmf entry");
        if (p > 0.0 && !mdp.admissible(x, u))
          throw std::invalid_argument("policy: oblivious pmf puts mass on masked action");
        s += p;
      }
      if (std::abs(s - 1.0) > kPmfTol) {
        std::ostringstream os;
        os << "policy: oblivious pmf row " << x << " sums to " << s;
        throw std::invalid_argument(os.str());
      }
    }
  }
}

double kappa_theta(double kappa0, double theta_norm) {
  if (!(kappa0 > 0.0)) throw std::invalid_argument("kappa_theta: kappa0 must be > 0");
  if (theta_norm >= 1.0) return kappa0 / theta_norm;
  const double r = theta_norm * theta_norm;
  const double r3 = r * r * r;
  const double h = 1.0 + r3 * (19.0 / 8.0 + r * (-17.0 / 4.0 + r * (15.0 / 8.0)));
  return kappa0 * h;
}

double kappa_theta(double kappa0, const Eigen::VectorXd& theta) {
  return kappa_theta(kappa0, theta.norm());
}

double epsilon_gamma(double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("epsilon_gamma: gamma not in (0,1)");
  const double a = (1.0 - gamma) * (1.0 - gamma);
  return a / (a + gamma * gamma);
}

Eigen::VectorXd exploration_pmf(const ControlledMDP& mdp, const PolicySpec& policy, int x) {
  Eigen::VectorXd nu = Eigen::VectorXd::Zero(mdp.n_actions);
  double total = 0.0;
  for (int u = 0; u < mdp.n_actions; ++u) {
    if (!mdp.admissible(x, u)) continue;
    const double w = policy.nu_exp.size() ? policy.nu_exp(u) : 1.0;
    nu(u) = w;
    total += w;
  }
  if (!(total > 0.0))
    throw std::invalid_argument("exploration_pmf: nu has no mass on admissible actions");
  return nu / total;
}

Eigen::VectorXd theta_component_pmf(const ControlledMDP& mdp, const PolicySpec& policy,
                                    const QTable& Q, int x, double theta_norm) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(mdp.n_actions);
  switch (policy.kind) {
    case PolicyKind::Oblivious: {
      if (policy.oblivious_pmf.size() == 0) {  // default: uniform over admissible
        const int k = mdp.num_admissible(x);
        for (int u = 0; u < mdp.n_actions; ++u)
          if (mdp.admissible(x, u)) p(u) = 1.0 / k;
      } else {
        p = policy.oblivious_pmf.row(x);
      }
      return p;
    }
    case PolicyKind::EpsilonGreedy: {
      p(greedy_action(mdp, Q, x)) = 1.0;
      return p;
    }
    case PolicyKind::Gibbs:
    case PolicyKind::TamedGibbs: {
      const double kappa = policy.kind == PolicyKind::Gibbs
                               ? policy.kappa0
                               : kappa_theta(policy.kappa0, resolve_norm(mdp, Q, theta_norm));
      // Softmin with max-subtraction: exponents are <= 0, so no overflow.
      const double qmin = min_admissible(mdp, Q, x);
      double z = 0.0;
      for (int u = 0; u < mdp.n_actions; ++u)
        if (mdp.admissible(x, u)) {
          p(u) = std::exp(-kappa * (Q(x, u) - qmin));
          z += p(u);
        }
      p /= z;
      return p;
    }
  }
  throw std::logic_error("theta_component_pmf: unreachable");
}

Eigen::VectorXd action_pmf(const ControlledMDP& mdp, const PolicySpec& policy, const QTable& Q,
                           int x, double theta_norm) {
  Eigen::VectorXd comp = theta_component_pmf(mdp, policy, Q, x, theta_norm);
  if (policy.kind == PolicyKind::Oblivious) return comp;
  if (policy.epsilon == 0.0) return comp;
  const Eigen::VectorXd nu = exploration_pmf(mdp, policy, x);
  return (1.0 - policy.epsilon) * comp + policy.epsilon * nu;
}

JointTransition joint_transition(const ControlledMDP& mdp, const PolicySpec& policy,
                                 const QTable& Q, double theta_norm) {
  JointTransition jt;
  jt.map = TabularMap::of(mdp);
  const int Z = jt.map.dim();
  jt.T.resize(Z, Z);

  std::vector<Eigen::VectorXd> pmf(mdp.n_states);
  for (int x = 0; x < mdp.n_states; ++x) pmf[x] = action_pmf(mdp, policy, Q, x, theta_norm);

  for (int i = 0; i < Z; ++i) {
    const auto [x, u] = jt.map.pairs[i];
    for (int j = 0; j < Z; ++j) {
      const auto [xp, up] = jt.map.pairs[j];
      jt.T(i, j) = mdp.P[u](x, xp) * pmf[xp](up);
    }
  }
  return jt;
}

Eigen::VectorXd invariant_vector(const JointTransition& jt) {
  const int Z = static_cast<int>(jt.T.rows());
  const Eigen::MatrixXd A = jt.T.transpose() - Eigen::MatrixXd::Identity(Z, Z);

  // Uni-chain test: the invariance system must lose exactly one rank.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  int deficiency = 0;
  for (int i = 0; i < Z; ++i)
    if (svd.singularValues()(i) < kRankTol) ++deficiency;
  if (deficiency > 1)
    throw NotUniChainError("invariant_pmf: not uni-chain (invariance system rank deficiency " +
                           std::to_string(deficiency) + ")");

  // Direct solve of the invariance equations stacked with the normalization row.
  Eigen::MatrixXd sys(Z + 1, Z);
  sys.topRows(Z) = A;
  sys.bottomRows(1).setOnes();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(Z + 1);
  rhs(Z) = 1.0;
  Eigen::VectorXd pi = sys.colPivHouseholderQr().solve(rhs);

  // Clamp solver dust and renormalize before the residual check.
  for (int i = 0; i < Z; ++i)
    if (pi(i) < 0.0) {
      if (pi(i) < -1e-9) throw NotUniChainError("invariant_pmf: negative mass in solution");
      pi(i) = 0.0;
    }
  pi /= pi.sum();

  const double residual = (jt.T.transpose() * pi - pi).array().abs().sum();
  if (residual > 1e-10)
    throw NotUniChainError("invariant_pmf: residual " + std::to_string(residual) + " too large");
  return pi;
}

StateActionPmf invariant_pmf(const JointTransition& jt) {
  const Eigen::VectorXd pi = invariant_vector(jt);
  const int n_states = static_cast<int>(jt.map.index.rows());
  const int n_actions = static_cast<int>(jt.map.index.cols());
  StateActionPmf out = StateActionPmf::Zero(n_states, n_actions);
  for (int i = 0; i < jt.map.dim(); ++i) {
    const auto [x, u] = jt.map.pairs[i];
    out(x, u) = pi(i);
  }
  return out;
}

MinorizationReport minorization_report(const ControlledMDP& mdp, const PolicySpec& policy,
                                       const QTable& Q, double theta_norm) {
  MinorizationReport rep;
  rep.pi_theta = invariant_pmf(joint_transition(mdp, policy, Q, theta_norm));

  PolicySpec pure = policy;
  pure.kind = PolicyKind::EpsilonGreedy;  // component irrelevant at eps = 1
  pure.epsilon = 1.0;
  rep.pi_exp = invariant_pmf(joint_transition(mdp, pure, Q, theta_norm));

  rep.mu_theta = rep.pi_theta.rowwise().sum();
  rep.mu_exp = rep.pi_exp.rowwise().sum();

  double ratio = std::numeric_limits<double>::infinity();
  double slack = std::numeric_limits<double>::infinity();
  double dev = 0.0;
  for (int x = 0; x < mdp.n_states; ++x) {
    const Eigen::VectorXd nu = exploration_pmf(mdp, policy, x);
    for (int u = 0; u < mdp.n_actions; ++u) {
      if (!mdp.admissible(x, u)) continue;
      if (rep.pi_exp(x, u) > 1e-14)
        ratio = std::min(ratio, rep.pi_theta(x, u) / rep.pi_exp(x, u));
      slack = std::min(slack,
                       rep.pi_theta(x, u) - policy.epsilon * rep.mu_theta(x) * nu(u));
      dev = std::max(dev, std::abs(rep.pi_exp(x, u) - rep.mu_exp(x) * nu(u)));
    }
  }
  rep.delta_ratio = ratio;
  rep.floor_slack = slack;
  rep.product_form_dev = dev;
  return rep;
}

int sample_action(const ControlledMDP& mdp, const PolicySpec& policy, const QTable& Q, int x,
                  CounterRng& rng, double theta_norm) {
  if (policy.kind == PolicyKind::Oblivious) {
    const Eigen::VectorXd p = theta_component_pmf(mdp, policy, Q, x, theta_norm);
    return rng.next_index(p.data(), mdp.n_actions);
  }
  if (policy.epsilon > 0.0 && rng.next_double() < policy.epsilon) {
    const Eigen::VectorXd nu = exploration_pmf(mdp, policy, x);
    return rng.next_index(nu.data(), mdp.n_actions);
  }
  if (policy.kind == PolicyKind::EpsilonGreedy) return greedy_action(mdp, Q, x);
  const Eigen::VectorXd p = theta_component_pmf(mdp, policy, Q, x, theta_norm);
  return rng.next_index(p.data(), mdp.n_actions);
}

}  // namespace qsa
