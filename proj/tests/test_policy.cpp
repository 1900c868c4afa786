#include <cmath>
#include <limits>

#include "doctest.h"
#include "qsa/mdp.hpp"
#include "qsa/policy.hpp"
#include "support.hpp"

using namespace qsa;
using testsupport::two_state;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

PolicySpec eps_greedy(double eps) {
  PolicySpec p;
  p.kind = PolicyKind::EpsilonGreedy;
  p.epsilon = eps;
  return p;
}
}  // namespace

TEST_SUITE("policy") {

TEST_CASE("exploration threshold closed form") {
  CHECK(epsilon_gamma(0.5) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(epsilon_gamma(0.8) == doctest::Approx(0.04 / 0.68).epsilon(1e-14));
  for (double g : {0.1, 0.37, 0.999}) {
    const double a = (1 - g) * (1 - g);
    CHECK(epsilon_gamma(g) == doctest::Approx(a / (a + g * g)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(epsilon_gamma(1.0), std::invalid_argument);
}

TEST_CASE("tamed temperature: quintic inside, reciprocal outside, smooth seam") {
  const double k0 = 3.2;
  CHECK(kappa_theta(k0, 0.0) == k0);
  CHECK(kappa_theta(k0, 1.0) == doctest::Approx(k0).epsilon(1e-14));
  CHECK(kappa_theta(k0, 2.0) == doctest::Approx(k0 / 2).epsilon(1e-14));
  CHECK(kappa_theta(k0, 100.0) == doctest::Approx(k0 / 100).epsilon(1e-14));

  // interior values follow the quintic-in-|theta|^2 interpolant
  for (double t : {0.25, 0.5, 0.9}) {
    const double r = t * t;
    const double h = 1.0 + (19.0 / 8.0) * r * r * r - (17.0 / 4.0) * r * r * r * r +
                     (15.0 / 8.0) * r * r * r * r * r;
    CHECK(kappa_theta(k0, t) == doctest::Approx(k0 * h).epsilon(1e-13));
  }

  // derivative continuity at the seam: outside slope is exactly -k0
  const double h = 1e-6;
  const double slope = (kappa_theta(k0, 1.0 + h) - kappa_theta(k0, 1.0 - h)) / (2 * h);
  CHECK(slope == doctest::Approx(-k0).epsilon(1e-3));

  Eigen::VectorXd v(2);
  v << 3.0, 4.0;  // norm 5
  CHECK(kappa_theta(k0, v) == doctest::Approx(k0 / 5).epsilon(1e-14));
  CHECK_THROWS_AS(kappa_theta(0.0, 1.0), std::invalid_argument);
}

TEST_CASE("exploration pmf restricts and renormalizes") {
  ControlledMDP mdp = two_state();
  mdp.cost(0, 1) = kInf;  // state 0 keeps only action 0

  PolicySpec p = eps_greedy(0.3);
  Eigen::VectorXd nu = exploration_pmf(mdp, p, 0);
  CHECK(nu(0) == 1.0);
  CHECK(nu(1) == 0.0);

  p.nu_exp.resize(2);
  p.nu_exp << 0.25, 0.75;
  nu = exploration_pmf(mdp, p, 1);
  CHECK(nu(0) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(nu(1) == doctest::Approx(0.75).epsilon(1e-14));

  // all exploration mass on the masked action -> no valid restriction
  p.nu_exp << 0.0, 1.0;
  CHECK_THROWS_AS(exploration_pmf(mdp, p, 0), std::invalid_argument);
}

TEST_CASE("component pmf: greedy point mass, explicit softmin, stored row") {
  const ControlledMDP mdp = two_state();
  QTable Q(2, 2);
  Q << 2.0, -1.0, 0.0, 0.0;

  const Eigen::VectorXd g = theta_component_pmf(mdp, eps_greedy(0.5), Q, 0);
  CHECK(g(0) == 0.0);
  CHECK(g(1) == 1.0);
  // tie at state 1 -> lowest index
  const Eigen::VectorXd t = theta_component_pmf(mdp, eps_greedy(0.5), Q, 1);
  CHECK(t(0) == 1.0);

  PolicySpec gibbs;
  gibbs.kind = PolicyKind::Gibbs;
  gibbs.kappa0 = 1.3;
  const Eigen::VectorXd s = theta_component_pmf(mdp, gibbs, Q, 0);
  const double w0 = std::exp(-1.3 * 2.0), w1 = std::exp(-1.3 * -1.0);
  CHECK(s(0) == doctest::Approx(w0 / (w0 + w1)).epsilon(1e-13));
  CHECK(s(1) == doctest::Approx(w1 / (w0 + w1)).epsilon(1e-13));

  // extreme scores must not overflow: all mass lands on the minimum
  QTable big(2, 2);
  big << 1000.0, -1000.0, 0.0, 0.0;
  const Eigen::VectorXd e = theta_component_pmf(mdp, gibbs, big, 0);
  CHECK(std::isfinite(e(0)));
  CHECK(e(1) == doctest::Approx(1.0).epsilon(1e-12));

  PolicySpec obl = PolicySpec::oblivious_uniform();
  const Eigen::VectorXd o = theta_component_pmf(mdp, obl, Q, 0);
  CHECK(o(0) == doctest::Approx(0.5).epsilon(1e-14));
  obl.oblivious_pmf.resize(2, 2);
  obl.oblivious_pmf << 0.9, 0.1, 0.2, 0.8;
  CHECK(theta_component_pmf(mdp, obl, Q, 0)(0) == doctest::Approx(0.9).epsilon(1e-14));
}

TEST_CASE("action pmf is the epsilon mixture of component and exploration") {
  CounterRng rng(21, 1);
  for (int k = 0; k < 10; ++k) {
    CounterRng sub = rng.split(k + 1);
    const ControlledMDP mdp = random_mdp(4, 3, 0.8, sub, 0.25);
    PolicySpec p;
    p.kind = k % 3 == 0 ? PolicyKind::EpsilonGreedy : k % 3 == 1 ? PolicyKind::Gibbs
                                                                 : PolicyKind::TamedGibbs;
    p.epsilon = sub.next_double();
    p.kappa0 = 0.5 + sub.next_double();
    const QTable Q = testsupport::gaussian_qtable(mdp, sub, 1.5);
    const double norm = 1.0 + sub.next_double();

    for (int x = 0; x < mdp.n_states; ++x) {
      const Eigen::VectorXd mix = action_pmf(mdp, p, Q, x, norm);
      const Eigen::VectorXd expect = (1 - p.epsilon) * theta_component_pmf(mdp, p, Q, x, norm) +
                                     p.epsilon * exploration_pmf(mdp, p, x);
      CHECK((mix - expect).lpNorm<Eigen::Infinity>() <= 1e-14);
      CHECK(mix.sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(mix.minCoeff() >= 0.0);
      for (int u = 0; u < mdp.n_actions; ++u)
        if (!mdp.admissible(x, u)) CHECK(mix(u) == 0.0);
    }
  }
}

TEST_CASE("policy validation rejects malformed blocks") {
  const ControlledMDP mdp = two_state();
  PolicySpec p = eps_greedy(1.5);
  CHECK_THROWS_AS(validate_policy(mdp, p), std::invalid_argument);
  p = eps_greedy(0.2);
  p.kappa0 = 0.0;
  CHECK_THROWS_AS(validate_policy(mdp, p), std::invalid_argument);
  p = eps_greedy(0.2);
  p.nu_exp.resize(3);
  p.nu_exp << 0.5, 0.25, 0.25;
  CHECK_THROWS_AS(validate_policy(mdp, p), std::invalid_argument);  // wrong length
  p.nu_exp.resize(2);
  p.nu_exp << 0.9, 0.3;
  CHECK_THROWS_AS(validate_policy(mdp, p), std::invalid_argument);  // not a pmf

  ControlledMDP masked = two_state();
  masked.cost(0, 1) = kInf;
  PolicySpec obl = PolicySpec::oblivious_uniform();
  obl.oblivious_pmf.resize(2, 2);
  obl.oblivious_pmf << 0.5, 0.5, 0.5, 0.5;  // mass on masked (0,1)
  CHECK_THROWS_AS(validate_policy(masked, obl), std::invalid_argument);
}

TEST_CASE("structural sampling reproduces the action law") {
  const ControlledMDP mdp = six_state_example(0.8);
  PolicySpec p;
  p.kind = PolicyKind::Gibbs;
  p.epsilon = 0.3;
  p.kappa0 = 0.8;
  CounterRng qrng(22, 1);
  const QTable Q = testsupport::gaussian_qtable(mdp, qrng, 1.0);

  CounterRng a(23, 1), b(23, 1);
  for (int k = 0; k < 50; ++k)
    CHECK(sample_action(mdp, p, Q, 2, a) == sample_action(mdp, p, Q, 2, b));

  for (int x : {0, 2, 5}) {
    const Eigen::VectorXd law = action_pmf(mdp, p, Q, x);
    CounterRng rng(24, static_cast<std::uint64_t>(x));
    const int n = 200000;
    Eigen::VectorXd freq = Eigen::VectorXd::Zero(mdp.n_actions);
    for (int k = 0; k < n; ++k) freq(sample_action(mdp, p, Q, x, rng)) += 1.0;
    freq /= n;
    for (int u = 0; u < mdp.n_actions; ++u) {
      const double pr = law(u);
      const double sigma = std::sqrt(std::max(pr * (1 - pr), 1e-12) / n);
      CHECK(std::abs(freq(u) - pr) <= 4 * sigma + 1e-9);
    }
  }
}

TEST_CASE("joint transition kernel has the product structure") {
  const ControlledMDP mdp = six_state_example(0.9);
  CounterRng rng(25, 1);
  const QTable Q = testsupport::gaussian_qtable(mdp, rng, 1.0);
  const PolicySpec p = eps_greedy(0.25);
  const JointTransition jt = joint_transition(mdp, p, Q);

  const int Z = jt.map.dim();
  CHECK(jt.T.rows() == Z);
  for (int i = 0; i < Z; ++i)
    CHECK(jt.T.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));

  for (int i = 0; i < Z; i += 3)
    for (int j = 0; j < Z; ++j) {
      const auto [x, u] = jt.map.pairs[i];
      const auto [xn, un] = jt.map.pairs[j];
      const double expect = mdp.P[u](x, xn) * action_pmf(mdp, p, Q, xn)(un);
      CHECK(jt.T(i, j) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("invariant pmf matches power iteration on random chains") {
  CounterRng rng(26, 1);
  for (int k = 0; k < 10; ++k) {
    CounterRng sub = rng.split(k + 1);
    const ControlledMDP mdp = random_mdp(3 + static_cast<int>(sub.next_u64() % 4),
                                         2 + static_cast<int>(sub.next_u64() % 3),
                                         0.8, sub, 0.2);
    PolicySpec p = eps_greedy(0.05 + 0.9 * sub.next_double());
    const QTable Q = testsupport::gaussian_qtable(mdp, sub, 1.0);
    const JointTransition jt = joint_transition(mdp, p, Q);
    const Eigen::VectorXd pi = invariant_vector(jt);
    const Eigen::VectorXd oracle = testsupport::power_iteration_pmf(jt.T);
    CHECK((pi - oracle).lpNorm<Eigen::Infinity>() <= 1e-9);
    CHECK((pi.transpose() * jt.T - pi.transpose()).lpNorm<1>() <= 1e-10);
    CHECK(pi.minCoeff() >= 0.0);
    CHECK(pi.sum() == doctest::Approx(1.0).epsilon(1e-12));

    const StateActionPmf piQ = invariant_pmf(jt);
    for (int i = 0; i < jt.map.dim(); ++i)
      CHECK(piQ(jt.map.pairs[i].first, jt.map.pairs[i].second) == pi(i));
  }
}

TEST_CASE("reducible chains are refused") {
  // two disconnected self-loop states under an oblivious policy
  ControlledMDP mdp;
  mdp.n_states = 2;
  mdp.n_actions = 1;
  mdp.gamma = 0.5;
  mdp.cost = Eigen::MatrixXd::Zero(2, 1);
  mdp.P.assign(1, Eigen::MatrixXd::Identity(2, 2));
  const JointTransition jt =
      joint_transition(mdp, PolicySpec::oblivious_uniform(), QTable::Zero(2, 1));
  CHECK_THROWS_AS(invariant_vector(jt), NotUniChainError);
}

TEST_CASE("pure exploration makes the minorization bound tight") {
  const ControlledMDP mdp = six_state_example(0.8);
  CounterRng rng(27, 1);
  const QTable Q = testsupport::gaussian_qtable(mdp, rng, 1.0);
  const MinorizationReport rep = minorization_report(mdp, eps_greedy(1.0), Q);
  // at eps = 1 the policy chain equals the exploration chain
  CHECK(testsupport::max_abs_diff(rep.pi_theta, rep.pi_exp) <= 1e-12);
  CHECK(rep.delta_ratio == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(std::abs(rep.floor_slack) <= 1e-12);
  CHECK(rep.product_form_dev <= 1e-12);

  // state marginals are the row sums
  for (int x = 0; x < mdp.n_states; ++x)
    CHECK(rep.mu_theta(x) == doctest::Approx(rep.pi_theta.row(x).sum()).epsilon(1e-12));
}

}  // TEST_SUITE
