#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "qsa/linalg.hpp"
#include "qsa/mdp.hpp"
#include "qsa/meanflow.hpp"
#include "qsa/policy.hpp"
#include "qsa/qlearn.hpp"
#include "support.hpp"

using namespace qsa;
using testsupport::two_state;

namespace {

LinearQ tabular_q(const ControlledMDP& mdp, const Eigen::VectorXd& theta) {
  LinearQ q;
  q.basis = Basis::tabular(mdp);
  q.theta = theta;
  return q;
}

PolicySpec eps_greedy(double eps) {
  PolicySpec p;
  p.kind = PolicyKind::EpsilonGreedy;
  p.epsilon = eps;
  return p;
}

}  // namespace

TEST_SUITE("qlearn") {

TEST_CASE("temporal-difference terms on explicit numbers") {
  const ControlledMDP mdp = two_state(0.5);
  const TabularMap map = TabularMap::of(mdp);
  Eigen::VectorXd theta(map.dim());
  theta << 1.0, 2.0, -0.5, 3.0;  // rows: Q(0,.) = (1,2), Q(1,.) = (-0.5,3)
  const LinearQ q = tabular_q(mdp, theta);
  CHECK(q.value(0, 1) == 2.0);

  TransitionSample s;
  s.x = 0;
  s.u = 1;
  s.x_next = 1;
  s.cost = 0.7;

  // Watkins: c + gamma min Q(1,.) - Q(0,1) = 0.7 + 0.5 (-0.5) - 2 = -1.55
  const auto [f, Ahat] = td_term(q, s, mdp.gamma);
  Eigen::VectorXd expect_f = Eigen::VectorXd::Zero(4);
  expect_f(map.index(0, 1)) = -1.55;
  CHECK((f - expect_f).lpNorm<Eigen::Infinity>() <= 1e-14);
  // one-sample jacobian: psi (gamma psi'_greedy - psi)'
  Eigen::MatrixXd expect_A = Eigen::MatrixXd::Zero(4, 4);
  expect_A(map.index(0, 1), map.index(1, 0)) = 0.5;  // greedy at x'=1 is action 0
  expect_A(map.index(0, 1), map.index(0, 1)) = -1.0;
  CHECK(testsupport::max_abs_diff(Ahat, expect_A) <= 1e-14);

  // on-policy replaces the minimum by the action actually taken
  s.u_next = 1;
  const Eigen::VectorXd g = on_policy_td_term(q, s, mdp.gamma);
  Eigen::VectorXd expect_g = Eigen::VectorXd::Zero(4);
  expect_g(map.index(0, 1)) = 0.7 + 0.5 * 3.0 - 2.0;
  CHECK((g - expect_g).lpNorm<Eigen::Infinity>() <= 1e-14);
  s.u_next = -1;
  CHECK_THROWS_AS(on_policy_td_term(q, s, mdp.gamma), std::invalid_argument);

  // relative stream subtracts delta <nu, Q> on the sampled feature
  const StateActionPmf nu = uniform_pair_pmf(map);
  const double qbar = (1.0 + 2.0 - 0.5 + 3.0) / 4.0;
  const Eigen::VectorXd r = relative_td_term(q, s, mdp.gamma, 0.8, nu);
  Eigen::VectorXd expect_r = expect_f;
  expect_r(map.index(0, 1)) -= 0.8 * qbar;
  CHECK((r - expect_r).lpNorm<Eigen::Infinity>() <= 1e-14);
  CHECK_THROWS_AS(relative_td_term(q, s, mdp.gamma, 0.0, nu), std::invalid_argument);

  // inadmissible sample is refused
  ControlledMDP masked = two_state(0.5);
  masked.cost(1, 1) = std::numeric_limits<double>::infinity();
  TransitionSample bad = s;
  bad.x = 1;
  bad.u = 1;
  CHECK_THROWS_AS(td_term(tabular_q(masked, Eigen::VectorXd::Zero(3)), bad, 0.5),
                  std::invalid_argument);
}

TEST_CASE("uniform pair weights and masked-value convention") {
  ControlledMDP mdp = two_state(0.5);
  mdp.cost(0, 1) = std::numeric_limits<double>::infinity();
  const TabularMap map = TabularMap::of(mdp);
  const StateActionPmf nu = uniform_pair_pmf(map);
  CHECK(nu.rows() == 2);
  CHECK(nu(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-14));
  CHECK(nu(0, 1) == 0.0);
  CHECK(nu.sum() == doctest::Approx(1.0).epsilon(1e-14));

  const LinearQ q = tabular_q(mdp, Eigen::VectorXd::Ones(map.dim()));
  CHECK(q.value(0, 1) == 0.0);  // masked pair reads as zero
}

TEST_CASE("snapshot grid is the deduplicated geometric ladder") {
  const std::vector<long> grid = snapshot_grid(1000);
  CHECK(grid.front() == 0);
  CHECK(grid.back() == 1000);
  for (size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] > grid[i - 1]);

  // independent recomputation
  std::vector<long> expect = {0};
  for (double v = 1.0; std::llround(v) < 1000; v *= 1.2) {
    const long r = std::llround(v);
    if (r != expect.back()) expect.push_back(r);
  }
  expect.push_back(1000);
  CHECK(grid == expect);

  CHECK(snapshot_grid(0) == std::vector<long>{0});
}

TEST_CASE("runs are bit-identical per seed and diverge across seeds") {
  const ControlledMDP mdp = six_state_example(0.8);
  const LinearQ q0 = tabular_q(mdp, Eigen::VectorXd::Zero(TabularMap::of(mdp).dim()));
  EstimatorConfig est;
  est.kind = EstimatorKind::MatrixGain;
  const StepSchedule sched(1.0, 0.0);

  const RunRecord a = run_experiment(mdp, PolicySpec::oblivious_uniform(), q0, est, sched, 20000, 7);
  const RunRecord b = run_experiment(mdp, PolicySpec::oblivious_uniform(), q0, est, sched, 20000, 7);
  const RunRecord c = run_experiment(mdp, PolicySpec::oblivious_uniform(), q0, est, sched, 20000, 8);

  CHECK(a.theta_final == b.theta_final);  // bitwise
  CHECK(a.theta_pr == b.theta_pr);
  CHECK(a.action_head == b.action_head);
  CHECK(a.snap_n == b.snap_n);
  REQUIRE(a.snap_theta.size() == b.snap_theta.size());
  for (size_t i = 0; i < a.snap_theta.size(); ++i) CHECK(a.snap_theta[i] == b.snap_theta[i]);
  CHECK(a.final_bellman_max == b.final_bellman_max);
  CHECK(a.theta_final != c.theta_final);

  // snapshots book-end the run
  CHECK(a.snap_n.front() == 0);
  CHECK(a.snap_n.back() == 20000);
  CHECK(a.snap_theta.front() == q0.theta);
  CHECK(a.snap_theta.back() == a.theta_final);
  CHECK(a.final_span_err == a.snap_span_err.back());
  CHECK(a.snap_cond.empty());  // not a Newton-like run
}

TEST_CASE("oblivious training stream ignores the parameter") {
  const ControlledMDP mdp = six_state_example(0.8);
  const int dim = TabularMap::of(mdp).dim();
  EstimatorConfig est;
  est.kind = EstimatorKind::MatrixGain;
  const StepSchedule sched(1.0, 0.0);

  const RunRecord a = run_experiment(mdp, PolicySpec::oblivious_uniform(),
                                     tabular_q(mdp, Eigen::VectorXd::Zero(dim)), est, sched,
                                     5000, 11);
  const RunRecord b = run_experiment(mdp, PolicySpec::oblivious_uniform(),
                                     tabular_q(mdp, 5.0 * Eigen::VectorXd::Ones(dim)), est, sched,
                                     5000, 11);
  CHECK(a.action_head == b.action_head);
}

TEST_CASE("classical tabular run drives the bellman error down") {
  const ControlledMDP mdp = six_state_example(0.5);
  const LinearQ q0 = tabular_q(mdp, Eigen::VectorXd::Zero(TabularMap::of(mdp).dim()));
  EstimatorConfig est;
  est.kind = EstimatorKind::MatrixGain;
  const RunRecord rec = run_experiment(mdp, PolicySpec::oblivious_uniform(), q0, est,
                                       StepSchedule(1.0, 0.0), 200000, 3);
  CHECK(!rec.aborted);
  CHECK(rec.final_bellman_max <= 0.05);
  CHECK(rec.final_span_err <= 0.05);
  // the error actually decreased along the grid
  CHECK(rec.snap_bellman_max.front() > 10 * rec.final_bellman_max);
}

TEST_CASE("newton-like run records conditioning and never aborts here") {
  const ControlledMDP mdp = six_state_example(0.8);
  const LinearQ q0 = tabular_q(mdp, Eigen::VectorXd::Zero(TabularMap::of(mdp).dim()));
  EstimatorConfig est;
  est.kind = EstimatorKind::Zap;
  const StepSchedule sched(1.0, 1.0, 1.0, 0.85);
  const RunRecord rec =
      run_experiment(mdp, eps_greedy(0.2), q0, est, sched, 30000, 5);
  CHECK(!rec.aborted);
  CHECK(rec.snap_cond.size() == rec.snap_n.size());
  for (double c : rec.snap_cond) CHECK(c >= 1.0);
  CHECK(rec.final_span_err <= 0.5);
}

TEST_CASE("inversion-free run touches no linear solver") {
  const ControlledMDP mdp = six_state_example(0.8);
  const LinearQ q0 = tabular_q(mdp, Eigen::VectorXd::Zero(TabularMap::of(mdp).dim()));
  EstimatorConfig est;
  est.kind = EstimatorKind::ZapZero;
  const StepSchedule sched(1.0, 1.0, 1.0, 0.85);
  const long n = 20000;

  OpCounters::reset();
  const RunRecord rec = run_experiment(mdp, eps_greedy(0.2), q0, est, sched, n, 5);
  CHECK(!rec.aborted);
  CHECK(OpCounters::linear_solves == 0);
  CHECK(OpCounters::matvecs == 3 * n);
}

TEST_CASE("safeguard projects instead of overflowing and logs sparingly") {
  const ControlledMDP mdp = six_state_example(0.8);
  const LinearQ q0 = tabular_q(mdp, Eigen::VectorXd::Zero(TabularMap::of(mdp).dim()));
  EstimatorConfig est;
  est.kind = EstimatorKind::Plain;
  est.safeguard = true;
  est.safeguard_radius = 0.5;  // far below ||Q*||, so projections must fire
  const RunRecord rec = run_experiment(mdp, PolicySpec::oblivious_uniform(), q0, est,
                                       StepSchedule(1.0, 0.9), 20000, 9);
  CHECK(!rec.aborted);
  CHECK(rec.safeguard_hits > 0);
  CHECK(rec.theta_final.norm() <= 0.5 + 1e-9);
  long logged = 0;
  for (const std::string& e : rec.events)
    if (e.find("safeguard") != std::string::npos) ++logged;
  CHECK(logged <= 20);
}

TEST_CASE("overflowing runs abort with an event instead of throwing") {
  const ControlledMDP mdp = six_state_example(0.8);
  // features at overflow scale: the first update sends Q past the double
  // range, and the run must stop cleanly rather than propagate NaN
  LinearQ q0;
  q0.basis = Basis::tabular(mdp);
  q0.basis.psi *= 1e200;
  q0.theta = Eigen::VectorXd::Zero(q0.basis.dim());
  EstimatorConfig est;
  est.kind = EstimatorKind::Plain;
  const RunRecord rec = run_experiment(mdp, PolicySpec::oblivious_uniform(), q0, est,
                                       StepSchedule(1.0, 0.0), 100, 13);
  CHECK(rec.aborted);
  CHECK(!rec.events.empty());
  CHECK(rec.theta_final.allFinite());  // the last finite iterate is kept
}

TEST_CASE("frozen-parameter stream average agrees with the exact expectation") {
  const ControlledMDP mdp = six_state_example(0.8);
  CounterRng rng(61, 1);
  const Basis basis = Basis::tabular(mdp);
  LinearQ q;
  q.basis = basis;
  q.theta = testsupport::gaussian_vector(basis.dim(), rng, 1.0);

  const PolicySpec policy = eps_greedy(0.3);
  const StreamAverage avg = frozen_stream_average(mdp, policy, q, 400000, 17);
  MeanFlowModel model(mdp, policy, basis);
  const Eigen::VectorXd exact = mean_flow(model, q.theta);
  // a short burn-in is discarded before batching
  CHECK(avg.n_used >= 320000);
  CHECK(avg.n_used <= 400000);
  for (int i = 0; i < exact.size(); ++i)
    CHECK(std::abs(avg.mean(i) - exact(i)) <= 5 * avg.std_error(i) + 1e-4);

  CHECK_THROWS_AS(frozen_stream_average(mdp, policy, q, 400000, 17, 1), std::invalid_argument);
  CHECK_THROWS_AS(frozen_stream_average(mdp, policy, q, 8, 17, 32), std::invalid_argument);
}

TEST_CASE("estimator preconditions are validated") {
  const ControlledMDP mdp = six_state_example(0.8);
  CounterRng rng(62, 1);
  LinearQ low;
  low.basis = Basis::random(mdp, 4, rng);
  low.theta = Eigen::VectorXd::Zero(4);
  EstimatorConfig est;
  est.kind = EstimatorKind::MatrixGain;  // visit-count gain needs tabular coordinates
  CHECK_THROWS_AS(run_experiment(mdp, PolicySpec::oblivious_uniform(), low, est,
                                 StepSchedule(1.0, 0.0), 10, 1),
                  std::invalid_argument);

  LinearQ mismatched;
  mismatched.basis = Basis::tabular(mdp);
  mismatched.theta = Eigen::VectorXd::Zero(3);  // wrong length
  EstimatorConfig plain;
  CHECK_THROWS_AS(run_experiment(mdp, PolicySpec::oblivious_uniform(), mismatched, plain,
                                 StepSchedule(1.0, 1.0), 10, 1),
                  std::invalid_argument);
}

}  // TEST_SUITE
