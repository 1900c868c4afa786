#include "qsa/qlearn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "qsa/linalg.hpp"

namespace qsa {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// min over admissible actions of Q(x', .) plus its lowest-index argmin,
// reading Q through the basis.
double min_next(const LinearQ& q, int x, int* argmin) {
  const auto& idx = q.basis.map.index;
  double best = kInf;
  int best_u = -1;
  for (int u = 0; u < idx.cols(); ++u) {
    const int i = idx(x, u);
    if (i < 0) continue;
    const double v = q.theta.dot(q.basis.psi.col(i));
    if (v < best) {
      best = v;
      best_u = u;
    }
  }
  if (best_u < 0) throw std::invalid_argument("td stream: state without admissible action");
  if (argmin) *argmin = best_u;
  return best;
}

int checked_index(const TabularMap& map, int x, int u, const char* who) {
  if (x < 0 || x >= map.index.rows() || u < 0 || u >= map.index.cols() || map.index(x, u) < 0)
    throw std::invalid_argument(std::string(who) + ": sample addresses an inadmissible pair");
  return map.index(x, u);
}

double alpha_at(const StepSchedule& s, long n) {
  // pow() dominates tight loops; the two exponents every experiment uses
  // have cheap forms.
  if (s.rho == 1.0) return std::min(1.0, s.g / static_cast<double>(n));
  if (s.rho == 0.0) return std::min(1.0, s.g);
  return step_size(s, n);
}

double beta_at(const StepSchedule& s, long n) {
  if (!s.has_beta) return alpha_at(s, n);
  if (s.rho_beta == 1.0) return std::min(1.0, s.g_beta / static_cast<double>(n));
  if (s.rho_beta == 0.0) return std::min(1.0, s.g_beta);
  return beta_step_size(s, n);
}

}  // namespace

std::pair<Eigen::VectorXd, Eigen::MatrixXd> td_term(const LinearQ& q, const TransitionSample& s,
                                                    double gamma) {
  const int i = checked_index(q.basis.map, s.x, s.u, "td_term");
  int ug = -1;
  const double qmin = min_next(q, s.x_next, &ug);
  const double D = s.cost + gamma * qmin - q.theta.dot(q.basis.psi.col(i));
  const int j = q.basis.map.index(s.x_next, ug);
  Eigen::VectorXd f = D * q.basis.psi.col(i);
  Eigen::MatrixXd A =
      q.basis.psi.col(i) * (gamma * q.basis.psi.col(j) - q.basis.psi.col(i)).transpose();
  return {std::move(f), std::move(A)};
}

Eigen::VectorXd on_policy_td_term(const LinearQ& q, const TransitionSample& s, double gamma) {
  if (s.u_next < 0) throw std::invalid_argument("on_policy_td_term: sample lacks u_next");
  const int i = checked_index(q.basis.map, s.x, s.u, "on_policy_td_term");
  const int j = checked_index(q.basis.map, s.x_next, s.u_next, "on_policy_td_term");
  const double D = s.cost + gamma * q.theta.dot(q.basis.psi.col(j)) -
                   q.theta.dot(q.basis.psi.col(i));
  return D * q.basis.psi.col(i);
}

Eigen::VectorXd relative_td_term(const LinearQ& q, const TransitionSample& s, double gamma,
                                 double delta, const StateActionPmf& nu) {
  if (!(delta > 0.0)) throw std::invalid_argument("relative_td_term: delta must be > 0");
  const int i = checked_index(q.basis.map, s.x, s.u, "relative_td_term");
  const StateActionPmf& w = nu.size() ? nu : uniform_pair_pmf(q.basis.map);
  double nu_dot = 0.0;
  for (int k = 0; k < q.basis.map.dim(); ++k) {
    const auto [x, u] = q.basis.map.pairs[k];
    if (w(x, u) != 0.0) nu_dot += w(x, u) * q.theta.dot(q.basis.psi.col(k));
  }
  const double D = s.cost + gamma * min_next(q, s.x_next, nullptr) -
                   q.theta.dot(q.basis.psi.col(i)) - delta * nu_dot;
  return D * q.basis.psi.col(i);
}

StateActionPmf uniform_pair_pmf(const TabularMap& map) {
  StateActionPmf nu = StateActionPmf::Zero(map.index.rows(), map.index.cols());
  const double w = 1.0 / static_cast<double>(map.dim());
  for (const auto& [x, u] : map.pairs) nu(x, u) = w;
  return nu;
}

std::vector<long> snapshot_grid(long n_steps) {
  std::vector<long> grid{0};
  for (double v = 1.0; v < static_cast<double>(n_steps); v *= 1.2) {
    const long n = std::llround(v);
    if (n > grid.back() && n < n_steps) grid.push_back(n);
  }
  if (n_steps > 0) grid.push_back(n_steps);
  return grid;
}

namespace {

// Per-state action pmfs flattened row-contiguous for allocation-free draws.
struct FixedRows {
  std::vector<double> p;  // n_states * n_actions
  int n_actions = 0;
  const double* row(int x) const { return p.data() + static_cast<std::size_t>(x) * n_actions; }
};

FixedRows pack_rows(const ControlledMDP& mdp, const PolicySpec& policy, bool exploration_only,
                    const QTable& Q) {
  FixedRows r;
  r.n_actions = mdp.n_actions;
  r.p.assign(static_cast<std::size_t>(mdp.n_states) * mdp.n_actions, 0.0);
  for (int x = 0; x < mdp.n_states; ++x) {
    const Eigen::VectorXd row = exploration_only ? exploration_pmf(mdp, policy, x)
                                                 : theta_component_pmf(mdp, policy, Q, x);
    for (int u = 0; u < mdp.n_actions; ++u) r.p[static_cast<std::size_t>(x) * mdp.n_actions + u] = row(u);
  }
  return r;
}

// Row-contiguous transition probabilities: row(u,x) is P_u(x, .).
struct FlatKernel {
  std::vector<double> p;
  int n_states = 0;
  const double* row(int u, int x) const {
    return p.data() + (static_cast<std::size_t>(u) * n_states + x) * n_states;
  }
};

FlatKernel pack_kernel(const ControlledMDP& mdp) {
  FlatKernel k;
  k.n_states = mdp.n_states;
  k.p.resize(static_cast<std::size_t>(mdp.n_actions) * mdp.n_states * mdp.n_states);
  for (int u = 0; u < mdp.n_actions; ++u)
    for (int x = 0; x < mdp.n_states; ++x)
      for (int xn = 0; xn < mdp.n_states; ++xn)
        k.p[(static_cast<std::size_t>(u) * mdp.n_states + x) * mdp.n_states + xn] =
            mdp.P[u](x, xn);
  return k;
}

void check_linear_q(const ControlledMDP& mdp, const LinearQ& q, const char* who) {
  if (q.basis.map.index.rows() != mdp.n_states || q.basis.map.index.cols() != mdp.n_actions)
    throw std::invalid_argument(std::string(who) + ": basis built for a different mdp shape");
  if (q.basis.psi.cols() != q.basis.map.dim() || q.theta.size() != q.basis.psi.rows())
    throw std::invalid_argument(std::string(who) + ": basis/parameter dimensions disagree");
}

}  // namespace

RunRecord run_experiment(const ControlledMDP& mdp, const PolicySpec& policy, const LinearQ& q0,
                         const EstimatorConfig& est, const StepSchedule& sched, long n_steps,
                         std::uint64_t seed) {
  if (n_steps < 0) throw std::invalid_argument("run_experiment: n_steps must be >= 0");
  check_linear_q(mdp, q0, "run_experiment");
  validate_policy(mdp, policy);

  const TabularMap& map = q0.basis.map;
  const int Z = map.dim();
  const int d = q0.basis.dim();
  const bool tabular = (d == Z) && q0.basis.psi.isIdentity(0.0);
  const bool coord_updates =
      tabular && (est.kind == EstimatorKind::Plain || est.kind == EstimatorKind::MatrixGain);
  if (est.kind == EstimatorKind::MatrixGain && !tabular)
    throw std::invalid_argument("run_experiment: the visit-count gain needs the tabular basis");

  RunRecord rec;
  rec.seed = seed;
  rec.n_steps = n_steps;
  rec.config = est;
  rec.schedule = sched;

  const QTable q_star = value_iteration(mdp, 1e-10);

  // Relative-stream weights and their feature image (<nu, Q^theta> = theta . psi_nu).
  StateActionPmf nu = est.nu.size() ? est.nu : uniform_pair_pmf(map);
  Eigen::VectorXd psi_nu = Eigen::VectorXd::Zero(d);
  if (est.td == TdVariant::Relative) {
    if (!(est.delta > 0.0))
      throw std::invalid_argument("run_experiment: relative stream needs delta > 0");
    for (int i = 0; i < Z; ++i) {
      const auto [x, u] = map.pairs[i];
      psi_nu.noalias() += nu(x, u) * q0.basis.psi.col(i);
    }
  }

  CounterRng root(seed);
  CounterRng rng_act = root.split(1);
  CounterRng rng_trans = root.split(2);
  const FlatKernel kernel = pack_kernel(mdp);

  // Live Q table, kept in sync with theta throughout.
  QTable Q = q_table(q0.basis, q0.theta);
  const bool smooth_policy =
      policy.kind == PolicyKind::Gibbs || policy.kind == PolicyKind::TamedGibbs;
  FixedRows fixed_rows;  // oblivious full pmf / eps-greedy exploration pmf
  if (policy.kind == PolicyKind::Oblivious)
    fixed_rows = pack_rows(mdp, policy, false, Q);
  else if (policy.kind == PolicyKind::EpsilonGreedy)
    fixed_rows = pack_rows(mdp, policy, true, Q);

  // --- estimator state ---------------------------------------------------
  Eigen::VectorXd theta = q0.theta;
  Eigen::VectorXi counts = Eigen::VectorXi::Zero(Z);
  Eigen::MatrixXd A_hat;
  Eigen::VectorXd w_aux, z_aux;
  Eigen::MatrixXd M = est.M;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(d);

  const bool needs_A = est.kind == EstimatorKind::Zap || est.kind == EstimatorKind::ZapZero;
  if (est.kind == EstimatorKind::ZapZero) {
    ZapZeroState init = zap_zero_init(theta, std::move(M));
    w_aux = std::move(init.w);
    z_aux = std::move(init.z);
    M = std::move(init.M);
  }

  // Reused per-step buffers for the dense estimators.
  Eigen::MatrixXd A_buf = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd f_buf(d), dir(d), resid(d), t_lw(d), t_atw(d), t_av(d);

  auto draw_action = [&](int x) -> int {
    switch (policy.kind) {
      case PolicyKind::Oblivious:
        return rng_act.next_index(fixed_rows.row(x), mdp.n_actions);
      case PolicyKind::EpsilonGreedy:
        if (policy.epsilon > 0.0 && rng_act.next_double() < policy.epsilon)
          return rng_act.next_index(fixed_rows.row(x), mdp.n_actions);
        return greedy_action(mdp, Q, x);
      default:
        // Smooth policies read the tamed temperature off the parameter norm.
        return sample_action(mdp, policy, Q, x, rng_act, theta.norm());
    }
  };

  auto sample_A = [&](int i, int j_target, Eigen::MatrixXd& out) {
    // psi_i (gamma psi_target - psi_i)', with the relative shift folded in.
    const auto& psi = q0.basis.psi;
    if (est.td == TdVariant::Relative)
      out.noalias() =
          psi.col(i) *
          (mdp.gamma * psi.col(j_target) - psi.col(i) - est.delta * psi_nu).transpose();
    else
      out.noalias() = psi.col(i) * (mdp.gamma * psi.col(j_target) - psi.col(i)).transpose();
  };

  if (est.kind == EstimatorKind::Zap) {
    // Jacobian warmup on a frozen-parameter side stream so the first
    // preconditioned steps see an honest average rather than garbage.
    CounterRng warm_act = root.split(3);
    CounterRng warm_trans = root.split(4);
    const int n0 = static_cast<int>(std::ceil(10.0 * d));
    A_hat = Eigen::MatrixXd::Zero(d, d);
    const double norm0 = theta.norm();
    int x = 0;
    int u = sample_action(mdp, policy, Q, 0, warm_act, norm0);
    Eigen::MatrixXd A_one(d, d);
    for (int k = 0; k < n0; ++k) {
      const int xn = warm_trans.next_index(kernel.row(u, x), mdp.n_states);
      const int un = sample_action(mdp, policy, Q, xn, warm_act, norm0);
      const int ug = greedy_action(mdp, Q, xn);
      const int i = map.index(x, u);
      const int j = map.index(xn, est.td == TdVariant::OnPolicy ? un : ug);
      sample_A(i, j, A_one);
      A_hat += (A_one - A_hat) / static_cast<double>(k + 1);
      x = xn;
      u = un;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A_hat);
    if (svd.singularValues().minCoeff() < 1e-6) {
      A_hat.diagonal().array() -= 1e-3;
      rec.events.push_back("warmup Jacobian near singular; shifted by -1e-3 I");
    }
  }

  // --- lazily flushed running average (exact sum of theta_1..theta_n) ----
  Eigen::VectorXd pr_sum = Eigen::VectorXd::Zero(d);
  std::vector<long> pr_last(coord_updates ? Z : 0, 0);
  auto pr_flush = [&](long n) {
    if (coord_updates) {
      for (int i = 0; i < Z; ++i) {
        pr_sum(i) += theta(i) * static_cast<double>(n - pr_last[i]);
        pr_last[i] = n;
      }
    }
  };
  auto pr_at = [&](long n) -> Eigen::VectorXd {
    if (n == 0) return theta;
    pr_flush(n);
    return pr_sum / static_cast<double>(n);
  };

  // --- snapshots ---------------------------------------------------------
  const std::vector<long> grid = snapshot_grid(n_steps);
  std::size_t next_snap = 0;
  auto capture = [&](long n) {
    rec.snap_n.push_back(n);
    rec.snap_theta.push_back(theta);
    rec.snap_pr.push_back(pr_at(n));
    rec.snap_bellman_max.push_back(bellman_error(mdp, Q).second);
    rec.snap_span_err.push_back(span_seminorm(mdp, Q, q_star));
    if (est.kind == EstimatorKind::Zap) {
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(A_hat);
      const double smin = svd.singularValues().minCoeff();
      rec.snap_cond.push_back(smin > 0.0 ? svd.singularValues().maxCoeff() / smin : kInf);
    }
  };
  capture(0);
  ++next_snap;

  auto log_event = [&](std::string msg) {
    if (rec.events.size() < 200) rec.events.push_back(std::move(msg));
  };

  // --- main loop ---------------------------------------------------------
  int x = 0;
  int u = draw_action(x);
  if (rec.action_head.size() < 1000) rec.action_head.push_back(u);

  for (long n = 1; n <= n_steps; ++n) {
    const int xn = rng_trans.next_index(kernel.row(u, x), mdp.n_states);
    const int un = draw_action(xn);
    if (rec.action_head.size() < 1000) rec.action_head.push_back(un);

    const int i = map.index(x, u);
    // Greedy minimum at the landing state, straight off the live table.
    double qmin = kInf;
    int ug = -1;
    for (int a = 0; a < mdp.n_actions; ++a) {
      if (map.index(xn, a) < 0) continue;
      const double v = Q(xn, a);
      if (v < qmin) {
        qmin = v;
        ug = a;
      }
    }

    double D;
    switch (est.td) {
      case TdVariant::Watkins:
        D = mdp.cost(x, u) + mdp.gamma * qmin - Q(x, u);
        break;
      case TdVariant::OnPolicy:
        D = mdp.cost(x, u) + mdp.gamma * Q(xn, un) - Q(x, u);
        break;
      case TdVariant::Relative:
      default:
        D = mdp.cost(x, u) + mdp.gamma * qmin - Q(x, u) - est.delta * theta.dot(psi_nu);
        break;
    }

    if (!std::isfinite(D)) {
      log_event("non-finite update at n=" + std::to_string(n) + "; run aborted");
      rec.aborted = true;
      if (next_snap >= grid.size() || grid[next_snap] != n) capture(n);
      break;
    }

    const double alpha = alpha_at(sched, n);
    switch (est.kind) {
      case EstimatorKind::Plain:
        if (tabular) {
          pr_sum(i) += theta(i) * static_cast<double>(n - 1 - pr_last[i]);
          pr_last[i] = n - 1;
          theta(i) += alpha * D;
          Q(x, u) = theta(i);
        } else {
          theta.noalias() += (alpha * D) * q0.basis.psi.col(i);
        }
        break;
      case EstimatorKind::MatrixGain: {
        pr_sum(i) += theta(i) * static_cast<double>(n - 1 - pr_last[i]);
        pr_last[i] = n - 1;
        const int c = ++counts(i);
        theta(i) += alpha * D / static_cast<double>(c);
        Q(x, u) = theta(i);
        break;
      }
      case EstimatorKind::Zap: {
        const int j = map.index(xn, est.td == TdVariant::OnPolicy ? un : ug);
        sample_A(i, j, A_buf);
        const double beta = beta_at(sched, n);
        A_hat += beta * (A_buf - A_hat);
        f_buf.noalias() = D * q0.basis.psi.col(i);
        ++OpCounters::linear_solves;
        lu.compute(A_hat);
        dir = lu.solve(f_buf);
        resid.noalias() = A_hat * dir;
        resid -= f_buf;
        if (!dir.allFinite() || resid.norm() > 1e-8 * (1.0 + f_buf.norm())) {
          --OpCounters::linear_solves;
          ++OpCounters::pinv_fallbacks;
          ++rec.singular_events;
          dir = regularized_solve(A_hat, f_buf);
        }
        theta.noalias() -= alpha * dir;
        break;
      }
      case EstimatorKind::ZapZero:
      default: {
        const int j = map.index(xn, est.td == TdVariant::OnPolicy ? un : ug);
        sample_A(i, j, A_buf);
        const double beta = beta_at(sched, n);
        f_buf.noalias() = D * q0.basis.psi.col(i);
        t_atw.noalias() = A_buf.transpose() * w_aux;
        t_lw.noalias() = M * t_atw;
        t_av.noalias() = A_buf * (theta + z_aux);
        OpCounters::matvecs += 3;
        theta -= alpha * (theta + t_lw);
        w_aux -= beta * (t_av - f_buf);
        z_aux -= beta * (z_aux - t_lw);
        break;
      }
    }

    if (!coord_updates) {
      // Dense parameter motion: refresh the table and the running average.
      if (tabular)
        for (int k = 0; k < Z; ++k) Q(map.pairs[k].first, map.pairs[k].second) = theta(k);
      else
        for (int k = 0; k < Z; ++k)
          Q(map.pairs[k].first, map.pairs[k].second) = theta.dot(q0.basis.psi.col(k));
    }

    if (est.safeguard) {
      const double norm = theta.norm();
      if (norm > est.safeguard_radius) {
        pr_flush(n - 1);
        theta *= est.safeguard_radius / norm;
        ++rec.safeguard_hits;
        if (rec.safeguard_hits <= 20)
          log_event("safeguard projection at n=" + std::to_string(n));
        for (int k = 0; k < Z; ++k)
          Q(map.pairs[k].first, map.pairs[k].second) =
              tabular ? theta(k) : theta.dot(q0.basis.psi.col(k));
      }
    }

    if (!coord_updates) pr_sum += theta;

    if (next_snap < grid.size() && grid[next_snap] == n) {
      capture(n);
      ++next_snap;
    }

    x = xn;
    u = un;
  }

  rec.theta_final = theta;
  rec.theta_pr = rec.snap_pr.empty() ? theta : pr_at(rec.snap_n.back());
  rec.final_bellman_max = rec.snap_bellman_max.back();
  rec.final_span_err = rec.snap_span_err.back();
  return rec;
}

StreamAverage frozen_stream_average(const ControlledMDP& mdp, const PolicySpec& policy,
                                    const LinearQ& q, long n_steps, std::uint64_t seed,
                                    int n_batches) {
  check_linear_q(mdp, q, "frozen_stream_average");
  validate_policy(mdp, policy);
  if (n_batches < 2) throw std::invalid_argument("frozen_stream_average: need >= 2 batches");

  const TabularMap& map = q.basis.map;
  const int d = q.basis.dim();
  const QTable Q = q_table(q.basis, q.theta);
  const Eigen::VectorXd under = min_vector(mdp, Q);

  // Frozen parameter: every per-state pmf is a constant row.
  std::vector<std::vector<double>> rows(mdp.n_states);
  const double norm = q.theta.norm();
  for (int x = 0; x < mdp.n_states; ++x) {
    const Eigen::VectorXd p = action_pmf(mdp, policy, Q, x, norm);
    rows[x].assign(p.data(), p.data() + mdp.n_actions);
  }
  const FlatKernel kernel = pack_kernel(mdp);

  const long burn = n_steps / 10;
  const long usable = n_steps - burn;
  const long batch_len = usable / n_batches;
  if (batch_len < 1) throw std::invalid_argument("frozen_stream_average: run too short");
  const long used = batch_len * n_batches;

  CounterRng root(seed);
  CounterRng rng_act = root.split(1);
  CounterRng rng_trans = root.split(2);

  std::vector<Eigen::VectorXd> batch(n_batches, Eigen::VectorXd::Zero(d));
  int x = 0;
  int u = rng_act.next_index(rows[x]);
  for (long n = 1; n <= burn + used; ++n) {
    const int xn = rng_trans.next_index(kernel.row(u, x), mdp.n_states);
    const int un = rng_act.next_index(rows[xn]);
    if (n > burn) {
      const int i = map.index(x, u);
      const double D = mdp.cost(x, u) + mdp.gamma * under(xn) - Q(x, u);
      batch[(n - burn - 1) / batch_len].noalias() += D * q.basis.psi.col(i);
    }
    x = xn;
    u = un;
  }

  StreamAverage out;
  out.n_used = used;
  out.mean = Eigen::VectorXd::Zero(d);
  for (auto& b : batch) {
    b /= static_cast<double>(batch_len);
    out.mean += b;
  }
  out.mean /= static_cast<double>(n_batches);
  Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
  for (const auto& b : batch) var.array() += (b - out.mean).array().square();
  var /= static_cast<double>(n_batches - 1);
  out.std_error = (var / static_cast<double>(n_batches)).cwiseSqrt();
  return out;
}

}  // namespace qsa
