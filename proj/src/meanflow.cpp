#include "qsa/meanflow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "qsa/linalg.hpp"

namespace qsa {

namespace {

constexpr double kIdentityTol = 1e-10;  // algebraic identities checked in-op

// Everything the per-theta expectations need, computed once.
struct Eval {
  QTable Q;
  double norm = 0.0;
  std::vector<int> greedy;           // per state, lowest-index argmin
  Eigen::VectorXd underQ;            // per state, min over admissible
  std::vector<Eigen::VectorXd> pmf;  // full action pmf per state
  Eigen::VectorXd pi;                // invariant pmf over admissible pairs
};

std::vector<int> greedy_selector(const ControlledMDP& mdp, const QTable& Q) {
  std::vector<int> sel(mdp.n_states);
  for (int x = 0; x < mdp.n_states; ++x) sel[x] = greedy_action(mdp, Q, x);
  return sel;
}

Eigen::VectorXd stationary_for(const MeanFlowModel& model, const QTable& Q, double norm,
                               const std::vector<int>& selector) {
  const ControlledMDP& mdp = *model.mdp;
  // Policies whose chain depends on theta only through the greedy selector
  // are cached per selector (empty key for oblivious).
  if (model.policy.kind == PolicyKind::Oblivious || model.policy.kind == PolicyKind::EpsilonGreedy) {
    std::vector<int> key;
    if (model.policy.kind == PolicyKind::EpsilonGreedy) key = selector;
    auto it = model.pi_by_selector.find(key);
    if (it != model.pi_by_selector.end()) return it->second;
    Eigen::VectorXd pi = invariant_vector(joint_transition(mdp, model.policy, Q, norm));
    model.pi_by_selector.emplace(std::move(key), pi);
    return pi;
  }
  return invariant_vector(joint_transition(mdp, model.policy, Q, norm));
}

Eval make_eval(const MeanFlowModel& model, const Eigen::VectorXd& theta) {
  const ControlledMDP& mdp = *model.mdp;
  Eval ev;
  ev.Q = q_table(model.basis, theta);
  ev.norm = theta.norm();
  ev.greedy = greedy_selector(mdp, ev.Q);
  ev.underQ = min_vector(mdp, ev.Q);
  ev.pmf.resize(mdp.n_states);
  for (int x = 0; x < mdp.n_states; ++x)
    ev.pmf[x] = action_pmf(mdp, model.policy, ev.Q, x, ev.norm);

  const bool smooth = model.policy.kind == PolicyKind::Gibbs ||
                      model.policy.kind == PolicyKind::TamedGibbs;
  if (smooth && model.memo_valid && model.memo_theta.size() == theta.size() &&
      model.memo_theta == theta) {
    ev.pi = model.memo_pi;
  } else {
    ev.pi = stationary_for(model, ev.Q, ev.norm, ev.greedy);
    if (smooth) {
      model.memo_theta = theta;
      model.memo_pi = ev.pi;
      model.memo_valid = true;
    }
  }
  return ev;
}

// Column x = psi(x, greedy(x)).
Eigen::MatrixXd greedy_features(const Basis& basis, const std::vector<int>& greedy) {
  const int n_states = static_cast<int>(basis.map.index.rows());
  Eigen::MatrixXd G(basis.dim(), n_states);
  for (int x = 0; x < n_states; ++x) {
    const int j = basis.map.index(x, greedy[x]);
    G.col(x) = basis.psi.col(j);
  }
  return G;
}

// Column x = sum_u w_x(u) psi(x,u) for per-state action weights w.
Eigen::MatrixXd averaged_features(const Basis& basis,
                                  const std::vector<Eigen::VectorXd>& weights) {
  const int n_states = static_cast<int>(basis.map.index.rows());
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(basis.dim(), n_states);
  for (int j = 0; j < basis.map.dim(); ++j) {
    const auto [x, u] = basis.map.pairs[j];
    G.col(x) += weights[x](u) * basis.psi.col(j);
  }
  return G;
}

// A(theta), b(theta) from an evaluated point.
std::pair<Eigen::MatrixXd, Eigen::VectorXd> flow_matrices_at(const MeanFlowModel& model,
                                                             const Eval& ev) {
  const ControlledMDP& mdp = *model.mdp;
  const Basis& basis = model.basis;
  const int d = basis.dim();
  const Eigen::MatrixXd G = greedy_features(basis, ev.greedy);

  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(d);
  for (int i = 0; i < basis.map.dim(); ++i) {
    const auto [x, u] = basis.map.pairs[i];
    const Eigen::VectorXd w = G * mdp.P[u].row(x).transpose();  // E[psi^greedy_{n+1} | z]
    A.noalias() += ev.pi(i) * basis.psi.col(i) * (mdp.gamma * w - basis.psi.col(i)).transpose();
    b.noalias() -= ev.pi(i) * mdp.cost(x, u) * basis.psi.col(i);
  }
  return {A, b};
}

Eigen::VectorXd mean_flow_at(const MeanFlowModel& model, const Eval& ev) {
  const ControlledMDP& mdp = *model.mdp;
  const Basis& basis = model.basis;
  Eigen::VectorXd f = Eigen::VectorXd::Zero(basis.dim());
  for (int i = 0; i < basis.map.dim(); ++i) {
    const auto [x, u] = basis.map.pairs[i];
    const double B = mdp.cost(x, u) + mdp.gamma * mdp.P[u].row(x).dot(ev.underQ) - ev.Q(x, u);
    f.noalias() += ev.pi(i) * B * basis.psi.col(i);
  }
  return f;
}

double min_eig_sym(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (S + S.transpose()),
                                                    Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

double max_eig_sym(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (S + S.transpose()),
                                                    Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

double default_fd_step(const Eigen::VectorXd& theta) { return 1e-5 * (1.0 + theta.norm()); }

Eigen::MatrixXd fd_jacobian(const MeanFlowModel& model, const Eigen::VectorXd& theta, double h,
                            bool* switching = nullptr) {
  const int d = static_cast<int>(theta.size());
  Eigen::MatrixXd J(d, d);
  std::vector<int> sel0;
  if (switching) {
    sel0 = greedy_selector(*model.mdp, q_table(model.basis, theta));
    *switching = false;
  }
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp(j) += h;
    tm(j) -= h;
    if (switching) {
      if (greedy_selector(*model.mdp, q_table(model.basis, tp)) != sel0 ||
          greedy_selector(*model.mdp, q_table(model.basis, tm)) != sel0)
        *switching = true;
    }
    J.col(j) = (mean_flow(model, tp) - mean_flow(model, tm)) / (2.0 * h);
  }
  return J;
}

}  // namespace

MeanFlowModel::MeanFlowModel(const ControlledMDP& m, PolicySpec p, Basis b)
    : mdp(&m), policy(std::move(p)), basis(std::move(b)) {
  validate_policy(m, policy);
}

void MeanFlowModel::clear_memo() const {
  pi_by_selector.clear();
  memo_valid = false;
  memo_pi_exp.resize(0);
}

Eigen::VectorXd stationary_vector(const MeanFlowModel& model, const Eigen::VectorXd& theta) {
  return make_eval(model, theta).pi;
}

Eigen::VectorXd mean_flow(const MeanFlowModel& model, const Eigen::VectorXd& theta) {
  return mean_flow_at(model, make_eval(model, theta));
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> flow_matrices(const MeanFlowModel& model,
                                                          const Eigen::VectorXd& theta) {
  const Eval ev = make_eval(model, theta);
  auto [A, b] = flow_matrices_at(model, ev);

  if (model.policy.kind == PolicyKind::EpsilonGreedy) {
    // Cross-check against the autocorrelation decomposition
    // A = -[R0 - gamma R_minus1] + eps gamma D (exact for eps-greedy).
    const ControlledMDP& mdp = *model.mdp;
    const Basis& basis = model.basis;
    const int d = basis.dim();
    const Eigen::MatrixXd G = greedy_features(basis, ev.greedy);
    std::vector<Eigen::VectorXd> nu(mdp.n_states);
    for (int x = 0; x < mdp.n_states; ++x) nu[x] = exploration_pmf(mdp, model.policy, x);
    const Eigen::MatrixXd Ge = averaged_features(basis, nu);
    const Eigen::MatrixXd Gp = averaged_features(basis, ev.pmf);

    Eigen::MatrixXd R0 = Eigen::MatrixXd::Zero(d, d);
    Eigen::MatrixXd Rm1 = Eigen::MatrixXd::Zero(d, d);
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(d, d);
    for (int i = 0; i < basis.map.dim(); ++i) {
      const auto [x, u] = basis.map.pairs[i];
      const Eigen::VectorXd row = mdp.P[u].row(x);
      R0.noalias() += ev.pi(i) * basis.psi.col(i) * basis.psi.col(i).transpose();
      Rm1.noalias() += ev.pi(i) * basis.psi.col(i) * (Gp * row).transpose();
      D.noalias() += ev.pi(i) * basis.psi.col(i) * ((G - Ge) * row).transpose();
    }
    const Eigen::MatrixXd alt =
        -(R0 - mdp.gamma * Rm1) + model.policy.epsilon * mdp.gamma * D;
    if ((A - alt).cwiseAbs().maxCoeff() > kIdentityTol)
      throw std::logic_error("flow_matrices: autocorrelation decomposition mismatch");
  }
  return {A, b};
}

RMatrixFamily r_matrices(const MeanFlowModel& model, const Eigen::VectorXd& theta) {
  const ControlledMDP& mdp = *model.mdp;
  const Basis& basis = model.basis;
  const int d = basis.dim();
  const Eval ev = make_eval(model, theta);

  std::vector<Eigen::VectorXd> nu(mdp.n_states), comp(mdp.n_states);
  for (int x = 0; x < mdp.n_states; ++x) {
    nu[x] = exploration_pmf(mdp, model.policy, x);
    comp[x] = theta_component_pmf(mdp, model.policy, ev.Q, x, ev.norm);
  }
  const Eigen::MatrixXd G = greedy_features(basis, ev.greedy);
  const Eigen::MatrixXd Ge = averaged_features(basis, nu);
  const Eigen::MatrixXd Gc = averaged_features(basis, comp);
  const Eigen::MatrixXd Gp = averaged_features(basis, ev.pmf);

  RMatrixFamily fam;
  fam.R0 = Eigen::MatrixXd::Zero(d, d);
  fam.R_minus1 = Eigen::MatrixXd::Zero(d, d);
  fam.R_Theta = Eigen::MatrixXd::Zero(d, d);
  fam.R_EXP_theta = Eigen::MatrixXd::Zero(d, d);
  fam.R_EXP = Eigen::MatrixXd::Zero(d, d);
  fam.D = Eigen::MatrixXd::Zero(d, d);
  fam.E = Eigen::MatrixXd::Zero(d, d);

  Eigen::VectorXd mu = Eigen::VectorXd::Zero(mdp.n_states);
  for (int i = 0; i < basis.map.dim(); ++i) mu(basis.map.pairs[i].first) += ev.pi(i);

  for (int i = 0; i < basis.map.dim(); ++i) {
    const auto [x, u] = basis.map.pairs[i];
    const Eigen::VectorXd row = mdp.P[u].row(x);
    fam.R0.noalias() += ev.pi(i) * basis.psi.col(i) * basis.psi.col(i).transpose();
    fam.R_minus1.noalias() += ev.pi(i) * basis.psi.col(i) * (Gp * row).transpose();
    fam.D.noalias() += ev.pi(i) * basis.psi.col(i) * ((G - Ge) * row).transpose();
    fam.E.noalias() += ev.pi(i) * basis.psi.col(i) * ((G - Gc) * row).transpose();
    // second moments of the component / exploration draws at the state marginal
    const double w_comp = mu(x) > 0.0 ? mu(x) * comp[x](u) : 0.0;
    const double w_exp = mu(x) > 0.0 ? mu(x) * nu[x](u) : 0.0;
    fam.R_Theta.noalias() += w_comp * basis.psi.col(i) * basis.psi.col(i).transpose();
    fam.R_EXP_theta.noalias() += w_exp * basis.psi.col(i) * basis.psi.col(i).transpose();
  }

  // Theta-independent R_EXP under the pure-exploration chain (cached).
  if (model.memo_pi_exp.size() == 0) {
    PolicySpec pure = model.policy;
    pure.kind = PolicyKind::EpsilonGreedy;
    pure.epsilon = 1.0;
    model.memo_pi_exp = invariant_vector(joint_transition(mdp, pure, ev.Q, ev.norm));
  }
  Eigen::VectorXd mu_exp = Eigen::VectorXd::Zero(mdp.n_states);
  for (int i = 0; i < basis.map.dim(); ++i)
    mu_exp(basis.map.pairs[i].first) += model.memo_pi_exp(i);
  for (int i = 0; i < basis.map.dim(); ++i) {
    const auto [x, u] = basis.map.pairs[i];
    fam.R_EXP.noalias() +=
        mu_exp(x) * nu[x](u) * basis.psi.col(i) * basis.psi.col(i).transpose();
  }

  fam.min_eig_R0 = min_eig_sym(fam.R0);
  fam.min_eig_R_Theta = min_eig_sym(fam.R_Theta);
  fam.min_eig_R_EXP_theta = min_eig_sym(fam.R_EXP_theta);
  fam.min_eig_R_EXP = min_eig_sym(fam.R_EXP);

  const double eff_eps =
      model.policy.kind == PolicyKind::Oblivious ? 0.0 : model.policy.epsilon;
  fam.mixture_identity_dev =
      (fam.R0 - ((1.0 - eff_eps) * fam.R_Theta + eff_eps * fam.R_EXP_theta))
          .cwiseAbs()
          .maxCoeff();
  if (fam.mixture_identity_dev > kIdentityTol)
    throw std::logic_error("r_matrices: mixture identity violated");
  return fam;
}

NegativityCertificate negativity_certificate(const MeanFlowModel& model, double epsilon,
                                             double gamma, int n_samples, std::uint64_t seed) {
  NegativityCertificate cert;
  cert.epsilon = epsilon;
  cert.gamma = gamma;
  cert.eps_threshold = epsilon_gamma(gamma);
  cert.eta_star = std::sqrt(1.0 / epsilon + 1.0 / (1.0 - epsilon));
  cert.coefficient = (1.0 - gamma) - epsilon * gamma * cert.eta_star;
  cert.expected_failure = epsilon >= cert.eps_threshold || cert.coefficient <= 0.0;
  cert.n_samples = n_samples;

  ControlledMDP mdp = *model.mdp;
  mdp.gamma = gamma;

  PolicySpec eg;
  eg.kind = PolicyKind::EpsilonGreedy;
  eg.epsilon = epsilon;
  eg.nu_exp = model.policy.nu_exp;
  PolicySpec tamed;
  tamed.kind = PolicyKind::TamedGibbs;
  tamed.epsilon = epsilon;
  tamed.kappa0 = model.policy.kappa0;
  tamed.nu_exp = model.policy.nu_exp;

  MeanFlowModel m_eg(mdp, eg, model.basis);
  MeanFlowModel m_t(mdp, tamed, model.basis);

  int max_adm = 0;
  for (int x = 0; x < mdp.n_states; ++x) max_adm = std::max(max_adm, mdp.num_admissible(x));
  const double log_u = std::log(static_cast<double>(max_adm));

  CounterRng rng(seed, 77);
  const int d = model.basis.dim();
  cert.lambda_min_R0 = std::numeric_limits<double>::infinity();
  cert.worst_ratio_greedy = -std::numeric_limits<double>::infinity();
  cert.worst_margin_greedy = -std::numeric_limits<double>::infinity();
  cert.worst_ratio_tamed = -std::numeric_limits<double>::infinity();
  cert.worst_margin_tamed = -std::numeric_limits<double>::infinity();
  bool all_neg = true;

  for (int s = 0; s < n_samples; ++s) {
    Eigen::VectorXd dir(d), v(d);
    for (int i = 0; i < d; ++i) dir(i) = rng.next_gaussian();
    for (int i = 0; i < d; ++i) v(i) = rng.next_gaussian();
    dir.normalize();
    v.normalize();
    const double norm = std::exp(rng.next_double() * std::log(100.0));  // in [1, 100]
    const Eigen::VectorXd theta = norm * dir;

    {  // eps-greedy branch: v' A v against the drift bound
      const Eval ev = make_eval(m_eg, theta);
      const auto [A, b] = flow_matrices_at(m_eg, ev);
      Eigen::MatrixXd R0 = Eigen::MatrixXd::Zero(d, d);
      for (int i = 0; i < model.basis.map.dim(); ++i)
        R0.noalias() +=
            ev.pi(i) * model.basis.psi.col(i) * model.basis.psi.col(i).transpose();
      const double lmin = min_eig_sym(R0);
      cert.lambda_min_R0 = std::min(cert.lambda_min_R0, lmin);
      const double ratio = v.dot(A * v);
      const double bound = -cert.coefficient * lmin;
      cert.worst_ratio_greedy = std::max(cert.worst_ratio_greedy, ratio);
      cert.worst_margin_greedy = std::max(cert.worst_margin_greedy, ratio - bound);
      all_neg = all_neg && ratio < 0.0;
    }
    {  // tamed-Gibbs branch: theta' A theta with the softmin slack
      const Eval ev = make_eval(m_t, theta);
      const auto [A, b] = flow_matrices_at(m_t, ev);
      Eigen::MatrixXd R0 = Eigen::MatrixXd::Zero(d, d);
      for (int i = 0; i < model.basis.map.dim(); ++i)
        R0.noalias() +=
            ev.pi(i) * model.basis.psi.col(i) * model.basis.psi.col(i).transpose();
      const double lmin = min_eig_sym(R0);
      const double lmax = max_eig_sym(R0);
      cert.lambda_min_R0 = std::min(cert.lambda_min_R0, lmin);
      const double ratio = theta.dot(A * theta) / (norm * norm);
      const double slack =
          gamma * (1.0 - epsilon) * (log_u / tamed.kappa0) * std::sqrt(std::max(lmax, 0.0));
      cert.kappa_slack = std::max(cert.kappa_slack, slack);
      const double bound = -cert.coefficient * lmin + slack;
      cert.worst_ratio_tamed = std::max(cert.worst_ratio_tamed, ratio);
      cert.worst_margin_tamed = std::max(cert.worst_margin_tamed, ratio - bound);
      all_neg = all_neg && ratio < 0.0;
    }
  }
  cert.analytic_bound = -cert.coefficient * cert.lambda_min_R0;
  cert.all_negative = all_neg;
  cert.bound_holds =
      cert.worst_margin_greedy <= 1e-9 && cert.worst_margin_tamed <= 1e-9;
  return cert;
}

OdeTrajectory ode_integrate(const VectorField& field, const Eigen::VectorXd& theta0,
                            double horizon, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("ode_integrate: step must be > 0");
  OdeTrajectory traj;
  Eigen::VectorXd th = theta0;
  double t = 0.0;
  traj.t.push_back(t);
  traj.theta.push_back(th);
  const long n_steps = static_cast<long>(std::ceil(horizon / step - 1e-12));
  for (long k = 0; k < n_steps; ++k) {
    const double h = std::min(step, horizon - t);
    const Eigen::VectorXd k1 = field(th);
    const Eigen::VectorXd k2 = field(th + 0.5 * h * k1);
    const Eigen::VectorXd k3 = field(th + 0.5 * h * k2);
    const Eigen::VectorXd k4 = field(th + h * k3);
    th += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    t += h;
    traj.t.push_back(t);
    traj.theta.push_back(th);
    if (th.norm() > 1e12) {
      traj.diverged = true;
      break;
    }
  }
  return traj;
}

VectorField mean_flow_field(const MeanFlowModel& model) {
  return [&model](const Eigen::VectorXd& th) { return mean_flow(model, th); };
}

VectorField newton_flow_field(const MeanFlowModel& model) {
  return [&model](const Eigen::VectorXd& th) {
    const Eigen::MatrixXd J = fd_jacobian(model, th, default_fd_step(th));
    return Eigen::VectorXd(-regularized_solve(J, mean_flow(model, th)));
  };
}

VectorField zap_greedy_field(const MeanFlowModel& model) {
  return [&model](const Eigen::VectorXd& th) {
    const auto [A, b] = flow_matrices(model, th);
    return Eigen::VectorXd(-th + regularized_solve(A, b));
  };
}

VectorField gq_flow_field(const MeanFlowModel& model, Eigen::MatrixXd M) {
  return [&model, M = std::move(M)](const Eigen::VectorXd& th) {
    const auto [A, b] = flow_matrices(model, th);
    const Eigen::VectorXd f = A * th - b;
    if (M.size() == 0) return Eigen::VectorXd(-A.transpose() * f);
    return Eigen::VectorXd(-A.transpose() * (M * f));
  };
}

VectorField dp_flow_field(const ControlledMDP& mdp) {
  const TabularMap map = TabularMap::of(mdp);
  return [mdp, map](const Eigen::VectorXd& q) {
    Eigen::VectorXd under(mdp.n_states);
    for (int x = 0; x < mdp.n_states; ++x) {
      double m = std::numeric_limits<double>::infinity();
      for (int u = 0; u < mdp.n_actions; ++u)
        if (map.index(x, u) >= 0) m = std::min(m, q(map.index(x, u)));
      under(x) = m;
    }
    Eigen::VectorXd out(map.dim());
    for (int i = 0; i < map.dim(); ++i) {
      const auto [x, u] = map.pairs[i];
      out(i) = mdp.cost(x, u) + mdp.gamma * mdp.P[u].row(x).dot(under) - q(i);
    }
    return out;
  };
}

VectorField relative_dp_flow_field(const ControlledMDP& mdp, double delta,
                                   const Eigen::VectorXd& nu_weights) {
  const VectorField base = dp_flow_field(mdp);
  return [base, delta, nu_weights](const Eigen::VectorXd& q) {
    Eigen::VectorXd out = base(q);
    out.array() -= delta * nu_weights.dot(q);
    return out;
  };
}

Eigen::MatrixXd dp_flow_jacobian(const ControlledMDP& mdp, const QTable& Q) {
  const TabularMap map = TabularMap::of(mdp);
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(map.dim(), map.dim());
  std::vector<int> phi(mdp.n_states);
  for (int x = 0; x < mdp.n_states; ++x) phi[x] = greedy_action(mdp, Q, x);
  for (int i = 0; i < map.dim(); ++i) {
    const auto [x, u] = map.pairs[i];
    for (int xn = 0; xn < mdp.n_states; ++xn)
      J(i, map.index(xn, phi[xn])) += mdp.gamma * mdp.P[u](x, xn);
    J(i, i) -= 1.0;
  }
  return J;
}

Eigen::MatrixXd relative_dp_flow_jacobian(const ControlledMDP& mdp, const QTable& Q, double delta,
                                          const Eigen::VectorXd& nu_weights) {
  Eigen::MatrixXd J = dp_flow_jacobian(mdp, Q);
  if (nu_weights.size() != J.rows())
    throw std::invalid_argument("relative_dp_flow_jacobian: weight length mismatch");
  J.noalias() -= delta * Eigen::VectorXd::Ones(J.rows()) * nu_weights.transpose();
  return J;
}

Eigen::VectorXd ode_at_infinity(const MeanFlowModel& model, const Eigen::VectorXd& theta) {
  const double norm = theta.norm();
  if (norm == 0.0) return Eigen::VectorXd::Zero(theta.size());
  const bool radial = model.policy.kind != PolicyKind::Gibbs;  // Gibbs(kappa) is not scale-free
  if (radial) {
    const auto [A, b] = flow_matrices(model, Eigen::VectorXd(theta / norm));
    return A * theta;
  }
  const double r = 1e6;
  return mean_flow(model, Eigen::VectorXd(r * theta)) / r;
}

LinearizationReport linearize(const MeanFlowModel& model, const Eigen::VectorXd& theta,
                              double fd_step) {
  const double h = std::isnan(fd_step) ? default_fd_step(theta) : fd_step;
  LinearizationReport rep;
  rep.A_star = fd_jacobian(model, theta, h, &rep.switching_warning);
  Eigen::EigenSolver<Eigen::MatrixXd> es(rep.A_star);
  rep.eigenvalues = es.eigenvalues();
  rep.margin = rep.eigenvalues.real().maxCoeff();
  rep.hurwitz = rep.margin < 0.0;
  return rep;
}

PbeSolution solve_pbe(const MeanFlowModel& model, const Eigen::VectorXd& theta0, double tol) {
  if (!(tol > 0.0)) throw std::invalid_argument("solve_pbe: tol must be > 0");
  constexpr int kMaxIters = 100;
  constexpr int kMaxHalvings = 30;

  PbeSolution sol;
  Eigen::VectorXd th = theta0;
  Eigen::VectorXd f = mean_flow(model, th);
  double res = f.norm();
  sol.trace.push_back(res);

  for (int it = 0; it < kMaxIters && res > tol; ++it) {
    bool accepted = false;
    // Newton direction from the finite-difference Jacobian, then a
    // frozen-policy retry: the analytic A(theta) is exact within one greedy
    // region and rescues stalls caused by min-kinks under the stencil. When
    // both Jacobian routes stall (typically on a greedy-tie manifold, e.g. a
    // zero start), relax along the flow itself to step off the manifold.
    for (int attempt = 0; attempt < 3 && !accepted; ++attempt) {
      Eigen::VectorXd dir;
      if (attempt == 2) {
        dir = f;
      } else {
        const Eigen::MatrixXd J = attempt == 0 ? fd_jacobian(model, th, default_fd_step(th))
                                               : flow_matrices(model, th).first;
        dir = regularized_solve(J, -f);
      }
      double lambda = 1.0;
      for (int halving = 0; halving <= kMaxHalvings; ++halving, lambda *= 0.5) {
        const Eigen::VectorXd cand = th + lambda * dir;
        const Eigen::VectorXd fc = mean_flow(model, cand);
        if (fc.norm() < res) {
          th = cand;
          f = fc;
          res = fc.norm();
          accepted = true;
          break;
        }
      }
    }
    sol.iterations = it + 1;
    if (!accepted) break;
    sol.trace.push_back(res);
  }

  // When damped steps stall -- typically pinned on a greedy switching surface
  // whose two region roots both lie across the surface, or crawling through a
  // stiff soft-greedy zone -- iterate the frozen-policy solve directly: jump
  // toward A(theta)^{-1} b(theta) and repeat. For a tabular basis under an
  // epsilon-greedy policy the full jump is exact policy iteration on the
  // greedy selector; for soft policies the jump map is a fixed-point
  // iteration, averaged toward the current iterate whenever the full step
  // overshoots. Three rounds without measurable progress end the loop, and
  // the best iterate seen is kept.
  if (res > tol) {
    Eigen::VectorXd best_th = th;
    double best_res = res;
    int stalled_rounds = 0;
    for (int round = 0; round < 200 && stalled_rounds < 3; ++round) {
      const auto [A, b] = flow_matrices(model, th);
      const Eigen::VectorXd target = regularized_solve(A, b);
      Eigen::VectorXd trial = th;
      double trial_res = std::numeric_limits<double>::infinity();
      for (double t = 1.0; t >= 1.0 / 64.0; t *= 0.5) {
        const Eigen::VectorXd cand = th + t * (target - th);
        const double rc = mean_flow(model, cand).norm();
        if (rc < trial_res) {
          trial_res = rc;
          trial = cand;
        }
        if (rc < res) break;
      }
      th = trial;
      res = trial_res;
      ++sol.iterations;
      sol.trace.push_back(res);
      stalled_rounds = res < best_res * (1.0 - 1e-3) ? 0 : stalled_rounds + 1;
      if (res < best_res) {
        best_th = th;
        best_res = res;
      }
      if (res <= tol) break;
    }
    th = best_th;
    res = best_res;
  }

  // When every algebraic route leaves a residual -- descent on |f| can pin
  // on a non-root local minimum near a tie manifold, especially under sharp
  // soft-greedy policies -- ride the flow theta' = f(theta) itself. Whenever
  // the flow is convergent (the regime the drift certificate describes) it
  // reaches the root from anywhere and is immune to that trap; the root is a
  // fixed point of the Runge-Kutta map too, so there is no discretization
  // floor.
  if (res > tol) {
    Eigen::VectorXd best_th = th;
    double best_res = res;
    double marker = res;  // best at the last step-size decision
    // Two distinct failure modes of the explicit integrator, two reactions.
    // Outright explosion (the stability limit amplifies by orders of
    // magnitude within a few steps) restores the best point and quarters the
    // step. No progress over a fixed stretch of flow time halves the step in
    // place: that covers both a chattering cycle across a switching zone
    // (amplitude scales with the step) and an escape transient that climbs
    // before it descends, which must keep its ground. Residual growth below
    // the explosion threshold is left alone: along a convergent flow it is a
    // bounded transient.
    const double blowup = 1e6 * (res + 1.0);
    double h = 1e-2;
    int stagnation = 0;
    for (long step = 0; step < 20000 && h > 1e-7; ++step) {
      if (!th.allFinite()) {
        th = best_th;
        h *= 0.25;
        continue;
      }
      const Eigen::VectorXd k1 = mean_flow(model, th);
      res = k1.norm();
      if (res < best_res) {
        best_res = res;
        best_th = th;
      }
      if (res <= tol) break;
      if (!std::isfinite(res) || res > blowup) {
        th = best_th;
        h *= 0.25;
        stagnation = 0;
        marker = best_res;
        continue;
      }
      if (best_res < 0.99 * marker) {
        marker = best_res;
        stagnation = 0;
      } else if (++stagnation >= static_cast<int>(3.0 / h)) {
        // Halve in place: a chattering iterate is already pinned near the
        // switching zone (its cycle amplitude scales with h), and a slow
        // escape transient keeps the ground it has gained either way.
        h *= 0.5;
        stagnation = 0;
        marker = best_res;
        continue;
      }
      const Eigen::VectorXd k2 = mean_flow(model, Eigen::VectorXd(th + 0.5 * h * k1));
      const Eigen::VectorXd k3 = mean_flow(model, Eigen::VectorXd(th + 0.5 * h * k2));
      const Eigen::VectorXd k4 = mean_flow(model, Eigen::VectorXd(th + h * k3));
      th += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    th = best_th;
    res = best_res;
    sol.trace.push_back(res);
  }

  // Fresh-eyes residual: drop every cached invariant measure and recompute.
  model.clear_memo();
  sol.theta_star = th;
  sol.residual = mean_flow(model, th).norm();
  sol.converged = sol.residual <= 2.0 * tol && res <= tol;
  return sol;
}

double mean_square_bellman_error(const MeanFlowModel& model, const Eigen::VectorXd& theta) {
  const ControlledMDP& mdp = *model.mdp;
  const Eval ev = make_eval(model, theta);
  double obj = 0.0;
  for (int i = 0; i < model.basis.map.dim(); ++i) {
    const auto [x, u] = model.basis.map.pairs[i];
    const double B = mdp.cost(x, u) + mdp.gamma * mdp.P[u].row(x).dot(ev.underQ) - ev.Q(x, u);
    obj += 0.5 * ev.pi(i) * B * B;
  }
  return obj;
}

ResidualGradient residual_gradient_field(const MeanFlowModel& model,
                                         const Eigen::VectorXd& theta, Eigen::MatrixXd M) {
  const ControlledMDP& mdp = *model.mdp;
  const Basis& basis = model.basis;
  const Eval ev = make_eval(model, theta);
  const Eigen::MatrixXd G = greedy_features(basis, ev.greedy);

  ResidualGradient out;
  out.baird_gradient = Eigen::VectorXd::Zero(basis.dim());
  for (int i = 0; i < basis.map.dim(); ++i) {
    const auto [x, u] = basis.map.pairs[i];
    const Eigen::VectorXd row = mdp.P[u].row(x);
    const double B = mdp.cost(x, u) + mdp.gamma * row.dot(ev.underQ) - ev.Q(x, u);
    out.baird_gradient.noalias() +=
        ev.pi(i) * B * (mdp.gamma * (G * row) - basis.psi.col(i));
  }

  const auto [A, b] = flow_matrices_at(model, ev);
  const Eigen::VectorXd f = A * theta - b;
  if (M.size() == 0)
    out.gq_field = -A.transpose() * f;
  else
    out.gq_field = -A.transpose() * (M * f);
  return out;
}

}  // namespace qsa
