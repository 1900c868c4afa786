#include "qsa/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace qsa {

namespace {
constexpr double kPmfTol = 1e-12;  // row-sum / pmf slack for <= 36 doubles
constexpr double kInf = std::numeric_limits<double>::infinity();
}  // namespace

double ControlledMDP::cost_scale() const {
  double s = 0.0;
  for (int x = 0; x < n_states; ++x)
    for (int u = 0; u < n_actions; ++u)
      if (admissible(x, u)) s = std::max(s, std::abs(cost(x, u)));
  return s;
}

TabularMap TabularMap::of(const ControlledMDP& mdp) {
  TabularMap map;
  map.index = Eigen::MatrixXi::Constant(mdp.n_states, mdp.n_actions, -1);
  for (int x = 0; x < mdp.n_states; ++x)
    for (int u = 0; u < mdp.n_actions; ++u)
      if (mdp.admissible(x, u)) {
        map.index(x, u) = static_cast<int>(map.pairs.size());
        map.pairs.emplace_back(x, u);
      }
  return map;
}

std::vector<std::string> validate(const ControlledMDP& mdp) {
  std::vector<std::string> report;
  auto add = [&report](const std::string& msg) { report.push_back(msg); };

  if (mdp.n_states < 1) add("n_states must be >= 1");
  if (mdp.n_actions < 1) add("n_actions must be >= 1");
  if (!(mdp.gamma >= 0.0 && mdp.gamma < 1.0)) add("discount out of range [0,1)");
  if (static_cast<int>(mdp.P.size()) != mdp.n_actions)
    add("number of transition matrices != n_actions");
  if (mdp.cost.rows() != mdp.n_states || mdp.cost.cols() != mdp.n_actions)
    add("cost matrix shape mismatch");
  if (!report.empty()) return report;  // shape errors make the rest meaningless

  for (int u = 0; u < mdp.n_actions; ++u) {
    if (mdp.P[u].rows() != mdp.n_states || mdp.P[u].cols() != mdp.n_states) {
      std::ostringstream os;
      os << "transition matrix for action " << u << " has wrong shape";
      add(os.str());
      continue;
    }
    for (int x = 0; x < mdp.n_states; ++x) {
      double row_sum = 0.0;
      bool negative = false;
      for (int y = 0; y < mdp.n_states; ++y) {
        const double p = mdp.P[u](x, y);
        if (!(p >= 0.0)) negative = true;
        row_sum += p;
      }
      if (negative) {
        std::ostringstream os;
        os << "negative probability in row (u=" << u << ", x=" << x << ")";
        add(os.str());
      }
      if (std::abs(row_sum - 1.0) > kPmfTol) {
        std::ostringstream os;
        os << "row sum " << row_sum << " != 1 in row (u=" << u << ", x=" << x << ")";
        add(os.str());
      }
    }
  }

  for (int x = 0; x < mdp.n_states; ++x) {
    int adm = 0;
    for (int u = 0; u < mdp.n_actions; ++u) {
      const double c = mdp.cost(x, u);
      if (std::isfinite(c)) {
        ++adm;
      } else if (!(c == kInf)) {  // only the +inf sentinel is allowed
        std::ostringstream os;
        os << "cost(" << x << "," << u << ") is not finite and not the +inf mask";
        add(os.str());
      }
    }
    if (adm == 0) {
      std::ostringstream os;
      os << "state " << x << " has no admissible action";
      add(os.str());
    }
  }
  return report;
}

double min_admissible(const ControlledMDP& mdp, const QTable& Q, int x) {
  double best = kInf;
  for (int u = 0; u < mdp.n_actions; ++u)
    if (mdp.admissible(x, u) && Q(x, u) < best) best = Q(x, u);
  return best;
}

int greedy_action(const ControlledMDP& mdp, const QTable& Q, int x) {
  int arg = -1;
  double best = kInf;
  for (int u = 0; u < mdp.n_actions; ++u)
    if (mdp.admissible(x, u) && Q(x, u) < best) {  // strict < keeps lowest index on ties
      best = Q(x, u);
      arg = u;
    }
  if (arg < 0) throw std::runtime_error("greedy_action: no admissible action");
  return arg;
}

Eigen::VectorXd min_vector(const ControlledMDP& mdp, const QTable& Q) {
  Eigen::VectorXd m(mdp.n_states);
  for (int x = 0; x < mdp.n_states; ++x) m(x) = min_admissible(mdp, Q, x);
  return m;
}

namespace {

// One sweep of Q <- c + gamma * P underQ; masked entries stay zero.
QTable dp_sweep(const ControlledMDP& mdp, const QTable& Q) {
  const Eigen::VectorXd under = min_vector(mdp, Q);
  QTable next = QTable::Zero(mdp.n_states, mdp.n_actions);
  for (int u = 0; u < mdp.n_actions; ++u) {
    const Eigen::VectorXd cont = mdp.P[u] * under;
    for (int x = 0; x < mdp.n_states; ++x)
      if (mdp.admissible(x, u)) next(x, u) = mdp.cost(x, u) + mdp.gamma * cont(x);
  }
  return next;
}

double sup_diff_admissible(const ControlledMDP& mdp, const QTable& A, const QTable& B) {
  double s = 0.0;
  for (int x = 0; x < mdp.n_states; ++x)
    for (int u = 0; u < mdp.n_actions; ++u)
      if (mdp.admissible(x, u)) s = std::max(s, std::abs(A(x, u) - B(x, u)));
  return s;
}

}  // namespace

QTable value_iteration(const ControlledMDP& mdp, double tol) {
  if (!(tol > 0.0)) throw std::invalid_argument("value_iteration: tol must be > 0");
  {
    auto report = validate(mdp);
    if (!report.empty())
      throw std::invalid_argument("value_iteration: invalid mdp: " + report.front());
  }

  QTable Q = QTable::Zero(mdp.n_states, mdp.n_actions);
  QTable next = dp_sweep(mdp, Q);
  double residual = sup_diff_admissible(mdp, next, Q);
  if (residual <= tol) return next;
  if (mdp.gamma == 0.0) return next;  // one sweep is exact

  // Geometric decay bounds the sweep count; add slack for rounding.
  const double c0 = residual;
  long max_iters =
      static_cast<long>(std::ceil(std::log(tol * (1.0 - mdp.gamma) / c0) / std::log(mdp.gamma))) +
      16;

  for (long it = 0; it < max_iters; ++it) {
    Q.swap(next);
    next = dp_sweep(mdp, Q);
    const double prev = residual;
    residual = sup_diff_admissible(mdp, next, Q);
    // Contraction check: each sweep shrinks the residual by at least gamma.
    if (residual > mdp.gamma * prev + 1e-12 * (1.0 + prev))
      throw std::runtime_error("value_iteration: contraction violated");
    if (residual <= tol) return next;
  }
  throw std::runtime_error(
      "value_iteration: tolerance unachievable in double precision for this instance");
}

std::pair<QTable, double> bellman_error(const ControlledMDP& mdp, const QTable& Q) {
  if (Q.rows() != mdp.n_states || Q.cols() != mdp.n_actions)
    throw std::invalid_argument("bellman_error: dimension mismatch");
  const Eigen::VectorXd under = min_vector(mdp, Q);
  QTable B = QTable::Zero(mdp.n_states, mdp.n_actions);
  double max_abs = 0.0;
  for (int u = 0; u < mdp.n_actions; ++u) {
    const Eigen::VectorXd cont = mdp.P[u] * under;
    for (int x = 0; x < mdp.n_states; ++x)
      if (mdp.admissible(x, u)) {
        B(x, u) = mdp.cost(x, u) + mdp.gamma * cont(x) - Q(x, u);
        max_abs = std::max(max_abs, std::abs(B(x, u)));
      }
  }
  return {B, max_abs};
}

double span_seminorm(const QTable& Q1, const QTable& Q2) {
  if (Q1.rows() != Q2.rows() || Q1.cols() != Q2.cols())
    throw std::invalid_argument("span_seminorm: dimension mismatch");
  const Eigen::MatrixXd D = Q1 - Q2;
  return (D.maxCoeff() - D.minCoeff()) / 2.0;
}

double span_seminorm(const ControlledMDP& mdp, const QTable& Q1, const QTable& Q2) {
  double lo = kInf, hi = -kInf;
  for (int x = 0; x < mdp.n_states; ++x)
    for (int u = 0; u < mdp.n_actions; ++u)
      if (mdp.admissible(x, u)) {
        const double d = Q1(x, u) - Q2(x, u);
        lo = std::min(lo, d);
        hi = std::max(hi, d);
      }
  return (hi - lo) / 2.0;
}

QTable relative_qfunction(const QTable& Q, const StateActionPmf& nu) {
  if (Q.rows() != nu.rows() || Q.cols() != nu.cols())
    throw std::invalid_argument("relative_qfunction: dimension mismatch");
  double total = nu.sum();
  if (std::abs(total - 1.0) > kPmfTol || nu.minCoeff() < 0.0)
    throw std::invalid_argument("relative_qfunction: nu is not a pmf");
  const double mean = (nu.array() * Q.array()).sum();
  return Q.array() - mean;
}

ControlledMDP six_state_example(double gamma) {
  // Sorted neighbor lists for nodes 1..6 (stored 0-based).
  static const std::vector<std::vector<int>> neighbors = {
      {1, 2},        // node 1 -> {2,3}
      {0, 2, 3},     // node 2 -> {1,3,4}
      {0, 1, 4},     // node 3 -> {1,2,5}
      {1, 4, 5},     // node 4 -> {2,5,6}
      {2, 3, 5},     // node 5 -> {3,4,6}
      {0},           // node 6 -> renewal to node 1
  };
  const int n = 6, m = 3;
  ControlledMDP mdp;
  mdp.n_states = n;
  mdp.n_actions = m;
  mdp.gamma = gamma;
  mdp.cost = Eigen::MatrixXd::Constant(n, m, kInf);
  mdp.P.assign(m, Eigen::MatrixXd::Zero(n, n));
  for (int u = 0; u < m; ++u)
    for (int x = 0; x < n; ++x) mdp.P[u](x, x) = 1.0;  // unused masked rows hold

  for (int x = 0; x < n; ++x) {
    for (int u = 0; u < static_cast<int>(neighbors[x].size()); ++u) {
      const int y = neighbors[x][u];
      mdp.P[u].row(x).setZero();
      if (x == 5) {  // renewal: node 6 -> node 1, free and certain
        mdp.P[u](x, y) = 1.0;
        mdp.cost(x, u) = 0.0;
      } else {
        mdp.P[u](x, y) = 0.8;
        mdp.P[u](x, x) += 0.2;
        mdp.cost(x, u) = 1.0;
      }
    }
  }
  return mdp;
}

ControlledMDP random_mdp(int n_states, int n_actions, double gamma, CounterRng& rng,
                         double mask_prob) {
  if (n_states < 1 || n_actions < 1) throw std::invalid_argument("random_mdp: empty instance");
  if (!(mask_prob >= 0.0 && mask_prob < 1.0))
    throw std::invalid_argument("random_mdp: mask_prob out of [0,1)");
  ControlledMDP mdp;
  mdp.n_states = n_states;
  mdp.n_actions = n_actions;
  mdp.gamma = gamma;
  mdp.cost = Eigen::MatrixXd::Constant(n_states, n_actions, kInf);
  mdp.P.assign(n_actions, Eigen::MatrixXd::Zero(n_states, n_states));
  for (int u = 0; u < n_actions; ++u)
    for (int x = 0; x < n_states; ++x) mdp.P[u](x, x) = 1.0;  // masked-row placeholder

  for (int x = 0; x < n_states; ++x) {
    std::vector<int> admissible;
    for (int u = 0; u < n_actions; ++u)
      if (rng.next_double() >= mask_prob) admissible.push_back(u);
    if (admissible.empty()) admissible.push_back(static_cast<int>(rng.next_u64() % n_actions));
    for (int u : admissible) {
      mdp.cost(x, u) = rng.next_double();
      double sum = 0.0;
      for (int y = 0; y < n_states; ++y) {
        const double w = -std::log(rng.next_double_pos());  // strictly positive weight
        mdp.P[u](x, y) = w;
        sum += w;
      }
      mdp.P[u].row(x) /= sum;
    }
  }
  return mdp;
}

int sample_transition(const ControlledMDP& mdp, int x, int u, CounterRng& rng) {
  if (x < 0 || x >= mdp.n_states || u < 0 || u >= mdp.n_actions)
    throw std::invalid_argument("sample_transition: index out of range");
  const Eigen::VectorXd row = mdp.P[u].row(x);
  return rng.next_index(row.data(), mdp.n_states);
}

}  // namespace qsa
