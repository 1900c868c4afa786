#include "qsa/basis.hpp"

namespace qsa {

Basis Basis::tabular(const ControlledMDP& mdp) {
  Basis b;
  b.map = TabularMap::of(mdp);
  b.psi = Eigen::MatrixXd::Identity(b.map.dim(), b.map.dim());
  return b;
}

Basis Basis::random(const ControlledMDP& mdp, int d, CounterRng& rng) {
  Basis b;
  b.map = TabularMap::of(mdp);
  b.psi.resize(d, b.map.dim());
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < b.map.dim(); ++j) b.psi(i, j) = rng.next_gaussian();
  return b;
}

QTable q_table(const Basis& basis, const Eigen::VectorXd& theta) {
  const int n_states = static_cast<int>(basis.map.index.rows());
  const int n_actions = static_cast<int>(basis.map.index.cols());
  QTable Q = QTable::Zero(n_states, n_actions);
  for (int j = 0; j < basis.map.dim(); ++j) {
    const auto [x, u] = basis.map.pairs[j];
    Q(x, u) = basis.psi.col(j).dot(theta);
  }
  return Q;
}

Eigen::VectorXd flatten(const TabularMap& map, const QTable& Q) {
  Eigen::VectorXd v(map.dim());
  for (int j = 0; j < map.dim(); ++j) {
    const auto [x, u] = map.pairs[j];
    v(j) = Q(x, u);
  }
  return v;
}

}  // namespace qsa
