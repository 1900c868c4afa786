#include "qsa/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "qsa/rng.hpp"

namespace qsa {
namespace {

using njson = nlohmann::ordered_json;

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::uint64_t kBasisStream = 9;  // substream reserved for random bases

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError(path + ": " + what);
}

void check_keys(const njson& j, const std::string& path, std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) known = true;
    if (!known) fail(path, "unknown field '" + item.key() + "'");
  }
}

const njson& member(const njson& j, const std::string& path, const char* key) {
  if (!j.contains(key)) fail(path + "." + key, "missing");
  return j.at(key);
}

double num_at(const njson& j, const std::string& path) {
  if (!j.is_number()) fail(path, "expected a number");
  return j.get<double>();
}

long int_at(const njson& j, const std::string& path) {
  if (!j.is_number_integer()) fail(path, "expected an integer");
  return j.get<long>();
}

std::uint64_t seed_at(const njson& j, const std::string& path) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<long long>() >= 0)
    return static_cast<std::uint64_t>(j.get<long long>());
  fail(path, "expected a nonnegative integer");
}

std::string str_at(const njson& j, const std::string& path) {
  if (!j.is_string()) fail(path, "expected a string");
  return j.get<std::string>();
}

bool bool_at(const njson& j, const std::string& path) {
  if (!j.is_boolean()) fail(path, "expected a boolean");
  return j.get<bool>();
}

Eigen::VectorXd vec_at(const njson& j, const std::string& path) {
  if (!j.is_array()) fail(path, "expected an array of numbers");
  Eigen::VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v(i) = num_at(j[i], path);
  return v;
}

// Rectangular matrix; null entries become +inf when allow_null is set
// (the cost-mask convention).
Eigen::MatrixXd mat_at(const njson& j, const std::string& path, bool allow_null = false) {
  if (!j.is_array() || j.empty()) fail(path, "expected a nonempty array of rows");
  const std::size_t rows = j.size();
  std::size_t cols = 0;
  Eigen::MatrixXd m;
  for (std::size_t r = 0; r < rows; ++r) {
    const njson& row = j[r];
    if (!row.is_array()) fail(path, "expected an array of rows");
    if (r == 0) {
      cols = row.size();
      m.resize(rows, cols);
    } else if (row.size() != cols) {
      fail(path, "rows have unequal lengths");
    }
    for (std::size_t c = 0; c < cols; ++c) {
      if (allow_null && row[c].is_null())
        m(r, c) = kInf;
      else
        m(r, c) = num_at(row[c], path);
    }
  }
  return m;
}

njson vec_json(const Eigen::VectorXd& v) {
  njson a = njson::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

njson mat_json(const Eigen::MatrixXd& m, bool inf_as_null = false) {
  njson rows = njson::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    njson row = njson::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (inf_as_null && !std::isfinite(m(r, c)))
        row.push_back(nullptr);
      else
        row.push_back(m(r, c));
    }
    rows.push_back(row);
  }
  return rows;
}

PolicyKind policy_kind_of(const std::string& s, const std::string& path) {
  if (s == "oblivious") return PolicyKind::Oblivious;
  if (s == "eps-greedy") return PolicyKind::EpsilonGreedy;
  if (s == "gibbs") return PolicyKind::Gibbs;
  if (s == "tamed-gibbs") return PolicyKind::TamedGibbs;
  fail(path, "expected one of oblivious | eps-greedy | gibbs | tamed-gibbs, got '" + s + "'");
}

const char* policy_kind_name(PolicyKind k) {
  switch (k) {
    case PolicyKind::Oblivious: return "oblivious";
    case PolicyKind::EpsilonGreedy: return "eps-greedy";
    case PolicyKind::Gibbs: return "gibbs";
    default: return "tamed-gibbs";
  }
}

EstimatorKind estimator_kind_of(const std::string& s, const std::string& path) {
  if (s == "plain") return EstimatorKind::Plain;
  if (s == "matrix-gain") return EstimatorKind::MatrixGain;
  if (s == "zap") return EstimatorKind::Zap;
  if (s == "zap-zero") return EstimatorKind::ZapZero;
  fail(path, "expected one of plain | matrix-gain | zap | zap-zero, got '" + s + "'");
}

const char* estimator_kind_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::Plain: return "plain";
    case EstimatorKind::MatrixGain: return "matrix-gain";
    case EstimatorKind::Zap: return "zap";
    default: return "zap-zero";
  }
}

TdVariant td_of(const std::string& s, const std::string& path) {
  if (s == "watkins") return TdVariant::Watkins;
  if (s == "on-policy") return TdVariant::OnPolicy;
  if (s == "relative") return TdVariant::Relative;
  fail(path, "expected one of watkins | on-policy | relative, got '" + s + "'");
}

const char* td_name(TdVariant t) {
  switch (t) {
    case TdVariant::Watkins: return "watkins";
    case TdVariant::OnPolicy: return "on-policy";
    default: return "relative";
  }
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// --- tiny SVG scaffolding -------------------------------------------------

constexpr int kW = 720, kH = 440;
constexpr int kLeft = 70, kRight = 30, kTop = 50, kBottom = 50;

std::string svg_head(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n"
     << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n"
     << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" "
     << "font-family=\"monospace\" font-size=\"15\">" << title << "</text>\n"
     << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << kW - kLeft - kRight
     << "\" height=\"" << kH - kTop - kBottom
     << "\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n";
  return os.str();
}

std::string svg_label(double x, double y, const std::string& text, const char* anchor = "middle") {
  std::ostringstream os;
  os << "<text x=\"" << x << "\" y=\"" << y << "\" text-anchor=\"" << anchor
     << "\" font-family=\"monospace\" font-size=\"11\">" << text << "</text>\n";
  return os.str();
}

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// Linear map onto the plot area; a degenerate range maps to the midline.
struct Scale {
  double lo = 0.0, hi = 1.0, a = 0.0, b = 1.0;  // data range -> pixel range
  Scale(double lo_, double hi_, double a_, double b_) : lo(lo_), hi(hi_), a(a_), b(b_) {
    if (!(hi > lo)) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
  double operator()(double v) const { return a + (v - lo) / (hi - lo) * (b - a); }
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

// --- configuration --------------------------------------------------------

ExperimentConfig parse_config(const std::string& json_text) {
  njson j;
  try {
    j = njson::parse(json_text);
  } catch (const njson::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  check_keys(j, "config",
             {"mdp", "gamma", "basis", "policy", "estimator", "schedule", "steps", "runs", "seed",
              "out", "theta0"});

  ExperimentConfig cfg;

  if (j.contains("mdp")) {
    const njson& m = j.at("mdp");
    if (m.is_string()) {
      cfg.mdp_builtin = m.get<std::string>();
      cfg.mdp_file.clear();
    } else if (m.is_object()) {
      check_keys(m, "mdp", {"file"});
      cfg.mdp_file = str_at(member(m, "mdp", "file"), "mdp.file");
    } else {
      fail("mdp", "expected a builtin name or {\"file\": path}");
    }
  }

  if (j.contains("gamma")) cfg.gamma = num_at(j.at("gamma"), "gamma");
  if (!(cfg.gamma > 0.0 && cfg.gamma < 1.0)) fail("gamma", "expected a number in (0, 1)");

  if (j.contains("basis")) {
    const njson& b = j.at("basis");
    if (!b.is_object()) fail("basis", "expected an object");
    check_keys(b, "basis", {"kind", "d"});
    if (b.contains("kind")) cfg.basis_kind = str_at(b.at("kind"), "basis.kind");
    if (cfg.basis_kind != "tabular" && cfg.basis_kind != "random")
      fail("basis.kind", "expected tabular | random, got '" + cfg.basis_kind + "'");
    if (b.contains("d")) cfg.basis_dim = static_cast<int>(int_at(b.at("d"), "basis.d"));
    if (cfg.basis_dim < 1) fail("basis.d", "expected a positive integer");
  }

  if (j.contains("policy")) {
    const njson& p = j.at("policy");
    if (!p.is_object()) fail("policy", "expected an object");
    check_keys(p, "policy", {"kind", "epsilon", "kappa0", "nu_exp", "oblivious_pmf"});
    cfg.policy.kind = policy_kind_of(str_at(member(p, "policy", "kind"), "policy.kind"),
                                     "policy.kind");
    if (p.contains("epsilon")) cfg.policy.epsilon = num_at(p.at("epsilon"), "policy.epsilon");
    if (!(cfg.policy.epsilon >= 0.0 && cfg.policy.epsilon <= 1.0))
      fail("policy.epsilon", "expected a number in [0, 1]");
    if (p.contains("kappa0")) cfg.policy.kappa0 = num_at(p.at("kappa0"), "policy.kappa0");
    if (!(cfg.policy.kappa0 > 0.0)) fail("policy.kappa0", "expected a positive number");
    if (p.contains("nu_exp")) cfg.policy.nu_exp = vec_at(p.at("nu_exp"), "policy.nu_exp");
    if (p.contains("oblivious_pmf"))
      cfg.policy.oblivious_pmf = mat_at(p.at("oblivious_pmf"), "policy.oblivious_pmf");
  }

  if (j.contains("estimator")) {
    const njson& e = j.at("estimator");
    if (!e.is_object()) fail("estimator", "expected an object");
    check_keys(e, "estimator", {"kind", "td", "delta", "nu", "M", "safeguard", "safeguard_radius"});
    if (e.contains("kind"))
      cfg.estimator.kind = estimator_kind_of(str_at(e.at("kind"), "estimator.kind"),
                                             "estimator.kind");
    if (e.contains("td")) cfg.estimator.td = td_of(str_at(e.at("td"), "estimator.td"),
                                                   "estimator.td");
    if (e.contains("delta")) cfg.estimator.delta = num_at(e.at("delta"), "estimator.delta");
    if (!(cfg.estimator.delta > 0.0)) fail("estimator.delta", "expected a positive number");
    if (e.contains("nu")) cfg.estimator.nu = mat_at(e.at("nu"), "estimator.nu");
    if (e.contains("M")) cfg.estimator.M = mat_at(e.at("M"), "estimator.M");
    if (e.contains("safeguard"))
      cfg.estimator.safeguard = bool_at(e.at("safeguard"), "estimator.safeguard");
    if (e.contains("safeguard_radius"))
      cfg.estimator.safeguard_radius = num_at(e.at("safeguard_radius"),
                                              "estimator.safeguard_radius");
    if (!(cfg.estimator.safeguard_radius > 0.0))
      fail("estimator.safeguard_radius", "expected a positive number");
  }

  if (j.contains("schedule")) {
    const njson& s = j.at("schedule");
    if (!s.is_object()) fail("schedule", "expected an object");
    check_keys(s, "schedule", {"g", "rho", "g_beta", "rho_beta"});
    double g = 1.0, rho = 1.0;
    if (s.contains("g")) g = num_at(s.at("g"), "schedule.g");
    if (s.contains("rho")) rho = num_at(s.at("rho"), "schedule.rho");
    try {
      if (s.contains("g_beta") || s.contains("rho_beta")) {
        double gb = 1.0, rb = 0.85;
        if (s.contains("g_beta")) gb = num_at(s.at("g_beta"), "schedule.g_beta");
        if (s.contains("rho_beta")) rb = num_at(s.at("rho_beta"), "schedule.rho_beta");
        cfg.schedule = StepSchedule(g, rho, gb, rb);
      } else {
        cfg.schedule = StepSchedule(g, rho);
      }
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("schedule: ") + e.what());
    }
  }

  if (j.contains("steps")) cfg.n_steps = int_at(j.at("steps"), "steps");
  if (cfg.n_steps < 1) fail("steps", "expected a positive integer");
  if (j.contains("runs")) cfg.n_runs = static_cast<int>(int_at(j.at("runs"), "runs"));
  if (cfg.n_runs < 1) fail("runs", "expected a positive integer");
  if (j.contains("seed")) cfg.seed = seed_at(j.at("seed"), "seed");
  if (j.contains("out")) cfg.out_dir = str_at(j.at("out"), "out");
  if (j.contains("theta0")) cfg.theta0 = vec_at(j.at("theta0"), "theta0");

  return cfg;
}

std::string emit_config(const ExperimentConfig& cfg) {
  njson j;
  if (cfg.mdp_file.empty())
    j["mdp"] = cfg.mdp_builtin;
  else
    j["mdp"] = njson{{"file", cfg.mdp_file}};
  j["gamma"] = cfg.gamma;
  j["basis"] = njson{{"kind", cfg.basis_kind}, {"d", cfg.basis_dim}};

  njson p;
  p["kind"] = policy_kind_name(cfg.policy.kind);
  p["epsilon"] = cfg.policy.epsilon;
  p["kappa0"] = cfg.policy.kappa0;
  if (cfg.policy.nu_exp.size() > 0) p["nu_exp"] = vec_json(cfg.policy.nu_exp);
  if (cfg.policy.oblivious_pmf.size() > 0)
    p["oblivious_pmf"] = mat_json(cfg.policy.oblivious_pmf);
  j["policy"] = p;

  njson e;
  e["kind"] = estimator_kind_name(cfg.estimator.kind);
  e["td"] = td_name(cfg.estimator.td);
  e["delta"] = cfg.estimator.delta;
  if (cfg.estimator.nu.size() > 0) e["nu"] = mat_json(cfg.estimator.nu);
  if (cfg.estimator.M.size() > 0) e["M"] = mat_json(cfg.estimator.M);
  e["safeguard"] = cfg.estimator.safeguard;
  e["safeguard_radius"] = cfg.estimator.safeguard_radius;
  j["estimator"] = e;

  njson s;
  s["g"] = cfg.schedule.g;
  s["rho"] = cfg.schedule.rho;
  if (cfg.schedule.has_beta) {
    s["g_beta"] = cfg.schedule.g_beta;
    s["rho_beta"] = cfg.schedule.rho_beta;
  }
  j["schedule"] = s;

  j["steps"] = cfg.n_steps;
  j["runs"] = cfg.n_runs;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out_dir;
  if (cfg.theta0.size() > 0) j["theta0"] = vec_json(cfg.theta0);

  return j.dump(2) + "\n";
}

ControlledMDP resolve_mdp(const ExperimentConfig& cfg) {
  ControlledMDP mdp;
  if (!cfg.mdp_file.empty()) {
    mdp = mdp_from_json(read_file(cfg.mdp_file));
    mdp.gamma = cfg.gamma;  // the experiment's discount wins
  } else if (cfg.mdp_builtin == "six-state") {
    mdp = six_state_example(cfg.gamma);
  } else {
    fail("mdp", "unknown builtin '" + cfg.mdp_builtin + "' (available: six-state)");
  }
  const auto issues = validate(mdp);
  if (!issues.empty()) fail("mdp", issues.front());
  return mdp;
}

Basis resolve_basis(const ExperimentConfig& cfg, const ControlledMDP& mdp) {
  if (cfg.basis_kind == "tabular") return Basis::tabular(mdp);
  CounterRng rng(cfg.seed, kBasisStream);
  return Basis::random(mdp, cfg.basis_dim, rng);
}

// --- MDP files ------------------------------------------------------------

ControlledMDP mdp_from_json(const std::string& text) {
  njson j;
  try {
    j = njson::parse(text);
  } catch (const njson::parse_error& e) {
    throw ConfigError(std::string("mdp file is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("mdp: expected a JSON object");
  check_keys(j, "mdp", {"n_states", "n_actions", "gamma", "cost", "P"});

  ControlledMDP mdp;
  mdp.n_states = static_cast<int>(int_at(member(j, "mdp", "n_states"), "mdp.n_states"));
  mdp.n_actions = static_cast<int>(int_at(member(j, "mdp", "n_actions"), "mdp.n_actions"));
  if (mdp.n_states < 1) fail("mdp.n_states", "expected a positive integer");
  if (mdp.n_actions < 1) fail("mdp.n_actions", "expected a positive integer");
  mdp.gamma = num_at(member(j, "mdp", "gamma"), "mdp.gamma");

  mdp.cost = mat_at(member(j, "mdp", "cost"), "mdp.cost", /*allow_null=*/true);
  if (mdp.cost.rows() != mdp.n_states || mdp.cost.cols() != mdp.n_actions)
    fail("mdp.cost", "expected an n_states x n_actions matrix");

  const njson& P = member(j, "mdp", "P");
  if (!P.is_array() || static_cast<int>(P.size()) != mdp.n_actions)
    fail("mdp.P", "expected one transition matrix per action");
  mdp.P.resize(mdp.n_actions);
  for (int u = 0; u < mdp.n_actions; ++u) {
    mdp.P[u] = mat_at(P[u], "mdp.P", /*allow_null=*/false);
    if (mdp.P[u].rows() != mdp.n_states || mdp.P[u].cols() != mdp.n_states)
      fail("mdp.P", "expected n_states x n_states matrices");
  }

  // Masked pairs carry a conventional self-loop so every row is stochastic.
  for (int x = 0; x < mdp.n_states; ++x)
    for (int u = 0; u < mdp.n_actions; ++u)
      if (!mdp.admissible(x, u)) {
        mdp.P[u].row(x).setZero();
        mdp.P[u](x, x) = 1.0;
      }

  const auto issues = validate(mdp);
  if (!issues.empty()) fail("mdp", issues.front());
  return mdp;
}

std::string mdp_to_json(const ControlledMDP& mdp) {
  njson j;
  j["n_states"] = mdp.n_states;
  j["n_actions"] = mdp.n_actions;
  j["gamma"] = mdp.gamma;
  j["cost"] = mat_json(mdp.cost, /*inf_as_null=*/true);
  njson P = njson::array();
  for (const auto& Pu : mdp.P) P.push_back(mat_json(Pu));
  j["P"] = P;
  return j.dump(2) + "\n";
}

// --- run artifacts --------------------------------------------------------

std::string run_record_to_json(const RunRecord& rec) {
  njson j;
  j["seed"] = rec.seed;
  j["n_steps"] = rec.n_steps;
  j["estimator"] = njson{{"kind", estimator_kind_name(rec.config.kind)},
                         {"td", td_name(rec.config.td)},
                         {"delta", rec.config.delta},
                         {"safeguard", rec.config.safeguard},
                         {"safeguard_radius", rec.config.safeguard_radius}};
  njson s;
  s["g"] = rec.schedule.g;
  s["rho"] = rec.schedule.rho;
  if (rec.schedule.has_beta) {
    s["g_beta"] = rec.schedule.g_beta;
    s["rho_beta"] = rec.schedule.rho_beta;
  }
  j["schedule"] = s;

  njson snaps = njson::array();
  for (std::size_t k = 0; k < rec.snap_n.size(); ++k) {
    njson one;
    one["n"] = rec.snap_n[k];
    one["bellman_max"] = rec.snap_bellman_max[k];
    one["span_err"] = rec.snap_span_err[k];
    one["theta"] = vec_json(rec.snap_theta[k]);
    one["pr"] = vec_json(rec.snap_pr[k]);
    if (!rec.snap_cond.empty()) one["cond"] = rec.snap_cond[k];
    snaps.push_back(one);
  }
  j["snapshots"] = snaps;

  j["theta_final"] = vec_json(rec.theta_final);
  j["theta_pr"] = vec_json(rec.theta_pr);
  j["final_bellman_max"] = rec.final_bellman_max;
  j["final_span_err"] = rec.final_span_err;
  j["action_head"] = rec.action_head;
  j["safeguard_hits"] = rec.safeguard_hits;
  j["singular_events"] = rec.singular_events;
  j["aborted"] = rec.aborted;
  j["events"] = rec.events;
  return j.dump(2) + "\n";
}

std::string ensemble_csv(const std::vector<RunRecord>& runs) {
  std::ostringstream os;
  os << "seed,n,bellman_max,span_err,theta_norm,pr_norm\n";
  for (const RunRecord& r : runs)
    for (std::size_t k = 0; k < r.snap_n.size(); ++k)
      os << r.seed << ',' << r.snap_n[k] << ',' << fmt17(r.snap_bellman_max[k]) << ','
         << fmt17(r.snap_span_err[k]) << ',' << fmt17(r.snap_theta[k].norm()) << ','
         << fmt17(r.snap_pr[k].norm()) << '\n';
  return os.str();
}

// --- figures --------------------------------------------------------------

std::string svg_histogram(const Histogram& h, const std::string& title) {
  std::ostringstream os;
  os << svg_head(title);
  const int bins = static_cast<int>(h.counts.size());
  if (bins > 0) {
    long cmax = 1;
    for (long c : h.counts) cmax = std::max(cmax, c);
    const Scale sx(h.edges(0), h.edges(bins), kLeft, kW - kRight);
    const Scale sy(0.0, static_cast<double>(cmax), kH - kBottom, kTop);
    for (int i = 0; i < bins; ++i) {
      const double x0 = sx(h.edges(i)), x1 = sx(h.edges(i + 1));
      const double y = sy(static_cast<double>(h.counts[i]));
      os << "<rect x=\"" << x0 << "\" y=\"" << y << "\" width=\"" << std::max(0.5, x1 - x0 - 1.0)
         << "\" height=\"" << (kH - kBottom) - y
         << "\" fill=\"#1f77b4\" stroke=\"none\"/>\n";
    }
    os << svg_label(kLeft, kH - kBottom + 18, short_num(h.edges(0)), "start")
       << svg_label(kW - kRight, kH - kBottom + 18, short_num(h.edges(bins)), "end")
       << svg_label(kLeft - 6, kTop + 6, short_num(static_cast<double>(cmax)), "end")
       << svg_label(kW / 2, kH - kBottom + 34, "value")
       << svg_label(kLeft - 6, kH - kBottom, "0", "end");
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_band(const Band& band, const std::string& title) {
  std::ostringstream os;
  os << svg_head(title);
  const std::size_t m = band.n.size();
  if (m > 0 && band.mean.size() == static_cast<Eigen::Index>(m)) {
    double lo = band.lo.minCoeff(), hi = band.hi.maxCoeff();
    const Scale sx(0.0, static_cast<double>(m - 1 == 0 ? 1 : m - 1), kLeft, kW - kRight);
    const Scale sy(lo, hi, kH - kBottom, kTop);
    os << "<polygon points=\"";
    for (std::size_t k = 0; k < m; ++k)
      os << sx(static_cast<double>(k)) << ',' << sy(band.lo(k)) << ' ';
    for (std::size_t k = m; k-- > 0;)
      os << sx(static_cast<double>(k)) << ',' << sy(band.hi(k)) << ' ';
    os << "\" fill=\"#1f77b4\" fill-opacity=\"0.25\" stroke=\"none\"/>\n";
    os << "<polyline points=\"";
    for (std::size_t k = 0; k < m; ++k)
      os << sx(static_cast<double>(k)) << ',' << sy(band.mean(k)) << ' ';
    os << "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n";
    os << svg_label(kLeft, kH - kBottom + 18, "n=" + std::to_string(band.n.front()), "start")
       << svg_label(kW - kRight, kH - kBottom + 18, "n=" + std::to_string(band.n.back()), "end")
       << svg_label(kLeft - 6, kTop + 6, short_num(hi), "end")
       << svg_label(kLeft - 6, kH - kBottom, short_num(lo), "end");
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_curves(const std::vector<long>& n,
                       const std::vector<std::pair<std::string, Eigen::VectorXd>>& curves,
                       const std::string& title) {
  std::ostringstream os;
  os << svg_head(title);
  const std::size_t m = n.size();
  if (m > 0 && !curves.empty()) {
    // log-log axes; zeros are clamped to the plot floor
    constexpr double kFloor = 1e-16;
    double xlo = kInf, xhi = -kInf, ylo = kInf, yhi = -kInf;
    for (long v : n) {
      const double lx = std::log10(static_cast<double>(std::max(v, 1L)));
      xlo = std::min(xlo, lx);
      xhi = std::max(xhi, lx);
    }
    for (const auto& c : curves)
      for (Eigen::Index k = 0; k < c.second.size(); ++k) {
        const double ly = std::log10(std::max(std::abs(c.second(k)), kFloor));
        ylo = std::min(ylo, ly);
        yhi = std::max(yhi, ly);
      }
    const Scale sx(xlo, xhi, kLeft, kW - kRight);
    const Scale sy(ylo, yhi, kH - kBottom, kTop);
    for (std::size_t ci = 0; ci < curves.size(); ++ci) {
      const auto& [name, vals] = curves[ci];
      const char* color = kPalette[ci % (sizeof(kPalette) / sizeof(kPalette[0]))];
      os << "<polyline points=\"";
      const std::size_t len = std::min<std::size_t>(m, vals.size());
      for (std::size_t k = 0; k < len; ++k)
        os << sx(std::log10(static_cast<double>(std::max(n[k], 1L)))) << ','
           << sy(std::log10(std::max(std::abs(vals(k)), kFloor))) << ' ';
      os << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\"/>\n";
      os << "<text x=\"" << kW - kRight - 8 << "\" y=\"" << kTop + 16 + 15 * ci
         << "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"11\" fill=\"" << color
         << "\">" << name << "</text>\n";
    }
    os << svg_label(kLeft, kH - kBottom + 18, "10^" + short_num(xlo), "start")
       << svg_label(kW - kRight, kH - kBottom + 18, "10^" + short_num(xhi), "end")
       << svg_label(kLeft - 6, kTop + 6, "10^" + short_num(yhi), "end")
       << svg_label(kLeft - 6, kH - kBottom, "10^" + short_num(ylo), "end")
       << svg_label(kW / 2, kH - kBottom + 34, "iterations (log scale)");
  }
  os << "</svg>\n";
  return os.str();
}

// --- files ----------------------------------------------------------------

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  if (!in.good() && !in.eof()) throw std::runtime_error("read failed: " + path);
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << content;
  if (!out.good()) throw std::runtime_error("write failed: " + path);
}

}  // namespace qsa
