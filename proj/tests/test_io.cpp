#include <cstdio>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "qsa/io.hpp"
#include "qsa/mdp.hpp"
#include "qsa/qlearn.hpp"
#include "support.hpp"

using namespace qsa;

namespace {

// parse must reject the text with a message naming the offending field
void expect_config_error(const std::string& json_text, const std::string& needle) {
  try {
    (void)parse_config(json_text);
    FAIL("expected ConfigError for ", json_text);
  } catch (const ConfigError& e) {
    INFO("message: ", e.what());
    CHECK(std::string(e.what()).find(needle) != std::string::npos);
  }
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("qsa_io_test_" + name);
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("emit and parse are inverse on defaults and on a maximal config") {
  const std::string d1 = emit_config(ExperimentConfig{});
  const std::string d2 = emit_config(parse_config(d1));
  CHECK(d1 == d2);

  ExperimentConfig full;
  full.mdp_builtin = "six-state";
  full.gamma = 0.95;
  full.basis_kind = "random";
  full.basis_dim = 7;
  full.policy.kind = PolicyKind::TamedGibbs;
  full.policy.epsilon = 0.25;
  full.policy.kappa0 = 2.5;
  full.policy.nu_exp.resize(3);
  full.policy.nu_exp << 0.2, 0.3, 0.5;
  full.estimator.kind = EstimatorKind::ZapZero;
  full.estimator.td = TdVariant::Relative;
  full.estimator.delta = 0.75;
  full.estimator.M = Eigen::MatrixXd::Identity(2, 2);
  full.estimator.safeguard = true;
  full.estimator.safeguard_radius = 123.5;
  full.schedule = StepSchedule(2.0, 1.0, 1.5, 0.7);
  full.n_steps = 1234;
  full.n_runs = 3;
  full.seed = 42;
  full.out_dir = "results/x";
  full.theta0.resize(2);
  full.theta0 << 0.5, -0.25;

  const std::string f1 = emit_config(full);
  const std::string f2 = emit_config(parse_config(f1));
  CHECK(f1 == f2);

  const ExperimentConfig back = parse_config(f1);
  CHECK(back.policy.kind == PolicyKind::TamedGibbs);
  CHECK(back.estimator.kind == EstimatorKind::ZapZero);
  CHECK(back.estimator.td == TdVariant::Relative);
  CHECK(back.schedule.has_beta);
  CHECK(back.schedule.rho_beta == 0.7);
  CHECK(back.theta0 == full.theta0);
}

TEST_CASE("parse errors name the offending field") {
  expect_config_error("not json", "not valid JSON");
  expect_config_error("[1,2]", "config");
  expect_config_error(R"({"gamma": 2.0})", "gamma");
  expect_config_error(R"({"gamma": "high"})", "gamma");
  expect_config_error(R"({"bogus": 1})", "bogus");
  expect_config_error(R"({"policy": {"kind": "grand"}})", "policy.kind");
  expect_config_error(R"({"policy": {"kind": "gibbs", "kappa0": -1}})", "policy.kappa0");
  expect_config_error(R"({"estimator": {"kind": "newton"}})", "estimator.kind");
  expect_config_error(R"({"estimator": {"td": "sarsa"}})", "estimator.td");
  expect_config_error(R"({"schedule": {"rho": 0.2}})", "schedule");
  expect_config_error(R"({"schedule": {"rho": 0.8, "rho_beta": 0.9}})", "schedule");
  expect_config_error(R"({"basis": {"kind": "fourier"}})", "basis.kind");
  expect_config_error(R"({"steps": 0})", "steps");
  expect_config_error(R"({"runs": -1})", "runs");
  expect_config_error(R"({"mdp": 7})", "mdp");
}

TEST_CASE("doubles and 64-bit seeds survive the round trip bit for bit") {
  ExperimentConfig cfg;
  cfg.gamma = 0.1 + 0.2;  // 0.30000000000000004
  cfg.seed = 9223372036854775813ull;  // above the signed range
  const ExperimentConfig back = parse_config(emit_config(cfg));
  CHECK(back.gamma == cfg.gamma);
  CHECK(back.seed == cfg.seed);
}

TEST_CASE("mdp files round trip, masked pairs as null costs") {
  ControlledMDP mdp = six_state_example(0.8);
  const std::string text = mdp_to_json(mdp);
  const ControlledMDP back = mdp_from_json(text);

  CHECK(back.n_states == mdp.n_states);
  CHECK(back.n_actions == mdp.n_actions);
  CHECK(back.gamma == mdp.gamma);
  for (int x = 0; x < mdp.n_states; ++x)
    for (int u = 0; u < mdp.n_actions; ++u) {
      CHECK(back.admissible(x, u) == mdp.admissible(x, u));
      if (mdp.admissible(x, u)) {
        CHECK(back.cost(x, u) == mdp.cost(x, u));
        CHECK((back.P[u].row(x) - mdp.P[u].row(x)).lpNorm<Eigen::Infinity>() == 0.0);
      }
    }
  CHECK(validate(back).empty());

  // malformed inputs name the problem
  CHECK_THROWS_AS(mdp_from_json("{"), ConfigError);
  CHECK_THROWS_AS(mdp_from_json("[]"), ConfigError);
  nlohmann::json j = nlohmann::json::parse(text);
  j["P"][0][0][0] = 0.9;  // break a row sum
  CHECK_THROWS_AS(mdp_from_json(j.dump()), ConfigError);
  nlohmann::json missing = nlohmann::json::parse(text);
  missing.erase("cost");
  CHECK_THROWS_AS(mdp_from_json(missing.dump()), ConfigError);
}

TEST_CASE("ensemble csv: frozen header and full-precision rows") {
  RunRecord rec;
  rec.seed = 9;
  rec.snap_n = {0, 2};
  rec.snap_bellman_max = {0.5, 0.25};
  rec.snap_span_err = {1.0, 0.125};
  rec.snap_theta = {Eigen::VectorXd::Zero(2), 3.0 * Eigen::Vector2d(0.6, 0.8)};
  rec.snap_pr = {Eigen::VectorXd::Zero(2), Eigen::Vector2d(0.0, 0.0625)};

  const std::string expect =
      "seed,n,bellman_max,span_err,theta_norm,pr_norm\n"
      "9,0,0.5,1,0,0\n"
      "9,2,0.25,0.125,3,0.0625\n";
  CHECK(ensemble_csv({rec}) == expect);

  // a value needing all 17 digits survives
  rec.snap_bellman_max[0] = 0.1 + 0.2;
  const std::string csv = ensemble_csv({rec});
  CHECK(csv.find("0.30000000000000004") != std::string::npos);
}

TEST_CASE("run records serialize to parseable json with conditional fields") {
  const ControlledMDP mdp = six_state_example(0.8);
  LinearQ q0;
  q0.basis = Basis::tabular(mdp);
  q0.theta = Eigen::VectorXd::Zero(q0.basis.dim());

  EstimatorConfig mg;
  mg.kind = EstimatorKind::MatrixGain;
  const RunRecord plain = run_experiment(mdp, PolicySpec::oblivious_uniform(), q0, mg,
                                         StepSchedule(1.0, 0.0), 500, 3);
  const nlohmann::json jp = nlohmann::json::parse(run_record_to_json(plain));
  CHECK(jp.at("seed").get<std::uint64_t>() == 3);
  CHECK(jp.at("n_steps").get<long>() == 500);
  CHECK(jp.at("snapshots").is_array());
  CHECK(!jp.at("snapshots").front().contains("cond"));
  CHECK(jp.at("final_bellman_max").get<double>() == plain.final_bellman_max);
  CHECK(!jp.at("aborted").get<bool>());

  EstimatorConfig zap;
  zap.kind = EstimatorKind::Zap;
  const RunRecord newton = run_experiment(mdp, PolicySpec::oblivious_uniform(), q0, zap,
                                          StepSchedule(1.0, 1.0, 1.0, 0.85), 500, 3);
  const nlohmann::json jz = nlohmann::json::parse(run_record_to_json(newton));
  CHECK(jz.at("snapshots").front().contains("cond"));
}

TEST_CASE("figures are complete svg documents") {
  const Histogram h = histogram({0.1, 0.2, 0.2, 0.9, 1.4}, 3);
  const std::string sh = svg_histogram(h, "final span");
  CHECK(sh.rfind("<svg", 0) == 0);
  CHECK(sh.find("</svg>") != std::string::npos);
  CHECK(sh.find("final span") != std::string::npos);

  EnsembleResult ens;
  ens.snap_n = {1, 10, 100};
  ens.snap_metric.resize(2, 3);
  ens.snap_metric << 1.0, 0.5, 0.25, 1.2, 0.6, 0.2;
  const std::string sb = svg_band(confidence_band(ens), "span decay");
  CHECK(sb.rfind("<svg", 0) == 0);
  CHECK(sb.find("</svg>") != std::string::npos);

  Eigen::VectorXd c1(3), c2(3);
  c1 << 1.0, 0.1, 0.01;
  c2 << 2.0, 0.2, 0.02;
  const std::string sc =
      svg_curves({1, 10, 100}, {{"one", c1}, {"two", c2}}, "error curves");
  CHECK(sc.rfind("<svg", 0) == 0);
  CHECK(sc.find("one") != std::string::npos);
  CHECK(sc.find("two") != std::string::npos);

  // degenerate inputs still produce a document
  const std::string tiny = svg_curves({5}, {{"dot", Eigen::VectorXd::Ones(1)}}, "single point");
  CHECK(tiny.find("</svg>") != std::string::npos);
}

TEST_CASE("file io round trip and missing-file reporting") {
  const std::filesystem::path p = temp_path("roundtrip.txt");
  const std::string content = "line one\nline two\n\tindented\n";
  write_file(p.string(), content);
  CHECK(read_file(p.string()) == content);
  std::filesystem::remove(p);

  try {
    (void)read_file(p.string());
    FAIL("expected read_file to throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(p.filename().string()) != std::string::npos);
  }
}

TEST_CASE("mdp and basis resolution honor the config") {
  ExperimentConfig cfg;
  cfg.gamma = 0.6;
  const ControlledMDP builtin = resolve_mdp(cfg);
  CHECK(builtin.gamma == 0.6);
  CHECK(builtin.n_states == 6);

  cfg.mdp_builtin = "eight-state";
  CHECK_THROWS_AS(resolve_mdp(cfg), ConfigError);

  // file route, with the configured discount overriding the stored one
  ExperimentConfig fcfg;
  const std::filesystem::path p = temp_path("mdp.json");
  write_file(p.string(), mdp_to_json(six_state_example(0.8)));
  fcfg.mdp_file = p.string();
  fcfg.gamma = 0.35;
  const ControlledMDP from_file = resolve_mdp(fcfg);
  CHECK(from_file.gamma == 0.35);
  CHECK(from_file.n_states == 6);
  std::filesystem::remove(p);

  // deterministic random basis per seed
  ExperimentConfig rcfg;
  rcfg.basis_kind = "random";
  rcfg.basis_dim = 4;
  rcfg.seed = 77;
  const ControlledMDP mdp = resolve_mdp(rcfg);
  const Basis b1 = resolve_basis(rcfg, mdp);
  const Basis b2 = resolve_basis(rcfg, mdp);
  CHECK(b1.psi == b2.psi);
  rcfg.seed = 78;
  const Basis b3 = resolve_basis(rcfg, mdp);
  CHECK(b1.psi != b3.psi);

  ExperimentConfig tcfg;
  const Basis tab = resolve_basis(tcfg, mdp);
  CHECK(tab.psi.isIdentity(0.0));
}

}  // TEST_SUITE
