#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "qpo/harness.hpp"

using namespace qpo;
namespace fs = std::filesystem;

namespace {

// Returns 1, 2, 3, ... across all clones (the counter is shared).
class CountingEnv final : public Environment {
 public:
  CountingEnv() : next_(std::make_shared<int>(0)) {}
  std::string name() const override { return "counting"; }
  std::size_t observation_size() const override { return 1; }
  std::size_t action_size() const override { return 1; }
  std::size_t horizon() const override { return 1; }
  double discount() const override { return 1.0; }
  std::vector<double> reset(Rng&) override { return {0.0}; }
  StepResult step(std::span<const double>, Rng&) override { return {{0.0}, static_cast<double>(++*next_), true}; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<CountingEnv>(*this); }

 private:
  std::shared_ptr<int> next_;
};

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("qpo_harness_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

const char* const kSmallConfig = R"(
[run]
episodes = 60
eval_period = 20
eval_rollouts = 10
window = 10
replications = 2
seed = 5
threads = 1

[env]
kind = zero_mean
horizon = 4
h_max = 10

[policy]
hidden = 8, 8

[algo]
name = qpo
alpha = 0.1
batch = 4
density = kde

[gamma]
initial = 0.01
)";

LearningCurve curve_of(std::vector<std::pair<std::size_t, std::pair<double, double>>> pts) {
  LearningCurve c;
  for (const auto& [ep, v] : pts) c.rows.push_back(CurveRow{ep, v.first, v.second, 0, 0, 0, 0});
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(QPO_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST_CASE("true quantile evaluation") {
  const auto policy = PolicyNetwork(MlpSpec{{1, 2, 1}}, GaussianHead{1, 1e-2, 1.0}, 3);
  SUBCASE("order statistic on returns 1..100") {
    CountingEnv env;
    Rng rng(1);
    CHECK(evaluate_true_quantile(policy, env, 100, 0.3, rng) == 30.0);
  }
  SUBCASE("M = 1 gives the single return for any alpha") {
    for (double a : {0.01, 0.5, 0.99}) {
      CountingEnv env;
      Rng rng(1);
      CHECK(evaluate_true_quantile(policy, env, 1, a, rng) == 1.0);
    }
  }
  SUBCASE("matches a sort oracle over the same rollouts") {
    ZeroMeanEnv env(ZeroMeanConfig{5, 0.0, 4.0, 1.0});
    const PolicyNetwork zp(MlpSpec{{2, 4, 2}}, GaussianHead{1, 1e-2, std::nullopt}, 9);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      for (double a : {0.1, 0.3, 0.77}) {
        Rng r1(seed), r2(seed);
        auto e2 = env.clone();
        std::vector<double> u;
        for (int i = 0; i < 37; ++i) u.push_back(rollout(*e2, zp, r2).discounted_return);
        CHECK(evaluate_true_quantile(zp, env, 37, a, r1) == oracle::sorted_quantile(u, a));
      }
    }
  }
  CountingEnv env;
  Rng rng(1);
  CHECK_THROWS(evaluate_true_quantile(policy, env, 0, 0.1, rng));
}

TEST_CASE("aggregation") {
  SUBCASE("a single curve") {
    const auto c = curve_of({{25, {1.5, -2.0}}, {50, {2.5, -1.0}}});
    const auto rows = aggregate({c});
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].episode == 50);
    CHECK(rows[1].running_mean == 2.5);
    CHECK(rows[1].true_mean == -1.0);
    CHECK(rows[1].running_std == 0.0);
    CHECK(rows[1].true_std == 0.0);
  }
  SUBCASE("two constant curves") {
    const double a = 3.0, b = -1.0;
    const auto rows = aggregate({curve_of({{10, {a, a}}, {20, {a, a}}}), curve_of({{10, {b, b}}, {20, {b, b}}})});
    for (const auto& r : rows) {
      CHECK(r.running_mean == 1.0);
      CHECK(r.true_std == doctest::Approx(std::abs(a - b) / std::sqrt(2.0)).epsilon(1e-15));
    }
  }
  SUBCASE("fixture recomputed column by column") {
    const std::vector<std::vector<double>> running{{-3.1, -2.0, -1.2}, {-2.7, -2.5, -0.4}, {-4.0, -1.1, -0.9}};
    const std::vector<std::vector<double>> truth{{-5.0, -4.2, -3.3}, {-4.4, -3.9, -2.0}, {-6.1, -3.0, -2.5}};
    std::vector<LearningCurve> curves(3);
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t i = 0; i < 3; ++i) {
        curves[r].rows.push_back(CurveRow{25 * (i + 1), running[r][i], truth[r][i], 0, 0, 0, 0});
      }
    }
    const auto rows = aggregate(curves);
    for (std::size_t i = 0; i < 3; ++i) {
      // AVERAGE and STDEV.S over the column.
      const std::vector<double> col_r{running[0][i], running[1][i], running[2][i]};
      const std::vector<double> col_t{truth[0][i], truth[1][i], truth[2][i]};
      const auto mr = oracle::mean_se(col_r);
      const auto mt = oracle::mean_se(col_t);
      CHECK(rows[i].running_mean == doctest::Approx(mr.mean).epsilon(1e-14));
      CHECK(rows[i].running_std == doctest::Approx(mr.se * std::sqrt(3.0)).epsilon(1e-12));
      CHECK(rows[i].true_mean == doctest::Approx(mt.mean).epsilon(1e-14));
      CHECK(rows[i].true_std == doctest::Approx(mt.se * std::sqrt(3.0)).epsilon(1e-12));
    }
    CHECK(rows[1].running_mean == doctest::Approx((-2.0 - 2.5 - 1.1) / 3.0));
  }
  SUBCASE("mismatched grids are rejected") {
    CHECK_THROWS(aggregate({curve_of({{10, {0, 0}}}), curve_of({{20, {0, 0}}})}));
    CHECK_THROWS(aggregate({curve_of({{10, {0, 0}}}), curve_of({{10, {0, 0}}, {20, {0, 0}}})}));
    CHECK_THROWS(aggregate({}));
  }
}

TEST_CASE("curve CSV round trip") {
  LearningCurve c;
  c.rows.push_back(CurveRow{25, -1.25, 0.1, 1.0 / 3.0, 1e-300, 5e-4, 0.0});
  c.rows.push_back(CurveRow{50, std::nan(""), -2.0, 7.0, 0.5, 3.5e-4, 12.5});
  std::ostringstream out;
  write_curve_csv(out, c);
  const auto text = out.str();
  CHECK(text.rfind(std::string(kCurveHeader) + "\n", 0) == 0);
  CHECK(text.find("25,-1.25,0.1,") != std::string::npos);
  std::istringstream in(text);
  const auto back = read_curve_csv(in);
  REQUIRE(back.rows.size() == 2);
  CHECK(back.rows[0].q_tracker == 1.0 / 3.0);
  CHECK(back.rows[0].beta_k == 1e-300);
  CHECK(std::isnan(back.rows[1].running_quantile));
  CHECK(back.rows[1].wall_ms == 12.5);
  CHECK(format_double(std::nan("")) == "nan");
  CHECK(format_double(0.1) == "0.1");
}

TEST_CASE("config parsing") {
  const auto c = parse(kSmallConfig);
  CHECK(c.episodes == 60);
  CHECK(c.replications == 2);
  CHECK(c.master_seed == 5);
  CHECK(c.env.kind == EnvSpec::Kind::zero_mean);
  CHECK(c.env.zero_mean.horizon == 4);
  CHECK(c.env.zero_mean.h_max == 10.0);
  CHECK(c.policy.hidden == std::vector<std::size_t>{8, 8});
  CHECK(c.algo.algorithm == Algorithm::qpo);
  CHECK(c.algo.density == DensityMode::kde);
  CHECK(c.algo.gamma.initial == 0.01);
  CHECK(c.algo.gamma.mode == GammaSchedule::Mode::stepwise);
  CHECK(c.beta.lambda == 0.75);

  CHECK_THROWS_AS(parse("[run]\nepisodes = 10\nbogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse("[nonsense]\nx = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse("[run]\nepisodes = ten\n"), ConfigError);
  CHECK_THROWS_AS(parse("[run]\nepisodes = 10\n[algo]\nbatch = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse("[algo]\nname = sarsa\n"), ConfigError);
  CHECK_THROWS_AS(parse("[algo]\ndensity = kde\nbatch = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse("[env]\nkind = csv_stock\n"), ConfigError);
  CHECK_THROWS_AS(parse("[algo]\nalpha = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse("[run]\nreplications = 0\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/qpo.cfg"), ConfigError);

  const auto stock = parse("[env]\nkind = sim_stock\nhorizon = 50\nstocks = 3\n[algo]\nalpha = 0.3\n");
  CHECK(stock.env.trading.horizon == 50);
  CHECK(stock.env.price_model.rows == 51);
  CHECK(std::holds_alternative<SimplexHead>(make_head(stock.env, stock.policy)));
  CHECK(make_mlp(stock.env, stock.policy).input_size() == 5 * 3 + 4);
}

TEST_CASE("curve rows land on the checkpoint grid") {
  auto c = parse(kSmallConfig);
  c.replications = 1;
  c.episodes = 100;
  c.eval_period = 25;
  c.algo.batch = 10;
  c.algo.density = DensityMode::off;
  const auto r = run_replication(c, 0);
  std::vector<std::size_t> eps;
  for (const auto& row : r.curve.rows) eps.push_back(row.episode);
  CHECK(eps == std::vector<std::size_t>{30, 50, 80, 100});
  CHECK_FALSE(r.diverged);
  REQUIRE(r.final_state.has_value());
  CHECK(r.final_state->episodes == 100);
  for (const auto& row : r.curve.rows) CHECK(row.wall_ms == 0.0);
}

TEST_CASE("evaluation does not perturb training") {
  auto c = parse(kSmallConfig);
  c.replications = 1;
  const auto a = run_replication(c, 0);
  c.eval_rollouts = 3;
  const auto b = run_replication(c, 0);
  REQUIRE(a.curve.rows.size() == b.curve.rows.size());
  for (std::size_t i = 0; i < a.curve.rows.size(); ++i) {
    CHECK(a.curve.rows[i].q_tracker == b.curve.rows[i].q_tracker);
    CHECK(a.curve.rows[i].running_quantile == b.curve.rows[i].running_quantile);
  }
  CHECK(std::equal(a.final_state->policy.params().values().begin(), a.final_state->policy.params().values().end(),
                   b.final_state->policy.params().values().begin()));
}

TEST_CASE("the initial policy is kept alongside the final one") {
  auto c = parse(kSmallConfig);
  const auto trained = run_replication(c, 1);
  c.episodes = 0;
  const auto untouched = run_replication(c, 1);
  REQUIRE(trained.initial_policy);
  const auto& init = trained.initial_policy->params().values();
  const auto& zero = untouched.final_state->policy.params().values();
  const auto& fin = trained.final_state->policy.params().values();
  CHECK(std::equal(init.begin(), init.end(), zero.begin(), zero.end()));
  CHECK_FALSE(std::equal(init.begin(), init.end(), fin.begin(), fin.end()));
}

TEST_CASE("runs are byte-identical across repeats and thread counts") {
  const auto c = parse(kSmallConfig);
  const auto d1 = scratch_dir("det1");
  const auto d2 = scratch_dir("det2");
  (void)run(c, d1);
  auto c2 = c;
  c2.threads = 2;
  (void)run(c2, d2);
  for (const char* f : {"rep_0.csv", "rep_1.csv", "aggregate.csv", "rep_0_checkpoint.json", "rep_1_checkpoint.json"}) {
    INFO(f);
    REQUIRE(fs::exists(d1 / f));
    CHECK(slurp(d1 / f) == slurp(d2 / f));
  }
  CHECK(slurp(d1 / "rep_0.csv") != slurp(d1 / "rep_1.csv"));
}

TEST_CASE("zero episodes give a header-only curve and the initial checkpoint") {
  auto c = parse(kSmallConfig);
  c.episodes = 0;
  c.replications = 1;
  const auto dir = scratch_dir("empty");
  const auto res = run(c, dir);
  CHECK(slurp(dir / "rep_0.csv") == std::string(kCurveHeader) + "\n");
  REQUIRE(fs::exists(dir / "rep_0_checkpoint.json"));
  std::ifstream in(dir / "rep_0_checkpoint.json");
  const auto ck = checkpoint_from_json(nlohmann::json::parse(in));
  CHECK(ck.episodes == 0);
  CHECK(ck.iteration == 0);
  CHECK(slurp(dir / "aggregate.csv") == std::string(kAggregateHeader) + "\n");
}

TEST_CASE("checkpoint round trip") {
  auto c = parse(kSmallConfig);
  c.replications = 1;
  c.algo.algorithm = Algorithm::qppo;
  c.algo.baseline = true;
  c.algo.baseline_hidden = {5};
  const auto res = run_replication(c, 0);
  REQUIRE(res.final_state.has_value());
  const auto& st = *res.final_state;
  const auto j = checkpoint_to_json(st, c, res.initial_true_quantile);
  const auto ck = checkpoint_from_json(nlohmann::json::parse(j.dump()));
  CHECK(ck.algorithm == "qppo");
  CHECK(ck.env == "zero_mean");
  CHECK(ck.alpha == 0.1);
  CHECK(ck.q == st.tracker.q());
  CHECK(ck.tracker_k == st.tracker.k());
  CHECK(ck.episodes == 60);
  CHECK(std::equal(ck.policy.params().values().begin(), ck.policy.params().values().end(),
                   st.policy.params().values().begin()));
  REQUIRE(ck.baseline.has_value());
  CHECK(std::equal(ck.baseline->params().values().begin(), ck.baseline->params().values().end(),
                   st.baseline->params().values().begin()));
  CHECK_THROWS(checkpoint_from_json(nlohmann::json{{"format", "other"}}));
}

TEST_CASE("divergence stops one replication with a diagnostic row") {
  auto c = parse(kSmallConfig);
  c.replications = 1;
  c.policy.hidden = {32};
  c.algo.algorithm = Algorithm::reinforce;
  c.algo.optimizer = OptimizerKind::adam;
  c.algo.density = DensityMode::off;
  c.algo.projection.bound = 1e308;
  c.algo.gamma.initial = 1e307;
  const auto r = run_replication(c, 0);
  CHECK(r.diverged);
  CHECK_FALSE(r.diagnostic.empty());
  REQUIRE_FALSE(r.curve.rows.empty());
  CHECK(std::isnan(r.curve.rows.back().true_quantile));
  CHECK_FALSE(r.final_state.has_value());
}

TEST_CASE("command line") {
  const auto dir = scratch_dir("cli");
  write_file(dir / "ok.cfg", kSmallConfig);
  write_file(dir / "bad.cfg", "[run]\nepisodes = 10\nmystery = 1\n");
  write_file(dir / "div.cfg",
             "[run]\nepisodes = 40\neval_period = 10\neval_rollouts = 5\n[env]\nhorizon = 3\n[policy]\nhidden = 32\n"
             "[algo]\nname = reinforce\nbatch = 2\noptimizer = adam\nprojection_bound = 1e308\n"
             "[gamma]\ninitial = 1e307\nfactor = 1\n");
  const std::string d = dir.string();

  CHECK(run_cli("train --config " + d + "/ok.cfg --out " + d + "/run --reps 1") == 0);
  CHECK(fs::exists(dir / "run" / "rep_0.csv"));
  CHECK(run_cli("train --config " + d + "/bad.cfg --out " + d + "/bad") == 1);
  CHECK(run_cli("train --config " + d + "/missing.cfg") == 1);
  CHECK(run_cli("train --config " + d + "/div.cfg --out " + d + "/div") == 2);
  CHECK(run_cli("eval --checkpoint " + d + "/run/rep_0_checkpoint.json --env " + d + "/ok.cfg --rollouts 20") == 0);
  CHECK(run_cli("eval --checkpoint " + d + "/run/rep_0_checkpoint.json --env sim_stock") == 1);
  CHECK(run_cli("prices generate --stocks 3 --rows 30 --seed 4 --out " + d + "/p.csv") == 0);
  CHECK(run_cli("prices validate --in " + d + "/p.csv") == 0);
  CHECK(load_prices_csv(dir / "p.csv").prices.cols() == 3);
  write_file(dir / "gap.csv", "date,ticker,price\n2020-01-01,A,1\n2020-01-01,B,1\n2020-01-02,A,2\n");
  CHECK(run_cli("prices validate --in " + d + "/gap.csv") == 1);
  CHECK(run_cli("plot-data --in " + d + "/run --out " + d + "/long.csv") == 0);
  const auto long_csv = slurp(dir / "long.csv");
  CHECK(long_csv.rfind("replication,episode,metric,value\n", 0) == 0);
  CHECK(long_csv.find("0,20,true_quantile,") != std::string::npos);
  CHECK(run_cli("frobnicate") == 1);
}
