// Command-line front end: train, eval, prices, plot-data.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "qpo/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kDiverged = 2;

std::string iso_date(std::chrono::sys_days day) {
  const std::chrono::year_month_day ymd{day};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

int train(const std::string& config_path, std::optional<std::uint64_t> seed, std::optional<std::size_t> reps,
          std::optional<std::size_t> threads, const std::string& out) {
  auto config = qpo::load_config(config_path);
  if (seed) config.master_seed = *seed;
  if (reps) config.replications = *reps;
  if (threads) config.threads = *threads;
  config.validate();
  if (!qpo::timescales_separated(config.algo.gamma, config.beta, config.algo.batch)) {
    std::cerr << "warning: gamma_k / beta_k is not monotonically vanishing for this schedule\n";
  }
  const auto results = qpo::run(config, std::filesystem::path(out));
  bool diverged = false;
  for (const auto& r : results) {
    std::cout << "rep " << r.replication << " seed " << r.seed;
    if (r.diverged) {
      diverged = true;
      std::cout << " diverged at episode " << (r.curve.rows.empty() ? 0 : r.curve.rows.back().episode) << ": "
                << r.diagnostic << '\n';
      continue;
    }
    std::cout << " initial true quantile " << qpo::format_double(r.initial_true_quantile);
    if (!r.curve.rows.empty()) {
      std::cout << " final true quantile " << qpo::format_double(r.curve.rows.back().true_quantile);
    }
    std::cout << '\n';
  }
  std::cout << "wrote " << out << '\n';
  return diverged ? kDiverged : kOk;
}

int eval(const std::string& checkpoint_path, const std::string& env_arg, std::optional<double> alpha,
         std::size_t rollouts, std::uint64_t seed) {
  std::ifstream in(checkpoint_path);
  if (!in) throw qpo::ConfigError("cannot open checkpoint " + checkpoint_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw qpo::ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
  const auto ck = qpo::checkpoint_from_json(j);

  qpo::EnvSpec spec;
  if (std::filesystem::exists(env_arg)) {
    spec = qpo::load_config(env_arg).env;
  } else {
    spec.kind = qpo::env_kind_from_string(env_arg);
  }
  const auto env = qpo::make_env(spec, seed);
  if (env->observation_size() != ck.policy.state_size()) {
    throw qpo::ConfigError("checkpoint policy expects " + std::to_string(ck.policy.state_size()) +
                           " observations, environment provides " + std::to_string(env->observation_size()));
  }
  const double a = alpha.value_or(ck.alpha);
  qpo::Rng rng(seed);
  const double q = qpo::evaluate_true_quantile(ck.policy, *env, rollouts, a, rng);
  std::cout << qpo::format_double(q) << '\n';
  return kOk;
}

int prices_generate(const std::string& config_path, const std::string& out, std::uint64_t seed,
                    std::optional<std::size_t> stocks, std::optional<std::size_t> rows) {
  qpo::PriceModel model;
  if (!config_path.empty()) model = qpo::load_config(config_path).env.price_model;
  if (stocks) model.stocks = *stocks;
  if (rows) model.rows = *rows;
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw qpo::ConfigError(e.what());
  }
  qpo::Rng rng(seed);
  qpo::PriceTable table;
  table.prices = qpo::generate_prices(model, rng);
  const std::chrono::sys_days start{std::chrono::year{2000} / 1 / 1};
  for (std::size_t t = 0; t < model.rows; ++t) table.dates.push_back(iso_date(start + std::chrono::days{t}));
  for (std::size_t n = 0; n < model.stocks; ++n) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "S%02zu", n);
    table.tickers.emplace_back(buf);
  }
  if (out.empty() || out == "-") {
    qpo::write_prices_csv(std::cout, table);
  } else {
    std::ofstream f(out);
    if (!f) throw qpo::ConfigError("cannot write " + out);
    qpo::write_prices_csv(f, table);
  }
  return kOk;
}

int prices_validate(const std::string& path) {
  try {
    const auto table = qpo::load_prices_csv(path);
    std::cout << path << ": " << table.dates.size() << " dates x " << table.tickers.size() << " tickers, ok\n";
    return kOk;
  } catch (const qpo::PriceDataError& e) {
    std::cerr << path << ": " << e.what() << '\n';
    for (const auto& issue : e.issues()) std::cerr << "  " << issue << '\n';
    return kConfigError;
  }
}

int plot_data(const std::string& dir, const std::string& out) {
  if (out.empty() || out == "-") {
    qpo::write_plot_data(std::cout, dir);
  } else {
    std::ofstream f(out);
    if (!f) throw qpo::ConfigError("cannot write " + out);
    qpo::write_plot_data(f, dir);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantile-criterion policy optimization experiments"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "Train policies from a config file");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> reps;
  std::optional<std::size_t> threads;
  std::string out = "run";
  train_cmd->add_option("--config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", seed, "Master seed (overrides run.seed)");
  train_cmd->add_option("--reps", reps, "Replications (overrides run.replications)");
  train_cmd->add_option("--threads", threads, "Worker threads (0 = all cores)");
  train_cmd->add_option("--out", out, "Output directory");

  auto* eval_cmd = app.add_subcommand("eval", "True quantile of a checkpointed policy");
  std::string checkpoint;
  std::string env_arg;
  std::optional<double> alpha;
  std::size_t rollouts = 50;
  std::uint64_t eval_seed = 0;
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--env", env_arg, "zero_mean | bandit | sim_stock, or a config file")->required();
  eval_cmd->add_option("--alpha", alpha, "Probability level (default: the checkpoint's)");
  eval_cmd->add_option("--rollouts", rollouts, "Fresh rollouts M")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", eval_seed, "Evaluation seed");

  auto* prices_cmd = app.add_subcommand("prices", "Price data utilities");
  prices_cmd->require_subcommand(1);
  auto* gen_cmd = prices_cmd->add_subcommand("generate", "Simulate a price CSV");
  std::string gen_config;
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  std::optional<std::size_t> gen_stocks;
  std::optional<std::size_t> gen_rows;
  gen_cmd->add_option("--config", gen_config, "Take the price model from this config's [env] section");
  gen_cmd->add_option("--out", gen_out, "Output CSV (default stdout)");
  gen_cmd->add_option("--seed", gen_seed, "Seed");
  gen_cmd->add_option("--stocks", gen_stocks, "Number of stocks");
  gen_cmd->add_option("--rows", gen_rows, "Number of dates");
  auto* val_cmd = prices_cmd->add_subcommand("validate", "Check a price CSV");
  std::string val_in;
  val_cmd->add_option("--in,file", val_in, "Price CSV")->required();

  auto* plot_cmd = app.add_subcommand("plot-data", "Re-emit run curves as long-format CSV");
  std::string plot_in;
  std::string plot_out;
  plot_cmd->add_option("--in", plot_in, "Run directory")->required()->check(CLI::ExistingDirectory);
  plot_cmd->add_option("--out", plot_out, "Output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*train_cmd) return train(config_path, seed, reps, threads, out);
    if (*eval_cmd) return eval(checkpoint, env_arg, alpha, rollouts, eval_seed);
    if (*gen_cmd) return prices_generate(gen_config, gen_out, gen_seed, gen_stocks, gen_rows);
    if (*val_cmd) return prices_validate(val_in);
    if (*plot_cmd) return plot_data(plot_in, plot_out);
  } catch (const qpo::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const qpo::PriceDataError& e) {
    std::cerr << "price data error: " << e.what() << '\n';
    for (const auto& issue : e.issues()) std::cerr << "  " << issue << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDiverged;
  }
  return kOk;
}
