#include "qpo/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace qpo {

namespace {

// Stream ids under a replication seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kTrainStream = 2;
constexpr std::uint64_t kEvalStream = 3;
constexpr std::uint64_t kPriceStream = 4;
constexpr std::uint64_t kBaselineStream = 5;

}  // namespace

// ---------------------------------------------------------------------------
// Environment and policy construction.

std::string to_string(EnvSpec::Kind kind) {
  switch (kind) {
    case EnvSpec::Kind::zero_mean: return "zero_mean";
    case EnvSpec::Kind::bandit: return "bandit";
    case EnvSpec::Kind::sim_stock: return "sim_stock";
    case EnvSpec::Kind::csv_stock: return "csv_stock";
  }
  return "?";
}

EnvSpec::Kind env_kind_from_string(const std::string& s) {
  if (s == "zero_mean") return EnvSpec::Kind::zero_mean;
  if (s == "bandit") return EnvSpec::Kind::bandit;
  if (s == "sim_stock") return EnvSpec::Kind::sim_stock;
  if (s == "csv_stock") return EnvSpec::Kind::csv_stock;
  throw ConfigError("unknown environment kind '" + s + "'");
}

void EnvSpec::validate() const {
  switch (kind) {
    case Kind::zero_mean:
      if (zero_mean.horizon < 1) throw ConfigError("zero_mean horizon must be at least 1");
      if (!(zero_mean.h_min >= 0.0 && zero_mean.h_max >= zero_mean.h_min)) {
        throw ConfigError("zero_mean spread needs 0 <= h_min <= h_max");
      }
      if (!(zero_mean.discount > 0.0 && zero_mean.discount <= 1.0)) throw ConfigError("discount must lie in (0, 1]");
      break;
    case Kind::bandit:
      if (!(bandit.noise_scale >= 0.0)) throw ConfigError("bandit noise scale must be non-negative");
      break;
    case Kind::sim_stock:
    case Kind::csv_stock:
      if (trading.horizon < 1 || trading.lookback < 1) throw ConfigError("trading horizon and lookback must be >= 1");
      if (!(trading.discount > 0.0 && trading.discount <= 1.0)) throw ConfigError("discount must lie in (0, 1]");
      if (!(trading.risk_free > -1.0)) throw ConfigError("risk-free rate must exceed -1");
      if (kind == Kind::sim_stock) {
        try {
          price_model.validate();
        } catch (const std::invalid_argument& e) {
          throw ConfigError(e.what());
        }
        if (price_model.rows < trading.horizon + 1) throw ConfigError("price model has fewer rows than horizon + 1");
      } else if (price_file.empty()) {
        throw ConfigError("csv_stock needs env.price_file");
      }
      break;
  }
}

std::unique_ptr<Environment> make_env(const EnvSpec& spec, std::uint64_t seed) {
  spec.validate();
  switch (spec.kind) {
    case EnvSpec::Kind::zero_mean:
      return std::make_unique<ZeroMeanEnv>(spec.zero_mean);
    case EnvSpec::Kind::bandit:
      return std::make_unique<AnalyticBandit>(spec.bandit);
    case EnvSpec::Kind::sim_stock: {
      std::optional<std::uint64_t> frozen;
      if (spec.frozen_prices) frozen = seed;
      auto source = std::make_shared<SimulatedPrices>(spec.price_model, frozen);
      return std::make_unique<TradingEnv>(spec.trading, std::move(source));
    }
    case EnvSpec::Kind::csv_stock: {
      auto table = load_prices_csv(spec.price_file);
      auto source = std::make_shared<HistoricalPrices>(std::move(table.prices));
      return std::make_unique<TradingEnv>(spec.trading, std::move(source));
    }
  }
  throw ConfigError("unsupported environment");
}

PolicyHead make_head(const EnvSpec& env, const PolicySpec& policy) {
  switch (env.kind) {
    case EnvSpec::Kind::zero_mean:
    case EnvSpec::Kind::bandit:
      return GaussianHead{1, policy.min_std, policy.fixed_std};
    case EnvSpec::Kind::sim_stock:
      return SimplexHead{env.price_model.stocks + 1, policy.min_std};
    case EnvSpec::Kind::csv_stock: {
      const auto table = load_prices_csv(env.price_file);
      return SimplexHead{table.prices.cols() + 1, policy.min_std};
    }
  }
  throw ConfigError("unsupported environment");
}

namespace {

MlpSpec mlp_for(const Environment& env, const PolicySpec& policy, const PolicyHead& head) {
  MlpSpec spec;
  spec.widths.push_back(env.observation_size());
  for (auto w : policy.hidden) spec.widths.push_back(w);
  spec.widths.push_back(head_output_width(head));
  return spec;
}

}  // namespace

MlpSpec make_mlp(const EnvSpec& env, const PolicySpec& policy) {
  const auto e = make_env(env, 0);
  return mlp_for(*e, policy, make_head(env, policy));
}

// ---------------------------------------------------------------------------
// Config.

void ExperimentConfig::validate() const {
  env.validate();
  try {
    algo.validate();
    beta.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (policy.hidden.empty()) throw ConfigError("policy needs at least one hidden layer");
  if (std::find(policy.hidden.begin(), policy.hidden.end(), 0u) != policy.hidden.end()) {
    throw ConfigError("hidden widths must be positive");
  }
  if (!(policy.min_std > 0.0)) throw ConfigError("min_std must be positive");
  if (policy.fixed_std && !(*policy.fixed_std > 0.0)) throw ConfigError("fixed_std must be positive");
  if (episodes % algo.batch != 0) throw ConfigError("episodes must be a multiple of the batch size");
  if (eval_period < 1) throw ConfigError("eval_period must be at least 1");
  if (eval_rollouts < 1) throw ConfigError("eval_rollouts must be at least 1");
  if (window < 1) throw ConfigError("window must be at least 1");
  if (replications < 1) throw ConfigError("replications must be at least 1");
}

namespace {

namespace pt = boost::property_tree;

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"run",
       {"episodes", "eval_period", "eval_rollouts", "window", "replications", "seed", "threads",
        "record_wall_time"}},
      {"env",
       {"kind", "horizon", "discount", "h_min", "h_max", "center", "noise_scale", "stocks", "lookback", "risk_free",
        "persistence", "walk_scale", "ar_normal_std", "ar_binomial_scale", "walk_normal_std", "walk_binomial_scale",
        "y0", "x0", "frozen_prices", "price_file"}},
      {"policy", {"hidden", "min_std", "fixed_std"}},
      {"algo",
       {"name", "alpha", "batch", "optimizer", "clip", "epochs", "density", "density_bandwidth", "density_floor",
        "baseline", "baseline_lr", "baseline_hidden", "mean_baseline", "projection", "projection_bound",
        "max_ratio"}},
      {"gamma", {"mode", "initial", "factor", "period", "offset"}},
      {"beta", {"mode", "c0", "c1", "c2", "lambda", "factor", "period"}},
  };
  return keys;
}

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  template <typename T>
  void get(const std::string& section, const std::string& key, T& out) const {
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return;
    const auto value = sec->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
    if (!value) return;
    out = parse<T>(*value, section + "." + key);
  }

  std::vector<std::size_t> widths(const std::string& section, const std::string& key,
                                  std::vector<std::size_t> fallback) const {
    std::string raw;
    get(section, key, raw);
    if (raw.empty()) return fallback;
    std::vector<std::size_t> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse<std::size_t>(item, section + "." + key));
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  }

  template <typename T>
  static T parse(const std::string& raw, const std::string& where) {
    const std::string s = trim(raw);
    if constexpr (std::is_same_v<T, std::string>) {
      return s;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
      if (s == "false" || s == "0" || s == "no" || s == "off") return false;
      throw ConfigError(where + ": expected a boolean, got '" + s + "'");
    } else if constexpr (std::is_integral_v<T>) {
      T v{};
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) {
        throw ConfigError(where + ": expected a non-negative integer, got '" + s + "'");
      }
      return v;
    } else {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != s.size() || !std::isfinite(v)) {
        throw ConfigError(where + ": expected a number, got '" + s + "'");
      }
      return static_cast<T>(v);
    }
  }

  const pt::ptree& tree_;
};

}  // namespace

ExperimentConfig parse_config(std::istream& in, const std::filesystem::path& base_dir) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.message() + " at line " + std::to_string(e.line()));
  }
  const auto& keys = known_keys();
  for (const auto& [section, child] : tree) {
    const auto it = keys.find(section);
    if (it == keys.end()) throw ConfigError("unknown config section [" + section + "]");
    if (child.empty() && !child.data().empty()) throw ConfigError("key '" + section + "' outside a section");
    for (const auto& [key, value] : child) {
      if (!it->second.count(key)) throw ConfigError("unknown config key " + section + "." + key);
    }
  }

  const Reader r(tree);
  ExperimentConfig c;

  r.get("run", "episodes", c.episodes);
  r.get("run", "eval_period", c.eval_period);
  r.get("run", "eval_rollouts", c.eval_rollouts);
  r.get("run", "window", c.window);
  r.get("run", "replications", c.replications);
  r.get("run", "seed", c.master_seed);
  r.get("run", "threads", c.threads);
  r.get("run", "record_wall_time", c.record_wall_time);

  std::string kind = "zero_mean";
  r.get("env", "kind", kind);
  c.env.kind = env_kind_from_string(kind);
  std::size_t horizon = 0;
  r.get("env", "horizon", horizon);
  double discount = 1.0;
  r.get("env", "discount", discount);
  c.env.zero_mean.discount = discount;
  c.env.trading.discount = discount;
  if (horizon > 0) {
    c.env.zero_mean.horizon = horizon;
    c.env.trading.horizon = horizon;
  }
  c.env.price_model.rows = c.env.trading.horizon + 1;
  r.get("env", "h_min", c.env.zero_mean.h_min);
  r.get("env", "h_max", c.env.zero_mean.h_max);
  r.get("env", "center", c.env.bandit.center);
  r.get("env", "noise_scale", c.env.bandit.noise_scale);
  r.get("env", "stocks", c.env.price_model.stocks);
  r.get("env", "lookback", c.env.trading.lookback);
  r.get("env", "risk_free", c.env.trading.risk_free);
  r.get("env", "persistence", c.env.price_model.persistence);
  r.get("env", "walk_scale", c.env.price_model.walk_scale);
  r.get("env", "ar_normal_std", c.env.price_model.ar_noise.normal_std);
  r.get("env", "ar_binomial_scale", c.env.price_model.ar_noise.binomial_scale);
  r.get("env", "walk_normal_std", c.env.price_model.walk_noise.normal_std);
  r.get("env", "walk_binomial_scale", c.env.price_model.walk_noise.binomial_scale);
  r.get("env", "y0", c.env.price_model.y0);
  r.get("env", "x0", c.env.price_model.x0);
  r.get("env", "frozen_prices", c.env.frozen_prices);
  std::string price_file;
  r.get("env", "price_file", price_file);
  if (!price_file.empty()) {
    std::filesystem::path p(price_file);
    c.env.price_file = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  }

  c.policy.hidden = r.widths("policy", "hidden", c.policy.hidden);
  r.get("policy", "min_std", c.policy.min_std);
  double fixed_std = 0.0;
  r.get("policy", "fixed_std", fixed_std);
  if (fixed_std != 0.0) c.policy.fixed_std = fixed_std;

  auto& a = c.algo;
  std::string name = to_string(a.algorithm);
  r.get("algo", "name", name);
  std::string optimizer = to_string(a.optimizer);
  r.get("algo", "optimizer", optimizer);
  std::string density = to_string(a.density);
  r.get("algo", "density", density);
  std::string projection = "box";
  r.get("algo", "projection", projection);
  try {
    a.algorithm = algorithm_from_string(name);
    a.optimizer = optimizer_from_string(optimizer);
    a.density = density_mode_from_string(density);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (projection == "box") {
    a.projection.kind = ProjectionSpec::Kind::box;
  } else if (projection == "l2_ball") {
    a.projection.kind = ProjectionSpec::Kind::l2_ball;
  } else {
    throw ConfigError("unknown projection '" + projection + "'");
  }
  r.get("algo", "projection_bound", a.projection.bound);
  r.get("algo", "alpha", a.alpha);
  r.get("algo", "batch", a.batch);
  r.get("algo", "clip", a.clip);
  r.get("algo", "epochs", a.epochs);
  r.get("algo", "density_bandwidth", a.density_bandwidth);
  r.get("algo", "density_floor", a.density_floor);
  r.get("algo", "baseline", a.baseline);
  r.get("algo", "baseline_lr", a.baseline_lr);
  a.baseline_hidden = r.widths("algo", "baseline_hidden", a.baseline_hidden);
  r.get("algo", "mean_baseline", a.mean_baseline);
  r.get("algo", "max_ratio", a.max_ratio);

  std::string gamma_mode = "stepwise";
  r.get("gamma", "mode", gamma_mode);
  if (gamma_mode == "stepwise") {
    a.gamma.mode = GammaSchedule::Mode::stepwise;
  } else if (gamma_mode == "power") {
    a.gamma.mode = GammaSchedule::Mode::power;
  } else {
    throw ConfigError("unknown gamma mode '" + gamma_mode + "'");
  }
  r.get("gamma", "initial", a.gamma.initial);
  r.get("gamma", "factor", a.gamma.factor);
  r.get("gamma", "period", a.gamma.period_episodes);
  r.get("gamma", "offset", a.gamma.offset);

  std::string beta_mode = "power";
  r.get("beta", "mode", beta_mode);
  if (beta_mode == "power") {
    c.beta.mode = BetaSchedule::Mode::power;
  } else if (beta_mode == "stepwise") {
    c.beta.mode = BetaSchedule::Mode::stepwise;
  } else {
    throw ConfigError("unknown beta mode '" + beta_mode + "'");
  }
  r.get("beta", "c0", c.beta.c0);
  r.get("beta", "c1", c.beta.c1);
  r.get("beta", "c2", c.beta.c2);
  r.get("beta", "lambda", c.beta.lambda);
  r.get("beta", "factor", c.beta.factor);
  r.get("beta", "period", c.beta.period);

  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, path.parent_path());
}

// ---------------------------------------------------------------------------
// Training.

double evaluate_true_quantile(const PolicyNetwork& policy, const Environment& env, std::size_t rollouts,
                              double alpha, Rng& rng) {
  if (rollouts < 1) throw std::invalid_argument("evaluation needs at least one rollout");
  auto e = env.clone();
  std::vector<double> returns;
  returns.reserve(rollouts);
  for (std::size_t i = 0; i < rollouts; ++i) returns.push_back(rollout(*e, policy, rng).discounted_return);
  return empirical_quantile(returns, alpha);
}

std::uint64_t replication_seed(std::uint64_t master, std::size_t r) { return master ^ static_cast<std::uint64_t>(r); }

ReplicationResult run_replication(const ExperimentConfig& config, std::size_t r, const RowSink& sink) {
  config.validate();
  ReplicationResult result;
  result.replication = r;
  result.seed = replication_seed(config.master_seed, r);
  const auto seed = result.seed;
  const auto start = std::chrono::steady_clock::now();

  auto env = make_env(config.env, derive_seed(seed, kPriceStream));
  const auto head = make_head(config.env, config.policy);
  PolicyNetwork policy(mlp_for(*env, config.policy, head), head, derive_seed(seed, kInitStream));
  AlgoConfig algo = config.algo;
  algo.discount = env->discount();
  result.initial_policy = policy;
  AlgoState state = make_state(algo, std::move(policy), config.beta, derive_seed(seed, kBaselineStream));

  const std::uint64_t eval_seed = derive_seed(seed, kEvalStream);
  std::uint64_t eval_count = 0;
  auto true_quantile = [&] {
    Rng rng = make_rng(eval_seed, eval_count++);
    return evaluate_true_quantile(state.policy, *env, config.eval_rollouts, algo.alpha, rng);
  };
  result.initial_true_quantile = true_quantile();

  auto emit = [&](const CurveRow& row) {
    result.curve.rows.push_back(row);
    if (sink) sink(row);
  };

  const std::uint64_t train_seed = derive_seed(seed, kTrainStream);
  std::deque<double> recent;
  std::vector<Trajectory> batch;
  std::size_t next_checkpoint = config.eval_period;
  std::uint64_t episode_index = 0;
  try {
    while (state.episodes < config.episodes) {
      batch.clear();
      for (std::size_t n = 0; n < algo.batch; ++n) {
        Rng rng = make_rng(train_seed, episode_index++);
        batch.push_back(rollout(*env, state.policy, rng));
        recent.push_back(batch.back().discounted_return);
        if (recent.size() > config.window) recent.pop_front();
      }
      update(state, batch, algo);
      if (!state.policy.params().all_finite()) throw std::runtime_error("policy parameters became non-finite");
      if (!std::isfinite(state.tracker.q())) throw std::runtime_error("quantile estimate became non-finite");

      if (state.episodes >= next_checkpoint) {
        CurveRow row;
        row.episode = state.episodes;
        const std::vector<double> window(recent.begin(), recent.end());
        row.running_quantile = empirical_quantile(window, algo.alpha);
        row.true_quantile = true_quantile();
        row.q_tracker = state.tracker.q();
        row.beta_k = state.tracker.last_beta();
        row.gamma_k = state.last_gamma;
        if (config.record_wall_time) {
          row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        }
        emit(row);
        next_checkpoint = (state.episodes / config.eval_period + 1) * config.eval_period;
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    result.diverged = true;
    result.diagnostic = e.what();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    emit(CurveRow{state.episodes, nan, nan, nan, nan, nan, 0.0});
    return result;
  }
  result.final_state.emplace(std::move(state));
  return result;
}

std::vector<ReplicationResult> run(const ExperimentConfig& config, const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  if (out_dir) std::filesystem::create_directories(*out_dir);

  std::vector<ReplicationResult> results(config.replications);
  std::size_t workers = config.threads ? config.threads : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, config.replications);

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto work = [&] {
    for (std::size_t r = next++; r < config.replications; r = next++) {
      try {
        if (!out_dir) {
          results[r] = run_replication(config, r);
          continue;
        }
        const auto csv_path = *out_dir / ("rep_" + std::to_string(r) + ".csv");
        std::ofstream csv(csv_path);
        if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
        csv << kCurveHeader << '\n' << std::flush;
        results[r] = run_replication(config, r, [&](const CurveRow& row) { csv << curve_row_csv(row) << std::flush; });
        if (results[r].final_state) {
          const auto ck_path = *out_dir / ("rep_" + std::to_string(r) + "_checkpoint.json");
          std::ofstream ck(ck_path);
          ck << checkpoint_to_json(*results[r].final_state, config, results[r].initial_true_quantile).dump(2) << '\n';
        }
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(work);
  }
  if (error) std::rethrow_exception(error);

  if (out_dir) {
    std::vector<LearningCurve> finished;
    for (const auto& res : results) {
      if (!res.diverged) finished.push_back(res.curve);
    }
    std::ofstream agg(*out_dir / "aggregate.csv");
    write_aggregate_csv(agg, finished.empty() ? std::vector<AggregateRow>{} : aggregate(finished));
  }
  return results;
}

// ---------------------------------------------------------------------------
// Aggregation and files.

std::vector<AggregateRow> aggregate(const std::vector<LearningCurve>& curves) {
  if (curves.empty()) throw std::invalid_argument("aggregate needs at least one curve");
  const auto& grid = curves.front().rows;
  for (const auto& c : curves) {
    if (c.rows.size() != grid.size()) throw std::invalid_argument("curves have different checkpoint grids");
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (c.rows[i].episode != grid[i].episode) throw std::invalid_argument("curves have different checkpoint grids");
    }
  }
  auto mean_std = [&](std::size_t i, double CurveRow::*field) {
    const double n = static_cast<double>(curves.size());
    double mean = 0.0;
    for (const auto& c : curves) mean += c.rows[i].*field;
    mean /= n;
    if (curves.size() < 2) return std::pair{mean, 0.0};
    double ss = 0.0;
    for (const auto& c : curves) ss += (c.rows[i].*field - mean) * (c.rows[i].*field - mean);
    return std::pair{mean, std::sqrt(ss / (n - 1.0))};
  };
  std::vector<AggregateRow> out;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    AggregateRow row;
    row.episode = grid[i].episode;
    std::tie(row.running_mean, row.running_std) = mean_std(i, &CurveRow::running_quantile);
    std::tie(row.true_mean, row.true_std) = mean_std(i, &CurveRow::true_quantile);
    out.push_back(row);
  }
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

const char* const kCurveHeader = "episode,running_quantile,true_quantile,q_tracker,beta_k,gamma_k,wall_ms";
const char* const kAggregateHeader = "episode,running_mean,running_std,true_mean,true_std";

std::string curve_row_csv(const CurveRow& row) {
  std::string s = std::to_string(row.episode);
  for (double v : {row.running_quantile, row.true_quantile, row.q_tracker, row.beta_k, row.gamma_k, row.wall_ms}) {
    s += ',';
    s += format_double(v);
  }
  s += '\n';
  return s;
}

void write_curve_csv(std::ostream& out, const LearningCurve& curve) {
  out << kCurveHeader << '\n';
  for (const auto& row : curve.rows) out << curve_row_csv(row);
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_field(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw std::runtime_error("curve line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace

LearningCurve read_curve_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCurveHeader) throw std::runtime_error("curve file has an unexpected header");
  LearningCurve curve;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 7) throw std::runtime_error("curve line " + std::to_string(n) + ": expected 7 fields");
    CurveRow row;
    row.episode = static_cast<std::size_t>(parse_field(f[0], n));
    row.running_quantile = parse_field(f[1], n);
    row.true_quantile = parse_field(f[2], n);
    row.q_tracker = parse_field(f[3], n);
    row.beta_k = parse_field(f[4], n);
    row.gamma_k = parse_field(f[5], n);
    row.wall_ms = parse_field(f[6], n);
    curve.rows.push_back(row);
  }
  return curve;
}

void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows) {
  out << kAggregateHeader << '\n';
  for (const auto& r : rows) {
    out << r.episode << ',' << format_double(r.running_mean) << ',' << format_double(r.running_std) << ','
        << format_double(r.true_mean) << ',' << format_double(r.true_std) << '\n';
  }
}

void write_plot_data(std::ostream& out, const std::filesystem::path& run_dir) {
  std::vector<std::pair<std::size_t, std::filesystem::path>> files;
  for (const auto& entry : std::filesystem::directory_iterator(run_dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("rep_", 0) != 0 || entry.path().extension() != ".csv") continue;
    const auto stem = entry.path().stem().string().substr(4);
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](char c) { return c >= '0' && c <= '9'; })) continue;
    files.emplace_back(std::stoul(stem), entry.path());
  }
  if (files.empty()) throw std::runtime_error("no rep_*.csv files in " + run_dir.string());
  std::sort(files.begin(), files.end());
  out << "replication,episode,metric,value\n";
  for (const auto& [rep, path] : files) {
    std::ifstream in(path);
    const auto curve = read_curve_csv(in);
    for (const auto& row : curve.rows) {
      const std::pair<const char*, double> metrics[] = {{"running_quantile", row.running_quantile},
                                                        {"true_quantile", row.true_quantile},
                                                        {"q_tracker", row.q_tracker}};
      for (const auto& [name, value] : metrics) {
        out << rep << ',' << row.episode << ',' << name << ',' << format_double(value) << '\n';
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints.

nlohmann::json checkpoint_to_json(const AlgoState& state, const ExperimentConfig& config,
                                  double initial_true_quantile) {
  nlohmann::json baseline = nullptr;
  if (state.baseline) {
    const auto v = state.baseline->params().values();
    baseline = {{"mlp", state.baseline->spec().widths}, {"params", std::vector<double>(v.begin(), v.end())}};
  }
  return {{"format", "qpo-checkpoint"},
          {"version", 1},
          {"algorithm", to_string(config.algo.algorithm)},
          {"env", to_string(config.env.kind)},
          {"alpha", state.tracker.alpha()},
          {"policy", policy_to_json(state.policy)},
          {"baseline", baseline},
          {"tracker",
           {{"q", state.tracker.q()},
            {"k", state.tracker.k()},
            {"clipped_ratios", state.tracker.clipped_ratios()},
            {"last_beta", state.tracker.last_beta()}}},
          {"counters",
           {{"iteration", state.iteration}, {"episodes", state.episodes}, {"last_gamma", state.last_gamma}}},
          {"initial_true_quantile", initial_true_quantile}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "qpo-checkpoint") throw std::runtime_error("not a checkpoint file");
  if (j.value("version", 0) != 1) throw std::runtime_error("unsupported checkpoint version");
  Checkpoint c(policy_from_json(j.at("policy")));
  const auto& b = j.at("baseline");
  if (!b.is_null()) {
    MlpSpec spec{b.at("mlp").get<std::vector<std::size_t>>()};
    spec.validate();
    ParamVector params(spec.make_layout(), b.at("params").get<std::vector<double>>());
    c.baseline.emplace(spec, std::move(params));
  }
  c.alpha = j.at("alpha").get<double>();
  const auto& t = j.at("tracker");
  c.q = t.at("q").get<double>();
  c.tracker_k = t.at("k").get<std::size_t>();
  c.clipped_ratios = t.at("clipped_ratios").get<std::size_t>();
  const auto& k = j.at("counters");
  c.iteration = k.at("iteration").get<std::size_t>();
  c.episodes = k.at("episodes").get<std::size_t>();
  c.algorithm = j.at("algorithm").get<std::string>();
  c.env = j.at("env").get<std::string>();
  return c;
}

}  // namespace qpo
