#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qpo/algos.hpp"
#include "qpo/env.hpp"
#include "qpo/policy.hpp"
#include "qpo/quantile.hpp"

namespace qpo {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EnvSpec {
  enum class Kind { zero_mean, bandit, sim_stock, csv_stock };
  Kind kind = Kind::zero_mean;
  ZeroMeanConfig zero_mean;
  BanditConfig bandit;
  TradingConfig trading;
  PriceModel price_model;
  /// sim_stock: one price path per replication instead of a fresh path per episode.
  bool frozen_prices = false;
  /// csv_stock: price file; relative paths resolve against the config file.
  std::filesystem::path price_file;

  void validate() const;
};

std::string to_string(EnvSpec::Kind kind);
EnvSpec::Kind env_kind_from_string(const std::string& s);

/// `seed` only matters for frozen simulated prices.
std::unique_ptr<Environment> make_env(const EnvSpec& spec, std::uint64_t seed);

struct PolicySpec {
  std::vector<std::size_t> hidden{32, 32};
  double min_std = 1e-2;
  /// Gaussian heads only: a constant std instead of a learned one.
  std::optional<double> fixed_std;
};

/// Head matching the environment's action space: Gaussian for scalar actions,
/// simplex for portfolio weights.
PolicyHead make_head(const EnvSpec& env, const PolicySpec& policy);
MlpSpec make_mlp(const EnvSpec& env, const PolicySpec& policy);

struct ExperimentConfig {
  EnvSpec env;
  PolicySpec policy;
  AlgoConfig algo;
  BetaSchedule beta;
  std::size_t episodes = 4000;  // K * N
  std::size_t eval_period = 25;
  std::size_t eval_rollouts = 50;
  std::size_t window = 20;
  std::size_t replications = 1;
  std::uint64_t master_seed = 0;
  /// 0 = hardware concurrency.
  std::size_t threads = 0;
  /// Off by default so that repeated runs give byte-identical files.
  bool record_wall_time = false;

  void validate() const;
};

/// INI-style text: sections [run] [env] [policy] [algo] [gamma] [beta].
/// Unknown sections or keys are errors.
ExperimentConfig parse_config(std::istream& in, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

struct CurveRow {
  std::size_t episode = 0;
  double running_quantile = 0.0;
  double true_quantile = 0.0;
  double q_tracker = 0.0;
  double beta_k = 0.0;
  double gamma_k = 0.0;
  double wall_ms = 0.0;
};

struct LearningCurve {
  std::vector<CurveRow> rows;
};

/// Empirical alpha-quantile of M fresh rollout returns. Uses only `rng`.
double evaluate_true_quantile(const PolicyNetwork& policy, const Environment& env, std::size_t rollouts,
                              double alpha, Rng& rng);

/// Replication seed: master ^ r.
std::uint64_t replication_seed(std::uint64_t master, std::size_t r);

struct ReplicationResult {
  std::size_t replication = 0;
  std::uint64_t seed = 0;
  LearningCurve curve;
  double initial_true_quantile = 0.0;
  std::optional<PolicyNetwork> initial_policy;
  std::optional<AlgoState> final_state;
  bool diverged = false;
  std::string diagnostic;
};

/// Called after each curve row; lets callers stream rows to disk.
using RowSink = std::function<void(const CurveRow&)>;

ReplicationResult run_replication(const ExperimentConfig& config, std::size_t r, const RowSink& sink = {});

/// All replications, concurrently when config.threads allows. Results are in
/// replication order. With out_dir set, writes rep_{r}.csv,
/// rep_{r}_checkpoint.json and aggregate.csv.
std::vector<ReplicationResult> run(const ExperimentConfig& config,
                                   const std::optional<std::filesystem::path>& out_dir = std::nullopt);

struct AggregateRow {
  std::size_t episode = 0;
  double running_mean = 0.0;
  double running_std = 0.0;
  double true_mean = 0.0;
  double true_std = 0.0;
};

/// Per-checkpoint mean and sample standard deviation across curves.
/// Curves must share the same episode grid.
std::vector<AggregateRow> aggregate(const std::vector<LearningCurve>& curves);

std::string format_double(double v);

extern const char* const kCurveHeader;
extern const char* const kAggregateHeader;

std::string curve_row_csv(const CurveRow& row);
void write_curve_csv(std::ostream& out, const LearningCurve& curve);
LearningCurve read_curve_csv(std::istream& in);
void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows);

/// Long-format rows: replication,episode,metric,value.
void write_plot_data(std::ostream& out, const std::filesystem::path& run_dir);

nlohmann::json checkpoint_to_json(const AlgoState& state, const ExperimentConfig& config,
                                  double initial_true_quantile);

struct Checkpoint {
  explicit Checkpoint(PolicyNetwork p) : policy(std::move(p)) {}

  PolicyNetwork policy;
  std::optional<ValueNetwork> baseline;
  double alpha = 0.1;
  double q = 0.0;
  std::size_t tracker_k = 0;
  std::size_t clipped_ratios = 0;
  std::size_t iteration = 0;
  std::size_t episodes = 0;
  std::string algorithm;
  std::string env;
};

Checkpoint checkpoint_from_json(const nlohmann::json& j);

}  // namespace qpo
