#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qpo/policy.hpp"
#include "qpo/rng.hpp"

namespace qpo {

struct StepResult {
  std::vector<double> state;
  double reward = 0.0;
  bool done = false;
};

/// Episodic environment. Actions arrive in environment space, i.e. after
/// PolicyNetwork::env_action.
class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string name() const = 0;
  virtual std::size_t observation_size() const = 0;
  virtual std::size_t action_size() const = 0;
  virtual std::size_t horizon() const = 0;
  virtual double discount() const = 0;

  virtual std::vector<double> reset(Rng& rng) = 0;
  virtual StepResult step(std::span<const double> action, Rng& rng) = 0;

  virtual std::unique_ptr<Environment> clone() const = 0;
};

struct TrajectoryStep {
  std::vector<double> state;
  Action action;
  double log_prob = 0.0;
  double reward = 0.0;
};

/// One episode tau; discounted_return is U(tau) = sum_t discount^t * reward_t.
struct Trajectory {
  std::vector<TrajectoryStep> steps;
  double discounted_return = 0.0;

  std::size_t horizon() const { return steps.size(); }
};

double discounted_sum(std::span<const double> rewards, double discount);

class RolloutError : public std::runtime_error {
 public:
  RolloutError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// reset() then step until done (or horizon), sampling actions from `policy`.
Trajectory rollout(Environment& env, const PolicyNetwork& policy, Rng& rng);

// ---------------------------------------------------------------------------
// Zero Mean toy environment.
//
// Per-step reward X_t + h(delta_t) * (Y_t - 1/2), X ~ N(0,1), Y ~ Bernoulli(1/2).
// The action a in R sets delta_{t+1} = sigmoid(a); h is linear from h_min to
// h_max. Observation is (h(delta_t), t/T). delta_0 ~ U[0,1].

struct ZeroMeanConfig {
  std::size_t horizon = 10;
  double h_min = 0.0;
  double h_max = 4.0;
  double discount = 1.0;
};

class ZeroMeanEnv final : public Environment {
 public:
  explicit ZeroMeanEnv(ZeroMeanConfig config);

  std::string name() const override { return "zeromean"; }
  std::size_t observation_size() const override { return 2; }
  std::size_t action_size() const override { return 1; }
  std::size_t horizon() const override { return config_.horizon; }
  double discount() const override { return config_.discount; }

  std::vector<double> reset(Rng& rng) override;
  StepResult step(std::span<const double> action, Rng& rng) override;
  std::unique_ptr<Environment> clone() const override { return std::make_unique<ZeroMeanEnv>(*this); }

  double spread(double delta) const { return config_.h_min + (config_.h_max - config_.h_min) * delta; }
  double delta() const { return delta_; }
  /// Pins delta for the next step; used to probe the reward law at fixed delta.
  void set_delta(double delta);
  const ZeroMeanConfig& config() const { return config_; }

 private:
  std::vector<double> observe() const;

  ZeroMeanConfig config_;
  double delta_ = 0.0;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// One-step analytic bandit: reward = -(a - center)^2 + noise_scale * N(0,1).
// With a Gaussian policy of mean theta and small fixed std, the reward
// quantiles are maximized at theta = center.

struct BanditConfig {
  double center = 0.0;
  double noise_scale = 1.0;
};

class AnalyticBandit final : public Environment {
 public:
  explicit AnalyticBandit(BanditConfig config) : config_(config) {}

  std::string name() const override { return "bandit"; }
  std::size_t observation_size() const override { return 0; }
  std::size_t action_size() const override { return 1; }
  std::size_t horizon() const override { return 1; }
  double discount() const override { return 1.0; }

  std::vector<double> reset(Rng&) override { return {}; }
  StepResult step(std::span<const double> action, Rng& rng) override;
  std::unique_ptr<Environment> clone() const override { return std::make_unique<AnalyticBandit>(*this); }

 private:
  BanditConfig config_;
};

// ---------------------------------------------------------------------------
// Prices.

/// Rows are time, columns are stocks. All entries strictly positive.
class PriceMatrix {
 public:
  PriceMatrix() = default;
  PriceMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double operator()(std::size_t t, std::size_t n) const { return values_[t * cols_ + n]; }
  std::span<const double> row(std::size_t t) const { return {values_.data() + t * cols_, cols_}; }
  std::span<const double> values() const { return values_; }

  bool operator==(const PriceMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

/// Zero-mean bimodal noise: normal_std * N(0,1) + binomial_scale * (B - 1/2), B ~ Bernoulli(1/2).
struct BimodalNoise {
  double normal_std = 0.1;
  double binomial_scale = 0.2;

  double draw(Rng& rng) const;
};

/// Log-price model per stock:
///   y_{t+1} = persistence * y_t + eps_t
///   x_{t+1} = x_t + y_t + walk_scale * v_t
///   p_t     = exp(x_t / (max_t x - min_t x))
struct PriceModel {
  double persistence = 0.9;  // eta_1
  double walk_scale = 0.3;   // eta_2
  BimodalNoise ar_noise{0.1, 0.2};
  BimodalNoise walk_noise{0.1, 0.2};
  double y0 = 0.0;
  double x0 = 0.0;
  std::size_t rows = 201;  // number of price rows (episode steps + 1)
  std::size_t stocks = 8;

  void validate() const;
};

/// Stocks are simulated one after another from `rng`. A stock whose log-price
/// path is constant has zero range and gets p == 1.
PriceMatrix generate_prices(const PriceModel& model, Rng& rng);

struct PriceTable {
  PriceMatrix prices;
  std::vector<std::string> dates;
  std::vector<std::string> tickers;
};

class PriceDataError : public std::runtime_error {
 public:
  PriceDataError(const std::string& what, std::vector<std::string> issues);
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  std::vector<std::string> issues_;
};

/// CSV with header `date,ticker,price`, ISO-8601 dates. Rows may come in any
/// order; output rows are sorted by date and columns by ticker. Gaps are
/// reported, never filled.
PriceTable load_prices_csv(const std::filesystem::path& path);
PriceTable parse_prices_csv(std::istream& in);
void write_prices_csv(std::ostream& out, const PriceTable& table);

// ---------------------------------------------------------------------------
// Portfolio trading over N stocks plus cash.
//
// Weights index 0 is cash, 1..N the stocks. Each step the agent reallocates
// the current value to the action weights at p_t, prices move to p_{t+1},
// cash earns risk_free, and the reward is the change in total value.
// Observation: the last `lookback` prices of every stock divided by the
// current price (padded with p_0 before the start), then the N+1 weights.

struct TradingConfig {
  std::size_t horizon = 200;
  std::size_t lookback = 5;
  double risk_free = 0.002;
  double discount = 1.0;
  double simplex_tolerance = 1e-9;
};

/// Where episode price paths come from.
class PriceSource {
 public:
  virtual ~PriceSource() = default;
  virtual std::size_t stocks() const = 0;
  /// A rows x stocks window for one episode.
  virtual PriceMatrix episode_prices(std::size_t rows, Rng& rng) const = 0;
  virtual std::unique_ptr<PriceSource> clone() const = 0;
};

/// Fresh simulated paths per episode, or one fixed path when frozen.
class SimulatedPrices final : public PriceSource {
 public:
  explicit SimulatedPrices(PriceModel model, std::optional<std::uint64_t> frozen_seed = std::nullopt);
  std::size_t stocks() const override { return model_.stocks; }
  PriceMatrix episode_prices(std::size_t rows, Rng& rng) const override;
  std::unique_ptr<PriceSource> clone() const override { return std::make_unique<SimulatedPrices>(*this); }
  const PriceModel& model() const { return model_; }

 private:
  PriceModel model_;
  std::optional<PriceMatrix> frozen_;
};

/// Random contiguous windows from a historical price matrix.
class HistoricalPrices final : public PriceSource {
 public:
  explicit HistoricalPrices(PriceMatrix prices);
  std::size_t stocks() const override { return prices_.cols(); }
  PriceMatrix episode_prices(std::size_t rows, Rng& rng) const override;
  std::unique_ptr<PriceSource> clone() const override { return std::make_unique<HistoricalPrices>(*this); }

 private:
  PriceMatrix prices_;
};

class TradingEnv final : public Environment {
 public:
  TradingEnv(TradingConfig config, std::shared_ptr<const PriceSource> source);
  TradingEnv(const TradingEnv& other) = default;

  std::string name() const override { return "trading"; }
  std::size_t observation_size() const override { return config_.lookback * stocks_ + stocks_ + 1; }
  std::size_t action_size() const override { return stocks_ + 1; }
  std::size_t horizon() const override { return config_.horizon; }
  double discount() const override { return config_.discount; }

  std::vector<double> reset(Rng& rng) override;
  StepResult step(std::span<const double> weights, Rng& rng) override;
  std::unique_ptr<Environment> clone() const override { return std::make_unique<TradingEnv>(*this); }

  /// Reset onto a given price path and starting weights (value 1).
  std::vector<double> reset_with(PriceMatrix prices, std::vector<double> weights);

  double value() const { return value_; }
  std::span<const double> weights() const { return weights_; }
  /// Cash amount and per-stock share counts currently held.
  double cash() const { return value_ * weights_[0]; }
  std::vector<double> shares() const;
  std::size_t time() const { return t_; }
  const PriceMatrix& prices() const { return prices_; }
  const TradingConfig& config() const { return config_; }

 private:
  std::vector<double> observe() const;

  TradingConfig config_;
  std::shared_ptr<const PriceSource> source_;
  std::size_t stocks_ = 0;
  PriceMatrix prices_;
  std::vector<double> weights_;
  double value_ = 1.0;
  std::size_t t_ = 0;
};

/// Dirichlet(1, ..., 1) draw of the given dimension.
std::vector<double> random_simplex(std::size_t dim, Rng& rng);

}  // namespace qpo
