#include "qpo/env.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace qpo {

double discounted_sum(std::span<const double> rewards, double discount) {
  double total = 0.0;
  double w = 1.0;
  for (double r : rewards) {
    total += w * r;
    w *= discount;
  }
  return total;
}

Trajectory rollout(Environment& env, const PolicyNetwork& policy, Rng& rng) {
  if (policy.state_size() != env.observation_size()) {
    throw std::invalid_argument("policy input width " + std::to_string(policy.state_size()) +
                                " does not match " + env.name() + " observation size " +
                                std::to_string(env.observation_size()));
  }
  Trajectory traj;
  traj.steps.reserve(env.horizon());
  auto state = env.reset(rng);
  double weight = 1.0;
  for (std::size_t t = 0; t < env.horizon(); ++t) {
    TrajectoryStep step;
    StepResult next;
    try {
      auto sample = policy.sample(state, rng);
      next = env.step(policy.env_action(sample.action), rng);
      step.action = std::move(sample.action);
      step.log_prob = sample.log_prob;
    } catch (const std::exception& e) {
      throw RolloutError("step " + std::to_string(t) + ": " + e.what(), t);
    }
    step.state = std::move(state);
    step.reward = next.reward;
    traj.discounted_return += weight * next.reward;
    weight *= env.discount();
    traj.steps.push_back(std::move(step));
    state = std::move(next.state);
    if (next.done) break;
  }
  return traj;
}

// ---------------------------------------------------------------------------

ZeroMeanEnv::ZeroMeanEnv(ZeroMeanConfig config) : config_(config) {
  if (config_.horizon == 0) throw std::invalid_argument("zero-mean horizon must be positive");
  if (config_.h_min < 0.0 || config_.h_max < config_.h_min) {
    throw std::invalid_argument("zero-mean spread map needs 0 <= h_min <= h_max");
  }
  if (!(config_.discount > 0.0 && config_.discount <= 1.0)) {
    throw std::invalid_argument("discount must lie in (0, 1]");
  }
}

std::vector<double> ZeroMeanEnv::observe() const {
  return {spread(delta_), static_cast<double>(t_) / static_cast<double>(config_.horizon)};
}

std::vector<double> ZeroMeanEnv::reset(Rng& rng) {
  delta_ = uniform01(rng);
  t_ = 0;
  return observe();
}

void ZeroMeanEnv::set_delta(double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw std::invalid_argument("delta must lie in [0, 1]");
  delta_ = delta;
}

StepResult ZeroMeanEnv::step(std::span<const double> action, Rng& rng) {
  if (action.size() != 1 || !std::isfinite(action[0])) {
    throw std::invalid_argument("zero-mean env expects one finite real action");
  }
  const double x = standard_normal(rng);
  const double y = bernoulli_half(rng) ? 1.0 : 0.0;
  StepResult r;
  r.reward = x + spread(delta_) * (y - 0.5);
  delta_ = sigmoid(action[0]);
  ++t_;
  r.done = t_ >= config_.horizon;
  r.state = observe();
  return r;
}

StepResult AnalyticBandit::step(std::span<const double> action, Rng& rng) {
  if (action.size() != 1 || !std::isfinite(action[0])) {
    throw std::invalid_argument("bandit expects one finite real action");
  }
  const double d = action[0] - config_.center;
  StepResult r;
  r.reward = -d * d + config_.noise_scale * standard_normal(rng);
  r.done = true;
  return r;
}

// ---------------------------------------------------------------------------

PriceMatrix::PriceMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) throw std::invalid_argument("price matrix size mismatch");
  for (double v : values_) {
    if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("prices must be finite and positive");
  }
}

double BimodalNoise::draw(Rng& rng) const {
  const double b = bernoulli_half(rng) ? 0.5 : -0.5;
  return normal_std * standard_normal(rng) + binomial_scale * b;
}

void PriceModel::validate() const {
  if (!(persistence > 0.0 && persistence < 1.0)) throw std::invalid_argument("persistence must lie in (0, 1)");
  if (walk_scale < 0.0) throw std::invalid_argument("walk scale must be non-negative");
  if (ar_noise.normal_std < 0.0 || walk_noise.normal_std < 0.0) {
    throw std::invalid_argument("noise std must be non-negative");
  }
  if (rows < 2) throw std::invalid_argument("price model needs at least 2 rows");
  if (stocks < 1) throw std::invalid_argument("price model needs at least 1 stock");
}

PriceMatrix generate_prices(const PriceModel& model, Rng& rng) {
  model.validate();
  const std::size_t rows = model.rows;
  const std::size_t cols = model.stocks;
  std::vector<double> values(rows * cols);
  std::vector<double> x(rows);
  for (std::size_t n = 0; n < cols; ++n) {
    double y = model.y0;
    x[0] = model.x0;
    for (std::size_t t = 0; t + 1 < rows; ++t) {
      const double eps = model.ar_noise.draw(rng);
      const double v = model.walk_noise.draw(rng);
      x[t + 1] = x[t] + y + model.walk_scale * v;
      y = model.persistence * y + eps;
    }
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    const double range = *hi - *lo;
    for (std::size_t t = 0; t < rows; ++t) {
      values[t * cols + n] = range > 0.0 ? std::exp(x[t] / range) : 1.0;
    }
  }
  return PriceMatrix(rows, cols, std::move(values));
}

// ---------------------------------------------------------------------------

namespace {

std::string join_issues(const std::string& what, const std::vector<std::string>& issues) {
  std::ostringstream msg;
  msg << what;
  for (const auto& i : issues) msg << "\n  " << i;
  return msg.str();
}

bool valid_iso_date(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  for (std::size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u}) {
    if (s[i] < '0' || s[i] > '9') return false;
  }
  const int y = std::stoi(s.substr(0, 4));
  const unsigned m = static_cast<unsigned>(std::stoi(s.substr(5, 2)));
  const unsigned d = static_cast<unsigned>(std::stoi(s.substr(8, 2)));
  return std::chrono::year_month_day{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}}.ok();
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace

PriceDataError::PriceDataError(const std::string& what, std::vector<std::string> issues)
    : std::runtime_error(join_issues(what, issues)), issues_(std::move(issues)) {}

PriceTable parse_prices_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw PriceDataError("empty price file", {});
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  if (trim(line) != "date,ticker,price") {
    throw PriceDataError("bad header", {"expected 'date,ticker,price', got '" + trim(line) + "'"});
  }

  std::map<std::pair<std::string, std::string>, double> cells;  // (ticker, date) -> price
  std::set<std::string> dates;
  std::set<std::string> tickers;
  std::vector<std::string> issues;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(trim(f));
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (fields.size() != 3) {
      issues.push_back(where + "expected 3 fields, got " + std::to_string(fields.size()));
      continue;
    }
    const auto& date = fields[0];
    const auto& ticker = fields[1];
    if (!valid_iso_date(date)) {
      issues.push_back(where + "invalid date '" + date + "'");
      continue;
    }
    if (ticker.empty()) {
      issues.push_back(where + "empty ticker");
      continue;
    }
    double price = 0.0;
    try {
      std::size_t used = 0;
      price = std::stod(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      issues.push_back(where + "unparseable price '" + fields[2] + "'");
      continue;
    }
    if (!(price > 0.0) || !std::isfinite(price)) {
      issues.push_back(where + "non-positive price " + fields[2] + " for " + ticker + " on " + date);
      continue;
    }
    if (!cells.emplace(std::make_pair(ticker, date), price).second) {
      issues.push_back(where + "duplicate entry for " + ticker + " on " + date);
      continue;
    }
    dates.insert(date);
    tickers.insert(ticker);
  }
  if (!issues.empty()) throw PriceDataError("rejected rows in price file", issues);
  if (cells.empty()) throw PriceDataError("price file has no rows", {});

  PriceTable table;
  table.dates.assign(dates.begin(), dates.end());
  table.tickers.assign(tickers.begin(), tickers.end());
  std::vector<double> values;
  values.reserve(table.dates.size() * table.tickers.size());
  for (const auto& d : table.dates) {
    for (const auto& tk : table.tickers) {
      auto it = cells.find({tk, d});
      if (it == cells.end()) {
        issues.push_back("ticker " + tk + " missing date " + d);
        values.push_back(1.0);
      } else {
        values.push_back(it->second);
      }
    }
  }
  if (!issues.empty()) throw PriceDataError("gaps in price file", issues);
  table.prices = PriceMatrix(table.dates.size(), table.tickers.size(), std::move(values));
  return table;
}

PriceTable load_prices_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PriceDataError("cannot open price file " + path.string(), {});
  return parse_prices_csv(in);
}

void write_prices_csv(std::ostream& out, const PriceTable& table) {
  out << "date,ticker,price\n";
  out << std::setprecision(17);
  for (std::size_t t = 0; t < table.prices.rows(); ++t) {
    for (std::size_t n = 0; n < table.prices.cols(); ++n) {
      out << table.dates.at(t) << ',' << table.tickers.at(n) << ',' << table.prices(t, n) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------

std::vector<double> random_simplex(std::size_t dim, Rng& rng) {
  std::vector<double> w(dim);
  double total = 0.0;
  for (auto& v : w) {
    // Exponential(1) draws normalize to Dirichlet(1, ..., 1).
    v = -std::log1p(-uniform01(rng));
    total += v;
  }
  for (auto& v : w) v /= total;
  return w;
}

SimulatedPrices::SimulatedPrices(PriceModel model, std::optional<std::uint64_t> frozen_seed)
    : model_(std::move(model)) {
  model_.validate();
  if (frozen_seed) {
    Rng rng(*frozen_seed);
    frozen_ = generate_prices(model_, rng);
  }
}

PriceMatrix SimulatedPrices::episode_prices(std::size_t rows, Rng& rng) const {
  if (frozen_) {
    if (frozen_->rows() < rows) throw std::invalid_argument("frozen price path is shorter than the episode");
    if (frozen_->rows() == rows) return *frozen_;
    std::vector<double> v(frozen_->values().begin(), frozen_->values().begin() + rows * frozen_->cols());
    return PriceMatrix(rows, frozen_->cols(), std::move(v));
  }
  PriceModel m = model_;
  m.rows = rows;
  return generate_prices(m, rng);
}

HistoricalPrices::HistoricalPrices(PriceMatrix prices) : prices_(std::move(prices)) {
  if (prices_.rows() < 2 || prices_.cols() < 1) throw std::invalid_argument("historical prices are too short");
}

PriceMatrix HistoricalPrices::episode_prices(std::size_t rows, Rng& rng) const {
  if (prices_.rows() < rows) {
    throw std::invalid_argument("historical price table has " + std::to_string(prices_.rows()) +
                                " rows, episode needs " + std::to_string(rows));
  }
  std::uniform_int_distribution<std::size_t> pick(0, prices_.rows() - rows);
  const std::size_t start = pick(rng);
  const auto all = prices_.values();
  std::vector<double> v(all.begin() + start * prices_.cols(), all.begin() + (start + rows) * prices_.cols());
  return PriceMatrix(rows, prices_.cols(), std::move(v));
}

TradingEnv::TradingEnv(TradingConfig config, std::shared_ptr<const PriceSource> source)
    : config_(config), source_(std::move(source)) {
  if (!source_) throw std::invalid_argument("trading env needs a price source");
  if (config_.horizon == 0) throw std::invalid_argument("trading horizon must be positive");
  if (config_.lookback == 0) throw std::invalid_argument("lookback must be positive");
  if (!(config_.discount > 0.0 && config_.discount <= 1.0)) {
    throw std::invalid_argument("discount must lie in (0, 1]");
  }
  stocks_ = source_->stocks();
}

std::vector<double> TradingEnv::reset(Rng& rng) {
  auto prices = source_->episode_prices(config_.horizon + 1, rng);
  return reset_with(std::move(prices), random_simplex(stocks_ + 1, rng));
}

std::vector<double> TradingEnv::reset_with(PriceMatrix prices, std::vector<double> weights) {
  if (prices.cols() != stocks_ || prices.rows() < config_.horizon + 1) {
    throw std::invalid_argument("price path does not fit the trading configuration");
  }
  if (weights.size() != stocks_ + 1) throw std::invalid_argument("initial weights have the wrong length");
  prices_ = std::move(prices);
  weights_ = std::move(weights);
  value_ = 1.0;
  t_ = 0;
  return observe();
}

std::vector<double> TradingEnv::shares() const {
  std::vector<double> s(stocks_);
  for (std::size_t n = 0; n < stocks_; ++n) s[n] = value_ * weights_[n + 1] / prices_(t_, n);
  return s;
}

std::vector<double> TradingEnv::observe() const {
  std::vector<double> obs;
  obs.reserve(observation_size());
  const auto now = prices_.row(t_);
  for (std::size_t lag = 0; lag < config_.lookback; ++lag) {
    const std::size_t t = t_ >= lag ? t_ - lag : 0;
    const auto past = prices_.row(t);
    for (std::size_t n = 0; n < stocks_; ++n) obs.push_back(past[n] / now[n]);
  }
  obs.insert(obs.end(), weights_.begin(), weights_.end());
  return obs;
}

StepResult TradingEnv::step(std::span<const double> weights, Rng&) {
  if (t_ >= config_.horizon) throw std::logic_error("trading episode already finished");
  if (weights.size() != stocks_ + 1) {
    throw std::invalid_argument("expected " + std::to_string(stocks_ + 1) + " portfolio weights, got " +
                                std::to_string(weights.size()));
  }
  double total = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < -config_.simplex_tolerance) {
      throw std::invalid_argument("portfolio weight outside the simplex");
    }
    total += w;
  }
  if (std::abs(total - 1.0) > config_.simplex_tolerance) {
    throw std::invalid_argument("portfolio weights sum to " + std::to_string(total) + ", not 1");
  }

  const auto now = prices_.row(t_);
  const auto next = prices_.row(t_ + 1);
  std::vector<double> legs(stocks_ + 1);
  legs[0] = std::max(weights[0], 0.0) / total * value_ * (1.0 + config_.risk_free);
  for (std::size_t n = 0; n < stocks_; ++n) {
    legs[n + 1] = std::max(weights[n + 1], 0.0) / total * value_ * next[n] / now[n];
  }
  double new_value = 0.0;
  for (double l : legs) new_value += l;

  StepResult r;
  r.reward = new_value - value_;
  value_ = new_value;
  for (std::size_t i = 0; i < legs.size(); ++i) weights_[i] = legs[i] / new_value;
  ++t_;
  r.done = t_ >= config_.horizon;
  r.state = observe();
  return r;
}

}  // namespace qpo
