#include "qpo/quantile.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace qpo {

double empirical_quantile(std::span<const double> values, double alpha) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty sample");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  std::vector<double> v(values.begin(), values.end());
  const auto n = v.size();
  auto rank = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rank - 1), v.end());
  return v[rank - 1];
}

void BetaSchedule::validate() const {
  if (!(c0 > 0.0)) throw std::invalid_argument("beta c0 must be positive");
  if (!(c1 > 0.0 && c1 <= c2)) throw std::invalid_argument("beta clip bounds need 0 < c1 <= c2");
  if (mode == Mode::power && !(lambda > 0.5 && lambda < 1.0)) {
    throw std::invalid_argument("beta lambda must lie in (0.5, 1)");
  }
  if (mode == Mode::stepwise && (!(factor > 0.0 && factor <= 1.0) || period == 0)) {
    throw std::invalid_argument("stepwise beta needs factor in (0, 1] and a positive period");
  }
}

double beta(const BetaSchedule& s, std::size_t k, double q) {
  if (k < 1) throw std::invalid_argument("beta index starts at 1");
  const double decay = s.mode == BetaSchedule::Mode::power
                           ? std::pow(static_cast<double>(k), -s.lambda)
                           : std::pow(s.factor, static_cast<double>(k / s.period));
  return s.c0 * decay * std::clamp(std::abs(q), s.c1, s.c2);
}

QuantileTracker::QuantileTracker(double alpha, BetaSchedule schedule, double max_ratio)
    : alpha_(alpha), schedule_(schedule), max_ratio_(max_ratio) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  if (!(max_ratio > 0.0)) throw std::invalid_argument("max importance ratio must be positive");
  schedule_.validate();
}

QuantileTracker::QuantileTracker(double alpha, BetaSchedule schedule, double q0, double max_ratio)
    : QuantileTracker(alpha, schedule, max_ratio) {
  if (!std::isfinite(q0)) throw std::invalid_argument("q0 must be finite");
  q_ = q0;
  initialized_ = true;
}

namespace {

void check_returns(std::span<const double> returns) {
  if (returns.empty()) throw std::invalid_argument("quantile update needs a non-empty batch");
  for (double r : returns) {
    if (!std::isfinite(r)) throw std::invalid_argument("quantile update received a non-finite return");
  }
}

}  // namespace

void QuantileTracker::initialize_from(std::span<const double> returns) {
  check_returns(returns);
  if (initialized_) return;
  q_ = empirical_quantile(returns, alpha_);
  initialized_ = true;
}

void QuantileTracker::step(double weighted_fraction) {
  last_beta_ = beta(schedule_, k_ + 1, q_);
  q_ += last_beta_ * (alpha_ - weighted_fraction);
  ++k_;
}

void QuantileTracker::update(std::span<const double> returns) {
  check_returns(returns);
  initialize_from(returns);
  std::size_t below = 0;
  for (double r : returns) below += r <= q_ ? 1 : 0;
  step(static_cast<double>(below) / static_cast<double>(returns.size()));
}

void QuantileTracker::update_is(std::span<const double> returns, std::span<const double> ratios) {
  check_returns(returns);
  if (ratios.size() != returns.size()) throw std::invalid_argument("ratios and returns differ in length");
  for (double r : ratios) {
    // Zero is allowed: a product of per-step ratios can underflow.
    if (!std::isfinite(r) || !(r >= 0.0)) throw std::invalid_argument("importance ratios must be non-negative and finite");
  }
  initialize_from(returns);
  double acc = 0.0;
  for (std::size_t n = 0; n < returns.size(); ++n) {
    double rho = ratios[n];
    if (rho > max_ratio_) {
      rho = max_ratio_;
      ++clipped_;
    }
    if (returns[n] <= q_) acc += rho;
  }
  step(acc / static_cast<double>(returns.size()));
}

void QuantileTracker::restore(double q, std::size_t k, std::size_t clipped, double last_beta) {
  if (!std::isfinite(q)) throw std::invalid_argument("restored q must be finite");
  q_ = q;
  k_ = k;
  clipped_ = clipped;
  last_beta_ = last_beta;
  initialized_ = true;
}

DensityEstimate density_sigmoid(double q, std::span<const double> returns, double bandwidth, double floor) {
  if (!(bandwidth > 0.0)) throw std::invalid_argument("sigmoid bandwidth must be positive");
  if (returns.empty()) throw std::invalid_argument("density estimate needs a non-empty batch");
  double acc = 0.0;
  for (double u : returns) {
    const double z = (q - u) / bandwidth;
    // s'(z) = s(z)(1 - s(z)) = e^{-|z|} / (1 + e^{-|z|})^2
    const double e = std::exp(-std::abs(z));
    acc += e / ((1.0 + e) * (1.0 + e));
  }
  DensityEstimate d;
  d.method = DensityEstimate::Method::sigmoid;
  d.bandwidth = bandwidth;
  const double raw = acc / (static_cast<double>(returns.size()) * bandwidth);
  d.floored = !(raw >= floor);
  d.value = d.floored ? floor : raw;
  return d;
}

double silverman_bandwidth(std::span<const double> values) {
  const auto n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return 1.06 * sd * std::pow(n, -0.2);
}

DensityEstimate density_kde(double q, std::span<const double> returns, double floor) {
  if (returns.size() < 2) throw std::invalid_argument("KDE needs at least two returns");
  DensityEstimate d;
  d.method = DensityEstimate::Method::kde;
  const double h = silverman_bandwidth(returns);
  d.bandwidth = h;
  if (!(h > 0.0)) {
    d.value = floor;
    d.floored = true;
    d.diagnostic = "zero sample spread";
    return d;
  }
  const double norm = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  double acc = 0.0;
  for (double u : returns) {
    const double z = (q - u) / h;
    acc += norm * std::exp(-0.5 * z * z);
  }
  const double raw = acc / (static_cast<double>(returns.size()) * h);
  d.floored = !(raw >= floor);
  d.value = d.floored ? floor : raw;
  return d;
}

}  // namespace qpo
