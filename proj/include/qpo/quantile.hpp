#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>

namespace qpo {

/// Empirical alpha-quantile: the ceil(alpha * n)-th order statistic (1-based,
/// clamped to [1, n]), i.e. the lower value with no interpolation.
double empirical_quantile(std::span<const double> values, double alpha);

/// Fast-timescale step size:
///   power:    beta_k = c0 * k^-lambda                     * clip(|q|, c1, c2)
///   stepwise: beta_k = c0 * factor^floor(k / period)      * clip(|q|, c1, c2)
struct BetaSchedule {
  enum class Mode { power, stepwise };

  double c0 = 1.0;
  double c1 = 0.1;
  double c2 = 10.0;
  double lambda = 0.75;
  Mode mode = Mode::power;
  double factor = 0.7;
  std::size_t period = 400;

  void validate() const;
};

/// k >= 1.
double beta(const BetaSchedule& schedule, std::size_t k, double q);

/// Running alpha-quantile estimate q_k driven by
///   q_{k+1} = q_k + beta_k * (alpha - mean_n w_n * 1{U_n <= q_k})
/// with w_n = 1 on-policy and w_n = rho_n (clipped) off-policy.
class QuantileTracker {
 public:
  /// q_0 is taken from the first batch (its empirical alpha-quantile).
  QuantileTracker(double alpha, BetaSchedule schedule, double max_ratio = 10.0);
  /// Explicit q_0.
  QuantileTracker(double alpha, BetaSchedule schedule, double q0, double max_ratio);

  double alpha() const { return alpha_; }
  double q() const { return q_; }
  bool initialized() const { return initialized_; }
  /// Number of updates applied so far.
  std::size_t k() const { return k_; }
  double last_beta() const { return last_beta_; }
  std::size_t clipped_ratios() const { return clipped_; }
  double max_ratio() const { return max_ratio_; }
  const BetaSchedule& schedule() const { return schedule_; }

  /// Sets q_0 from the batch if not yet initialized; no step is taken.
  void initialize_from(std::span<const double> returns);

  void update(std::span<const double> returns);
  void update_is(std::span<const double> returns, std::span<const double> ratios);

  /// Restores serialized state.
  void restore(double q, std::size_t k, std::size_t clipped, double last_beta);

 private:
  void step(double weighted_fraction);

  double alpha_;
  BetaSchedule schedule_;
  double max_ratio_;
  double q_ = 0.0;
  bool initialized_ = false;
  std::size_t k_ = 0;
  std::size_t clipped_ = 0;
  double last_beta_ = 0.0;
};

struct DensityEstimate {
  enum class Method { sigmoid, kde };

  double value = 0.0;
  Method method = Method::sigmoid;
  double bandwidth = 0.0;
  /// True when the raw estimate fell below the floor.
  bool floored = false;
  /// Non-empty when the estimator could not run normally (e.g. zero spread).
  std::string diagnostic;
};

constexpr double kDefaultDensityFloor = 1e-3;

/// (1 / (N h)) * sum_n s'((q - U_n) / h) with s the logistic sigmoid.
DensityEstimate density_sigmoid(double q, std::span<const double> returns, double bandwidth = 1.0,
                                double floor = kDefaultDensityFloor);

/// Gaussian-kernel estimate at q with Silverman's bandwidth 1.06 * sd * N^(-1/5).
DensityEstimate density_kde(double q, std::span<const double> returns, double floor = kDefaultDensityFloor);

double silverman_bandwidth(std::span<const double> values);

}  // namespace qpo
