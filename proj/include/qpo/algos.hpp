#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qpo/autodiff.hpp"
#include "qpo/env.hpp"
#include "qpo/policy.hpp"
#include "qpo/quantile.hpp"

namespace qpo {

// ---------------------------------------------------------------------------
// Feasible set Theta.

struct ProjectionSpec {
  enum class Kind { box, l2_ball };
  Kind kind = Kind::box;
  double bound = 10.0;  // box half-width or ball radius

  void validate() const;
};

/// Nearest point of Theta: per-coordinate clamp (box) or radial rescale (ball).
void project(std::span<double> theta, const ProjectionSpec& spec);
bool inside(std::span<const double> theta, const ProjectionSpec& spec, double tol = 0.0);

// ---------------------------------------------------------------------------
// Slow-timescale step size gamma_k.
//   stepwise: initial * factor^floor(episodes_seen / period_episodes)
//   power:    initial / (k + offset), k >= 1

struct GammaSchedule {
  enum class Mode { stepwise, power };
  Mode mode = Mode::stepwise;
  double initial = 5e-4;
  double factor = 0.7;
  std::size_t period_episodes = 400;
  double offset = 0.0;

  void validate() const;
  double at(std::size_t k, std::size_t episodes_seen) const;
};

/// Checks numerically that gamma_k / beta_k decreases to 0 along k = 1..horizon
/// (batch episodes per iteration; the |q| clip factor is held at 1).
bool timescales_separated(const GammaSchedule& gamma, const BetaSchedule& beta, std::size_t batch,
                          std::size_t horizon = 1000000);

// ---------------------------------------------------------------------------

enum class Algorithm { reinforce, ppo, qpo, qppo };
enum class DensityMode { off, sigmoid, kde };
enum class OptimizerKind { sgd, adam };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);
std::string to_string(DensityMode d);
DensityMode density_mode_from_string(const std::string& s);
std::string to_string(OptimizerKind o);
OptimizerKind optimizer_from_string(const std::string& s);

struct AlgoConfig {
  Algorithm algorithm = Algorithm::qpo;
  double alpha = 0.1;
  std::size_t batch = 1;
  GammaSchedule gamma;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double clip = 0.2;
  std::size_t epochs = 4;
  DensityMode density = DensityMode::off;
  double density_bandwidth = 1.0;
  double density_floor = kDefaultDensityFloor;
  /// QPPO: baseline network B(s|w). PPO: value network V(s).
  bool baseline = false;
  double baseline_lr = 1e-3;
  std::vector<std::size_t> baseline_hidden{32, 32};
  /// REINFORCE: subtract the batch-mean return.
  bool mean_baseline = true;
  ProjectionSpec projection;
  double max_ratio = 10.0;
  /// Discount for PPO reward-to-go; set from the environment.
  double discount = 1.0;

  void validate() const;
};

/// Scalar regressor used as QPPO's baseline and PPO's value function.
class ValueNetwork {
 public:
  ValueNetwork(MlpSpec spec, ParamVector params);
  ValueNetwork(MlpSpec spec, std::uint64_t init_seed);

  double value(std::span<const double> state) const;
  const MlpSpec& spec() const { return spec_; }
  const ParamVector& params() const { return params_; }
  ParamVector& mutable_params() { return params_; }

 private:
  MlpSpec spec_;
  ParamVector params_;
};

/// First/second-moment state for Adam; untouched under plain SGD.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

struct UpdateDiagnostics {
  double direction_norm = 0.0;
  double density = 0.0;
  bool density_floored = false;
  double surrogate = 0.0;
  double baseline_loss = 0.0;
  std::size_t below_quantile = 0;
};

/// Everything a training loop carries between iterations.
struct AlgoState {
  PolicyNetwork policy;
  /// Behavior policy theta~ (QPPO/PPO). Equal to `policy` after each update.
  PolicyNetwork behavior;
  QuantileTracker tracker;
  std::optional<ValueNetwork> baseline;
  AdamState adam;
  std::size_t iteration = 0;  // updates applied
  std::size_t episodes = 0;   // episodes consumed by updates
  double last_gamma = 0.0;
  UpdateDiagnostics last;

  AlgoState(PolicyNetwork policy, QuantileTracker tracker);
};

AlgoState make_state(const AlgoConfig& config, PolicyNetwork policy, const BetaSchedule& beta,
                     std::uint64_t baseline_seed);

class OffPolicyBatchError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Moves theta along `direction` with step gamma under the configured
/// optimizer, then projects onto Theta.
void ascend(AlgoState& state, const AlgoConfig& config, const Gradient& direction, double gamma);

/// Quantile policy gradient, on-policy:
///   d = -(1/N) sum_n 1{U_n <= q_k} sum_t grad log pi(a_t|s_t)   [/ f_hat(q_k)]
///   q_{k+1} = q_k + beta_k (alpha - (1/N) sum_n 1{U_n <= q_k})
///   theta_{k+1} = project(theta_k + gamma_k d)
void qpo_update(AlgoState& state, std::span<const Trajectory> batch, const AlgoConfig& config);

/// Likelihood-ratio mean gradient, on-policy:
///   d = (1/N) sum_n (U_n - b) sum_t grad log pi(a_t|s_t), b = batch mean or 0.
void reinforce_update(AlgoState& state, std::span<const Trajectory> batch, const AlgoConfig& config);

/// The QPO direction without the density division; returns it and the
/// number of episodes with U <= q.
Gradient quantile_direction(const PolicyNetwork& policy, std::span<const Trajectory> batch, double q,
                            std::size_t* below = nullptr);

struct ImportanceRatios {
  std::vector<double> per_step;
  double product = 1.0;
};

/// rho_t = pi(a_t|s_t; target) / pi_behavior(a_t|s_t), using the behavior
/// log-probs stored in the trajectory.
ImportanceRatios importance_ratio(const Trajectory& traj, const PolicyNetwork& target);

/// Per-step advantages, indexed [episode][t].
using Advantages = std::vector<std::vector<double>>;

/// A_t = -1{U <= q} - B(s_t), or -1{U <= q} without a baseline.
Advantages quantile_advantages(std::span<const Trajectory> batch, double q, const ValueNetwork* baseline);

/// Discounted reward-to-go minus V(s_t) (or raw reward-to-go without one).
Advantages reward_to_go_advantages(std::span<const Trajectory> batch, double discount,
                                   const ValueNetwork* value);

/// One term of the clipped surrogate: min(rho A, clip(rho, 1-eps, 1+eps) A).
double clipped_term(double ratio, double advantage, double clip);
/// True when the min selects the unclipped branch (the term then carries a gradient).
bool unclipped_branch(double ratio, double advantage, double clip);

struct SurrogateResult {
  double objective = 0.0;
  Gradient gradient;
};

/// Batch average of per-episode sums over t of the clipped term, and its
/// gradient with respect to the target policy parameters.
SurrogateResult clipped_surrogate(std::span<const Trajectory> batch, const PolicyNetwork& target,
                                  const Advantages& advantages, double clip);

/// Inner loop of J epochs over one behavior batch: ratios, importance-weighted
/// tracker update, clipped-surrogate ascent; then behavior <- policy.
void qppo_update(AlgoState& state, std::span<const Trajectory> batch, const AlgoConfig& config);

/// Mean-based PPO with per-step ratios and a value-network advantage.
void ppo_update(AlgoState& state, std::span<const Trajectory> batch, const AlgoConfig& config);

/// One SGD step on (1/M) sum (V(s) - target)^2 over all states; returns the
/// pre-step loss.
double value_regression_step(ValueNetwork& net, std::span<const std::vector<double>> states,
                             std::span<const double> targets, double lr);

/// Baseline step toward the targets -1{U(tau) <= q} for every step of every episode.
double baseline_update(ValueNetwork& net, std::span<const Trajectory> batch, double q, double lr);

/// Dispatches on config.algorithm.
void update(AlgoState& state, std::span<const Trajectory> batch, const AlgoConfig& config);

}  // namespace qpo
