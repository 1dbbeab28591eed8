#include "qpo/algos.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qpo {

void ProjectionSpec::validate() const {
  if (!(bound > 0.0)) throw std::invalid_argument("projection bound must be positive");
}

void project(std::span<double> theta, const ProjectionSpec& spec) {
  switch (spec.kind) {
    case ProjectionSpec::Kind::box:
      for (auto& v : theta) v = std::clamp(v, -spec.bound, spec.bound);
      break;
    case ProjectionSpec::Kind::l2_ball: {
      double sq = 0.0;
      for (double v : theta) sq += v * v;
      const double norm = std::sqrt(sq);
      if (norm > spec.bound) {
        double s = spec.bound / norm;
        // Rounding can leave the result an ulp outside; shrink until it is in,
        // so that a second projection is a no-op.
        for (;;) {
          double check = 0.0;
          for (double v : theta) check += (v * s) * (v * s);
          if (std::sqrt(check) <= spec.bound) break;
          s = std::nextafter(s, 0.0);
        }
        for (auto& v : theta) v *= s;
      }
      break;
    }
  }
}

bool inside(std::span<const double> theta, const ProjectionSpec& spec, double tol) {
  switch (spec.kind) {
    case ProjectionSpec::Kind::box:
      return std::all_of(theta.begin(), theta.end(), [&](double v) { return std::abs(v) <= spec.bound + tol; });
    case ProjectionSpec::Kind::l2_ball: {
      double sq = 0.0;
      for (double v : theta) sq += v * v;
      return std::sqrt(sq) <= spec.bound + tol;
    }
  }
  return false;
}

void GammaSchedule::validate() const {
  if (!(initial > 0.0)) throw std::invalid_argument("gamma initial value must be positive");
  if (mode == Mode::stepwise && (!(factor > 0.0 && factor <= 1.0) || period_episodes == 0)) {
    throw std::invalid_argument("stepwise gamma needs factor in (0, 1] and a positive period");
  }
  if (mode == Mode::power && offset < 0.0) throw std::invalid_argument("gamma offset must be non-negative");
}

double GammaSchedule::at(std::size_t k, std::size_t episodes_seen) const {
  if (k < 1) throw std::invalid_argument("gamma index starts at 1");
  switch (mode) {
    case Mode::stepwise:
      return initial * std::pow(factor, static_cast<double>(episodes_seen / period_episodes));
    case Mode::power:
      return initial / (static_cast<double>(k) + offset);
  }
  return initial;
}

bool timescales_separated(const GammaSchedule& gamma, const BetaSchedule& beta_schedule, std::size_t batch,
                          std::size_t horizon) {
  double first = 0.0;
  double prev = std::numeric_limits<double>::infinity();
  double last = 0.0;
  for (std::size_t k = 1; k <= horizon; k = k < 16 ? k + 1 : k + k / 8) {
    const double ratio = gamma.at(k, (k - 1) * batch) / beta(beta_schedule, k, 1.0);
    if (ratio > prev * (1.0 + 1e-12)) return false;
    if (k == 1) first = ratio;
    prev = ratio;
    last = ratio;
  }
  // "-> 0": by the end of the horizon the ratio has shrunk by at least 10x
  // (gamma ~ 1/k against beta ~ k^-0.75 gives about 32x over 1e6 indices).
  return last < 0.1 * first;
}

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::reinforce: return "reinforce";
    case Algorithm::ppo: return "ppo";
    case Algorithm::qpo: return "qpo";
    case Algorithm::qppo: return "qppo";
  }
  return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "reinforce") return Algorithm::reinforce;
  if (s == "ppo") return Algorithm::ppo;
  if (s == "qpo") return Algorithm::qpo;
  if (s == "qppo") return Algorithm::qppo;
  throw std::invalid_argument("unknown algorithm '" + s + "'");
}

std::string to_string(DensityMode d) {
  switch (d) {
    case DensityMode::off: return "off";
    case DensityMode::sigmoid: return "sigmoid";
    case DensityMode::kde: return "kde";
  }
  return "?";
}

DensityMode density_mode_from_string(const std::string& s) {
  if (s == "off") return DensityMode::off;
  if (s == "sigmoid") return DensityMode::sigmoid;
  if (s == "kde") return DensityMode::kde;
  throw std::invalid_argument("unknown density mode '" + s + "'");
}

std::string to_string(OptimizerKind o) { return o == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

void AlgoConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  if (batch < 1) throw std::invalid_argument("batch size must be at least 1");
  gamma.validate();
  if (!(clip > 0.0 && clip < 1.0)) throw std::invalid_argument("clip epsilon must lie in (0, 1)");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (density == DensityMode::kde && batch < 2) throw std::invalid_argument("KDE density needs batch >= 2");
  if (!(density_bandwidth > 0.0)) throw std::invalid_argument("density bandwidth must be positive");
  if (!(density_floor > 0.0)) throw std::invalid_argument("density floor must be positive");
  if (!(baseline_lr > 0.0)) throw std::invalid_argument("baseline learning rate must be positive");
  if (!(max_ratio > 0.0)) throw std::invalid_argument("max ratio must be positive");
  if (!(discount > 0.0 && discount <= 1.0)) throw std::invalid_argument("discount must lie in (0, 1]");
  projection.validate();
}

// ---------------------------------------------------------------------------

ValueNetwork::ValueNetwork(MlpSpec spec, ParamVector params) : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  if (spec_.output_size() != 1) throw ShapeError("value network must have a scalar output");
  if (params_.size() != spec_.param_count()) throw ShapeError("parameters do not match the MLP layout");
}

ValueNetwork::ValueNetwork(MlpSpec spec, std::uint64_t init_seed)
    : ValueNetwork(spec, init_params(spec, init_seed)) {}

double ValueNetwork::value(std::span<const double> state) const { return evaluate(params_, spec_, state)[0]; }

AlgoState::AlgoState(PolicyNetwork p, QuantileTracker t)
    : policy(p), behavior(std::move(p)), tracker(std::move(t)) {}

AlgoState make_state(const AlgoConfig& config, PolicyNetwork policy, const BetaSchedule& beta_schedule,
                     std::uint64_t baseline_seed) {
  config.validate();
  AlgoState state(std::move(policy), QuantileTracker(config.alpha, beta_schedule, config.max_ratio));
  const bool wants_value_net =
      config.baseline && (config.algorithm == Algorithm::qppo || config.algorithm == Algorithm::ppo);
  if (wants_value_net) {
    MlpSpec spec;
    spec.widths.push_back(state.policy.state_size());
    for (auto w : config.baseline_hidden) spec.widths.push_back(w);
    spec.widths.push_back(1);
    state.baseline.emplace(spec, baseline_seed);
  }
  return state;
}

void ascend(AlgoState& state, const AlgoConfig& config, const Gradient& direction, double gamma) {
  auto theta = state.policy.mutable_params().mutable_values();
  if (direction.size() != theta.size()) throw ShapeError("direction does not match policy parameters");
  if (!direction.all_finite()) throw std::runtime_error("non-finite policy update direction");
  const auto d = direction.values();
  switch (config.optimizer) {
    case OptimizerKind::sgd:
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += gamma * d[i];
      break;
    case OptimizerKind::adam: {
      constexpr double b1 = 0.9;
      constexpr double b2 = 0.999;
      constexpr double eps = 1e-8;
      auto& a = state.adam;
      if (a.m.size() != theta.size()) {
        a.m.assign(theta.size(), 0.0);
        a.v.assign(theta.size(), 0.0);
        a.t = 0;
      }
      ++a.t;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(a.t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(a.t));
      for (std::size_t i = 0; i < theta.size(); ++i) {
        a.m[i] = b1 * a.m[i] + (1.0 - b1) * d[i];
        a.v[i] = b2 * a.v[i] + (1.0 - b2) * d[i] * d[i];
        theta[i] += gamma * (a.m[i] / c1) / (std::sqrt(a.v[i] / c2) + eps);
      }
      break;
    }
  }
  project(theta, config.projection);
  state.last_gamma = gamma;
  state.last.direction_norm = direction.norm();
}

namespace {

constexpr double kOnPolicyTolerance = 1e-6;

std::vector<double> batch_returns(std::span<const Trajectory> batch) {
  if (batch.empty()) throw std::invalid_argument("update needs a non-empty batch");
  std::vector<double> r;
  r.reserve(batch.size());
  for (const auto& t : batch) {
    if (!std::isfinite(t.discounted_return)) throw std::runtime_error("non-finite episode return in batch");
    r.push_back(t.discounted_return);
  }
  return r;
}

// grad += scale * sum_t grad log pi(a_t|s_t), checking stored log-probs.
void accumulate_score(const PolicyNetwork& policy, const Trajectory& traj, double scale, Gradient& grad) {
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const auto& s = traj.steps[t];
    const double lp = policy.accumulate_grad_log_prob(s.state, s.action, scale, grad);
    if (!(std::abs(lp - s.log_prob) <= kOnPolicyTolerance)) {
      throw OffPolicyBatchError("batch is not on-policy: step " + std::to_string(t) + " stored log-prob " +
                                std::to_string(s.log_prob) + " vs current " + std::to_string(lp));
    }
  }
}

DensityEstimate estimate_density(const AlgoConfig& config, double q, std::span<const double> returns) {
  if (config.density == DensityMode::kde) return density_kde(q, returns, config.density_floor);
  return density_sigmoid(q, returns, config.density_bandwidth, config.density_floor);
}

void finish_iteration(AlgoState& state, std::size_t batch_size) {
  state.behavior = state.policy;
  ++state.iteration;
  state.episodes += batch_size;
}

}  // namespace

Gradient quantile_direction(const PolicyNetwork& policy, std::span<const Trajectory> batch, double q,
                            std::size_t* below) {
  Gradient dir = policy.zero_gradient();
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::size_t count = 0;
  for (const auto& traj : batch) {
    const bool hit = traj.discounted_return <= q;
    count += hit ? 1 : 0;
    accumulate_score(policy, traj, hit ? -inv_n : 0.0, dir);
  }
  if (below) *below = count;
  return dir;
}

void qpo_update(AlgoState& state, std::span<const Trajectory> batch, const AlgoConfig& config) {
  const auto returns = batch_returns(batch);
  state.tracker.initialize_from(returns);
  const double q = state.tracker.q();

  Gradient dir = quantile_direction(state.policy, batch, q, &state.last.below_quantile);
  if (config.density != DensityMode::off) {
    const auto f = estimate_density(config, q, returns);
    dir *= 1.0 / f.value;
    state.last.density = f.value;
    state.last.density_floored = f.floored;
  }
  state.tracker.update(returns);
  ascend(state, config, dir, config.gamma.at(state.iteration + 1, state.episodes));
  finish_iteration(state, batch.size());
}

void reinforce_update(AlgoState& state, std::span<const Trajectory> batch, const AlgoConfig& config) {
  const auto returns = batch_returns(batch);
  const double n = static_cast<double>(batch.size());
  const double b =
      config.mean_baseline && batch.size() > 1 ? std::accumulate(returns.begin(), returns.end(), 0.0) / n : 0.0;
  Gradient dir = state.policy.zero_gradient();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    accumulate_score(state.policy, batch[i], (returns[i] - b) / n, dir);
  }
  // The tracker follows the policy's quantile for reporting only.
  state.tracker.update(returns);
  ascend(state, config, dir, config.gamma.at(state.iteration + 1, state.episodes));
  finish_iteration(state, batch.size());
}

ImportanceRatios importance_ratio(const Trajectory& traj, const PolicyNetwork& target) {
  ImportanceRatios r;
  r.per_step.reserve(traj.steps.size());
  double log_product = 0.0;
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const auto& s = traj.steps[t];
    const double diff = target.log_prob(s.state, s.action) - s.log_prob;
    const double rho = std::exp(diff);
    if (!std::isfinite(rho)) throw std::runtime_error("non-finite importance ratio at step " + std::to_string(t));
    r.per_step.push_back(rho);
    log_product += diff;
  }
  r.product = std::exp(log_product);
  if (!std::isfinite(r.product)) throw std::runtime_error("non-finite trajectory importance ratio");
  return r;
}

Advantages quantile_advantages(std::span<const Trajectory> batch, double q, const ValueNetwork* baseline) {
  Advantages adv(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const double base = batch[n].discounted_return <= q ? -1.0 : 0.0;
    adv[n].reserve(batch[n].steps.size());
    for (const auto& s : batch[n].steps) adv[n].push_back(baseline ? base - baseline->value(s.state) : base);
  }
  return adv;
}

Advantages reward_to_go_advantages(std::span<const Trajectory> batch, double discount, const ValueNetwork* value) {
  Advantages adv(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& steps = batch[n].steps;
    adv[n].assign(steps.size(), 0.0);
    double g = 0.0;
    for (std::size_t t = steps.size(); t-- > 0;) {
      g = steps[t].reward + discount * g;
      adv[n][t] = value ? g - value->value(steps[t].state) : g;
    }
  }
  return adv;
}

double clipped_term(double ratio, double advantage, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return std::min(ratio * advantage, clipped * advantage);
}

bool unclipped_branch(double ratio, double advantage, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return ratio * advantage <= clipped * advantage;
}

SurrogateResult clipped_surrogate(std::span<const Trajectory> batch, const PolicyNetwork& target,
                                  const Advantages& advantages, double clip) {
  if (advantages.size() != batch.size()) throw std::invalid_argument("advantages do not match the batch");
  SurrogateResult out{0.0, target.zero_gradient()};
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& steps = batch[n].steps;
    if (advantages[n].size() != steps.size()) throw std::invalid_argument("advantages do not match the episode");
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const auto& s = steps[t];
      const double a = advantages[n][t];
      // log-prob and gradient come from one tape; the gradient of rho is rho * grad log pi.
      Gradient g = target.zero_gradient();
      const double lp = target.accumulate_grad_log_prob(s.state, s.action, 1.0, g);
      const double rho = std::exp(lp - s.log_prob);
      if (!std::isfinite(rho)) throw std::runtime_error("non-finite importance ratio at step " + std::to_string(t));
      out.objective += inv_n * clipped_term(rho, a, clip);
      if (a != 0.0 && unclipped_branch(rho, a, clip)) out.gradient.add_scaled(g, inv_n * a * rho);
    }
  }
  return out;
}

double value_regression_step(ValueNetwork& net, std::span<const std::vector<double>> states,
                             std::span<const double> targets, double lr) {
  if (states.size() != targets.size() || states.empty()) {
    throw std::invalid_argument("value regression needs matching non-empty states and targets");
  }
  Gradient grad(net.params().layout_ptr());
  const double inv_m = 1.0 / static_cast<double>(states.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    auto fwd = forward(net.params(), net.spec(), states[i]);
    const double err = fwd.output[0] - targets[i];
    loss += inv_m * err * err;
    const double seed = 2.0 * inv_m * err;
    accumulate_backward(fwd.tape, std::span<const double>(&seed, 1), 1.0, grad);
  }
  auto w = net.mutable_params().mutable_values();
  const auto g = grad.values();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
  return loss;
}

double baseline_update(ValueNetwork& net, std::span<const Trajectory> batch, double q, double lr) {
  std::vector<std::vector<double>> states;
  std::vector<double> targets;
  for (const auto& traj : batch) {
    const double target = traj.discounted_return <= q ? -1.0 : 0.0;
    for (const auto& s : traj.steps) {
      states.push_back(s.state);
      targets.push_back(target);
    }
  }
  return value_regression_step(net, states, targets, lr);
}

void qppo_update(AlgoState& state, std::span<const Trajectory> batch, const AlgoConfig& config) {
  const auto returns = batch_returns(batch);
  state.tracker.initialize_from(returns);
  const double gamma = config.gamma.at(state.iteration + 1, state.episodes);
  std::vector<double> products(batch.size());
  for (std::size_t j = 0; j < config.epochs; ++j) {
    for (std::size_t n = 0; n < batch.size(); ++n) products[n] = importance_ratio(batch[n], state.policy).product;
    const double q = state.tracker.q();
    const ValueNetwork* base = state.baseline ? &*state.baseline : nullptr;
    const auto adv = quantile_advantages(batch, q, base);
    state.tracker.update_is(returns, products);

    auto sur = clipped_surrogate(batch, state.policy, adv, config.clip);
    state.last.surrogate = sur.objective;
    if (config.density != DensityMode::off) {
      const auto f = estimate_density(config, q, returns);
      sur.gradient *= 1.0 / f.value;
      state.last.density = f.value;
      state.last.density_floored = f.floored;
    }
    ascend(state, config, sur.gradient, gamma);
    if (state.baseline) state.last.baseline_loss = baseline_update(*state.baseline, batch, q, config.baseline_lr);
  }
  finish_iteration(state, batch.size());
}

void ppo_update(AlgoState& state, std::span<const Trajectory> batch, const AlgoConfig& config) {
  const auto returns = batch_returns(batch);
  const double gamma = config.gamma.at(state.iteration + 1, state.episodes);
  const double discount = config.discount;
  const ValueNetwork* value = state.baseline ? &*state.baseline : nullptr;
  const auto adv = reward_to_go_advantages(batch, discount, value);

  std::vector<std::vector<double>> states;
  std::vector<double> targets;
  if (state.baseline) {
    const auto rtg = reward_to_go_advantages(batch, discount, nullptr);
    for (std::size_t n = 0; n < batch.size(); ++n) {
      for (std::size_t t = 0; t < batch[n].steps.size(); ++t) {
        states.push_back(batch[n].steps[t].state);
        targets.push_back(rtg[n][t]);
      }
    }
  }
  for (std::size_t j = 0; j < config.epochs; ++j) {
    auto sur = clipped_surrogate(batch, state.policy, adv, config.clip);
    state.last.surrogate = sur.objective;
    ascend(state, config, sur.gradient, gamma);
    if (state.baseline) {
      state.last.baseline_loss = value_regression_step(*state.baseline, states, targets, config.baseline_lr);
    }
  }
  state.tracker.update(returns);
  finish_iteration(state, batch.size());
}

void update(AlgoState& state, std::span<const Trajectory> batch, const AlgoConfig& config) {
  switch (config.algorithm) {
    case Algorithm::reinforce: return reinforce_update(state, batch, config);
    case Algorithm::ppo: return ppo_update(state, batch, config);
    case Algorithm::qpo: return qpo_update(state, batch, config);
    case Algorithm::qppo: return qppo_update(state, batch, config);
  }
}

}  // namespace qpo
