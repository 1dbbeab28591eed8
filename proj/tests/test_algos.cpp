#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "oracles.hpp"
#include "qpo/algos.hpp"

using namespace qpo;

namespace {

constexpr double kSigma = 0.5;

// Policy with a single parameter theta: a ~ N(theta, kSigma^2), no state.
PolicyNetwork scalar_policy(double theta) {
  const MlpSpec spec{{0, 1}};
  return PolicyNetwork(spec, GaussianHead{1, 1e-2, kSigma}, ParamVector(spec.make_layout(), {theta}));
}

double hand_log_prob(double theta, double a) {
  const double z = (a - theta) / kSigma;
  return -0.5 * z * z - std::log(kSigma * std::sqrt(2.0 * std::numbers::pi));
}

double hand_score(double theta, double a) { return (a - theta) / (kSigma * kSigma); }

// One-step episode with action a and return u, log-prob under theta computed by hand.
Trajectory one_step(double theta, double a, double u) {
  Trajectory t;
  t.steps.push_back(TrajectoryStep{{}, Action{-1, {a}}, hand_log_prob(theta, a), u});
  t.discounted_return = u;
  return t;
}

AlgoConfig sgd_config(Algorithm algo, double gamma) {
  AlgoConfig c;
  c.algorithm = algo;
  c.batch = 2;
  c.gamma.initial = gamma;
  c.gamma.factor = 1.0;
  c.epochs = 1;
  return c;
}

AlgoState state_at(const AlgoConfig& c, double theta, double q) {
  auto s = make_state(c, scalar_policy(theta), BetaSchedule{}, 1);
  s.tracker.restore(q, 0, 0, 0.0);
  return s;
}

double theta_of(const AlgoState& s) { return s.policy.params()[0]; }

std::vector<Trajectory> zero_mean_batch(const PolicyNetwork& policy, std::size_t n, std::uint64_t seed,
                                        std::size_t horizon = 3) {
  ZeroMeanEnv env(ZeroMeanConfig{horizon, 0.0, 4.0, 1.0});
  Rng rng(seed);
  std::vector<Trajectory> b;
  for (std::size_t i = 0; i < n; ++i) b.push_back(rollout(env, policy, rng));
  return b;
}

PolicyNetwork small_zero_mean_policy(std::uint64_t seed) {
  return PolicyNetwork(MlpSpec{{2, 6, 2}}, GaussianHead{1, 1e-2, std::nullopt}, seed);
}

// Scalar brute force of min{rho A, clip(rho) A}.
double enumerate_min(double rho, double a, double eps) {
  double c = rho;
  if (c < 1.0 - eps) c = 1.0 - eps;
  if (c > 1.0 + eps) c = 1.0 + eps;
  const double x = rho * a;
  const double y = c * a;
  return x < y ? x : y;
}

}  // namespace

TEST_CASE("projection") {
  const ProjectionSpec box{ProjectionSpec::Kind::box, 1.0};
  std::vector<double> x{2.0, -3.0};
  project(x, box);
  CHECK(x == std::vector<double>{1.0, -1.0});
  std::vector<double> in{0.5, -0.25};
  project(in, box);
  CHECK(in == std::vector<double>{0.5, -0.25});

  const ProjectionSpec ball{ProjectionSpec::Kind::l2_ball, 5.0};
  std::vector<double> y{6.0, 8.0};
  project(y, ball);
  CHECK(y[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(inside(y, ball, 1e-12));

  std::mt19937_64 rng(1);
  std::normal_distribution<double> z(0.0, 5.0);
  for (int k = 0; k < 100; ++k) {
    std::vector<double> v(7);
    for (auto& e : v) e = z(rng);
    for (const auto& spec : {box, ball}) {
      auto once = v;
      project(once, spec);
      CHECK(inside(once, spec, 1e-12));
      auto twice = once;
      project(twice, spec);
      CHECK(twice == once);
    }
  }
}

TEST_CASE("gamma schedules and timescale separation") {
  GammaSchedule g;
  CHECK(g.at(1, 0) == 5e-4);
  CHECK(g.at(5, 399) == 5e-4);
  CHECK(g.at(5, 400) == doctest::Approx(3.5e-4));
  GammaSchedule p;
  p.mode = GammaSchedule::Mode::power;
  p.initial = 2.0;
  p.offset = 1.0;
  CHECK_THROWS(p.at(0, 0));

  CHECK(p.at(3, 0) == 0.5);
  p.offset = 0.0;
  CHECK(timescales_separated(p, BetaSchedule{}, 1));
  GammaSchedule flat;
  flat.factor = 1.0;
  CHECK_FALSE(timescales_separated(flat, BetaSchedule{}, 1));
}

TEST_CASE("QPO: one-sided batch leaves theta and raises q") {
  const auto c = sgd_config(Algorithm::qpo, 0.1);
  auto s = state_at(c, 0.3, -5.0);
  const std::vector<Trajectory> b{one_step(0.3, 0.9, 1.0), one_step(0.3, -0.2, 2.0)};
  qpo_update(s, b, c);
  CHECK(theta_of(s) == 0.3);
  CHECK(s.tracker.q() == -5.0 + 5.0 * 0.1);  // beta_1 = clip(|q|) = 5
  CHECK(s.iteration == 1);
  CHECK(s.episodes == 2);
}

TEST_CASE("QPO: hand-computed two-episode update") {
  const double theta = 0.3, q = 0.5, gamma = 0.1;
  const double a1 = 1.1, a2 = -0.4;
  const std::vector<Trajectory> b{one_step(theta, a1, 0.2), one_step(theta, a2, 0.9)};

  SUBCASE("no density") {
    const auto c = sgd_config(Algorithm::qpo, gamma);
    auto s = state_at(c, theta, q);
    qpo_update(s, b, c);
    // Only the first episode has U <= q.
    const double d = -0.5 * hand_score(theta, a1);
    CHECK(theta_of(s) == doctest::Approx(theta + gamma * d).epsilon(1e-14));
    CHECK(s.tracker.q() == doctest::Approx(q + 0.5 * (0.1 - 0.5)).epsilon(1e-14));
    CHECK(s.last.below_quantile == 1);
  }
  SUBCASE("sigmoid density division") {
    auto c = sgd_config(Algorithm::qpo, gamma);
    c.density = DensityMode::sigmoid;
    auto s = state_at(c, theta, q);
    qpo_update(s, b, c);
    auto sp = [](double z) {
      const double e = std::exp(-z);
      return e / ((1.0 + e) * (1.0 + e));
    };
    const double f = 0.5 * (sp(q - 0.2) + sp(q - 0.9));
    const double d = -0.5 * hand_score(theta, a1) / f;
    CHECK(theta_of(s) == doctest::Approx(theta + gamma * d).epsilon(1e-14));
  }
}

TEST_CASE("QPO: stored log-probs must match the current policy") {
  const auto c = sgd_config(Algorithm::qpo, 0.1);
  auto s = state_at(c, 0.3, 0.5);
  auto t = one_step(0.3, 1.0, 0.0);
  t.steps[0].log_prob += 1e-3;
  const std::vector<Trajectory> b{t, one_step(0.3, 0.0, 1.0)};
  CHECK_THROWS_AS(qpo_update(s, b, c), OffPolicyBatchError);
  CHECK_THROWS_AS(reinforce_update(s, b, c), OffPolicyBatchError);
}

TEST_CASE("REINFORCE") {
  const double theta = -0.2, gamma = 0.05;
  SUBCASE("zero returns leave theta") {
    const auto c = sgd_config(Algorithm::reinforce, gamma);
    auto s = state_at(c, theta, 0.0);
    reinforce_update(s, std::vector<Trajectory>{one_step(theta, 0.7, 0.0), one_step(theta, -1.0, 0.0)}, c);
    CHECK(theta_of(s) == theta);
  }
  SUBCASE("hand-computed update with and without the mean baseline") {
    const std::vector<Trajectory> b{one_step(theta, 0.7, 3.0), one_step(theta, -1.0, -1.0)};
    auto c = sgd_config(Algorithm::reinforce, gamma);
    c.mean_baseline = false;
    auto s = state_at(c, theta, 0.0);
    reinforce_update(s, b, c);
    const double d = 0.5 * (3.0 * hand_score(theta, 0.7) - 1.0 * hand_score(theta, -1.0));
    CHECK(theta_of(s) == doctest::Approx(theta + gamma * d).epsilon(1e-14));

    c.mean_baseline = true;
    auto s2 = state_at(c, theta, 0.0);
    reinforce_update(s2, b, c);
    const double d2 = 0.5 * (2.0 * hand_score(theta, 0.7) - 2.0 * hand_score(theta, -1.0));
    CHECK(theta_of(s2) == doctest::Approx(theta + gamma * d2).epsilon(1e-14));
  }
  SUBCASE("a single episode keeps its return") {
    auto c = sgd_config(Algorithm::reinforce, gamma);
    c.batch = 1;
    auto s = state_at(c, theta, 0.0);
    reinforce_update(s, std::vector<Trajectory>{one_step(theta, 0.7, 3.0)}, c);
    CHECK(theta_of(s) == doctest::Approx(theta + gamma * 3.0 * hand_score(theta, 0.7)).epsilon(1e-14));
  }
}

TEST_CASE("REINFORCE and median QPO find the bandit optimum") {
  // R = -(a - 1)^2 + N(0, 1): the mean and (symmetric-noise) median both peak at theta = 1.
  for (auto algo : {Algorithm::reinforce, Algorithm::qpo}) {
    AlgoConfig c;
    c.algorithm = algo;
    c.alpha = 0.5;
    c.batch = 10;
    c.gamma.mode = GammaSchedule::Mode::power;
    c.gamma.initial = algo == Algorithm::qpo ? 5.0 : 2.0;
    c.gamma.offset = 10.0;
    c.projection.bound = 2.0;
    const MlpSpec spec{{0, 1}};
    auto s = make_state(c, PolicyNetwork(spec, GaussianHead{1, 1e-2, 0.1}, ParamVector(spec.make_layout(), {-1.0})),
                        BetaSchedule{}, 1);
    AnalyticBandit env(BanditConfig{1.0, 1.0});
    Rng rng(3);
    for (int k = 0; k < 3000; ++k) {
      std::vector<Trajectory> b;
      for (int n = 0; n < 10; ++n) b.push_back(rollout(env, s.policy, rng));
      update(s, b, c);
      REQUIRE(inside(s.policy.params().values(), c.projection));
    }
    CHECK(std::abs(theta_of(s) - 1.0) < 0.1);
  }
}

TEST_CASE("importance ratios") {
  SUBCASE("on-policy ratios are exactly one") {
    const auto pol = small_zero_mean_policy(4);
    for (const auto& t : zero_mean_batch(pol, 5, 9)) {
      const auto r = importance_ratio(t, pol);
      for (double x : r.per_step) CHECK(x == 1.0);
      CHECK(r.product == 1.0);
    }
  }
  SUBCASE("categorical single step gives p / q") {
    const MlpSpec spec{{0, 3}};
    const PolicyNetwork behavior(spec, CategoricalHead{3}, ParamVector(spec.make_layout(), {0.0, 1.0, -1.0}));
    const PolicyNetwork target(spec, CategoricalHead{3}, ParamVector(spec.make_layout(), {0.5, 0.5, 0.5}));
    Trajectory t;
    const Action a{1, {}};
    t.steps.push_back(TrajectoryStep{{}, a, behavior.log_prob({}, a), 0.0});
    const double qb = std::exp(1.0) / (1.0 + std::exp(1.0) + std::exp(-1.0));
    const double pt = 1.0 / 3.0;
    const auto r = importance_ratio(t, target);
    CHECK(r.product == doctest::Approx(pt / qb).epsilon(1e-14));
  }
  SUBCASE("product is the product of per-step ratios") {
    const auto behavior = small_zero_mean_policy(4);
    const auto target = small_zero_mean_policy(5);
    for (const auto& t : zero_mean_batch(behavior, 5, 3)) {
      const auto r = importance_ratio(t, target);
      double p = 1.0;
      for (std::size_t i = 0; i < t.steps.size(); ++i) {
        const double by_hand = std::exp(target.log_prob(t.steps[i].state, t.steps[i].action) - t.steps[i].log_prob);
        CHECK(r.per_step[i] == doctest::Approx(by_hand).epsilon(1e-14));
        p *= by_hand;
      }
      CHECK(r.product == doctest::Approx(p).epsilon(1e-12));
    }
  }
  SUBCASE("trajectory ratios are unbiased for a nearby target") {
    const auto behavior = small_zero_mean_policy(4);
    auto target = behavior;
    auto v = target.mutable_params().mutable_values();
    std::mt19937_64 rng(8);
    std::normal_distribution<double> z(0.0, 0.05);
    for (auto& x : v) x += z(rng);
    const auto batch = zero_mean_batch(behavior, 10000, 21);
    std::vector<double> rho;
    for (const auto& t : batch) rho.push_back(importance_ratio(t, target).product);
    const auto [m, se] = oracle::mean_se(rho);
    CHECK(std::abs(m - 1.0) < 3.0 * se);
  }
}

TEST_CASE("clipped term matches a scalar enumeration") {
  const double eps = 0.2;
  for (double rho : {0.0, 0.5, 0.79, 0.8, 0.95, 1.0, 1.1, 1.2, 1.21, 1.5, 3.0}) {
    for (double a : {-2.0, -0.5, 0.0, 0.5, 2.0}) {
      CHECK(clipped_term(rho, a, eps) == enumerate_min(rho, a, eps));
      const bool expect_unclipped = rho * a <= enumerate_min(rho, a, eps);
      CHECK(unclipped_branch(rho, a, eps) == expect_unclipped);
    }
  }
  // Inside [1 - eps, 1 + eps] the clip is inactive.
  CHECK(clipped_term(1.1, -3.0, eps) == 1.1 * -3.0);
  // A < 0, rho < 1 - eps: rho A > (1 - eps) A, so the clipped branch is the min.
  CHECK(clipped_term(0.5, -1.0, eps) == 0.8 * -1.0);
  CHECK_FALSE(unclipped_branch(0.5, -1.0, eps));
  // A < 0, rho > 1 + eps: rho A is the min and keeps its gradient.
  CHECK(clipped_term(1.5, -1.0, eps) == -1.5);
  CHECK(unclipped_branch(1.5, -1.0, eps));
  // A > 0 mirror cases.
  CHECK(clipped_term(0.5, 1.0, eps) == 0.5);
  CHECK(clipped_term(1.5, 1.0, eps) == 1.2);
}

TEST_CASE("clipped surrogate") {
  const auto behavior = small_zero_mean_policy(4);
  const auto batch = zero_mean_batch(behavior, 6, 17);
  Advantages adv(batch.size());
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z(0.0, 1.0);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    for (std::size_t t = 0; t < batch[n].steps.size(); ++t) adv[n].push_back(z(rng));
  }
  auto unclipped_objective = [&](const PolicyNetwork& target) {
    double obj = 0.0;
    for (std::size_t n = 0; n < batch.size(); ++n) {
      for (std::size_t t = 0; t < batch[n].steps.size(); ++t) {
        const auto& s = batch[n].steps[t];
        obj += std::exp(target.log_prob(s.state, s.action) - s.log_prob) * adv[n][t];
      }
    }
    return obj / static_cast<double>(batch.size());
  };

  SUBCASE("rho = 1: objective is the mean episode advantage sum, gradient the weighted score") {
    const auto r = clipped_surrogate(batch, behavior, adv, 0.2);
    double obj = 0.0;
    Gradient g = behavior.zero_gradient();
    for (std::size_t n = 0; n < batch.size(); ++n) {
      for (std::size_t t = 0; t < batch[n].steps.size(); ++t) {
        obj += adv[n][t];
        g.add_scaled(behavior.grad_log_prob(batch[n].steps[t].state, batch[n].steps[t].action), adv[n][t]);
      }
    }
    g *= 1.0 / static_cast<double>(batch.size());
    CHECK(r.objective == doctest::Approx(obj / static_cast<double>(batch.size())).epsilon(1e-13));
    CHECK(oracle::max_rel_err(r.gradient.values(), g.values()) < 1e-12);
  }
  SUBCASE("clip inactive: equals the unclipped surrogate and its finite-difference gradient") {
    auto target = behavior;
    auto v = target.mutable_params().mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += 1e-3 * std::sin(static_cast<double>(i));
    const auto r = clipped_surrogate(batch, target, adv, 0.9);
    CHECK(r.objective == doctest::Approx(unclipped_objective(target)).epsilon(1e-12));
    const auto fd = finite_diff(
        [&](const ParamVector& p) {
          PolicyNetwork t2(target.spec(), target.head(), p);
          return unclipped_objective(t2);
        },
        target.params(), 1e-6);
    CHECK(oracle::max_rel_err(r.gradient.values(), fd.values()) < 1e-4);
  }
  SUBCASE("fully clipped terms carry no gradient") {
    Advantages pos(batch.size());
    for (std::size_t n = 0; n < batch.size(); ++n) pos[n].assign(batch[n].steps.size(), 1.0);
    auto target = behavior;
    auto v = target.mutable_params().mutable_values();
    for (auto& x : v) x *= 3.0;  // far from the behavior policy
    const auto r = clipped_surrogate(batch, target, pos, 0.2);
    double expected = 0.0;
    bool any_clipped = false;
    Gradient g = target.zero_gradient();
    for (std::size_t n = 0; n < batch.size(); ++n) {
      for (const auto& s : batch[n].steps) {
        const double rho = std::exp(target.log_prob(s.state, s.action) - s.log_prob);
        expected += enumerate_min(rho, 1.0, 0.2);
        if (rho > 1.2) {
          any_clipped = true;
        } else {
          g.add_scaled(target.grad_log_prob(s.state, s.action), rho);
        }
      }
    }
    g *= 1.0 / static_cast<double>(batch.size());
    CHECK(any_clipped);
    CHECK(r.objective == doctest::Approx(expected / static_cast<double>(batch.size())).epsilon(1e-12));
    CHECK(oracle::max_rel_err(r.gradient.values(), g.values()) < 1e-12);
  }
}

TEST_CASE("advantages") {
  const auto pol = small_zero_mean_policy(1);
  auto batch = zero_mean_batch(pol, 4, 5);
  const double q = batch[1].discounted_return;
  const auto a = quantile_advantages(batch, q, nullptr);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const double ind = batch[n].discounted_return <= q ? -1.0 : 0.0;
    for (double x : a[n]) CHECK(x == ind);
  }
  CHECK(a[1][0] == -1.0);

  const auto r = reward_to_go_advantages(batch, 0.5, nullptr);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& st = batch[n].steps;
    CHECK(r[n][2] == st[2].reward);
    CHECK(r[n][1] == doctest::Approx(st[1].reward + 0.5 * st[2].reward));
    CHECK(r[n][0] == doctest::Approx(st[0].reward + 0.5 * st[1].reward + 0.25 * st[2].reward));
  }
}

TEST_CASE("QPPO with one epoch on-policy reproduces the QPO step") {
  const auto pol = small_zero_mean_policy(6);
  const auto batch = zero_mean_batch(pol, 8, 44);
  AlgoConfig c;
  c.batch = 8;
  c.epochs = 1;
  c.gamma.initial = 0.05;
  c.algorithm = Algorithm::qpo;
  auto a = make_state(c, pol, BetaSchedule{}, 1);
  c.algorithm = Algorithm::qppo;
  auto b = make_state(c, pol, BetaSchedule{}, 1);
  qpo_update(a, batch, c);
  qppo_update(b, batch, c);
  CHECK(a.tracker.q() == b.tracker.q());
  CHECK(oracle::max_rel_err(a.policy.params().values(), b.policy.params().values()) < 1e-13);
  CHECK(b.behavior.params().values()[0] == b.policy.params().values()[0]);
}

TEST_CASE("QPPO with an empty indicator keeps theta and raises q each epoch") {
  const auto pol = small_zero_mean_policy(6);
  const auto batch = zero_mean_batch(pol, 4, 45);
  AlgoConfig c;
  c.algorithm = Algorithm::qppo;
  c.batch = 4;
  c.epochs = 3;
  auto s = make_state(c, pol, BetaSchedule{}, 1);
  s.tracker.restore(-100.0, 0, 0, 0.0);
  qppo_update(s, batch, c);
  CHECK(s.last.surrogate == 0.0);
  CHECK(s.policy.params().values()[3] == pol.params().values()[3]);
  CHECK(std::equal(s.policy.params().values().begin(), s.policy.params().values().end(),
                   pol.params().values().begin()));
  CHECK(s.tracker.q() > -100.0);
  CHECK(s.tracker.k() == 3);
}

TEST_CASE("frozen-policy importance tracking equals on-policy tracking") {
  const auto pol = small_zero_mean_policy(2);
  QuantileTracker a(0.1, BetaSchedule{}, 10.0);
  QuantileTracker b(0.1, BetaSchedule{}, 10.0);
  for (std::uint64_t k = 0; k < 200; ++k) {
    const auto batch = zero_mean_batch(pol, 4, 1000 + k);
    std::vector<double> u, rho;
    for (const auto& t : batch) {
      u.push_back(t.discounted_return);
      rho.push_back(importance_ratio(t, pol).product);
    }
    a.update(u);
    b.update_is(u, rho);
    REQUIRE(a.q() == b.q());
  }
}

TEST_CASE("baseline regression") {
  SUBCASE("a perfect constant net is a fixed point") {
    const MlpSpec spec{{2, 3, 1}};
    std::vector<double> w(spec.param_count(), 0.0);
    w.back() = -1.0;
    ValueNetwork net(spec, ParamVector(spec.make_layout(), w));
    const auto pol = small_zero_mean_policy(1);
    const auto batch = zero_mean_batch(pol, 3, 2);
    const double loss = baseline_update(net, batch, 1e9, 0.1);
    CHECK(loss == 0.0);
    CHECK(std::equal(w.begin(), w.end(), net.params().values().begin()));
  }
  SUBCASE("a scalar net moves toward the target mean") {
    const MlpSpec spec{{0, 1}};
    ValueNetwork net(spec, ParamVector(spec.make_layout(), {0.5}));
    const std::vector<std::vector<double>> states(4);
    const std::vector<double> targets{-1.0, 0.0, -1.0, -1.0};
    const double loss = value_regression_step(net, states, targets, 0.1);
    // L(b) = mean (b - y)^2, dL/db = 2 (b - mean y).
    CHECK(loss == doctest::Approx((2.25 + 0.25 + 2.25 + 2.25) / 4.0));
    CHECK(net.params()[0] == doctest::Approx(0.5 - 0.1 * 2.0 * (0.5 + 0.75)).epsilon(1e-15));
  }
  SUBCASE("the regression gradient matches finite differences") {
    const MlpSpec spec{{2, 5, 1}};
    const auto p0 = init_params(spec, 3);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<std::vector<double>> states(7, std::vector<double>(2));
    std::vector<double> targets(7);
    for (auto& s : states) s = {z(rng), z(rng)};
    for (auto& t : targets) t = z(rng);
    auto loss = [&](const ParamVector& p) {
      double l = 0.0;
      for (std::size_t i = 0; i < states.size(); ++i) {
        const double e = oracle::mlp(p.values(), spec.widths, states[i])[0] - targets[i];
        l += e * e;
      }
      return l / static_cast<double>(states.size());
    };
    const auto fd = finite_diff(loss, p0, 1e-6);
    ValueNetwork net(spec, p0);
    const double lr = 1e-3;
    (void)value_regression_step(net, states, targets, lr);
    std::vector<double> g(p0.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (p0[i] - net.params()[i]) / lr;
    CHECK(oracle::max_rel_err(g, fd.values()) < 1e-4);
  }
}

TEST_CASE("every update stays inside Theta") {
  const auto pol = small_zero_mean_policy(6);
  for (auto algo : {Algorithm::qpo, Algorithm::qppo, Algorithm::reinforce, Algorithm::ppo}) {
    AlgoConfig c;
    c.algorithm = algo;
    c.batch = 4;
    c.gamma.initial = 50.0;
    c.projection.bound = 0.3;
    c.baseline = true;
    c.discount = 1.0;
    auto s = make_state(c, pol, BetaSchedule{}, 1);
    for (std::uint64_t k = 0; k < 5; ++k) {
      update(s, zero_mean_batch(s.policy, 4, 70 + k), c);
      CHECK(inside(s.policy.params().values(), c.projection));
    }
  }
}

TEST_CASE("Adam first step moves each coordinate by gamma along the sign") {
  AlgoConfig c;
  c.optimizer = OptimizerKind::adam;
  const MlpSpec spec{{0, 2}};
  auto s = make_state(c, PolicyNetwork(spec, GaussianHead{2, 1e-2, 1.0}, ParamVector(spec.make_layout(), {0.0, 0.0})),
                      BetaSchedule{}, 1);
  ascend(s, c, Gradient(spec.make_layout(), {3.0, -0.01}), 0.1);
  CHECK(s.policy.params()[0] == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(s.policy.params()[1] == doctest::Approx(-0.1).epsilon(1e-5));
  CHECK_THROWS(ascend(s, c, Gradient(spec.make_layout(), {std::nan(""), 0.0}), 0.1));
}

TEST_CASE("config validation") {
  AlgoConfig c;
  c.clip = 1.0;
  CHECK_THROWS(c.validate());
  c = AlgoConfig{};
  c.density = DensityMode::kde;
  CHECK_THROWS(c.validate());
  c.batch = 2;
  CHECK_NOTHROW(c.validate());
  c = AlgoConfig{};
  c.alpha = 0.0;
  CHECK_THROWS(c.validate());
  CHECK(algorithm_from_string("qppo") == Algorithm::qppo);
  CHECK(to_string(Algorithm::reinforce) == "reinforce");
  CHECK_THROWS(algorithm_from_string("sac"));
  CHECK(density_mode_from_string(to_string(DensityMode::kde)) == DensityMode::kde);
  CHECK(optimizer_from_string("adam") == OptimizerKind::adam);
}
