#include "qpo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace qpo {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

// Diagonal normal log-density of `x` given the raw head outputs
// [means(dim) | raw scales(dim)] or means alone when the std is fixed.
// When `seed` is non-null it receives d log p / d outputs.
double diag_normal_log_prob(std::span<const double> out, std::span<const double> x, std::size_t dim,
                            double min_std, std::optional<double> fixed_std, std::vector<double>* seed) {
  if (seed) seed->assign(out.size(), 0.0);
  double lp = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double mu = out[i];
    double sd = 0.0;
    double dsd_draw = 0.0;
    if (fixed_std) {
      sd = *fixed_std;
    } else {
      const double raw = out[dim + i];
      sd = softplus(raw) + min_std;
      dsd_draw = sigmoid(raw);
    }
    const double z = (x[i] - mu) / sd;
    lp += -0.5 * kLogTwoPi - std::log(sd) - 0.5 * z * z;
    if (seed) {
      (*seed)[i] = z / sd;
      if (!fixed_std) (*seed)[dim + i] = (-1.0 / sd + z * z / sd) * dsd_draw;
    }
  }
  return lp;
}

void check_continuous(const Action& action, std::size_t dim) {
  if (action.values.size() != dim) {
    throw InvalidActionError("continuous action has " + std::to_string(action.values.size()) +
                             " components, head expects " + std::to_string(dim));
  }
  for (double v : action.values) {
    if (!std::isfinite(v)) throw InvalidActionError("continuous action contains a non-finite value");
  }
}

}  // namespace

double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<double> softmax(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
  return p;
}

std::size_t head_output_width(const PolicyHead& head) {
  return std::visit(overloaded{
                        [](const CategoricalHead& h) { return h.categories; },
                        [](const GaussianHead& h) { return h.fixed_std ? h.dim : 2 * h.dim; },
                        [](const SimplexHead& h) { return 2 * h.dim; },
                    },
                    head);
}

std::string head_name(const PolicyHead& head) {
  return std::visit(overloaded{
                        [](const CategoricalHead&) { return std::string("categorical"); },
                        [](const GaussianHead&) { return std::string("gaussian"); },
                        [](const SimplexHead&) { return std::string("simplex"); },
                    },
                    head);
}

PolicyNetwork::PolicyNetwork(MlpSpec spec, PolicyHead head, ParamVector params)
    : spec_(std::move(spec)), head_(std::move(head)), params_(std::move(params)) {
  spec_.validate();
  if (spec_.output_size() != head_output_width(head_)) {
    throw ShapeError("network output width " + std::to_string(spec_.output_size()) + " does not match " +
                     head_name(head_) + " head width " + std::to_string(head_output_width(head_)));
  }
  if (params_.size() != spec_.param_count()) throw ShapeError("parameters do not match the MLP layout");
  std::visit(overloaded{
                 [](const CategoricalHead& h) {
                   if (h.categories < 1) throw std::invalid_argument("categorical head needs K >= 1");
                 },
                 [](const GaussianHead& h) {
                   if (!(h.min_std > 0.0)) throw std::invalid_argument("gaussian min_std must be positive");
                   if (h.fixed_std && !(*h.fixed_std > 0.0)) {
                     throw std::invalid_argument("gaussian fixed_std must be positive");
                   }
                 },
                 [](const SimplexHead& h) {
                   if (!(h.min_std > 0.0)) throw std::invalid_argument("simplex min_std must be positive");
                 },
             },
             head_);
}

PolicyNetwork::PolicyNetwork(MlpSpec spec, PolicyHead head, std::uint64_t init_seed)
    : PolicyNetwork(spec, std::move(head), init_params(spec, init_seed)) {}

std::vector<double> PolicyNetwork::head_outputs(std::span<const double> state) const {
  auto out = evaluate(params_, spec_, state);
  for (double v : out) {
    if (!std::isfinite(v)) {
      throw NonFiniteOutputError("policy network produced a non-finite output",
                                 std::vector<double>(state.begin(), state.end()));
    }
  }
  return out;
}

ActionSample PolicyNetwork::sample(std::span<const double> state, Rng& rng) const {
  const auto out = head_outputs(state);
  ActionSample s;
  std::visit(overloaded{
                 [&](const CategoricalHead& h) {
                   const auto p = softmax(out);
                   const double u = uniform01(rng);
                   double cdf = 0.0;
                   std::size_t k = 0;
                   for (; k + 1 < h.categories; ++k) {
                     cdf += p[k];
                     if (u < cdf) break;
                   }
                   s.action.category = static_cast<int>(k);
                 },
                 [&](const GaussianHead& h) {
                   s.action.values.resize(h.dim);
                   for (std::size_t i = 0; i < h.dim; ++i) {
                     const double sd = h.fixed_std ? *h.fixed_std : softplus(out[h.dim + i]) + h.min_std;
                     s.action.values[i] = out[i] + sd * standard_normal(rng);
                   }
                 },
                 [&](const SimplexHead& h) {
                   s.action.values.resize(h.dim);
                   for (std::size_t i = 0; i < h.dim; ++i) {
                     const double sd = softplus(out[h.dim + i]) + h.min_std;
                     s.action.values[i] = out[i] + sd * standard_normal(rng);
                   }
                 },
             },
             head_);
  s.log_prob = log_prob(state, s.action);
  return s;
}

namespace {

double head_log_prob(const PolicyHead& head, std::span<const double> out, const Action& action,
                     std::vector<double>* seed) {
  return std::visit(
      overloaded{
          [&](const CategoricalHead& h) {
            if (action.category < 0 || static_cast<std::size_t>(action.category) >= h.categories) {
              throw InvalidActionError("category " + std::to_string(action.category) + " outside [0, " +
                                       std::to_string(h.categories) + ")");
            }
            const double lse = log_sum_exp(out);
            if (seed) {
              seed->resize(out.size());
              for (std::size_t i = 0; i < out.size(); ++i) (*seed)[i] = -std::exp(out[i] - lse);
              (*seed)[static_cast<std::size_t>(action.category)] += 1.0;
            }
            return out[static_cast<std::size_t>(action.category)] - lse;
          },
          [&](const GaussianHead& h) {
            check_continuous(action, h.dim);
            return diag_normal_log_prob(out, action.values, h.dim, h.min_std, h.fixed_std, seed);
          },
          [&](const SimplexHead& h) {
            check_continuous(action, h.dim);
            return diag_normal_log_prob(out, action.values, h.dim, h.min_std, std::nullopt, seed);
          },
      },
      head);
}

}  // namespace

double PolicyNetwork::log_prob(std::span<const double> state, const Action& action) const {
  const auto out = head_outputs(state);
  return head_log_prob(head_, out, action, nullptr);
}

Gradient PolicyNetwork::grad_log_prob(std::span<const double> state, const Action& action) const {
  Gradient g = zero_gradient();
  accumulate_grad_log_prob(state, action, 1.0, g);
  return g;
}

double PolicyNetwork::accumulate_grad_log_prob(std::span<const double> state, const Action& action,
                                               double scale, Gradient& grad) const {
  auto fwd = forward(params_, spec_, state);
  for (double v : fwd.output) {
    if (!std::isfinite(v)) {
      throw NonFiniteOutputError("policy network produced a non-finite output",
                                 std::vector<double>(state.begin(), state.end()));
    }
  }
  std::vector<double> seed;
  const double lp = head_log_prob(head_, fwd.output, action, &seed);
  if (scale != 0.0) accumulate_backward(fwd.tape, seed, scale, grad);
  return lp;
}

std::vector<double> PolicyNetwork::env_action(const Action& action) const {
  return std::visit(overloaded{
                        [&](const CategoricalHead&) {
                          return std::vector<double>{static_cast<double>(action.category)};
                        },
                        [&](const GaussianHead&) { return action.values; },
                        [&](const SimplexHead&) { return softmax(action.values); },
                    },
                    head_);
}

nlohmann::json head_to_json(const PolicyHead& head) {
  return std::visit(overloaded{
                        [](const CategoricalHead& h) {
                          return nlohmann::json{{"kind", "categorical"}, {"categories", h.categories}};
                        },
                        [](const GaussianHead& h) {
                          nlohmann::json j{{"kind", "gaussian"}, {"dim", h.dim}, {"min_std", h.min_std}};
                          if (h.fixed_std) j["fixed_std"] = *h.fixed_std;
                          return j;
                        },
                        [](const SimplexHead& h) {
                          return nlohmann::json{{"kind", "simplex"}, {"dim", h.dim}, {"min_std", h.min_std}};
                        },
                    },
                    head);
}

PolicyHead head_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "categorical") return CategoricalHead{j.at("categories").get<std::size_t>()};
  if (kind == "gaussian") {
    GaussianHead h{j.at("dim").get<std::size_t>(), j.at("min_std").get<double>(), std::nullopt};
    if (j.contains("fixed_std")) h.fixed_std = j.at("fixed_std").get<double>();
    return h;
  }
  if (kind == "simplex") return SimplexHead{j.at("dim").get<std::size_t>(), j.at("min_std").get<double>()};
  throw std::invalid_argument("unknown policy head kind '" + kind + "'");
}

nlohmann::json policy_to_json(const PolicyNetwork& policy) {
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& b : policy.params().layout().blocks()) {
    layout.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
  }
  const auto v = policy.params().values();
  return nlohmann::json{{"format", "qpo-policy"},
                        {"version", 1},
                        {"mlp", policy.spec().widths},
                        {"head", head_to_json(policy.head())},
                        {"layout", layout},
                        {"params", std::vector<double>(v.begin(), v.end())}};
}

PolicyNetwork policy_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "qpo-policy") {
    throw std::invalid_argument("not a qpo-policy document");
  }
  if (j.at("version").get<int>() != 1) throw std::invalid_argument("unsupported policy checkpoint version");
  MlpSpec spec{j.at("mlp").get<std::vector<std::size_t>>()};
  auto layout = spec.make_layout();
  const auto& stored = j.at("layout");
  if (stored.size() != layout->blocks().size()) throw ShapeError("checkpoint layout does not match mlp widths");
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const auto& b = layout->block(i);
    if (stored[i].at("name").get<std::string>() != b.name || stored[i].at("rows").get<std::size_t>() != b.rows ||
        stored[i].at("cols").get<std::size_t>() != b.cols) {
      throw ShapeError("checkpoint layout block '" + b.name + "' does not match mlp widths");
    }
  }
  ParamVector params(layout, j.at("params").get<std::vector<double>>());
  return PolicyNetwork(std::move(spec), head_from_json(j.at("head")), std::move(params));
}

}  // namespace qpo
