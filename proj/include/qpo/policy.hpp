#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "qpo/autodiff.hpp"
#include "qpo/rng.hpp"

namespace qpo {

/// Softmax over K logits.
struct CategoricalHead {
  std::size_t categories = 2;
  bool operator==(const CategoricalHead&) const = default;
};

/// Diagonal normal. The net emits `dim` means followed by `dim` raw scales,
/// std = softplus(raw) + min_std. With fixed_std set, the net emits only the
/// means and every coordinate uses that std.
struct GaussianHead {
  std::size_t dim = 1;
  double min_std = 1e-2;
  std::optional<double> fixed_std;
  bool operator==(const GaussianHead&) const = default;
};

/// Portfolio weights. The net emits `dim` logit means and `dim` raw scales;
/// a sample draws z ~ N(mean, std^2) in logit space and the environment
/// receives softmax(z). The log-density is the Gaussian density of z, so the
/// stored action is z, not the weights.
struct SimplexHead {
  std::size_t dim = 2;
  double min_std = 1e-2;
  bool operator==(const SimplexHead&) const = default;
};

using PolicyHead = std::variant<CategoricalHead, GaussianHead, SimplexHead>;

std::size_t head_output_width(const PolicyHead& head);
std::string head_name(const PolicyHead& head);

/// Categorical actions use `category`; continuous heads use `values`.
struct Action {
  int category = -1;
  std::vector<double> values;

  bool operator==(const Action&) const = default;
};

struct ActionSample {
  Action action;
  double log_prob = 0.0;
};

class NonFiniteOutputError : public std::runtime_error {
 public:
  NonFiniteOutputError(const std::string& what, std::vector<double> state)
      : std::runtime_error(what), state_(std::move(state)) {}
  const std::vector<double>& state() const { return state_; }

 private:
  std::vector<double> state_;
};

class InvalidActionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

double softplus(double x);
double sigmoid(double x);
std::vector<double> softmax(std::span<const double> logits);

/// pi(a|s; theta): an MLP body and a distribution head.
class PolicyNetwork {
 public:
  PolicyNetwork(MlpSpec spec, PolicyHead head, ParamVector params);
  /// Fresh network with seeded uniform fan-in initialization.
  PolicyNetwork(MlpSpec spec, PolicyHead head, std::uint64_t init_seed);

  const MlpSpec& spec() const { return spec_; }
  const PolicyHead& head() const { return head_; }
  const ParamVector& params() const { return params_; }
  ParamVector& mutable_params() { return params_; }
  std::size_t state_size() const { return spec_.input_size(); }

  ActionSample sample(std::span<const double> state, Rng& rng) const;
  double log_prob(std::span<const double> state, const Action& action) const;
  Gradient grad_log_prob(std::span<const double> state, const Action& action) const;

  /// grad += scale * grad log pi(a|s); returns log pi(a|s).
  double accumulate_grad_log_prob(std::span<const double> state, const Action& action, double scale,
                                  Gradient& grad) const;

  /// Maps a policy-space action onto what an environment consumes:
  /// categorical -> {index}, gaussian -> values, simplex -> softmax(values).
  std::vector<double> env_action(const Action& action) const;

  Gradient zero_gradient() const { return Gradient(params_.layout_ptr()); }

 private:
  std::vector<double> head_outputs(std::span<const double> state) const;

  MlpSpec spec_;
  PolicyHead head_;
  ParamVector params_;
};

/// Policy checkpoint: {"format":"qpo-policy","version":1,"mlp":[..],"head":{..},
/// "layout":[{"name","rows","cols"}..],"params":[..]}.
nlohmann::json policy_to_json(const PolicyNetwork& policy);
PolicyNetwork policy_from_json(const nlohmann::json& j);

nlohmann::json head_to_json(const PolicyHead& head);
PolicyHead head_from_json(const nlohmann::json& j);

}  // namespace qpo
