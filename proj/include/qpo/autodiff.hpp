#pragma once

// Reverse-mode differentiation for small dense MLPs.
//
// A network is a stack of affine layers with tanh between them and a linear
// output. forward() evaluates it and records a Tape; backward() replays the
// tape in reverse to get d(seed . output)/d(params). The tape keeps a pointer
// to the ParamVector it was built from and refuses to run if the parameters
// were mutated in between.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qpo {

struct ParamBlock {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return rows * cols; }
};

class ParamLayout {
 public:
  ParamLayout() = default;

  const ParamBlock& add(std::string name, std::size_t rows, std::size_t cols);

  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::size_t total_size() const { return total_; }
  const ParamBlock& block(std::size_t i) const { return blocks_.at(i); }
  const ParamBlock* find(const std::string& name) const;

  bool operator==(const ParamLayout& other) const;

 private:
  std::vector<ParamBlock> blocks_;
  std::size_t total_ = 0;
};

using LayoutPtr = std::shared_ptr<const ParamLayout>;

/// Flat parameter storage with a layout descriptor. Every mutable access
/// bumps a generation counter, which lets tapes detect stale parameters.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(LayoutPtr layout);
  ParamVector(LayoutPtr layout, std::vector<double> values);

  std::size_t size() const { return values_.size(); }
  const ParamLayout& layout() const { return *layout_; }
  const LayoutPtr& layout_ptr() const { return layout_; }

  std::span<const double> values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> mutable_values() {
    ++generation_;
    return values_;
  }
  void set(std::size_t i, double v) {
    ++generation_;
    values_.at(i) = v;
  }
  std::uint64_t generation() const { return generation_; }

  bool all_finite() const;

 private:
  LayoutPtr layout_;
  std::vector<double> values_;
  std::uint64_t generation_ = 0;
};

/// d(scalar)/d(params), laid out exactly like the ParamVector it refers to.
class Gradient {
 public:
  Gradient() = default;
  explicit Gradient(LayoutPtr layout);
  Gradient(LayoutPtr layout, std::vector<double> values);

  std::size_t size() const { return values_.size(); }
  const ParamLayout& layout() const { return *layout_; }
  const LayoutPtr& layout_ptr() const { return layout_; }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  Gradient& operator+=(const Gradient& other);
  Gradient& operator*=(double s);
  /// this += scale * other
  void add_scaled(const Gradient& other, double scale);
  void set_zero();

  double max_abs() const;
  double norm() const;
  bool all_finite() const;

 private:
  LayoutPtr layout_;
  std::vector<double> values_;
};

/// Layer widths from input to output; hidden layers use tanh, the last layer
/// is linear. widths.size() >= 2. An input width of 0 is allowed and gives a
/// state-independent net (only the first-layer bias matters).
struct MlpSpec {
  std::vector<std::size_t> widths;

  std::size_t input_size() const { return widths.front(); }
  std::size_t output_size() const { return widths.back(); }
  std::size_t layer_count() const { return widths.size() - 1; }

  void validate() const;
  std::size_t param_count() const;
  LayoutPtr make_layout() const;

  bool operator==(const MlpSpec&) const = default;
};

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
ParamVector init_params(const MlpSpec& spec, std::uint64_t seed);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StaleTapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct ForwardResult;

enum class TapeOp { input, affine, tanh };

struct TapeNode {
  TapeOp op = TapeOp::input;
  std::size_t source = 0;  // node id of the operand; unused for input
  std::size_t layer = 0;   // affine only
  std::vector<double> value;
};

/// Record of one forward evaluation. Nodes are stored in evaluation order,
/// so every operand precedes its consumer. The tape must not outlive the
/// ParamVector it was recorded against.
class Tape {
 public:
  const std::vector<TapeNode>& nodes() const { return nodes_; }
  std::span<const double> output() const { return nodes_.back().value; }
  const MlpSpec& spec() const { return spec_; }

  bool is_stale() const;

 private:
  friend ForwardResult forward(const ParamVector&, const MlpSpec&, std::span<const double>);
  friend void accumulate_backward(const Tape&, std::span<const double>, double, Gradient&);
  friend Gradient backward(const Tape&, std::span<const double>);

  const ParamVector* params_ = nullptr;
  std::uint64_t generation_ = 0;
  MlpSpec spec_;
  std::vector<TapeNode> nodes_;
};

struct ForwardResult {
  std::vector<double> output;
  Tape tape;
};

ForwardResult forward(const ParamVector& params, const MlpSpec& spec,
                      std::span<const double> input);

/// Straight-line evaluation without a tape.
std::vector<double> evaluate(const ParamVector& params, const MlpSpec& spec,
                             std::span<const double> input);

Gradient backward(const Tape& tape, std::span<const double> output_seed);

/// grad += scale * d(seed . output)/d(params), without allocating a fresh
/// Gradient per call.
void accumulate_backward(const Tape& tape, std::span<const double> output_seed,
                         double scale, Gradient& grad);

/// Central differences; test oracle only. Throws std::domain_error listing
/// every coordinate whose perturbed evaluations were not finite.
Gradient finite_diff(const std::function<double(const ParamVector&)>& f,
                     const ParamVector& params, double step);

}  // namespace qpo
