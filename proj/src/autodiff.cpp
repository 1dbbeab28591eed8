#include "qpo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace qpo {

const ParamBlock& ParamLayout::add(std::string name, std::size_t rows, std::size_t cols) {
  blocks_.push_back(ParamBlock{std::move(name), rows, cols, total_});
  total_ += rows * cols;
  return blocks_.back();
}

const ParamBlock* ParamLayout::find(const std::string& name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

bool ParamLayout::operator==(const ParamLayout& other) const {
  if (blocks_.size() != other.blocks_.size()) return false;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& a = blocks_[i];
    const auto& b = other.blocks_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

ParamVector::ParamVector(LayoutPtr layout)
    : layout_(std::move(layout)), values_(layout_->total_size(), 0.0) {}

ParamVector::ParamVector(LayoutPtr layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_->total_size()) {
    throw ShapeError("parameter count " + std::to_string(values_.size()) +
                     " does not match layout size " + std::to_string(layout_->total_size()));
  }
  if (!all_finite()) throw std::invalid_argument("parameter vector contains non-finite values");
}

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Gradient::Gradient(LayoutPtr layout)
    : layout_(std::move(layout)), values_(layout_->total_size(), 0.0) {}

Gradient::Gradient(LayoutPtr layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_->total_size()) {
    throw ShapeError("gradient size does not match layout");
  }
}

Gradient& Gradient::operator+=(const Gradient& other) {
  add_scaled(other, 1.0);
  return *this;
}

Gradient& Gradient::operator*=(double s) {
  for (auto& v : values_) v *= s;
  return *this;
}

void Gradient::add_scaled(const Gradient& other, double scale) {
  if (other.size() != size()) throw ShapeError("gradient size mismatch");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
}

void Gradient::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

double Gradient::max_abs() const {
  double m = 0.0;
  for (double v : values_) m = std::max(m, std::abs(v));
  return m;
}

double Gradient::norm() const {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return std::sqrt(s);
}

bool Gradient::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void MlpSpec::validate() const {
  if (widths.size() < 2) throw ShapeError("an MLP needs at least an input and an output width");
  for (std::size_t i = 1; i < widths.size(); ++i) {
    if (widths[i] == 0) throw ShapeError("layer widths after the input must be positive");
  }
}

std::size_t MlpSpec::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l + 1] * widths[l] + widths[l + 1];
  return n;
}

LayoutPtr MlpSpec::make_layout() const {
  validate();
  auto layout = std::make_shared<ParamLayout>();
  for (std::size_t l = 0; l < layer_count(); ++l) {
    layout->add("layer" + std::to_string(l) + ".weight", widths[l + 1], widths[l]);
    layout->add("layer" + std::to_string(l) + ".bias", widths[l + 1], 1);
  }
  return layout;
}

ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
  auto layout = spec.make_layout();
  std::vector<double> values(layout->total_size());
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(spec.widths[l], 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t b = 2 * l; b < 2 * l + 2; ++b) {
      const auto& block = layout->block(b);
      for (std::size_t i = 0; i < block.size(); ++i) values[block.offset + i] = dist(rng);
    }
  }
  return ParamVector(std::move(layout), std::move(values));
}

namespace {

void check_shapes(const ParamVector& params, const MlpSpec& spec, std::span<const double> input) {
  spec.validate();
  if (params.size() != spec.param_count()) {
    throw ShapeError("parameters do not match the MLP layout");
  }
  if (input.size() != spec.input_size()) {
    throw ShapeError("input length " + std::to_string(input.size()) + " does not match input width " +
                     std::to_string(spec.input_size()));
  }
}

// y = W x + b, W row-major (rows = out, cols = in); weights at w_off, bias right after.
void affine(std::span<const double> p, std::size_t w_off, std::size_t out, std::size_t in,
            std::span<const double> x, std::vector<double>& y) {
  y.assign(out, 0.0);
  const double* w = p.data() + w_off;
  const double* b = w + out * in;
  for (std::size_t r = 0; r < out; ++r) {
    double acc = b[r];
    const double* row = w + r * in;
    for (std::size_t c = 0; c < in; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
}

}  // namespace

bool Tape::is_stale() const {
  return params_ == nullptr || params_->generation() != generation_;
}

ForwardResult forward(const ParamVector& params, const MlpSpec& spec, std::span<const double> input) {
  check_shapes(params, spec, input);
  Tape tape;
  tape.params_ = &params;
  tape.generation_ = params.generation();
  tape.spec_ = spec;
  tape.nodes_.reserve(2 * spec.layer_count() + 1);
  tape.nodes_.push_back(TapeNode{TapeOp::input, 0, 0, std::vector<double>(input.begin(), input.end())});

  const auto p = params.values();
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t in = spec.widths[l];
    const std::size_t out = spec.widths[l + 1];
    TapeNode node{TapeOp::affine, tape.nodes_.size() - 1, l, {}};
    affine(p, offset, out, in, tape.nodes_.back().value, node.value);
    offset += out * in + out;
    tape.nodes_.push_back(std::move(node));
    if (l + 1 < spec.layer_count()) {
      TapeNode act{TapeOp::tanh, tape.nodes_.size() - 1, 0, tape.nodes_.back().value};
      for (auto& v : act.value) v = std::tanh(v);
      tape.nodes_.push_back(std::move(act));
    }
  }
  std::vector<double> out = tape.nodes_.back().value;
  return ForwardResult{std::move(out), std::move(tape)};
}

std::vector<double> evaluate(const ParamVector& params, const MlpSpec& spec, std::span<const double> input) {
  check_shapes(params, spec, input);
  const auto p = params.values();
  std::vector<double> x(input.begin(), input.end());
  std::vector<double> y;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t in = spec.widths[l];
    const std::size_t out = spec.widths[l + 1];
    affine(p, offset, out, in, x, y);
    offset += out * in + out;
    if (l + 1 < spec.layer_count()) {
      for (auto& v : y) v = std::tanh(v);
    }
    std::swap(x, y);
  }
  return x;
}

Gradient backward(const Tape& tape, std::span<const double> output_seed) {
  if (tape.is_stale()) throw StaleTapeError("tape is stale: parameters changed after forward");
  Gradient grad(tape.params_->layout_ptr());
  accumulate_backward(tape, output_seed, 1.0, grad);
  return grad;
}

void accumulate_backward(const Tape& tape, std::span<const double> output_seed, double scale,
                         Gradient& grad) {
  if (tape.is_stale()) throw StaleTapeError("tape is stale: parameters changed after forward");
  if (output_seed.size() != tape.output().size()) {
    throw ShapeError("seed length does not match network output");
  }
  if (grad.size() != tape.params_->size()) throw ShapeError("gradient does not match parameters");

  const MlpSpec& spec = tape.spec_;
  const auto p = tape.params_->values();
  auto g = grad.values();

  std::vector<std::size_t> layer_offset(spec.layer_count());
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    layer_offset[l] = offset;
    offset += spec.widths[l + 1] * spec.widths[l] + spec.widths[l + 1];
  }

  // adjoint of the current node, walking the tape backwards
  std::vector<double> adj(output_seed.begin(), output_seed.end());
  for (auto& a : adj) a *= scale;
  std::vector<double> next;
  for (std::size_t id = tape.nodes_.size() - 1; id > 0; --id) {
    const TapeNode& node = tape.nodes_[id];
    const TapeNode& src = tape.nodes_[node.source];
    switch (node.op) {
      case TapeOp::tanh: {
        next.resize(adj.size());
        for (std::size_t i = 0; i < adj.size(); ++i) {
          const double y = node.value[i];
          next[i] = adj[i] * (1.0 - y * y);
        }
        break;
      }
      case TapeOp::affine: {
        const std::size_t in = spec.widths[node.layer];
        const std::size_t out = spec.widths[node.layer + 1];
        const std::size_t w_off = layer_offset[node.layer];
        const std::size_t b_off = w_off + out * in;
        const double* w = p.data() + w_off;
        next.assign(in, 0.0);
        for (std::size_t r = 0; r < out; ++r) {
          const double a = adj[r];
          g[b_off + r] += a;
          if (a == 0.0) continue;
          double* gw = g.data() + w_off + r * in;
          const double* row = w + r * in;
          for (std::size_t c = 0; c < in; ++c) {
            gw[c] += a * src.value[c];
            next[c] += a * row[c];
          }
        }
        break;
      }
      case TapeOp::input:
        break;
    }
    std::swap(adj, next);
  }
}

Gradient finite_diff(const std::function<double(const ParamVector&)>& f, const ParamVector& params,
                     double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  ParamVector probe = params;
  std::vector<double> out(params.size());
  std::vector<std::size_t> bad;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    probe.set(i, orig + step);
    const double up = f(probe);
    probe.set(i, orig - step);
    const double down = f(probe);
    probe.set(i, orig);
    if (!std::isfinite(up) || !std::isfinite(down)) {
      bad.push_back(i);
      out[i] = std::nan("");
      continue;
    }
    out[i] = (up - down) / (2.0 * step);
  }
  if (!bad.empty()) {
    std::ostringstream msg;
    msg << "non-finite function value at coordinates:";
    for (auto i : bad) msg << ' ' << i;
    throw std::domain_error(msg.str());
  }
  return Gradient(params.layout_ptr(), std::move(out));
}

}  // namespace qpo
