#pragma once

// Dense vectors/matrices, a small MLP with hand-written backprop, first-order
// optimizers and a central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cocoon/random.hpp"

namespace cocoon {

using RealVector = std::vector<double>;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require_dim(std::size_t got, std::size_t want, std::string_view what) {
  if (got != want) {
    std::ostringstream os;
    os << what << ": dimension mismatch (got " << got << ", expected " << want << ")";
    throw DimensionError(os.str());
  }
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_dim(b.size(), a.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double distance(std::span<const double> a, std::span<const double> b) {
  require_dim(b.size(), a.size(), "distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline RealVector operator+(const RealVector& a, const RealVector& b) {
  require_dim(b.size(), a.size(), "vector add");
  RealVector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

inline RealVector operator-(const RealVector& a, const RealVector& b) {
  require_dim(b.size(), a.size(), "vector subtract");
  RealVector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

inline RealVector operator*(double s, const RealVector& a) {
  RealVector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = s * a[i];
  return r;
}

// axpy: y += s * x
inline void add_scaled(std::span<double> y, double s, std::span<const double> x) {
  require_dim(x.size(), y.size(), "add_scaled");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
}

/// Row-major dense matrix.
struct RealMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  RealMatrix() = default;
  RealMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }

  bool operator==(const RealMatrix&) const = default;
};

enum class Activation { identity, relu, tanh };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "identity";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
  }
  return z;
}

// Derivative expressed through pre-activation z and post-activation y.
inline double activate_derivative(Activation a, double z, double y) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - y * y;
  }
  return 1.0;
}

struct DenseLayer {
  RealMatrix weights;  // out x in
  RealVector bias;     // out

  std::size_t in_dim() const { return weights.cols; }
  std::size_t out_dim() const { return weights.rows; }
  bool operator==(const DenseLayer&) const = default;
};

/// Multilayer perceptron. The activation applies to every hidden layer; the
/// output layer is always affine.
struct MlpParams {
  std::vector<DenseLayer> layers;
  Activation activation = Activation::relu;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  std::vector<std::size_t> layer_dims() const {
    std::vector<std::size_t> dims;
    if (layers.empty()) return dims;
    dims.push_back(input_dim());
    for (const auto& l : layers) dims.push_back(l.out_dim());
    return dims;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights.data.size() + l.bias.size();
    return n;
  }

  // Weights then bias, layer by layer. Gradients use the same layout.
  std::vector<std::span<double>> parameter_spans() {
    std::vector<std::span<double>> spans;
    for (auto& l : layers) {
      spans.emplace_back(l.weights.data);
      spans.emplace_back(l.bias);
    }
    return spans;
  }

  std::vector<std::span<const double>> parameter_spans() const {
    std::vector<std::span<const double>> spans;
    for (const auto& l : layers) {
      spans.emplace_back(l.weights.data);
      spans.emplace_back(l.bias);
    }
    return spans;
  }

  bool operator==(const MlpParams&) const = default;
};

/// Gradient of a scalar w.r.t. every MlpParams entry; shaped like the params.
using MlpGradient = MlpParams;

inline MlpGradient zeros_like(const MlpParams& p) {
  MlpGradient g = p;
  for (auto& l : g.layers) {
    std::fill(l.weights.data.begin(), l.weights.data.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  return g;
}

inline void accumulate(MlpGradient& into, const MlpGradient& g, double scale = 1.0) {
  require_dim(g.layers.size(), into.layers.size(), "gradient accumulate");
  for (std::size_t k = 0; k < into.layers.size(); ++k) {
    add_scaled(into.layers[k].weights.data, scale, g.layers[k].weights.data);
    add_scaled(into.layers[k].bias, scale, g.layers[k].bias);
  }
}

inline void validate_layer_dims(const std::vector<std::size_t>& dims) {
  if (dims.size() < 2) throw std::invalid_argument("MLP needs at least an input and an output dimension");
  for (auto d : dims)
    if (d == 0) throw std::invalid_argument("MLP layer dimensions must be positive");
}

/// Fan-in scaled uniform init (He-uniform for relu, LeCun-uniform otherwise), zero biases.
inline MlpParams make_mlp(const std::vector<std::size_t>& dims, Activation activation, std::uint64_t seed) {
  validate_layer_dims(dims);
  Rng rng(seed);
  MlpParams p;
  p.activation = activation;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const double fan_in = static_cast<double>(dims[k]);
    const double limit = activation == Activation::relu ? std::sqrt(6.0 / fan_in) : std::sqrt(3.0 / fan_in);
    DenseLayer layer{RealMatrix(dims[k + 1], dims[k]), RealVector(dims[k + 1], 0.0)};
    for (auto& w : layer.weights.data) w = uniform(rng, -limit, limit);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

/// Single square affine layer initialised to the identity map.
inline MlpParams make_identity_mlp(std::size_t dim) {
  MlpParams p;
  p.activation = Activation::identity;
  DenseLayer layer{RealMatrix(dim, dim), RealVector(dim, 0.0)};
  for (std::size_t i = 0; i < dim; ++i) layer.weights(i, i) = 1.0;
  p.layers.push_back(std::move(layer));
  return p;
}

/// Reusable forward/backward buffers for one network; avoids allocation in
/// hot loops. Not thread-safe; use one per thread.
class MlpWorkspace {
 public:
  explicit MlpWorkspace(const MlpParams& params) : params_(&params) {
    const auto& layers = params.layers;
    pre_.resize(layers.size());
    post_.resize(layers.size());
    for (std::size_t k = 0; k < layers.size(); ++k) {
      pre_[k].assign(layers[k].out_dim(), 0.0);
      post_[k].assign(layers[k].out_dim(), 0.0);
    }
    input_.assign(params.input_dim(), 0.0);
  }

  const MlpParams& params() const { return *params_; }

  std::span<const double> forward(std::span<const double> input) {
    const auto& p = *params_;
    require_dim(input.size(), p.input_dim(), "mlp_forward input");
    std::copy(input.begin(), input.end(), input_.begin());
    std::span<const double> x = input_;
    for (std::size_t k = 0; k < p.layers.size(); ++k) {
      const auto& layer = p.layers[k];
      const bool hidden = k + 1 < p.layers.size();
      auto& z = pre_[k];
      auto& y = post_[k];
      for (std::size_t r = 0; r < layer.out_dim(); ++r) {
        const double* w = layer.weights.data.data() + r * layer.in_dim();
        double s = layer.bias[r];
        for (std::size_t c = 0; c < layer.in_dim(); ++c) s += w[c] * x[c];
        z[r] = s;
        y[r] = hidden ? activate(p.activation, s) : s;
      }
      x = y;
    }
    return post_.back();
  }

  /// Backpropagates through the most recent forward(). Accumulates into
  /// param_grad when given; writes the input gradient into input_grad when given.
  void backward(std::span<const double> output_gradient, MlpGradient* param_grad, std::span<double> input_grad) {
    const auto& p = *params_;
    require_dim(output_gradient.size(), p.output_dim(), "mlp_backward output_gradient");
    if (!input_grad.empty()) require_dim(input_grad.size(), p.input_dim(), "mlp_backward input_gradient");
    delta_.assign(output_gradient.begin(), output_gradient.end());
    for (std::size_t k = p.layers.size(); k-- > 0;) {
      const auto& layer = p.layers[k];
      const bool hidden = k + 1 < p.layers.size();
      if (hidden) {
        for (std::size_t r = 0; r < layer.out_dim(); ++r)
          delta_[r] *= activate_derivative(p.activation, pre_[k][r], post_[k][r]);
      }
      std::span<const double> x = k == 0 ? std::span<const double>(input_) : std::span<const double>(post_[k - 1]);
      if (param_grad != nullptr) {
        auto& g = param_grad->layers[k];
        for (std::size_t r = 0; r < layer.out_dim(); ++r) {
          const double d = delta_[r];
          if (d == 0.0) continue;
          double* gw = g.weights.data.data() + r * layer.in_dim();
          for (std::size_t c = 0; c < layer.in_dim(); ++c) gw[c] += d * x[c];
          g.bias[r] += d;
        }
      }
      if (k == 0 && input_grad.empty()) break;
      next_.assign(layer.in_dim(), 0.0);
      for (std::size_t r = 0; r < layer.out_dim(); ++r) {
        const double d = delta_[r];
        if (d == 0.0) continue;
        const double* w = layer.weights.data.data() + r * layer.in_dim();
        for (std::size_t c = 0; c < layer.in_dim(); ++c) next_[c] += w[c] * d;
      }
      delta_.swap(next_);
    }
    if (!input_grad.empty()) std::copy(delta_.begin(), delta_.end(), input_grad.begin());
  }

 private:
  const MlpParams* params_;
  RealVector input_;
  std::vector<RealVector> pre_;
  std::vector<RealVector> post_;
  RealVector delta_;
  RealVector next_;
};

inline RealVector mlp_forward(const MlpParams& params, std::span<const double> input) {
  MlpWorkspace ws(params);
  auto out = ws.forward(input);
  return RealVector(out.begin(), out.end());
}

struct MlpBackwardResult {
  MlpGradient param_gradients;
  RealVector input_gradient;
};

inline MlpBackwardResult mlp_backward(const MlpParams& params, std::span<const double> input,
                                      std::span<const double> output_gradient) {
  require_dim(output_gradient.size(), params.output_dim(), "mlp_backward output_gradient");
  MlpWorkspace ws(params);
  ws.forward(input);
  MlpBackwardResult r{zeros_like(params), RealVector(params.input_dim(), 0.0)};
  ws.backward(output_gradient, &r.param_gradients, r.input_gradient);
  return r;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { gradient_descent, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct StepOutcome {
  bool applied = true;
  std::string diagnostic;
};

/// Optimizer state over an ordered list of parameter blocks. The block
/// layout is fixed by the first step.
class OptimizerState {
 public:
  OptimizerState() = default;
  explicit OptimizerState(OptimizerConfig config) : config_(config) {
    if (!(config_.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  }

  const OptimizerConfig& config() const { return config_; }
  std::uint64_t step_count() const { return steps_; }
  void set_learning_rate(double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    config_.learning_rate = lr;
  }

  StepOutcome step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads) {
    require_dim(grads.size(), params.size(), "optimizer_step blocks");
    std::size_t total = 0;
    for (std::size_t b = 0; b < params.size(); ++b) {
      require_dim(grads[b].size(), params[b].size(), "optimizer_step block");
      for (std::size_t i = 0; i < grads[b].size(); ++i) {
        if (!std::isfinite(grads[b][i])) {
          std::ostringstream os;
          os << "non-finite gradient in block " << b << " at index " << i << "; step refused";
          return {false, os.str()};
        }
      }
      total += params[b].size();
    }
    if (config_.kind == OptimizerKind::adam) {
      if (first_.empty()) {
        first_.assign(total, 0.0);
        second_.assign(total, 0.0);
      }
      require_dim(total, first_.size(), "optimizer_step parameter count");
    }
    ++steps_;
    const double lr = config_.learning_rate;
    if (config_.kind == OptimizerKind::gradient_descent) {
      for (std::size_t b = 0; b < params.size(); ++b)
        for (std::size_t i = 0; i < params[b].size(); ++i) params[b][i] -= lr * grads[b][i];
      return {};
    }
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    std::size_t j = 0;
    for (std::size_t b = 0; b < params.size(); ++b) {
      for (std::size_t i = 0; i < params[b].size(); ++i, ++j) {
        const double g = grads[b][i];
        first_[j] = b1 * first_[j] + (1.0 - b1) * g;
        second_[j] = b2 * second_[j] + (1.0 - b2) * g * g;
        const double mhat = first_[j] / c1;
        const double vhat = second_[j] / c2;
        params[b][i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
    return {};
  }

  StepOutcome step(MlpParams& params, const MlpGradient& grads) {
    auto g = grads.parameter_spans();
    return step(params.parameter_spans(), g);
  }

 private:
  OptimizerConfig config_{};
  std::uint64_t steps_ = 0;
  std::vector<double> first_;
  std::vector<double> second_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::optional<std::size_t> non_finite_coordinate;

  bool passed(double tolerance = 1e-4) const {
    return !non_finite_coordinate && max_relative_error <= tolerance;
  }
};

/// Compares an analytic gradient against central differences:
/// max_i |analytic_i - fd_i| / max(1, |fd_i|).
inline GradientCheckResult gradient_check(const std::function<double(std::span<const double>)>& loss_fn,
                                          std::span<const double> analytic, std::span<const double> point,
                                          double step = 1e-5) {
  require_dim(analytic.size(), point.size(), "gradient_check");
  GradientCheckResult result;
  RealVector probe(point.begin(), point.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + step;
    const double up = loss_fn(probe);
    probe[i] = saved - step;
    const double down = loss_fn(probe);
    probe[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      result.non_finite_coordinate = i;
      return result;
    }
    const double fd = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_coordinate = i;
    }
  }
  return result;
}

// Flattening helpers used by gradient checks over structured parameters.
inline RealVector flatten(const std::vector<std::span<const double>>& blocks) {
  RealVector out;
  for (auto b : blocks) out.insert(out.end(), b.begin(), b.end());
  return out;
}

inline void unflatten(std::span<const double> flat, const std::vector<std::span<double>>& blocks) {
  std::size_t total = 0;
  for (auto b : blocks) total += b.size();
  require_dim(flat.size(), total, "unflatten");
  std::size_t j = 0;
  for (auto b : blocks) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(j), b.size(), b.begin());
    j += b.size();
  }
}

}  // namespace cocoon
