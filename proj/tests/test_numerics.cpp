#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cocoon/numerics.hpp"
#include "cocoon/random.hpp"

using namespace cocoon;
using Catch::Approx;

namespace {

// Straight-line forward pass written independently of MlpWorkspace: builds
// the activations layer by layer with fresh vectors and std::max for relu.
RealVector reference_forward(const MlpParams& p, const RealVector& input) {
  RealVector x = input;
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    const auto& l = p.layers[k];
    RealVector y(l.out_dim());
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < l.in_dim(); ++c) s += l.weights(r, c) * x[c];
      s += l.bias[r];
      const bool hidden = k + 1 < p.layers.size();
      if (hidden && p.activation == Activation::relu) s = std::max(0.0, s);
      if (hidden && p.activation == Activation::tanh) s = std::tanh(s);
      y[r] = s;
    }
    x = y;
  }
  return x;
}

MlpParams perturbed(MlpParams p, std::size_t flat_index, double delta) {
  std::size_t j = 0;
  for (auto s : p.parameter_spans()) {
    if (flat_index < j + s.size()) {
      s[flat_index - j] += delta;
      return p;
    }
    j += s.size();
  }
  return p;
}

}  // namespace

TEST_CASE("mlp_forward basic cases", "[numerics]") {
  SECTION("identity layer passes input through") {
    auto p = make_identity_mlp(3);
    REQUIRE(mlp_forward(p, RealVector{1, 2, 3}) == RealVector{1, 2, 3});
  }
  SECTION("zero weights return the bias") {
    auto p = make_mlp({4, 3}, Activation::relu, 1);
    std::fill(p.layers[0].weights.data.begin(), p.layers[0].weights.data.end(), 0.0);
    p.layers[0].bias = {0.5, -1.0, 2.0};
    REQUIRE(mlp_forward(p, RealVector{9, 8, 7, 6}) == RealVector{0.5, -1.0, 2.0});
  }
  SECTION("dimension mismatch names both dims") {
    auto p = make_mlp({4, 3}, Activation::relu, 1);
    try {
      mlp_forward(p, RealVector{1, 2});
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("got 2") != std::string::npos);
      CHECK(msg.find("expected 4") != std::string::npos);
    }
  }
}

TEST_CASE("mlp_forward matches an independent forward pass", "[numerics]") {
  for (auto act : {Activation::relu, Activation::tanh}) {
    auto p = make_mlp({5, 7, 6, 3}, act, 42);
    for (auto& l : p.layers)
      for (auto& b : l.bias) b = 0.1;
    Rng rng(7);
    for (int t = 0; t < 20; ++t) {
      RealVector x = normal_vector(rng, 5);
      auto got = mlp_forward(p, x);
      auto want = reference_forward(p, x);
      REQUIRE(got.size() == 3);
      for (std::size_t i = 0; i < 3; ++i) CHECK(got[i] == Approx(want[i]).margin(1e-14));
    }
  }
}

TEST_CASE("mlp_forward is deterministic", "[numerics]") {
  auto p = make_mlp({4, 8, 2}, Activation::relu, 3);
  RealVector x{0.3, -1.2, 2.0, 0.1};
  REQUIRE(mlp_forward(p, x) == mlp_forward(p, x));
  REQUIRE(make_mlp({4, 8, 2}, Activation::relu, 3) == p);
}

TEST_CASE("mlp_backward closed form for a single linear layer", "[numerics]") {
  auto p = make_mlp({3, 2}, Activation::identity, 9);
  p.layers[0].bias = {0.2, -0.4};
  RealVector x{1.0, -2.0, 0.5};
  RealVector g{0.7, -1.3};
  auto r = mlp_backward(p, x, g);
  for (std::size_t o = 0; o < 2; ++o) {
    CHECK(r.param_gradients.layers[0].bias[o] == g[o]);
    for (std::size_t i = 0; i < 3; ++i) CHECK(r.param_gradients.layers[0].weights(o, i) == Approx(g[o] * x[i]));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const double want = p.layers[0].weights(0, i) * g[0] + p.layers[0].weights(1, i) * g[1];
    CHECK(r.input_gradient[i] == Approx(want));
  }
}

TEST_CASE("mlp_backward with zero output gradient is zero", "[numerics]") {
  auto p = make_mlp({3, 5, 2}, Activation::tanh, 4);
  auto r = mlp_backward(p, RealVector{1, 2, 3}, RealVector{0, 0});
  for (auto s : std::as_const(r.param_gradients).parameter_spans())
    for (double v : s) CHECK(v == 0.0);
  for (double v : r.input_gradient) CHECK(v == 0.0);
}

TEST_CASE("mlp_backward matches central finite differences", "[numerics]") {
  const double h = 1e-5;
  for (auto act : {Activation::tanh, Activation::relu}) {
    auto p = make_mlp({4, 6, 5, 2}, act, 11);
    Rng rng(5);
    for (auto& l : p.layers)
      for (auto& b : l.bias) b = 0.3 * standard_normal(rng);
    RealVector x = normal_vector(rng, 4);
    RealVector w{0.8, -0.6};  // loss = w . mlp(x)
    auto loss = [&](const MlpParams& q, const RealVector& in) { return dot(w, mlp_forward(q, in)); };
    auto r = mlp_backward(p, x, w);
    auto analytic = flatten(std::as_const(r.param_gradients).parameter_spans());
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double fd = (loss(perturbed(p, i, h), x) - loss(perturbed(p, i, -h), x)) / (2 * h);
      worst = std::max(worst, std::abs(fd - analytic[i]) / std::max(1.0, std::abs(fd)));
    }
    CHECK(worst <= 1e-4);
    auto check = gradient_check([&](std::span<const double> in) { return loss(p, RealVector(in.begin(), in.end())); },
                                r.input_gradient, x);
    CHECK(check.max_relative_error <= 1e-4);
  }
}

TEST_CASE("input gradients compose across chained networks", "[numerics]") {
  auto first = make_mlp({3, 5, 4}, Activation::tanh, 21);
  auto second = make_mlp({4, 6, 2}, Activation::tanh, 22);
  // The concatenation needs a hidden activation after `first`'s output, which
  // an identity-activation chain provides when both nets are affine.
  auto lin1 = make_mlp({3, 4}, Activation::identity, 23);
  auto lin2 = make_mlp({4, 2}, Activation::identity, 24);
  MlpParams concat;
  concat.activation = Activation::identity;
  concat.layers = {lin1.layers[0], lin2.layers[0]};

  RealVector x{0.4, -0.3, 1.1};
  RealVector g{1.5, -0.5};
  auto mid = mlp_forward(lin1, x);
  auto back2 = mlp_backward(lin2, mid, g);
  auto back1 = mlp_backward(lin1, x, back2.input_gradient);
  auto joint = mlp_backward(concat, x, g);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(back1.input_gradient[i] - joint.input_gradient[i]) <= 1e-10);

  // Nonlinear chain: compare against finite differences of the composition.
  auto comp = [&](std::span<const double> in) {
    auto y = mlp_forward(second, mlp_forward(first, in));
    return dot(g, y);
  };
  auto m = mlp_forward(first, x);
  auto b2 = mlp_backward(second, m, g);
  auto b1 = mlp_backward(first, x, b2.input_gradient);
  CHECK(gradient_check(comp, b1.input_gradient, x).max_relative_error <= 1e-8);
}

TEST_CASE("optimizer_step", "[numerics]") {
  SECTION("plain gradient descent") {
    OptimizerState opt(OptimizerConfig{OptimizerKind::gradient_descent, 0.1});
    RealVector p{1.0};
    RealVector g{2.0};
    auto out = opt.step({std::span<double>(p)}, {std::span<const double>(g)});
    CHECK(out.applied);
    CHECK(p[0] == Approx(0.8));
    CHECK(opt.step_count() == 1);
  }
  SECTION("zero gradient leaves params unchanged") {
    for (auto kind : {OptimizerKind::gradient_descent, OptimizerKind::adam}) {
      OptimizerState opt(OptimizerConfig{kind, 0.1});
      RealVector p{1.0, -2.0};
      RealVector g{0.0, 0.0};
      opt.step({std::span<double>(p)}, {std::span<const double>(g)});
      CHECK(p == RealVector{1.0, -2.0});
    }
  }
  SECTION("non-finite gradient is refused") {
    OptimizerState opt(OptimizerConfig{OptimizerKind::adam, 0.1});
    RealVector p{1.0, 2.0};
    RealVector g{0.0, std::nan("")};
    auto out = opt.step({std::span<double>(p)}, {std::span<const double>(g)});
    CHECK_FALSE(out.applied);
    CHECK(out.diagnostic.find("index 1") != std::string::npos);
    CHECK(p == RealVector{1.0, 2.0});
    CHECK(opt.step_count() == 0);
  }
  SECTION("quadratic converges within 200 steps") {
    for (auto [kind, lr] : {std::pair{OptimizerKind::gradient_descent, 0.1}, std::pair{OptimizerKind::adam, 0.1}}) {
      OptimizerState opt(OptimizerConfig{kind, lr});
      RealVector p{0.0};
      for (int i = 0; i < 200; ++i) {
        RealVector g{2.0 * (p[0] - 3.0)};
        opt.step({std::span<double>(p)}, {std::span<const double>(g)});
      }
      CHECK(std::abs(p[0] - 3.0) <= 1e-3);
    }
  }
}

TEST_CASE("gradient_check sanity", "[numerics]") {
  RealVector x{0.5, -1.5, 2.0};
  auto sq = [](std::span<const double> v) { return dot(v, v); };
  SECTION("correct gradient") {
    auto r = gradient_check(sq, 2.0 * x, x);
    CHECK(r.max_relative_error <= 1e-8);
    CHECK(r.passed());
  }
  SECTION("half the true gradient is flagged") {
    auto r = gradient_check(sq, 1.0 * x, x);
    CHECK(r.max_relative_error == Approx(0.5).margin(1e-6));
    CHECK_FALSE(r.passed());
  }
  SECTION("non-finite probe reports the coordinate") {
    auto f = [](std::span<const double> v) { return v[1] > 0 ? std::log(-1.0) : 0.0; };
    auto r = gradient_check(f, RealVector{0, 0}, RealVector{0, 0});
    REQUIRE(r.non_finite_coordinate.has_value());
    CHECK(*r.non_finite_coordinate == 1);
  }
}
