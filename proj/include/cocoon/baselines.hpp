#pragma once

// Reference split-conformal regressors: Basic CP on output residuals,
// Feature CP on feature-space surrogates, and the FI-distance construction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cocoon/aligner.hpp"
#include "cocoon/conformal.hpp"
#include "cocoon/numerics.hpp"
#include "cocoon/random.hpp"

namespace cocoon {

struct LabeledSet {
  std::vector<RealVector> x;
  std::vector<double> y;

  std::size_t size() const { return y.size(); }
  bool empty() const { return y.empty(); }
  std::size_t dim() const { return x.empty() ? 0 : x.front().size(); }
  void push_back(RealVector row, double target) {
    x.push_back(std::move(row));
    y.push_back(target);
  }
  bool operator==(const LabeledSet&) const = default;
};

struct PredictionInterval {
  double lower = 0.0;
  double upper = 0.0;
  double alpha = 0.1;
  bool empty_set = false;  // Cocoon-NC only: no grid value passed, point interval returned

  double width() const { return upper - lower; }
  bool contains(double y) const { return y >= lower && y <= upper; }
};

/// y = g(f(x)); f is the encoder, g the scalar head.
struct RegressionModel {
  MlpParams f;
  MlpParams g;

  void validate() const {
    require_dim(g.input_dim(), f.output_dim(), "regression head input");
    require_dim(g.output_dim(), 1, "regression head output");
  }
  RealVector features(std::span<const double> x) const { return mlp_forward(f, x); }
  double head(std::span<const double> v) const { return mlp_forward(g, v)[0]; }
  double predict(std::span<const double> x) const { return head(features(x)); }
};

inline RegressionModel make_regression_model(std::size_t input_dim, std::uint64_t seed, std::size_t width = 64,
                                             std::size_t feature_dim = 16) {
  return {make_mlp({input_dim, width, feature_dim}, Activation::relu, derive_seed(seed, "encoder")),
          make_mlp({feature_dim, width, 1}, Activation::relu, derive_seed(seed, "head"))};
}

struct RegressionTrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

/// Minibatch Adam on mean squared error, cosine learning-rate decay.
inline RegressionModel train_regression(RegressionModel model, const LabeledSet& data, const RegressionTrainConfig& cfg) {
  model.validate();
  if (data.empty()) throw std::invalid_argument("train_regression: empty training set");
  require_dim(data.dim(), model.f.input_dim(), "training rows");
  OptimizerState opt(OptimizerConfig{OptimizerKind::adam, cfg.learning_rate});
  Rng rng = make_rng(cfg.seed, "train_regression");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  MlpWorkspace wf(model.f), wg(model.g);
  RealVector feat_grad(model.f.output_dim());
  TrainConfig sched{cfg.epochs, cfg.learning_rate};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_learning_rate(scheduled_lr(sched, epoch));
    shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double scale = 2.0 / static_cast<double>(stop - start);
      MlpGradient gf = zeros_like(model.f), gg = zeros_like(model.g);
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t i = order[k];
        auto v = wf.forward(data.x[i]);
        const double out = wg.forward(v)[0];
        const double d = scale * (out - data.y[i]);
        wg.backward(std::span<const double>(&d, 1), &gg, feat_grad);
        wf.backward(feat_grad, &gf, {});
      }
      std::vector<std::span<double>> params;
      std::vector<std::span<const double>> grads;
      for (auto s : model.f.parameter_spans()) params.push_back(s);
      for (auto s : model.g.parameter_spans()) params.push_back(s);
      for (auto s : std::as_const(gf).parameter_spans()) grads.push_back(s);
      for (auto s : std::as_const(gg).parameter_spans()) grads.push_back(s);
      auto res = opt.step(params, grads);
      if (!res.applied) throw std::runtime_error("train_regression: " + res.diagnostic);
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Basic CP

inline NcPool residual_pool(const RegressionModel& model, const LabeledSet& calib) {
  if (calib.empty()) throw std::invalid_argument("empty calibration set");
  std::vector<double> r;
  r.reserve(calib.size());
  for (std::size_t i = 0; i < calib.size(); ++i) r.push_back(std::abs(calib.y[i] - model.predict(calib.x[i])));
  return NcPool(std::move(r));
}

inline PredictionInterval basic_cp_interval(double prediction, const NcPool& pool, double alpha) {
  const double q = pool.quantile(alpha);
  return {prediction - q, prediction + q, alpha};
}

inline PredictionInterval basic_cp_interval(const RegressionModel& model, const LabeledSet& calib,
                                            std::span<const double> x, double alpha) {
  return basic_cp_interval(model.predict(x), residual_pool(model, calib), alpha);
}

// ---------------------------------------------------------------------------
// Feature-space surrogate search

struct SurrogateOptions {
  std::size_t steps = 50;
  double learning_rate = 0.05;
  double growth = 1.5;  // learning-rate factor after an accepted step
  double tolerance = 1e-20;  // stop once (g(v) - y)^2 falls below this
};

struct SurrogateResult {
  RealVector v;
  double initial_loss = 0.0;
  double loss = 0.0;
  std::size_t accepted_steps = 0;
  bool diverged = false;
};

/// Gradient descent on v -> (g(v) - y)^2 from v0. A step that does not lower
/// the loss is rejected and the learning rate halved; the best iterate is kept.
class SurrogateSearch {
 public:
  explicit SurrogateSearch(const MlpParams& head) : ws_(head), grad_(head.input_dim()), cand_(head.input_dim()) {
    require_dim(head.output_dim(), 1, "surrogate head output");
  }

  SurrogateResult run(std::span<const double> v0, double y, const SurrogateOptions& opt = {}) {
    SurrogateResult r;
    r.v.assign(v0.begin(), v0.end());
    double out = ws_.forward(r.v)[0];
    r.initial_loss = r.loss = (out - y) * (out - y);
    double lr = opt.learning_rate;
    bool have_grad = false;
    for (std::size_t step = 0; step < opt.steps && r.loss > opt.tolerance; ++step) {
      if (!have_grad) {
        // the last forward pass was at r.v (initial point or the accepted candidate)
        const double d = 2.0 * (out - y);
        ws_.backward(std::span<const double>(&d, 1), nullptr, grad_);
        have_grad = true;
      }
      for (std::size_t k = 0; k < cand_.size(); ++k) cand_[k] = r.v[k] - lr * grad_[k];
      const double cand_out = ws_.forward(cand_)[0];
      const double cand_loss = (cand_out - y) * (cand_out - y);
      if (!std::isfinite(cand_loss)) {
        r.diverged = true;
        lr *= 0.5;
        continue;
      }
      if (cand_loss < r.loss) {
        r.v.swap(cand_);
        r.loss = cand_loss;
        out = cand_out;
        ++r.accepted_steps;
        have_grad = false;
        lr *= opt.growth;
      } else {
        lr *= 0.5;
      }
    }
    return r;
  }

 private:
  MlpWorkspace ws_;
  RealVector grad_;
  RealVector cand_;
};

inline SurrogateResult feature_cp_surrogate(const RegressionModel& model, std::span<const double> x, double y,
                                            const SurrogateOptions& opt = {}) {
  SurrogateSearch search(model.g);
  return search.run(model.features(x), y, opt);
}

// ---------------------------------------------------------------------------
// Feature CP

inline NcPool feature_cp_pool(const RegressionModel& model, const LabeledSet& calib, const SurrogateOptions& opt = {}) {
  if (calib.empty()) throw std::invalid_argument("empty calibration set");
  SurrogateSearch search(model.g);
  std::vector<double> scores;
  scores.reserve(calib.size());
  for (std::size_t i = 0; i < calib.size(); ++i) {
    const RealVector v = model.features(calib.x[i]);
    scores.push_back(distance(v, search.run(v, calib.y[i], opt).v));
  }
  return NcPool(std::move(scores));
}

/// Band of g over a feature-space ball of the given radius around center.
/// Probes the center, the two points along the head gradient and random
/// directions, then polishes the best upper and lower probes with projected
/// gradient steps on the sphere (refine_steps = 0 gives plain sampling).
inline PredictionInterval feature_band(const MlpParams& head, std::span<const double> center, double radius,
                                       double alpha, std::size_t band_samples, std::uint64_t seed,
                                       std::size_t refine_steps = 20) {
  MlpWorkspace ws(head);
  const double c = ws.forward(center)[0];
  PredictionInterval iv{c, c, alpha};
  if (radius <= 0.0) return iv;
  const std::size_t dim = center.size();
  RealVector point(dim), grad(dim);
  auto on_sphere = [&](const RealVector& dir, RealVector& out) {
    const double n = norm(dir);
    if (n == 0.0) return false;
    out.assign(center.begin(), center.end());
    add_scaled(out, radius / n, dir);
    return true;
  };
  RealVector best_hi, best_lo;
  double hi = c, lo = c;
  auto probe = [&](const RealVector& dir) {
    if (!on_sphere(dir, point)) return;
    const double v = ws.forward(point)[0];
    if (best_hi.empty() || v > hi) {
      hi = v;
      best_hi = dir;
    }
    if (best_lo.empty() || v < lo) {
      lo = v;
      best_lo = dir;
    }
  };
  ws.forward(center);
  const double one = 1.0;
  ws.backward(std::span<const double>(&one, 1), nullptr, grad);
  std::size_t used = 0;
  if (band_samples >= 2) {
    const RealVector g0 = grad;
    probe(g0);
    probe(-1.0 * g0);
    used = 2;
  }
  Rng rng(seed);
  for (; used < band_samples; ++used) probe(normal_vector(rng, dim));

  // sign = +1 pushes the upper end up, -1 the lower end down
  auto polish = [&](RealVector dir, double sign, double& value) {
    if (dir.empty()) return;
    double step = 0.5;
    RealVector cand(dim);
    for (std::size_t it = 0; it < refine_steps && step > 1e-6; ++it) {
      on_sphere(dir, point);
      ws.forward(point);
      ws.backward(std::span<const double>(&sign, 1), nullptr, grad);
      const double gn = norm(grad);
      if (gn == 0.0) break;
      cand = (1.0 / norm(dir)) * dir;
      add_scaled(cand, step / gn, grad);
      on_sphere(cand, point);
      const double v = ws.forward(point)[0];
      if (sign * v > sign * value) {
        value = v;
        dir = cand;
      } else {
        step *= 0.5;
      }
    }
  };
  polish(best_hi, 1.0, hi);
  polish(best_lo, -1.0, lo);
  iv.upper = std::max(iv.upper, hi);
  iv.lower = std::min(iv.lower, lo);
  return iv;
}

inline constexpr std::size_t kBandSamples = 256;

inline PredictionInterval feature_cp_interval(const RegressionModel& model, const NcPool& pool,
                                              std::span<const double> x, double alpha,
                                              std::size_t band_samples = kBandSamples, std::uint64_t seed = 0) {
  return feature_band(model.g, model.features(x), pool.quantile(alpha), alpha, band_samples, seed);
}

inline PredictionInterval feature_cp_interval(const RegressionModel& model, const LabeledSet& calib,
                                              std::span<const double> x, double alpha,
                                              std::size_t band_samples = kBandSamples) {
  return feature_cp_interval(model, feature_cp_pool(model, calib), x, alpha, band_samples);
}

// ---------------------------------------------------------------------------
// FI-distance (Cocoon) regression scores

inline RealVector make_y_grid(std::span<const double> y_train, std::size_t points = 1000) {
  if (y_train.empty()) throw std::invalid_argument("make_y_grid: empty target list");
  if (points < 2) throw std::invalid_argument("make_y_grid: need at least two grid points");
  const auto [lo, hi] = std::minmax_element(y_train.begin(), y_train.end());
  const double n = static_cast<double>(y_train.size());
  const double mean = std::accumulate(y_train.begin(), y_train.end(), 0.0) / n;
  double ss = 0.0;
  for (double y : y_train) ss += (y - mean) * (y - mean);
  const double sd = std::sqrt(ss / n);
  const double a = *lo - 2.0 * sd, b = *hi + 2.0 * sd;
  RealVector grid(points);
  for (std::size_t i = 0; i < points; ++i)
    grid[i] = a + (b - a) * static_cast<double>(i) / static_cast<double>(points - 1);
  return grid;
}

/// NC(x, y) = ||h(v*(x, y)) - w*|| for a single Feature Impression w*.
class CocoonScorer {
 public:
  CocoonScorer(const RegressionModel& model, const MlpParams& aligner, RealVector node, SurrogateOptions opt = {})
      : model_(&model), aligner_(&aligner), node_(std::move(node)), opt_(opt), search_(model.g), h_(aligner) {
    model.validate();
    require_dim(aligner.input_dim(), model.f.output_dim(), "aligner input");
    require_dim(node_.size(), aligner.output_dim(), "feature impression");
  }

  double score_features(std::span<const double> v, double y) {
    const auto s = search_.run(v, y, opt_);
    return distance(h_.forward(s.v), node_);
  }
  double score(std::span<const double> x, double y) { return score_features(model_->features(x), y); }

  NcPool pool(const LabeledSet& calib) {
    if (calib.empty()) throw std::invalid_argument("empty calibration set");
    std::vector<double> s;
    s.reserve(calib.size());
    for (std::size_t i = 0; i < calib.size(); ++i) s.push_back(score(calib.x[i], calib.y[i]));
    return NcPool(std::move(s));
  }

  const RegressionModel& model() const { return *model_; }

 private:
  const RegressionModel* model_;
  const MlpParams* aligner_;
  RealVector node_;
  SurrogateOptions opt_;
  SurrogateSearch search_;
  MlpWorkspace h_;
};

/// Hull of {y in grid : NC(x, y) <= Q}. The grid is screened at a coarse
/// stride first; edges are then resolved at full resolution between the
/// outermost accepted coarse point and its rejected neighbour. A component
/// narrower than the stride that lies outside every accepted coarse point
/// can be missed.
inline PredictionInterval cocoon_interval_from_threshold(CocoonScorer& scorer, std::span<const double> x, double q,
                                                         std::span<const double> y_grid, double alpha,
                                                         std::size_t stride = 25) {
  if (y_grid.empty()) throw std::invalid_argument("cocoon interval: empty y grid");
  stride = std::max<std::size_t>(1, stride);
  const RealVector v = scorer.model().features(x);
  const std::size_t n = y_grid.size();
  auto accepted = [&](std::size_t i) { return scorer.score_features(v, y_grid[i]) <= q; };

  std::vector<std::size_t> coarse;
  for (std::size_t i = 0; i < n; i += stride) coarse.push_back(i);
  if (coarse.back() != n - 1) coarse.push_back(n - 1);

  std::optional<std::size_t> first, last;
  std::size_t best = 0;
  double best_nc = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < coarse.size(); ++k) {
    const double nc = scorer.score_features(v, y_grid[coarse[k]]);
    if (nc < best_nc) {
      best_nc = nc;
      best = k;
    }
    if (nc <= q) {
      if (!first) first = k;
      last = k;
    }
  }

  std::size_t lo_idx = 0, hi_idx = 0;
  if (first) {
    // walk inward from the rejected coarse neighbour to the first accepted point
    lo_idx = coarse[*first];
    if (*first > 0)
      for (std::size_t i = coarse[*first - 1] + 1; i < coarse[*first]; ++i)
        if (accepted(i)) {
          lo_idx = i;
          break;
        }
    hi_idx = coarse[*last];
    if (*last + 1 < coarse.size())
      for (std::size_t i = coarse[*last + 1] - 1; i > coarse[*last]; --i)
        if (accepted(i)) {
          hi_idx = i;
          break;
        }
  } else {
    // nothing passed at coarse resolution: look around the coarse minimum
    const std::size_t a = best > 0 ? coarse[best - 1] : 0;
    const std::size_t b = best + 1 < coarse.size() ? coarse[best + 1] : n - 1;
    std::optional<std::size_t> l, h;
    for (std::size_t i = a; i <= b; ++i)
      if (accepted(i)) {
        if (!l) l = i;
        h = i;
      }
    if (!l) {
      const double yhat = scorer.model().predict(x);
      return {yhat, yhat, alpha, true};
    }
    lo_idx = *l;
    hi_idx = *h;
  }
  return {y_grid[lo_idx], y_grid[hi_idx], alpha};
}

inline PredictionInterval cocoon_nc_interval(CocoonScorer& scorer, const NcPool& pool, std::span<const double> x,
                                             double alpha, std::span<const double> y_grid) {
  return cocoon_interval_from_threshold(scorer, x, pool.quantile(alpha), y_grid, alpha);
}

// ---------------------------------------------------------------------------
// Aligner and single FI node for the regression features

struct CocoonRegressor {
  MlpParams aligner;
  RealVector node;
};

struct CocoonRegressionConfig {
  std::size_t aligned_dim = 16;
  std::size_t hidden = 32;
  std::size_t batch_size = 64;
  TrainConfig train{100, 1e-3, OptimizerKind::adam, LrSchedule::cosine, 0.01, kLossEps, true, true, 100};
};

/// Treats each minibatch of encoder features as one scene with a single class.
inline CocoonRegressor train_cocoon_regressor(const RegressionModel& model, const LabeledSet& train,
                                              const CocoonRegressionConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("train_cocoon_regressor: empty training set");
  const std::size_t fdim = model.f.output_dim();
  std::vector<FeatureBatch> scenes;
  for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
    ClassFeatures cls{0, {}, {}};
    for (std::size_t i = start; i < std::min(train.size(), start + cfg.batch_size); ++i)
      cls.modality_a.push_back(model.features(train.x[i]));
    scenes.push_back({std::move(cls)});
  }
  auto aligner = make_mlp({fdim, cfg.hidden, cfg.aligned_dim}, Activation::tanh, derive_seed(cfg.train.seed, "aligner"));
  auto fis = make_feature_impressions(1, cfg.aligned_dim, 1.0, derive_seed(cfg.train.seed, "impression"));
  auto r = train_joint(scenes, std::move(aligner), std::move(fis), LossCoefficients::for_queries(cfg.batch_size),
                       cfg.train);
  if (r.status != TrainStatus::ok) throw std::runtime_error("train_cocoon_regressor: " + r.diagnostic);
  return {std::move(r.aligner), std::move(r.impressions.nodes.front())};
}

}  // namespace cocoon
