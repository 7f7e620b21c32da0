#pragma once

// Feature Impressions (one learnable surrogate ground truth per class) and the
// feature aligner, trained jointly on
//
//   L = a * L_center + b * L_geomed - g * L_separate
//
//   L_center   = sum_c sum_i ||w_c - h_i||
//   L_geomed   = sum_c || sum_i (h_i - w_c) / (||h_i - w_c|| + eps) ||^2
//   L_separate = sum_{j<k} ||w_j - w_k||^2
//
// where h_i ranges over the aligned features of class c from both modalities.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cocoon/numerics.hpp"
#include "cocoon/random.hpp"

namespace cocoon {

inline constexpr double kLossEps = 1e-8;

struct FeatureImpressionSet {
  std::vector<RealVector> nodes;

  std::size_t num_classes() const { return nodes.size(); }
  std::size_t dim() const { return nodes.empty() ? 0 : nodes.front().size(); }

  double min_pairwise_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < nodes.size(); ++j)
      for (std::size_t k = j + 1; k < nodes.size(); ++k) best = std::min(best, distance(nodes[j], nodes[k]));
    return best;
  }

  std::vector<std::span<double>> parameter_spans() {
    std::vector<std::span<double>> s;
    for (auto& n : nodes) s.emplace_back(n);
    return s;
  }
  std::vector<std::span<const double>> parameter_spans() const {
    std::vector<std::span<const double>> s;
    for (const auto& n : nodes) s.emplace_back(n);
    return s;
  }

  bool operator==(const FeatureImpressionSet&) const = default;
};

inline void validate(const FeatureImpressionSet& fis) {
  if (fis.nodes.empty()) throw std::invalid_argument("feature impression set is empty");
  for (const auto& n : fis.nodes) {
    require_dim(n.size(), fis.dim(), "feature impression node");
    if (!all_finite(n)) throw std::invalid_argument("feature impression node is not finite");
  }
}

/// C nodes drawn uniformly from the sphere of the given radius.
inline FeatureImpressionSet make_feature_impressions(std::size_t num_classes, std::size_t dim, double radius,
                                                     std::uint64_t seed) {
  if (num_classes == 0 || dim == 0) throw std::invalid_argument("feature impressions need C > 0 and dim > 0");
  Rng rng(seed);
  FeatureImpressionSet fis;
  for (std::size_t c = 0; c < num_classes; ++c) {
    RealVector v;
    double n = 0.0;
    do {
      v = normal_vector(rng, dim);
      n = norm(v);
    } while (n < 1e-6);
    fis.nodes.push_back((radius / n) * v);
  }
  return fis;
}

struct LossCoefficients {
  double alpha_c = 5.0;
  double beta_c = 3.0;
  double gamma_c = 1.0 / 7.0;

  /// alpha = 5/N, beta = 3/N, gamma = 1/(7N) for N queries per scene.
  static LossCoefficients for_queries(std::size_t num_queries) {
    if (num_queries == 0) throw std::invalid_argument("num_queries must be positive");
    const double n = static_cast<double>(num_queries);
    return {5.0 / n, 3.0 / n, 1.0 / (7.0 * n)};
  }
};

/// Features of one class, split by modality. Used both for raw (encoder)
/// features and for aligned features.
struct ClassFeatures {
  std::size_t label = 0;
  std::vector<RealVector> modality_a;
  std::vector<RealVector> modality_b;

  std::size_t size() const { return modality_a.size() + modality_b.size(); }
};

using FeatureBatch = std::vector<ClassFeatures>;

struct LossTerms {
  double total = 0.0;
  double center = 0.0;
  double geomed = 0.0;
  double separate = 0.0;
  bool empty_batch = false;
};

inline RealVector align(const MlpParams& aligner, std::span<const double> raw_feature) {
  return mlp_forward(aligner, raw_feature);
}

inline FeatureBatch align_batch(const MlpParams& aligner, const FeatureBatch& raw) {
  MlpWorkspace ws(aligner);
  FeatureBatch out;
  out.reserve(raw.size());
  for (const auto& cls : raw) {
    ClassFeatures a{cls.label, {}, {}};
    for (const auto& f : cls.modality_a) {
      auto y = ws.forward(f);
      a.modality_a.emplace_back(y.begin(), y.end());
    }
    for (const auto& f : cls.modality_b) {
      auto y = ws.forward(f);
      a.modality_b.emplace_back(y.begin(), y.end());
    }
    out.push_back(std::move(a));
  }
  return out;
}

namespace detail {

inline void check_batch(const FeatureBatch& batch, const FeatureImpressionSet& fis, double eps) {
  validate(fis);
  if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
  for (const auto& cls : batch) {
    if (cls.label >= fis.num_classes())
      throw std::out_of_range("class label " + std::to_string(cls.label) + " outside feature impression set of size " +
                              std::to_string(fis.num_classes()));
    for (const auto& f : cls.modality_a) require_dim(f.size(), fis.dim(), "aligned feature");
    for (const auto& f : cls.modality_b) require_dim(f.size(), fis.dim(), "aligned feature");
  }
}

template <typename Fn>
void for_each_feature(const ClassFeatures& cls, Fn&& fn) {
  for (const auto& f : cls.modality_a) fn(f);
  for (const auto& f : cls.modality_b) fn(f);
}

}  // namespace detail

inline double separation_term(const FeatureImpressionSet& fis) {
  double s = 0.0;
  for (std::size_t j = 0; j < fis.nodes.size(); ++j)
    for (std::size_t k = j + 1; k < fis.nodes.size(); ++k) {
      const double d = distance(fis.nodes[j], fis.nodes[k]);
      s += d * d;
    }
  return s;
}

inline LossTerms loss_total(const FeatureBatch& batch, const FeatureImpressionSet& fis, const LossCoefficients& coeffs,
                            double eps = kLossEps) {
  detail::check_batch(batch, fis, eps);
  LossTerms t;
  const std::size_t dim = fis.dim();
  RealVector pull(dim);
  std::size_t count = 0;
  for (const auto& cls : batch) {
    const auto& w = fis.nodes[cls.label];
    std::fill(pull.begin(), pull.end(), 0.0);
    detail::for_each_feature(cls, [&](const RealVector& h) {
      const double d = distance(h, w);
      t.center += d;
      for (std::size_t k = 0; k < dim; ++k) pull[k] += (h[k] - w[k]) / (d + eps);
      ++count;
    });
    t.geomed += dot(pull, pull);
  }
  t.empty_batch = count == 0;
  t.separate = separation_term(fis);
  t.total = coeffs.alpha_c * t.center + coeffs.beta_c * t.geomed - coeffs.gamma_c * t.separate;
  return t;
}

/// Gradient of the total loss w.r.t. every aligned feature (same layout as the
/// batch) and every FI node.
struct AlignedLossGradient {
  FeatureBatch features;
  std::vector<RealVector> nodes;
  LossTerms loss;
};

inline AlignedLossGradient loss_gradients_aligned(const FeatureBatch& batch, const FeatureImpressionSet& fis,
                                                  const LossCoefficients& coeffs, double eps = kLossEps) {
  AlignedLossGradient g;
  g.loss = loss_total(batch, fis, coeffs, eps);
  const std::size_t dim = fis.dim();
  g.nodes.assign(fis.num_classes(), RealVector(dim, 0.0));

  RealVector pull(dim), grad_h(dim);
  for (const auto& cls : batch) {
    const auto& w = fis.nodes[cls.label];
    auto& gw = g.nodes[cls.label];
    std::fill(pull.begin(), pull.end(), 0.0);
    detail::for_each_feature(cls, [&](const RealVector& h) {
      const double d = distance(h, w);
      for (std::size_t k = 0; k < dim; ++k) pull[k] += (h[k] - w[k]) / (d + eps);
    });

    auto feature_grad = [&](const RealVector& h) {
      // d ||h - w|| / dh; zero subgradient at coincidence.
      const double d = distance(h, w);
      std::fill(grad_h.begin(), grad_h.end(), 0.0);
      if (d > 0.0)
        for (std::size_t k = 0; k < dim; ++k) grad_h[k] += coeffs.alpha_c * (h[k] - w[k]) / d;
      // d/dh of ||pull||^2 = 2 J^T pull,  J = I/(d+eps) - (h-w)(h-w)^T / (d (d+eps)^2)
      const double inv = 1.0 / (d + eps);
      double proj = 0.0;
      if (d > 0.0) {
        for (std::size_t k = 0; k < dim; ++k) proj += (h[k] - w[k]) * pull[k];
        proj /= d * (d + eps) * (d + eps);
      }
      for (std::size_t k = 0; k < dim; ++k)
        grad_h[k] += coeffs.beta_c * 2.0 * (inv * pull[k] - proj * (h[k] - w[k]));
      // The loss depends on (h - w) only, so dL/dw collects the negation.
      for (std::size_t k = 0; k < dim; ++k) gw[k] -= grad_h[k];
      return RealVector(grad_h);
    };

    ClassFeatures out{cls.label, {}, {}};
    for (const auto& h : cls.modality_a) out.modality_a.push_back(feature_grad(h));
    for (const auto& h : cls.modality_b) out.modality_b.push_back(feature_grad(h));
    g.features.push_back(std::move(out));
  }

  // -gamma * sum_{j<k} ||w_j - w_k||^2
  for (std::size_t j = 0; j < fis.num_classes(); ++j)
    for (std::size_t k = 0; k < fis.num_classes(); ++k) {
      if (j == k) continue;
      for (std::size_t q = 0; q < dim; ++q)
        g.nodes[j][q] -= coeffs.gamma_c * 2.0 * (fis.nodes[j][q] - fis.nodes[k][q]);
    }
  return g;
}

struct JointGradient {
  MlpGradient aligner;
  std::vector<RealVector> nodes;
  LossTerms loss;
};

/// Gradient of the total loss w.r.t. aligner parameters and FI nodes for a
/// batch of raw (pre-alignment) features.
inline JointGradient loss_gradients(const FeatureBatch& raw, const MlpParams& aligner, const FeatureImpressionSet& fis,
                                    const LossCoefficients& coeffs, double eps = kLossEps) {
  for (const auto& cls : raw) {
    for (const auto& f : cls.modality_a) require_dim(f.size(), aligner.input_dim(), "raw feature");
    for (const auto& f : cls.modality_b) require_dim(f.size(), aligner.input_dim(), "raw feature");
  }
  require_dim(aligner.output_dim(), fis.dim(), "aligner output vs feature impression");
  const FeatureBatch aligned = align_batch(aligner, raw);
  AlignedLossGradient ag = loss_gradients_aligned(aligned, fis, coeffs, eps);

  JointGradient jg{zeros_like(aligner), std::move(ag.nodes), ag.loss};
  MlpWorkspace ws(aligner);
  for (std::size_t c = 0; c < raw.size(); ++c) {
    for (std::size_t i = 0; i < raw[c].modality_a.size(); ++i) {
      ws.forward(raw[c].modality_a[i]);
      ws.backward(ag.features[c].modality_a[i], &jg.aligner, {});
    }
    for (std::size_t i = 0; i < raw[c].modality_b.size(); ++i) {
      ws.forward(raw[c].modality_b[i]);
      ws.backward(ag.features[c].modality_b[i], &jg.aligner, {});
    }
  }
  return jg;
}

// ---------------------------------------------------------------------------
// Joint training

enum class LrSchedule { constant, cosine };

struct TrainConfig {
  std::size_t epochs = 500;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  LrSchedule schedule = LrSchedule::cosine;
  double final_lr_fraction = 0.01;  // cosine floor, relative to learning_rate
  double eps = kLossEps;
  bool train_aligner = true;
  bool train_impressions = true;
  // Full-batch node refinement after the stochastic phase (0 disables).
  std::size_t refine_iterations = 500;
  std::uint64_t seed = 0;
};

/// Full-batch minimisation of the loss over the FI nodes only, with the
/// aligned features held fixed. Gradient descent with Armijo backtracking.
/// Returns the number of accepted steps.
inline std::size_t refine_impressions(const FeatureBatch& aligned, FeatureImpressionSet& fis,
                                      const LossCoefficients& coeffs, std::size_t max_iter, double eps = kLossEps,
                                      double grad_tol = 1e-12) {
  auto value = [&](const FeatureImpressionSet& f) { return loss_total(aligned, f, coeffs, eps).total; };
  double f0 = value(fis);
  double step = 1e-3;
  std::size_t accepted = 0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    const auto g = loss_gradients_aligned(aligned, fis, coeffs, eps);
    double gg = 0.0;
    for (const auto& n : g.nodes) gg += dot(n, n);
    if (std::sqrt(gg) <= grad_tol) break;
    step *= 2.0;
    bool moved = false;
    while (step > 1e-16) {
      FeatureImpressionSet cand = fis;
      for (std::size_t c = 0; c < cand.nodes.size(); ++c) add_scaled(cand.nodes[c], -step, g.nodes[c]);
      const double f1 = value(cand);
      if (f1 <= f0 - 1e-4 * step * gg) {
        fis = std::move(cand);
        f0 = f1;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
    ++accepted;
  }
  return accepted;
}

/// Concatenates the scenes of a training set class by class.
inline FeatureBatch merge_by_class(const std::vector<FeatureBatch>& scenes) {
  FeatureBatch merged;
  for (const auto& scene : scenes)
    for (const auto& cls : scene) {
      auto it = std::find_if(merged.begin(), merged.end(), [&](const ClassFeatures& m) { return m.label == cls.label; });
      if (it == merged.end()) {
        merged.push_back({cls.label, {}, {}});
        it = std::prev(merged.end());
      }
      it->modality_a.insert(it->modality_a.end(), cls.modality_a.begin(), cls.modality_a.end());
      it->modality_b.insert(it->modality_b.end(), cls.modality_b.begin(), cls.modality_b.end());
    }
  std::sort(merged.begin(), merged.end(), [](const auto& x, const auto& y) { return x.label < y.label; });
  return merged;
}

enum class TrainStatus { ok, diverged };

struct TrainResult {
  MlpParams aligner;
  FeatureImpressionSet impressions;
  std::vector<double> loss_trace;  // mean total loss per epoch
  TrainStatus status = TrainStatus::ok;
  std::string diagnostic;
  double initial_min_distance = 0.0;
  double final_min_distance = 0.0;
};

inline double scheduled_lr(const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.schedule == LrSchedule::constant || cfg.epochs <= 1) return cfg.learning_rate;
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
  const double floor = cfg.final_lr_fraction;
  return cfg.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

/// Jointly trains the aligner and the FI nodes, one scene per optimizer step.
/// The raw features are treated as frozen encoder outputs.
inline TrainResult train_joint(const std::vector<FeatureBatch>& scenes, MlpParams aligner, FeatureImpressionSet fis,
                               const LossCoefficients& coeffs, const TrainConfig& cfg) {
  if (scenes.empty()) throw std::invalid_argument("train_joint: no training scenes");
  validate(fis);
  require_dim(aligner.output_dim(), fis.dim(), "aligner output vs feature impression");

  TrainResult r;
  r.initial_min_distance = fis.min_pairwise_distance();
  OptimizerState opt(OptimizerConfig{cfg.optimizer, cfg.learning_rate});
  Rng rng = make_rng(cfg.seed, "train_joint");
  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_learning_rate(scheduled_lr(cfg, epoch));
    shuffle(order, rng);
    double sum = 0.0;
    for (std::size_t idx : order) {
      JointGradient g = loss_gradients(scenes[idx], aligner, fis, coeffs, cfg.eps);
      if (!std::isfinite(g.loss.total)) {
        r.status = TrainStatus::diverged;
        r.diagnostic = "loss became non-finite at epoch " + std::to_string(epoch);
        break;
      }
      sum += g.loss.total;
      std::vector<std::span<double>> params;
      std::vector<std::span<const double>> grads;
      if (cfg.train_aligner) {
        for (auto s : aligner.parameter_spans()) params.push_back(s);
        for (auto s : std::as_const(g.aligner).parameter_spans()) grads.push_back(s);
      }
      if (cfg.train_impressions) {
        for (auto s : fis.parameter_spans()) params.push_back(s);
        for (const auto& n : g.nodes) grads.emplace_back(n);
      }
      if (params.empty()) continue;
      StepOutcome out = opt.step(params, grads);
      if (!out.applied) {
        r.status = TrainStatus::diverged;
        r.diagnostic = out.diagnostic;
        break;
      }
    }
    if (r.status == TrainStatus::diverged) break;
    r.loss_trace.push_back(sum / static_cast<double>(scenes.size()));
  }
  if (r.status == TrainStatus::ok && cfg.train_impressions && cfg.refine_iterations > 0) {
    const FeatureBatch aligned = align_batch(aligner, merge_by_class(scenes));
    refine_impressions(aligned, fis, coeffs, cfg.refine_iterations, cfg.eps);
  }
  r.final_min_distance = fis.min_pairwise_distance();
  r.aligner = std::move(aligner);
  r.impressions = std::move(fis);
  return r;
}

}  // namespace cocoon
