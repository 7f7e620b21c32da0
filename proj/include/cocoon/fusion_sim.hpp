#pragma once

// Synthetic two-modality detector stand-in: per-query features across decoder
// layers, feature-space corruptions, and static vs adaptive fusion through a
// frozen linear classifier.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cocoon/aligner.hpp"
#include "cocoon/conformal.hpp"
#include "cocoon/io.hpp"
#include "cocoon/numerics.hpp"
#include "cocoon/random.hpp"

namespace cocoon {

// ---------------------------------------------------------------------------
// Scenes

struct SceneSpec {
  std::size_t num_queries = 60;
  std::size_t num_classes = 10;
  std::size_t num_layers = 6;
  std::size_t feature_dim = 16;
  double matched_fraction = 0.5;
  // Feature noise, all multiplied by covariance_scale:
  double shared_noise = 0.5;    // per query, common to both modalities (object atypicality)
  double modality_noise = 0.3;  // per query and modality, times the class profile
  double layer_noise = 0.1;      // independent per layer
  double covariance_scale = 1.0;
  double background_scale = 1.0;  // background features ~ N(0, background_scale^2)
  std::vector<double> class_mixture;  // empty = uniform
  std::vector<RealVector> class_means;
  // Multipliers on modality_noise per class: which modality is cleaner for which class.
  std::vector<double> profile_a, profile_b;

  void validate() const {
    if (num_queries == 0 || num_classes == 0 || num_layers == 0 || feature_dim == 0)
      throw std::invalid_argument("SceneSpec: sizes must be positive");
    if (!(matched_fraction >= 0.0 && matched_fraction <= 1.0))
      throw std::invalid_argument("SceneSpec: matched_fraction must lie in [0, 1]");
    if (shared_noise < 0 || modality_noise < 0 || layer_noise < 0 || covariance_scale < 0 || background_scale < 0)
      throw std::invalid_argument("SceneSpec: noise scales must be non-negative");
    if (class_means.size() != num_classes) throw std::invalid_argument("SceneSpec: one mean per class required");
    for (const auto& m : class_means) require_dim(m.size(), feature_dim, "class mean");
    if (profile_a.size() != num_classes || profile_b.size() != num_classes)
      throw std::invalid_argument("SceneSpec: one modality profile entry per class required");
    if (!class_mixture.empty()) {
      if (class_mixture.size() != num_classes) throw std::invalid_argument("SceneSpec: mixture size mismatch");
      for (double p : class_mixture)
        if (!(p >= 0.0)) throw std::invalid_argument("SceneSpec: mixture weights must be non-negative");
    }
  }

  std::size_t matched_count() const {
    return static_cast<std::size_t>(std::llround(matched_fraction * static_cast<double>(num_queries)));
  }
};

struct WorldShape {
  double mean_scale = 2.0;     // class means ~ N(0, mean_scale^2 I)
  double mean_offset = 0.0;    // norm of a shift shared by every class mean
  double pair_distance = 1.5;  // > 0: odd classes sit this far from the preceding even class
};

/// Fills the class means and modality profile from the seed. The profile
/// alternates which modality is slightly cleaner.
inline SceneSpec make_scene_spec(SceneSpec base, std::uint64_t seed, const WorldShape& shape = {}) {
  Rng rng = make_rng(seed, "scene_spec");
  base.class_means.clear();
  RealVector offset = normal_vector(rng, base.feature_dim);
  offset = (shape.mean_offset / norm(offset)) * offset;
  for (std::size_t c = 0; c < base.num_classes; ++c) {
    RealVector m = offset + normal_vector(rng, base.feature_dim, shape.mean_scale);
    if (shape.pair_distance > 0.0 && c % 2 == 1) {
      RealVector dir = normal_vector(rng, base.feature_dim);
      m = base.class_means[c - 1];
      add_scaled(m, shape.pair_distance / norm(dir), dir);
    }
    base.class_means.push_back(std::move(m));
  }
  base.profile_a.assign(base.num_classes, 1.0);
  base.profile_b.assign(base.num_classes, 1.0);
  for (std::size_t c = 0; c < base.num_classes; ++c) {
    base.profile_a[c] = c % 2 == 0 ? 0.8 : 1.2;
    base.profile_b[c] = c % 2 == 0 ? 1.2 : 0.8;
  }
  base.validate();
  return base;
}

struct SceneQuery {
  std::optional<std::size_t> label;  // none = background
  std::vector<RealVector> a;         // per layer
  std::vector<RealVector> b;
  bool operator==(const SceneQuery&) const = default;
};

struct Scene {
  std::vector<SceneQuery> queries;
  std::size_t num_layers() const { return queries.empty() ? 0 : queries.front().a.size(); }
  bool operator==(const Scene&) const = default;
};

inline std::size_t sample_class(const SceneSpec& spec, Rng& rng) {
  if (spec.class_mixture.empty()) return uniform_index(rng, spec.num_classes);
  double total = 0.0;
  for (double p : spec.class_mixture) total += p;
  double u = uniform01(rng) * total;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    if (u < spec.class_mixture[c]) return c;
    u -= spec.class_mixture[c];
  }
  return spec.num_classes - 1;
}

inline Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_rng(seed, "scene");
  const std::size_t d = spec.feature_dim, L = spec.num_layers;
  const double s = spec.covariance_scale;
  Scene scene;
  const std::size_t matched = spec.matched_count();
  for (std::size_t q = 0; q < spec.num_queries; ++q) {
    SceneQuery query;
    if (q < matched) {
      const std::size_t c = sample_class(spec, rng);
      query.label = c;
      const RealVector shared = normal_vector(rng, d, s * spec.shared_noise);
      const RealVector base_a = spec.class_means[c] + shared + normal_vector(rng, d, s * spec.modality_noise * spec.profile_a[c]);
      const RealVector base_b = spec.class_means[c] + shared + normal_vector(rng, d, s * spec.modality_noise * spec.profile_b[c]);
      for (std::size_t l = 0; l < L; ++l) {
        query.a.push_back(base_a + normal_vector(rng, d, s * spec.layer_noise));
        query.b.push_back(base_b + normal_vector(rng, d, s * spec.layer_noise));
      }
    } else {
      const RealVector base_a = normal_vector(rng, d, spec.background_scale);
      const RealVector base_b = normal_vector(rng, d, spec.background_scale);
      for (std::size_t l = 0; l < L; ++l) {
        query.a.push_back(base_a + normal_vector(rng, d, s * spec.layer_noise));
        query.b.push_back(base_b + normal_vector(rng, d, s * spec.layer_noise));
      }
    }
    scene.queries.push_back(std::move(query));
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Corruptions

enum class CorruptionKind { none, blackout_a, noise_a, noise_b, dropout_b, misalign };

inline std::string_view to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::none: return "none";
    case CorruptionKind::blackout_a: return "blackout_A";
    case CorruptionKind::noise_a: return "noise_A";
    case CorruptionKind::noise_b: return "noise_B";
    case CorruptionKind::dropout_b: return "dropout_B";
    case CorruptionKind::misalign: return "misalign";
  }
  return "?";
}

inline CorruptionKind corruption_from_string(std::string_view s) {
  for (auto k : {CorruptionKind::none, CorruptionKind::blackout_a, CorruptionKind::noise_a, CorruptionKind::noise_b,
                 CorruptionKind::dropout_b, CorruptionKind::misalign})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown corruption '" + std::string(s) + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::none;
  double severity = 0.0;  // sigma for noise/misalign, rate for dropout

  static CorruptionSpec with_default_severity(CorruptionKind k) {
    switch (k) {
      case CorruptionKind::noise_a:
      case CorruptionKind::noise_b: return {k, 1.0};
      case CorruptionKind::dropout_b: return {k, 0.3};
      case CorruptionKind::misalign: return {k, 0.5};
      default: return {k, 0.0};
    }
  }
  void validate() const {
    if (!(severity >= 0.0)) throw std::invalid_argument("corruption severity must be non-negative");
    if (kind == CorruptionKind::dropout_b && severity > 1.0) throw std::invalid_argument("dropout rate must be <= 1");
  }
};

/// Only the targeted modality changes. Noise is drawn independently per layer;
/// the dropout mask and the misalignment offset are fixed per query.
inline Scene corrupt(const Scene& scene, const CorruptionSpec& spec, std::uint64_t seed) {
  spec.validate();
  Scene out = scene;
  Rng rng = make_rng(seed, "corrupt");
  for (auto& q : out.queries) {
    switch (spec.kind) {
      case CorruptionKind::none: break;
      case CorruptionKind::blackout_a:
        for (auto& f : q.a) std::fill(f.begin(), f.end(), 0.0);
        break;
      case CorruptionKind::noise_a:
        for (auto& f : q.a) f = f + normal_vector(rng, f.size(), spec.severity);
        break;
      case CorruptionKind::noise_b:
        for (auto& f : q.b) f = f + normal_vector(rng, f.size(), spec.severity);
        break;
      case CorruptionKind::dropout_b: {
        if (q.b.empty()) break;
        std::vector<bool> drop(q.b.front().size());
        for (std::size_t k = 0; k < drop.size(); ++k) drop[k] = uniform01(rng) < spec.severity;
        for (auto& f : q.b)
          for (std::size_t k = 0; k < f.size(); ++k)
            if (drop[k]) f[k] = 0.0;
        break;
      }
      case CorruptionKind::misalign: {
        if (q.b.empty()) break;
        const RealVector shift = normal_vector(rng, q.b.front().size(), spec.severity);
        for (auto& f : q.b) f = f + shift;
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Offline preparation: aligner + FIs, calibration pools, frozen head

struct SimTrainConfig {
  std::size_t train_scenes = 40;
  std::size_t calibration_scenes = 20;
  std::size_t aligned_dim = 16;
  std::size_t aligner_hidden = 32;
  Activation aligner_activation = Activation::tanh;
  TrainConfig joint{200, 3e-3, OptimizerKind::adam, LrSchedule::cosine, 0.01, kLossEps, true, true, 200};
  std::size_t head_epochs = 300;
  double head_learning_rate = 0.05;
  double head_weight_decay = 1e-4;
};

inline std::vector<Scene> generate_scenes(const SceneSpec& spec, std::size_t count, std::uint64_t seed,
                                          std::string_view stream) {
  std::vector<Scene> scenes;
  for (std::size_t i = 0; i < count; ++i) scenes.push_back(generate_scene(spec, derive_seed(seed, stream, i)));
  return scenes;
}

/// Matched queries of one layer grouped by class, both modalities.
inline FeatureBatch scene_batch(const Scene& scene, std::size_t layer) {
  FeatureBatch batch;
  for (const auto& q : scene.queries) {
    if (!q.label) continue;
    auto it = std::find_if(batch.begin(), batch.end(), [&](const ClassFeatures& c) { return c.label == *q.label; });
    if (it == batch.end()) {
      batch.push_back({*q.label, {}, {}});
      it = std::prev(batch.end());
    }
    it->modality_a.push_back(q.a.at(layer));
    it->modality_b.push_back(q.b.at(layer));
  }
  return batch;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Multinomial logistic regression by full-batch gradient descent.
inline MlpParams train_linear_head(const std::vector<RealVector>& x, const std::vector<std::size_t>& y,
                                   std::size_t num_classes, std::size_t epochs, double lr, double weight_decay) {
  if (x.empty()) throw std::invalid_argument("train_linear_head: no samples");
  const std::size_t d = x.front().size();
  MlpParams head;
  head.activation = Activation::identity;
  head.layers.push_back({RealMatrix(num_classes, d), RealVector(num_classes, 0.0)});
  const double n = static_cast<double>(x.size());
  RealVector logits(num_classes);
  for (std::size_t e = 0; e < epochs; ++e) {
    MlpGradient g = zeros_like(head);
    auto& gl = g.layers[0];
    const auto& hl = head.layers[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < num_classes; ++c) {
        logits[c] = hl.bias[c] + dot(hl.weights.row(c), x[i]);
        mx = std::max(mx, logits[c]);
      }
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t c = 0; c < num_classes; ++c) {
        const double r = (logits[c] / z - (c == y[i] ? 1.0 : 0.0)) / n;
        add_scaled(gl.weights.row(c), r, x[i]);
        gl.bias[c] += r;
      }
    }
    auto& w = head.layers[0];
    for (std::size_t k = 0; k < w.weights.data.size(); ++k)
      w.weights.data[k] -= lr * (gl.weights.data[k] + weight_decay * w.weights.data[k]);
    for (std::size_t c = 0; c < num_classes; ++c) w.bias[c] -= lr * gl.bias[c];
  }
  return head;
}

/// Offline stage 1: aligner and FIs from final-layer features of training scenes.
inline CalibrationArtifact train_sim_aligner(const SceneSpec& spec, const SimTrainConfig& cfg, std::uint64_t seed) {
  spec.validate();
  const std::size_t final_layer = spec.num_layers - 1;
  const auto train = generate_scenes(spec, cfg.train_scenes, seed, "sim_train");
  std::vector<FeatureBatch> batches;
  for (const auto& s : train) {
    auto b = scene_batch(s, final_layer);
    if (!b.empty()) batches.push_back(std::move(b));
  }
  if (batches.empty()) throw std::invalid_argument("simulator: training scenes contain no matched queries");
  auto joint = cfg.joint;
  joint.seed = derive_seed(seed, "sim_joint");
  auto trained = train_joint(batches,
                             make_mlp({spec.feature_dim, cfg.aligner_hidden, cfg.aligned_dim}, cfg.aligner_activation,
                                      derive_seed(seed, "sim_aligner")),
                             make_feature_impressions(spec.num_classes, cfg.aligned_dim, 1.0, derive_seed(seed, "sim_fi")),
                             LossCoefficients::for_queries(spec.num_queries), joint);
  if (trained.status != TrainStatus::ok) throw std::runtime_error("simulator training diverged: " + trained.diagnostic);
  CalibrationArtifact art;
  art.aligner = std::move(trained.aligner);
  art.fis = std::move(trained.impressions);
  art.seed = seed;
  art.validate();
  return art;
}

/// Offline stage 2: per-layer NC pools on calibration scenes (both modalities,
/// ground-truth FI) and the frozen head, trained under static fusion with
/// background as an extra class.
inline CalibrationArtifact calibrate_sim_artifact(CalibrationArtifact art, const SceneSpec& spec,
                                                  const SimTrainConfig& cfg) {
  spec.validate();
  require_dim(art.aligner.input_dim(), spec.feature_dim, "aligner input vs scene features");
  if (art.fis.num_classes() != spec.num_classes) throw std::invalid_argument("artifact FI count does not match the classes");
  const std::uint64_t seed = art.seed;
  const std::size_t final_layer = spec.num_layers - 1;
  const auto calib = generate_scenes(spec, cfg.calibration_scenes, seed, "sim_calibration");
  art.nc_pools.clear();
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    std::vector<LabeledFeature> samples;
    for (const auto& s : calib)
      for (const auto& q : s.queries) {
        if (!q.label) continue;
        samples.push_back({align(art.aligner, q.a[l]), *q.label});
        samples.push_back({align(art.aligner, q.b[l]), *q.label});
      }
    if (samples.empty()) throw std::invalid_argument("simulator: calibration scenes contain no matched queries");
    art.nc_pools.push_back(build_nc_pool(samples, art.fis, l));
  }

  const auto train = generate_scenes(spec, cfg.train_scenes, seed, "sim_train");
  std::vector<RealVector> hx;
  std::vector<std::size_t> hy;
  for (const auto& s : train)
    for (const auto& q : s.queries) {
      hx.push_back(fuse_features(q.a[final_layer], q.b[final_layer], {0.5, 0.5}));
      hy.push_back(q.label.value_or(spec.num_classes));  // background is the extra class
    }
  art.classifier = train_linear_head(hx, hy, spec.num_classes + 1, cfg.head_epochs, cfg.head_learning_rate,
                                     cfg.head_weight_decay);
  art.validate();
  return art;
}

inline CalibrationArtifact build_sim_artifact(const SceneSpec& spec, const SimTrainConfig& cfg, std::uint64_t seed) {
  return calibrate_sim_artifact(train_sim_aligner(spec, cfg, seed), spec, cfg);
}

// ---------------------------------------------------------------------------
// Online pipeline

enum class FusionMode { static_sum, adaptive };

struct QueryRecord {
  std::optional<std::size_t> label;
  std::size_t predicted = 0;
  QueryUncertainty uncertainty;
  LayerTrace trace_a, trace_b;
};

struct PipelineOutput {
  std::vector<QueryRecord> queries;
};

inline void check_artifact_for_scene(const CalibrationArtifact& art, const Scene& scene) {
  if (!art.classifier) throw std::invalid_argument("artifact has no classifier head");
  if (scene.queries.empty()) return;
  require_dim(scene.queries.front().a.front().size(), art.aligner.input_dim(), "scene features vs aligner input");
  if (art.nc_pools.size() < scene.num_layers())
    throw std::invalid_argument("artifact has " + std::to_string(art.nc_pools.size()) + " NC pools for a " +
                                std::to_string(scene.num_layers()) + "-layer scene");
}

/// Uncertainty for one query from its per-layer features; pure in (query, artifact).
inline QueryRecord assess_query(const SceneQuery& q, const CalibrationArtifact& art, const FusionPolicy& policy) {
  QueryRecord r;
  r.label = q.label;
  const std::size_t L = q.a.size();
  MlpWorkspace h(art.aligner);
  for (std::size_t l = 0; l < L; ++l) {
    auto na = nc_score(h.forward(q.a[l]), art.fis);
    r.trace_a.push_back({na.fi_index, na.score});
    auto nb = nc_score(h.forward(q.b[l]), art.fis);
    r.trace_b.push_back({nb.fi_index, nb.score});
  }
  const NcPool& pool = art.nc_pools[L - 1];
  const double nc_a = r.trace_a.back().score, nc_b = r.trace_b.back().score;
  r.uncertainty = fusion_weights(pool.p_value(nc_a), pool.p_value(nc_b), stability_score(r.trace_a),
                                 stability_score(r.trace_b), policy);
  r.uncertainty.a.nc = nc_a;
  r.uncertainty.b.nc = nc_b;
  return r;
}

inline std::size_t classify(const MlpParams& head, std::span<const double> fused) {
  return argmax(mlp_forward(head, fused));
}

inline PipelineOutput run_pipeline(const Scene& scene, const CalibrationArtifact& art, FusionMode mode,
                                   const FusionPolicy& policy = {}) {
  check_artifact_for_scene(art, scene);
  PipelineOutput out;
  for (const auto& q : scene.queries) {
    QueryRecord r;
    FusionWeights w{0.5, 0.5};
    if (mode == FusionMode::adaptive) {
      r = assess_query(q, art, policy);
      w = r.uncertainty.weights();
    } else {
      r.label = q.label;
      r.uncertainty.a.w = r.uncertainty.b.w = 0.5;
    }
    r.predicted = classify(*art.classifier, fuse_features(q.a.back(), q.b.back(), w));
    out.queries.push_back(std::move(r));
  }
  return out;
}

/// Prediction with one fixed weight pair for every query.
inline PipelineOutput run_fixed_weights(const Scene& scene, const CalibrationArtifact& art, FusionWeights w) {
  check_artifact_for_scene(art, scene);
  PipelineOutput out;
  for (const auto& q : scene.queries) {
    QueryRecord r;
    r.label = q.label;
    r.uncertainty.a.w = w.a;
    r.uncertainty.b.w = w.b;
    r.predicted = classify(*art.classifier, fuse_features(q.a.back(), q.b.back(), w));
    out.queries.push_back(std::move(r));
  }
  return out;
}

struct ConditionSummary {
  std::size_t matched = 0;
  std::size_t background = 0;
  double accuracy = 0.0;        // top-1 over matched queries
  double mean_w_a = 0.0;        // over matched queries
  double mean_w_b = 0.0;
  double mean_abs_dev_w_a = 0.0;  // mean |W_A - 0.5|
  double clip_rate_matched = 0.0;
  double clip_rate_background = 0.0;
  double mean_nc_a = 0.0, mean_nc_b = 0.0;  // final layer, matched
  double mean_s_a = 0.0, mean_s_b = 0.0;
  double mean_p_a = 0.0, mean_p_b = 0.0;
};

inline ConditionSummary summarize(const std::vector<PipelineOutput>& outputs) {
  ConditionSummary s;
  double correct = 0, clip_m = 0, clip_b = 0;
  for (const auto& o : outputs)
    for (const auto& q : o.queries) {
      if (!q.label) {
        ++s.background;
        clip_b += q.uncertainty.clipped ? 1 : 0;
        continue;
      }
      ++s.matched;
      correct += q.predicted == *q.label ? 1 : 0;
      clip_m += q.uncertainty.clipped ? 1 : 0;
      const auto& u = q.uncertainty;
      s.mean_w_a += u.a.w;
      s.mean_w_b += u.b.w;
      s.mean_abs_dev_w_a += std::abs(u.a.w - 0.5);
      s.mean_nc_a += u.a.nc;
      s.mean_nc_b += u.b.nc;
      s.mean_s_a += u.a.s;
      s.mean_s_b += u.b.s;
      s.mean_p_a += u.a.p;
      s.mean_p_b += u.b.p;
    }
  if (s.matched > 0) {
    const double m = static_cast<double>(s.matched);
    s.accuracy = correct / m;
    s.clip_rate_matched = clip_m / m;
    for (double* v : {&s.mean_w_a, &s.mean_w_b, &s.mean_abs_dev_w_a, &s.mean_nc_a, &s.mean_nc_b, &s.mean_s_a, &s.mean_s_b, &s.mean_p_a,
                      &s.mean_p_b})
      *v /= m;
  }
  if (s.background > 0) s.clip_rate_background = clip_b / static_cast<double>(s.background);
  return s;
}

inline ConditionSummary evaluate(const std::vector<Scene>& scenes, const CalibrationArtifact& art, FusionMode mode,
                                 const FusionPolicy& policy = {}) {
  std::vector<PipelineOutput> outs;
  for (const auto& s : scenes) outs.push_back(run_pipeline(s, art, mode, policy));
  return summarize(outs);
}

// ---------------------------------------------------------------------------
// Optimal-region sweep

struct SweepPoint {
  double w_a = 0.0;
  double accuracy = 0.0;
  bool in_region = false;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  double peak = 0.0;
  double margin = 0.005;   // accuracy fraction (0.5 percentage points)
  double cell_half_width = 0.05;

  /// A weight is inside when it falls in the grid cell of a qualifying point.
  bool contains(double w_a) const {
    for (const auto& p : points)
      if (p.in_region && std::abs(w_a - p.w_a) <= cell_half_width + 1e-12) return true;
    return false;
  }
  std::pair<double, double> region_bounds() const {
    double lo = 1.0, hi = 0.0;
    for (const auto& p : points)
      if (p.in_region) lo = std::min(lo, p.w_a), hi = std::max(hi, p.w_a);
    return {lo, hi};
  }
};

inline std::vector<double> default_weight_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 10; ++i) g.push_back(i / 10.0);
  return g;
}

inline SweepResult sweep_optimal_region(const std::vector<Scene>& scenes, const CalibrationArtifact& art,
                                        const std::vector<double>& grid = default_weight_grid(), double margin = 0.005) {
  if (grid.empty()) throw std::invalid_argument("sweep_optimal_region: empty weight grid");
  SweepResult r;
  r.margin = margin;
  if (grid.size() > 1) {
    double step = 1.0;
    for (std::size_t i = 1; i < grid.size(); ++i) step = std::min(step, std::abs(grid[i] - grid[i - 1]));
    r.cell_half_width = step / 2.0;
  }
  for (double w : grid) {
    std::vector<PipelineOutput> outs;
    for (const auto& s : scenes) outs.push_back(run_fixed_weights(s, art, {w, 1.0 - w}));
    r.points.push_back({w, summarize(outs).accuracy, false});
  }
  for (const auto& p : r.points) r.peak = std::max(r.peak, p.accuracy);
  for (auto& p : r.points) p.in_region = p.accuracy >= r.peak - margin - 1e-12;
  return r;
}

// ---------------------------------------------------------------------------
// One simulated world: artifact plus held-out test scenes

struct SimConfig {
  SceneSpec scene{};
  SimTrainConfig train{};
  std::size_t test_scenes = 20;
  WorldShape shape{};
  FusionPolicy policy{};
};

struct ConditionResult {
  CorruptionSpec corruption;
  ConditionSummary static_fusion;
  ConditionSummary adaptive_fusion;
  std::vector<PipelineOutput> static_outputs;  // one per test scene
  std::vector<PipelineOutput> adaptive_outputs;
  std::optional<SweepResult> sweep;
};

struct SimWorld {
  SceneSpec spec;
  CalibrationArtifact artifact;
  std::vector<Scene> test;
};

inline SceneSpec sim_world_spec(const SimConfig& cfg, std::uint64_t seed) {
  return make_scene_spec(cfg.scene, derive_seed(seed, "world"), cfg.shape);
}

/// World around an existing artifact; class means and test scenes follow the artifact's seed.
inline SimWorld sim_world_with_artifact(const SimConfig& cfg, CalibrationArtifact artifact) {
  SimWorld w;
  w.spec = sim_world_spec(cfg, artifact.seed);
  w.test = generate_scenes(w.spec, cfg.test_scenes, artifact.seed, "sim_test");
  if (!w.test.empty()) check_artifact_for_scene(artifact, w.test.front());
  w.artifact = std::move(artifact);
  return w;
}

inline SimWorld make_sim_world(const SimConfig& cfg, std::uint64_t seed) {
  const SceneSpec spec = sim_world_spec(cfg, seed);
  return sim_world_with_artifact(cfg, build_sim_artifact(spec, cfg.train, seed));
}

inline std::vector<Scene> corrupt_all(const std::vector<Scene>& scenes, const CorruptionSpec& c, std::uint64_t seed) {
  std::vector<Scene> out;
  for (std::size_t i = 0; i < scenes.size(); ++i) out.push_back(corrupt(scenes[i], c, derive_seed(seed, "corrupt", i)));
  return out;
}

inline ConditionResult run_condition(const SimWorld& world, const CorruptionSpec& c, std::uint64_t seed,
                                     const FusionPolicy& policy = {}, bool with_sweep = false,
                                     const std::vector<double>& grid = default_weight_grid(), double margin = 0.005) {
  const auto scenes = corrupt_all(world.test, c, seed);
  ConditionResult r;
  r.corruption = c;
  for (const auto& s : scenes) {
    r.static_outputs.push_back(run_pipeline(s, world.artifact, FusionMode::static_sum, policy));
    r.adaptive_outputs.push_back(run_pipeline(s, world.artifact, FusionMode::adaptive, policy));
  }
  r.static_fusion = summarize(r.static_outputs);
  r.adaptive_fusion = summarize(r.adaptive_outputs);
  if (with_sweep) r.sweep = sweep_optimal_region(scenes, world.artifact, grid, margin);
  return r;
}

}  // namespace cocoon
