#pragma once

// Nonconformity scoring against Feature Impressions, calibration pools,
// conformal p-values, top-1 stability across decoder layers, and per-query
// fusion weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cocoon/aligner.hpp"
#include "cocoon/numerics.hpp"

namespace cocoon {

struct NcResult {
  double score = 0.0;
  std::size_t fi_index = 0;
};

/// Distance from an aligned feature to its Feature Impression. With no target
/// the nearest node is used (lowest index wins ties).
inline NcResult nc_score(std::span<const double> aligned, const FeatureImpressionSet& fis,
                         std::optional<std::size_t> target = std::nullopt) {
  require_dim(aligned.size(), fis.dim(), "nc_score");
  if (target) {
    if (*target >= fis.num_classes()) throw std::out_of_range("nc_score: target class out of range");
    return {distance(aligned, fis.nodes[*target]), *target};
  }
  NcResult best{std::numeric_limits<double>::infinity(), 0};
  for (std::size_t c = 0; c < fis.num_classes(); ++c) {
    const double d = distance(aligned, fis.nodes[c]);
    if (d < best.score) best = {d, c};
  }
  return best;
}

/// Sorted calibration nonconformity scores.
class NcPool {
 public:
  NcPool() = default;
  explicit NcPool(std::vector<double> scores, std::size_t layer = 0, std::optional<std::size_t> class_scope = {})
      : scores_(std::move(scores)), layer_(layer), class_scope_(class_scope) {
    if (scores_.empty()) throw std::invalid_argument("NcPool: empty calibration set");
    for (double s : scores_)
      if (!std::isfinite(s) || s < 0.0) throw std::invalid_argument("NcPool: scores must be finite and non-negative");
    std::sort(scores_.begin(), scores_.end());
  }

  const std::vector<double>& scores() const { return scores_; }
  std::size_t size() const { return scores_.size(); }
  bool empty() const { return scores_.empty(); }
  std::size_t layer() const { return layer_; }
  std::optional<std::size_t> class_scope() const { return class_scope_; }

  /// |{x in pool : x >= nc}| / n. The smoothed variant is (count + 1) / (n + 1).
  double p_value(double nc, bool smoothed = false) const {
    if (scores_.empty()) throw std::logic_error("p-value query on an empty pool");
    const auto first_ge = std::lower_bound(scores_.begin(), scores_.end(), nc);
    const double count = static_cast<double>(scores_.end() - first_ge);
    const double n = static_cast<double>(scores_.size());
    return smoothed ? (count + 1.0) / (n + 1.0) : count / n;
  }

  /// The ceil((n+1)(1-alpha))-th smallest score.
  double quantile(double alpha) const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
    const std::size_t n = scores_.size();
    const double exact = (static_cast<double>(n) + 1.0) * (1.0 - alpha);
    // Guard against representation error such as 10 * 0.9 = 9.000000000000002.
    const auto rank = static_cast<std::size_t>(std::ceil(exact - 1e-9));
    if (rank > n) {
      std::ostringstream os;
      os << "alpha=" << alpha << " too small for a calibration pool of " << n << " scores (need alpha >= 1/(n+1))";
      throw std::domain_error(os.str());
    }
    return scores_[std::max<std::size_t>(rank, 1) - 1];
  }

  bool operator==(const NcPool&) const = default;

 private:
  std::vector<double> scores_;
  std::size_t layer_ = 0;
  std::optional<std::size_t> class_scope_;
};

inline double conformal_p_value(const NcPool& pool, double nc) { return pool.p_value(nc); }
inline double conformal_quantile(const NcPool& pool, double alpha) { return pool.quantile(alpha); }

struct LabeledFeature {
  RealVector aligned;
  std::size_t label = 0;
};

/// One score per calibration sample against its ground-truth class node.
inline NcPool build_nc_pool(const std::vector<LabeledFeature>& calibration, const FeatureImpressionSet& fis,
                            std::size_t layer = 0, std::optional<std::size_t> class_scope = {}) {
  std::vector<double> scores;
  scores.reserve(calibration.size());
  for (const auto& s : calibration) {
    if (class_scope && s.label != *class_scope) continue;
    scores.push_back(nc_score(s.aligned, fis, s.label).score);
  }
  if (scores.empty()) throw std::invalid_argument("build_nc_pool: empty calibration set");
  return NcPool(std::move(scores), layer, class_scope);
}

// ---------------------------------------------------------------------------
// Layer traces and stability

struct LayerEntry {
  std::size_t fi_index = 0;
  double score = 0.0;
};

using LayerTrace = std::vector<LayerEntry>;

inline LayerTrace trace_from_indices(const std::vector<std::size_t>& top1) {
  LayerTrace t;
  for (auto i : top1) t.push_back({i, 0.0});
  return t;
}

/// S = 1 - (#changes of the top-1 node between adjacent layers) / (L - 1).
inline double stability_score(const LayerTrace& trace) {
  if (trace.empty()) throw std::invalid_argument("stability_score: trace needs at least one layer");
  if (trace.size() == 1) return 1.0;
  std::size_t changes = 0;
  for (std::size_t l = 1; l < trace.size(); ++l)
    if (trace[l].fi_index != trace[l - 1].fi_index) ++changes;
  return 1.0 - static_cast<double>(changes) / static_cast<double>(trace.size() - 1);
}

// ---------------------------------------------------------------------------
// Fusion weights

struct FusionWeights {
  double a = 0.5;
  double b = 0.5;
  bool operator==(const FusionWeights&) const = default;
};

/// Which weight the clip threshold is tested against. `modality_a` clips only
/// when modality A's weight exceeds the threshold; `either` clips when any
/// weight does.
enum class ClipRule { modality_a, either };

struct FusionPolicy {
  double clip_threshold = 0.7;
  ClipRule clip_rule = ClipRule::modality_a;
};

struct ModalityUncertainty {
  double nc = 0.0;
  double p = 0.0;
  double q = 0.0;
  double s = 0.0;
  double w = 0.0;
};

struct QueryUncertainty {
  ModalityUncertainty a;
  ModalityUncertainty b;
  bool clipped = false;
  bool degenerate = false;

  FusionWeights weights() const { return {a.w, b.w}; }
};

inline QueryUncertainty fusion_weights(double p_a, double p_b, double s_a, double s_b, const FusionPolicy& policy = {}) {
  auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!in_unit(p_a) || !in_unit(p_b) || !in_unit(s_a) || !in_unit(s_b))
    throw std::invalid_argument("fusion_weights: P and S must lie in [0, 1]");
  QueryUncertainty u;
  u.a.p = p_a;
  u.b.p = p_b;
  u.a.s = s_a;
  u.b.s = s_b;

  auto equal_split = [&u]() {
    u.a.w = 0.5;
    u.b.w = 0.5;
  };

  const double psum = p_a + p_b;
  if (psum <= 0.0) {
    u.a.q = u.b.q = 0.5;
    u.degenerate = true;
    equal_split();
    return u;
  }
  u.a.q = p_a / psum;
  u.b.q = p_b / psum;
  const double ws = u.a.q * s_a + u.b.q * s_b;
  if (ws <= 0.0) {
    u.degenerate = true;
    equal_split();
    return u;
  }
  u.a.w = u.a.q * s_a / ws;
  u.b.w = u.b.q * s_b / ws;

  const double tested = policy.clip_rule == ClipRule::modality_a ? u.a.w : std::max(u.a.w, u.b.w);
  if (tested > policy.clip_threshold) {
    u.clipped = true;
    equal_split();
  }
  return u;
}

/// 2 * (w_a * f_a + w_b * f_b); equal weights reproduce f_a + f_b exactly.
inline RealVector fuse_features(std::span<const double> f_a, std::span<const double> f_b, const FusionWeights& w) {
  require_dim(f_b.size(), f_a.size(), "fuse_features");
  RealVector out(f_a.size());
  if (w.a == 0.5 && w.b == 0.5) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f_a[i] + f_b[i];
    return out;
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0 * (w.a * f_a[i] + w.b * f_b[i]);
  return out;
}

}  // namespace cocoon
