#pragma once

// Split-conformal coverage harness: synthetic regression datasets, the
// proper-train / calibration / test split, per-seed trials and the summary.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cocoon/baselines.hpp"
#include "cocoon/random.hpp"

namespace cocoon {

enum class SyntheticKind { linear_gaussian, sinusoidal, heavy_tailed };

inline std::string_view to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::linear_gaussian: return "linear_gaussian";
    case SyntheticKind::sinusoidal: return "sinusoidal";
    case SyntheticKind::heavy_tailed: return "heavy_tailed";
  }
  return "?";
}

inline SyntheticKind synthetic_from_string(std::string_view s) {
  if (s == "linear_gaussian") return SyntheticKind::linear_gaussian;
  if (s == "sinusoidal") return SyntheticKind::sinusoidal;
  if (s == "heavy_tailed") return SyntheticKind::heavy_tailed;
  throw std::invalid_argument("unknown synthetic dataset '" + std::string(s) + "'");
}

inline constexpr SyntheticKind kSyntheticKinds[] = {SyntheticKind::linear_gaussian, SyntheticKind::sinusoidal,
                                                    SyntheticKind::heavy_tailed};

/// Rows are i.i.d.; `seed` fixes both the coefficients and the draws.
inline LabeledSet make_synthetic(SyntheticKind kind, std::size_t rows, std::uint64_t seed) {
  Rng rng = make_rng(seed, to_string(kind));
  LabeledSet d;
  switch (kind) {
    case SyntheticKind::linear_gaussian: {
      const RealVector beta = normal_vector(rng, 8);
      for (std::size_t i = 0; i < rows; ++i) {
        RealVector x = normal_vector(rng, 8);
        d.push_back(x, dot(beta, x) + standard_normal(rng));
      }
      break;
    }
    case SyntheticKind::sinusoidal: {
      for (std::size_t i = 0; i < rows; ++i) {
        RealVector x(4);
        for (auto& v : x) v = uniform(rng, -2.0, 2.0);
        const double noise = (0.1 + 0.4 * std::abs(x[2])) * standard_normal(rng);
        d.push_back(x, std::sin(2.0 * x[0]) + 0.5 * x[1] + noise);
      }
      break;
    }
    case SyntheticKind::heavy_tailed: {
      const RealVector beta = normal_vector(rng, 6, 0.5);
      for (std::size_t i = 0; i < rows; ++i) {
        RealVector x = normal_vector(rng, 6);
        // Student t with 3 degrees of freedom
        double chi2 = 0.0;
        for (int k = 0; k < 3; ++k) {
          const double z = standard_normal(rng);
          chi2 += z * z;
        }
        const double t = standard_normal(rng) / std::sqrt(chi2 / 3.0);
        d.push_back(x, 2.0 * std::tanh(dot(beta, x)) + 0.3 * t);
      }
      break;
    }
  }
  return d;
}

struct SplitConfig {
  std::size_t test_size = 500;
  std::size_t proper_to_calibration = 6;  // proper:calibration = 6:1
};

struct DatasetSplit {
  LabeledSet proper_train;
  LabeledSet calibration;
  LabeledSet test;
  std::uint64_t seed = 0;
};

inline LabeledSet select_rows(const LabeledSet& d, std::span<const std::size_t> idx) {
  LabeledSet out;
  for (auto i : idx) out.push_back(d.x[i], d.y[i]);
  return out;
}

/// Uniform shuffle, then test, calibration = floor(rest / 7), proper train.
inline DatasetSplit split_dataset(const LabeledSet& d, const SplitConfig& cfg, std::uint64_t seed) {
  const std::size_t denom = cfg.proper_to_calibration + 1;
  if (d.size() < cfg.test_size + denom) throw std::invalid_argument("split_dataset: too few rows for the split");
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, "split");
  shuffle(order, rng);
  const std::size_t rest = d.size() - cfg.test_size;
  const std::size_t calib = rest / denom;
  std::span<const std::size_t> all(order);
  DatasetSplit s;
  s.seed = seed;
  s.test = select_rows(d, all.subspan(0, cfg.test_size));
  s.calibration = select_rows(d, all.subspan(cfg.test_size, calib));
  s.proper_train = select_rows(d, all.subspan(cfg.test_size + calib));
  return s;
}

struct Standardizer {
  RealVector x_mean, x_sd;
  double y_mean = 0.0, y_sd = 1.0;

  static Standardizer fit(const LabeledSet& d) {
    Standardizer s;
    const std::size_t dim = d.dim();
    const double n = static_cast<double>(d.size());
    s.x_mean.assign(dim, 0.0);
    s.x_sd.assign(dim, 0.0);
    for (const auto& r : d.x) add_scaled(s.x_mean, 1.0 / n, r);
    for (const auto& r : d.x)
      for (std::size_t k = 0; k < dim; ++k) s.x_sd[k] += (r[k] - s.x_mean[k]) * (r[k] - s.x_mean[k]) / n;
    for (auto& v : s.x_sd) v = v > 0.0 ? std::sqrt(v) : 1.0;
    s.y_mean = std::accumulate(d.y.begin(), d.y.end(), 0.0) / n;
    double ss = 0.0;
    for (double y : d.y) ss += (y - s.y_mean) * (y - s.y_mean);
    s.y_sd = std::sqrt(ss / n);
    return s;
  }

  LabeledSet apply(const LabeledSet& d) const {
    LabeledSet out;
    for (std::size_t i = 0; i < d.size(); ++i) {
      RealVector x(d.x[i].size());
      for (std::size_t k = 0; k < x.size(); ++k) x[k] = (d.x[i][k] - x_mean[k]) / x_sd[k];
      out.push_back(std::move(x), (d.y[i] - y_mean) / y_sd);
    }
    return out;
  }
};

struct TrialConfig {
  double alpha = 0.1;
  SplitConfig split{};
  RegressionTrainConfig regression{};
  CocoonRegressionConfig cocoon{};
  SurrogateOptions surrogate{};
  std::size_t band_samples = kBandSamples;
  std::size_t y_grid_points = 1000;
};

inline constexpr std::string_view kMethods[] = {"basic_cp", "feature_cp", "cocoon_nc"};

struct MethodOutcome {
  std::string method;
  double coverage = 0.0;
  double mean_width = 0.0;  // in target units
};

struct TrialResult {
  std::uint64_t seed = 0;
  bool skipped = false;
  std::string reason;
  std::vector<MethodOutcome> methods;
};

/// Everything fitted on proper_train only; calibration and test rows are only
/// ever passed through the fitted models.
inline TrialResult run_coverage_trial(const LabeledSet& dataset, const TrialConfig& cfg, std::uint64_t seed) {
  TrialResult r;
  r.seed = seed;
  auto split = split_dataset(dataset, cfg.split, seed);
  const auto stdz = Standardizer::fit(split.proper_train);
  if (!(stdz.y_sd > 0.0)) {
    r.skipped = true;
    r.reason = "constant target in the training split";
    return r;
  }
  const auto train = stdz.apply(split.proper_train);
  const auto calib = stdz.apply(split.calibration);
  const auto test = stdz.apply(split.test);

  auto rcfg = cfg.regression;
  rcfg.seed = derive_seed(seed, "regression");
  const auto model = train_regression(make_regression_model(train.dim(), rcfg.seed), train, rcfg);
  auto ccfg = cfg.cocoon;
  ccfg.train.seed = derive_seed(seed, "cocoon");
  const auto cocoon = train_cocoon_regressor(model, train, ccfg);

  const NcPool basic_pool = residual_pool(model, calib);
  const NcPool feature_pool = feature_cp_pool(model, calib, cfg.surrogate);
  CocoonScorer scorer(model, cocoon.aligner, cocoon.node, cfg.surrogate);
  const NcPool cocoon_pool = scorer.pool(calib);
  const RealVector grid = make_y_grid(train.y, cfg.y_grid_points);

  const double q_feat = feature_pool.quantile(cfg.alpha);
  const double q_cocoon = cocoon_pool.quantile(cfg.alpha);
  double hit[3] = {0, 0, 0}, width[3] = {0, 0, 0};
  for (std::size_t i = 0; i < test.size(); ++i) {
    const RealVector v = model.features(test.x[i]);
    PredictionInterval iv[3] = {
        basic_cp_interval(model.head(v), basic_pool, cfg.alpha),
        feature_band(model.g, v, q_feat, cfg.alpha, cfg.band_samples, derive_seed(seed, "band", i)),
        cocoon_interval_from_threshold(scorer, test.x[i], q_cocoon, grid, cfg.alpha),
    };
    for (int m = 0; m < 3; ++m) {
      hit[m] += iv[m].contains(test.y[i]) ? 1.0 : 0.0;
      width[m] += iv[m].width();
    }
  }
  const double n = static_cast<double>(test.size());
  for (int m = 0; m < 3; ++m)
    r.methods.push_back({std::string(kMethods[m]), hit[m] / n, width[m] / n * stdz.y_sd});
  return r;
}

struct MethodSummary {
  std::string method;
  double mean = 0.0;  // coverage, percent
  double std = 0.0;   // sample standard deviation, percent
  double abs_diff = 0.0;
  double mean_width = 0.0;
};

struct CoverageReport {
  std::string dataset;
  double alpha = 0.1;
  std::size_t n_seeds = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<TrialResult> trials;
  std::vector<MethodSummary> methods;
};

inline CoverageReport coverage_report(const std::vector<TrialResult>& trials, double alpha, std::string dataset = {}) {
  CoverageReport rep;
  rep.dataset = std::move(dataset);
  rep.alpha = alpha;
  rep.trials = trials;
  std::vector<const TrialResult*> used;
  for (const auto& t : trials) {
    rep.seeds.push_back(t.seed);
    if (!t.skipped) used.push_back(&t);
  }
  rep.n_seeds = used.size();
  if (used.empty()) throw std::invalid_argument("coverage_report: no completed trials");
  const double target = (1.0 - alpha) * 100.0;
  for (std::size_t m = 0; m < used.front()->methods.size(); ++m) {
    MethodSummary s;
    s.method = used.front()->methods[m].method;
    std::vector<double> cov;
    for (const auto* t : used) {
      cov.push_back(t->methods[m].coverage * 100.0);
      s.mean_width += t->methods[m].mean_width / static_cast<double>(used.size());
    }
    const double k = static_cast<double>(cov.size());
    s.mean = std::accumulate(cov.begin(), cov.end(), 0.0) / k;
    double ss = 0.0;
    for (double c : cov) ss += (c - s.mean) * (c - s.mean);
    s.std = cov.size() > 1 ? std::sqrt(ss / (k - 1.0)) : 0.0;
    s.abs_diff = std::abs(s.mean - target);
    rep.methods.push_back(s);
  }
  return rep;
}

}  // namespace cocoon
