#pragma once

// Geometric median via Weiszfeld iteration, with the Vardi-Zhang step when an
// iterate coincides with a data point.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cocoon/numerics.hpp"

namespace cocoon {

using PointCloud = std::vector<RealVector>;

inline constexpr double kSingularRadius = 1e-12;

inline std::size_t validate_cloud(const PointCloud& points) {
  if (points.empty()) throw std::invalid_argument("point cloud must be non-empty");
  const std::size_t dim = points.front().size();
  if (dim == 0) throw std::invalid_argument("points must have positive dimension");
  for (const auto& p : points) {
    require_dim(p.size(), dim, "point cloud");
    if (!all_finite(p)) throw std::invalid_argument("point cloud contains non-finite values");
  }
  return dim;
}

/// Sum of Euclidean distances from candidate to every point.
inline double median_objective(const PointCloud& points, std::span<const double> candidate) {
  double s = 0.0;
  for (const auto& p : points) s += distance(p, candidate);
  return s;
}

/// Optimality measure for the geometric median problem.
///
/// For a candidate distinct from every point this is ||sum_i (x_i - y)/||x_i - y|| ||.
/// If the candidate coincides with m points, those points contribute the
/// subgradient ball of radius m, so the measure becomes
/// max(0, ||sum over the other points|| - m). Zero iff candidate is a median.
inline double weiszfeld_residual(const PointCloud& points, std::span<const double> candidate) {
  RealVector pull(candidate.size(), 0.0);
  double coincident = 0.0;
  for (const auto& p : points) {
    require_dim(p.size(), candidate.size(), "weiszfeld_residual");
    const double d = distance(p, candidate);
    if (d <= kSingularRadius) {
      coincident += 1.0;
      continue;
    }
    for (std::size_t k = 0; k < pull.size(); ++k) pull[k] += (p[k] - candidate[k]) / d;
  }
  const double r = norm(pull);
  return coincident > 0.0 ? std::max(0.0, r - coincident) : r;
}

struct GeometricMedianResult {
  RealVector point;
  double objective = 0.0;
  double residual = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> objective_trace;  // filled only when requested
};

struct GeometricMedianOptions {
  double tol = 1e-9;
  std::size_t max_iter = 10000;
  bool record_trace = false;
};

namespace detail {

inline RealVector coordinate_median(const PointCloud& points) {
  std::vector<double> xs;
  xs.reserve(points.size());
  for (const auto& p : points) xs.push_back(p[0]);
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  // Any point between the two middle values is optimal for even n; take their midpoint.
  const double m = n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
  return {m};
}

// If every point lies on one line, returns (origin, unit direction).
inline bool collinear_axis(const PointCloud& points, RealVector& origin, RealVector& axis) {
  origin = points.front();
  std::size_t far = 0;
  double far_d = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double d = distance(points[i], origin);
    if (d > far_d) {
      far_d = d;
      far = i;
    }
  }
  if (far_d == 0.0) {
    axis.assign(origin.size(), 0.0);
    return true;
  }
  axis = (1.0 / far_d) * (points[far] - origin);
  double scale = 0.0;
  for (const auto& p : points) scale = std::max(scale, norm(p));
  const double slack = 1e-12 * std::max(1.0, scale);
  for (const auto& p : points) {
    const RealVector d = p - origin;
    const double t = dot(d, axis);
    RealVector off = d;
    add_scaled(off, -t, axis);
    if (norm(off) > slack) return false;
  }
  return true;
}

}  // namespace detail

inline GeometricMedianResult geometric_median(const PointCloud& points, const GeometricMedianOptions& opt = {}) {
  if (!(opt.tol > 0.0)) throw std::invalid_argument("geometric_median: tol must be positive");
  if (opt.max_iter == 0) throw std::invalid_argument("geometric_median: max_iter must be positive");
  const std::size_t dim = validate_cloud(points);

  auto finish = [&](RealVector y, std::size_t iters, bool converged, std::vector<double> trace) {
    GeometricMedianResult r;
    r.objective = median_objective(points, y);
    r.residual = weiszfeld_residual(points, y);
    r.point = std::move(y);
    r.iterations = iters;
    r.converged = converged;
    r.objective_trace = std::move(trace);
    return r;
  };

  if (points.size() == 1) return finish(points.front(), 0, true, {});
  if (points.size() == 2) return finish(0.5 * (points[0] + points[1]), 0, true, {});
  if (dim == 1) return finish(detail::coordinate_median(points), 0, true, {});

  {
    RealVector origin, axis;
    if (detail::collinear_axis(points, origin, axis)) {
      // Order the points along the line and take the middle one (or the
      // midpoint of the middle pair), so the answer is an exact data value.
      std::vector<std::pair<double, std::size_t>> order;
      for (std::size_t i = 0; i < points.size(); ++i) order.emplace_back(dot(points[i] - origin, axis), i);
      std::sort(order.begin(), order.end());
      const std::size_t n = order.size();
      RealVector y = n % 2 == 1 ? points[order[n / 2].second]
                                : 0.5 * (points[order[n / 2 - 1].second] + points[order[n / 2].second]);
      return finish(std::move(y), 0, true, {});
    }
  }

  // Start from the centroid.
  RealVector y(dim, 0.0);
  for (const auto& p : points) add_scaled(y, 1.0 / static_cast<double>(points.size()), p);

  std::vector<double> trace;
  if (opt.record_trace) trace.push_back(median_objective(points, y));

  RealVector numer(dim), pull(dim);
  for (std::size_t iter = 1; iter <= opt.max_iter; ++iter) {
    // A data point is optimal iff the pull of the remaining points has norm
    // at most its multiplicity; test the nearest point every iteration since
    // Weiszfeld only approaches such vertex optima sublinearly.
    std::size_t nearest = 0;
    double nearest_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double d = distance(points[i], y);
      if (d < nearest_d) {
        nearest_d = d;
        nearest = i;
      }
    }
    if (weiszfeld_residual(points, points[nearest]) <= opt.tol) {
      if (opt.record_trace) trace.push_back(median_objective(points, points[nearest]));
      return finish(points[nearest], iter, true, std::move(trace));
    }

    std::fill(numer.begin(), numer.end(), 0.0);
    std::fill(pull.begin(), pull.end(), 0.0);
    double denom = 0.0;
    double multiplicity = 0.0;
    for (const auto& p : points) {
      const double d = distance(p, y);
      if (d <= kSingularRadius) {
        multiplicity += 1.0;
        continue;
      }
      add_scaled(numer, 1.0 / d, p);
      for (std::size_t k = 0; k < dim; ++k) pull[k] += (p[k] - y[k]) / d;
      denom += 1.0 / d;
    }
    RealVector next = (1.0 / denom) * numer;
    if (multiplicity > 0.0) {
      // Vardi-Zhang: blend the Weiszfeld map with the current iterate.
      const double r = norm(pull);
      const double keep = std::min(1.0, multiplicity / r);
      for (std::size_t k = 0; k < dim; ++k) next[k] = (1.0 - keep) * next[k] + keep * y[k];
    }
    const double step = distance(next, y);
    y = std::move(next);
    if (opt.record_trace) trace.push_back(median_objective(points, y));
    if (weiszfeld_residual(points, y) <= opt.tol || step == 0.0) {
      return finish(std::move(y), iter, weiszfeld_residual(points, y) <= opt.tol, std::move(trace));
    }
  }
  return finish(std::move(y), opt.max_iter, false, std::move(trace));
}

}  // namespace cocoon
