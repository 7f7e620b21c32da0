// Acceptance suite. One PASS/FAIL line per criterion, details indented below.
// Exit status is the number of failed criteria (capped at 100).
#include <sys/wait.h>

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cocoon/aligner.hpp"
#include "cocoon/conformal.hpp"
#include "cocoon/coverage.hpp"
#include "cocoon/fusion_sim.hpp"
#include "cocoon/geometry.hpp"
#include "cocoon/io.hpp"
#include "cocoon/random.hpp"

using namespace cocoon;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(int id, bool ok, const std::string& what) {
  std::printf("%s [%2d] %s\n", ok ? "PASS" : "FAIL", id, what.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

template <class... A>
void note(const char* fmt, A... args) {
  std::printf("        ");
  std::printf(fmt, args...);
  std::printf("\n");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- independent oracles --------------------------------------------------

double dist(const RealVector& a, const RealVector& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

// Norm of the summed unit vectors towards y; points sitting on y may absorb up to 1 each.
double unit_pull_residual(const std::vector<RealVector>& pts, const RealVector& y) {
  RealVector pull(y.size(), 0.0);
  double on = 0;
  for (const auto& p : pts) {
    const double d = dist(p, y);
    if (d < 1e-12) {
      on += 1;
      continue;
    }
    for (std::size_t k = 0; k < y.size(); ++k) pull[k] += (p[k] - y[k]) / d;
  }
  double n = 0;
  for (double v : pull) n += v * v;
  return std::max(0.0, std::sqrt(n) - on);
}

struct Coeffs {
  double a, b, g;
};

// center + geomed - separation, evaluated from the definition
double reference_loss(const FeatureBatch& aligned, const std::vector<RealVector>& nodes, Coeffs c) {
  double center = 0, geomed = 0, sep = 0;
  for (const auto& cls : aligned) {
    const auto& w = nodes[cls.label];
    RealVector sum(w.size(), 0.0);
    auto visit = [&](const RealVector& h) {
      const double d = dist(h, w);
      center += d;
      for (std::size_t k = 0; k < w.size(); ++k) sum[k] += (h[k] - w[k]) / (d + kLossEps);
    };
    for (const auto& h : cls.modality_a) visit(h);
    for (const auto& h : cls.modality_b) visit(h);
    for (double v : sum) geomed += v * v;
  }
  for (std::size_t j = 0; j < nodes.size(); ++j)
    for (std::size_t k = j + 1; k < nodes.size(); ++k) sep += dist(nodes[j], nodes[k]) * dist(nodes[j], nodes[k]);
  return c.a * center + c.b * geomed - c.g * sep;
}

double one_sided_paired_p(const std::vector<double>& diffs) {
  const double n = static_cast<double>(diffs.size());
  const double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / n;
  double ss = 0;
  for (double d : diffs) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / (n - 1));
  if (sd == 0.0) return mean > 0 ? 0.0 : 1.0;
  boost::math::students_t t(n - 1);
  return boost::math::cdf(boost::math::complement(t, mean / (sd / std::sqrt(n))));
}

// --- criteria ---------------------------------------------------------------

void coverage_reproduction() {
  const auto t0 = std::chrono::steady_clock::now();
  TrialConfig cfg;
  bool ok = true;
  for (auto kind : kSyntheticKinds) {
    const auto data = make_synthetic(kind, 3500, 0);
    std::vector<TrialResult> trials;
    for (std::size_t i = 0; i < 5; ++i) trials.push_back(run_coverage_trial(data, cfg, derive_seed(0, "coverage_trial", i)));
    const auto rep = coverage_report(trials, cfg.alpha);
    for (std::size_t m = 0; m < rep.methods.size(); ++m) {
      const auto& s = rep.methods[m];
      double lo = 100, hi = 0;
      for (const auto& t : trials) {
        lo = std::min(lo, 100 * t.methods[m].coverage);
        hi = std::max(hi, 100 * t.methods[m].coverage);
      }
      const bool good = std::abs(s.mean - 90.0) <= 2.0 && lo >= 86.0 && hi <= 94.0;
      ok = ok && good;
      note("%-16s %-10s mean %.2f%%  seeds [%.1f, %.1f]%s", std::string(to_string(kind)).c_str(), s.method.c_str(),
           s.mean, lo, hi, good ? "" : "  <--");
    }
  }
  const double secs = seconds_since(t0);
  note("runtime %.1f s", secs);
  verdict(1, ok && secs <= 300.0, "coverage: 3 datasets x 3 methods, alpha 0.1, 5 seeds, mean 90 +- 2, seeds in [86, 94], <= 5 min");
}

void geometric_median_criterion() {
  Rng rng = make_rng(2, "acceptance_weiszfeld");
  double worst = 0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t dim = 2 + rng() % 15, n = 3 + rng() % 48;
    PointCloud pts;
    for (std::size_t i = 0; i < n; ++i) pts.push_back(normal_vector(rng, dim, 1.0 + c % 5));
    worst = std::max(worst, unit_pull_residual(pts, geometric_median(pts).point));
  }
  note("worst residual over 100 clouds %.3g", worst);

  bool one_d = true;
  for (int c = 0; c < 50; ++c) {
    const std::size_t n = 3 + rng() % 30;
    PointCloud pts;
    std::vector<double> xs;
    for (std::size_t i = 0; i < n; ++i) {
      xs.push_back(uniform(rng, -10, 10));
      pts.push_back({xs.back()});
    }
    std::sort(xs.begin(), xs.end());
    const double m = geometric_median(pts).point[0];
    one_d = one_d && (n % 2 ? m == xs[n / 2] : (m >= xs[n / 2 - 1] && m <= xs[n / 2]));
  }
  const PointCloud tri{{0, 0}, {2, 0}, {1, std::sqrt(3.0)}};
  const auto tc = geometric_median(tri).point;
  const double tri_err = dist(tc, {1.0, std::sqrt(3.0) / 3.0});
  note("1-D medians exact: %s; triangle centre error %.3g", one_d ? "yes" : "no", tri_err);
  verdict(2, worst <= 1e-6 && one_d && tri_err <= 1e-6, "geometric median: residual <= 1e-6, exact 1-D median, triangle centre");
}

void gradient_criterion() {
  Rng rng = make_rng(3, "acceptance_gradients");
  const Coeffs which[4] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {5.0 / 8, 3.0 / 8, 1.0 / 56}};
  const char* names[4] = {"center", "geomed", "separate", "total"};
  double worst[4] = {0, 0, 0, 0};
  for (int c = 0; c < 100; ++c) {
    const std::size_t in = 2 + rng() % 4, hid = 3 + rng() % 6, out = 2 + rng() % 3, classes = 2 + rng() % 2;
    auto aligner = make_mlp({in, hid, out}, c % 2 ? Activation::tanh : Activation::relu, 1000 + c);
    auto fis = make_feature_impressions(classes, out, 2.0, 2000 + c);
    FeatureBatch raw;
    for (std::size_t k = 0; k < classes; ++k) {
      ClassFeatures cf{k, {}, {}};
      for (int i = 0; i < 3; ++i) {
        cf.modality_a.push_back(normal_vector(rng, in, 1.5));
        cf.modality_b.push_back(normal_vector(rng, in, 1.5));
      }
      raw.push_back(cf);
    }
    for (int w = 0; w < 4; ++w) {
      const LossCoefficients lc{which[w].a, which[w].b, which[w].g};
      const auto jg = loss_gradients(raw, aligner, fis, lc);
      RealVector point = flatten(std::as_const(aligner).parameter_spans());
      const std::size_t na = point.size();
      for (const auto& n : fis.nodes) point.insert(point.end(), n.begin(), n.end());
      RealVector analytic = flatten(std::as_const(jg.aligner).parameter_spans());
      for (const auto& n : jg.nodes) analytic.insert(analytic.end(), n.begin(), n.end());

      auto loss = [&](const RealVector& p) {
        MlpParams a = aligner;
        FeatureImpressionSet f = fis;
        unflatten(std::span<const double>(p).subspan(0, na), a.parameter_spans());
        unflatten(std::span<const double>(p).subspan(na), f.parameter_spans());
        FeatureBatch aligned;
        for (const auto& cls : raw) {
          ClassFeatures o{cls.label, {}, {}};
          for (const auto& x : cls.modality_a) o.modality_a.push_back(mlp_forward(a, x));
          for (const auto& x : cls.modality_b) o.modality_b.push_back(mlp_forward(a, x));
          aligned.push_back(o);
        }
        return reference_loss(aligned, f.nodes, which[w]);
      };
      const double h = 1e-5;
      for (std::size_t i = 0; i < point.size(); ++i) {
        RealVector up = point, down = point;
        up[i] += h;
        down[i] -= h;
        const double fd = (loss(up) - loss(down)) / (2 * h);
        worst[w] = std::max(worst[w], std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
      }
    }
  }
  bool ok = true;
  for (int w = 0; w < 4; ++w) {
    note("%-8s worst relative error %.3g", names[w], worst[w]);
    ok = ok && worst[w] <= 1e-4;
  }
  verdict(3, ok, "gradients of each loss term and the weighted total match central differences (<= 1e-4, 100 configs)");
}

void joint_training_criterion() {
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng = make_rng(seed, "acceptance_two_class");
    const RealVector mean_a[2] = {{2, 0, 0}, {-2, 0, 1}};
    const RealVector mean_b[2] = {{2, 1, -1}, {-2, -1, 0}};
    std::vector<FeatureBatch> scenes;
    for (int s = 0; s < 20; ++s) {
      FeatureBatch b;
      for (std::size_t c = 0; c < 2; ++c) {
        ClassFeatures cf{c, {}, {}};
        for (int i = 0; i < 10; ++i) {
          cf.modality_a.push_back(mean_a[c] + normal_vector(rng, 3, 0.5));
          cf.modality_b.push_back(mean_b[c] + normal_vector(rng, 3, 0.5));
        }
        b.push_back(cf);
      }
      scenes.push_back(b);
    }
    TrainConfig cfg;
    cfg.seed = seed;
    const auto fis0 = make_feature_impressions(2, 2, 1.0, 40 + seed);
    const auto r = train_joint(scenes, make_mlp({3, 16, 2}, Activation::relu, 30 + seed), fis0,
                               LossCoefficients::for_queries(20), cfg);
    const double d0 = dist(fis0.nodes[0], fis0.nodes[1]);
    const double d1 = dist(r.impressions.nodes[0], r.impressions.nodes[1]);
    for (std::size_t c = 0; c < 2; ++c) {
      std::vector<RealVector> pts;
      for (const auto& sc : scenes)
        for (const auto& cls : sc)
          if (cls.label == c) {
            for (const auto& x : cls.modality_a) pts.push_back(mlp_forward(r.aligner, x));
            for (const auto& x : cls.modality_b) pts.push_back(mlp_forward(r.aligner, x));
          }
      double mean = 0;
      for (const auto& p : pts) mean += dist(p, r.impressions.nodes[c]) / pts.size();
      const double res = unit_pull_residual(pts, r.impressions.nodes[c]);
      const bool good = r.status == TrainStatus::ok && res <= 0.05 * mean;
      ok = ok && good;
      note("seed %llu class %zu: residual %.3g vs bound %.3g", static_cast<unsigned long long>(seed), c, res,
           0.05 * mean);
    }
    note("seed %llu: FI distance %.3f -> %.3f", static_cast<unsigned long long>(seed), d0, d1);
    ok = ok && d1 >= 0.5 * d0;
  }
  verdict(4, ok, "joint training: each FI is a geometric median of its aligned class (<= 5% of mean distance), no collapse");
}

void p_value_criterion() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng = make_rng(seed, "acceptance_p_values");
    std::vector<double> pool, test;
    for (int i = 0; i < 500; ++i) pool.push_back(std::exp(standard_normal(rng)));
    for (int i = 0; i < 500; ++i) test.push_back(std::exp(standard_normal(rng)));
    NcPool p(pool);
    for (int ti = 1; ti <= 9; ++ti) {
      double frac = 0;
      for (double s : test) frac += p.p_value(s) <= ti / 10.0 ? 1.0 : 0.0;
      const double dev = std::abs(frac / 500 - ti / 10.0);
      if (dev > 0.05) note("seed %llu t %.1f: F(t) = %.3f", static_cast<unsigned long long>(seed), ti / 10.0, frac / 500);
      worst = std::max(worst, dev);
    }
  }
  // monotonicity over every pool value, both sides of it, and midpoints
  Rng rng = make_rng(9, "acceptance_monotone");
  std::vector<double> raw;
  for (int i = 0; i < 400; ++i) raw.push_back(std::round(uniform(rng, 0, 40)) / 8.0);
  NcPool pool(raw);
  std::vector<double> probes{0.0, 1e9};
  for (double s : raw) probes.insert(probes.end(), {s, std::nextafter(s, -1.0), std::nextafter(s, 1e9), s + 0.0625});
  std::sort(probes.begin(), probes.end());
  bool mono = true, counts = true;
  double prev = 2.0;
  for (double nc : probes) {
    const double pv = pool.p_value(nc);
    mono = mono && pv <= prev;
    prev = pv;
    const double direct = static_cast<double>(std::count_if(raw.begin(), raw.end(), [&](double s) { return s >= nc; })) / 400.0;
    counts = counts && pv == direct;
  }
  note("worst |F(t) - t| over 5 seeds x 9 thresholds: %.4f", worst);
  note("monotone over %zu probes: %s; matches direct counting: %s", probes.size(), mono ? "yes" : "no",
       counts ? "yes" : "no");
  verdict(5, worst <= 0.05 && mono && counts, "p-values: calibrated within 0.05 at t = 0.1..0.9, monotone in nc");
}

void stability_criterion() {
  const double s1 = stability_score(trace_from_indices({8, 8, 8, 8, 8, 8}));
  const double s2 = stability_score(trace_from_indices({8, 2, 3, 1, 3, 1}));
  const double s3 = stability_score(trace_from_indices({8, 6, 8, 8, 8, 9}));
  note("S = %.17g, %.17g, %.17g", s1, s2, s3);
  verdict(6, s1 == 1.0 && s2 == 0.0 && std::abs(s3 - 0.4) <= 1e-12, "stability: 1, 0, 0.4 on the three layer sequences");
}

void fusion_algebra_criterion() {
  Rng rng = make_rng(7, "acceptance_fusion");
  double worst_sum = 0;
  std::size_t unclipped = 0, clipped = 0;
  bool clip_exact = true;
  for (int i = 0; i < 20000; ++i) {
    const double pa = uniform01(rng), pb = uniform01(rng), sa = uniform01(rng), sb = uniform01(rng);
    for (auto rule : {ClipRule::modality_a, ClipRule::either}) {
      const auto u = fusion_weights(pa, pb, sa, sb, {0.7, rule});
      const double wa = pa / (pa + pb) * sa, wb = pb / (pa + pb) * sb;
      const double oracle_a = wa / (wa + wb);
      const bool should_clip = rule == ClipRule::modality_a ? oracle_a > 0.7 : std::max(oracle_a, 1 - oracle_a) > 0.7;
      if (should_clip != u.clipped && std::abs(std::max(oracle_a, 1 - oracle_a) - 0.7) > 1e-12) clip_exact = false;
      if (u.clipped) {
        ++clipped;
        clip_exact = clip_exact && u.a.w == 0.5 && u.b.w == 0.5;
      } else {
        ++unclipped;
        worst_sum = std::max(worst_sum, std::abs(u.a.w + u.b.w - 1.0));
      }
    }
  }
  bool sum_exact = true;
  for (int i = 0; i < 2000; ++i) {
    const auto fa = normal_vector(rng, 16, 10.0), fb = normal_vector(rng, 16, 10.0);
    const auto f = fuse_features(fa, fb, {0.5, 0.5});
    for (std::size_t k = 0; k < 16; ++k) sum_exact = sum_exact && f[k] == fa[k] + fb[k];
  }
  note("%zu unclipped cases, worst |W_A + W_B - 1| = %.3g; %zu clipped cases exact: %s", unclipped, worst_sum, clipped,
       clip_exact ? "yes" : "no");
  note("static fusion equals the element-wise sum bit for bit: %s", sum_exact ? "yes" : "no");
  verdict(7, worst_sum <= 1e-12 && clip_exact && sum_exact,
          "fusion weights sum to 1, clip above 0.7 gives (0.5, 0.5), equal weights give the exact sum");
}

struct SimRuns {
  std::vector<SimWorld> worlds;
};

void simulator_ordering_criterion(const SimRuns& sim) {
  bool ok = true;
  for (auto kind : {CorruptionKind::blackout_a, CorruptionKind::noise_a, CorruptionKind::dropout_b}) {
    std::vector<double> diffs;
    for (std::size_t s = 0; s < sim.worlds.size(); ++s) {
      const auto r = run_condition(sim.worlds[s], CorruptionSpec::with_default_severity(kind), s);
      diffs.push_back(r.adaptive_fusion.accuracy - r.static_fusion.accuracy);
    }
    const double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / diffs.size();
    const double p = one_sided_paired_p(diffs);
    const bool good = mean >= 0.0 && p < 0.05;
    ok = ok && good;
    note("%-11s mean adaptive - static %+.2f pp, one-sided paired p = %.3g%s", std::string(to_string(kind)).c_str(),
         100 * mean, p, good ? "" : "  <--");
  }
  double clean = 0;
  for (std::size_t s = 0; s < sim.worlds.size(); ++s) {
    const auto r = run_condition(sim.worlds[s], {CorruptionKind::none, 0.0}, s);
    clean += (r.adaptive_fusion.accuracy - r.static_fusion.accuracy) / sim.worlds.size();
  }
  note("none        mean adaptive - static %+.2f pp", 100 * clean);
  verdict(8, ok && clean >= -0.01, "simulator: adaptive beats static under corruption (p < 0.05), within 1 pp when clean");
}

void findings_criterion(const SimRuns& sim) {
  int nc_hits = 0, s_hits = 0;
  for (std::size_t s = 0; s < sim.worlds.size(); ++s) {
    const auto r = run_condition(sim.worlds[s], CorruptionSpec::with_default_severity(CorruptionKind::noise_a), s);
    const auto& a = r.adaptive_fusion;
    nc_hits += a.mean_nc_a > a.mean_nc_b;
    s_hits += a.mean_s_a < a.mean_s_b;
    note("seed %zu: NC A %.3f B %.3f | S A %.3f B %.3f", s, a.mean_nc_a, a.mean_nc_b, a.mean_s_a, a.mean_s_b);
  }
  note("noise_A: NC higher on the corrupted modality in %d/10, S lower in %d/10", nc_hits, s_hits);
  verdict(9, nc_hits >= 9 && s_hits >= 9, "findings: corrupted modality has higher NC and lower S in >= 9/10 seeds");
}

void optimal_region_criterion(const SimRuns& sim) {
  int inside = 0, total = 0;
  for (auto kind : {CorruptionKind::none, CorruptionKind::blackout_a})
    for (std::size_t s = 0; s < 5; ++s) {
      const auto r = run_condition(sim.worlds[s], CorruptionSpec::with_default_severity(kind), s, {}, true);
      const double w = r.adaptive_fusion.mean_w_a;
      const bool in = r.sweep->contains(w);
      const auto [lo, hi] = r.sweep->region_bounds();
      inside += in;
      ++total;
      note("%-10s seed %zu: mean W_A %.3f, region [%.1f, %.1f] peak %.3f%s", std::string(to_string(kind)).c_str(), s, w,
           lo, hi, r.sweep->peak, in ? "" : "  (outside)");
    }
  note("inside in %d/%d combinations", inside, total);
  verdict(10, inside >= 8, "optimal region: adaptive mean weight inside the swept region in >= 8/10 combinations");
}

int run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" + COCOON_CLI_PATH + "' " + args + " > /dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

void determinism_criterion(const SimRuns& sim) {
  const auto root = fs::temp_directory_path() / "cocoon_acceptance_cli";
  fs::remove_all(root);
  const std::vector<std::string> commands = {
      "train-aligner --config sim.cfg --seed 11 -o al.cocoon.json",
      "calibrate --config sim.cfg --artifact al.cocoon.json -o cal.cocoon.json",
      "simulate --config sim.cfg --artifact cal.cocoon.json --seed 11 --corruption blackout_A -o sim_result.json",
      "simulate --config sim.cfg --seed 11 --corruption noise_A -o fresh.json",
      "sweep --config sim.cfg --artifact cal.cocoon.json --seed 11 --corruption blackout_A -o sweep.csv",
      "coverage --config cov.cfg --seed 11 --out-dir cov",
      "report cov/coverage_report.json sim_result.json cal.cocoon.json -o report.txt",
  };
  bool codes = true;
  for (const char* run : {"a", "b"}) {
    const auto dir = root / run;
    fs::create_directories(dir);
    write_output(dir / "sim.cfg", "test_scenes = 8\n", true);
    write_output(dir / "cov.cfg",
                 "dataset = sinusoidal\nrows = 1500\nseeds = 2\nepochs = 20\ncocoon_epochs = 20\ncocoon_refine = 20\n",
                 true);
    for (const auto& c : commands) {
      const std::string extra = (c.rfind("coverage", 0) == 0 && std::string(run) == "b") ? " --jobs 3" : "";
      const int code = run_cli(dir, c + extra);
      if (code != 0) {
        note("exit %d from: %s", code, c.c_str());
        codes = false;
      }
    }
  }
  std::size_t compared = 0, same = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    ++compared;
    const auto other = root / "b" / rel;
    if (fs::exists(other) && read_text(e.path()) == read_text(other))
      ++same;
    else
      note("differs: %s", rel.string().c_str());
  }
  note("%zu/%zu files identical across two runs (coverage once with --jobs 3)", same, compared);

  const auto& art = sim.worlds.front().artifact;
  const auto p = root / "roundtrip.cocoon.json";
  save_artifact(p, art);
  const auto back = load_artifact(p);
  const bool round = back == art && artifact_to_string(back) == read_text(p);
  note("artifact round trip exact: %s", round ? "yes" : "no");
  verdict(11, codes && compared > 0 && same == compared && round,
          "determinism: CLI outputs bit-identical for fixed config and seed; artifact round trip exact");
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  coverage_reproduction();
  geometric_median_criterion();
  gradient_criterion();
  joint_training_criterion();
  p_value_criterion();
  stability_criterion();
  fusion_algebra_criterion();

  SimRuns sim;
  for (std::uint64_t s = 0; s < 10; ++s) sim.worlds.push_back(make_sim_world(SimConfig{}, s));
  simulator_ordering_criterion(sim);
  findings_criterion(sim);
  optimal_region_criterion(sim);
  determinism_criterion(sim);

  std::printf("%d criteria failed, %.0f s total\n", failures, seconds_since(t0));
  return std::min(failures, 100);
}
