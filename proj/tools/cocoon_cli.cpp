// cocoon_cli: offline preparation, coverage runs, fusion simulation and reports.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error (unknown flag or
// subcommand), 3 malformed config / input or missing artifact, 4 format
// version mismatch, 5 output exists and --force was not given.

#include <atomic>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>

#include "cocoon/coverage.hpp"
#include "cocoon/fusion_sim.hpp"
#include "cocoon/io.hpp"

namespace fs = std::filesystem;
using namespace cocoon;

namespace {

constexpr int kResultFormatVersion = 1;

std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

// ---------------------------------------------------------------------------
// Simulator settings <-> key = value

struct SimField {
  std::string key;
  bool world;  // fixed by the artifact once trained
  std::function<std::string(const SimConfig&)> show;
  std::function<void(SimConfig&, const KeyValueConfig&)> load;
};

SimField real_field(std::string key, bool world, double& (*ref)(SimConfig&)) {
  return {key, world, [ref](SimConfig c) { return num(ref(c)); },
          [key, ref](SimConfig& c, const KeyValueConfig& kv) { ref(c) = kv.get_double(key, ref(c)); }};
}

SimField count_field(std::string key, bool world, std::size_t& (*ref)(SimConfig&)) {
  return {key, world, [ref](SimConfig c) { return std::to_string(ref(c)); },
          [key, ref](SimConfig& c, const KeyValueConfig& kv) { ref(c) = kv.get_uint(key, ref(c)); }};
}

const std::vector<SimField>& sim_fields() {
  static const std::vector<SimField> fields = [] {
    std::vector<SimField> f;
    f.push_back(count_field("num_queries", true, [](SimConfig& c) -> std::size_t& { return c.scene.num_queries; }));
    f.push_back(count_field("num_classes", true, [](SimConfig& c) -> std::size_t& { return c.scene.num_classes; }));
    f.push_back(count_field("num_layers", true, [](SimConfig& c) -> std::size_t& { return c.scene.num_layers; }));
    f.push_back(count_field("feature_dim", true, [](SimConfig& c) -> std::size_t& { return c.scene.feature_dim; }));
    f.push_back(real_field("matched_fraction", true, [](SimConfig& c) -> double& { return c.scene.matched_fraction; }));
    f.push_back(real_field("shared_noise", true, [](SimConfig& c) -> double& { return c.scene.shared_noise; }));
    f.push_back(real_field("modality_noise", true, [](SimConfig& c) -> double& { return c.scene.modality_noise; }));
    f.push_back(real_field("layer_noise", true, [](SimConfig& c) -> double& { return c.scene.layer_noise; }));
    f.push_back(real_field("covariance_scale", true, [](SimConfig& c) -> double& { return c.scene.covariance_scale; }));
    f.push_back(real_field("background_scale", true, [](SimConfig& c) -> double& { return c.scene.background_scale; }));
    f.push_back(real_field("mean_scale", true, [](SimConfig& c) -> double& { return c.shape.mean_scale; }));
    f.push_back(real_field("mean_offset", true, [](SimConfig& c) -> double& { return c.shape.mean_offset; }));
    f.push_back(real_field("pair_distance", true, [](SimConfig& c) -> double& { return c.shape.pair_distance; }));
    f.push_back(count_field("train_scenes", true, [](SimConfig& c) -> std::size_t& { return c.train.train_scenes; }));
    f.push_back(count_field("calibration_scenes", true,
                            [](SimConfig& c) -> std::size_t& { return c.train.calibration_scenes; }));
    f.push_back(count_field("aligned_dim", true, [](SimConfig& c) -> std::size_t& { return c.train.aligned_dim; }));
    f.push_back(count_field("aligner_hidden", true, [](SimConfig& c) -> std::size_t& { return c.train.aligner_hidden; }));
    f.push_back({"aligner_activation", true,
                 [](const SimConfig& c) { return std::string(to_string(c.train.aligner_activation)); },
                 [](SimConfig& c, const KeyValueConfig& kv) {
                   const auto s = kv.get_string("aligner_activation", std::string(to_string(c.train.aligner_activation)));
                   try {
                     c.train.aligner_activation = activation_from_string(s);
                   } catch (const std::exception&) {
                     throw ConfigError("key 'aligner_activation': unknown activation '" + s + "'");
                   }
                 }});
    f.push_back(count_field("epochs", true, [](SimConfig& c) -> std::size_t& { return c.train.joint.epochs; }));
    f.push_back(real_field("learning_rate", true, [](SimConfig& c) -> double& { return c.train.joint.learning_rate; }));
    f.push_back(count_field("refine_iterations", true,
                            [](SimConfig& c) -> std::size_t& { return c.train.joint.refine_iterations; }));
    f.push_back(count_field("head_epochs", true, [](SimConfig& c) -> std::size_t& { return c.train.head_epochs; }));
    f.push_back(real_field("head_learning_rate", true,
                           [](SimConfig& c) -> double& { return c.train.head_learning_rate; }));
    f.push_back(real_field("head_weight_decay", true, [](SimConfig& c) -> double& { return c.train.head_weight_decay; }));
    f.push_back(count_field("test_scenes", false, [](SimConfig& c) -> std::size_t& { return c.test_scenes; }));
    f.push_back(real_field("clip_threshold", false, [](SimConfig& c) -> double& { return c.policy.clip_threshold; }));
    f.push_back({"clip_rule", false,
                 [](const SimConfig& c) {
                   return std::string(c.policy.clip_rule == ClipRule::modality_a ? "modality_a" : "either");
                 },
                 [](SimConfig& c, const KeyValueConfig& kv) {
                   const auto s = kv.get_string("clip_rule", "modality_a");
                   if (s == "modality_a") c.policy.clip_rule = ClipRule::modality_a;
                   else if (s == "either") c.policy.clip_rule = ClipRule::either;
                   else throw ConfigError("key 'clip_rule': expected modality_a or either, got '" + s + "'");
                 }});
    return f;
  }();
  return fields;
}

// keys read outside the field table
const std::set<std::string> kSimRunKeys = {"corruption", "severity", "grid_step", "margin"};

std::set<std::string> sim_known_keys() {
  std::set<std::string> k = kSimRunKeys;
  for (const auto& f : sim_fields()) k.insert(f.key);
  return k;
}

SimConfig load_sim_config(const KeyValueConfig& kv) {
  kv.require_known(sim_known_keys());
  SimConfig c;
  for (const auto& f : sim_fields()) f.load(c, kv);
  if (c.scene.num_layers == 0 || c.scene.num_classes == 0 || c.scene.feature_dim == 0 || c.scene.num_queries == 0)
    throw ConfigError("scene sizes must be positive");
  if (c.train.train_scenes == 0 || c.train.calibration_scenes == 0 || c.test_scenes == 0)
    throw ConfigError("scene counts must be positive");
  try {
    make_scene_spec(c.scene, 0, c.shape);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(c.policy.clip_threshold >= 0.0 && c.policy.clip_threshold <= 1.0))
    throw ConfigError("clip_threshold must lie in [0, 1]");
  return c;
}

std::map<std::string, std::string> world_snapshot(const SimConfig& c) {
  std::map<std::string, std::string> m;
  for (const auto& f : sim_fields())
    if (f.world) m[f.key] = f.show(c);
  return m;
}

std::map<std::string, std::string> full_snapshot(const SimConfig& c) {
  std::map<std::string, std::string> m;
  for (const auto& f : sim_fields()) m[f.key] = f.show(c);
  return m;
}

/// World settings come from the artifact; the user's config may repeat them but not contradict them.
SimConfig reconcile_with_artifact(const KeyValueConfig& user, const CalibrationArtifact& art) {
  KeyValueConfig merged;
  for (const auto& [k, v] : user.values()) merged.set(k, v);
  for (const auto& f : sim_fields()) {
    if (!f.world) continue;
    auto it = art.config.find(f.key);
    if (it == art.config.end()) throw ConfigError("artifact config snapshot lacks '" + f.key + "'");
    if (user.has(f.key)) {
      // compare normalized values
      SimConfig a, b;
      KeyValueConfig one;
      one.set(f.key, user.get_string(f.key, ""));
      f.load(a, one);
      KeyValueConfig two;
      two.set(f.key, it->second);
      f.load(b, two);
      if (f.show(a) != f.show(b))
        throw ConfigError("config key '" + f.key + "' = " + f.show(a) + " contradicts the artifact (" + f.show(b) + ")");
    }
    merged.set(f.key, it->second);
  }
  return load_sim_config(merged);
}

CorruptionSpec corruption_from(const KeyValueConfig& kv, const std::string& flag_kind, std::optional<double> flag_sev) {
  const std::string kind_name = flag_kind.empty() ? kv.get_string("corruption", "none") : flag_kind;
  CorruptionSpec c;
  try {
    c = CorruptionSpec::with_default_severity(corruption_from_string(kind_name));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.severity = flag_sev ? *flag_sev : kv.get_double("severity", c.severity);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Shared command plumbing

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool force = false;
  unsigned jobs = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value config file (every key has a default)");
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_flag("--force", c.force, "overwrite existing outputs");
  cmd->add_option("--jobs", c.jobs, "parallel workers for independent trials")->check(CLI::PositiveNumber);
}

KeyValueConfig load_config(const Common& c) {
  return c.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(c.config);
}

void ensure_writable(const std::vector<fs::path>& outputs, bool force) {
  if (force) return;
  for (const auto& p : outputs)
    if (fs::exists(p)) throw OutputExistsError("refusing to overwrite '" + p.string() + "' (pass --force)");
}

CalibrationArtifact read_artifact(const std::string& path) {
  if (path.empty()) throw MissingArtifactError("missing artifact: no --artifact path given");
  try {
    return load_artifact(path);
  } catch (const MissingArtifactError&) {
    throw MissingArtifactError("missing artifact '" + path + "'");
  }
}

Json summary_json(const ConditionSummary& s) {
  return {{"matched", s.matched},
          {"background", s.background},
          {"accuracy", s.accuracy},
          {"mean_w_a", s.mean_w_a},
          {"mean_w_b", s.mean_w_b},
          {"mean_abs_dev_w_a", s.mean_abs_dev_w_a},
          {"clip_rate_matched", s.clip_rate_matched},
          {"clip_rate_background", s.clip_rate_background},
          {"mean_nc_a", s.mean_nc_a},
          {"mean_nc_b", s.mean_nc_b},
          {"mean_s_a", s.mean_s_a},
          {"mean_s_b", s.mean_s_b},
          {"mean_p_a", s.mean_p_a},
          {"mean_p_b", s.mean_p_b}};
}

Json modality_json(const ModalityUncertainty& m) {
  return {{"nc", m.nc}, {"p", m.p}, {"q", m.q}, {"s", m.s}, {"w", m.w}};
}

std::vector<double> weight_grid(double step) {
  if (!(step > 0.0 && step <= 1.0)) throw ConfigError("grid_step must lie in (0, 1]");
  std::vector<double> g;
  const auto n = static_cast<std::size_t>(std::llround(1.0 / step));
  for (std::size_t i = 0; i <= n; ++i) g.push_back(std::min(1.0, static_cast<double>(i) * step));
  if (g.back() < 1.0) g.push_back(1.0);
  return g;
}

// ---------------------------------------------------------------------------
// Commands

struct ArtifactArgs {
  Common common;
  std::string artifact;
  std::string output;
};

int cmd_train_aligner(const ArtifactArgs& a) {
  const auto kv = load_config(a.common);
  const SimConfig cfg = load_sim_config(kv);
  ensure_writable({a.output}, a.common.force);
  const SceneSpec spec = sim_world_spec(cfg, a.common.seed);
  auto art = train_sim_aligner(spec, cfg.train, a.common.seed);
  art.config = world_snapshot(cfg);
  art.config["stage"] = "aligner";
  save_artifact(a.output, art, a.common.force);
  std::cout << "train-aligner: " << art.fis.num_classes() << " feature impressions (min distance "
            << art.fis.min_pairwise_distance() << "), seed " << art.seed << " -> " << a.output << "\n";
  return 0;
}

int cmd_calibrate(const ArtifactArgs& a) {
  const auto kv = load_config(a.common);
  kv.require_known(sim_known_keys());
  auto art = read_artifact(a.artifact);
  const SimConfig cfg = reconcile_with_artifact(kv, art);
  ensure_writable({a.output}, a.common.force);
  const SceneSpec spec = sim_world_spec(cfg, art.seed);
  art = calibrate_sim_artifact(std::move(art), spec, cfg.train);
  art.config["stage"] = "calibrated";
  save_artifact(a.output, art, a.common.force);
  std::cout << "calibrate: " << art.nc_pools.size() << " layer pools of " << art.nc_pools.front().size()
            << " scores, seed " << art.seed << " -> " << a.output << "\n";
  return 0;
}

struct SimArgs {
  Common common;
  std::string artifact;
  std::string output;
  std::string corruption;
  std::optional<double> severity;
};

SimWorld world_for(const SimArgs& a, const KeyValueConfig& kv, SimConfig& cfg) {
  if (a.artifact.empty()) {
    cfg = load_sim_config(kv);
    return make_sim_world(cfg, a.common.seed);
  }
  kv.require_known(sim_known_keys());
  auto art = read_artifact(a.artifact);
  if (!art.classifier || art.nc_pools.empty())
    throw ConfigError("artifact '" + a.artifact + "' is not calibrated (run calibrate first)");
  cfg = reconcile_with_artifact(kv, art);
  return sim_world_with_artifact(cfg, std::move(art));
}

int cmd_simulate(const SimArgs& a) {
  const auto kv = load_config(a.common);
  const auto corruption = corruption_from(kv, a.corruption, a.severity);
  const auto grid = weight_grid(kv.get_double("grid_step", 0.1));
  const double margin = kv.get_double("margin", 0.005);
  ensure_writable({a.output}, a.common.force);
  SimConfig cfg;
  const SimWorld world = world_for(a, kv, cfg);
  const auto r = run_condition(world, corruption, a.common.seed, cfg.policy, true, grid, margin);

  Json queries = Json::array();
  for (std::size_t s = 0; s < r.adaptive_outputs.size(); ++s)
    for (std::size_t q = 0; q < r.adaptive_outputs[s].queries.size(); ++q) {
      const auto& ad = r.adaptive_outputs[s].queries[q];
      const auto& u = ad.uncertainty;
      queries.push_back({{"scene", s},
                         {"query", q},
                         {"label", ad.label ? Json(*ad.label) : Json(nullptr)},
                         {"predicted_static", r.static_outputs[s].queries[q].predicted},
                         {"predicted_adaptive", ad.predicted},
                         {"a", modality_json(u.a)},
                         {"b", modality_json(u.b)},
                         {"clipped", u.clipped},
                         {"degenerate", u.degenerate}});
    }
  const auto& sw = *r.sweep;
  Json points = Json::array();
  for (const auto& p : sw.points) points.push_back({{"w_a", p.w_a}, {"accuracy", p.accuracy}, {"in_region", p.in_region}});
  const auto [lo, hi] = sw.region_bounds();
  Json out{{"format", "cocoon-sim-result"},
           {"format_version", kResultFormatVersion},
           {"seed", a.common.seed},
           {"artifact_seed", world.artifact.seed},
           {"config", full_snapshot(cfg)},
           {"corruption", {{"kind", std::string(to_string(corruption.kind))}, {"severity", corruption.severity}}},
           {"static", summary_json(r.static_fusion)},
           {"adaptive", summary_json(r.adaptive_fusion)},
           {"mean_weight", {{"a", r.adaptive_fusion.mean_w_a}, {"b", r.adaptive_fusion.mean_w_b}}},
           {"sweep",
            {{"peak", sw.peak},
             {"margin", sw.margin},
             {"region", {lo, hi}},
             {"adaptive_weight_in_region", sw.contains(r.adaptive_fusion.mean_w_a)},
             {"points", points}}},
           {"queries", queries}};
  write_output(a.output, out.dump(1) + "\n", a.common.force);
  std::cout << "simulate: " << to_string(corruption.kind) << " static " << r.static_fusion.accuracy << " adaptive "
            << r.adaptive_fusion.accuracy << " mean W_A " << r.adaptive_fusion.mean_w_a << ", seed " << a.common.seed
            << " -> " << a.output << "\n";
  return 0;
}

int cmd_sweep(const SimArgs& a) {
  const auto kv = load_config(a.common);
  const auto corruption = corruption_from(kv, a.corruption, a.severity);
  const auto grid = weight_grid(kv.get_double("grid_step", 0.1));
  const double margin = kv.get_double("margin", 0.005);
  ensure_writable({a.output}, a.common.force);
  SimConfig cfg;
  const SimWorld world = world_for(a, kv, cfg);
  const auto r = run_condition(world, corruption, a.common.seed, cfg.policy, true, grid, margin);
  std::ostringstream csv;
  csv << "w_a,accuracy,in_region,corruption,seed\n";
  for (const auto& p : r.sweep->points)
    csv << num(p.w_a) << ',' << num(p.accuracy) << ',' << (p.in_region ? 1 : 0) << ',' << to_string(corruption.kind)
        << ',' << a.common.seed << '\n';
  write_output(a.output, csv.str(), a.common.force);
  const auto [lo, hi] = r.sweep->region_bounds();
  std::cout << "sweep: " << to_string(corruption.kind) << " peak " << r.sweep->peak << " region [" << lo << ", " << hi
            << "] adaptive W_A " << r.adaptive_fusion.mean_w_a
            << (r.sweep->contains(r.adaptive_fusion.mean_w_a) ? " inside" : " outside") << ", seed " << a.common.seed
            << " -> " << a.output << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// coverage

const std::set<std::string> kCoverageKeys = {
    "dataset",       "data_dir",       "alpha",         "seeds",           "rows",
    "data_seed",     "test_size",      "proper_to_calibration", "epochs", "batch_size",
    "learning_rate", "cocoon_epochs",  "cocoon_refine", "cocoon_learning_rate", "band_samples",
    "y_grid_points", "surrogate_steps", "surrogate_learning_rate"};

struct CoverageArgs {
  Common common;
  std::string out_dir = ".";
};

struct NamedDataset {
  std::string name;
  LabeledSet data;
};

std::vector<NamedDataset> coverage_datasets(const KeyValueConfig& kv) {
  const std::string which = kv.get_string("dataset", "all");
  const std::size_t rows = kv.get_uint("rows", 3500);
  const std::uint64_t data_seed = kv.get_uint("data_seed", 0);
  std::vector<NamedDataset> out;
  if (which == "all") {
    for (auto k : kSyntheticKinds) out.push_back({std::string(to_string(k)), make_synthetic(k, rows, data_seed)});
    return out;
  }
  for (auto k : kSyntheticKinds)
    if (which == to_string(k)) return {{which, make_synthetic(k, rows, data_seed)}};
  fs::path path = which;
  if (!fs::exists(path) && path.is_relative()) {
    std::string root = kv.get_string("data_dir", "");
    if (root.empty())
      if (const char* env = std::getenv("COCOON_DATA_DIR")) root = env;
    if (!root.empty()) path = fs::path(root) / which;
  }
  try {
    return {{which, load_dataset_csv(path)}};
  } catch (const CsvError& e) {
    throw ConfigError("dataset '" + path.string() + "': " + e.what());
  }
}

TrialConfig trial_config(const KeyValueConfig& kv) {
  TrialConfig t;
  t.alpha = kv.get_double("alpha", t.alpha);
  if (!(t.alpha > 0.0 && t.alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  t.split.test_size = kv.get_uint("test_size", t.split.test_size);
  t.split.proper_to_calibration = kv.get_uint("proper_to_calibration", t.split.proper_to_calibration);
  t.regression.epochs = kv.get_uint("epochs", t.regression.epochs);
  t.regression.batch_size = kv.get_uint("batch_size", t.regression.batch_size);
  t.regression.learning_rate = kv.get_double("learning_rate", t.regression.learning_rate);
  t.cocoon.train.epochs = kv.get_uint("cocoon_epochs", t.cocoon.train.epochs);
  t.cocoon.train.refine_iterations = kv.get_uint("cocoon_refine", t.cocoon.train.refine_iterations);
  t.cocoon.train.learning_rate = kv.get_double("cocoon_learning_rate", t.cocoon.train.learning_rate);
  t.band_samples = kv.get_uint("band_samples", t.band_samples);
  t.y_grid_points = kv.get_uint("y_grid_points", t.y_grid_points);
  t.surrogate.steps = kv.get_uint("surrogate_steps", t.surrogate.steps);
  t.surrogate.learning_rate = kv.get_double("surrogate_learning_rate", t.surrogate.learning_rate);
  if (t.regression.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (t.y_grid_points < 2) throw ConfigError("y_grid_points must be at least 2");
  return t;
}

/// Trials run on up to `jobs` threads; results land in trial order.
std::vector<TrialResult> run_trials(const LabeledSet& data, const TrialConfig& cfg,
                                    const std::vector<std::uint64_t>& seeds, unsigned jobs) {
  std::vector<TrialResult> results(seeds.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        results[i] = run_coverage_trial(data, cfg, seeds[i]);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(seeds.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return results;
}

int cmd_coverage(const CoverageArgs& a) {
  const auto kv = load_config(a.common);
  kv.require_known(kCoverageKeys);
  const TrialConfig cfg = trial_config(kv);
  const std::size_t n_seeds = kv.get_uint("seeds", 5);
  if (n_seeds == 0) throw ConfigError("seeds must be at least 1");
  const fs::path json_path = fs::path(a.out_dir) / "coverage_report.json";
  const fs::path csv_path = fs::path(a.out_dir) / "coverage_report.csv";
  ensure_writable({json_path, csv_path}, a.common.force);
  const auto datasets = coverage_datasets(kv);

  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < n_seeds; ++i) seeds.push_back(derive_seed(a.common.seed, "coverage_trial", i));

  Json reports = Json::array();
  std::ostringstream csv;
  csv << "dataset,method,mean,std,abs_diff,mean_width,alpha,n_seeds,seed\n";
  for (const auto& d : datasets) {
    if (d.data.size() < cfg.split.test_size + cfg.split.proper_to_calibration + 1)
      throw ConfigError("dataset '" + d.name + "' has " + std::to_string(d.data.size()) + " rows, too few for the split");
    const auto trials = run_trials(d.data, cfg, seeds, a.common.jobs);
    const auto rep = coverage_report(trials, cfg.alpha, d.name);
    Json methods = Json::array(), trial_json = Json::array();
    for (const auto& m : rep.methods) {
      methods.push_back({{"method", m.method},
                         {"mean", m.mean},
                         {"std", m.std},
                         {"abs_diff", m.abs_diff},
                         {"mean_width", m.mean_width}});
      csv << d.name << ',' << m.method << ',' << num(m.mean) << ',' << num(m.std) << ',' << num(m.abs_diff) << ','
          << num(m.mean_width) << ',' << num(cfg.alpha) << ',' << rep.n_seeds << ',' << a.common.seed << '\n';
    }
    for (const auto& t : trials) {
      Json ms = Json::array();
      for (const auto& m : t.methods) ms.push_back({{"method", m.method}, {"coverage", m.coverage}, {"mean_width", m.mean_width}});
      trial_json.push_back({{"seed", t.seed}, {"skipped", t.skipped}, {"reason", t.reason}, {"methods", ms}});
    }
    reports.push_back({{"dataset", d.name},
                       {"rows", d.data.size()},
                       {"n_seeds", rep.n_seeds},
                       {"methods", methods},
                       {"trials", trial_json}});
    std::cout << "coverage: " << d.name;
    for (const auto& m : rep.methods) std::cout << "  " << m.method << " " << m.mean << " +- " << m.std;
    std::cout << "\n";
  }
  std::map<std::string, std::string> snapshot;
  for (const auto& k : kCoverageKeys)
    if (kv.has(k)) snapshot[k] = kv.get_string(k, "");
  Json out{{"format", "cocoon-coverage-report"},
           {"format_version", kResultFormatVersion},
           {"seed", a.common.seed},
           {"alpha", cfg.alpha},
           {"config", snapshot},
           {"datasets", reports}};
  write_output(json_path, out.dump(1) + "\n", a.common.force);
  write_output(csv_path, csv.str(), a.common.force);
  std::cout << "coverage: seed " << a.common.seed << " -> " << json_path.string() << ", " << csv_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string output;
  bool force = false;
};

std::string report_section(const std::string& path) {
  if (!fs::exists(path)) throw MissingArtifactError("missing input '" + path + "'");
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
  std::ostringstream os;
  try {
    const std::string format = j.at("format").get<std::string>();
    if (format == "cocoon-calibration") {
      load_artifact(path);  // full validation, version included
    } else {
      const int version = j.at("format_version").get<int>();
      if (version != kResultFormatVersion)
        throw VersionError("'" + path + "' has format_version " + std::to_string(version) + " (expected " +
                           std::to_string(kResultFormatVersion) + ")");
    }
    if (format == "cocoon-coverage-report") {
      os << "coverage report " << path << " (seed " << j.at("seed") << ", alpha " << j.at("alpha").get<double>()
         << ")\n";
      os << "  dataset          method      mean%    std%   |diff|   width\n";
      for (const auto& d : j.at("datasets"))
        for (const auto& m : d.at("methods")) {
          char line[160];
          std::snprintf(line, sizeof line, "  %-16s %-10s %7.2f %7.2f %7.2f %8.4f\n",
                        d.at("dataset").get<std::string>().c_str(), m.at("method").get<std::string>().c_str(),
                        m.at("mean").get<double>(), m.at("std").get<double>(), m.at("abs_diff").get<double>(),
                        m.at("mean_width").get<double>());
          os << line;
        }
    } else if (format == "cocoon-sim-result") {
      const auto& st = j.at("static");
      const auto& ad = j.at("adaptive");
      char line[256];
      std::snprintf(line, sizeof line,
                    "simulation %s (seed %llu, corruption %s)\n  accuracy static %.4f adaptive %.4f\n"
                    "  mean W_A %.3f  clip rate matched %.3f background %.3f\n"
                    "  NC a/b %.3f/%.3f  S a/b %.3f/%.3f  P a/b %.3f/%.3f\n",
                    path.c_str(), static_cast<unsigned long long>(j.at("seed").get<std::uint64_t>()),
                    j.at("corruption").at("kind").get<std::string>().c_str(), st.at("accuracy").get<double>(),
                    ad.at("accuracy").get<double>(), ad.at("mean_w_a").get<double>(),
                    ad.at("clip_rate_matched").get<double>(), ad.at("clip_rate_background").get<double>(),
                    ad.at("mean_nc_a").get<double>(), ad.at("mean_nc_b").get<double>(), ad.at("mean_s_a").get<double>(),
                    ad.at("mean_s_b").get<double>(), ad.at("mean_p_a").get<double>(), ad.at("mean_p_b").get<double>());
      os << line;
      const auto& sw = j.at("sweep");
      os << "  optimal region [" << sw.at("region")[0].get<double>() << ", " << sw.at("region")[1].get<double>()
         << "], adaptive weight " << (sw.at("adaptive_weight_in_region").get<bool>() ? "inside" : "outside") << "\n";
    } else if (format == "cocoon-calibration") {
      os << "artifact " << path << " (seed " << j.at("seed") << ", stage "
         << j.at("config").value("stage", std::string("?")) << ", " << j.at("nc_pools").size() << " pools)\n";
    } else {
      throw ConfigError("'" + path + "' has unknown format '" + format + "'");
    }
  } catch (const Json::exception& e) {
    throw ConfigError("'" + path + "' is malformed: " + e.what());
  }
  return os.str();
}

int cmd_report(const ReportArgs& a) {
  if (!a.output.empty()) ensure_writable({a.output}, a.force);
  std::string text;
  for (const auto& in : a.inputs) text += report_section(in);
  std::cout << text;
  if (!a.output.empty()) write_output(a.output, text, a.force);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal uncertainty-guided fusion: calibration, coverage and simulation"};
  app.require_subcommand(1);
  app.allow_extras(false);

  ArtifactArgs train_args;
  train_args.output = "aligner.cocoon.json";
  auto* train = app.add_subcommand("train-aligner", "train the aligner and feature impressions on simulated scenes");
  add_common(train, train_args.common);
  train->add_option("--output,-o", train_args.output, "artifact path");

  ArtifactArgs calib_args;
  calib_args.artifact = "aligner.cocoon.json";
  calib_args.output = "calibration.cocoon.json";
  auto* calib = app.add_subcommand("calibrate", "build per-layer NC pools and the frozen head");
  add_common(calib, calib_args.common);
  calib->add_option("--artifact", calib_args.artifact, "aligner artifact from train-aligner");
  calib->add_option("--output,-o", calib_args.output, "calibrated artifact path");

  CoverageArgs cov_args;
  auto* cov = app.add_subcommand("coverage", "split-conformal coverage of Basic CP, Feature CP and Cocoon-NC");
  add_common(cov, cov_args.common);
  cov->add_option("--out-dir", cov_args.out_dir, "directory for coverage_report.{json,csv}");

  SimArgs sim_args;
  sim_args.output = "sim_result.json";
  auto* sim = app.add_subcommand("simulate", "static vs adaptive fusion on simulated scenes");
  add_common(sim, sim_args.common);
  sim->add_option("--artifact", sim_args.artifact, "calibrated artifact (trained from --seed when omitted)");
  sim->add_option("--corruption", sim_args.corruption, "none, blackout_A, noise_A, noise_B, dropout_B, misalign");
  sim->add_option("--severity", sim_args.severity, "corruption severity");
  sim->add_option("--output,-o", sim_args.output, "result path");

  SimArgs sweep_args;
  sweep_args.output = "sweep.csv";
  auto* sweep = app.add_subcommand("sweep", "accuracy over a fixed-weight grid and the optimal region");
  add_common(sweep, sweep_args.common);
  sweep->add_option("--artifact", sweep_args.artifact, "calibrated artifact (trained from --seed when omitted)");
  sweep->add_option("--corruption", sweep_args.corruption, "corruption kind");
  sweep->add_option("--severity", sweep_args.severity, "corruption severity");
  sweep->add_option("--output,-o", sweep_args.output, "CSV path");

  ReportArgs report_args;
  auto* report = app.add_subcommand("report", "summarize coverage reports, simulation results and artifacts");
  report->add_option("inputs", report_args.inputs, "JSON files to summarize")->required();
  report->add_option("--output,-o", report_args.output, "also write the summary to this file");
  report->add_flag("--force", report_args.force, "overwrite the summary file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train) return cmd_train_aligner(train_args);
    if (*calib) return cmd_calibrate(calib_args);
    if (*cov) return cmd_coverage(cov_args);
    if (*sim) return cmd_simulate(sim_args);
    if (*sweep) return cmd_sweep(sweep_args);
    if (*report) return cmd_report(report_args);
  } catch (const VersionError& e) {
    std::cerr << "error: version mismatch: " << e.what() << "\n";
    return 4;
  } catch (const MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const OutputExistsError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
