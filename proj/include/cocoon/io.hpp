#pragma once

// Flat key=value configs, numeric CSV datasets, versioned JSON artifacts and
// write-once output files.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cocoon/aligner.hpp"
#include "cocoon/baselines.hpp"
#include "cocoon/conformal.hpp"
#include "cocoon/numerics.hpp"

namespace cocoon {

using Json = nlohmann::json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct OutputExistsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Refuses to replace an existing file unless force is set.
inline void write_output(const std::filesystem::path& path, const std::string& content, bool force) {
  if (!force && std::filesystem::exists(path))
    throw OutputExistsError("refusing to overwrite '" + path.string() + "' (pass --force)");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << content;
}

// ---------------------------------------------------------------------------
// key = value configuration

class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
      if (cfg.values_.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
      cfg.values_[key] = trim(t.substr(eq + 1));
    }
    return cfg;
  }

  static KeyValueConfig load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
    return parse(read_text(path));
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Rejects keys outside the documented schema.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': '" + it->second + "' is not a number");
    }
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& s = it->second;
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("key '" + key + "': '" + s + "' is not a non-negative integer");
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': '" + s + "' is out of range");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("key '" + key + "': '" + it->second + "' is not a boolean");
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// CSV datasets: header row, numeric cells, target in the last column

struct CsvError : std::runtime_error {
  CsvError(const std::string& msg, std::size_t r, std::size_t c) : std::runtime_error(msg), row(r), col(c) {}
  std::size_t row;  // 1-based data row (header excluded); 0 for file-level errors
  std::size_t col;  // 1-based column
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) cells.push_back(cur);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline LabeledSet parse_dataset_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto next_line = [&]() -> bool {
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) return true;
    }
    return false;
  };
  if (!next_line()) throw CsvError("empty file", 0, 0);
  const std::size_t cols = split_csv_line(line).size();
  if (cols < 2) throw CsvError("need at least one feature column and a target column", 0, 0);
  LabeledSet d;
  std::size_t row = 0;
  while (next_line()) {
    ++row;
    auto cells = split_csv_line(line);
    if (cells.size() != cols)
      throw CsvError("row " + std::to_string(row) + " has " + std::to_string(cells.size()) + " cells, expected " +
                         std::to_string(cols),
                     row, 0);
    RealVector values(cols);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::string& cell = cells[c];
      std::size_t used = 0;
      double v = 0.0;
      bool ok = !cell.empty();
      try {
        if (ok) v = std::stod(cell, &used);
      } catch (const std::exception&) {
        ok = false;
      }
      if (ok) {
        while (used < cell.size() && (cell[used] == ' ' || cell[used] == '\t')) ++used;
        ok = used == cell.size();
      }
      if (!ok)
        throw CsvError("non-numeric cell '" + cell + "' at (row " + std::to_string(row) + ", col " +
                           std::to_string(c + 1) + ")",
                       row, c + 1);
      values[c] = v;
    }
    const double y = values.back();
    values.pop_back();
    d.push_back(std::move(values), y);
  }
  if (d.empty()) throw CsvError("no data rows", 0, 0);
  return d;
}

inline LabeledSet load_dataset_csv(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError("dataset '" + path.string() + "' does not exist");
  return parse_dataset_csv(read_text(path));
}

inline std::string dataset_to_csv(const LabeledSet& d) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t k = 0; k < d.dim(); ++k) os << "x" << k << ',';
  os << "y\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (double v : d.x[i]) os << v << ',';
    os << d.y[i] << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// JSON conversions

inline Json mlp_to_json(const MlpParams& p) {
  Json layers = Json::array();
  for (const auto& l : p.layers)
    layers.push_back({{"rows", l.weights.rows}, {"cols", l.weights.cols}, {"weights", l.weights.data}, {"bias", l.bias}});
  return {{"activation", std::string(to_string(p.activation))}, {"layers", layers}};
}

inline MlpParams mlp_from_json(const Json& j) {
  MlpParams p;
  p.activation = activation_from_string(j.at("activation").get<std::string>());
  for (const auto& l : j.at("layers")) {
    DenseLayer layer;
    layer.weights = RealMatrix(l.at("rows").get<std::size_t>(), l.at("cols").get<std::size_t>());
    layer.weights.data = l.at("weights").get<std::vector<double>>();
    layer.bias = l.at("bias").get<std::vector<double>>();
    require_dim(layer.weights.data.size(), layer.weights.rows * layer.weights.cols, "layer weights");
    require_dim(layer.bias.size(), layer.weights.rows, "layer bias");
    if (!p.layers.empty()) require_dim(layer.in_dim(), p.layers.back().out_dim(), "layer chain");
    p.layers.push_back(std::move(layer));
  }
  if (p.layers.empty()) throw std::invalid_argument("MLP without layers");
  return p;
}

inline Json pool_to_json(const NcPool& pool) {
  Json j{{"layer", pool.layer()}, {"scores", pool.scores()}};
  j["class_scope"] = pool.class_scope() ? Json(*pool.class_scope()) : Json(nullptr);
  return j;
}

inline NcPool pool_from_json(const Json& j) {
  std::optional<std::size_t> scope;
  if (!j.at("class_scope").is_null()) scope = j.at("class_scope").get<std::size_t>();
  return NcPool(j.at("scores").get<std::vector<double>>(), j.at("layer").get<std::size_t>(), scope);
}

// ---------------------------------------------------------------------------
// Calibration artifact

inline constexpr int kArtifactFormatVersion = 1;

struct CalibrationArtifact {
  int format_version = kArtifactFormatVersion;
  MlpParams aligner;
  FeatureImpressionSet fis;
  std::vector<NcPool> nc_pools;          // one per decoder layer
  std::optional<MlpParams> classifier;   // frozen head used by the simulator
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;

  void validate() const {
    cocoon::validate(fis);
    require_dim(aligner.output_dim(), fis.dim(), "artifact aligner output vs feature impressions");
    for (const auto& p : nc_pools)
      if (p.empty()) throw std::invalid_argument("artifact contains an empty NC pool");
    if (classifier) require_dim(classifier->input_dim(), aligner.input_dim(), "artifact classifier input");
  }
  bool operator==(const CalibrationArtifact&) const = default;
};

inline Json artifact_to_json(const CalibrationArtifact& a) {
  Json pools = Json::array();
  for (const auto& p : a.nc_pools) pools.push_back(pool_to_json(p));
  Json j{{"format", "cocoon-calibration"},
         {"format_version", a.format_version},
         {"seed", a.seed},
         {"config", a.config},
         {"aligner", mlp_to_json(a.aligner)},
         {"feature_impressions", a.fis.nodes},
         {"nc_pools", pools}};
  j["classifier"] = a.classifier ? mlp_to_json(*a.classifier) : Json(nullptr);
  return j;
}

inline CalibrationArtifact artifact_from_json(const Json& j) {
  const int version = j.at("format_version").get<int>();
  if (version != kArtifactFormatVersion)
    throw VersionError("artifact format_version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kArtifactFormatVersion) + ")");
  CalibrationArtifact a;
  a.format_version = version;
  a.seed = j.at("seed").get<std::uint64_t>();
  a.config = j.at("config").get<std::map<std::string, std::string>>();
  a.aligner = mlp_from_json(j.at("aligner"));
  a.fis.nodes = j.at("feature_impressions").get<std::vector<RealVector>>();
  for (const auto& p : j.at("nc_pools")) a.nc_pools.push_back(pool_from_json(p));
  if (!j.at("classifier").is_null()) a.classifier = mlp_from_json(j.at("classifier"));
  a.validate();
  return a;
}

inline std::string artifact_to_string(const CalibrationArtifact& a) { return artifact_to_json(a).dump(1) + "\n"; }

inline void save_artifact(const std::filesystem::path& path, const CalibrationArtifact& a, bool force = true) {
  a.validate();
  write_output(path, artifact_to_string(a), force);
}

inline CalibrationArtifact load_artifact(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError("missing artifact '" + path.string() + "'");
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("artifact '" + path.string() + "' is not valid JSON: " + e.what());
  }
  try {
    return artifact_from_json(j);
  } catch (const VersionError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("artifact '" + path.string() + "' is malformed: " + e.what());
  }
}

}  // namespace cocoon
