#pragma once

// Serializable configuration for an estimation run, plus the compact string
// forms used on the command line ("quantile:0.1:0.9:0.05", "ldist:shift:0.5").

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedr/bias_correction.hpp"
#include "fedr/error.hpp"
#include "fedr/inference.hpp"
#include "fedr/panel.hpp"
#include "fedr/pipeline.hpp"

namespace fedr {

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double to_number(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad number '" + s + "' in " + what);
  }
}

}  // namespace detail

// "a:b:step" expands to a range; otherwise a comma list.
inline std::vector<double> parse_number_list(const std::string& s, const std::string& what) {
  if (s.empty()) throw ConfigError("empty " + what);
  const auto colon = detail::split(s, ':');
  if (colon.size() == 3) {
    const double a = detail::to_number(colon[0], what), b = detail::to_number(colon[1], what),
                 st = detail::to_number(colon[2], what);
    if (!(st > 0.0) || b < a) throw ConfigError("bad range '" + s + "' in " + what);
    return index_range(a, b, st);
  }
  if (colon.size() != 1) throw ConfigError("bad list '" + s + "' in " + what);
  std::vector<double> out;
  for (const auto& f : detail::split(s, ',')) out.push_back(detail::to_number(f, what));
  return out;
}

inline constexpr const char* kVersion = "0.1.0";

// "sender,receiver,outcome[,cov...]" in that order.
inline CsvSchema parse_schema(const std::string& s) {
  const auto f = detail::split(s, ',');
  if (f.size() < 3) throw ConfigError("schema must list sender,receiver,outcome[,covariates...], got '" + s + "'");
  CsvSchema c{f[0], f[1], f[2], {f.begin() + 3, f.end()}};
  for (const auto& n : f)
    if (n.empty()) throw ConfigError("empty column name in schema '" + s + "'");
  return c;
}

// With no covariates listed, every column other than the identifiers and the
// outcome is taken as a covariate, in file order.
inline CsvSchema complete_schema(const std::string& path, CsvSchema schema) {
  if (!schema.covariates.empty()) return schema;
  std::ifstream in(path);
  std::string header;
  if (!in || !std::getline(in, header)) throw ConfigError("cannot read header of '" + path + "'");
  if (!header.empty() && header.back() == '\r') header.pop_back();
  for (auto name : detail::split(header, ',')) {
    name.erase(0, name.find_first_not_of(" \t\""));
    name.erase(name.find_last_not_of(" \t\"") + 1);
    if (name != schema.sender && name != schema.receiver && name != schema.outcome) schema.covariates.push_back(name);
  }
  return schema;
}

struct GridSpec {
  std::string mode = "quantile";  // quantile | equidistant | explicit
  std::vector<double> values = index_range(0.1, 0.9, 0.05);
  int count = 0;

  GridMode to_mode() const {
    if (mode == "quantile") return QuantileIndexed{values};
    if (mode == "equidistant") return Equidistant{count};
    if (mode == "explicit") return Explicit{values};
    throw ConfigError("unknown grid mode '" + mode + "'");
  }
  static GridSpec parse(const std::string& s) {
    const auto p = s.find(':');
    if (p == std::string::npos) throw ConfigError("grid must look like mode:spec, got '" + s + "'");
    GridSpec g;
    g.mode = s.substr(0, p);
    const std::string rest = s.substr(p + 1);
    if (g.mode == "equidistant") {
      g.count = static_cast<int>(detail::to_number(rest, "grid"));
      g.values.clear();
    } else {
      g.values = parse_number_list(rest, "grid");
    }
    g.to_mode();
    return g;
  }
  nlohmann::json to_json() const {
    nlohmann::json j{{"mode", mode}};
    if (mode == "equidistant") j["count"] = count;
    else j["values"] = values;
    return j;
  }
  static GridSpec from_json(const nlohmann::json& j) {
    GridSpec g;
    g.mode = j.value("mode", g.mode);
    g.values = j.value("values", mode_default(g.mode));
    g.count = j.value("count", 0);
    g.to_mode();
    return g;
  }

 private:
  static std::vector<double> mode_default(const std::string& m) {
    return m == "quantile" ? index_range(0.1, 0.9, 0.05) : std::vector<double>{};
  }
};

struct TreatmentConfig {
  std::string covariate;  // name, or a 0-based column number
  std::string kind = "log_double";
  double shift = 1.0;

  static TreatmentConfig parse(const std::string& s) {
    const auto f = detail::split(s, ':');
    if (f.size() < 2 || f.size() > 3 || f[0].empty())
      throw ConfigError("treatment must look like covariate:kind[:shift], got '" + s + "'");
    TreatmentConfig t{f[0], f[1]};
    treatment_kind_from_string(t.kind);
    if (f.size() == 3) t.shift = detail::to_number(f[2], "treatment");
    return t;
  }
  TreatmentSpec resolve(const DyadPanel& p) const {
    TreatmentSpec s;
    s.kind = treatment_kind_from_string(kind);
    s.shift = shift;
    const auto& names = p.covariate_names();
    auto it = std::find(names.begin(), names.end(), covariate);
    if (it != names.end()) {
      s.column = static_cast<int>(it - names.begin());
    } else if (!covariate.empty() && covariate.find_first_not_of("0123456789") == std::string::npos) {
      s.column = std::stoi(covariate);
    } else {
      throw ConfigError("treatment covariate '" + covariate + "' is not a column of the panel");
    }
    s.validate(p);
    return s;
  }
};

struct RunConfig {
  std::string input;
  CsvSchema schema;
  TreatmentConfig treatment;
  GridSpec grid;
  bool has_region = false;
  double region_lo = 0.0, region_hi = 0.0;
  std::vector<std::string> coefficients;  // empty: all jointly
  std::vector<double> taus;
  std::vector<double> levels{0.95};
  int draws = 500;
  std::uint64_t seed = 1;
  ClusterMode cluster = ClusterMode::None;
  Variant variant = Variant::Star;
  bool shape_restrict = true;
  bool poisson = false;
  int threads = 0;
  std::string out = "fedr_out";

  void validate() const {
    if (input.empty()) throw ConfigError("an input panel is required");
    if (draws < 0) throw ConfigError("draws must be nonnegative");
    if (levels.empty()) throw ConfigError("at least one confidence level is required");
    for (double p : levels)
      if (!(p > 0.0 && p < 1.0)) throw ConfigError("confidence levels must lie in (0, 1)");
    for (double t : taus)
      if (!(t > 0.0 && t < 1.0)) throw ConfigError("quantile indices must lie in (0, 1)");
    if (has_region && !(region_lo <= region_hi)) throw ConfigError("region must satisfy lo <= hi");
    grid.to_mode();
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"input", input},
                     {"schema", schema.to_json()},
                     {"treatment", {{"covariate", treatment.covariate}, {"kind", treatment.kind}, {"shift", treatment.shift}}},
                     {"grid", grid.to_json()},
                     {"coefficients", coefficients},
                     {"taus", taus},
                     {"levels", levels},
                     {"draws", draws},
                     {"seed", seed},
                     {"cluster", to_string(cluster)},
                     {"variant", to_string(variant)},
                     {"shape_restrict", shape_restrict},
                     {"poisson", poisson},
                     {"threads", threads},
                     {"out", out}};
    j["region"] = has_region ? nlohmann::json{region_lo, region_hi} : nlohmann::json();
    return j;
  }

  // Keys present in `j` override the current values.
  void merge(const nlohmann::json& j) {
    try {
      if (j.contains("input")) input = j.at("input").get<std::string>();
      if (j.contains("schema")) schema = CsvSchema::from_json(j.at("schema"));
      if (j.contains("treatment")) {
        const auto& t = j.at("treatment");
        if (t.is_string()) {
          treatment = TreatmentConfig::parse(t.get<std::string>());
        } else {
          treatment.covariate = t.value("covariate", treatment.covariate);
          treatment.kind = t.value("kind", treatment.kind);
          treatment.shift = t.value("shift", treatment.shift);
          treatment_kind_from_string(treatment.kind);
        }
      }
      if (j.contains("grid")) grid = j.at("grid").is_string() ? GridSpec::parse(j.at("grid").get<std::string>()) : GridSpec::from_json(j.at("grid"));
      if (j.contains("region")) {
        const auto& r = j.at("region");
        has_region = !r.is_null();
        if (has_region) {
          const auto v = r.get<std::vector<double>>();
          if (v.size() != 2) throw ConfigError("region must have two entries");
          region_lo = v[0];
          region_hi = v[1];
        }
      }
      if (j.contains("coefficients")) coefficients = j.at("coefficients").get<std::vector<std::string>>();
      if (j.contains("taus")) taus = j.at("taus").get<std::vector<double>>();
      if (j.contains("levels")) levels = j.at("levels").get<std::vector<double>>();
      if (j.contains("draws")) draws = j.at("draws").get<int>();
      if (j.contains("seed")) seed = j.at("seed").get<std::uint64_t>();
      if (j.contains("cluster")) cluster = cluster_mode_from_string(j.at("cluster").get<std::string>());
      if (j.contains("variant")) variant = variant_from_string(j.at("variant").get<std::string>());
      if (j.contains("shape_restrict")) shape_restrict = j.at("shape_restrict").get<bool>();
      if (j.contains("poisson")) poisson = j.at("poisson").get<bool>();
      if (j.contains("threads")) threads = j.at("threads").get<int>();
      if (j.contains("out")) out = j.at("out").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed run config: ") + e.what());
    }
  }

  // Region defaults to the observed outcome range.
  EstimateOptions options(const DyadPanel& p) const {
    EstimateOptions o;
    o.grid_mode = grid.to_mode();
    o.region = has_region ? std::pair{region_lo, region_hi} : std::pair{p.y().minCoeff(), p.y().maxCoeff()};
    o.treatment = treatment.resolve(p);
    for (const auto& c : coefficients) o.coefficient_targets.push_back(p.covariate_index(c));
    o.levels = levels;
    o.taus = taus;
    o.draws = draws;
    o.seed = seed;
    o.cluster = cluster;
    o.variant = variant;
    o.shape_restrict = shape_restrict;
    o.poisson = poisson;
    o.threads = threads;
    return o;
  }
};

}  // namespace fedr
