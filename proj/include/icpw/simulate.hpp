#pragma once

// Data-generating processes with a cluster-level confounder and the
// replication harness that summarizes each method across Monte Carlo reps.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "icpw/data_model.hpp"
#include "icpw/error.hpp"
#include "icpw/estimators.hpp"
#include "icpw/inference.hpp"
#include "icpw/parallel.hpp"

namespace icpw {

struct ScenarioConfig {
  int scenario = 0;  ///< 1-4 for the presets, 0 for a custom design
  int study = 0;
  int m = 500;
  int size_low = 2;   ///< cluster size is floor(Uniform(size_low, size_high))
  int size_high = 6;
  double rho_XU = 0.0;
  double rho_YU = 0.0;
  double tau = 2.0;
  std::uint64_t seed = 1;
  int reps = 1000;

  void validate() const {
    if (m < 1) fail(ErrorCode::invalid_argument, "m must be >= 1");
    if (size_low < 2 || size_high <= size_low)
      fail(ErrorCode::invalid_argument, "cluster sizes need 2 <= size_low < size_high");
    if (reps < 1) fail(ErrorCode::invalid_argument, "reps must be >= 1");
  }
};

/// Study 1: m = 500 clusters of 2-5 units. Study 2: m = 20 clusters of 2-20
/// units. Scenarios 1-4 set (rho_XU, rho_YU) to (0,0), (5,0), (0,5), (5,5).
inline ScenarioConfig scenario_config(int scenario, int study) {
  if (scenario < 1 || scenario > 4) fail(ErrorCode::invalid_argument, "scenario must be 1, 2, 3 or 4");
  if (study != 1 && study != 2) fail(ErrorCode::invalid_argument, "study must be 1 or 2");
  ScenarioConfig c;
  c.scenario = scenario;
  c.study = study;
  if (study == 1) {
    c.m = 500;
    c.size_low = 2;
    c.size_high = 6;
  } else {
    c.m = 20;
    c.size_low = 2;
    c.size_high = 21;
  }
  c.rho_XU = (scenario == 2 || scenario == 4) ? 5.0 : 0.0;
  c.rho_YU = (scenario == 3 || scenario == 4) ? 5.0 : 0.0;
  return c;
}

struct GeneratedCluster {
  Eigen::VectorXd x1;
  Eigen::VectorXd x2;
  double u = 0.0;
  Eigen::VectorXi a;
  Eigen::VectorXd y0;
  Eigen::VectorXd y1;
  Eigen::VectorXd y;
};

struct GeneratedData {
  Dataset data;  ///< observed (X, A, Y) only, before the positivity filter
  std::vector<GeneratedCluster> latent;
  double tau_simu = 0.0;  ///< mean of Y(1) - Y(0) over all units
};

/// One replicate of the design; deterministic in (config.seed, rep).
inline GeneratedData generate_dataset(const ScenarioConfig& config, std::uint64_t rep) {
  config.validate();
  auto rng = substream(config.seed, rep, 0x73'69'6d);
  std::uniform_real_distribution<double> size_dist(config.size_low, config.size_high);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> x2_dist(-1, 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  std::vector<GeneratedCluster> latent;
  std::vector<Cluster> clusters;
  latent.reserve(static_cast<std::size_t>(config.m));
  clusters.reserve(static_cast<std::size_t>(config.m));
  double effect_sum = 0.0;
  int total = 0;
  for (int i = 0; i < config.m; ++i) {
    const int n = std::min(static_cast<int>(std::floor(size_dist(rng))), config.size_high - 1);
    GeneratedCluster g;
    g.x1.resize(n);
    g.x2.resize(n);
    for (int j = 0; j < n; ++j) g.x1(j) = normal(rng);
    for (int j = 0; j < n; ++j) g.x2(j) = x2_dist(rng);
    g.u = -config.rho_XU * (g.x1.mean() + g.x2.mean()) + normal(rng);
    g.a.resize(n);
    g.y0.resize(n);
    g.y1.resize(n);
    g.y.resize(n);
    const std::string id = "c" + std::to_string(i + 1);
    std::vector<UnitRecord> units;
    for (int j = 0; j < n; ++j) {
      g.a(j) = unif(rng) < expit(g.x1(j) + g.x2(j) + g.u) ? 1 : 0;
      const double e0 = normal(rng), e1 = normal(rng);
      g.y0(j) = g.x1(j) + g.x2(j) + e0;
      g.y1(j) = g.x1(j) + g.x2(j) + config.tau + config.rho_YU * g.u + e1;
      g.y(j) = g.a(j) == 1 ? g.y1(j) : g.y0(j);
      effect_sum += g.y1(j) - g.y0(j);
      units.push_back({id, g.a(j), g.y(j), {g.x1(j), g.x2(j)}});
    }
    total += n;
    clusters.emplace_back(id, std::move(units));
    latent.push_back(std::move(g));
  }
  return {Dataset(std::move(clusters), 1, {"x1", "x2"}), std::move(latent), effect_sum / total};
}

inline constexpr const char* kSimuTag = "simu";

/// Summary of one method across replicates.
struct MethodSummary {
  std::string method;
  double mean = 0.0;
  double bias = 0.0;
  double sd = 0.0;
  int reps_ok = 0;
  int failures = 0;

  bool operator==(const MethodSummary&) const = default;
};

struct SimulationReport {
  ScenarioConfig config;
  std::vector<MethodSummary> rows;

  bool operator==(const SimulationReport& o) const {
    const auto& a = config;
    const auto& b = o.config;
    return a.scenario == b.scenario && a.study == b.study && a.m == b.m && a.size_low == b.size_low &&
           a.size_high == b.size_high && a.rho_XU == b.rho_XU && a.rho_YU == b.rho_YU && a.tau == b.tau &&
           a.seed == b.seed && a.reps == b.reps && rows == o.rows;
  }
};

/// Mean and sd of the values after sorting, so the result does not depend
/// on replicate order.
inline MethodSummary summarize(std::string method, std::vector<double> values, int failures, double tau) {
  std::sort(values.begin(), values.end());
  MethodSummary s;
  s.method = std::move(method);
  s.reps_ok = static_cast<int>(values.size());
  s.failures = failures;
  if (!values.empty()) {
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
      double ss = 0.0;
      for (double v : values) ss += (v - s.mean) * (v - s.mean);
      s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
  } else {
    s.mean = std::nan("");
    s.sd = std::nan("");
  }
  s.bias = s.mean - tau;
  return s;
}

inline void check_method_tags(const std::vector<std::string>& methods) {
  for (const auto& m : methods)
    if (m != kSimuTag) parse_method(m);
}

/// Per-replicate estimates: values[method][rep], empty where the method failed.
struct ReplicationTable {
  std::vector<std::string> methods;
  std::vector<std::vector<std::optional<double>>> values;
};

inline ReplicationTable run_replication_table(const ScenarioConfig& config, const std::vector<std::string>& methods,
                                              int threads = 1, const EstimatorRecipe& base = {}) {
  config.validate();
  check_method_tags(methods);
  ReplicationTable table;
  table.methods = methods;
  table.values.assign(methods.size(), std::vector<std::optional<double>>(static_cast<std::size_t>(config.reps)));
  parallel_for(static_cast<std::size_t>(config.reps), threads, [&](std::size_t rep) {
    const auto gen = generate_dataset(config, rep);
    for (std::size_t k = 0; k < methods.size(); ++k) {
      if (methods[k] == kSimuTag) {
        table.values[k][rep] = gen.tau_simu;
        continue;
      }
      EstimatorRecipe recipe = base;
      recipe.method = parse_method(methods[k]);
      recipe.estimand = {EstimandKind::tau, 1};
      recipe.sandwich = false;
      try {
        const double v = run_pipeline(gen.data, recipe).estimate.point;
        if (std::isfinite(v)) table.values[k][rep] = v;
      } catch (const Error&) {
      }
    }
  });
  return table;
}

inline SimulationReport summarize_table(const ScenarioConfig& config, const ReplicationTable& table) {
  SimulationReport report;
  report.config = config;
  for (std::size_t k = 0; k < table.methods.size(); ++k) {
    std::vector<double> ok;
    for (const auto& v : table.values[k])
      if (v) ok.push_back(*v);
    const int failures = static_cast<int>(table.values[k].size() - ok.size());
    report.rows.push_back(summarize(table.methods[k], std::move(ok), failures, config.tau));
  }
  return report;
}

inline SimulationReport run_replications(const ScenarioConfig& config, const std::vector<std::string>& methods,
                                         int threads = 1) {
  return summarize_table(config, run_replication_table(config, methods, threads));
}

// ---------------------------------------------------------------------------
// Rendering

inline nlohmann::json to_json(const SimulationReport& r) {
  nlohmann::json j;
  const auto& c = r.config;
  j["config"] = {{"scenario", c.scenario}, {"study", c.study},   {"m", c.m},     {"size_low", c.size_low},
                 {"size_high", c.size_high}, {"rho_XU", c.rho_XU}, {"rho_YU", c.rho_YU}, {"tau", c.tau},
                 {"seed", c.seed},         {"reps", c.reps}};
  j["methods"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json m = {{"method", row.method}, {"reps_ok", row.reps_ok}, {"failures", row.failures}};
    // NaN has no JSON literal; an empty method row carries nulls
    for (auto [key, v] : {std::pair{"mean", row.mean}, std::pair{"bias", row.bias}, std::pair{"sd", row.sd}})
      m[key] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
    j["methods"].push_back(m);
  }
  return j;
}

inline SimulationReport report_from_json(const nlohmann::json& j) {
  try {
    SimulationReport r;
    const auto& c = j.at("config");
    r.config.scenario = c.at("scenario").get<int>();
    r.config.study = c.at("study").get<int>();
    r.config.m = c.at("m").get<int>();
    r.config.size_low = c.at("size_low").get<int>();
    r.config.size_high = c.at("size_high").get<int>();
    r.config.rho_XU = c.at("rho_XU").get<double>();
    r.config.rho_YU = c.at("rho_YU").get<double>();
    r.config.tau = c.at("tau").get<double>();
    r.config.seed = c.at("seed").get<std::uint64_t>();
    r.config.reps = c.at("reps").get<int>();
    for (const auto& m : j.at("methods")) {
      MethodSummary s;
      s.method = m.at("method").get<std::string>();
      s.reps_ok = m.at("reps_ok").get<int>();
      s.failures = m.at("failures").get<int>();
      auto num = [&](const char* key) { return m.at(key).is_null() ? std::nan("") : m.at(key).get<double>(); };
      s.mean = num("mean");
      s.bias = num("bias");
      s.sd = num("sd");
      r.rows.push_back(s);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse, std::string("malformed simulation report: ") + e.what());
  }
}

inline SimulationReport parse_report_json(const std::string& text) {
  try {
    return report_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::parse, std::string("invalid JSON: ") + e.what());
  }
}

enum class ReportFormat { json, csv, table };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  if (s == "table") return ReportFormat::table;
  fail(ErrorCode::invalid_argument, "unknown format '" + s + "' (expected json, csv or table)");
}

namespace detail {

inline std::string format_number(double v, int digits) {
  if (!std::isfinite(v)) return "NA";
  std::ostringstream os;
  if (digits < 0) {
    os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  } else {
    os << std::fixed << std::setprecision(digits) << v;
  }
  return os.str();
}

}  // namespace detail

inline std::string render_report(const SimulationReport& r, ReportFormat format) {
  std::ostringstream os;
  switch (format) {
    case ReportFormat::json: os << to_json(r).dump(2) << "\n"; break;
    case ReportFormat::csv:
      os << "method,estimate,bias,sd,reps_ok,failures\n";
      for (const auto& row : r.rows)
        os << row.method << "," << detail::format_number(row.mean, -1) << "," << detail::format_number(row.bias, -1) << ","
           << detail::format_number(row.sd, -1) << "," << row.reps_ok << "," << row.failures << "\n";
      break;
    case ReportFormat::table: {
      const auto& c = r.config;
      os << "scenario " << c.scenario << ", study " << c.study << ": m=" << c.m << ", sizes " << c.size_low << "-"
         << c.size_high - 1 << ", rho_XU=" << c.rho_XU << ", rho_YU=" << c.rho_YU << ", tau=" << c.tau
         << ", reps=" << c.reps << ", seed=" << c.seed << "\n";
      os << std::left << std::setw(12) << "method" << std::right << std::setw(10) << "estimate" << std::setw(10) << "bias"
         << std::setw(10) << "sd" << std::setw(9) << "ok" << std::setw(10) << "failed" << "\n";
      for (const auto& row : r.rows)
        os << std::left << std::setw(12) << row.method << std::right << std::setw(10) << detail::format_number(row.mean, 3)
           << std::setw(10) << detail::format_number(row.bias, 3) << std::setw(10) << detail::format_number(row.sd, 3)
           << std::setw(9) << row.reps_ok << std::setw(10) << row.failures << "\n";
      break;
    }
  }
  return os.str();
}

}  // namespace icpw
