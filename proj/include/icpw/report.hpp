#pragma once

// Rendering of effect estimates as JSON, CSV and aligned text.

#include <nlohmann/json.hpp>

#include <cmath>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "icpw/estimators.hpp"
#include "icpw/simulate.hpp"

namespace icpw {

inline nlohmann::json to_json(const EffectEstimate& e) {
  auto opt = [](const std::optional<double>& v) { return v && std::isfinite(*v) ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["method"] = to_string(e.method);
  j["estimand"] = to_string(e.estimand);
  j["point"] = std::isfinite(e.point) ? nlohmann::json(e.point) : nlohmann::json(nullptr);
  j["se"] = opt(e.se);
  j["ci_low"] = opt(e.ci ? std::optional<double>(e.ci->lower) : std::nullopt);
  j["ci_high"] = opt(e.ci ? std::optional<double>(e.ci->upper) : std::nullopt);
  j["ci_level"] = e.ci_level;
  j["n_used"] = e.n_used;
  j["clusters_dropped"] = e.clusters_dropped;
  j["warnings"] = e.warnings;
  return j;
}

inline std::string render_estimates(const std::vector<EffectEstimate>& rows, ReportFormat format) {
  std::ostringstream os;
  auto num = [](const std::optional<double>& v, int digits) { return v ? detail::format_number(*v, digits) : std::string("NA"); };
  switch (format) {
    case ReportFormat::json: {
      nlohmann::json j;
      j["estimates"] = nlohmann::json::array();
      for (const auto& e : rows) j["estimates"].push_back(to_json(e));
      os << j.dump(2) << "\n";
      break;
    }
    case ReportFormat::csv:
      os << "method,estimand,point,se,ci_low,ci_high,n_used,clusters_dropped\n";
      for (const auto& e : rows)
        os << to_string(e.method) << "," << to_string(e.estimand) << "," << detail::format_number(e.point, -1) << ","
           << num(e.se, -1) << "," << num(e.ci ? std::optional<double>(e.ci->lower) : std::nullopt, -1) << ","
           << num(e.ci ? std::optional<double>(e.ci->upper) : std::nullopt, -1) << "," << e.n_used << ","
           << e.clusters_dropped << "\n";
      break;
    case ReportFormat::table:
      os << std::left << std::setw(12) << "method" << std::setw(20) << "estimand" << std::right << std::setw(14) << "point"
         << std::setw(12) << "se" << std::setw(28) << "ci" << std::setw(8) << "n" << std::setw(9) << "dropped" << "\n";
      for (const auto& e : rows) {
        std::string ci = "NA";
        if (e.ci)
          ci = "(" + detail::format_number(e.ci->lower, 3) + ", " + detail::format_number(e.ci->upper, 3) + ")";
        os << std::left << std::setw(12) << to_string(e.method) << std::setw(20) << to_string(e.estimand) << std::right
           << std::setw(14) << detail::format_number(e.point, 3) << std::setw(12) << num(e.se, 3) << std::setw(28) << ci
           << std::setw(8) << e.n_used << std::setw(9) << e.clusters_dropped << "\n";
      }
      break;
  }
  return os.str();
}

}  // namespace icpw
