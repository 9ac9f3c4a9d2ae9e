#pragma once

// Clustered observational data: units, clusters, datasets, CSV ingestion and
// the cluster-level positivity filter.

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "icpw/error.hpp"

namespace icpw {

struct UnitRecord {
  std::string cluster_id;
  int treatment = 0;
  double outcome = 0.0;
  std::vector<double> covariates;

  bool operator==(const UnitRecord&) const = default;
};

/// A cluster of units sharing one unobserved cluster-level confounder.
/// The design matrix, treatment vector and outcome vector are cached at
/// construction so the numerical code never walks the unit list.
class Cluster {
 public:
  Cluster(std::string id, std::vector<UnitRecord> units) : id_(std::move(id)), units_(std::move(units)) {
    if (units_.empty()) fail(ErrorCode::invalid_argument, "cluster '" + id_ + "' has no units");
    const auto p = units_.front().covariates.size();
    design_.resize(static_cast<Eigen::Index>(units_.size()), static_cast<Eigen::Index>(p));
    treatments_.resize(static_cast<Eigen::Index>(units_.size()));
    outcomes_.resize(static_cast<Eigen::Index>(units_.size()));
    for (std::size_t j = 0; j < units_.size(); ++j) {
      const auto& u = units_[j];
      if (u.cluster_id != id_)
        fail(ErrorCode::invalid_argument, "unit with cluster id '" + u.cluster_id + "' placed in cluster '" + id_ + "'");
      if (u.covariates.size() != p)
        fail(ErrorCode::invalid_argument, "covariate length mismatch in cluster '" + id_ + "'");
      if (!std::isfinite(u.outcome)) fail(ErrorCode::invalid_argument, "non-finite outcome in cluster '" + id_ + "'");
      const auto row = static_cast<Eigen::Index>(j);
      for (std::size_t k = 0; k < p; ++k) {
        if (!std::isfinite(u.covariates[k]))
          fail(ErrorCode::invalid_argument, "non-finite covariate in cluster '" + id_ + "'");
        design_(row, static_cast<Eigen::Index>(k)) = u.covariates[k];
      }
      treatments_(row) = u.treatment;
      outcomes_(row) = u.outcome;
    }
  }

  const std::string& id() const noexcept { return id_; }
  std::span<const UnitRecord> units() const noexcept { return units_; }
  int size() const noexcept { return static_cast<int>(units_.size()); }

  /// n_i x p covariate matrix, one row per unit in input order.
  const Eigen::MatrixXd& design() const noexcept { return design_; }
  const Eigen::VectorXi& treatments() const noexcept { return treatments_; }
  const Eigen::VectorXd& outcomes() const noexcept { return outcomes_; }

  bool operator==(const Cluster& other) const { return id_ == other.id_ && units_ == other.units_; }

 private:
  std::string id_;
  std::vector<UnitRecord> units_;
  Eigen::MatrixXd design_;
  Eigen::VectorXi treatments_;
  Eigen::VectorXd outcomes_;
};

class Dataset {
 public:
  /// Validates that every treatment code lies in {0..K} and that every code
  /// is observed at least once.
  Dataset(std::vector<Cluster> clusters, int K, std::vector<std::string> covariate_names)
      : clusters_(std::move(clusters)), K_(K), covariate_names_(std::move(covariate_names)) {
    if (clusters_.empty()) fail(ErrorCode::empty_data, "dataset has no clusters");
    if (K_ < 1) fail(ErrorCode::invalid_argument, "highest treatment code K must be >= 1");
    const auto p = static_cast<Eigen::Index>(covariate_names_.size());
    std::vector<int> seen(static_cast<std::size_t>(K_) + 1, 0);
    for (const auto& c : clusters_) {
      if (c.design().cols() != p) fail(ErrorCode::invalid_argument, "covariate dimension mismatch in cluster '" + c.id() + "'");
      for (int a : c.treatments()) {
        if (a < 0 || a > K_)
          fail(ErrorCode::range, "treatment code " + std::to_string(a) + " outside {0.." + std::to_string(K_) + "} in cluster '" + c.id() + "'");
        seen[static_cast<std::size_t>(a)] = 1;
      }
      n_ += c.size();
    }
    for (int a = 0; a <= K_; ++a)
      if (!seen[static_cast<std::size_t>(a)]) fail(ErrorCode::range, "treatment level " + std::to_string(a) + " never observed");
  }

  std::span<const Cluster> clusters() const noexcept { return clusters_; }
  const Cluster& cluster(std::size_t i) const { return clusters_.at(i); }
  int m() const noexcept { return static_cast<int>(clusters_.size()); }
  int n() const noexcept { return n_; }
  int p() const noexcept { return static_cast<int>(covariate_names_.size()); }
  int K() const noexcept { return K_; }
  bool binary() const noexcept { return K_ == 1; }
  const std::vector<std::string>& covariate_names() const noexcept { return covariate_names_; }

  bool operator==(const Dataset& other) const {
    return K_ == other.K_ && covariate_names_ == other.covariate_names_ && clusters_ == other.clusters_;
  }

 private:
  std::vector<Cluster> clusters_;
  int K_ = 1;
  std::vector<std::string> covariate_names_;
  int n_ = 0;
};

/// Per-cluster treatment-count statistic. Binary: {t} with t = sum of A.
/// Multinomial: counts of levels 0..K-1 (level K implied by n_i).
struct SufficientStat {
  std::vector<int> counts;

  bool operator==(const SufficientStat&) const = default;
};

inline SufficientStat sufficient_stat(const Cluster& cluster, int K) {
  if (K < 1) fail(ErrorCode::invalid_argument, "K must be >= 1");
  SufficientStat s;
  if (K == 1) {
    int t = 0;
    for (int a : cluster.treatments()) {
      if (a < 0 || a > 1) fail(ErrorCode::range, "binary treatment outside {0,1}");
      t += a;
    }
    s.counts = {t};
    return s;
  }
  s.counts.assign(static_cast<std::size_t>(K), 0);
  for (int a : cluster.treatments()) {
    if (a < 0 || a > K) fail(ErrorCode::range, "treatment code outside {0..K}");
    if (a < K) ++s.counts[static_cast<std::size_t>(a)];
  }
  return s;
}

/// Expands a statistic to the full per-level count vector (levels 0..K).
inline std::vector<int> full_level_counts(const SufficientStat& stat, int K, int n) {
  std::vector<int> full(static_cast<std::size_t>(K) + 1, 0);
  if (K == 1) {
    if (stat.counts.size() != 1) fail(ErrorCode::invalid_argument, "binary statistic must have one entry");
    full[1] = stat.counts[0];
    full[0] = n - stat.counts[0];
  } else {
    if (stat.counts.size() != static_cast<std::size_t>(K))
      fail(ErrorCode::invalid_argument, "multinomial statistic must have K entries");
    int used = 0;
    for (int k = 0; k < K; ++k) {
      full[static_cast<std::size_t>(k)] = stat.counts[static_cast<std::size_t>(k)];
      used += stat.counts[static_cast<std::size_t>(k)];
    }
    full[static_cast<std::size_t>(K)] = n - used;
  }
  for (int c : full)
    if (c < 0 || c > n) fail(ErrorCode::invalid_argument, "statistic inconsistent with cluster size");
  return full;
}

/// True when the cluster's treatment vector admits at least two distinct
/// arrangements with the same sufficient statistic.
inline bool admits_permutations(const Cluster& cluster) {
  const auto& a = cluster.treatments();
  for (Eigen::Index j = 1; j < a.size(); ++j)
    if (a(j) != a(0)) return true;
  return false;
}

struct PositivityFilterResult {
  Dataset retained;
  std::vector<std::string> dropped_cluster_ids;
  int dropped_unit_count = 0;
};

inline PositivityFilterResult filter_positivity(const Dataset& data) {
  std::vector<Cluster> keep;
  std::vector<std::string> dropped;
  int dropped_units = 0;
  for (const auto& c : data.clusters()) {
    if (admits_permutations(c)) {
      keep.push_back(c);
    } else {
      dropped.push_back(c.id());
      dropped_units += c.size();
    }
  }
  if (keep.empty()) fail(ErrorCode::estimability, "every cluster has constant treatment; nothing to estimate");
  return {Dataset(std::move(keep), data.K(), data.covariate_names()), std::move(dropped), dropped_units};
}

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == delim) {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline bool is_missing(const std::string& cell) {
  return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan" || cell == ".";
}

inline double parse_double(const std::string& cell, std::size_t row, const std::string& column) {
  if (is_missing(cell))
    fail(ErrorCode::parse, "missing value in column '" + column + "' at data row " + std::to_string(row));
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v))
    fail(ErrorCode::parse, "non-numeric value '" + cell + "' in column '" + column + "' at data row " + std::to_string(row));
  return v;
}

inline int parse_int(const std::string& cell, std::size_t row, const std::string& column) {
  const double v = parse_double(cell, row, column);
  if (v != std::floor(v) || std::abs(v) > 1e9)
    fail(ErrorCode::parse, "non-integer treatment '" + cell + "' in column '" + column + "' at data row " + std::to_string(row));
  return static_cast<int>(v);
}

}  // namespace detail

inline CsvTable parse_csv_table(std::istream& in, char delim = ',') {
  CsvTable t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!have_header) {
      if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
      if (detail::trim(line).empty()) continue;
      for (auto& h : detail::split_csv_line(line, delim)) t.header.push_back(detail::trim(h));
      have_header = true;
      continue;
    }
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line, delim);
    for (auto& c : cells) c = detail::trim(c);
    if (cells.size() != t.header.size())
      fail(ErrorCode::parse, "data row " + std::to_string(t.rows.size() + 1) + " has " + std::to_string(cells.size()) +
                                 " cells, header has " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  if (!have_header) fail(ErrorCode::empty_data, "input has no header row");
  if (t.rows.empty()) fail(ErrorCode::empty_data, "input has a header but no data rows");
  return t;
}

inline CsvTable read_csv_table(const std::string& path, char delim = ',') {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open '" + path + "'");
  return parse_csv_table(in, delim);
}

/// Column mapping for ingestion. Covariates must already be numeric.
struct CsvSchema {
  std::string cluster_col;
  std::string treatment_col;
  std::string outcome_col;
  std::vector<std::string> covariate_cols;
  char delimiter = ',';
  std::optional<int> K;  ///< declared highest treatment code; inferred when empty
};

inline Dataset dataset_from_table(const CsvTable& table, const CsvSchema& schema) {
  auto need = [&](const std::string& name) {
    auto idx = table.column(name);
    if (!idx) fail(ErrorCode::schema, "missing column '" + name + "'");
    return *idx;
  };
  const auto ci = need(schema.cluster_col);
  const auto ti = need(schema.treatment_col);
  const auto yi = need(schema.outcome_col);
  std::vector<std::size_t> xi;
  for (const auto& c : schema.covariate_cols) xi.push_back(need(c));

  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<UnitRecord>> groups;
  int max_code = 0;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const auto rowno = r + 1;
    UnitRecord u;
    u.cluster_id = row[ci];
    if (detail::is_missing(u.cluster_id))
      fail(ErrorCode::parse, "missing cluster id at data row " + std::to_string(rowno));
    u.treatment = detail::parse_int(row[ti], rowno, schema.treatment_col);
    if (u.treatment < 0)
      fail(ErrorCode::range, "negative treatment code at data row " + std::to_string(rowno));
    if (schema.K && u.treatment > *schema.K)
      fail(ErrorCode::range, "treatment code " + std::to_string(u.treatment) + " exceeds declared K=" +
                                 std::to_string(*schema.K) + " at data row " + std::to_string(rowno));
    max_code = std::max(max_code, u.treatment);
    u.outcome = detail::parse_double(row[yi], rowno, schema.outcome_col);
    for (std::size_t k = 0; k < xi.size(); ++k)
      u.covariates.push_back(detail::parse_double(row[xi[k]], rowno, schema.covariate_cols[k]));
    auto [it, inserted] = groups.try_emplace(u.cluster_id);
    if (inserted) order.push_back(u.cluster_id);
    it->second.push_back(std::move(u));
  }
  std::vector<Cluster> clusters;
  clusters.reserve(order.size());
  for (const auto& id : order) clusters.emplace_back(id, std::move(groups[id]));
  const int K = schema.K.value_or(std::max(max_code, 1));
  return Dataset(std::move(clusters), K, schema.covariate_cols);
}

/// Replaces a categorical column by 0/1 indicators named "<column>=<level>"
/// for every level except the first (numeric order when all levels parse as
/// numbers, lexicographic otherwise). Returns the new column names.
inline std::vector<std::string> expand_categorical(CsvTable& table, const std::string& column) {
  const auto idx = table.column(column);
  if (!idx) fail(ErrorCode::schema, "missing column '" + column + "'");
  std::vector<std::string> levels;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& v = table.rows[r][*idx];
    if (detail::is_missing(v))
      fail(ErrorCode::parse, "missing value in column '" + column + "' at data row " + std::to_string(r + 1));
    if (std::find(levels.begin(), levels.end(), v) == levels.end()) levels.push_back(v);
  }
  const bool numeric = std::all_of(levels.begin(), levels.end(), [](const std::string& s) {
    double x = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
    return ec == std::errc() && p == s.data() + s.size();
  });
  if (numeric) {
    std::sort(levels.begin(), levels.end(), [](const std::string& a, const std::string& b) { return std::stod(a) < std::stod(b); });
  } else {
    std::sort(levels.begin(), levels.end());
  }
  std::vector<std::string> names;
  for (std::size_t l = 1; l < levels.size(); ++l) names.push_back(column + "=" + levels[l]);
  table.header.erase(table.header.begin() + static_cast<std::ptrdiff_t>(*idx));
  table.header.insert(table.header.begin() + static_cast<std::ptrdiff_t>(*idx), names.begin(), names.end());
  for (auto& row : table.rows) {
    const std::string v = row[*idx];
    std::vector<std::string> dummies;
    for (std::size_t l = 1; l < levels.size(); ++l) dummies.push_back(v == levels[l] ? "1" : "0");
    row.erase(row.begin() + static_cast<std::ptrdiff_t>(*idx));
    row.insert(row.begin() + static_cast<std::ptrdiff_t>(*idx), dummies.begin(), dummies.end());
  }
  return names;
}

inline Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  return dataset_from_table(read_csv_table(path, schema.delimiter), schema);
}

/// Writes the dataset with columns cluster, treatment, outcome, covariates.
/// Doubles use 17 significant digits so a reload reproduces them exactly.
inline void write_csv(const Dataset& data, std::ostream& out, char delim = ',') {
  out << "cluster" << delim << "treatment" << delim << "outcome";
  for (const auto& name : data.covariate_names()) out << delim << name;
  out << '\n';
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& c : data.clusters())
    for (const auto& u : c.units()) {
      out << u.cluster_id << delim << u.treatment << delim << u.outcome;
      for (double x : u.covariates) out << delim << x;
      out << '\n';
    }
}

inline CsvSchema written_schema(const Dataset& data) {
  return {"cluster", "treatment", "outcome", data.covariate_names(), ',', data.K()};
}

}  // namespace icpw
