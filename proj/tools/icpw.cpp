// Command-line front end: estimate, simulate, selftest.

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "icpw/icpw.hpp"

namespace {

constexpr int kExitComputation = 1;
constexpr int kExitUsage = 2;

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) icpw::fail(icpw::ErrorCode::io, "cannot open '" + path + "'");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) icpw::fail(icpw::ErrorCode::io, "cannot write '" + path + "'");
  out << text;
}

void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

struct Manifest {
  nlohmann::json j;

  Manifest(const std::string& command, int argc, char** argv, const std::string& config) {
    j["tool"] = "icpw";
    j["version"] = icpw::kVersion;
    j["command"] = command;
    j["argv"] = std::vector<std::string>(argv, argv + argc);
    j["config"] = config;
    j["started_utc"] = utc_now();
  }

  /// Written next to the report, or to stderr when the report goes to stdout.
  void emit(const std::string& manifest_path, const std::string& out_path) {
    j["finished_utc"] = utc_now();
    std::string path = manifest_path;
    if (path.empty() && !out_path.empty() && out_path != "-") path = out_path + ".manifest.json";
    if (path.empty()) {
      std::cerr << "manifest: " << j.dump() << "\n";
    } else {
      write_text(path, j.dump(2) + "\n");
    }
  }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

icpw::Estimand parse_estimand(const std::string& s) {
  using icpw::EstimandKind;
  if (s == "tau") return {EstimandKind::tau, 1};
  if (s == "risk_difference") return {EstimandKind::risk_difference, 1};
  if (s == "relative_risk") return {EstimandKind::relative_risk, 1};
  if (s == "odds_ratio") return {EstimandKind::odds_ratio, 1};
  for (const std::string prefix : {"mean_potential:", "mean_potential("}) {
    if (s.rfind(prefix, 0) == 0) {
      std::string level = s.substr(prefix.size());
      if (!level.empty() && level.back() == ')') level.pop_back();
      try {
        std::size_t used = 0;
        const int a = std::stoi(level, &used);
        if (used == level.size()) return {EstimandKind::mean_potential, a};
      } catch (const std::exception&) {
      }
    }
  }
  icpw::fail(icpw::ErrorCode::invalid_argument, "unknown estimand '" + s + "'");
}

struct EstimateArgs {
  std::string input;
  std::string cluster_col, treatment_col, outcome_col;
  std::string covariates;
  std::string categorical;
  std::string method = "icpw";
  std::string estimand = "tau";
  int bootstrap = 0;
  std::uint64_t seed = 1;
  double level = 0.95;
  int threads = icpw::default_threads();
  std::string out;
  std::string format = "json";
  std::string delimiter = ",";
  int max_iter = 100;
  double tol = 1e-8;
  int quad_nodes = 15;
  std::string ran_predict = "marginal";
  std::string likelihood = "composite";
  std::string naive_variant = "printed";
  double truncate_quantile = 0.0;
  std::string replicates_out;
  std::string manifest;
  bool no_sandwich = false;
};

icpw::EstimatorRecipe make_recipe(const EstimateArgs& a) {
  icpw::EstimatorRecipe r;
  r.estimand = parse_estimand(a.estimand);
  r.naive_variant = a.naive_variant == "group_means" ? icpw::NaiveVariant::group_means : icpw::NaiveVariant::printed;
  if (a.truncate_quantile > 0.0) r.weighting.truncate_quantile = a.truncate_quantile;
  r.fit.likelihood = icpw::parse_cond_likelihood(a.likelihood);
  r.fit.max_iter = a.max_iter;
  r.fit.score_tol = a.tol;
  r.fixed.max_iter = a.max_iter;
  r.fixed.score_tol = a.tol;
  r.random.max_iter = a.max_iter;
  r.random.quadrature_nodes = a.quad_nodes;
  r.random.prediction = a.ran_predict == "mode" ? icpw::PredictionRule::conditional_mode : icpw::PredictionRule::marginal;
  r.level = a.level;
  return r;
}

int run_estimate(const EstimateArgs& a, Manifest& manifest) {
  auto table = icpw::read_csv_table(a.input, a.delimiter.front());
  icpw::CsvSchema schema;
  schema.cluster_col = a.cluster_col;
  schema.treatment_col = a.treatment_col;
  schema.outcome_col = a.outcome_col;
  schema.delimiter = a.delimiter.front();
  const auto categorical = split_list(a.categorical);
  const auto covariates = split_list(a.covariates);
  for (const auto& col : categorical)
    if (std::find(covariates.begin(), covariates.end(), col) == covariates.end())
      icpw::fail(icpw::ErrorCode::invalid_argument, "categorical column '" + col + "' is not listed in --covariates");
  for (const auto& col : covariates) {
    if (std::find(categorical.begin(), categorical.end(), col) != categorical.end()) {
      for (auto& name : icpw::expand_categorical(table, col)) schema.covariate_cols.push_back(name);
    } else {
      schema.covariate_cols.push_back(col);
    }
  }
  const auto data = icpw::dataset_from_table(table, schema);
  manifest.j["input"] = {{"path", a.input}, {"sha256", sha256_file(a.input)}, {"clusters", data.m()}, {"units", data.n()}};
  manifest.j["seed"] = a.seed;

  std::vector<icpw::Method> methods;
  if (a.method == "all") {
    methods = {icpw::Method::naive, icpw::Method::ipw_random, icpw::Method::ipw_fixed, icpw::Method::icpw};
  } else {
    for (const auto& m : split_list(a.method)) methods.push_back(icpw::parse_method(m));
  }

  std::vector<icpw::EffectEstimate> rows;
  std::ostringstream reps;
  if (!a.replicates_out.empty()) reps << "replicate,method,estimate,failure\n";
  for (auto method : methods) {
    auto recipe = make_recipe(a);
    recipe.method = method;
    recipe.sandwich = method == icpw::Method::icpw && a.bootstrap == 0 && !a.no_sandwich;
    if (a.bootstrap > 0) {
      auto res = icpw::cluster_bootstrap(data, recipe, a.bootstrap, a.seed, a.level, a.threads);
      for (std::size_t r = 0; r < res.replicates.size(); ++r) {
        if (a.replicates_out.empty()) break;
        reps << r << "," << icpw::to_string(method) << ",";
        if (res.replicates[r]) reps << icpw::detail::format_number(*res.replicates[r], -1);
        reps << ",\"" << res.failure_messages[r] << "\"\n";
      }
      rows.push_back(std::move(res.estimate));
    } else {
      rows.push_back(icpw::run_pipeline(data, recipe).estimate);
    }
  }
  for (const auto& e : rows)
    for (const auto& w : e.warnings) warn(icpw::to_string(e.method) + ": " + w);
  write_text(a.out, icpw::render_estimates(rows, icpw::parse_report_format(a.format)));
  if (!a.replicates_out.empty()) write_text(a.replicates_out, reps.str());
  return 0;
}

struct SimulateArgs {
  int scenario = 1;
  int study = 1;
  int reps = 1000;
  std::uint64_t seed = 1;
  std::string methods = "simu,naive,ipw_random,ipw_fixed,icpw";
  int m = 0;
  int threads = icpw::default_threads();
  std::string out;
  std::string format = "json";
  int quad_nodes = 15;
  std::string ran_predict = "marginal";
  std::string likelihood = "composite";
  std::string manifest;
};

int run_simulate(const SimulateArgs& a, Manifest& manifest) {
  auto config = icpw::scenario_config(a.scenario, a.study);
  config.reps = a.reps;
  config.seed = a.seed;
  if (a.m > 0) config.m = a.m;
  manifest.j["seed"] = a.seed;
  icpw::EstimatorRecipe base;
  base.fit.likelihood = icpw::parse_cond_likelihood(a.likelihood);
  base.random.quadrature_nodes = a.quad_nodes;
  base.random.prediction = a.ran_predict == "mode" ? icpw::PredictionRule::conditional_mode : icpw::PredictionRule::marginal;
  const auto methods = split_list(a.methods);
  const auto table = icpw::run_replication_table(config, methods, a.threads, base);
  const auto report = icpw::summarize_table(config, table);
  for (const auto& row : report.rows)
    if (row.failures > 0) warn(row.method + ": " + std::to_string(row.failures) + " replicate(s) failed");
  write_text(a.out, icpw::render_report(report, icpw::parse_report_format(a.format)));
  return 0;
}

int run_selftest(const std::vector<std::string>& suites, bool negative_control, int instances) {
  icpw::SelftestOptions opt;
  opt.instances = instances;
  if (negative_control) opt.perturbation = 1e-6;
  bool all_ok = true;
  for (const auto& name : suites.empty() ? icpw::selftest_suites() : suites) {
    const auto r = icpw::run_selftest_suite(name, opt);
    std::cout << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(14) << r.name << " checks=" << r.checks
              << " max_error=" << std::scientific << std::setprecision(3) << r.max_error << " tolerance=" << r.tolerance
              << std::defaultfloat << "\n";
    all_ok = all_ok && r.passed;
  }
  return all_ok ? 0 : kExitComputation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inverse conditional probability weighting for clustered observational data"};
  app.set_version_flag("--version", icpw::kVersion);
  app.require_subcommand(1);

  const std::vector<std::string> formats{"json", "csv", "table"};

  EstimateArgs ea;
  auto* est = app.add_subcommand("estimate", "Estimate causal effects from a CSV file");
  est->add_option("--input", ea.input, "Input CSV file")->required()->check(CLI::ExistingFile);
  est->add_option("--cluster-col", ea.cluster_col, "Cluster identifier column")->required();
  est->add_option("--treatment-col", ea.treatment_col, "Treatment column (integer codes 0..K)")->required();
  est->add_option("--outcome-col", ea.outcome_col, "Outcome column")->required();
  est->add_option("--covariates", ea.covariates, "Comma-separated covariate columns")->required();
  est->add_option("--categorical", ea.categorical, "Covariates to dummy-code (first level is the reference)");
  est->add_option("--method", ea.method, "naive, ipw_fixed, ipw_random, icpw, a comma list, or all")
      ->capture_default_str()
      ->check([](const std::string& s) -> std::string {
        if (s == "all") return {};
        for (const auto& m : split_list(s))
          if (m != "naive" && m != "ipw_fixed" && m != "ipw_random" && m != "icpw") return "unknown method '" + m + "'";
        return split_list(s).empty() ? "empty method list" : "";
      });
  est->add_option("--estimand", ea.estimand, "tau, mean_potential:<a>, risk_difference, relative_risk, odds_ratio")
      ->capture_default_str()
      ->check([](const std::string& s) -> std::string {
        try {
          parse_estimand(s);
          return {};
        } catch (const icpw::Error& e) {
          return e.what();
        }
      });
  est->add_option("--bootstrap", ea.bootstrap, "Cluster bootstrap replicates (0 = sandwich se for icpw)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  est->add_option("--seed", ea.seed, "Random seed")->capture_default_str();
  est->add_option("--level", ea.level, "Confidence level")->capture_default_str()->check(CLI::Range(0.5, 0.9999));
  est->add_option("--threads", ea.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  est->add_option("--out", ea.out, "Report file (default stdout)");
  est->add_option("--format", ea.format, "Report format")->capture_default_str()->check(CLI::IsMember(formats));
  est->add_option("--delimiter", ea.delimiter, "Field delimiter")->capture_default_str()->check([](const std::string& s) {
    return s.size() == 1 ? std::string{} : std::string("delimiter must be one character");
  });
  est->add_option("--max-iter", ea.max_iter, "Maximum optimizer iterations")->capture_default_str()->check(CLI::PositiveNumber);
  est->add_option("--tol", ea.tol, "Score tolerance")->capture_default_str()->check(CLI::PositiveNumber);
  est->add_option("--quad-nodes", ea.quad_nodes, "Gauss-Hermite nodes for ipw_random")
      ->capture_default_str()
      ->check(CLI::Range(1, 100));
  est->add_option("--ran-predict", ea.ran_predict, "ipw_random cluster effect: marginal (U=0) or mode")
      ->capture_default_str()
      ->check(CLI::IsMember({"marginal", "mode"}));
  est->add_option("--likelihood", ea.likelihood, "icpw treatment model: composite (per-unit) or cluster (conditional logit)")
      ->capture_default_str()
      ->check(CLI::IsMember({"composite", "cluster"}));
  est->add_option("--naive-variant", ea.naive_variant, "printed or group_means")
      ->capture_default_str()
      ->check(CLI::IsMember({"printed", "group_means"}));
  est->add_option("--truncate-quantile", ea.truncate_quantile, "Cap ICPW weights at this quantile (0 = off)")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  est->add_option("--replicates-out", ea.replicates_out, "CSV file for bootstrap replicate estimates");
  est->add_option("--manifest", ea.manifest, "Run manifest file (default <out>.manifest.json)");
  est->add_flag("--no-sandwich", ea.no_sandwich, "Skip the sandwich standard error");

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Run the simulation designs");
  sim->add_option("--scenario", sa.scenario, "Scenario 1-4")->required()->check(CLI::Range(1, 4));
  sim->add_option("--study", sa.study, "Study 1 (m=500, sizes 2-5) or 2 (m=20, sizes 2-20)")
      ->capture_default_str()
      ->check(CLI::IsMember({1, 2}));
  sim->add_option("--reps", sa.reps, "Replications")->capture_default_str()->check(CLI::PositiveNumber);
  sim->add_option("--seed", sa.seed, "Random seed")->capture_default_str();
  sim->add_option("--methods", sa.methods, "Comma list of simu, naive, ipw_random, ipw_fixed, icpw")
      ->capture_default_str()
      ->check([](const std::string& s) -> std::string {
        for (const auto& m : split_list(s))
          if (m != "simu" && m != "naive" && m != "ipw_fixed" && m != "ipw_random" && m != "icpw")
            return "unknown method '" + m + "'";
        return {};
      });
  sim->add_option("--m", sa.m, "Override the number of clusters")->check(CLI::PositiveNumber);
  sim->add_option("--threads", sa.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  sim->add_option("--out", sa.out, "Report file (default stdout)");
  sim->add_option("--format", sa.format, "Report format")->capture_default_str()->check(CLI::IsMember(formats));
  sim->add_option("--quad-nodes", sa.quad_nodes, "Gauss-Hermite nodes for ipw_random")
      ->capture_default_str()
      ->check(CLI::Range(1, 100));
  sim->add_option("--ran-predict", sa.ran_predict, "ipw_random cluster effect: marginal (U=0) or mode")
      ->capture_default_str()
      ->check(CLI::IsMember({"marginal", "mode"}));
  sim->add_option("--likelihood", sa.likelihood, "icpw treatment model: composite (per-unit) or cluster (conditional logit)")
      ->capture_default_str()
      ->check(CLI::IsMember({"composite", "cluster"}));
  sim->add_option("--manifest", sa.manifest, "Run manifest file (default <out>.manifest.json)");

  std::vector<std::string> suites;
  bool negative_control = false;
  int instances = 100;
  auto* st = app.add_subcommand("selftest", "Run the oracle self-test suites");
  st->add_option("--suite", suites, "Suite to run (repeatable): dp, gradients, u_invariance, unbiasedness")
      ->check(CLI::IsMember(icpw::selftest_suites()));
  st->add_option("--instances", instances, "Random instances per suite")->capture_default_str()->check(CLI::PositiveNumber);
  st->add_flag("--negative-control", negative_control, "Perturb library values so every suite must fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (est->parsed()) {
      Manifest manifest("estimate", argc, argv, est->config_to_str(true, false));
      const int rc = run_estimate(ea, manifest);
      manifest.emit(ea.manifest, ea.out);
      return rc;
    }
    if (sim->parsed()) {
      Manifest manifest("simulate", argc, argv, sim->config_to_str(true, false));
      const int rc = run_simulate(sa, manifest);
      manifest.emit(sa.manifest, sa.out);
      return rc;
    }
    if (st->parsed()) return run_selftest(suites, negative_control, instances);
  } catch (const icpw::Error& e) {
    std::cerr << "error: " << icpw::to_string(e.code()) << ": " << e.what() << "\n";
    return kExitComputation;
  } catch (const std::exception& e) {
    std::cerr << "error: internal_error: " << e.what() << "\n";
    return kExitComputation;
  }
  return kExitUsage;
}
