#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "admeta/errors.hpp"
#include "admeta/io.hpp"

namespace {

int do_validate(const std::vector<std::string>& ipd_files,
                const std::vector<std::string>& ad_files) {
  for (const std::string& path : ipd_files) {
    const std::vector<admeta::IpdTrial> trials = admeta::ingest_ipd(path);
    for (const admeta::IpdTrial& t : trials) {
      int n1 = 0;
      for (const admeta::ObservationRow& r : t.rows) n1 += r.x;
      std::cout << path << ": study " << t.study << ": " << (t.n() - n1)
                << " control rows, " << n1 << " treated rows\n";
    }
  }
  for (const std::string& path : ad_files) {
    const std::vector<admeta::AdSummary> trials = admeta::ingest_ad(path);
    for (const admeta::AdSummary& s : trials)
      std::cout << path << ": study " << s.study << ": aggregate, n = "
                << s.arms[0].n << " + " << s.arms[1].n << "\n";
  }
  std::cout << "all inputs valid\n";
  return 0;
}

int do_simulate(int n, int reps, std::uint64_t seed, int threads, bool subgroup,
                bool comparator, bool equal_pooling,
                const std::vector<int>& masked, const std::string& strategy,
                const std::string& output) {
  admeta::ReplicationConfig cfg;
  cfg.dgp = subgroup ? admeta::DgpConfig::subgroup_defaults()
                     : admeta::DgpConfig::defaults();
  cfg.dgp.n = n;
  cfg.masked = masked;
  cfg.include_comparator = comparator;
  cfg.pipeline.pooling = equal_pooling ? admeta::PoolingRule::equal
                                       : admeta::PoolingRule::sample_size;
  if (strategy == "stacked")
    cfg.pipeline.strategy = admeta::SharedFit::stacked;
  else if (strategy != "per_trial")
    admeta::fail(admeta::ErrorCategory::schema,
                 "strategy must be per_trial or stacked");
  const std::vector<admeta::ReplicationOutput> outputs =
      admeta::run_monte_carlo(cfg, seed, reps, threads);
  const admeta::McSummary mc =
      admeta::summarize_mc(outputs, admeta::dgp_truth(cfg.dgp, cfg.masked));
  std::cout << admeta::render_mc_text(mc, seed);
  if (!output.empty()) {
    std::ofstream file(output);
    if (!file) admeta::fail(admeta::ErrorCategory::schema, "cannot write " + output);
    file << admeta::render_mc_json(mc, cfg, seed);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"one-stage meta-analysis of IPD and aggregate-data trials"};
  app.require_subcommand(1);

  std::string fit_config, fit_output;
  std::uint64_t fit_seed = 0;
  CLI::App* fit = app.add_subcommand("fit", "run an analysis from a config file");
  fit->add_option("config", fit_config, "analysis configuration (JSON)")
      ->required();
  CLI::Option* fit_out_opt =
      fit->add_option("-o,--output", fit_output, "report path override");
  CLI::Option* fit_seed_opt = fit->add_option("--seed", fit_seed, "seed override");

  std::vector<std::string> val_ipd, val_ad;
  CLI::App* val = app.add_subcommand("validate", "schema-check input files");
  val->add_option("--ipd", val_ipd, "IPD files");
  val->add_option("--ad", val_ad, "aggregate summary files");

  int sim_n = 15000, sim_reps = 200, sim_threads = 1;
  std::uint64_t sim_seed = 20240801;
  bool sim_subgroup = false, sim_comparator = false, sim_equal = true;
  std::vector<int> sim_masked = {1, 2, 3};
  std::string sim_strategy = "per_trial", sim_output;
  CLI::App* sim =
      app.add_subcommand("simulate", "Monte Carlo study of the estimator");
  sim->add_option("--n", sim_n, "participants per replication");
  sim->add_option("--reps", sim_reps, "number of replications");
  sim->add_option("--seed", sim_seed, "master seed");
  sim->add_option("--threads", sim_threads, "worker threads");
  sim->add_option("--masked", sim_masked, "study ids reported as aggregate data");
  sim->add_option("--strategy", sim_strategy, "per_trial or stacked");
  sim->add_flag("--subgroup", sim_subgroup, "four-coefficient generator");
  sim->add_flag("--comparator", sim_comparator, "also fit the full-IPD benchmark");
  sim->add_flag("!--sample-size-pooling", sim_equal,
                "pool pairwise estimates by trial size instead of equally");
  sim->add_option("-o,--output", sim_output, "machine-readable summary path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*fit) {
      admeta::AnalysisConfig cfg = admeta::parse_analysis_config(fit_config);
      if (fit_out_opt->count() > 0) cfg.output_path = fit_output;
      if (fit_seed_opt->count() > 0) cfg.options.seed = fit_seed;
      return admeta::run_fit(cfg, std::cout, std::cerr);
    }
    if (*val) return do_validate(val_ipd, val_ad);
    if (*sim)
      return do_simulate(sim_n, sim_reps, sim_seed, sim_threads, sim_subgroup,
                         sim_comparator, sim_equal, sim_masked, sim_strategy,
                         sim_output);
  } catch (const admeta::Error& e) {
    std::cerr << "error: " << admeta::category_name(e.category()) << ": "
              << e.what() << "\n";
    return admeta::exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return admeta::exit_code(admeta::ErrorCategory::internal);
  }
  return 2;
}
