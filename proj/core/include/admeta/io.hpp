#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "admeta/pipeline.hpp"
#include "admeta/simulate.hpp"

namespace admeta {

// Delimited text, header row: study, arm, outcome, then covariate columns.
// The first three columns are positional; their header names are free.
std::vector<IpdTrial> ingest_ipd(const std::string& path);
std::vector<IpdTrial> parse_ipd(std::istream& in, const std::string& origin);

// JSON: {"trials": [{"study", "arms": {"0": {...}, "1": {...}}, ...}]}.
std::vector<AdSummary> ingest_ad(const std::string& path);
std::vector<AdSummary> parse_ad(const std::string& text, const std::string& origin);
std::string render_ad(const std::vector<AdSummary>& trials);
void write_ad(const std::vector<AdSummary>& trials, const std::string& path);

// "1" -> constant, "age" -> linear, "age^2" -> square, "age*men" -> product
MomentFn parse_moment_fn(const std::string& text,
                         const std::vector<std::string>& names);
// '*'-separated factors; "x" marks the treatment, the rest are covariates
SharedTerm parse_shared_term(const std::string& text,
                             const std::vector<std::string>& names);

struct AnalysisConfig {
  std::vector<std::string> ipd_files;
  std::vector<std::string> ad_files;
  OutcomeModelSpec model;
  PipelineOptions options;
  std::string output_path;  // machine-readable report; empty skips the file
};

AnalysisConfig parse_analysis_config(const std::string& path);
AnalysisConfig parse_analysis_config_text(const std::string& text,
                                          const std::string& origin);

struct FitReport {
  std::string json;  // machine-readable document
  std::string text;  // aligned tables
};

FitReport build_report(const PipelineResult& pr);

// ingest everything, run the pipeline, emit the report; returns an exit code
int run_fit(const AnalysisConfig& cfg, std::ostream& out, std::ostream& err);

std::string render_mc_json(const McSummary& mc, const ReplicationConfig& cfg,
                           std::uint64_t seed);
std::string render_mc_text(const McSummary& mc, std::uint64_t seed);

// 0 success; 2 input/schema; 3 numeric failure; 4 overlap; 5 internal
int exit_code(ErrorCategory c);

}  // namespace admeta
