#include "admeta/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "admeta/errors.hpp"

namespace admeta {

using nlohmann::json;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCategory::schema, "cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string trimmed(std::string s) {
  const auto notspace = [](unsigned char c) { return std::isspace(c) == 0; };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
  s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
  return s;
}

std::vector<std::string> split_line(const std::string& line, bool comma) {
  std::vector<std::string> out;
  if (comma) {
    std::istringstream is(line);
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(trimmed(tok));
    if (!line.empty() && line.back() == ',') out.emplace_back();
  } else {
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) out.push_back(tok);
  }
  return out;
}

[[noreturn]] void cell_fail(const std::string& origin, int row,
                            const std::string& column, const std::string& what) {
  fail(ErrorCategory::schema,
       origin + ": row " + std::to_string(row) + ", column " + column + ": " + what);
}

long parse_int(const std::string& tok, const std::string& origin, int row,
               const std::string& column) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(tok, &used);
  } catch (const std::exception&) {
    cell_fail(origin, row, column, "expected an integer, got '" + tok + "'");
  }
  if (used != tok.size())
    cell_fail(origin, row, column, "expected an integer, got '" + tok + "'");
  return v;
}

double parse_real(const std::string& tok, const std::string& origin, int row,
                  const std::string& column) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    cell_fail(origin, row, column, "expected a number, got '" + tok + "'");
  }
  if (used != tok.size())
    cell_fail(origin, row, column, "expected a number, got '" + tok + "'");
  if (!std::isfinite(v))
    cell_fail(origin, row, column, "non-finite value '" + tok + "'");
  return v;
}

const json& require(const json& node, const char* key, const std::string& where) {
  auto it = node.find(key);
  if (it == node.end())
    fail(ErrorCategory::schema, where + ": missing field '" + key + "'");
  return *it;
}

double number_field(const json& node, const char* key, const std::string& where) {
  const json& v = require(node, key, where);
  if (!v.is_number())
    fail(ErrorCategory::schema, where + ": field '" + key + "' must be a number");
  return v.get<double>();
}

int resolve_covariate(const std::string& name,
                      const std::vector<std::string>& names,
                      const std::string& where) {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end())
    fail(ErrorCategory::schema, where + ": unknown covariate '" + name + "'");
  return static_cast<int>(it - names.begin());
}

}  // namespace

std::vector<IpdTrial> parse_ipd(std::istream& in, const std::string& origin) {
  std::string line;
  if (!std::getline(in, line))
    fail(ErrorCategory::schema, origin + ": empty file");
  const bool comma = line.find(',') != std::string::npos;
  const std::vector<std::string> header = split_line(line, comma);
  if (header.size() < 3)
    fail(ErrorCategory::schema,
         origin + ": header needs study, arm and outcome columns");
  std::vector<std::string> covs(header.begin() + 3, header.end());
  for (std::size_t a = 0; a < covs.size(); ++a) {
    if (covs[a].empty())
      fail(ErrorCategory::schema, origin + ": empty covariate column name");
    for (std::size_t b = a + 1; b < covs.size(); ++b)
      if (covs[a] == covs[b])
        fail(ErrorCategory::schema,
             origin + ": duplicate covariate column '" + covs[a] + "'");
  }

  std::map<int, std::vector<ObservationRow>> by_study;
  std::vector<int> order;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trimmed(line).empty()) continue;
    const std::vector<std::string> tok = split_line(line, comma);
    if (tok.size() != header.size())
      fail(ErrorCategory::schema, origin + ": row " + std::to_string(lineno) +
                                      ": expected " + std::to_string(header.size()) +
                                      " columns, got " + std::to_string(tok.size()));
    ObservationRow row;
    row.study = static_cast<int>(parse_int(tok[0], origin, lineno, header[0]));
    if (row.study < 1)
      cell_fail(origin, lineno, header[0], "study id must be positive");
    const long arm = parse_int(tok[1], origin, lineno, header[1]);
    if (arm != 0 && arm != 1)
      cell_fail(origin, lineno, header[1], "arm must be 0 or 1, got '" + tok[1] + "'");
    row.x = static_cast<int>(arm);
    const long y = parse_int(tok[2], origin, lineno, header[2]);
    if (y != 0 && y != 1)
      cell_fail(origin, lineno, header[2],
                "outcome must be 0 or 1, got '" + tok[2] + "'");
    row.y = static_cast<int>(y);
    row.l.resize(static_cast<Eigen::Index>(covs.size()));
    for (std::size_t c = 0; c < covs.size(); ++c)
      row.l(static_cast<Eigen::Index>(c)) =
          parse_real(tok[3 + c], origin, lineno, covs[c]);
    if (by_study.find(row.study) == by_study.end()) order.push_back(row.study);
    by_study[row.study].push_back(std::move(row));
  }
  if (by_study.empty()) fail(ErrorCategory::schema, origin + ": no data rows");

  std::vector<IpdTrial> trials;
  for (int id : order) trials.push_back(IpdTrial::from_rows(id, std::move(by_study[id])));
  for (IpdTrial& t : trials) t.covariate_names = covs;
  return trials;
}

std::vector<IpdTrial> ingest_ipd(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCategory::schema, "cannot open " + path);
  return parse_ipd(in, path);
}

namespace {

ArmSummary parse_arm(const json& node, const std::vector<std::string>& covs,
                     const std::string& where) {
  if (!node.is_object()) fail(ErrorCategory::schema, where + ": arm must be an object");
  ArmSummary arm;
  const double n = number_field(node, "n", where);
  if (n < 1 || n != std::floor(n))
    fail(ErrorCategory::schema, where + ": n must be a positive integer");
  arm.n = static_cast<int>(n);
  arm.y_mean = number_field(node, "y_mean", where);
  if (!(arm.y_mean >= 0.0 && arm.y_mean <= 1.0))
    fail(ErrorCategory::schema, where + ": y_mean outside [0,1]");
  const json& means = require(node, "means", where);
  const json& vars = require(node, "variances", where);
  const int d = static_cast<int>(covs.size());
  arm.l_mean.resize(d);
  arm.l_var.resize(d);
  for (int c = 0; c < d; ++c) {
    arm.l_mean(c) = number_field(means, covs[c].c_str(), where + " means");
    arm.l_var(c) = number_field(vars, covs[c].c_str(), where + " variances");
    if (arm.l_var(c) < 0.0)
      fail(ErrorCategory::schema,
           where + ": negative variance for '" + covs[c] + "'");
  }
  for (const auto& [key, value] : means.items())
    if (std::find(covs.begin(), covs.end(), key) == covs.end())
      fail(ErrorCategory::schema, where + ": unknown covariate '" + key + "'");
  if (auto it = node.find("cross"); it != node.end()) {
    for (const auto& [key, value] : it->items()) {
      const auto star = key.find('*');
      if (star == std::string::npos)
        fail(ErrorCategory::schema, where + ": cross key '" + key + "' needs a '*'");
      int a = resolve_covariate(key.substr(0, star), covs, where);
      int b = resolve_covariate(key.substr(star + 1), covs, where);
      if (a == b)
        fail(ErrorCategory::schema, where + ": cross key '" + key +
                                        "' repeats a covariate; report it as a variance");
      if (a > b) std::swap(a, b);
      if (!value.is_number())
        fail(ErrorCategory::schema, where + ": cross '" + key + "' must be a number");
      arm.cross[{a, b}] = value.get<double>();
    }
  }
  return arm;
}

AdSummary parse_ad_trial(const json& node, const std::string& origin) {
  if (!node.is_object())
    fail(ErrorCategory::schema, origin + ": trial entry must be an object");
  AdSummary ad;
  const double study = number_field(node, "study", origin);
  if (study < 1 || study != std::floor(study))
    fail(ErrorCategory::schema, origin + ": study id must be a positive integer");
  ad.study = static_cast<int>(study);
  const std::string where = origin + ": study " + std::to_string(ad.study);

  const json& arms = require(node, "arms", where);
  const json& arm0 = require(arms, "0", where);
  const json& arm1 = require(arms, "1", where);
  if (auto it = node.find("covariates"); it != node.end()) {
    for (const json& name : *it) ad.covariate_names.push_back(name.get<std::string>());
    for (std::size_t a = 0; a < ad.covariate_names.size(); ++a)
      for (std::size_t b = a + 1; b < ad.covariate_names.size(); ++b)
        if (ad.covariate_names[a] == ad.covariate_names[b])
          fail(ErrorCategory::schema,
               where + ": duplicate covariate '" + ad.covariate_names[a] + "'");
  } else {
    const json& means = require(arm0, "means", where + " arm 0");
    for (const auto& [key, value] : means.items()) ad.covariate_names.push_back(key);
    std::sort(ad.covariate_names.begin(), ad.covariate_names.end());
  }
  ad.arms[0] = parse_arm(arm0, ad.covariate_names, where + " arm 0");
  ad.arms[1] = parse_arm(arm1, ad.covariate_names, where + " arm 1");
  if (auto it = node.find("arm_probability"); it != node.end()) {
    if (!it->is_array() || it->size() != 2)
      fail(ErrorCategory::schema, where + ": arm_probability must have two entries");
    ad.arm_prob[0] = (*it)[0].get<double>();
    ad.arm_prob[1] = (*it)[1].get<double>();
  } else {
    ad.arm_prob[0] = static_cast<double>(ad.arms[0].n) / ad.n();
    ad.arm_prob[1] = static_cast<double>(ad.arms[1].n) / ad.n();
  }
  if (auto it = node.find("subgroup"); it != node.end()) {
    SubgroupBlock sg;
    sg.covariate = resolve_covariate(
        require(*it, "covariate", where + " subgroup").get<std::string>(),
        ad.covariate_names, where + " subgroup");
    const json& frac = require(*it, "fraction", where + " subgroup");
    const json& ym = require(*it, "y_mean", where + " subgroup");
    if (!frac.is_array() || frac.size() != 2 || !ym.is_array() || ym.size() != 2)
      fail(ErrorCategory::schema,
           where + ": subgroup fraction and y_mean must have two entries");
    for (int l = 0; l < 2; ++l) sg.fraction[l] = frac[l].get<double>();
    for (int x = 0; x < 2; ++x) {
      if (!ym[x].is_array() || ym[x].size() != 2)
        fail(ErrorCategory::schema, where + ": subgroup y_mean rows are per arm");
      for (int l = 0; l < 2; ++l) sg.y_mean[x][l] = ym[x][l].get<double>();
    }
    ad.subgroup = sg;
  }
  ad.validate();
  return ad;
}

}  // namespace

std::vector<AdSummary> parse_ad(const std::string& text, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCategory::schema, origin + ": " + e.what());
  }
  std::vector<AdSummary> out;
  try {
    const json& trials = require(doc, "trials", origin);
    if (!trials.is_array())
      fail(ErrorCategory::schema, origin + ": 'trials' must be an array");
    for (const json& t : trials) out.push_back(parse_ad_trial(t, origin));
  } catch (const json::exception& e) {
    fail(ErrorCategory::schema, origin + ": " + e.what());
  }
  if (out.empty()) fail(ErrorCategory::schema, origin + ": no trials");
  return out;
}

std::vector<AdSummary> ingest_ad(const std::string& path) {
  return parse_ad(slurp(path), path);
}

std::string render_ad(const std::vector<AdSummary>& trials) {
  json doc;
  doc["trials"] = json::array();
  for (const AdSummary& src : trials) {
    AdSummary ad = src;
    if (ad.covariate_names.empty())
      for (int c = 0; c < ad.n_cov(); ++c)
        ad.covariate_names.push_back("l" + std::to_string(c));
    if (static_cast<int>(ad.covariate_names.size()) != ad.n_cov())
      fail(ErrorCategory::dimension, "covariate names do not match the summary width");
    json t;
    t["study"] = ad.study;
    t["covariates"] = ad.covariate_names;
    t["arm_probability"] = {ad.arm_prob[0], ad.arm_prob[1]};
    for (int x = 0; x < 2; ++x) {
      json arm;
      arm["n"] = ad.arms[x].n;
      arm["y_mean"] = ad.arms[x].y_mean;
      json means, vars;
      for (std::size_t c = 0; c < ad.covariate_names.size(); ++c) {
        means[ad.covariate_names[c]] = ad.arms[x].l_mean(static_cast<Eigen::Index>(c));
        vars[ad.covariate_names[c]] = ad.arms[x].l_var(static_cast<Eigen::Index>(c));
      }
      arm["means"] = std::move(means);
      arm["variances"] = std::move(vars);
      if (!ad.arms[x].cross.empty()) {
        json cross;
        for (const auto& [idx, value] : ad.arms[x].cross)
          cross[ad.covariate_names[idx.first] + "*" + ad.covariate_names[idx.second]] =
              value;
        arm["cross"] = std::move(cross);
      }
      t["arms"][std::to_string(x)] = std::move(arm);
    }
    if (ad.subgroup) {
      json sg;
      sg["covariate"] = ad.covariate_names[ad.subgroup->covariate];
      sg["fraction"] = {ad.subgroup->fraction[0], ad.subgroup->fraction[1]};
      sg["y_mean"] = {{ad.subgroup->y_mean[0][0], ad.subgroup->y_mean[0][1]},
                      {ad.subgroup->y_mean[1][0], ad.subgroup->y_mean[1][1]}};
      t["subgroup"] = std::move(sg);
    }
    doc["trials"].push_back(std::move(t));
  }
  return doc.dump(2) + "\n";
}

void write_ad(const std::vector<AdSummary>& trials, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCategory::schema, "cannot write " + path);
  out << render_ad(trials);
}

MomentFn parse_moment_fn(const std::string& text,
                         const std::vector<std::string>& names) {
  const std::string s = trimmed(text);
  if (s.empty()) fail(ErrorCategory::schema, "empty moment expression");
  if (s == "1") return MomentFn::constant_term();
  if (const auto star = s.find('*'); star != std::string::npos) {
    const int a = resolve_covariate(trimmed(s.substr(0, star)), names, "moment '" + s + "'");
    const int b = resolve_covariate(trimmed(s.substr(star + 1)), names, "moment '" + s + "'");
    if (a == b) return MomentFn::square(a);
    return MomentFn::product(std::min(a, b), std::max(a, b));
  }
  if (const auto hat = s.find('^'); hat != std::string::npos) {
    if (trimmed(s.substr(hat + 1)) != "2")
      fail(ErrorCategory::schema, "moment '" + s + "': only squares are supported");
    return MomentFn::square(resolve_covariate(trimmed(s.substr(0, hat)), names,
                                              "moment '" + s + "'"));
  }
  return MomentFn::linear(resolve_covariate(s, names, "moment '" + s + "'"));
}

SharedTerm parse_shared_term(const std::string& text,
                             const std::vector<std::string>& names) {
  SharedTerm term;
  std::istringstream is(trimmed(text));
  std::string factor;
  bool any = false;
  while (std::getline(is, factor, '*')) {
    factor = trimmed(factor);
    if (factor.empty())
      fail(ErrorCategory::schema, "term '" + text + "': empty factor");
    any = true;
    if (factor == "x") {
      if (term.with_treatment)
        fail(ErrorCategory::schema, "term '" + text + "': 'x' appears twice");
      term.with_treatment = true;
    } else {
      term.covariates.push_back(resolve_covariate(factor, names, "term '" + text + "'"));
    }
  }
  if (!any) fail(ErrorCategory::schema, "empty shared term");
  if (term.covariates.empty())
    fail(ErrorCategory::schema,
         "term '" + text + "': needs a covariate; the treatment main effect is trial-specific");
  return term;
}

namespace {

void apply_model(const json& node, AnalysisConfig& cfg, const std::string& origin) {
  if (auto it = node.find("covariates"); it != node.end())
    for (const json& name : *it)
      cfg.model.covariate_names.push_back(name.get<std::string>());
  if (cfg.model.covariate_names.empty())
    fail(ErrorCategory::schema, origin + ": model.covariates must be non-empty");
  if (auto it = node.find("shared_terms"); it != node.end())
    for (const json& term : *it)
      cfg.model.shared_terms.push_back(
          parse_shared_term(term.get<std::string>(), cfg.model.covariate_names));
  if (auto it = node.find("subgroup"); it != node.end()) {
    cfg.model.subgroup_covariate = resolve_covariate(
        it->get<std::string>(), cfg.model.covariate_names, origin + ": model.subgroup");
    cfg.options.subgroup = true;
  }
}

}  // namespace

AnalysisConfig parse_analysis_config_text(const std::string& text,
                                          const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCategory::schema, origin + ": " + e.what());
  }
  AnalysisConfig cfg;
  try {
    for (const json& f : require(doc, "ipd", origin))
      cfg.ipd_files.push_back(f.get<std::string>());
    if (auto it = doc.find("ad"); it != doc.end())
      for (const json& f : *it) cfg.ad_files.push_back(f.get<std::string>());
    apply_model(require(doc, "model", origin), cfg, origin);

    if (auto it = doc.find("strategy"); it != doc.end()) {
      const std::string s = it->get<std::string>();
      if (s == "per_trial")
        cfg.options.strategy = SharedFit::per_trial;
      else if (s == "stacked")
        cfg.options.strategy = SharedFit::stacked;
      else
        fail(ErrorCategory::schema, origin + ": strategy must be per_trial or stacked");
    }
    if (auto it = doc.find("pooling"); it != doc.end()) {
      const std::string s = it->get<std::string>();
      if (s == "sample_size")
        cfg.options.pooling = PoolingRule::sample_size;
      else if (s == "equal")
        cfg.options.pooling = PoolingRule::equal;
      else
        fail(ErrorCategory::schema, origin + ": pooling must be sample_size or equal");
    }
    if (doc.contains("weight_moments") || doc.contains("weight_regressors")) {
      WeightModelSpec wspec;
      if (auto it = doc.find("weight_regressors"); it != doc.end())
        for (const json& m : *it)
          wspec.regressors.push_back(
              parse_moment_fn(m.get<std::string>(), cfg.model.covariate_names));
      if (auto it = doc.find("weight_moments"); it != doc.end())
        for (const json& m : *it)
          wspec.moments.push_back(
              parse_moment_fn(m.get<std::string>(), cfg.model.covariate_names));
      if (wspec.regressors.empty()) {
        if (static_cast<int>(wspec.moments.size()) <=
            static_cast<int>(cfg.model.covariate_names.size()) + 1)
          wspec.regressors = wspec.moments;
        else
          wspec.regressors =
              WeightModelSpec::default_linear(
                  static_cast<int>(cfg.model.covariate_names.size()))
                  .regressors;
      }
      if (wspec.moments.empty()) wspec.moments = wspec.regressors;
      cfg.options.wspec = std::move(wspec);
    }
    if (auto it = doc.find("variance"); it != doc.end())
      cfg.options.compute_variance = it->get<bool>();
    if (auto it = doc.find("mom_sigma_correction"); it != doc.end())
      cfg.options.mom_sigma_correction = it->get<bool>();
    if (auto it = doc.find("weight_truncation"); it != doc.end())
      cfg.options.weight_truncation_quantile = it->get<double>();
    if (auto it = doc.find("seed"); it != doc.end())
      cfg.options.seed = it->get<std::uint64_t>();
    if (auto it = doc.find("propensity"); it != doc.end())
      cfg.options.propensity = it->get<bool>();
    if (auto it = doc.find("observational"); it != doc.end())
      cfg.options.observational = it->get<bool>();
    if (auto it = doc.find("output"); it != doc.end())
      cfg.output_path = it->get<std::string>();
  } catch (const json::exception& e) {
    fail(ErrorCategory::schema, origin + ": " + e.what());
  }
  cfg.model.validate();
  if (cfg.ipd_files.empty())
    fail(ErrorCategory::schema, origin + ": at least one IPD file is required");
  return cfg;
}

AnalysisConfig parse_analysis_config(const std::string& path) {
  return parse_analysis_config_text(slurp(path), path);
}

namespace {

constexpr double kZ = 1.959963984540054;

json ci_entry(double est, std::optional<double> var) {
  json e;
  e["estimate"] = est;
  if (var && *var >= 0.0) {
    const double h = kZ * std::sqrt(*var);
    e["se"] = std::sqrt(*var);
    e["ci"] = {est - h, est + h};
  } else {
    e["se"] = nullptr;
    e["ci"] = nullptr;
  }
  return e;
}

std::string fmt(double v, int width = 9) {
  std::ostringstream os;
  os << std::setw(width) << std::fixed << std::setprecision(4) << v;
  return os.str();
}

std::string fmt_ci(double est, std::optional<double> var) {
  if (!var || *var < 0.0) return "        --        ";
  const double h = kZ * std::sqrt(*var);
  std::ostringstream os;
  os << "(" << fmt(est - h, 8) << "," << fmt(est + h, 8) << ")";
  return os.str();
}

struct ReportVars {
  // nullopt when the sandwich stack was skipped
  std::optional<double> star(const PipelineResult& pr, int j, int coord) const {
    if (!pr.has_variance) return std::nullopt;
    return pr.var_star(j, coord);
  }
  std::optional<double> trial(const PipelineResult& pr, int k, int coord) const {
    if (!pr.has_variance) return train_fallback(pr, k, coord);
    return pr.var_trial_phi(k, coord);
  }
  std::optional<double> train_fallback(const PipelineResult& pr, int k,
                                       int coord) const {
    if (pr.fit.strategy == SharedFit::per_trial) return pr.fit.cov[k](coord, coord);
    const int off = k * pr.spec.trial_block_dim() + coord;
    return pr.fit.cov.front()(off, off);
  }
  std::optional<double> shared(const PipelineResult& pr, int r) const {
    if (!pr.has_variance) return std::nullopt;
    return pr.var_shared(r);
  }
  std::optional<double> phi1_bar(const PipelineResult& pr) const {
    if (!pr.has_variance) return std::nullopt;
    return pr.var_phi1_bar();
  }
};

}  // namespace

FitReport build_report(const PipelineResult& pr) {
  const OutcomeModelSpec& spec = pr.spec;
  const ReportVars vars;
  json doc;
  doc["seed"] = pr.options.seed;
  doc["strategy"] =
      pr.options.strategy == SharedFit::per_trial ? "per_trial" : "stacked";
  doc["pooling"] =
      pr.options.pooling == PoolingRule::sample_size ? "sample_size" : "equal";
  doc["covariates"] = spec.covariate_names;

  json ipd_fits = json::array();
  for (std::size_t k = 0; k < pr.ipd.size(); ++k) {
    json t;
    t["study"] = pr.ipd[k].study;
    t["n"] = pr.ipd[k].n();
    const int ki = static_cast<int>(k);
    t["phi0"] = ci_entry(pr.fit.trial_params[k].phi0, vars.trial(pr, ki, 0));
    t["phi1"] = ci_entry(pr.fit.trial_params[k].phi1, vars.trial(pr, ki, 1));
    if (pr.fit.trial_params[k].extra) {
      t["phi2"] = ci_entry((*pr.fit.trial_params[k].extra)[0], vars.trial(pr, ki, 2));
      t["phi3"] = ci_entry((*pr.fit.trial_params[k].extra)[1], vars.trial(pr, ki, 3));
    }
    ipd_fits.push_back(std::move(t));
  }
  doc["ipd_trials"] = std::move(ipd_fits);

  json pairwise = json::array();
  const bool sub = !pr.sub_pairs.empty();
  for (std::size_t j = 0; j < pr.ad.size(); ++j) {
    for (std::size_t k = 0; k < pr.ipd.size(); ++k) {
      json p;
      p["ad_study"] = pr.ad[j].study;
      p["ipd_study"] = pr.ipd[k].study;
      const TrialParams& tp =
          sub ? pr.sub_pairs[j][k].params : pr.pairs[j][k].params;
      p["phi0"] = tp.phi0;
      p["phi1"] = tp.phi1;
      if (tp.extra) {
        p["phi2"] = (*tp.extra)[0];
        p["phi3"] = (*tp.extra)[1];
      }
      p["weight"] = pr.pool_w[k];
      pairwise.push_back(std::move(p));
    }
  }
  doc["pairwise"] = std::move(pairwise);

  json pooled = json::array();
  for (std::size_t j = 0; j < pr.ad.size(); ++j) {
    json t;
    t["study"] = pr.ad[j].study;
    const int ji = static_cast<int>(j);
    t["phi0"] = ci_entry(pr.ad_pooled[j].phi0, vars.star(pr, ji, 0));
    t["phi1"] = ci_entry(pr.ad_pooled[j].phi1, vars.star(pr, ji, 1));
    if (pr.ad_pooled[j].extra) {
      t["phi2"] = ci_entry((*pr.ad_pooled[j].extra)[0], vars.star(pr, ji, 2));
      t["phi3"] = ci_entry((*pr.ad_pooled[j].extra)[1], vars.star(pr, ji, 3));
    }
    pooled.push_back(std::move(t));
  }
  doc["ad_trials"] = std::move(pooled);

  json shared = json::array();
  for (int r = 0; r < spec.n_shared(); ++r) {
    json s;
    s["term"] = spec.shared_terms[r].label(spec.covariate_names);
    s.update(ci_entry(pr.shared_pooled(r), vars.shared(pr, r)));
    shared.push_back(std::move(s));
  }
  doc["shared"] = std::move(shared);
  doc["phi1_bar"] = ci_entry(pr.phi1_bar, vars.phi1_bar(pr));

  json ranef;
  ranef["mean"] = {pr.ranef.mean(0), pr.ranef.mean(1)};
  ranef["cov"] = {{pr.ranef.cov(0, 0), pr.ranef.cov(0, 1)},
                  {pr.ranef.cov(1, 0), pr.ranef.cov(1, 1)}};
  ranef["cov_identified"] = pr.ranef.cov_identified;
  doc["random_effects"] = std::move(ranef);

  json weights = json::array();
  for (const auto& wrow : pr.wfits) {
    for (const WeightFit& wf : wrow) {
      const WeightDiagnostics diag = weight_diagnostics(wf);
      json w;
      w["ad_study"] = wf.ad_study;
      w["ipd_study"] = wf.ipd_study;
      w["ess"] = diag.ess;
      w["max_min_ratio"] = diag.max_min_ratio;
      w["balance_gap"] = balance_gap(wf);
      w["iterations"] = wf.iterations;
      w["truncated"] = wf.truncated;
      if (wf.overidentified) {
        w["residual_norm"] = wf.residual_norm;
        w["compat_warning"] = wf.compat_warning;
      }
      std::vector<double> beta(wf.beta.data(), wf.beta.data() + wf.beta.size());
      w["beta"] = beta;
      weights.push_back(std::move(w));
    }
  }
  doc["weights"] = std::move(weights);

  json conv;
  conv["ipd_iterations"] = pr.fit.iterations;
  conv["ipd_score_max"] = pr.fit.score_max;
  json solves = json::array();
  if (sub) {
    for (const auto& prow : pr.sub_pairs)
      for (const SubgroupPairEstimate& pe : prow) {
        json s;
        s["ad_study"] = pe.ad_study;
        s["ipd_study"] = pe.ipd_study;
        s["iterations"] = pe.iterations;
        s["max_residual"] = pe.residual.cwiseAbs().maxCoeff();
        solves.push_back(std::move(s));
      }
  } else {
    for (const auto& prow : pr.pairs)
      for (const PairEstimate& pe : prow) {
        json s;
        s["ad_study"] = pe.ad_study;
        s["ipd_study"] = pe.ipd_study;
        s["iterations"] = pe.iterations;
        s["max_residual"] = pe.residual.cwiseAbs().maxCoeff();
        solves.push_back(std::move(s));
      }
  }
  conv["pair_solves"] = std::move(solves);
  doc["convergence"] = std::move(conv);

  json variance;
  variance["available"] = pr.has_variance;
  if (!pr.variance_note.empty()) variance["note"] = pr.variance_note;
  if (pr.has_variance) variance["condition_number"] = pr.sw.cond_a;
  doc["variance"] = std::move(variance);

  // text rendering
  std::ostringstream os;
  os << "one-stage AD/IPD meta-analysis\n";
  os << "seed " << pr.options.seed << " | strategy "
     << doc["strategy"].get<std::string>() << " | pooling "
     << doc["pooling"].get<std::string>() << "\n\n";

  os << "IPD trials\n";
  os << "  study        n      phi0      phi1        95% CI (phi1)\n";
  for (std::size_t k = 0; k < pr.ipd.size(); ++k) {
    const int ki = static_cast<int>(k);
    os << "  " << std::setw(5) << pr.ipd[k].study << std::setw(9) << pr.ipd[k].n()
       << fmt(pr.fit.trial_params[k].phi0) << fmt(pr.fit.trial_params[k].phi1)
       << "  " << fmt_ci(pr.fit.trial_params[k].phi1, vars.trial(pr, ki, 1)) << "\n";
  }
  os << "\nAD trials (recovered)\n";
  os << "  study";
  for (std::size_t k = 0; k < pr.ipd.size(); ++k)
    os << std::setw(9) << ("pair:" + std::to_string(pr.ipd[k].study));
  os << "    pooled        95% CI (phi1)\n";
  for (std::size_t j = 0; j < pr.ad.size(); ++j) {
    os << "  " << std::setw(5) << pr.ad[j].study;
    for (std::size_t k = 0; k < pr.ipd.size(); ++k)
      os << fmt(sub ? pr.sub_pairs[j][k].params.phi1 : pr.pairs[j][k].params.phi1);
    os << fmt(pr.ad_pooled[j].phi1, 10) << "  "
       << fmt_ci(pr.ad_pooled[j].phi1, vars.star(pr, static_cast<int>(j), 1)) << "\n";
  }
  os << "\nshared coefficients\n";
  for (int r = 0; r < spec.n_shared(); ++r)
    os << "  " << std::setw(12) << spec.shared_terms[r].label(spec.covariate_names)
       << fmt(pr.shared_pooled(r)) << "  " << fmt_ci(pr.shared_pooled(r), vars.shared(pr, r))
       << "\n";
  os << "\npooled treatment coefficient\n";
  os << "  phi1_bar" << fmt(pr.phi1_bar, 10) << "  "
     << fmt_ci(pr.phi1_bar, vars.phi1_bar(pr)) << "\n";
  os << "\nweight diagnostics\n";
  os << "  ad/ipd        ess   max/min   balance\n";
  for (const auto& wrow : pr.wfits)
    for (const WeightFit& wf : wrow) {
      const WeightDiagnostics diag = weight_diagnostics(wf);
      os << "  " << std::setw(3) << wf.ad_study << "/" << wf.ipd_study
         << fmt(diag.ess, 10) << fmt(diag.max_min_ratio) << "  "
         << std::scientific << std::setprecision(1) << balance_gap(wf)
         << std::defaultfloat;
      if (wf.compat_warning) os << "  [compatibility warning]";
      os << "\n";
    }
  if (!pr.has_variance && !pr.variance_note.empty())
    os << "\nvariance: " << pr.variance_note << "\n";

  FitReport rep;
  rep.json = doc.dump(2) + "\n";
  rep.text = os.str();
  return rep;
}

int run_fit(const AnalysisConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    std::vector<IpdTrial> ipd;
    for (const std::string& path : cfg.ipd_files) {
      std::vector<IpdTrial> part = ingest_ipd(path);
      for (IpdTrial& t : part) {
        if (t.covariate_names != cfg.model.covariate_names)
          fail(ErrorCategory::schema,
               path + ": covariate columns do not match the model declaration");
        ipd.push_back(std::move(t));
      }
    }
    std::vector<AdSummary> ad;
    for (const std::string& path : cfg.ad_files) {
      std::vector<AdSummary> part = ingest_ad(path);
      for (AdSummary& s : part) ad.push_back(std::move(s));
    }
    PipelineResult pr = run_pipeline(std::move(ipd), std::move(ad), cfg.model,
                                     cfg.options);
    const FitReport rep = build_report(pr);
    if (!cfg.output_path.empty()) {
      std::ofstream file(cfg.output_path);
      if (!file) fail(ErrorCategory::schema, "cannot write " + cfg.output_path);
      file << rep.json;
    }
    out << rep.text;
    return 0;
  } catch (const Error& e) {
    err << "error: " << category_name(e.category()) << ": " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return exit_code(ErrorCategory::internal);
  }
}

std::string render_mc_json(const McSummary& mc, const ReplicationConfig& cfg,
                           std::uint64_t seed) {
  json doc;
  doc["seed"] = seed;
  doc["n"] = cfg.dgp.n;
  doc["trials"] = cfg.dgp.n_trials;
  doc["masked"] = cfg.masked;
  doc["replications"] = mc.requested;
  doc["failures"] = mc.failures;
  json rows = json::array();
  for (const McRow& r : mc.rows) {
    json row;
    row["name"] = r.name;
    row["truth"] = r.truth;
    row["n_used"] = r.n_used;
    row["bias"] = r.bias;
    row["empirical_var"] = r.emp_var;
    row["mean_estimated_var"] = r.mean_est_var;
    row["coverage_pct"] = r.coverage_pct;
    rows.push_back(std::move(row));
  }
  doc["rows"] = std::move(rows);
  return doc.dump(2) + "\n";
}

std::string render_mc_text(const McSummary& mc, std::uint64_t seed) {
  std::ostringstream os;
  os << "monte carlo summary | seed " << seed << " | replications "
     << mc.requested << " | failures " << mc.failures << "\n";
  os << std::setw(16) << "parameter" << std::setw(8) << "truth" << std::setw(9)
     << "bias" << std::setw(12) << "emp var" << std::setw(12) << "est var"
     << std::setw(10) << "cover %" << "\n";
  for (const McRow& r : mc.rows) {
    os << std::setw(16) << r.name << std::fixed << std::setprecision(3)
       << std::setw(8) << r.truth << std::setw(9) << r.bias << std::scientific
       << std::setprecision(3) << std::setw(12) << r.emp_var << std::setw(12)
       << r.mean_est_var << std::fixed << std::setprecision(1) << std::setw(10)
       << r.coverage_pct << "\n";
    os << std::defaultfloat;
  }
  return os.str();
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::schema:
    case ErrorCategory::dimension:
    case ErrorCategory::domain:
    case ErrorCategory::missing_moment:
      return 2;
    case ErrorCategory::singular:
    case ErrorCategory::separation:
    case ErrorCategory::convergence:
    case ErrorCategory::boundary:
    case ErrorCategory::size:
    case ErrorCategory::incompatible:
      return 3;
    case ErrorCategory::overlap:
      return 4;
    case ErrorCategory::internal:
      return 5;
  }
  return 5;
}

}  // namespace admeta
