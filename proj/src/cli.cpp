#include "shiftcai/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "shiftcai/random.hpp"
#include "shiftcai/simlab.hpp"
#include "shiftcai/table.hpp"

namespace shiftcai {

namespace fs = std::filesystem;

namespace {

std::string at_line(const std::string& source, std::size_t line, const std::string& column) {
  std::ostringstream os;
  os << source << " line " << line << ", column '" << column << "'";
  return os.str();
}

Index parse_count(const std::string& cell, const std::string& where) {
  const double v = parse_number(cell, where);
  if (v < 0 || v != std::floor(v)) throw InputError(where + ": '" + cell + "' is not a nonnegative integer");
  return static_cast<Index>(v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Input

std::string mean_column_name(const std::string& name) {
  if (!name.empty() && name[0] == 'x') return "xbar" + name.substr(1);
  return "xbar_" + name;
}

LoadedData load_nerm_csv(const std::string& data_path, const std::string& means_path, bool intercept) {
  const CsvTable t = read_csv_file(data_path);
  const std::size_t c_area = t.require_column("area");
  const std::size_t c_unit = t.require_column("unit");
  const std::size_t c_y = t.require_column("y");
  std::vector<std::size_t> cov_cols;
  LoadedData out;
  out.intercept = intercept;
  if (intercept) out.names.push_back("x0");
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    if (c == c_area || c == c_unit || c == c_y) continue;
    if (t.header[c].empty()) throw InputError(data_path + ": empty column name in header");
    if (intercept && t.header[c] == "x0") throw InputError(data_path + ": column 'x0' clashes with the intercept");
    cov_cols.push_back(c);
    out.names.push_back(t.header[c]);
  }
  if (cov_cols.empty()) throw InputError(data_path + ": no covariate columns (expected x1..xK)");
  const Index p = static_cast<Index>(out.names.size());
  const Index offset = intercept ? 1 : 0;

  struct Building {
    std::vector<VectorXd> sampled, unsampled;
    std::vector<double> y;
  };
  std::vector<std::string> order;
  std::map<std::string, Building> areas;
  std::map<std::pair<std::string, std::string>, std::size_t> seen;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t line = t.line_numbers[r];
    const std::string& area = row[c_area];
    if (area.empty()) throw InputError(at_line(data_path, line, "area") + ": empty area id");
    const auto key = std::make_pair(area, row[c_unit]);
    if (row[c_unit].empty()) throw InputError(at_line(data_path, line, "unit") + ": empty unit id");
    if (auto it = seen.find(key); it != seen.end()) {
      std::ostringstream os;
      os << at_line(data_path, line, "unit") << ": duplicate unit id '" << row[c_unit] << "' in area '" << area
         << "' (first on line " << it->second << ")";
      throw InputError(os.str());
    }
    seen.emplace(key, line);
    VectorXd x(p);
    if (intercept) x(0) = 1.0;
    for (std::size_t k = 0; k < cov_cols.size(); ++k)
      x(offset + static_cast<Index>(k)) = parse_number(row[cov_cols[k]], at_line(data_path, line, t.header[cov_cols[k]]));
    if (!areas.count(area)) order.push_back(area);
    Building& b = areas[area];
    if (row[c_y].empty()) {
      b.unsampled.push_back(x);
    } else {
      b.y.push_back(parse_number(row[c_y], at_line(data_path, line, "y")));
      b.sampled.push_back(x);
    }
  }
  if (order.empty()) throw InputError(data_path + ": no data rows");

  std::map<std::string, std::pair<VectorXd, Index>> means;
  if (!means_path.empty()) {
    const CsvTable m = read_csv_file(means_path);
    const std::size_t m_area = m.require_column("area");
    const std::size_t m_n = m.require_column("N");
    std::vector<std::size_t> m_cols;
    for (Index k = offset; k < p; ++k) m_cols.push_back(m.require_column(mean_column_name(out.names[static_cast<std::size_t>(k)])));
    for (std::size_t r = 0; r < m.rows.size(); ++r) {
      const auto& row = m.rows[r];
      const std::size_t line = m.line_numbers[r];
      VectorXd xbar(p);
      if (intercept) xbar(0) = 1.0;
      for (std::size_t k = 0; k < m_cols.size(); ++k)
        xbar(offset + static_cast<Index>(k)) = parse_number(row[m_cols[k]], at_line(means_path, line, m.header[m_cols[k]]));
      const Index N = parse_count(row[m_n], at_line(means_path, line, "N"));
      if (!means.emplace(row[m_area], std::make_pair(xbar, N)).second)
        throw InputError(at_line(means_path, line, "area") + ": duplicate area '" + row[m_area] + "'");
    }
  }

  for (const auto& id : order) {
    Building& b = areas[id];
    AreaRecord a;
    a.id = id;
    if (b.sampled.empty()) throw InputError(data_path + ": area '" + id + "' has no sampled units");
    a.y = Eigen::Map<const VectorXd>(b.y.data(), static_cast<Index>(b.y.size()));
    a.X.resize(static_cast<Index>(b.sampled.size()), p);
    for (std::size_t k = 0; k < b.sampled.size(); ++k) a.X.row(static_cast<Index>(k)) = b.sampled[k].transpose();
    if (!means_path.empty()) {
      if (!b.unsampled.empty())
        throw InputError(data_path + ": area '" + id + "' has unsampled rows and an area mean; give only one");
      const auto it = means.find(id);
      if (it == means.end()) throw InputError(means_path + ": no row for area '" + id + "'");
      a.mean_x = it->second.first;
      a.N = it->second.second;
      if (a.N < a.n()) throw InputError(means_path + ": N is smaller than the sample size for area '" + id + "'");
    } else {
      MatrixXd xu(static_cast<Index>(b.unsampled.size()), p);
      for (std::size_t k = 0; k < b.unsampled.size(); ++k) xu.row(static_cast<Index>(k)) = b.unsampled[k].transpose();
      a.X_unsampled = std::move(xu);
      a.N = a.n() + static_cast<Index>(b.unsampled.size());
    }
    out.data.areas.push_back(std::move(a));
  }
  out.data.validate();
  return out;
}

CandidateModel parse_named_candidate(const std::string& spec, const LoadedData& loaded) {
  std::vector<Index> idx;
  if (loaded.intercept) idx.push_back(0);
  std::stringstream ss(spec);
  std::string name;
  while (std::getline(ss, name, ';')) {
    name.erase(0, name.find_first_not_of(" \t"));
    name.erase(name.find_last_not_of(" \t") + 1);
    if (name.empty()) continue;
    const auto it = std::find(loaded.names.begin(), loaded.names.end(), name);
    if (it == loaded.names.end()) throw InputError("unknown covariate '" + name + "' in model '" + spec + "'");
    const Index k = static_cast<Index>(it - loaded.names.begin());
    if (std::find(idx.begin(), idx.end(), k) == idx.end()) idx.push_back(k);
  }
  if (idx.empty()) throw InputError("model '" + spec + "' names no covariates");
  return CandidateModel(idx, static_cast<Index>(loaded.names.size()));
}

std::string candidate_names(const CandidateModel& j, const std::vector<std::string>& names) {
  std::string s;
  for (Index k : j.indices()) {
    if (!s.empty()) s += ';';
    s += names[static_cast<std::size_t>(k)];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct Common {
  std::string out_dir = ".";
  std::uint64_t seed = 1;
  unsigned workers = default_workers();
};

struct SelectOptions {
  std::string data, means, variant = "hat", predictive = "unit", candidates = "all";
  std::vector<std::string> candidate_list;
  Index boot_reps = 1000;
  bool intercept = true;
};

struct PredictOptions {
  std::string data, means, model;
  bool intercept = true;
  bool log_scale = false;
};

struct BiasOptions {
  Index q = 10;
  std::string predictive = "unit";
  Index reps = 1000, oracle_reps = 10000, boot_reps = 1000;
  bool r3_order = false;
  Index q_small = 20, q_large = 40;
};

struct SaeOptions {
  Index samples = 200, q = 47, n = 189, N = 1000;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

Coverage parse_coverage(const std::string& s) {
  if (s == "unit") return Coverage::Unit;
  if (s == "area") return Coverage::Area;
  throw InputError("--predictive must be 'unit' or 'area'");
}

// Writes a CSV artifact and records its file name.
void write_artifact(const fs::path& dir, const std::string& name, std::vector<std::string>& artifacts,
                    const std::function<void(std::ostream&)>& body) {
  std::ofstream f(dir / name, std::ios::binary);
  if (!f) throw InputError("cannot write " + (dir / name).string());
  body(f);
  artifacts.push_back(name);
}

void append_manifest(const fs::path& dir, nlohmann::json entry) {
  const fs::path path = dir / "manifest.json";
  nlohmann::json runs = nlohmann::json::array();
  if (fs::exists(path)) {
    std::ifstream in(path);
    try {
      runs = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception&) {
      throw InputError(path.string() + " is not a valid manifest");
    }
    if (!runs.is_array()) throw InputError(path.string() + " is not a manifest array");
  }
  runs.push_back(std::move(entry));
  std::ofstream out(path, std::ios::binary);
  out << runs.dump(2) << '\n';
}

nlohmann::json snapshot(const CLI::App* sub) {
  nlohmann::json cfg = nlohmann::json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    if (opt->get_items_expected_max() == 0) {
      cfg[name] = opt->count() > 0 ? opt->as<bool>() : opt->get_default_str() == "true";
    } else if (opt->count() > 0) {
      const auto& res = opt->results();
      cfg[name] = opt->get_expected_max() > 1 ? nlohmann::json(res) : nlohmann::json(res.back());
    } else if (opt->get_expected_max() > 1) {
      cfg[name] = nlohmann::json::array();
    } else {
      cfg[name] = opt->get_default_str();
    }
  }
  return cfg;
}

std::vector<CandidateModel> make_candidates(const SelectOptions& o, const LoadedData& loaded) {
  const Index p = static_cast<Index>(loaded.names.size());
  std::vector<Index> forced;
  if (loaded.intercept) forced.push_back(0);
  if (!o.candidate_list.empty()) {
    std::vector<CandidateModel> out;
    for (const auto& s : o.candidate_list) out.push_back(parse_named_candidate(s, loaded));
    return out;
  }
  if (o.candidates == "all") return all_subsets(p, forced);
  if (o.candidates == "nested") return nested_chain(p);
  throw InputError("--candidates must be 'all' or 'nested' (or give --candidate)");
}

int cmd_select(const SelectOptions& o, const Common& c, std::vector<std::string>& artifacts, nlohmann::json& info,
               std::ostream& out, std::ostream& err) {
  const LoadedData loaded = load_nerm_csv(o.data, o.means, o.intercept);
  const Variant variant = parse_variant(o.variant);
  const Coverage coverage = parse_coverage(o.predictive);
  const PsiEstimate psi = estimate_psi(loaded.data);
  info["psi_hat"] = psi.psi_hat;
  info["tau2_truncated"] = psi.truncated;

  NermData data = loaded.data;
  if (coverage == Coverage::Area && data.coverage() == Coverage::Unit) data = to_area_level(data);
  if (coverage == Coverage::Unit && data.coverage() == Coverage::Area)
    throw InputError("--predictive unit needs unsampled unit rows, not an area-means file");
  const LmmSystem system(nerm_design(data, psi.psi_hat, coverage));
  const VectorXd y = build_observed(data, psi.psi_hat).y;

  std::optional<BootstrapConfig> boot;
  if (variant == Variant::Dagger) {
    boot = BootstrapConfig{};
    boot->replications = o.boot_reps;
    boot->seed = c.seed;
  }
  const std::vector<CandidateModel> candidates = make_candidates(o, loaded);
  const SelectionResult result = select_best(y, system, candidates, variant, boot, c.workers);

  write_artifact(c.out_dir, "selection.csv", artifacts, [&](std::ostream& f) {
    write_csv_row(f, {"rank", "candidate", "indices", "p_j", "variant", "sigma2_hat", "goodness", "r_star", "r1", "r2",
                      "r3", "r4", "delta_cs", "total", "psi_hat", "best", "status", "reason"});
    for (std::size_t i = 0; i < result.ranked.size(); ++i) {
      const auto& b = result.ranked[i];
      write_csv_row(f, {std::to_string(i + 1), candidate_names(b.candidate, loaded.names), b.candidate.label(),
                        std::to_string(b.candidate.size()), to_string(variant), format_number(b.sigma2_hat),
                        format_number(b.goodness), format_number(b.r_star), format_number(b.r1), format_number(b.r2),
                        format_number(b.r3), format_number(b.r4), format_number(b.delta_cs), format_number(b.total),
                        format_number(psi.psi_hat), i == 0 ? "1" : "0", "ok", ""});
    }
    for (const auto& e : result.excluded) {
      std::string reason = e.reason;
      std::replace(reason.begin(), reason.end(), ',', ';');
      write_csv_row(f, {"", candidate_names(e.candidate, loaded.names), e.candidate.label(),
                        std::to_string(e.candidate.size()), to_string(variant), "", "", "", "", "", "", "", "", "",
                        format_number(psi.psi_hat), "0", "excluded", reason});
    }
  });
  for (const auto& e : result.excluded) err << "excluded {" << candidate_names(e.candidate, loaded.names) << "}: " << e.reason << '\n';
  if (result.ranked.empty()) {
    err << "error: no candidate model survived the rank and degeneracy checks\n";
    return exit_code::kDegenerate;
  }
  const auto& best = result.best();
  info["best"] = candidate_names(best.candidate, loaded.names);
  out << "best model: " << candidate_names(best.candidate, loaded.names) << " (" << to_string(variant)
      << " = " << format_number(best.total) << ")\n";
  return exit_code::kSuccess;
}

int cmd_predict(const PredictOptions& o, const Common& c, std::vector<std::string>& artifacts, nlohmann::json& info,
                std::ostream& out) {
  const LoadedData loaded = load_nerm_csv(o.data, o.means, o.intercept);
  const CandidateModel j = o.model.empty() || o.model == "all"
                               ? CandidateModel::full(static_cast<Index>(loaded.names.size()))
                               : parse_named_candidate(o.model, loaded);
  if (loaded.data.coverage() == Coverage::Area) {
    for (const auto& a : loaded.data.areas)
      if (a.r() == 0) throw InputError("area " + a.id + " is fully sampled; area-level target undefined");
  }
  const NermFit fit = fit_nerm(loaded.data, j);
  const std::vector<AreaPrediction> preds = predict_finite_mean(loaded.data, fit, o.log_scale);
  info["model"] = candidate_names(j, loaded.names);
  info["psi_hat"] = fit.psi.psi_hat;
  write_artifact(c.out_dir, "predictions.csv", artifacts, [&](std::ostream& f) {
    write_csv_row(f, {"area", "N", "n", "sampled_mean", "unsampled_mean", "predicted_mean", "psi_hat", "truncated",
                      "model"});
    for (const auto& p : preds)
      write_csv_row(f, {p.id, std::to_string(p.N), std::to_string(p.n), format_number(p.sampled_mean),
                        format_number(p.unsampled_mean), format_number(p.finite_mean), format_number(fit.psi.psi_hat),
                        fit.psi.truncated ? "1" : "0", candidate_names(j, loaded.names)});
  });
  out << "predicted " << preds.size() << " areas with model " << candidate_names(j, loaded.names) << '\n';
  return exit_code::kSuccess;
}

int cmd_simulate_bias(const BiasOptions& o, const Common& c, std::vector<std::string>& artifacts, std::ostream& out) {
  BiasExperimentConfig cfg;
  cfg.q = o.q;
  cfg.predictive = parse_coverage(o.predictive);
  cfg.outer_reps = o.reps;
  cfg.oracle_reps = o.oracle_reps;
  cfg.boot_reps = o.boot_reps;
  cfg.seed = c.seed;
  cfg.workers = c.workers;
  const BiasTable table = run_bias_experiment(cfg);
  write_artifact(c.out_dir, "bias.csv", artifacts, [&](std::ostream& f) { write_bias_csv(f, table); });
  for (const auto& r : table.rows)
    out << "{" << r.candidate.label() << "} cAI " << format_number(r.truth.mean) << "  relbias u "
        << format_number(r.u.relbias) << "  hat " << format_number(r.hat.relbias) << "  dagger "
        << format_number(r.dagger.relbias) << '\n';
  if (o.r3_order) {
    R3OrderConfig rc;
    rc.base = cfg;
    rc.q_small = o.q_small;
    rc.q_large = o.q_large;
    const auto rows = run_r3_order_experiment(rc);
    write_artifact(c.out_dir, "r3_order.csv", artifacts, [&](std::ostream& f) { write_r3_order_csv(f, rows); });
  }
  return exit_code::kSuccess;
}

int cmd_simulate_sae(const SaeOptions& o, const Common& c, std::vector<std::string>& artifacts, nlohmann::json& info,
                     std::ostream& out) {
  DesignSimConfig cfg;
  cfg.samples = o.samples;
  cfg.q = o.q;
  cfg.n = o.n;
  cfg.N = o.N;
  cfg.seed = c.seed;
  cfg.workers = c.workers;
  const Population pop = generate_synthetic_population(cfg);
  const DesignSimResult result = run_design_sim(cfg, pop);
  write_artifact(c.out_dir, "population.csv", artifacts, [&](std::ostream& f) { write_population_csv(f, pop); });
  write_artifact(c.out_dir, "design.csv", artifacts, [&](std::ostream& f) { write_design_csv(f, result); });
  write_artifact(c.out_dir, "design_samples.csv", artifacts,
                 [&](std::ostream& f) { write_design_samples_csv(f, result); });
  info["share_area_ratio_below_1"] = result.share_area_better();
  info["share_unit_ratio_0.8_1.2"] = result.share_unit_similar(0.8, 1.2);
  info["redraws"] = result.redraws;
  out << "areas with MSE ratio (area-level / baseline) < 1: " << format_number(result.share_area_better()) << '\n'
      << "areas with MSE ratio (unit-level / baseline) in [0.8, 1.2]: "
      << format_number(result.share_unit_similar(0.8, 1.2)) << '\n';
  return exit_code::kSuccess;
}

// Flat key = value lines; '#' starts a comment.
std::vector<std::pair<std::string, std::string>> read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file " + path);
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  std::size_t number = 0;
  auto trim = [](std::string s) {
    s.erase(0, s.find_first_not_of(" \t\r"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    return s;
  };
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InputError(path + " line " + std::to_string(number) + ": expected key = value");
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    kv.emplace_back(trim(line.substr(0, eq)), value);
  }
  return kv;
}

bool truthy(const std::string& v) { return v == "true" || v == "1" || v == "yes" || v == "on"; }

// Appends config-file settings for options not given on the command line.
std::vector<std::string> merge_config(const std::vector<std::string>& args, CLI::App& app) {
  std::string config_path;
  std::string command;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
    if (command.empty() && !args[i].empty() && args[i][0] != '-' && (i == 0 || args[i - 1] != "--config"))
      command = args[i];
  }
  if (config_path.empty()) return args;
  CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(command);
  } catch (const CLI::OptionNotFound&) {
    throw InputError("--config needs a subcommand");
  }
  std::vector<std::string> merged = args;
  for (const auto& [key, value] : read_config(config_path)) {
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (!opt || key == "config") throw InputError(config_path + ": unknown key '" + key + "' for " + command);
    const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0 || (key == "log-scale" && a == "--no-log-scale") ||
             (key == "intercept" && a == "--no-intercept");
    });
    if (given) continue;
    if (opt->get_items_expected_max() == 0) {
      if (truthy(value)) {
        merged.push_back(flag);
      } else if (key == "intercept") {
        merged.push_back("--no-intercept");
      }
    } else {
      merged.push_back(flag);
      merged.push_back(value);
    }
  }
  return merged;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Conditional AIC variable selection for linear mixed models under covariate shift", "shiftcai"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(SHIFTCAI_VERSION));
  app.option_defaults()->always_capture_default();

  Common common;
  std::string config_path;
  auto add_common = [&](CLI::App* sub, bool randomness) {
    sub->add_option("--out", common.out_dir, "Output directory (created if missing)");
    sub->add_option("--config", config_path, "Flat key = value file; command-line flags win");
    sub->add_option("--workers", common.workers, "Worker threads")->check(CLI::PositiveNumber);
    if (randomness) sub->add_option("--seed", common.seed, "Seed for all random draws");
  };

  SelectOptions sel;
  CLI::App* s = app.add_subcommand("select", "Rank candidate models by a criterion");
  s->add_option("--data", sel.data, "Unit data CSV (area,unit,y,x1..xK)")->required();
  s->add_option("--area-means", sel.means, "Area means CSV (area,xbar1..xbarK,N)");
  s->add_option("--variant", sel.variant, "u, hat or dagger")->check(CLI::IsMember({"u", "hat", "dagger"}));
  s->add_option("--predictive", sel.predictive, "unit or area")->check(CLI::IsMember({"unit", "area"}));
  s->add_option("--boot-reps", sel.boot_reps, "Bootstrap replications for dagger");
  s->add_option("--candidates", sel.candidates, "all or nested")->check(CLI::IsMember({"all", "nested"}));
  s->add_option("--candidate", sel.candidate_list, "Explicit candidate such as 'x1;x3' (repeatable)");
  s->add_flag("--intercept,!--no-intercept", sel.intercept, "Add a forced intercept column x0")->default_str("true");
  add_common(s, true);

  PredictOptions pre;
  CLI::App* p = app.add_subcommand("predict", "Predict finite-population area means");
  p->add_option("--data", pre.data, "Unit data CSV (area,unit,y,x1..xK)")->required();
  p->add_option("--area-means", pre.means, "Area means CSV (area,xbar1..xbarK,N)");
  p->add_option("--model", pre.model, "Covariates such as 'x1;x3', or 'all'");
  p->add_flag("--intercept,!--no-intercept", pre.intercept, "Add an intercept column x0")->default_str("true");
  p->add_flag("--log-scale,!--no-log-scale", pre.log_scale, "y holds log values; predict on the original scale")->default_str("false");
  add_common(p, false);

  BiasOptions bias;
  CLI::App* b = app.add_subcommand("simulate-bias", "Bias of the criteria against the Monte Carlo truth");
  b->add_option("--q", bias.q, "Number of areas")->check(CLI::PositiveNumber);
  b->add_option("--predictive", bias.predictive, "unit or area")->check(CLI::IsMember({"unit", "area"}));
  b->add_option("--reps", bias.reps, "Outer replications");
  b->add_option("--oracle-reps", bias.oracle_reps, "Monte Carlo iterations of the truth");
  b->add_option("--boot-reps", bias.boot_reps, "Bootstrap replications");
  b->add_flag("--r3-order", bias.r3_order, "Also run the R3 order experiment")->default_str("false");
  b->add_option("--q-small", bias.q_small, "Areas of the smaller R3 design");
  b->add_option("--q-large", bias.q_large, "Areas of the larger R3 design");
  add_common(b, true);

  SaeOptions sae;
  CLI::App* d = app.add_subcommand("simulate-sae", "Design-based small area study on a synthetic population");
  d->add_option("--samples", sae.samples, "Number of samples")->check(CLI::PositiveNumber);
  d->add_option("--areas", sae.q, "Number of areas")->check(CLI::PositiveNumber);
  d->add_option("--sample-size", sae.n, "Total sample size")->check(CLI::PositiveNumber);
  d->add_option("--population-size", sae.N, "Population size")->check(CLI::PositiveNumber);
  add_common(d, true);

  std::vector<std::string> merged;
  try {
    merged = merge_config(args, app);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::kInputError;
  }
  try {
    std::vector<std::string> reversed(merged.rbegin(), merged.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_code::kSuccess : exit_code::kInputError;
  }

  const auto started = std::chrono::steady_clock::now();
  const std::string started_at = utc_now();
  std::vector<std::string> artifacts;
  nlohmann::json info = nlohmann::json::object();
  CLI::App* used = app.get_subcommands().front();
  int code = exit_code::kSuccess;
  try {
    fs::create_directories(common.out_dir);
    if (used == s) code = cmd_select(sel, common, artifacts, info, out, err);
    if (used == p) code = cmd_predict(pre, common, artifacts, info, out);
    if (used == b) code = cmd_simulate_bias(bias, common, artifacts, out);
    if (used == d) code = cmd_simulate_sae(sae, common, artifacts, info, out);
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    code = exit_code::kInputError;
  } catch (const RankDeficientError& e) {
    err << "error: " << e.what() << '\n';
    code = exit_code::kInputError;
  } catch (const DegenerateFitError& e) {
    err << "error: " << e.what() << '\n';
    code = exit_code::kDegenerate;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    code = exit_code::kNumerical;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    code = exit_code::kInputError;
  }

  if (fs::is_directory(common.out_dir)) {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    nlohmann::json entry{{"command", used->get_name()},
                         {"version", SHIFTCAI_VERSION},
                         {"config", snapshot(used)},
                         {"config_file", config_path},
                         {"started", started_at},
                         {"finished", utc_now()},
                         {"wall_seconds", wall},
                         {"artifacts", artifacts},
                         {"exit_code", code},
                         {"results", info}};
    if (used->get_option_no_throw("--seed")) entry["seed"] = common.seed;
    try {
      append_manifest(common.out_dir, std::move(entry));
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      if (code == exit_code::kSuccess) code = exit_code::kInputError;
    }
  }
  return code;
}

}  // namespace shiftcai
