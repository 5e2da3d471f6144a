#ifndef SHOPT_HARNESS_HPP
#define SHOPT_HARNESS_HPP

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "shopt/common.hpp"
#include "shopt/diagnostics.hpp"
#include "shopt/optimizers.hpp"
#include "shopt/problems.hpp"

namespace shopt {

namespace fs = std::filesystem;

namespace detail {

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string gshort(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace detail

inline constexpr const char* kCsvHeader =
    "t,eta_t,loss,grad_norm,rgps_norm,weighted_metric,delta,kappa,"
    "gate_attempts,grad_evals";

inline void write_csv(const fs::path& path, const std::vector<EpochRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("write_csv: cannot open " + path.string());
  out << kCsvHeader << "\n";
  for (const auto& r : rows) {
    out << r.t << ',' << detail::g17(r.eta) << ',' << detail::g17(r.loss) << ','
        << detail::g17(r.grad_norm) << ',' << detail::g17(r.rgps_norm) << ','
        << detail::g17(r.weighted_metric) << ',' << detail::g17(r.delta) << ','
        << detail::g17(r.kappa) << ',' << r.gate_attempts << ','
        << r.grad_evals << "\n";
  }
}

inline std::vector<EpochRow> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("read_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw Error("read_csv: unexpected header in " + path.string());
  std::vector<EpochRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) parts.push_back(cell);
    if (parts.size() != 10) throw Error("read_csv: malformed row in " + path.string());
    EpochRow r;
    r.t = std::stoi(parts[0]);
    r.eta = std::strtod(parts[1].c_str(), nullptr);
    r.loss = std::strtod(parts[2].c_str(), nullptr);
    r.grad_norm = std::strtod(parts[3].c_str(), nullptr);
    r.rgps_norm = std::strtod(parts[4].c_str(), nullptr);
    r.weighted_metric = std::strtod(parts[5].c_str(), nullptr);
    r.delta = std::strtod(parts[6].c_str(), nullptr);
    r.kappa = std::strtod(parts[7].c_str(), nullptr);
    r.gate_attempts = std::stoi(parts[8]);
    r.grad_evals = std::stoll(parts[9]);
    rows.push_back(r);
  }
  return rows;
}

/// One optimizer row of the experiment matrix.
struct OptimizerSpec {
  Method method = Method::sgd;
  Sampling sampling = Sampling::shuffled;
  ScheduleKind schedule = ScheduleKind::constant;
  std::vector<double> etas;
  std::string gamma = "d";  // "m" | "d" | "n" | numeric literal
  std::optional<double> fixed_delta;
  bool gate = false;
  bool per_epoch_lowrank = false;
};

struct ExperimentConfig {
  json problem;
  int epochs = 200;
  int batches = 1;  // m, shared across the matrix
  std::vector<std::uint64_t> seeds{1};
  std::vector<OptimizerSpec> optimizers;
  GateConfig gate;
  bool gaussian_init = true;
  double init_scale = 0.5;
  bool diagnostics = false;
  bool theory_mode = false;
  double kappa_threshold = 1e8;
  std::string out_dir = "out";
  std::vector<std::string> warnings;  // config-time notes (method mapping etc.)

  static ExperimentConfig from_json(const json& j);
  json to_json() const;
};

namespace detail {

inline Method method_from_string(const std::string& s, bool* mapped_diagonal) {
  if (s == "shadagrad") return Method::shadagrad;
  if (s == "adagrad_f") return Method::adagrad_f;
  if (s == "sgd") return Method::sgd;
  if (s == "adagrad") {
    // diagonal accumulators are out of scope; the full-matrix constant-
    // perturbation method stands in
    if (mapped_diagonal) *mapped_diagonal = true;
    return Method::adagrad_f;
  }
  throw ConfigError("optimizers[].method: unknown method '" + s + "'");
}

inline Sampling sampling_from_string(const std::string& s) {
  if (s == "shuffled") return Sampling::shuffled;
  if (s == "uniform") return Sampling::uniform;
  throw ConfigError("optimizers[].sampling: unknown mode '" + s + "'");
}

inline ScheduleKind schedule_from_string(const std::string& s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "inv_sqrt") return ScheduleKind::inv_sqrt;
  if (s == "inv_cbrt") return ScheduleKind::inv_cbrt;
  throw ConfigError("optimizers[].schedule: unknown kind '" + s + "'");
}

inline ScheduleKind default_schedule(Method m, Sampling s, bool mapped_diagonal) {
  if (mapped_diagonal) return ScheduleKind::inv_sqrt;
  switch (m) {
    case Method::sgd:
      return s == Sampling::shuffled ? ScheduleKind::inv_cbrt
                                     : ScheduleKind::inv_sqrt;
    case Method::shadagrad:
    case Method::adagrad_f:
      return ScheduleKind::constant;
  }
  return ScheduleKind::constant;
}

inline std::vector<double> default_etas(bool mapped_diagonal) {
  return mapped_diagonal ? std::vector<double>{0.1, 0.01, 0.001}
                         : std::vector<double>{1.0, 0.1, 0.01};
}

inline double resolve_gamma(const std::string& spec, int n, Eigen::Index d, int m) {
  if (spec == "m") return static_cast<double>(m);
  if (spec == "d") return static_cast<double>(d);
  if (spec == "n") return static_cast<double>(n);
  try {
    std::size_t pos = 0;
    const double v = std::stod(spec, &pos);
    if (pos == spec.size() && v > 0.0) return v;
  } catch (...) {
  }
  throw ConfigError("optimizers[].gamma: expected 'm', 'd', 'n' or a positive number, got '" +
                    spec + "'");
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig cfg;
  if (!j.contains("problem")) throw ConfigError("config: missing field 'problem'");
  cfg.problem = j.at("problem");
  if (!cfg.problem.contains("name"))
    throw ConfigError("config: missing field 'problem.name'");
  if (!j.contains("batches")) throw ConfigError("config: missing field 'batches'");
  cfg.batches = j.at("batches").get<int>();
  cfg.epochs = j.value("epochs", 200);
  if (cfg.epochs < 1) throw ConfigError("config: epochs must be >= 1");
  if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (cfg.seeds.empty()) throw ConfigError("config: seeds must be non-empty");
  cfg.diagnostics = j.value("diagnostics", false);
  cfg.theory_mode = j.value("theory_mode", false);
  cfg.kappa_threshold = j.value("kappa_threshold", 1e8);
  cfg.out_dir = j.value("out_dir", std::string("out"));
  if (j.contains("init")) {
    const auto& init = j.at("init");
    const std::string kind = init.value("kind", std::string("gaussian"));
    if (kind == "zeros") cfg.gaussian_init = false;
    else if (kind == "gaussian") cfg.gaussian_init = true;
    else throw ConfigError("config: init.kind must be 'gaussian' or 'zeros'");
    cfg.init_scale = init.value("scale", 0.5);
  }
  if (j.contains("gate")) {
    const auto& g = j.at("gate");
    cfg.gate.divisor = g.value("divisor", 8.0);
    if (cfg.gate.divisor <= 0.0) throw ConfigError("config: gate.divisor must be positive");
    cfg.gate.max_attempts = g.value("max_attempts", 100);
    if (g.contains("c_sigma") && !g.at("c_sigma").is_null())
      cfg.gate.c_sigma = g.at("c_sigma").get<double>();
  }
  if (!j.contains("optimizers") || !j.at("optimizers").is_array() ||
      j.at("optimizers").empty())
    throw ConfigError("config: missing or empty field 'optimizers'");
  for (const auto& o : j.at("optimizers")) {
    OptimizerSpec spec;
    bool mapped = false;
    const std::string mname = o.value("method", std::string());
    if (mname.empty()) throw ConfigError("config: optimizers[].method is required");
    spec.method = detail::method_from_string(mname, &mapped);
    if (mapped)
      cfg.warnings.push_back("method 'adagrad' uses diagonal accumulators; mapped to adagrad_f");
    spec.sampling = detail::sampling_from_string(
        o.value("sampling", std::string("shuffled")));
    spec.schedule = o.contains("schedule")
                        ? detail::schedule_from_string(o.at("schedule").get<std::string>())
                        : detail::default_schedule(spec.method, spec.sampling, mapped);
    spec.etas = o.contains("etas") ? o.at("etas").get<std::vector<double>>()
                                   : detail::default_etas(mapped);
    if (spec.etas.empty()) throw ConfigError("config: optimizers[].etas must be non-empty");
    if (o.contains("gamma")) {
      const auto& g = o.at("gamma");
      spec.gamma = g.is_string() ? g.get<std::string>() : detail::gshort(g.get<double>());
    }
    if (o.contains("fixed_delta")) spec.fixed_delta = o.at("fixed_delta").get<double>();
    spec.gate = o.value("gate", spec.method == Method::shadagrad);
    if (spec.gate && spec.method != Method::shadagrad)
      throw ConfigError("config: the gate applies to shadagrad only");
    spec.per_epoch_lowrank = o.value("per_epoch_lowrank", false);
    if (spec.method == Method::adagrad_f && !spec.fixed_delta)
      spec.fixed_delta = 1e-8;  // conventional stabilizer
    cfg.optimizers.push_back(std::move(spec));
  }
  return cfg;
}

inline json ExperimentConfig::to_json() const {
  json opts = json::array();
  for (const auto& o : optimizers) {
    json oj = {{"method", to_string(o.method)},
               {"sampling", to_string(o.sampling)},
               {"schedule", to_string(o.schedule)},
               {"etas", o.etas},
               {"gamma", o.gamma},
               {"gate", o.gate},
               {"per_epoch_lowrank", o.per_epoch_lowrank}};
    if (o.fixed_delta) oj["fixed_delta"] = *o.fixed_delta;
    opts.push_back(std::move(oj));
  }
  return {{"problem", problem},
          {"epochs", epochs},
          {"batches", batches},
          {"seeds", seeds},
          {"optimizers", std::move(opts)},
          {"gate", {{"divisor", gate.divisor}, {"max_attempts", gate.max_attempts}}},
          {"init", {{"kind", gaussian_init ? "gaussian" : "zeros"}, {"scale", init_scale}}},
          {"diagnostics", diagnostics},
          {"theory_mode", theory_mode},
          {"kappa_threshold", kappa_threshold},
          {"out_dir", out_dir}};
}

/// One (optimizer, eta, seed) cell of the run matrix.
struct Cell {
  std::size_t spec_index = 0;
  OptimizerSpec spec;
  double eta = 0.0;
  std::uint64_t seed = 0;
  std::string id;
};

namespace detail {

inline std::vector<Cell> enumerate_cells(const ExperimentConfig& cfg) {
  std::vector<Cell> cells;
  for (std::size_t si = 0; si < cfg.optimizers.size(); ++si) {
    const OptimizerSpec& spec = cfg.optimizers[si];
    for (double eta : spec.etas) {
      for (std::uint64_t seed : cfg.seeds) {
        Cell c;
        c.spec_index = si;
        c.spec = spec;
        c.eta = eta;
        c.seed = seed;
        c.id = "o" + std::to_string(si) + "_" + to_string(spec.method) +
               (spec.sampling == Sampling::shuffled ? "_s" : "_u") + "-eta" +
               gshort(eta) + "-seed" + std::to_string(seed);
        cells.push_back(std::move(c));
      }
    }
  }
  return cells;
}

inline OptimizerConfig cell_optimizer_config(const ExperimentConfig& cfg,
                                             const Cell& cell,
                                             const FiniteSumProblem& p) {
  OptimizerConfig oc;
  oc.schedule = {cell.spec.schedule, cell.eta};
  oc.batches = cfg.batches;
  oc.gamma = resolve_gamma(cell.spec.gamma, p.n(), p.dim(), cfg.batches);
  oc.sampling = cell.spec.sampling;
  oc.gate = cfg.gate;
  oc.gate.enabled = cell.spec.gate;
  oc.fixed_delta = cell.spec.fixed_delta;
  oc.per_epoch_lowrank = cell.spec.per_epoch_lowrank;
  // size the column cap for the planned run; the default 10*d cap is for
  // open-ended library use
  oc.max_columns = std::max<Eigen::Index>(
      10 * p.dim(), static_cast<Eigen::Index>(cfg.epochs) * cfg.batches);
  oc.theory_mode = cfg.theory_mode;
  oc.gaussian_init = cfg.gaussian_init;
  oc.init_scale = cfg.init_scale;
  return oc;
}

template <typename Fn>
void parallel_cells(std::size_t count, int workers, Fn&& fn) {
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  const int nthreads = std::min<std::size_t>(static_cast<std::size_t>(workers), count);
  threads.reserve(static_cast<std::size_t>(nthreads));
  for (int i = 0; i < nthreads; ++i) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

/// Runs the whole (optimizer, eta, seed) matrix; one CSV plus one JSON
/// manifest per cell, and an index listing every cell. Deterministic given
/// the config: rerunning produces byte-identical files.
inline std::vector<std::string> run_experiment(const ExperimentConfig& cfg,
                                               const std::string& out_dir,
                                               int workers = 1,
                                               std::vector<RunRecord>* records = nullptr,
                                               bool keep_traces = false) {
  const FiniteSumProblem problem = problem_from_json(cfg.problem);
  if (cfg.batches < 1 || problem.n() % cfg.batches != 0)
    throw ConfigError("config: batches must divide problem.n");
  const std::vector<Cell> cells = detail::enumerate_cells(cfg);

  const fs::path root(out_dir);
  fs::create_directories(root / "cells");

  std::vector<RunRecord> local(cells.size());
  detail::parallel_cells(cells.size(), workers, [&](std::size_t i) {
    const Cell& cell = cells[i];
    const OptimizerConfig oc = detail::cell_optimizer_config(cfg, cell, problem);
    RunRecord rec = run(problem, cell.spec.method, oc, cfg.epochs, cell.seed,
                        keep_traces);
    rec.manifest["cell"] = cell.id;
    rec.manifest["eta"] = cell.eta;
    write_csv(root / "cells" / (cell.id + ".csv"), rec.rows);
    std::ofstream mf(root / "cells" / (cell.id + ".json"));
    mf << rec.manifest.dump(2) << "\n";
    local[i] = std::move(rec);
  });

  json index;
  index["problem"] = cfg.problem;
  index["epochs"] = cfg.epochs;
  index["batches"] = cfg.batches;
  if (!cfg.warnings.empty()) index["warnings"] = cfg.warnings;
  json jcells = json::array();
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Cell& cell = cells[i];
    jcells.push_back({{"id", cell.id},
                      {"method", to_string(cell.spec.method)},
                      {"sampling", to_string(cell.spec.sampling)},
                      {"eta", cell.eta},
                      {"seed", cell.seed},
                      {"complete", local[i].complete},
                      {"csv", "cells/" + cell.id + ".csv"},
                      {"manifest", "cells/" + cell.id + ".json"}});
    ids.push_back(cell.id);
  }
  index["cells"] = std::move(jcells);
  std::ofstream idx(root / "index.json");
  idx << index.dump(2) << "\n";

  if (records) *records = std::move(local);
  return ids;
}

struct CompareRow {
  std::string id;
  std::string method;
  std::string sampling;
  double eta = 0.0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
  double min_grad_norm = 0.0;
  double final_weighted_metric = 0.0;
  long epochs_to_eps = 0;  // T + 1 when the threshold was never reached
};

struct CompareSummary {
  std::vector<CompareRow> rows;
  // best eta per method+sampling by median final weighted metric over seeds
  std::map<std::string, double> best_eta;
  std::string table;  // aligned text rendering
};

/// Summarizes a finished experiment directory. All cells must describe the
/// same problem.
inline CompareSummary compare(const std::string& in_dir, double eps) {
  const fs::path root(in_dir);
  std::ifstream idx(root / "index.json");
  if (!idx) throw ConfigError("compare: no index.json under " + in_dir);
  json index;
  idx >> index;

  CompareSummary out;
  json problem;
  std::map<std::string, std::map<double, std::vector<double>>> metric_by_group;

  for (const auto& jc : index.at("cells")) {
    const fs::path csv = root / jc.at("csv").get<std::string>();
    const fs::path mf = root / jc.at("manifest").get<std::string>();
    std::ifstream mstream(mf);
    if (!mstream) throw Error("compare: missing manifest " + mf.string());
    json manifest;
    mstream >> manifest;
    if (problem.is_null()) problem = manifest.at("problem");
    else if (problem != manifest.at("problem"))
      throw ConfigError("compare: records mix different problems");

    const std::vector<EpochRow> rows = read_csv(csv);
    CompareRow r;
    r.id = jc.at("id").get<std::string>();
    r.method = jc.at("method").get<std::string>();
    r.sampling = jc.at("sampling").get<std::string>();
    r.eta = jc.at("eta").get<double>();
    r.seed = jc.at("seed").get<std::uint64_t>();
    const long total_epochs = index.at("epochs").get<long>();
    r.epochs_to_eps = total_epochs + 1;
    r.min_grad_norm = std::numeric_limits<double>::infinity();
    for (const auto& row : rows) {
      r.min_grad_norm = std::min(r.min_grad_norm, row.grad_norm);
      if (r.epochs_to_eps == total_epochs + 1 && row.weighted_metric <= eps)
        r.epochs_to_eps = row.t;
    }
    if (!rows.empty()) {
      r.final_loss = rows.back().loss;
      r.final_weighted_metric = rows.back().weighted_metric;
      metric_by_group[r.method + "_" + r.sampling][r.eta].push_back(
          r.final_weighted_metric);
    }
    out.rows.push_back(std::move(r));
  }
  if (out.rows.empty()) throw ConfigError("compare: no records found");

  for (auto& [group, by_eta] : metric_by_group) {
    double best_eta = 0.0;
    double best_median = std::numeric_limits<double>::infinity();
    for (auto& [eta, metrics] : by_eta) {
      std::sort(metrics.begin(), metrics.end());
      const double median = metrics[metrics.size() / 2];
      if (median < best_median) {
        best_median = median;
        best_eta = eta;
      }
    }
    out.best_eta[group] = best_eta;
  }

  std::ostringstream tbl;
  char line[256];
  std::snprintf(line, sizeof line, "%-36s %-10s %-8s %-8s %-6s %-13s %-13s %-13s %s",
                "cell", "method", "sampling", "eta", "seed", "final_loss",
                "min_grad", "final_metric", "epochs_to_eps");
  tbl << line << "\n";
  for (const auto& r : out.rows) {
    std::snprintf(line, sizeof line,
                  "%-36s %-10s %-8s %-8g %-6llu %-13.6g %-13.6g %-13.6g %ld",
                  r.id.c_str(), r.method.c_str(), r.sampling.c_str(), r.eta,
                  static_cast<unsigned long long>(r.seed), r.final_loss,
                  r.min_grad_norm, r.final_weighted_metric, r.epochs_to_eps);
    tbl << line << "\n";
  }
  tbl << "\nbest eta by median final weighted metric:\n";
  for (const auto& [group, eta] : out.best_eta)
    tbl << "  " << group << ": " << detail::gshort(eta) << "\n";
  out.table = tbl.str();

  std::ofstream csv(root / "compare.csv");
  csv << "cell,method,sampling,eta,seed,final_loss,min_grad_norm,"
         "final_weighted_metric,epochs_to_eps\n";
  for (const auto& r : out.rows)
    csv << r.id << ',' << r.method << ',' << r.sampling << ','
        << detail::g17(r.eta) << ',' << r.seed << ',' << detail::g17(r.final_loss)
        << ',' << detail::g17(r.min_grad_norm) << ','
        << detail::g17(r.final_weighted_metric) << ',' << r.epochs_to_eps << "\n";
  std::ofstream txt(root / "compare.txt");
  txt << out.table;
  return out;
}

struct VerifyOutcome {
  json bundle;
  int violations = 0;  // across applicable, non-informational checks
};

/// Runs the matrix with trace recording and every numerical verifier on each
/// cell. The violation count covers applicable, non-informational checks.
inline VerifyOutcome verify(const ExperimentConfig& cfg, const std::string& out_dir,
                            int workers = 1) {
  const FiniteSumProblem problem = problem_from_json(cfg.problem);
  std::vector<RunRecord> records;
  run_experiment(cfg, out_dir, workers, &records, /*keep_traces=*/true);
  const std::vector<Cell> cells = detail::enumerate_cells(cfg);

  VerifyOutcome out;
  out.bundle["checks"] = json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const RunRecord& rec = records[i];
    const RunConstants consts = resolve_constants(problem, rec);
    std::vector<CheckReport> reports;
    reports.push_back(check_condition_number(rec, problem.dim(), cfg.kappa_threshold));
    reports.push_back(check_rgps_gap(rec, problem, consts.smoothness));
    reports.push_back(check_sufficient_descent(rec, problem, consts));
    reports.push_back(check_quadform_lower_bounds(rec, problem, consts));
    reports.push_back(check_loewner_lemmas(rec, problem, consts));
    {
      Rng gate_rng(Rng::mix(rec.seed, 0x6A7Eu));
      const Vector x0 = rec.traces.empty() ? Vector(Vector::Zero(problem.dim()))
                                           : rec.traces.front().x_start;
      reports.push_back(
          check_gate_probability(problem, x0, cfg.batches, 1000, gate_rng, consts));
    }
    reports.push_back(check_metric_ceiling(rec, problem, consts));

    json cell_entry;
    cell_entry["cell"] = cells[i].id;
    cell_entry["reports"] = json::array();
    for (const auto& rep : reports) {
      cell_entry["reports"].push_back(rep.to_json());
      if (!rep.not_applicable && !rep.informational) out.violations += rep.violations;
    }
    out.bundle["checks"].push_back(std::move(cell_entry));
  }
  out.bundle["violations"] = out.violations;
  std::ofstream f(fs::path(out_dir) / "checks.json");
  f << out.bundle.dump(2) << "\n";
  return out;
}

}  // namespace shopt

#endif  // SHOPT_HARNESS_HPP
