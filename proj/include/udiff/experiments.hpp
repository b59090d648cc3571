#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "json.hpp"

#include "udiff/drivers.hpp"
#include "udiff/estimators.hpp"
#include "udiff/functional.hpp"
#include "udiff/models/gridcell.hpp"
#include "udiff/models/logistic.hpp"
#include "udiff/models/ou.hpp"
#include "udiff/oracles.hpp"
#include "udiff/sde_grid.hpp"

namespace udiff {

using json = nlohmann::json;
using AnyModel = std::variant<OuModel, LogisticModel, GridCellModel>;

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Formatting and files

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const json& cfg) { return hex64(fnv1a64(cfg.dump())); }

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw std::runtime_error("cannot open " + path.string());
    row(header);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_number(const std::string& s, std::size_t line_no) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v))
    throw std::invalid_argument("malformed number '" + s + "' on line " + std::to_string(line_no));
  return v;
}

// ---------------------------------------------------------------------------
// Data ingestion. Schemas:
//   ou        time,y
//   kangaroo  time,y1,y2      (41 rows of nonnegative counts)
//   counts    time,y1,y2      (binned spike counts at interval ends)
//   spikes    cell,timestamp  (cell in {1,2}, seconds in [0, horizon])

struct SpikeBinning {
  double horizon = 20.0;
  int intervals_log2 = 6;
};

inline ObservationSet bin_spikes(const std::vector<std::pair<int, double>>& spikes, const SpikeBinning& b) {
  const int P = 1 << b.intervals_log2;
  ObservationSet obs;
  obs.dim = 2;
  obs.values.assign(static_cast<std::size_t>(2 * P), 0.0);
  for (int p = 1; p <= P; ++p) obs.times.push_back(std::ldexp(double(p) * b.horizon, -b.intervals_log2));
  for (const auto& [cell, t] : spikes) {
    if (cell != 1 && cell != 2) throw std::invalid_argument("spikes: cell must be 1 or 2");
    if (!(t >= 0.0 && t <= b.horizon)) throw std::invalid_argument("spikes: timestamp outside [0, horizon]");
    const int bin = std::min(P - 1, static_cast<int>(std::floor(t / b.horizon * P)));
    obs.values[static_cast<std::size_t>(2 * bin + cell - 1)] += 1.0;
  }
  return obs;
}

inline ObservationSet ingest(const std::filesystem::path& path, const std::string& schema,
                             const SpikeBinning& binning = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("empty file " + path.string());
  const auto header = split_csv_line(line);
  std::vector<std::string> expect;
  if (schema == "ou") expect = {"time", "y"};
  else if (schema == "kangaroo" || schema == "counts") expect = {"time", "y1", "y2"};
  else if (schema == "spikes") expect = {"cell", "timestamp"};
  else throw std::invalid_argument("unknown schema '" + schema + "'");
  if (header != expect) throw std::invalid_argument("header does not match schema '" + schema + "'");

  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != expect.size())
      throw std::invalid_argument("wrong number of fields on line " + std::to_string(line_no));
    std::vector<double> r;
    for (const auto& c : cells) r.push_back(parse_number(c, line_no));
    rows.push_back(std::move(r));
  }

  if (schema == "spikes") {
    std::vector<std::pair<int, double>> spikes;
    for (const auto& r : rows) {
      if (r[0] != std::floor(r[0])) throw std::invalid_argument("spikes: non-integer cell");
      spikes.emplace_back(static_cast<int>(r[0]), r[1]);
    }
    return bin_spikes(spikes, binning);
  }
  ObservationSet obs;
  obs.dim = static_cast<int>(expect.size()) - 1;
  for (const auto& r : rows) {
    obs.times.push_back(r[0]);
    for (std::size_t i = 1; i < r.size(); ++i) obs.values.push_back(r[i]);
  }
  obs.validate(schema != "ou");
  if (schema == "kangaroo" && obs.size() != 41)
    throw std::invalid_argument("kangaroo data must have 41 rows, found " + std::to_string(obs.size()));
  return obs;
}

inline void write_dataset(const std::filesystem::path& path, const std::string& schema, const ObservationSet& obs) {
  std::vector<std::string> header = schema == "ou" ? std::vector<std::string>{"time", "y"}
                                                   : std::vector<std::string>{"time", "y1", "y2"};
  CsvWriter w(path, header);
  for (std::size_t p = 0; p < obs.size(); ++p) {
    std::vector<std::string> r{fmt_double(obs.times[p])};
    for (double v : obs.at(p)) r.push_back(fmt_double(v));
    w.row(r);
  }
}

// ---------------------------------------------------------------------------
// Models and schedules

inline AnyModel make_model(const std::string& id, double sigma = 1.0) {
  if (id == "ou") return OuModel(sigma);
  if (id == "logistic" || id == "kangaroo") return LogisticModel();
  if (id == "gridcell") return GridCellModel();
  throw std::invalid_argument("unknown model id '" + id + "'");
}

inline std::string schema_for(const AnyModel& m) {
  switch (m.index()) {
    case 0: return "ou";
    case 1: return "kangaroo";
    default: return "counts";
  }
}

// Synthetic stand-in for the 41 irregular survey occasions.
inline std::vector<double> default_kangaroo_times() {
  std::vector<double> t{1973.5};
  for (int p = 1; p < 41; ++p) t.push_back(t.back() + 0.2 + 0.1 * ((p * 7) % 4));
  return t;
}

inline GridScheme scheme_for(const AnyModel& m, const ObservationSet& obs, const SpikeBinning& b = {}) {
  switch (m.index()) {
    case 0: {
      for (std::size_t p = 0; p < obs.size(); ++p)
        if (obs.times[p] != double(p + 1)) throw std::invalid_argument("ou data must be observed at t = 1..T");
      return GridScheme::unit(static_cast<int>(obs.size()));
    }
    case 1: return GridScheme::irregular(obs.times);
    default: return GridScheme::intervals(b.horizon, b.intervals_log2);
  }
}

struct SimulatedData {
  ObservationSet obs;
  TimeGrid grid;
  std::vector<std::vector<double>> latent;
};

// Latent path on the level_sim grid of the model's scheme, observations from
// the model's observation density (Poisson per interval for segment models).
template <class M>
SimulatedData simulate_data(const M& model, const Params& th, const GridScheme& scheme, int level_sim,
                            const SeedSpec& seed, std::optional<typename M::State> x_init = std::nullopt) {
  model.check_params(th);
  SimulatedData out;
  out.grid = scheme.build(level_sim);
  RngStream rng = derive_stream(seed.child("latent", 0));
  Path<M> x = simulate_path(model, th, out.grid, rng);
  if (x_init) {
    x[0] = *x_init;
    for (int k = 1; k <= out.grid.num_steps(); ++k) {
      typename M::State v;
      const double sd = std::sqrt(out.grid.step(k));
      for (auto& vi : v) vi = sd * rng.normal();
      x[static_cast<std::size_t>(k)] = euler_step(model, th, x[static_cast<std::size_t>(k - 1)], out.grid.step(k), v);
    }
  }
  RngStream oy = derive_stream(seed.child("obs", 0));
  out.obs.dim = M::obs_dim;
  for (std::size_t p = 0; p < out.grid.num_obs(); ++p) {
    out.obs.times.push_back(out.grid.times[static_cast<std::size_t>(out.grid.obs_index[p])]);
    std::vector<double> y;
    if constexpr (M::obs_kind == ObsKind::segment) {
      y = model.sample_segment_obs(th, segment_accum(model, out.grid, x, p), out.grid.nominal_step, oy);
    } else {
      y = model.sample_obs(th, x[static_cast<std::size_t>(out.grid.obs_index[p])], oy);
    }
    out.obs.values.insert(out.obs.values.end(), y.begin(), y.end());
  }
  for (const auto& s : x) out.latent.emplace_back(s.begin(), s.end());
  return out;
}

// ---------------------------------------------------------------------------
// Worker pool over independent tasks; results are indexed by task so the
// output order never depends on scheduling.

inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads))));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
    });
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Configuration

struct EstimatorSettings {
  std::string preset = "simple";
  int N = 64;
  std::optional<int> b, I;
  int l_min = 3;
  std::string pmf = "linear";
  int truncation = 12;
  int pilot_runs = 50;
  std::optional<int> pilot_level;
  bool pilot_pair = false;
  std::string kernel = "cpf";
  bool adaptive = false;
  std::string coupling = "maximal";
  bool single_term = false;
  // Drivers only: estimate S_{l_min} by one coupled pair instead of
  // randomizing over levels; the iterates then target the level-l_min MLE.
  bool fixed_level = false;
  std::int64_t iteration_cap = 100000;
};

inline EstimatorSettings parse_estimator(const json& j) {
  EstimatorSettings s;
  if (j.is_null()) return s;
  s.preset = j.value("preset", s.preset);
  s.N = j.value("N", s.N);
  if (j.contains("b") && !j["b"].is_null()) s.b = j["b"].get<int>();
  if (j.contains("I") && !j["I"].is_null()) s.I = j["I"].get<int>();
  s.l_min = j.value("l_min", s.l_min);
  s.pmf = j.value("pmf", s.pmf);
  s.truncation = j.value("truncation", s.truncation);
  s.pilot_runs = j.value("pilot_runs", s.pilot_runs);
  if (j.contains("pilot_level")) s.pilot_level = j["pilot_level"].get<int>();
  s.pilot_pair = j.value("pilot_pair", s.pilot_pair);
  s.kernel = j.value("kernel", s.kernel);
  s.adaptive = j.value("adaptive", s.adaptive);
  s.coupling = j.value("coupling", s.coupling);
  s.single_term = j.value("single_term", s.single_term);
  s.fixed_level = j.value("fixed_level", s.fixed_level);
  s.iteration_cap = j.value("iteration_cap", s.iteration_cap);
  if (s.preset != "naive" && s.preset != "simple" && s.preset != "time-averaged")
    throw std::invalid_argument("unknown estimator preset '" + s.preset + "'");
  if (s.kernel != "cpf" && s.kernel != "caspf") throw std::invalid_argument("kernel must be cpf or caspf");
  if (s.pmf != "linear" && s.pmf != "sqrt") throw std::invalid_argument("pmf must be linear or sqrt");
  if (s.coupling != "maximal" && s.coupling != "common-uniforms" && s.coupling != "other-maximal")
    throw std::invalid_argument("unknown coupling '" + s.coupling + "'");
  return s;
}

inline EstimatorPreset preset_of(const std::string& p) {
  if (p == "naive") return EstimatorPreset::naive;
  if (p == "simple") return EstimatorPreset::simple;
  return EstimatorPreset::time_averaged;
}

inline EstimatorConfig base_estimator_config(const EstimatorSettings& s) {
  EstimatorConfig c;
  c.N = s.N;
  c.iteration_cap = s.iteration_cap;
  c.sweep.adaptive = s.adaptive;
  c.sweep.ancestor_sampling = s.kernel == "caspf";
  c.sweep.coupling = s.coupling == "maximal"           ? ResamplingCoupling::maximal
                     : s.coupling == "common-uniforms" ? ResamplingCoupling::common_uniforms
                                                       : ResamplingCoupling::other_maximal;
  return c;
}

// Fills b and I, running pilot stopping-time runs when the preset needs them.
template <class M>
EstimatorConfig resolve_estimator(const M& model, const Params& th, const GridScheme& scheme,
                                  const ObservationSet& obs, const EstimatorSettings& s, const SeedSpec& seed,
                                  int* q90_out = nullptr) {
  EstimatorConfig c = base_estimator_config(s);
  int q90 = 0;
  if (!(s.b && s.I) && s.preset != "naive") {
    const int lvl = s.pilot_level.value_or(s.l_min);
    q90 = tune_burnin(model, th, scheme, obs, lvl, s.pilot_pair, c, s.pilot_runs, seed.child("tune", 0));
  }
  auto [b, I] = preset_burnin(preset_of(s.preset), q90);
  c.burn_in = s.b.value_or(b);
  c.iterations = s.I.value_or(std::max(I, c.burn_in));
  if (q90_out) *q90_out = q90;
  return c;
}

inline Params theta_from(const json& j, const AnyModel& m) {
  Params th;
  if (j.contains("theta")) {
    const auto v = j["theta"].get<std::vector<double>>();
    th = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  } else {
    switch (m.index()) {
      case 0: th = Params(3); th << 2.0, 7.0, 1.0; break;
      case 1: th = Params(4); th << 2.397, 4.429e-3, 0.840, 17.631; break;
      default: th = Params::Ones(12); break;
    }
  }
  std::visit([&](const auto& mm) { mm.check_params(th); }, m);
  return th;
}

// Model, parameters and data resolved from a config document.
struct Problem {
  AnyModel model = OuModel(1.0);
  Params theta;
  ObservationSet obs;
  GridScheme scheme;
  SpikeBinning binning;
};

inline Problem load_problem(const json& cfg, std::uint64_t master_seed) {
  Problem pr;
  const json mj = cfg.value("model", json::object());
  pr.model = make_model(mj.value("id", std::string("ou")), mj.value("sigma", 1.0));
  pr.theta = theta_from(mj, pr.model);
  const json dj = cfg.value("data", json::object());
  pr.binning.horizon = dj.value("horizon", 20.0);
  pr.binning.intervals_log2 = dj.value("intervals_log2", 6);
  if (dj.contains("path")) {
    pr.obs = ingest(dj["path"].get<std::string>(), dj.value("schema", schema_for(pr.model)), pr.binning);
    pr.scheme = scheme_for(pr.model, pr.obs, pr.binning);
    return pr;
  }
  const json sj = dj.value("simulate", json::object());
  GridScheme gen;
  switch (pr.model.index()) {
    case 0: gen = GridScheme::unit(sj.value("T", 25)); break;
    case 1: gen = GridScheme::irregular(sj.contains("times") ? sj["times"].get<std::vector<double>>()
                                                              : default_kangaroo_times()); break;
    default: gen = GridScheme::intervals(pr.binning.horizon, pr.binning.intervals_log2); break;
  }
  const SeedSpec ds{sj.value("seed", master_seed), {{"data", 0}}};
  const int lvl = sj.value("level", 10);
  std::visit(
      [&](const auto& m) {
        using Mt = std::decay_t<decltype(m)>;
        std::optional<typename Mt::State> x0;
        if (sj.contains("x_init")) {
          typename Mt::State s;
          const auto v = sj["x_init"].get<std::vector<double>>();
          for (std::size_t i = 0; i < s.size(); ++i) s[i] = v.at(i);
          x0 = s;
        }
        pr.obs = simulate_data(m, pr.theta, gen, lvl, ds, x0).obs;
      },
      pr.model);
  pr.scheme = gen;
  return pr;
}

inline LevelPMF pmf_from(const EstimatorSettings& s) {
  return build_level_pmf(s.pmf == "sqrt" ? PmfKind::sqrt : PmfKind::linear, s.l_min, s.truncation);
}

struct RunContext {
  json config;
  std::uint64_t seed = 1;
  int threads = 1;
  std::filesystem::path out_dir = ".";
  std::string hash;
};

inline void write_sidecar(const RunContext& ctx, const std::string& name, const json& extra, double wall_seconds) {
  json meta;
  meta["tool"] = "udiff";
  meta["version"] = kVersion;
  meta["schema_version"] = kConfigSchemaVersion;
  meta["config"] = ctx.config;
  meta["config_hash"] = ctx.hash;
  meta["master_seed"] = ctx.seed;
  meta["threads"] = ctx.threads;
  meta["wall_seconds"] = wall_seconds;
  meta["finished_at"] = std::chrono::duration_cast<std::chrono::seconds>(
                            std::chrono::system_clock::now().time_since_epoch()).count();
  meta["details"] = extra;
  std::ofstream(ctx.out_dir / (name + ".meta.json")) << meta.dump(2) << '\n';
}

template <class Vec>
std::vector<std::string> cells_of(const Vec& v) {
  std::vector<std::string> c;
  for (Eigen::Index j = 0; j < v.size(); ++j) c.push_back(fmt_double(v[j]));
  return c;
}

inline std::vector<std::string> indexed(const std::string& prefix, int n) {
  std::vector<std::string> h;
  for (int j = 1; j <= n; ++j) h.push_back(prefix + std::to_string(j));
  return h;
}

struct ReplicateResult {
  bool ok = false;
  std::string error;
  ScoreEstimate est;
};

// Runs R unbiased_score replicates; a failure is recorded, never rethrown.
template <class M>
std::vector<ReplicateResult> run_replicates(const M& model, const Params& th, const GridScheme& scheme,
                                            const ObservationSet& obs, const UnbiasedConfig& cfg,
                                            std::uint64_t seed, int R, int threads) {
  std::vector<ReplicateResult> out(static_cast<std::size_t>(R));
  parallel_for(out.size(), threads, [&](std::size_t r) {
    try {
      out[r].est = unbiased_score(model, th, scheme, obs, cfg, SeedSpec{seed, {{"replicate", static_cast<std::int64_t>(r)}}});
      out[r].ok = true;
    } catch (const std::exception& e) {
      out[r].error = e.what();
    }
  });
  return out;
}

// Replicate cell of rows that aggregate over, or do not depend on, replicates.
inline const std::string kAllReplicates = "all";

inline std::string status_cell(const std::string& err) {
  std::string s = err;
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return "error:" + s;
}

// ---------------------------------------------------------------------------
// Experiments

inline int n_params_of(const AnyModel& m) {
  return std::visit([](const auto& mm) { return std::decay_t<decltype(mm)>::n_params; }, m);
}

inline std::vector<int> levels_from(const json& cfg, int l_min) {
  if (cfg.contains("levels")) return cfg["levels"].get<std::vector<int>>();
  std::vector<int> v;
  for (int l = l_min; l <= l_min + 5; ++l) v.push_back(l);
  return v;
}

inline void experiment_estimate_score(const RunContext& ctx, const Problem& pr) {
  const EstimatorSettings es = parse_estimator(ctx.config.value("estimator", json()));
  const int R = ctx.config.value("replicates", 10);
  const int d = n_params_of(pr.model);
  json details;
  std::visit(
      [&](const auto& m) {
        UnbiasedConfig uc;
        int q90 = 0;
        uc.estimator = resolve_estimator(m, pr.theta, pr.scheme, pr.obs, es, SeedSpec{ctx.seed, {{"setup", 0}}}, &q90);
        uc.pmf = pmf_from(es);
        uc.single_term = es.single_term;
        details["burn_in"] = uc.estimator.burn_in;
        details["iterations"] = uc.estimator.iterations;
        details["pilot_q90"] = q90;
        const auto res = run_replicates(m, pr.theta, pr.scheme, pr.obs, uc, ctx.seed, R, ctx.threads);
        std::vector<std::string> h{"seed", "replicate", "config_hash", "status", "L"};
        for (auto& s : indexed("score_", d)) h.push_back(s);
        for (auto s : {"kernel_cost", "euler_steps", "stopping_times"}) h.push_back(s);
        CsvWriter w(ctx.out_dir / "estimate-score.csv", h);
        std::vector<ScoreVector> ok;
        for (std::size_t r = 0; r < res.size(); ++r) {
          std::vector<std::string> row{std::to_string(ctx.seed), std::to_string(r), ctx.hash};
          if (!res[r].ok) {
            row.push_back(status_cell(res[r].error));
            row.resize(h.size());
            w.row(row);
            continue;
          }
          const auto& e = res[r].est;
          ok.push_back(e.value);
          row.push_back("ok");
          row.push_back(std::to_string(e.sampled_level));
          for (auto& c : cells_of(e.value)) row.push_back(c);
          row.push_back(fmt_double(e.cost));
          row.push_back(std::to_string(e.euler_steps));
          std::string taus;
          for (std::size_t j = 0; j < e.stopping_times.size(); ++j) taus += (j ? ";" : "") + std::to_string(e.stopping_times[j]);
          row.push_back(taus);
          w.row(row);
        }
        if (!ok.empty()) {
          const auto s = average_replicates(ok);
          const auto se = s.standard_errors();
          details["mean"] = std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size());
          details["standard_error"] = std::vector<double>(se.data(), se.data() + se.size());
        }
      },
      pr.model);
  write_sidecar(ctx, "estimate-score", details, 0.0);
}

inline void experiment_stopping_times(const RunContext& ctx, const Problem& pr) {
  const EstimatorSettings es = parse_estimator(ctx.config.value("estimator", json()));
  const int R = ctx.config.value("replicates", 100);
  const auto levels = levels_from(ctx.config, es.l_min);
  CsvWriter w(ctx.out_dir / "stopping-times.csv", {"seed", "replicate", "config_hash", "level", "status", "stopping_time"});
  std::visit(
      [&](const auto& m) {
        const EstimatorConfig c = base_estimator_config(es);
        for (int level : levels) {
          std::vector<int> tau(static_cast<std::size_t>(R), 0);
          std::vector<std::string> err(static_cast<std::size_t>(R));
          parallel_for(tau.size(), ctx.threads, [&](std::size_t r) {
            try {
              tau[r] = stopping_time(m, pr.theta, pr.scheme, pr.obs, level, level > es.l_min, c,
                                     SeedSpec{ctx.seed, {{"level", level}, {"replicate", static_cast<std::int64_t>(r)}}});
            } catch (const std::exception& e) {
              err[r] = e.what();
            }
          });
          for (std::size_t r = 0; r < tau.size(); ++r)
            w.row({std::to_string(ctx.seed), std::to_string(r), ctx.hash, std::to_string(level),
                   err[r].empty() ? "ok" : status_cell(err[r]), std::to_string(tau[r])});
        }
      },
      pr.model);
  write_sidecar(ctx, "stopping-times", json::object(), 0.0);
}

inline void experiment_increment_variance(const RunContext& ctx, const Problem& pr) {
  const EstimatorSettings es = parse_estimator(ctx.config.value("estimator", json()));
  const int R = ctx.config.value("replicates", 100);
  const auto levels = levels_from(ctx.config, es.l_min);
  const int d = n_params_of(pr.model);
  std::vector<std::string> h{"seed", "replicate", "config_hash", "level", "status"};
  for (auto& s : indexed("increment_", d)) h.push_back(s);
  h.push_back("stopping_time");
  h.push_back("kernel_units");
  CsvWriter w(ctx.out_dir / "increment-variance.csv", h);
  std::vector<std::string> hs{"seed", "replicate", "config_hash", "level", "replicates"};
  for (auto& s : indexed("variance_", d)) hs.push_back(s);
  hs.push_back("variance_sum");
  CsvWriter ws(ctx.out_dir / "increment-variance-summary.csv", hs);
  json details;
  std::visit(
      [&](const auto& m) {
        int q90 = 0;
        const EstimatorConfig c = resolve_estimator(m, pr.theta, pr.scheme, pr.obs, es, SeedSpec{ctx.seed, {{"setup", 0}}}, &q90);
        details["burn_in"] = c.burn_in;
        details["iterations"] = c.iterations;
        for (int level : levels) {
          std::vector<ScoreVector> inc(static_cast<std::size_t>(R));
          std::vector<int> tau(inc.size(), 0);
          std::vector<double> units(inc.size(), 0.0);
          std::vector<std::string> err(inc.size());
          parallel_for(inc.size(), ctx.threads, [&](std::size_t r) {
            const SeedSpec s{ctx.seed, {{"level", level}, {"replicate", static_cast<std::int64_t>(r)}}};
            try {
              if (level == es.l_min) {
                auto e = estimate_increment_l0(m, pr.theta, pr.scheme.build(level), pr.obs, c, s);
                inc[r] = e.value;
                tau[r] = e.record.meeting_time;
                units[r] = static_cast<double>(e.record.kernel_applications);
              } else {
                auto e = estimate_increment(m, pr.theta, make_level_pair(pr.scheme, level), pr.obs, c, s);
                inc[r] = e.value;
                tau[r] = e.stopping_time;
                units[r] = e.kernel_units;
              }
            } catch (const std::exception& ex) {
              err[r] = ex.what();
            }
          });
          std::vector<ScoreVector> ok;
          for (std::size_t r = 0; r < inc.size(); ++r) {
            std::vector<std::string> row{std::to_string(ctx.seed), std::to_string(r), ctx.hash, std::to_string(level)};
            if (!err[r].empty()) {
              row.push_back(status_cell(err[r]));
              row.resize(h.size());
              w.row(row);
              continue;
            }
            ok.push_back(inc[r]);
            row.push_back("ok");
            for (auto& cell : cells_of(inc[r])) row.push_back(cell);
            row.push_back(std::to_string(tau[r]));
            row.push_back(fmt_double(units[r]));
            w.row(row);
          }
          if (ok.size() > 1) {
            const auto s = average_replicates(ok);
            const ScoreVector var = s.covariance.diagonal();
            std::vector<std::string> row{std::to_string(ctx.seed), kAllReplicates, ctx.hash, std::to_string(level),
                                         std::to_string(ok.size())};
            for (auto& cell : cells_of(var)) row.push_back(cell);
            row.push_back(fmt_double(var.sum()));
            ws.row(row);
          }
        }
      },
      pr.model);
  write_sidecar(ctx, "increment-variance", details, 0.0);
}

// Exact discretized score S_l for OU data (the estimand of a truncated pmf).
inline ScoreVector ou_level_score(const Problem& pr, int level) {
  const auto& m = std::get<OuModel>(pr.model);
  const std::vector<double> th(pr.theta.data(), pr.theta.data() + pr.theta.size());
  return oracle::kalman_score(oracle::ou_euler_ssm(th, m.sigma(), level, static_cast<int>(pr.obs.size())), pr.obs.values);
}

inline void experiment_mse(const RunContext& ctx, const Problem& pr, bool vs_cost) {
  if (pr.model.index() != 0) throw std::invalid_argument("mse-vs-r and error-vs-cost need the ou model");
  const EstimatorSettings es = parse_estimator(ctx.config.value("estimator", json()));
  const auto Rs = ctx.config.value("R_values", std::vector<int>{8, 32, 128, 512});
  const int pool = ctx.config.value("replicates", vs_cost ? 512 : *std::max_element(Rs.begin(), Rs.end()) * 4);
  const auto& m = std::get<OuModel>(pr.model);
  UnbiasedConfig uc;
  uc.estimator = resolve_estimator(m, pr.theta, pr.scheme, pr.obs, es, SeedSpec{ctx.seed, {{"setup", 0}}});
  uc.pmf = pmf_from(es);
  uc.single_term = es.single_term;
  const ScoreVector target = ou_level_score(pr, es.l_min + es.truncation);
  const auto res = run_replicates(m, pr.theta, pr.scheme, pr.obs, uc, ctx.seed, pool, ctx.threads);
  std::vector<const ScoreEstimate*> ok;
  std::vector<std::size_t> ok_index;
  for (std::size_t r = 0; r < res.size(); ++r)
    if (res[r].ok) {
      ok.push_back(&res[r].est);
      ok_index.push_back(r);
    }
  json details;
  details["target"] = std::vector<double>(target.data(), target.data() + target.size());
  details["failed_replicates"] = res.size() - ok.size();
  if (vs_cost) {
    CsvWriter w(ctx.out_dir / "error-vs-cost.csv", {"seed", "replicate", "config_hash", "replicates", "cumulative_cost", "squared_error"});
    ScoreVector sum = ScoreVector::Zero(target.size());
    double cost = 0.0;
    for (std::size_t i = 0; i < ok.size(); ++i) {
      sum += ok[i]->value;
      cost += ok[i]->cost;
      const double se = (sum / static_cast<double>(i + 1) - target).squaredNorm();
      w.row({std::to_string(ctx.seed), std::to_string(ok_index[i]), ctx.hash, std::to_string(i + 1), fmt_double(cost),
             fmt_double(se)});
    }
    write_sidecar(ctx, "error-vs-cost", details, 0.0);
    return;
  }
  CsvWriter w(ctx.out_dir / "mse-vs-r.csv", {"seed", "replicate", "config_hash", "R", "batches", "mse", "mean_cost"});
  for (int R : Rs) {
    const std::size_t nb = ok.size() / static_cast<std::size_t>(R);
    if (nb == 0) continue;
    double mse = 0.0, cost = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      ScoreVector s = ScoreVector::Zero(target.size());
      for (int r = 0; r < R; ++r) {
        s += ok[b * static_cast<std::size_t>(R) + static_cast<std::size_t>(r)]->value;
        cost += ok[b * static_cast<std::size_t>(R) + static_cast<std::size_t>(r)]->cost;
      }
      mse += (s / R - target).squaredNorm();
    }
    w.row({std::to_string(ctx.seed), kAllReplicates, ctx.hash, std::to_string(R), std::to_string(nb), fmt_double(mse / nb), fmt_double(cost / nb)});
  }
  write_sidecar(ctx, "mse-vs-r", details, 0.0);
}

inline LearningSchedule schedule_from(const json& j, int d) {
  Eigen::VectorXd scale = Eigen::VectorXd::Constant(d, j.value("rate", 1e-3));
  if (j.contains("scale")) {
    const auto v = j["scale"].get<std::vector<double>>();
    if (static_cast<int>(v.size()) != d) throw std::invalid_argument("schedule scale has wrong length");
    scale = Eigen::Map<const Eigen::VectorXd>(v.data(), d);
  }
  return LearningSchedule::power(scale, j.value("c0", 0.0), j.value("gamma", 0.0));
}

template <class M>
ScoreOracle make_score_oracle(const M& model, const GridScheme& scheme, const ObservationSet& obs, UnbiasedConfig cfg,
                              SeedSpec seed, bool fixed_level = false) {
  return [&model, &scheme, &obs, cfg, seed, fixed_level](const Params& th, int m) {
    if (fixed_level) {
      const TimeGrid g = scheme.build(cfg.pmf.l_min);
      const LevelEstimate e = estimate_increment_l0(model, th, g, obs, cfg.estimator, seed.child("iteration", m));
      const double units = static_cast<double>(e.record.kernel_applications);
      return ScoreSample{e.value, units * cfg.estimator.N * g.num_steps()};
    }
    const ScoreEstimate e = unbiased_score(model, th, scheme, obs, cfg, seed.child("iteration", m));
    return ScoreSample{e.value, e.cost};
  };
}

inline void experiment_driver(const RunContext& ctx, const Problem& pr, bool langevin) {
  const EstimatorSettings es = parse_estimator(ctx.config.value("estimator", json()));
  const json dj = ctx.config.value("driver", json::object());
  const int d = n_params_of(pr.model);
  const int M = dj.value("iterations", 100);
  const int runs = dj.value("runs", 1);
  const double burn = dj.value("burn_fraction", 0.5);
  const std::string name = langevin ? "sgld" : "sga";
  std::vector<std::string> h{"seed", "replicate", "config_hash", "status", "iteration"};
  for (auto& s : indexed("working_", d)) h.push_back(s);
  for (auto& s : indexed("theta_", d)) h.push_back(s);
  for (auto& s : indexed("average_", d)) h.push_back(s);
  h.push_back("score_norm");
  h.push_back("cost");
  CsvWriter w(ctx.out_dir / (name + ".csv"), h);
  json details;
  std::visit(
      [&](const auto& m) {
        using Mt = std::decay_t<decltype(m)>;
        const std::vector<Transform> tf = Mt::default_transforms();
        Params th0 = pr.theta;
        if (dj.contains("theta0")) {
          const auto v = dj["theta0"].get<std::vector<double>>();
          th0 = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
        }
        UnbiasedConfig uc;
        uc.estimator = resolve_estimator(m, th0, pr.scheme, pr.obs, es, SeedSpec{ctx.seed, {{"setup", 0}}});
        uc.pmf = pmf_from(es);
        uc.single_term = es.single_term;
        details["burn_in"] = uc.estimator.burn_in;
        const LearningSchedule sched = schedule_from(dj.value("schedule", json::object()), d);
        PriorSpec prior = PriorSpec::flat_prior(d);
        if (dj.contains("prior")) {
          const auto mu = dj["prior"]["mean"].get<std::vector<double>>();
          const auto var = dj["prior"]["variance"].get<std::vector<double>>();
          prior = {Eigen::Map<const Eigen::VectorXd>(mu.data(), d), Eigen::Map<const Eigen::VectorXd>(var.data(), d), false};
        }
        std::vector<RunTrace> traces(static_cast<std::size_t>(runs));
        std::vector<std::string> status(traces.size(), "ok");
        parallel_for(traces.size(), ctx.threads, [&](std::size_t r) {
          const SeedSpec rs{ctx.seed, {{"run", static_cast<std::int64_t>(r)}}};
          const ScoreOracle oracle = make_score_oracle(m, pr.scheme, pr.obs, uc, rs, es.fixed_level);
          try {
            const Eigen::VectorXd w0 = from_constrained(th0, tf);
            if (langevin) {
              RngStream noise = derive_stream(rs.child("langevin", 0));
              traces[r] = sgld_run(oracle, tf, prior, w0, sched, M, noise);
            } else {
              traces[r] = sga_run(oracle, tf, w0, sched, M);
            }
          } catch (const DivergenceError& e) {
            traces[r] = e.trace;
            status[r] = status_cell(e.what());
          } catch (const std::exception& e) {
            status[r] = status_cell(e.what());
          }
        });
        for (std::size_t r = 0; r < traces.size(); ++r) {
          const auto& rows = traces[r].rows;
          if (rows.empty()) {
            std::vector<std::string> row{std::to_string(ctx.seed), std::to_string(r), ctx.hash, status[r]};
            row.resize(h.size());
            w.row(row);
            continue;
          }
          const auto avg = polyak_ruppert(traces[r], burn, false);
          const std::size_t start = rows.size() - avg.size();
          for (std::size_t i = 0; i < rows.size(); ++i) {
            std::vector<std::string> row{std::to_string(ctx.seed), std::to_string(r), ctx.hash, status[r],
                                         std::to_string(rows[i].iteration)};
            for (auto& c : cells_of(rows[i].working)) row.push_back(c);
            for (auto& c : cells_of(rows[i].constrained)) row.push_back(c);
            if (i >= start) {
              for (auto& c : cells_of(avg[i - start])) row.push_back(c);
            } else {
              for (int j = 0; j < d; ++j) row.emplace_back();
            }
            row.push_back(fmt_double(rows[i].score_norm));
            row.push_back(fmt_double(rows[i].cost));
            w.row(row);
          }
        }
      },
      pr.model);
  write_sidecar(ctx, name, details, 0.0);
}

inline void experiment_kalman_score(const RunContext& ctx, const Problem& pr) {
  if (pr.model.index() != 0) throw std::invalid_argument("kalman-score needs the ou model");
  const auto& m = std::get<OuModel>(pr.model);
  const std::vector<double> th(pr.theta.data(), pr.theta.data() + pr.theta.size());
  const int T = static_cast<int>(pr.obs.size());
  const auto levels = ctx.config.value("levels", std::vector<int>{3, 4, 5, 6, 7, 8, 9});
  CsvWriter w(ctx.out_dir / "kalman-score.csv",
              {"seed", "replicate", "config_hash", "kind", "level", "stable", "score_1", "score_2", "score_3", "fd_1", "fd_2", "fd_3"});
  auto emit = [&](const std::string& kind, int level, const oracle::LinearGaussianSSM& s,
                  const std::function<oracle::LinearGaussianSSM(const std::vector<double>&)>& build) {
    const auto g = oracle::kalman_score(s, pr.obs.values);
    const auto fd = oracle::kalman_score_fd(build, th, pr.obs.values);
    std::vector<std::string> row{std::to_string(ctx.seed), kAllReplicates, ctx.hash, kind, std::to_string(level),
                                 s.stable ? "1" : "0"};
    for (auto& c : cells_of(g)) row.push_back(c);
    for (auto& c : cells_of(fd)) row.push_back(c);
    w.row(row);
  };
  emit("exact", -1, oracle::ou_exact_ssm(th, m.sigma(), T),
       [&](const std::vector<double>& t) { return oracle::ou_exact_ssm(t, m.sigma(), T); });
  for (int l : levels)
    emit("euler", l, oracle::ou_euler_ssm(th, m.sigma(), l, T),
         [&](const std::vector<double>& t) { return oracle::ou_euler_ssm(t, m.sigma(), l, T); });
  write_sidecar(ctx, "kalman-score", json::object(), 0.0);
}

inline void experiment_simulate_data(const RunContext& ctx, const Problem& pr) {
  const json sj = ctx.config.value("data", json::object()).value("simulate", json::object());
  const int lvl = sj.value("level", 10);
  const std::string schema = schema_for(pr.model);
  write_dataset(ctx.out_dir / "dataset.csv", schema, pr.obs);
  json details;
  details["schema"] = schema;
  details["level"] = lvl;
  details["observations"] = pr.obs.size();
  details["theta"] = std::vector<double>(pr.theta.data(), pr.theta.data() + pr.theta.size());
  details["data_seed"] = sj.value("seed", ctx.seed);
  write_sidecar(ctx, "simulate-data", details, 0.0);
}

inline const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> k{"simulate-data", "estimate-score", "stopping-times", "increment-variance",
                                          "mse-vs-r",      "error-vs-cost",  "sga",            "sgld",
                                          "kalman-score"};
  return k;
}

inline void run_experiment(const std::string& kind, RunContext ctx) {
  if (std::find(experiment_kinds().begin(), experiment_kinds().end(), kind) == experiment_kinds().end())
    throw std::invalid_argument("unknown experiment '" + kind + "'");
  const int version = ctx.config.value("schema_version", kConfigSchemaVersion);
  if (version != kConfigSchemaVersion) throw std::invalid_argument("unsupported config schema_version");
  if (ctx.config.value("replicates", 1) < 1) throw std::invalid_argument("replicates must be >= 1");
  std::filesystem::create_directories(ctx.out_dir);
  ctx.hash = config_hash(ctx.config);
  const auto t0 = std::chrono::steady_clock::now();
  const Problem pr = load_problem(ctx.config, ctx.seed);
  if (kind == "simulate-data") experiment_simulate_data(ctx, pr);
  else if (kind == "estimate-score") experiment_estimate_score(ctx, pr);
  else if (kind == "stopping-times") experiment_stopping_times(ctx, pr);
  else if (kind == "increment-variance") experiment_increment_variance(ctx, pr);
  else if (kind == "mse-vs-r") experiment_mse(ctx, pr, false);
  else if (kind == "error-vs-cost") experiment_mse(ctx, pr, true);
  else if (kind == "sga") experiment_driver(ctx, pr, false);
  else if (kind == "sgld") experiment_driver(ctx, pr, true);
  else experiment_kalman_score(ctx, pr);
  // Rewrite the sidecar's wall time now that the run is complete.
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto meta_path = ctx.out_dir / (kind + ".meta.json");
  if (std::filesystem::exists(meta_path)) {
    json meta = json::parse(std::ifstream(meta_path));
    meta["wall_seconds"] = wall;
    std::ofstream(meta_path) << meta.dump(2) << '\n';
  }
}

}  // namespace udiff
