#include "rfadv/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <toml.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace rfadv::harness {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Stats {
  int count = 0;
  double mean = 0.0;
  double se = 0.0;
};

Stats mean_se(const std::vector<double>& v) {
  Stats s;
  s.count = static_cast<int>(v.size());
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= s.count;
  if (s.count > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.se = std::sqrt(ss / (s.count - 1) / s.count);
  }
  return s;
}

// ---- TOML helpers ----------------------------------------------------------

void check_keys(const toml::table& t, const std::string& section, const std::set<std::string>& allowed) {
  for (auto&& [k, v] : t) {
    (void)v;
    if (!allowed.count(std::string(k.str())))
      throw UsageError("unknown key '" + std::string(k.str()) + "' in [" + section + "]");
  }
}

const toml::table* section(const toml::table& root, const std::string& name) {
  const toml::node* n = root.get(name);
  if (!n) return nullptr;
  const toml::table* t = n->as_table();
  if (!t) throw UsageError("[" + name + "] must be a table");
  return t;
}

double get_real(const toml::node& n, const std::string& key) {
  if (auto v = n.value<double>()) return *v;
  throw UsageError("'" + key + "' must be a number");
}

std::int64_t get_int(const toml::node& n, const std::string& key) {
  if (n.is_integer()) return n.as_integer()->get();
  throw UsageError("'" + key + "' must be an integer");
}

std::vector<double> get_reals(const toml::node& n, const std::string& key) {
  if (const toml::array* a = n.as_array()) {
    std::vector<double> out;
    for (const toml::node& e : *a) out.push_back(get_real(e, key));
    return out;
  }
  return {get_real(n, key)};
}

std::string get_string(const toml::node& n, const std::string& key) {
  if (auto v = n.value<std::string>()) return *v;
  throw UsageError("'" + key + "' must be a string");
}

bool get_bool(const toml::node& n, const std::string& key) {
  if (auto v = n.value<bool>()) return *v;
  throw UsageError("'" + key + "' must be a boolean");
}

toml::table parse_toml(const std::filesystem::path& path,
                       const std::set<std::string>& allowed_sections) {
  toml::table root;
  try {
    root = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << path.string() << ": " << e.description() << " at line " << e.source().begin.line;
    throw UsageError(os.str());
  }
  for (auto&& [k, v] : root) {
    (void)v;
    if (!allowed_sections.count(std::string(k.str())))
      throw UsageError("unknown section [" + std::string(k.str()) + "]");
  }
  return root;
}

// Grid from either `values = [...]` or `start`, `stop`, `count`, `spacing`.
std::vector<double> grid_from_table(const toml::table& t, const std::string& prefix) {
  if (const toml::node* v = t.get(prefix)) {
    if (t.get("start") || t.get("stop") || t.get("count"))
      throw UsageError("give either '" + prefix + "' or start/stop/count, not both");
    return get_reals(*v, prefix);
  }
  const toml::node* a = t.get("start");
  const toml::node* b = t.get("stop");
  const toml::node* c = t.get("count");
  if (!a || !b || !c) throw UsageError("grid needs '" + prefix + "' or start, stop and count");
  const std::string spacing = t.get("spacing") ? get_string(*t.get("spacing"), "spacing") : "log";
  if (spacing != "log" && spacing != "linear") throw UsageError("spacing must be 'log' or 'linear'");
  std::ostringstream os;
  os.precision(17);
  os << get_real(*a, "start") << ":" << get_real(*b, "stop") << ":" << get_int(*c, "count");
  return parse_grid(os.str(), spacing == "log");
}

void check_monotone(const std::vector<double>& g) {
  if (g.empty()) throw UsageError("empty grid");
  bool inc = true, dec = true;
  for (std::size_t i = 1; i < g.size(); ++i) {
    inc = inc && g[i] > g[i - 1];
    dec = dec && g[i] < g[i - 1];
  }
  if (!inc && !dec) throw UsageError("grid must be strictly monotone");
}

void apply_optimizer(const toml::table& t, OptimizerSettings& opt, LossVariant* variant) {
  check_keys(t, "optimizer", {"method", "smoothing", "step", "max_iters", "grad_tol", "backtracking",
                              "precondition", "loss_variant"});
  if (auto n = t.get("method")) {
    try {
      opt.method = parse_optimizer_method(get_string(*n, "method"));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (auto n = t.get("smoothing")) opt.smoothing = get_real(*n, "smoothing");
  if (auto n = t.get("precondition")) opt.precondition = get_bool(*n, "precondition");
  if (auto n = t.get("step")) opt.step = get_real(*n, "step");
  if (auto n = t.get("max_iters")) opt.max_iters = static_cast<int>(get_int(*n, "max_iters"));
  if (auto n = t.get("grad_tol")) opt.grad_tol = get_real(*n, "grad_tol");
  if (auto n = t.get("backtracking")) opt.backtracking = get_bool(*n, "backtracking");
  if (auto n = t.get("loss_variant")) {
    try {
      *variant = parse_loss_variant(get_string(*n, "loss_variant"));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return f;
}

nlohmann::json to_json(const OptimizerSettings& o) {
  return {{"method", to_string(o.method)},
          {"smoothing", o.smoothing},
          {"step", o.step},
          {"max_iters", o.max_iters},
          {"grad_tol", o.grad_tol},
          {"backtracking", o.backtracking},
          {"precondition", o.precondition}};
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"d", c.d},
          {"n", c.n},
          {"N", c.N},
          {"eps", c.eps},
          {"tau2", c.tau2},
          {"trials", c.trials},
          {"seed", c.seed},
          {"loss_variant", to_string(c.loss_variant)},
          {"optimizer", to_json(c.optimizer)}};
}

TrialResult run_trial(const ExperimentConfig& cfg, std::size_t trial, const SimulationOptions& opt) {
  TrialResult tr;
  tr.trial = static_cast<int>(trial);
  try {
    RandomStream w_rng(cfg.seed, trial, Purpose::weights);
    RandomStream data_rng(cfg.seed, trial, Purpose::train_x);
    auto map = std::make_shared<const FeatureMap>(sample_sphere_rows(cfg.N, cfg.d, w_rng));
    const Dataset ds = gen_dataset(cfg.d, cfg.n, cfg.tau2, data_rng);
    const TrainedModel model = train_robust_erm(ds, map, cfg);
    tr.train_status = model.status;
    tr.iterations = model.iterations;
    tr.final_loss = model.training_trace.back();

    const RiskReport mc = mc_adversarial_risk(model.theta, *map, ds.beta, cfg.tau2, cfg.eps, opt.n_test,
                                              cfg.seed, trial, opt.oracle);
    const KernelJ kernel = compute_kernel_j(*map);
    const RiskReport an = analytic_adversarial_risk(model.theta, *map, kernel, ds.beta, cfg.tau2, cfg.eps);
    tr.ar_empirical = mc.adversarial_risk;
    tr.ar_se = mc.standard_error;
    tr.std_empirical = mc.standard_risk;
    tr.ar_analytic = an.adversarial_risk;
    tr.std_analytic = an.standard_risk;
    tr.outside_constraint_set = an.outside_constraint_set;
    tr.status = "ok";
  } catch (const std::exception& e) {
    tr.status = std::string("failed: ") + e.what();
  }
  return tr;
}

}  // namespace

std::string version_string() {
#ifdef RFADV_VERSION
  return RFADV_VERSION;
#else
  return "0.0.0";
#endif
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  // snprintf honours LC_NUMERIC, so swap a locale comma back to a point.
  std::snprintf(buf, sizeof buf, "%.12g", v);
  std::string s(buf);
  std::replace(s.begin(), s.end(), ',', '.');
  return s;
}

void write_csv(std::ostream& os, const Table& t) {
  auto line = [&os](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) os << ',';
      os << cells[i];
    }
    os << '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
}

void write_csv(const std::string& path, const Table& t) {
  if (path == "-") {
    write_csv(std::cout, t);
    std::cout.flush();
    return;
  }
  std::ofstream f = open_out(path);
  write_csv(f, t);
}

int worker_count(std::size_t tasks) {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("RFADV_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) n = static_cast<int>(v);
  }
  return static_cast<int>(std::max<std::size_t>(1, std::min<std::size_t>(n, tasks)));
}

void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex mu;
  std::vector<std::jthread> pool;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (first_error) std::rethrow_exception(first_error);
}

std::vector<double> parse_grid(const std::string& text, bool log_spacing) {
  double a = 0.0, b = 0.0;
  long k = 0;
  char extra = 0;
  if (std::sscanf(text.c_str(), "%lf:%lf:%ld%c", &a, &b, &k, &extra) != 3 || k < 1)
    throw UsageError("grid must look like start:stop:count, got '" + text + "'");
  if (!std::isfinite(a) || !std::isfinite(b)) throw UsageError("grid ends must be finite");
  std::vector<double> g(static_cast<std::size_t>(k));
  if (k == 1) {
    g[0] = a;
    return g;
  }
  const bool use_log = log_spacing && a > 0.0 && b > 0.0;
  for (long i = 0; i < k; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(k - 1);
    g[static_cast<std::size_t>(i)] =
        use_log ? a * std::pow(b / a, t) : a + (b - a) * t;
  }
  return g;
}

SimulationSummary run_simulation(const ExperimentConfig& cfg, const SimulationOptions& opt) {
  cfg.validate();
  SimulationSummary sum;
  sum.config = cfg;
  sum.trials.resize(static_cast<std::size_t>(cfg.trials));

  parallel_for(sum.trials.size(), opt.threads,
               [&](std::size_t i) { sum.trials[i] = run_trial(cfg, i, opt); });

  std::vector<double> ar, sr, aa, sa;
  for (const auto& tr : sum.trials) {
    if (tr.status != "ok") continue;
    ar.push_back(tr.ar_empirical);
    sr.push_back(tr.std_empirical);
    aa.push_back(tr.ar_analytic);
    sa.push_back(tr.std_analytic);
  }
  const Stats a = mean_se(ar);
  const Stats an = mean_se(aa);
  sum.successes = a.count;
  sum.ar_mean = a.mean;
  sum.ar_se = a.se;
  sum.std_mean = mean_se(sr).mean;
  sum.ar_analytic_mean = an.mean;
  sum.ar_analytic_se = an.se;
  sum.std_analytic_mean = mean_se(sa).mean;
  return sum;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
  nlohmann::json j;
  j["command"] = m.command;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["config"] = nlohmann::json::parse(m.config_snapshot.empty() ? "{}" : m.config_snapshot);
  j["stage_seconds"] = m.stage_seconds;
  j["trial_status"] = m.trial_status;
  j["threads"] = m.threads;
  std::ofstream f = open_out(path);
  f << j.dump(2) << '\n';
}

CompareConfig load_compare_config(const std::filesystem::path& path) {
  const toml::table root = parse_toml(path, {"model", "adversary", "optimizer", "sweep"});
  CompareConfig c;
  if (const toml::table* m = section(root, "model")) {
    check_keys(*m, "model", {"d", "n", "tau2"});
    if (auto n = m->get("d")) c.d = static_cast<int>(get_int(*n, "d"));
    if (auto n = m->get("n")) c.n = static_cast<int>(get_int(*n, "n"));
    if (auto n = m->get("tau2")) c.tau2 = get_real(*n, "tau2");
  }
  if (const toml::table* a = section(root, "adversary")) {
    check_keys(*a, "adversary", {"eps", "oracle", "n_test"});
    if (auto n = a->get("eps")) c.eps = get_reals(*n, "eps");
    if (auto n = a->get("oracle")) {
      try {
        c.oracle = parse_oracle(get_string(*n, "oracle"));
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    }
    if (auto n = a->get("n_test")) c.n_test = static_cast<int>(get_int(*n, "n_test"));
  }
  if (const toml::table* o = section(root, "optimizer")) apply_optimizer(*o, c.optimizer, &c.loss_variant);
  const toml::table* s = section(root, "sweep");
  if (!s) throw UsageError("[sweep] with an N or ratio grid is required");
  check_keys(*s, "sweep", {"N", "ratio", "trials", "seed"});
  if (s->get("N") && s->get("ratio")) throw UsageError("give either N or ratio in [sweep], not both");
  if (auto n = s->get("N")) {
    if (const toml::array* arr = n->as_array()) {
      for (const toml::node& e : *arr) c.N.push_back(static_cast<int>(get_int(e, "N")));
    } else {
      c.N.push_back(static_cast<int>(get_int(*n, "N")));
    }
  } else if (auto r = s->get("ratio")) {
    for (double v : get_reals(*r, "ratio")) c.N.push_back(static_cast<int>(std::lround(v * c.n)));
  } else {
    throw UsageError("[sweep] needs N or ratio");
  }
  if (auto n = s->get("trials")) c.trials = static_cast<int>(get_int(*n, "trials"));
  if (auto n = s->get("seed")) c.seed = static_cast<std::uint64_t>(get_int(*n, "seed"));

  if (c.eps.empty()) throw UsageError("[adversary] eps is required");
  if (c.n_test < 1) throw UsageError("n_test must be at least 1");
  for (int N : c.N) {
    ExperimentConfig e;
    e.d = c.d;
    e.n = c.n;
    e.N = N;
    e.tau2 = c.tau2;
    e.trials = c.trials;
    e.optimizer = c.optimizer;
    for (double eps : c.eps) {
      e.eps = eps;
      try {
        e.validate();
      } catch (const std::invalid_argument& err) {
        throw UsageError(err.what());
      }
    }
  }
  return c;
}

SweepConfig load_sweep_config(const std::filesystem::path& path) {
  const toml::table root = parse_toml(path, {"model", "adversary", "optimizer", "sweep"});
  SweepConfig c;
  if (const toml::table* m = section(root, "model")) {
    check_keys(*m, "model", {"psi1", "psi2", "tau2"});
    if (auto n = m->get("psi1")) c.psi1 = get_real(*n, "psi1");
    if (auto n = m->get("psi2")) c.psi2 = get_reals(*n, "psi2");
    if (auto n = m->get("tau2")) c.tau2 = get_real(*n, "tau2");
  }
  if (const toml::table* a = section(root, "adversary")) {
    check_keys(*a, "adversary", {"eps"});
    if (auto n = a->get("eps")) c.eps = get_real(*n, "eps");
  }
  if (const toml::table* o = section(root, "optimizer")) {
    check_keys(*o, "optimizer", {"tol", "max_iters", "starts"});
    if (auto n = o->get("tol")) c.solver.tol = get_real(*n, "tol");
    if (auto n = o->get("max_iters")) c.solver.max_iters = static_cast<int>(get_int(*n, "max_iters"));
    if (auto n = o->get("starts")) c.solver.starts = static_cast<int>(get_int(*n, "starts"));
  }
  const toml::table* s = section(root, "sweep");
  if (!s) throw UsageError("[sweep] is required");
  check_keys(*s, "sweep", {"axis", "values", "start", "stop", "count", "spacing", "warm_start"});
  if (!s->get("axis")) throw UsageError("[sweep] axis is required");
  const std::string axis = get_string(*s->get("axis"), "axis");
  if (axis == "psi-ratio") {
    c.axis = SweepAxis::psi1;
    c.ratio_axis = true;
  } else if (axis == "psi1") {
    c.axis = SweepAxis::psi1;
  } else if (axis == "eps") {
    c.axis = SweepAxis::eps;
  } else if (axis == "tau2") {
    c.axis = SweepAxis::tau2;
  } else {
    throw UsageError("axis must be psi-ratio, psi1, eps or tau2");
  }
  c.grid = grid_from_table(*s, "values");
  if (auto n = s->get("warm_start")) c.warm_start = get_bool(*n, "warm_start");
  check_monotone(c.grid);
  if (c.psi2.empty()) throw UsageError("psi2 must be nonempty");
  if (c.solver.starts < 1 || c.solver.max_iters < 1 || !(c.solver.tol > 0.0))
    throw UsageError("invalid solver settings in [optimizer]");
  return c;
}

std::vector<TheoryRow> run_theory_grid(SweepAxis axis, const std::vector<double>& grid, double psi1,
                                       double psi2, double eps, double tau2,
                                       const SolverSettings& solver, bool warm_start) {
  const std::vector<SweepEntry> entries = sweep_theory(axis, grid, psi1, psi2, eps, tau2, solver, warm_start);
  std::vector<TheoryRow> rows;
  for (const SweepEntry& e : entries) {
    TheoryRow r{psi1, psi2, eps, tau2, e.prediction, e.error};
    if (axis == SweepAxis::psi1) r.psi1 = e.value;
    if (axis == SweepAxis::eps) r.eps = e.value;
    if (axis == SweepAxis::tau2) r.tau2 = e.value;
    rows.push_back(std::move(r));
  }
  return rows;
}

Table theory_table(const std::vector<TheoryRow>& rows) {
  Table t;
  t.header = {"psi1",  "psi2", "eps",   "tau2",   "ar_theory", "std_risk_theory", "alpha", "tau_g",
              "beta",  "gamma", "tau_q", "lambda", "nu",        "grad_norm",       "status"};
  for (const TheoryRow& r : rows) {
    std::vector<std::string> cells{format_number(r.psi1), format_number(r.psi2), format_number(r.eps),
                                   format_number(r.tau2)};
    if (r.prediction) {
      const RiskPrediction& p = *r.prediction;
      const SaddlePoint& s = p.saddle;
      for (double v : {p.adversarial_risk, p.standard_component, s.alpha, s.tau_g, s.beta, s.gamma,
                       s.tau_q, s.lambda_star, s.nu_star, s.grad_norm})
        cells.push_back(format_number(v));
      cells.push_back(s.warnings.empty() ? "ok" : "ok (warning)");
    } else {
      for (int i = 0; i < 10; ++i) cells.push_back("nan");
      std::string err = r.error;
      std::replace(err.begin(), err.end(), ',', ';');
      cells.push_back("failed: " + err);
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

std::vector<ComparisonRow> run_compare(const CompareConfig& cfg, int threads, RunManifest* manifest) {
  struct Point {
    int N;
    double eps;
  };
  std::vector<Point> points;
  for (double eps : cfg.eps)
    for (int N : cfg.N) points.push_back({N, eps});

  std::vector<ComparisonRow> rows;
  const auto t0 = Clock::now();
  std::vector<std::optional<RiskPrediction>> theory(points.size());
  std::vector<std::string> theory_error(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    try {
      theory[i] = predict_adversarial_risk(make_theory_point(
          static_cast<double>(points[i].N) / cfg.d, static_cast<double>(cfg.n) / cfg.d, points[i].eps, cfg.tau2));
    } catch (const std::exception& e) {
      theory_error[i] = e.what();
    }
  }
  const double theory_seconds = seconds_since(t0);

  const auto t1 = Clock::now();
  std::vector<ExperimentConfig> configs(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    ExperimentConfig& e = configs[i];
    e.d = cfg.d;
    e.n = cfg.n;
    e.N = points[i].N;
    e.eps = points[i].eps;
    e.tau2 = cfg.tau2;
    e.trials = cfg.trials;
    e.seed = cfg.seed;
    e.optimizer = cfg.optimizer;
    e.loss_variant = cfg.loss_variant;
  }
  // Trials of all points share one pool.
  const std::size_t trials = static_cast<std::size_t>(cfg.trials);
  std::vector<TrialResult> results(points.size() * trials);
  const SimulationOptions opt{cfg.oracle, cfg.n_test, 1};
  parallel_for(results.size(), threads,
               [&](std::size_t k) { results[k] = run_trial(configs[k / trials], k % trials, opt); });
  const double sim_seconds = seconds_since(t1);

  for (std::size_t i = 0; i < points.size(); ++i) {
    std::vector<double> ar, sr, aa, sa;
    for (std::size_t t = 0; t < trials; ++t) {
      const TrialResult& tr = results[i * trials + t];
      if (manifest) {
        std::ostringstream os;
        os << "N=" << points[i].N << " eps=" << format_number(points[i].eps) << " trial=" << t << ": "
           << tr.status;
        if (tr.status == "ok") os << " (" << tr.train_status << ", " << tr.iterations << " iterations)";
        manifest->trial_status.push_back(os.str());
      }
      if (tr.status != "ok") continue;
      ar.push_back(tr.ar_empirical);
      sr.push_back(tr.std_empirical);
      aa.push_back(tr.ar_analytic);
      sa.push_back(tr.std_analytic);
    }
    const Stats mc = mean_se(ar);
    const Stats an = mean_se(aa);

    ComparisonRow base;
    base.psi1 = static_cast<double>(points[i].N) / cfg.d;
    base.psi2 = static_cast<double>(cfg.n) / cfg.d;
    base.eps = points[i].eps;
    base.tau2 = cfg.tau2;
    base.d = cfg.d;
    base.n = cfg.n;
    base.N = points[i].N;
    base.trials = mc.count;
    if (theory[i]) {
      base.ar_theory = theory[i]->adversarial_risk;
      base.std_risk_theory = theory[i]->standard_component;
    } else {
      base.ar_theory = base.std_risk_theory = std::nan("");
    }
    std::string status = "ok";
    if (!theory[i]) status = "theory failed: " + theory_error[i];
    if (mc.count < cfg.trials) {
      const std::string msg = std::to_string(cfg.trials - mc.count) + " trials failed";
      status = status == "ok" ? msg : status + "; " + msg;
    }
    std::replace(status.begin(), status.end(), ',', ';');
    base.status = status;

    ComparisonRow r1 = base;
    r1.method = to_string(cfg.oracle == Oracle::pgd ? RiskMethod::mc_pgd : RiskMethod::mc_closed_form);
    r1.ar_empirical_mean = mc.count ? mc.mean : std::nan("");
    r1.ar_empirical_se = mc.se;
    r1.std_risk_empirical = mc.count ? mean_se(sr).mean : std::nan("");
    rows.push_back(r1);

    ComparisonRow r2 = base;
    r2.method = to_string(RiskMethod::analytic_ge);
    r2.ar_empirical_mean = an.count ? an.mean : std::nan("");
    r2.ar_empirical_se = an.se;
    r2.std_risk_empirical = an.count ? mean_se(sa).mean : std::nan("");
    rows.push_back(r2);
  }
  if (manifest) {
    manifest->stage_seconds["theory"] = theory_seconds;
    manifest->stage_seconds["simulation"] = sim_seconds;
  }
  return rows;
}

Table comparison_table(std::vector<ComparisonRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const ComparisonRow& a, const ComparisonRow& b) {
    return std::tie(a.eps, a.N, a.method) < std::tie(b.eps, b.N, b.method);
  });
  Table t;
  t.header = {"psi1",      "psi2",      "eps",     "tau2",        "d",        "n",
              "N",         "ar_theory", "ar_empirical_mean", "ar_empirical_se", "std_risk_theory",
              "std_risk_empirical", "trials", "method", "status"};
  for (const ComparisonRow& r : rows) {
    t.rows.push_back({format_number(r.psi1), format_number(r.psi2), format_number(r.eps),
                      format_number(r.tau2), std::to_string(r.d), std::to_string(r.n),
                      std::to_string(r.N), format_number(r.ar_theory), format_number(r.ar_empirical_mean),
                      format_number(r.ar_empirical_se), format_number(r.std_risk_theory),
                      format_number(r.std_risk_empirical), std::to_string(r.trials), r.method, r.status});
  }
  return t;
}


namespace {

nlohmann::json to_json(const CompareConfig& c) {
  return {{"d", c.d},
          {"n", c.n},
          {"tau2", c.tau2},
          {"N", c.N},
          {"eps", c.eps},
          {"loss_variant", to_string(c.loss_variant)},
          {"oracle", to_string(c.oracle)},
          {"n_test", c.n_test},
          {"trials", c.trials},
          {"seed", c.seed},
          {"optimizer", to_json(c.optimizer)}};
}

class Emitter {
 public:
  explicit Emitter(std::ostream& out) : out_(out) {}
  void operator()(const std::string& path, const Table& t) const {
    if (path == "-") {
      write_csv(out_, t);
      out_.flush();
    } else {
      write_csv(path, t);
    }
  }

 private:
  std::ostream& out_;
};

std::string manifest_path(const std::string& out, const std::string& manifest) {
  if (!manifest.empty()) return manifest;
  if (out == "-") return "";
  return out + ".manifest.json";
}

bool has_failure(const std::vector<TheoryRow>& rows) {
  return std::any_of(rows.begin(), rows.end(), [](const TheoryRow& r) { return !r.prediction; });
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarial risk of random features regression: asymptotic theory and finite-size simulation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());
  const Emitter emit(out);

  // theory
  CLI::App* theory = app.add_subcommand("theory", "Theoretical adversarial risk on a psi1 grid");
  double t_psi1 = 0.0, t_psi2 = 0.0, t_eps = 0.0, t_tau2 = 0.0;
  std::string t_grid, t_spacing = "log", t_out = "-";
  auto* o_psi1 = theory->add_option("--psi1", t_psi1, "N/d")->check(CLI::PositiveNumber);
  auto* o_grid = theory->add_option("--psi1-grid", t_grid, "start:stop:count grid of psi1");
  o_psi1->excludes(o_grid);
  o_grid->excludes(o_psi1);
  theory->add_option("--psi2", t_psi2, "n/d")->required()->check(CLI::PositiveNumber);
  theory->add_option("--eps", t_eps, "adversary budget")->required()->check(CLI::NonNegativeNumber);
  theory->add_option("--tau2", t_tau2, "label noise variance")->required()->check(CLI::NonNegativeNumber);
  theory->add_option("--spacing", t_spacing, "grid spacing")->check(CLI::IsMember({"log", "linear"}));
  theory->add_option("--out", t_out, "CSV path, - for stdout");

  // simulate
  CLI::App* sim = app.add_subcommand("simulate", "Train and evaluate finite-size models");
  ExperimentConfig s_cfg;
  std::string s_variant = "exact_minimax", s_oracle = "closed_form", s_out = "-", s_manifest;
  int s_ntest = 2000;
  bool s_no_bt = false;
  sim->add_option("--d", s_cfg.d, "input dimension")->required()->check(CLI::PositiveNumber);
  sim->add_option("--n", s_cfg.n, "training samples")->required()->check(CLI::PositiveNumber);
  sim->add_option("--N", s_cfg.N, "random features")->required()->check(CLI::PositiveNumber);
  sim->add_option("--eps", s_cfg.eps, "adversary budget")->required()->check(CLI::NonNegativeNumber);
  sim->add_option("--tau2", s_cfg.tau2, "label noise variance")->required()->check(CLI::NonNegativeNumber);
  sim->add_option("--trials", s_cfg.trials, "independent trials")->check(CLI::PositiveNumber);
  sim->add_option("--seed", s_cfg.seed, "top-level seed");
  sim->add_option("--loss-variant", s_variant, "training loss")
      ->check(CLI::IsMember({"exact_minimax", "l_circle", "l_double_circle"}));
  sim->add_option("--oracle", s_oracle, "test-time adversary")->check(CLI::IsMember({"closed_form", "pgd"}));
  sim->add_option("--n-test", s_ntest, "test points per trial")->check(CLI::PositiveNumber);
  std::string s_method = "lbfgs";
  bool s_no_pre = false;
  sim->add_option("--method", s_method, "optimizer")->check(CLI::IsMember({"lbfgs", "gradient_descent", "gd"}));
  sim->add_option("--smoothing", s_cfg.optimizer.smoothing, "final smoothing level (lbfgs)")
      ->check(CLI::Range(1e-300, 0.1));
  sim->add_option("--step", s_cfg.optimizer.step, "GD step, 0 for 0.5/L")->check(CLI::NonNegativeNumber);
  sim->add_option("--max-iters", s_cfg.optimizer.max_iters, "iteration cap")->check(CLI::PositiveNumber);
  sim->add_option("--grad-tol", s_cfg.optimizer.grad_tol, "gradient tolerance")->check(CLI::PositiveNumber);
  sim->add_flag("--no-backtracking", s_no_bt, "fixed-step GD");
  sim->add_flag("--no-precondition", s_no_pre, "Euclidean metric instead of gram(J)");
  sim->add_option("--out", s_out, "CSV path, - for stdout");
  sim->add_option("--manifest", s_manifest, "manifest path (default <out>.manifest.json)");

  // compare
  CLI::App* cmp = app.add_subcommand("compare", "Theory against simulation on a grid from a TOML file");
  std::string c_file, c_out = "-", c_manifest;
  bool c_dry = false;
  cmp->add_option("config", c_file, "TOML configuration")->required();
  cmp->add_option("--out", c_out, "CSV path, - for stdout");
  cmp->add_option("--manifest", c_manifest, "manifest path (default <out>.manifest.json)");
  cmp->add_flag("--dry-run", c_dry, "validate and print the planned grid");

  // sweep
  CLI::App* swp = app.add_subcommand("sweep", "Warm-started theory sweep from a TOML file");
  std::string w_file, w_out = "-";
  swp->add_option("config", w_file, "TOML configuration")->required();
  swp->add_option("--out", w_out, "CSV path, - for stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*theory) {
      std::vector<double> grid;
      if (!t_grid.empty()) {
        grid = parse_grid(t_grid, t_spacing == "log");
        for (double v : grid)
          if (!(v > 0.0)) throw UsageError("psi1 grid values must be positive");
      } else if (*o_psi1) {
        grid = {t_psi1};
      } else {
        throw UsageError("one of --psi1 or --psi1-grid is required");
      }
      const auto rows = run_theory_grid(SweepAxis::psi1, grid, grid.front(), t_psi2, t_eps, t_tau2, {}, true);
      emit(t_out, theory_table(rows));
      return has_failure(rows) ? kPartialFailure : kOk;
    }

    if (*sim) {
      s_cfg.loss_variant = parse_loss_variant(s_variant);
      s_cfg.optimizer.method = parse_optimizer_method(s_method);
      s_cfg.optimizer.backtracking = !s_no_bt;
      s_cfg.optimizer.precondition = !s_no_pre;
      s_cfg.validate();
      SimulationOptions opt;
      opt.oracle = parse_oracle(s_oracle);
      opt.n_test = s_ntest;
      opt.threads = worker_count(static_cast<std::size_t>(s_cfg.trials));
      const auto t0 = Clock::now();
      const SimulationSummary sum = run_simulation(s_cfg, opt);
      const double secs = seconds_since(t0);

      Table t;
      t.header = {"trial", "d", "n", "N", "eps", "tau2", "ar_empirical", "ar_se", "std_risk_empirical",
                  "ar_analytic", "std_risk_analytic", "iterations", "train_status", "outside_constraint_set",
                  "status"};
      auto prefix = [&](const std::string& trial) {
        return std::vector<std::string>{trial, std::to_string(s_cfg.d), std::to_string(s_cfg.n),
                                        std::to_string(s_cfg.N), format_number(s_cfg.eps),
                                        format_number(s_cfg.tau2)};
      };
      RunManifest m;
      for (const TrialResult& tr : sum.trials) {
        auto row = prefix(std::to_string(tr.trial));
        const bool ok = tr.status == "ok";
        for (double v : {tr.ar_empirical, tr.ar_se, tr.std_empirical, tr.ar_analytic, tr.std_analytic})
          row.push_back(ok ? format_number(v) : "nan");
        row.push_back(std::to_string(tr.iterations));
        row.push_back(tr.train_status);
        row.push_back(tr.outside_constraint_set ? "1" : "0");
        std::string status = tr.status;
        std::replace(status.begin(), status.end(), ',', ';');
        row.push_back(status);
        t.rows.push_back(std::move(row));
        m.trial_status.push_back("trial " + std::to_string(tr.trial) + ": " + tr.status +
                                 (ok ? " (" + tr.train_status + ")" : ""));
      }
      auto agg = prefix("aggregate");
      const bool any = sum.successes > 0;
      for (double v : {sum.ar_mean, sum.ar_se, sum.std_mean, sum.ar_analytic_mean, sum.std_analytic_mean})
        agg.push_back(any ? format_number(v) : "nan");
      agg.push_back("");
      agg.push_back("");
      agg.push_back("");
      agg.push_back(std::to_string(sum.successes) + "/" + std::to_string(s_cfg.trials) + " trials ok");
      t.rows.push_back(std::move(agg));
      emit(s_out, t);

      if (const std::string mp = manifest_path(s_out, s_manifest); !mp.empty()) {
        m.command = "simulate";
        m.version = version_string();
        m.seed = s_cfg.seed;
        nlohmann::json snap = to_json(s_cfg);
        snap["oracle"] = s_oracle;
        snap["n_test"] = s_ntest;
        m.config_snapshot = snap.dump();
        m.stage_seconds["simulation"] = secs;
        m.threads = opt.threads;
        write_manifest(mp, m);
      }
      return sum.successes == s_cfg.trials ? kOk : kPartialFailure;
    }

    if (*cmp) {
      const CompareConfig cfg = load_compare_config(c_file);
      if (c_dry) {
        out << "planned grid: " << cfg.eps.size() * cfg.N.size() << " points x " << cfg.trials
            << " trials (d=" << cfg.d << ", n=" << cfg.n << ", tau2=" << format_number(cfg.tau2)
            << ", loss=" << to_string(cfg.loss_variant) << ", oracle=" << to_string(cfg.oracle) << ")\n";
        for (double eps : cfg.eps)
          for (int N : cfg.N)
            out << "  eps=" << format_number(eps) << " N=" << N << " psi1=" << format_number(double(N) / cfg.d)
                << " psi2=" << format_number(double(cfg.n) / cfg.d) << '\n';
        return kOk;
      }
      RunManifest m;
      m.command = "compare";
      m.version = version_string();
      m.seed = cfg.seed;
      m.config_snapshot = to_json(cfg).dump();
      m.threads = worker_count(cfg.eps.size() * cfg.N.size() * static_cast<std::size_t>(cfg.trials));
      const auto rows = run_compare(cfg, m.threads, &m);
      emit(c_out, comparison_table(rows));
      if (const std::string mp = manifest_path(c_out, c_manifest); !mp.empty()) write_manifest(mp, m);
      const bool failed = std::any_of(rows.begin(), rows.end(), [](const ComparisonRow& r) { return r.status != "ok"; });
      return failed ? kPartialFailure : kOk;
    }

    if (*swp) {
      const SweepConfig cfg = load_sweep_config(w_file);
      std::vector<TheoryRow> all;
      for (double psi2 : cfg.psi2) {
        std::vector<double> grid = cfg.grid;
        if (cfg.ratio_axis)
          for (double& g : grid) g *= psi2;
        const auto rows = run_theory_grid(cfg.axis, grid, cfg.psi1, psi2, cfg.eps, cfg.tau2, cfg.solver, cfg.warm_start);
        all.insert(all.end(), rows.begin(), rows.end());
      }
      emit(w_out, theory_table(all));
      return has_failure(all) ? kPartialFailure : kOk;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kPartialFailure;
  }
  return kUsage;
}

}  // namespace rfadv::harness
