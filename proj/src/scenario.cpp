#include "qrecon/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace qrecon {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

bool parse_double(const std::string& s, double& v) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    return false;
  }
  return pos == s.size() && std::isfinite(v);
}

bool parse_int(const std::string& s, int& v) {
  double d;
  if (!parse_double(s, d) || d != std::floor(d) || std::abs(d) > 1e9) return false;
  v = static_cast<int>(d);
  return true;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

Config Config::parse(std::istream& in, const std::string& origin) {
  Config c;
  c.origin_ = origin;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    auto it = c.values_.find(key);
    if (it != c.values_.end() && it->second != value)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": '" + key + "' redefined (first on line " +
                        std::to_string(c.lines_[key]) + ")");
    c.values_[key] = value;
    c.lines_.emplace(key, lineno);
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse(in, path);
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string* Config::find(const std::string& key) const {
  auto it = values_.find(key);
  used_.insert(key);
  return it == values_.end() ? nullptr : &it->second;
}

void Config::fail(const std::string& key, const std::string& what) const {
  auto it = lines_.find(key);
  std::string where = it == lines_.end() ? origin_ : origin_ + ":" + std::to_string(it->second);
  throw ConfigError(where + ": " + key + ": " + what);
}

std::string Config::text(const std::string& key, const std::string& fallback) const {
  const std::string* v = find(key);
  return v ? *v : fallback;
}

double Config::number(const std::string& key, double fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  double d;
  if (!parse_double(*v, d)) fail(key, "expected a number, got '" + *v + "'");
  return d;
}

int Config::integer(const std::string& key, int fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  int i;
  if (!parse_int(*v, i)) fail(key, "expected an integer, got '" + *v + "'");
  return i;
}

bool Config::flag(const std::string& key, bool fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  fail(key, "expected true or false, got '" + *v + "'");
}

std::vector<double> Config::numbers(const std::string& key, const std::vector<double>& fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& item : split_list(*v)) {
    double d;
    if (!parse_double(item, d)) fail(key, "expected a comma separated list of numbers, got '" + *v + "'");
    out.push_back(d);
  }
  return out;
}

std::vector<int> Config::integers(const std::string& key, const std::vector<int>& fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  std::vector<int> out;
  for (const auto& item : split_list(*v)) {
    int i;
    if (!parse_int(item, i)) fail(key, "expected a comma separated list of integers, got '" + *v + "'");
    out.push_back(i);
  }
  return out;
}

void Config::reject_unused() const {
  std::string unknown;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  if (!unknown.empty()) throw ConfigError(origin_ + ": unknown keys: " + unknown);
}

std::string Config::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Scenario

Command parse_command(const std::string& name) {
  if (name == "forward") return Command::forward;
  if (name == "beam") return Command::beam;
  if (name == "identity") return Command::identity;
  if (name == "reconstruct") return Command::reconstruct;
  if (name == "sweep") return Command::sweep;
  throw ConfigError("unknown command " + name);
}

std::string command_name(Command c) {
  switch (c) {
    case Command::forward: return "forward";
    case Command::beam: return "beam";
    case Command::identity: return "identity";
    case Command::reconstruct: return "reconstruct";
    case Command::sweep: return "sweep";
  }
  return "?";
}

MetricPtr Scenario::metric() const {
  if (metric_kind == "minkowski") return make_minkowski(n);
  if (metric_kind == "perturbed_beta") return make_perturbed_beta(n, metric_c);
  if (metric_kind == "time_dependent_h") return make_time_dependent_h(n, metric_c);
  if (metric_kind == "grid_csv") return load_grid_metric(metric_path, n);
  throw ConfigError("metric.kind: unknown metric " + metric_kind);
}

GridPtr Scenario::grid() const { return grid(nx); }

GridPtr Scenario::grid(const std::vector<int>& nx_override) const {
  if (nt > 0) return std::make_shared<SpacetimeGrid>(domain, nt, nx_override);
  return std::make_shared<SpacetimeGrid>(SpacetimeGrid::with_cfl(*metric(), domain, nx_override, cfl));
}

ScalarField Scenario::q_true(GridPtr g) const {
  return ScalarField::from_function(g, [this](const Vec& p) {
    double q = 0.0;
    for (const auto& b : bumps) q += b.amplitude * std::exp(-(p - b.center).squaredNorm() / b.width2);
    return cplx(q);
  });
}

RecoveryConfig Scenario::recovery(GridPtr g, int jobs) const {
  RecoveryConfig rc;
  rc.metric = metric();
  rc.domain = domain;
  rc.grid = g;
  rc.q_true = q_true(g);
  rc.solver = solver;
  rc.probe = probe;
  rc.seed = seed;
  rc.jobs = jobs;
  return rc;
}

namespace {

Vec to_vec(const std::vector<double>& v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[i];
  return out;
}

Vec event_key(const Config& cfg, const std::string& key, int dim, bool required) {
  if (!cfg.has(key)) {
    cfg.text(key, "");
    if (required) throw ConfigError(key + ": required");
    return Vec();
  }
  auto v = cfg.numbers(key, {});
  if (static_cast<int>(v.size()) != dim)
    throw ConfigError(key + ": expected " + std::to_string(dim) + " comma separated numbers");
  return to_vec(v);
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key + ": " + what);
}

}  // namespace

Scenario load_scenario(const Config& cfg, Command command) {
  Scenario sc;
  const std::string seed = cfg.text("seed", "0");
  {
    std::size_t pos = 0;
    bool ok = !seed.empty() && seed.find_first_not_of("0123456789") == std::string::npos;
    try {
      if (ok) sc.seed = std::stoull(seed, &pos);
    } catch (const std::exception&) {
      ok = false;
    }
    require(ok && pos == seed.size(), "seed", "must be an unsigned 64-bit integer, got '" + seed + "'");
  }

  sc.metric_kind = cfg.text("metric.kind", "minkowski");
  sc.n = cfg.integer("metric.n", 1);
  sc.metric_c = cfg.number("metric.c", 0.0);
  sc.metric_path = cfg.text("metric.path", "");
  require(sc.n >= 1 && sc.n <= 3, "metric.n", "must be 1, 2 or 3");
  require(sc.metric_kind == "minkowski" || sc.metric_kind == "perturbed_beta" ||
              sc.metric_kind == "time_dependent_h" || sc.metric_kind == "grid_csv",
          "metric.kind", "expected minkowski, perturbed_beta, time_dependent_h or grid_csv");
  require(sc.metric_kind != "grid_csv" || !sc.metric_path.empty(), "metric.path", "required for grid_csv");

  sc.domain.T = cfg.number("domain.T", 2.0);
  sc.domain.lower = to_vec(cfg.numbers("domain.lower", std::vector<double>(sc.n, 0.0)));
  sc.domain.upper = to_vec(cfg.numbers("domain.upper", std::vector<double>(sc.n, 1.0)));
  require(sc.domain.T > 0.0, "domain.T", "must be positive");
  require(sc.domain.lower.size() == sc.n, "domain.lower", "needs metric.n entries");
  require(sc.domain.upper.size() == sc.n, "domain.upper", "needs metric.n entries");
  for (int k = 0; k < sc.n; ++k) require(sc.domain.lower(k) < sc.domain.upper(k), "domain.upper", "must exceed domain.lower");

  sc.nx = cfg.integers("grid.nx", std::vector<int>(sc.n, 100));
  sc.nt = cfg.integer("grid.nt", 0);
  sc.cfl = cfg.number("grid.cfl", 0.9);
  require(static_cast<int>(sc.nx.size()) == sc.n, "grid.nx", "needs metric.n entries");
  for (int v : sc.nx) require(v >= 4, "grid.nx", "needs at least 4 intervals per axis");
  require(sc.nt >= 0, "grid.nt", "must be non-negative");
  require(sc.cfl > 0.0 && sc.cfl <= 0.9, "grid.cfl", "must lie in (0, 0.9]");

  const int nbumps = cfg.integer("q.count", 0);
  require(nbumps >= 0 && nbumps <= 64, "q.count", "must lie in [0, 64]");
  for (int i = 0; i < nbumps; ++i) {
    const std::string pre = "q." + std::to_string(i) + ".";
    BumpSpec b;
    b.center = event_key(cfg, pre + "center", sc.n + 1, true);
    b.width2 = cfg.number(pre + "width2", 0.08);
    b.amplitude = cfg.number(pre + "amplitude", 1.0);
    require(b.width2 > 0.0, pre + "width2", "must be positive");
    sc.bumps.push_back(b);
  }

  sc.solver.m = cfg.integer("solver.m", 4);
  sc.solver.kappa = cfg.number("solver.kappa", 10.0);
  sc.solver.tol = cfg.number("solver.tol", 1e-10);
  sc.solver.max_iter = cfg.integer("solver.max_iter", 50);
  require(sc.solver.m >= 2 && sc.solver.m <= 12, "solver.m", "must lie in [2, 12]");
  require(sc.solver.kappa > 0.0, "solver.kappa", "must be positive");
  require(sc.solver.tol > 0.0, "solver.tol", "must be positive");
  require(sc.solver.max_iter >= 1, "solver.max_iter", "must be at least 1");

  ProbeOptions& po = sc.probe;
  po.m = sc.solver.m;
  po.tau = cfg.number("probe.tau", po.tau);
  po.tau0 = cfg.number("probe.tau0", po.tau0);
  po.eps = cfg.number("probe.eps", po.eps);
  po.beam_delta = cfg.number("probe.beam_delta", po.beam_delta);
  po.chart_delta = cfg.number("probe.chart_delta", po.chart_delta);
  po.chart_margin = cfg.number("probe.chart_margin", po.chart_margin);
  po.angle = cfg.number("probe.angle", po.angle);
  po.min_angle = cfg.number("probe.min_angle", po.min_angle);
  po.angular_resolution = cfg.number("probe.angular_resolution", po.angular_resolution);
  po.vhat_floor = cfg.number("probe.vhat_floor", po.vhat_floor);
  po.v0_floor = cfg.number("probe.v0_floor", po.v0_floor);
  if (command == Command::identity || command == Command::reconstruct || command == Command::sweep) {
    require(sc.solver.m >= 4, "solver.m", "recovery needs m >= 4");
    try {
      po.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("probe: ") + e.what());
    }
  }

  sc.pulse.axis = cfg.integer("forward.pulse.axis", 0);
  const std::string side = cfg.text("forward.pulse.side", "lower");
  sc.pulse.start = cfg.number("forward.pulse.start", 0.1);
  sc.pulse.width = cfg.number("forward.pulse.width", 0.5);
  sc.pulse.amplitude = cfg.number("forward.pulse.amplitude", 1e-2);
  sc.manufactured = cfg.flag("forward.manufactured", false);
  sc.levels = cfg.integer("forward.levels", 3);
  require(sc.pulse.axis >= 0 && sc.pulse.axis < sc.n, "forward.pulse.axis", "must index a spatial axis");
  require(side == "lower" || side == "upper" || side == "all", "forward.pulse.side", "expected lower, upper or all");
  sc.pulse.side = side == "lower" ? -1 : side == "upper" ? 1 : 0;
  require(sc.pulse.width > 0.0, "forward.pulse.width", "must be positive");
  require(sc.levels >= 2 && sc.levels <= 6, "forward.levels", "must lie in [2, 6]");
  if (command == Command::forward && sc.manufactured)
    require(sc.metric_kind == "minkowski", "forward.manufactured", "needs metric.kind = minkowski");

  sc.beam_event = event_key(cfg, "beam.event", sc.n + 1, command == Command::beam);
  sc.beam_direction = event_key(cfg, "beam.direction", sc.n, command == Command::beam);
  sc.beam_taus = cfg.numbers("beam.taus", sc.beam_taus);
  sc.refine_power = cfg.number("beam.refine_power", 0.0);
  sc.conjugate = cfg.flag("beam.conjugate", false);
  require(!sc.beam_taus.empty(), "beam.taus", "must not be empty");
  for (double t : sc.beam_taus) require(t >= 1.0, "beam.taus", "entries must be at least 1");
  require(sc.refine_power >= 0.0 && sc.refine_power <= 3.0, "beam.refine_power", "must lie in [0, 3]");
  if (command == Command::beam) {
    require(sc.beam_direction.norm() > 0.0, "beam.direction", "must be non-zero");
    bool inside = sc.beam_event(0) > 0.0 && sc.beam_event(0) < sc.domain.T;
    for (int k = 0; k < sc.n; ++k)
      inside = inside && sc.beam_event(k + 1) > sc.domain.lower(k) && sc.beam_event(k + 1) < sc.domain.upper(k);
    require(inside, "beam.event", "must lie inside (0, T) x Omega, otherwise no chart tube exists");
    require(sc.probe.beam_delta > 0.0 && sc.probe.beam_delta <= sc.probe.chart_delta, "probe.beam_delta",
            "must lie in (0, probe.chart_delta]");
  }

  sc.p0 = event_key(cfg, "identity.p0", sc.n + 1, command == Command::identity);
  sc.identity_eps = cfg.numbers("identity.eps", {});
  for (double e : sc.identity_eps) require(e > 0.0, "identity.eps", "entries must be positive");

  const bool needs_w = command == Command::reconstruct || command == Command::sweep;
  sc.w_lo = event_key(cfg, "w.lo", sc.n + 1, needs_w);
  sc.w_hi = event_key(cfg, "w.hi", sc.n + 1, needs_w);
  sc.w_counts = cfg.integers("w.counts", std::vector<int>(sc.n + 1, 1));
  require(static_cast<int>(sc.w_counts.size()) == sc.n + 1, "w.counts", "needs metric.n + 1 entries");
  for (int c : sc.w_counts) require(c >= 1, "w.counts", "entries must be positive");

  sc.deltas = cfg.numbers("sweep.deltas", {});
  sc.s = cfg.integer("sweep.s", 2);
  sc.M = cfg.number("sweep.M", 1.0);
  sc.kappa = cfg.number("sweep.kappa", 0.5);
  sc.tau0 = cfg.number("sweep.tau0", 1.0);
  sc.anchor.delta_ref = cfg.number("sweep.anchor.delta", sc.anchor.delta_ref);
  sc.anchor.eps_ref = cfg.number("sweep.anchor.eps", sc.anchor.eps_ref);
  sc.anchor.tau_ref = cfg.number("sweep.anchor.tau", sc.anchor.tau_ref);
  if (command == Command::sweep) {
    require(!sc.deltas.empty(), "sweep.deltas", "required");
    for (std::size_t i = 0; i < sc.deltas.size(); ++i) {
      require(sc.deltas[i] > 0.0 && sc.deltas[i] < sc.M, "sweep.deltas", "entries must lie in (0, sweep.M)");
      if (i > 0) require(sc.deltas[i] > sc.deltas[i - 1], "sweep.deltas", "must be strictly increasing");
    }
    require(2 * (sc.s + 1) > sc.n + 1, "sweep.s", "needs s + 1 > (n + 1) / 2");
    require(sc.kappa > 0.0 && sc.kappa < 1.0, "sweep.kappa", "must lie in (0, 1)");
    require(sc.tau0 >= 1.0, "sweep.tau0", "must be at least 1");
    require(sc.anchor.delta_ref > 0.0 && sc.anchor.delta_ref < sc.M, "sweep.anchor.delta", "must lie in (0, sweep.M)");
    require(sc.anchor.eps_ref > 0.0, "sweep.anchor.eps", "must be positive");
    require(sc.anchor.tau_ref >= 1.0, "sweep.anchor.tau", "must be at least 1");
  }

  cfg.reject_unused();

  // Grid and CFL, before any solve.
  MetricPtr metric;
  try {
    metric = sc.metric();
  } catch (const NumericalError& e) {
    throw ConfigError(std::string("metric: ") + e.what());
  }
  if (sc.nt > 0) {
    SpacetimeGrid g(sc.domain, sc.nt, sc.nx);
    try {
      check_cfl(*metric, g, sc.cfl);
    } catch (const CflError& e) {
      throw ConfigError(std::string("grid.nt: ") + e.what());
    }
  }

  std::ostringstream h;
  h << std::hex << std::setw(16) << std::setfill('0') << fnv1a(cfg.canonical() + "seed=" + std::to_string(sc.seed));
  sc.config_hash = h.str();
  return sc;
}

// ---------------------------------------------------------------------------
// Runners

namespace {

void prepare(const std::string& out_dir) {
  if (out_dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + out_dir + ": " + ec.message());
}

std::string path_in(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path);
  return out;
}

double pulse_shape(double t, double a, double b) {
  if (t <= a || t >= b) return 0.0;
  double s = std::sin(std::numbers::pi * (t - a) / (b - a));
  return s * s * s * s;
}

SigmaField pulse_data(const Scenario& sc, GridPtr g) {
  SigmaField f = SigmaField::zeros(g);
  const auto& sig = g->sigma();
  for (int l = 0; l <= g->nt(); ++l) {
    const double v = sc.pulse.amplitude * pulse_shape(g->t(l), sc.pulse.start, sc.pulse.start + sc.pulse.width);
    if (v == 0.0) continue;
    for (std::size_t j = 0; j < sig.size(); ++j)
      if (sc.pulse.side == 0 || (sig[j].axis == sc.pulse.axis && sig[j].side == sc.pulse.side)) f.at(l, j) = v;
  }
  return f;
}

}  // namespace

std::vector<ConvergenceRow> manufactured_ladder(int n, double T, int nx0, int levels, double cfl) {
  if (n < 1 || nx0 < 4 || levels < 2) throw ConfigError("manufactured ladder needs n >= 1, nx0 >= 4, levels >= 2");
  const double pi = std::numbers::pi;
  auto metric = make_minkowski(n);
  Domain d;
  d.T = T;
  d.lower = Vec::Zero(n);
  d.upper = Vec::Ones(n);
  auto spatial = [n, pi](const Vec& p) {
    double s = 1.0;
    for (int k = 1; k <= n; ++k) s *= std::sin(pi * p(k));
    return s;
  };
  std::vector<ConvergenceRow> rows;
  for (int lev = 0; lev < levels; ++lev) {
    const int nx = nx0 << lev;
    auto g = std::make_shared<SpacetimeGrid>(SpacetimeGrid::with_cfl(*metric, d, std::vector<int>(n, nx), cfl));
    auto exact = [&](const Vec& p) { return cplx(std::sin(p(0)) * spatial(p)); };
    ScalarField F = ScalarField::from_function(g, [&](const Vec& p) { return (n * pi * pi - 1.0) * exact(p); });
    SigmaField f = SigmaField::from_function(g, exact);
    Slice u0(g->spatial_count()), u1(g->spatial_count());
    for (std::size_t node = 0; node < g->spatial_count(); ++node) {
      Vec p = g->coords(0, node);
      u0[node] = exact(p);
      u1[node] = spatial(p);
    }
    ScalarField u = solve_linear(metric, &F, f, g, &u0, &u1);
    ConvergenceRow row;
    row.nx = nx;
    row.nt = g->nt();
    row.max_error = (u - ScalarField::from_function(g, exact)).max_abs();
    row.ratio = rows.empty() ? 0.0 : rows.back().max_error / row.max_error;
    rows.push_back(row);
  }
  return rows;
}

ForwardResult run_forward(const Scenario& sc, const std::string& out_dir, int jobs) {
  (void)jobs;
  prepare(out_dir);
  ForwardResult res;
  GridPtr g = sc.grid();
  WaveOperator op(sc.metric(), g, sc.cfl);
  auto [u, rep] = solve_semilinear(op, sc.q_true(g), pulse_data(sc, g), sc.solver);
  res.report = rep;
  res.max_abs = u.max_abs();
  if (sc.manufactured) res.convergence = manufactured_ladder(sc.n, sc.domain.T, sc.nx[0], sc.levels, sc.cfl);
  if (out_dir.empty()) return res;
  write_field_csv(u, path_in(out_dir, "solution.csv"));
  auto rf = open_out(path_in(out_dir, "forward_report.txt"));
  rf << "iterations = " << rep.iterations << "\n";
  rf << "residual = " << format_double(rep.residual) << "\n";
  rf << "cfl = " << format_double(rep.cfl) << "\n";
  rf << "max_abs = " << format_double(res.max_abs) << "\n";
  rf << "config_hash = " << sc.config_hash << "\n";
  if (sc.manufactured) {
    auto cf = open_out(path_in(out_dir, "convergence.csv"));
    cf << "nx,nt,max_error,ratio\n";
    for (const auto& r : res.convergence)
      cf << r.nx << "," << r.nt << "," << format_double(r.max_error) << "," << format_double(r.ratio) << "\n";
  }
  return res;
}

BeamLadder run_beam(const Scenario& sc, const std::string& out_dir, int jobs) {
  (void)jobs;
  prepare(out_dir);
  MetricPtr metric = sc.metric();
  const Vec base = sc.beam_event;
  const Vec nd = null_vector(*metric, base, sc.beam_direction, TimeDirection::future);
  BeamSpec spec;
  spec.chart = trace_chart(metric, sc.domain, Event::from_coords(base), nd, sc.probe.chart_delta, sc.probe.chart_margin);
  spec.tau = sc.beam_taus.front();
  spec.delta = sc.probe.beam_delta;
  spec.H0 = cplx(0.0, 1.0) * CMat::Identity(sc.n, sc.n);
  Beam first = assemble_beam(spec);
  if (sc.conjugate) first = conjugate_beam(first);

  BeamLadder lad;
  lad.residual_vanishes = true;
  for (double tau : sc.beam_taus) {
    Beam b = first.with_tau(tau);
    std::vector<int> nx = sc.nx;
    const double f = std::pow(tau / sc.beam_taus.front(), sc.refine_power);
    for (int& v : nx) v = static_cast<int>(std::lround(v * f));
    GridPtr g = sc.grid(nx);
    BeamRow row;
    row.tau = tau;
    row.nx = nx[0];
    row.residual_l2 = beam_residual(b, g).l2;
    row.l4 = beam_lp_norm(b, *g, 4.0);
    CorrectionNorms cn = correction_norms(b, g);
    row.r_l2 = cn.r_l2;
    row.beam_l2 = cn.beam_l2;
    row.ratio = cn.ratio();
    lad.residual_vanishes = lad.residual_vanishes && row.residual_l2 == 0.0;
    lad.rows.push_back(row);
  }
  bool any_zero = false;
  for (const auto& r : lad.rows) any_zero = any_zero || r.residual_l2 == 0.0;
  if (lad.rows.size() >= 2 && !any_zero) {
    std::vector<double> xs, ys;
    for (const auto& r : lad.rows) {
      xs.push_back(r.tau);
      ys.push_back(r.residual_l2);
    }
    lad.residual_slope = fit_log_log(xs, ys).slope;
  }
  if (out_dir.empty()) return lad;
  write_beam_csv(first, *sc.grid(), path_in(out_dir, "beam.csv"));
  auto lf = open_out(path_in(out_dir, "beam_ladder.csv"));
  lf << "tau,nx,residual_l2,l4,r_l2,beam_l2,ratio\n";
  for (const auto& r : lad.rows)
    lf << format_double(r.tau) << "," << r.nx << "," << format_double(r.residual_l2) << "," << format_double(r.l4)
       << "," << format_double(r.r_l2) << "," << format_double(r.beam_l2) << "," << format_double(r.ratio) << "\n";
  return lad;
}

IdentityResult run_identity(const Scenario& sc, const std::string& out_dir, int jobs) {
  prepare(out_dir);
  GridPtr g = sc.grid();
  MetricPtr metric = sc.metric();
  ProbeBundle b = build_probe(metric, sc.domain, g, Event::from_coords(sc.p0), sc.probe);
  WaveOperator op(metric, g, sc.cfl);
  ScalarField q = sc.q_true(g);
  DnCallable dn = nonlinear_dn(op, q, sc.solver);
  IdentityResult res;
  res.evaluation = identity_evaluate(op, &q, b.v0_field, b.probe, dn, &b.v_terms, jobs);
  for (double e : sc.identity_eps) {
    DnProbe p = b.probe;
    p.eps.assign(p.eps.size(), e);
    res.ladder.emplace_back(e, identity_evaluate(op, &q, b.v0_field, p, dn, &b.v_terms, jobs));
  }
  if (sc.identity_eps.size() >= 2 && !sc.bumps.empty()) {
    res.remainder = remainder_ladder(op, q, b.v0_field, b.probe.f, sc.identity_eps, dn, jobs);
    res.has_slope = true;
  }
  if (out_dir.empty()) return res;
  const std::string csv = path_in(out_dir, "identity.csv");
  std::filesystem::remove(csv);
  append_identity_csv(csv, "p0", res.evaluation);
  for (const auto& [e, ev] : res.ladder) append_identity_csv(csv, "eps=" + format_double(e), ev);
  auto sf = open_out(path_in(out_dir, "identity_summary.txt"));
  sf << "config_hash = " << sc.config_hash << "\n";
  sf << "tau = " << format_double(sc.probe.tau) << "\n";
  sf << "eps = " << format_double(sc.probe.eps) << "\n";
  sf << "discrepancy = " << format_double(res.evaluation.discrepancy) << "\n";
  if (res.has_slope) {
    sf << "remainder_slope = " << format_double(res.remainder.slope) << "\n";
    for (std::size_t i = 0; i < res.remainder.eps.size(); ++i)
      sf << "remainder." << i << " = " << format_double(res.remainder.eps[i]) << ", "
         << format_double(res.remainder.remainder[i]) << "\n";
  }
  return res;
}

std::vector<PointRecovery> run_reconstruct(const Scenario& sc, const std::string& out_dir, int jobs) {
  prepare(out_dir);
  GridPtr g = sc.grid();
  RecoveryConfig rc = sc.recovery(g, 1);
  auto W = w_grid(*rc.metric, sc.domain, sc.w_lo, sc.w_hi, sc.w_counts, sc.probe.angular_resolution);
  if (W.empty()) throw NumericalError("no W-grid event admits both boundary-optimal geodesics");
  std::vector<PointRecovery> pts(W.size());
  parallel_for(W.size(), jobs, [&](std::size_t k) { pts[k] = recover_at(rc, W[k], k + 1); });
  if (out_dir.empty()) return pts;
  auto out = open_out(path_in(out_dir, "reconstruct.csv"));
  out << "point,t";
  for (int k = 1; k <= sc.n; ++k) out << ",x" << k;
  out << ",q_true,q_hat_re,q_hat_im,abs_err,discrepancy,status\n";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& p = pts[i];
    out << i << "," << format_double(p.p0.t);
    for (int k = 0; k < sc.n; ++k) out << "," << format_double(p.p0.x(k));
    out << "," << format_double(p.q_true) << "," << format_double(p.q_hat.real()) << ","
        << format_double(p.q_hat.imag()) << "," << format_double(p.ok ? std::abs(p.q_hat - p.q_true) : NAN) << ","
        << format_double(p.ok ? p.identity.discrepancy : NAN) << ",";
    std::string status = p.ok ? "ok" : "failed: " + p.failure;
    std::replace(status.begin(), status.end(), ',', ';');
    out << status << "\n";
  }
  return pts;
}

StabilityReport run_sweep(const Scenario& sc, const std::string& out_dir, int jobs) {
  prepare(out_dir);
  GridPtr g = sc.grid();
  SweepConfig cfg;
  cfg.base = sc.recovery(g, jobs);
  cfg.W = w_grid(*cfg.base.metric, sc.domain, sc.w_lo, sc.w_hi, sc.w_counts, sc.probe.angular_resolution);
  if (cfg.W.empty()) throw NumericalError("no W-grid event admits both boundary-optimal geodesics");
  cfg.deltas = sc.deltas;
  cfg.s = sc.s;
  cfg.M = sc.M;
  cfg.kappa = sc.kappa;
  cfg.tau0 = sc.tau0;
  cfg.anchor = sc.anchor;
  StabilityReport rep = stability_sweep(cfg);
  rep.config_hash = sc.config_hash;
  if (out_dir.empty()) return rep;
  write_sweep_csv(rep, path_in(out_dir, "sweep.csv"));
  write_sweep_summary(rep, cfg, path_in(out_dir, "sweep_summary.txt"));
  return rep;
}

}  // namespace qrecon
