#include "qrecon/wave_solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace qrecon {

SpacetimeGrid::SpacetimeGrid(Domain domain, int nt, std::vector<int> nx)
    : domain_(std::move(domain)), nt_(nt), nx_(std::move(nx)) {
  const int n = static_cast<int>(nx_.size());
  if (n < 1 || n != domain_.spatial_dim()) throw ConfigError("grid dimension does not match the domain");
  if (nt_ < 8) throw ConfigError("grid needs nt >= 8");
  if (!(domain_.T > 0.0)) throw ConfigError("final time must be positive");
  for (int k = 0; k < n; ++k) {
    if (nx_[k] < 8) throw ConfigError("grid needs nx >= 8 on every axis");
    if (!(domain_.upper(k) > domain_.lower(k))) throw ConfigError("empty spatial interval");
  }
  dt_ = domain_.T / nt_;
  dx_.resize(n);
  stride_.assign(n, 1);
  for (int k = 0; k < n; ++k) dx_[k] = (domain_.upper(k) - domain_.lower(k)) / nx_[k];
  spatial_count_ = 1;
  for (int k = n - 1; k >= 0; --k) {
    stride_[k] = spatial_count_;
    spatial_count_ *= static_cast<std::size_t>(nx_[k] + 1);
  }
  for (int k = 0; k < n; ++k)
    for (int side : {-1, 1}) {
      const int target = side < 0 ? 0 : nx_[k];
      for (std::size_t node = 0; node < spatial_count_; ++node)
        if (index(node, k) == target) sigma_.push_back({k, side, node});
    }
  for (std::size_t node = 0; node < spatial_count_; ++node)
    if (!is_boundary(node)) interior_.push_back(node);
}

Vec SpacetimeGrid::position(std::size_t node) const {
  const int n = spatial_dim();
  Vec x(n);
  for (int k = 0; k < n; ++k) x(k) = this->x(k, index(node, k));
  return x;
}

Vec SpacetimeGrid::coords(int level, std::size_t node) const {
  const int n = spatial_dim();
  Vec p(n + 1);
  p(0) = t(level);
  for (int k = 0; k < n; ++k) p(k + 1) = x(k, index(node, k));
  return p;
}

bool SpacetimeGrid::is_boundary(std::size_t node) const {
  for (int k = 0; k < spatial_dim(); ++k) {
    int i = index(node, k);
    if (i == 0 || i == nx_[k]) return true;
  }
  return false;
}

namespace {

double max_speed(const MetricField& metric, const SpacetimeGrid& grid, const std::vector<double>& times) {
  double c = 0.0;
  for (double t : times)
    for (std::size_t node = 0; node < grid.spatial_count(); ++node) {
      Vec p(grid.spatial_dim() + 1);
      p(0) = t;
      p.tail(grid.spatial_dim()) = grid.position(node);
      Mat h = metric.h(p);
      double lmax = grid.spatial_dim() == 1 ? h(0, 0) : Eigen::SelfAdjointEigenSolver<Mat>(h).eigenvalues().maxCoeff();
      c = std::max(c, std::sqrt(metric.beta(p) * lmax));
    }
  return c;
}

double inv_dx_norm(const SpacetimeGrid& grid) {
  double s = 0.0;
  for (int k = 0; k < grid.spatial_dim(); ++k) s += 1.0 / (grid.dx(k) * grid.dx(k));
  return std::sqrt(s);
}

}  // namespace

double cfl_number(const MetricField& metric, const SpacetimeGrid& grid) {
  std::vector<double> times;
  if (metric.is_time_independent()) {
    times.push_back(0.0);
  } else {
    for (int l = 0; l <= grid.nt(); ++l) times.push_back(grid.t(l));
  }
  return max_speed(metric, grid, times) * grid.dt() * inv_dx_norm(grid);
}

void check_cfl(const MetricField& metric, const SpacetimeGrid& grid, double c_cfl) {
  if (!(c_cfl > 0.0 && c_cfl <= 0.9)) throw ConfigError("cfl constant must lie in (0, 0.9]");
  double nu = cfl_number(metric, grid);
  if (nu > c_cfl)
    throw CflError("CFL violated: " + format_double(nu) + " > " + format_double(c_cfl) +
                   " (reduce dt or increase dx)");
}

SpacetimeGrid SpacetimeGrid::with_cfl(const MetricField& metric, const Domain& domain, std::vector<int> nx,
                                      double cfl) {
  if (!(cfl > 0.0 && cfl <= 0.9)) throw ConfigError("cfl constant must lie in (0, 0.9]");
  SpacetimeGrid probe(domain, 8, nx);
  std::vector<double> times;
  const int samples = metric.is_time_independent() ? 1 : 33;
  for (int i = 0; i < samples; ++i) times.push_back(samples == 1 ? 0.0 : domain.T * i / (samples - 1));
  double c = max_speed(metric, probe, times);
  double dt_max = cfl / (c * inv_dx_norm(probe));
  int nt = std::max(8, static_cast<int>(std::ceil(domain.T / dt_max * (1.0 + 1e-12))));
  for (;;) {
    SpacetimeGrid grid(domain, nt, nx);
    if (cfl_number(metric, grid) <= cfl) return grid;
    nt = static_cast<int>(std::ceil(nt * 1.02)) + 1;
  }
}

// ---------------------------------------------------------------------------
// Fields

ScalarField ScalarField::zeros(GridPtr grid) {
  ScalarField u;
  u.values.assign(grid->node_count(), cplx(0.0));
  u.grid = std::move(grid);
  return u;
}

ScalarField ScalarField::from_function(GridPtr grid, const std::function<cplx(const Vec&)>& f) {
  ScalarField u = zeros(grid);
  for (int l = 0; l <= grid->nt(); ++l)
    for (std::size_t node = 0; node < grid->spatial_count(); ++node) u.at(l, node) = f(grid->coords(l, node));
  return u;
}

Slice ScalarField::slice(int level) const {
  auto first = values.begin() + static_cast<std::ptrdiff_t>(level * grid->spatial_count());
  return Slice(first, first + static_cast<std::ptrdiff_t>(grid->spatial_count()));
}

namespace {

double max_abs_of(const std::vector<cplx>& v) {
  double m = 0.0;
  for (const auto& z : v) m = std::max(m, std::abs(z));
  return m;
}

bool finite_of(const std::vector<cplx>& v) {
  return std::all_of(v.begin(), v.end(), [](const cplx& z) { return std::isfinite(z.real()) && std::isfinite(z.imag()); });
}

template <class F>
void require_same(const F& a, const F& b) {
  if (a.grid != b.grid || a.values.size() != b.values.size()) throw ConfigError("fields live on different grids");
}

}  // namespace

double ScalarField::max_abs() const { return max_abs_of(values); }
bool ScalarField::finite() const { return finite_of(values); }

ScalarField operator+(const ScalarField& a, const ScalarField& b) {
  require_same(a, b);
  ScalarField c = a;
  for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] += b.values[i];
  return c;
}

ScalarField operator-(const ScalarField& a, const ScalarField& b) {
  require_same(a, b);
  ScalarField c = a;
  for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] -= b.values[i];
  return c;
}

ScalarField operator*(cplx s, const ScalarField& a) {
  ScalarField c = a;
  for (auto& z : c.values) z *= s;
  return c;
}

ScalarField conj(const ScalarField& a) {
  ScalarField c = a;
  for (auto& z : c.values) z = std::conj(z);
  return c;
}

SigmaField SigmaField::zeros(GridPtr grid) {
  SigmaField f;
  f.values.assign(grid->sigma_count() * static_cast<std::size_t>(grid->nt() + 1), cplx(0.0));
  f.grid = std::move(grid);
  return f;
}

SigmaField SigmaField::from_function(GridPtr grid, const std::function<cplx(const Vec&)>& fn) {
  SigmaField f = zeros(grid);
  const auto& sig = grid->sigma();
  for (int l = 0; l <= grid->nt(); ++l)
    for (std::size_t j = 0; j < sig.size(); ++j) f.at(l, j) = fn(grid->coords(l, sig[j].node));
  return f;
}

double SigmaField::max_abs() const { return max_abs_of(values); }
bool SigmaField::finite() const { return finite_of(values); }

SigmaField operator+(const SigmaField& a, const SigmaField& b) {
  require_same(a, b);
  SigmaField c = a;
  for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] += b.values[i];
  return c;
}

SigmaField operator-(const SigmaField& a, const SigmaField& b) {
  require_same(a, b);
  SigmaField c = a;
  for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] -= b.values[i];
  return c;
}

SigmaField operator*(cplx s, const SigmaField& a) {
  SigmaField c = a;
  for (auto& z : c.values) z *= s;
  return c;
}

SigmaField conj(const SigmaField& a) {
  SigmaField c = a;
  for (auto& z : c.values) z = std::conj(z);
  return c;
}

std::vector<double> sigma_weights(const MetricField& metric, const SpacetimeGrid& grid) {
  const int n = grid.spatial_dim();
  const auto& sig = grid.sigma();
  std::vector<double> w(sig.size() * static_cast<std::size_t>(grid.nt() + 1));
  auto wt = trapezoid_weights(grid.nt(), grid.dt());
  for (int l = 0; l <= grid.nt(); ++l)
    for (std::size_t j = 0; j < sig.size(); ++j) {
      const auto& e = sig[j];
      double tang = 1.0;
      for (int k = 0; k < n; ++k) {
        if (k == e.axis) continue;
        int i = grid.index(e.node, k);
        tang *= (i == 0 || i == grid.nx(k)) ? 0.5 * grid.dx(k) : grid.dx(k);
      }
      Vec p = grid.coords(l, e.node);
      Mat h = metric.h(p);
      double hkk = h.inverse()(e.axis, e.axis);
      double dens = std::sqrt(metric.beta(p)) * std::sqrt(h.determinant() * hkk);
      w[static_cast<std::size_t>(l) * sig.size() + j] = wt[l] * tang * dens;
    }
  return w;
}

cplx sigma_pairing(const SigmaField& a, const SigmaField& b, const std::vector<double>& w) {
  require_same(a, b);
  if (w.size() != a.values.size()) throw ConfigError("quadrature weights do not match the Sigma grid");
  cplx s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * a.values[i] * b.values[i];
  return s;
}

double sigma_l2(const SigmaField& a, const std::vector<double>& w) {
  if (w.size() != a.values.size()) throw ConfigError("quadrature weights do not match the Sigma grid");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * std::norm(a.values[i]);
  return std::sqrt(s);
}

std::vector<double> spatial_weights(const SpacetimeGrid& grid) {
  std::vector<double> w(grid.spatial_count(), 1.0);
  for (std::size_t node = 0; node < grid.spatial_count(); ++node)
    for (int k = 0; k < grid.spatial_dim(); ++k) {
      int i = grid.index(node, k);
      w[node] *= (i == 0 || i == grid.nx(k)) ? 0.5 * grid.dx(k) : grid.dx(k);
    }
  return w;
}


cplx interpolate(const ScalarField& u, const Vec& p) {
  const auto& g = *u.grid;
  const int n = g.spatial_dim();
  const double slack = 1e-12;
  if (p.size() != n + 1 || !g.domain().contains(p, slack * (1.0 + g.T())))
    throw OutsideDomainError("interpolation point outside the grid");
  auto locate = [](double x, double x0, double h, int nmax, int& i, double& w) {
    double r = (x - x0) / h;
    i = std::clamp(static_cast<int>(std::floor(r)), 0, nmax - 1);
    w = std::clamp(r - i, 0.0, 1.0);
  };
  int lt;
  double wt;
  locate(p(0), 0.0, g.dt(), g.nt(), lt, wt);
  std::vector<int> ix(n);
  std::vector<double> wx(n);
  for (int k = 0; k < n; ++k) locate(p(k + 1), g.domain().lower(k), g.dx(k), g.nx(k), ix[k], wx[k]);
  cplx out = 0.0;
  for (int corner = 0; corner < (1 << (n + 1)); ++corner) {
    double w = (corner & 1) ? wt : 1.0 - wt;
    int level = lt + (corner & 1);
    std::size_t node = 0;
    for (int k = 0; k < n; ++k) {
      int bit = (corner >> (k + 1)) & 1;
      w *= bit ? wx[k] : 1.0 - wx[k];
      node += static_cast<std::size_t>(ix[k] + bit) * g.stride(k);
    }
    if (w != 0.0) out += w * u.at(level, node);
  }
  return out;
}

double l2_norm(const ScalarField& u) {
  const auto& grid = *u.grid;
  auto ws = spatial_weights(grid);
  auto wt = trapezoid_weights(grid.nt(), grid.dt());
  double s = 0.0;
  for (int l = 0; l <= grid.nt(); ++l)
    for (std::size_t node = 0; node < grid.spatial_count(); ++node) s += wt[l] * ws[node] * std::norm(u.at(l, node));
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Compatibility

CompatibilityResult compatibility_check(const SigmaField& f, const Slice* u0, const Slice* u1, const ScalarField* F,
                                        int s, double tol) {
  const auto& grid = *f.grid;
  if (s < 0) throw ConfigError("compatibility order must be >= 0");
  if (s > grid.nt() - 1) throw ConfigError("compatibility order exceeds available time levels");
  const auto& sig = grid.sigma();
  double scale = std::max(1.0, f.max_abs());
  if (u0) scale = std::max(scale, max_abs_of(*u0));
  if (u1) scale = std::max(scale, max_abs_of(*u1) * grid.dt());
  bool data_vanish_on_boundary = true;
  for (const auto& e : sig) {
    if (u0 && std::abs((*u0)[e.node]) > 0.0) data_vanish_on_boundary = false;
    if (u1 && std::abs((*u1)[e.node]) > 0.0) data_vanish_on_boundary = false;
    if (F)
      for (int l = 0; l <= std::min(s, grid.nt()); ++l)
        if (std::abs(F->at(l, e.node)) > 0.0) data_vanish_on_boundary = false;
  }
  CompatibilityResult res;
  // Forward differences Delta^k f_0 via binomial sums.
  for (int k = 0; k <= s; ++k) {
    if (k >= 2 && !data_vanish_on_boundary)
      throw ConfigError("compatibility of order >= 2 is only checked for vanishing Cauchy data and source");
    double worst = 0.0;
    for (std::size_t j = 0; j < sig.size(); ++j) {
      cplx d = 0.0;
      double binom = 1.0;
      for (int i = 0; i <= k; ++i) {
        d += ((k - i) % 2 == 0 ? 1.0 : -1.0) * binom * f.at(i, j);
        binom = binom * (k - i) / (i + 1);
      }
      cplx prescribed = 0.0;
      if (k == 0 && u0) prescribed = (*u0)[sig[j].node];
      if (k == 1 && u1) prescribed = grid.dt() * (*u1)[sig[j].node];
      worst = std::max(worst, std::abs(d - prescribed));
    }
    res.defect = std::max(res.defect, worst);
    if (worst > tol * scale) {
      res.pass = false;
      res.failing_order = k;
      return res;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Wave operator

WaveOperator::WaveOperator(MetricPtr metric, GridPtr grid, double c_cfl)
    : metric_(std::move(metric)), grid_(std::move(grid)), frozen_(metric_->is_time_independent()) {
  if (metric_->spatial_dim() != grid_->spatial_dim()) throw ConfigError("metric and grid dimensions differ");
  for (std::size_t node = 0; node < grid_->spatial_count(); node += std::max<std::size_t>(1, grid_->spatial_count() / 64))
    metric_->check_invariants(grid_->coords(0, node));
  check_cfl(*metric_, *grid_, c_cfl);
  cfl_ = cfl_number(*metric_, *grid_);
  if (frozen_) {
    eval_a(0.0, a_frozen_);
    eval_space(0.0, space_frozen_);
  }
}

void WaveOperator::eval_a(double t, std::vector<double>& a) const {
  const auto& g = *grid_;
  a.resize(g.spatial_count());
  Vec p(g.spatial_dim() + 1);
  for (std::size_t node = 0; node < g.spatial_count(); ++node) {
    p(0) = t;
    p.tail(g.spatial_dim()) = g.position(node);
    a[node] = std::sqrt(metric_->h(p).determinant() / metric_->beta(p));
  }
}

void WaveOperator::eval_space(double t, SpaceCoeffs& c) const {
  const auto& g = *grid_;
  const int n = g.spatial_dim();
  const std::size_t ns = g.spatial_count();
  c.sqrtg.resize(ns);
  c.bdiag.assign(n, std::vector<double>(ns, 0.0));
  c.bmix.assign(static_cast<std::size_t>(n * n), {});
  if (n > 1)
    for (int k = 0; k < n; ++k)
      for (int l = 0; l < n; ++l)
        if (k != l) c.bmix[k * n + l].assign(ns, 0.0);
  Vec p(n + 1);
  for (std::size_t node = 0; node < ns; ++node) {
    p(0) = t;
    p.tail(n) = g.position(node);
    double beta = metric_->beta(p);
    Mat h = metric_->h(p);
    double deth = h.determinant();
    c.sqrtg[node] = std::sqrt(beta * deth);
    if (n > 1) {
      Mat b = std::sqrt(beta * deth) * h.inverse();
      for (int k = 0; k < n; ++k)
        for (int l = 0; l < n; ++l)
          if (k != l) c.bmix[k * n + l][node] = b(k, l);
    }
    for (int k = 0; k < n; ++k) {
      if (g.index(node, k) == g.nx(k)) continue;
      Vec q = p;
      q(k + 1) += 0.5 * g.dx(k);
      double bq = metric_->beta(q);
      Mat hq = metric_->h(q);
      double dq = hq.determinant();
      c.bdiag[k][node] = std::sqrt(bq * dq) * (n == 1 ? 1.0 / hq(0, 0) : hq.inverse()(k, k));
    }
  }
}

cplx WaveOperator::apply_space(const SpaceCoeffs& c, const Slice& u, std::size_t node) const {
  const auto& g = *grid_;
  const int n = g.spatial_dim();
  cplx sum = 0.0;
  for (int k = 0; k < n; ++k) {
    const std::size_t sk = g.stride(k);
    const double bp = c.bdiag[k][node], bm = c.bdiag[k][node - sk];
    sum += (bp * (u[node + sk] - u[node]) - bm * (u[node] - u[node - sk])) / (g.dx(k) * g.dx(k));
  }
  for (int k = 0; k < n; ++k)
    for (int l = 0; l < n; ++l) {
      if (k == l) continue;
      const std::size_t sk = g.stride(k), sl = g.stride(l);
      const auto& b = c.bmix[k * n + l];
      sum += (b[node + sk] * (u[node + sk + sl] - u[node + sk - sl]) -
              b[node - sk] * (u[node - sk + sl] - u[node - sk - sl])) /
             (4.0 * g.dx(k) * g.dx(l));
    }
  return sum;
}

void WaveOperator::march(const SourceFn& source, const SigmaField& f, const Slice& u0, const Slice& u1,
                         const ObserverFn& observe) const {
  const auto& g = *grid_;
  const std::size_t ns = g.spatial_count();
  const auto& sig = g.sigma();
  const double dt = g.dt();
  if (f.grid.get() != grid_.get() && (f.grid->nt() != g.nt() || f.grid->sigma_count() != g.sigma_count()))
    throw ConfigError("boundary data lives on a different grid");
  if (u0.size() != ns || u1.size() != ns) throw ConfigError("Cauchy data has the wrong size");

  {
    double scale = std::max({1.0, f.max_abs(), max_abs_of(u0)});
    for (std::size_t j = 0; j < sig.size(); ++j)
      if (std::abs(f.at(0, j) - u0[sig[j].node]) > 1e-10 * scale)
        throw CompatibilityError("boundary data does not match the initial value at t = 0");
  }

  Slice prev(ns), cur = u0, next(ns), F(ns, cplx(0.0));
  auto load_source = [&](int level) {
    if (source) {
      F.assign(ns, cplx(0.0));
      source(level, F);
    }
  };
  auto set_boundary = [&](Slice& u, int level) {
    for (std::size_t j = 0; j < sig.size(); ++j) u[sig[j].node] = f.at(level, j);
  };

  std::vector<double> a_lo, a_hi, a0;
  SpaceCoeffs sc_dyn;
  const SpaceCoeffs* sc = &space_frozen_;
  set_boundary(cur, 0);
  observe(0, cur);

  // Taylor start: u^1 = u0 + dt u1 + dt^2/2 u_tt(0).
  load_source(0);
  std::vector<double> a_t(ns, 0.0);
  const std::vector<double>* a_now = &a_frozen_;
  if (!frozen_) {
    eval_a(0.0, a0);
    eval_a(0.5 * dt, a_hi);
    eval_a(-0.5 * dt, a_lo);
    for (std::size_t i = 0; i < ns; ++i) a_t[i] = (a_hi[i] - a_lo[i]) / dt;
    eval_space(0.0, sc_dyn);
    sc = &sc_dyn;
    a_now = &a0;
  }
  next = cur;
  for (std::size_t node : g.interior()) {
    cplx rhs = sc->sqrtg[node] * F[node] + apply_space(*sc, cur, node) - a_t[node] * u1[node];
    next[node] = cur[node] + dt * u1[node] + 0.5 * dt * dt * rhs / (*a_now)[node];
  }
  set_boundary(next, 1);
  observe(1, next);
  prev.swap(cur);
  cur.swap(next);

  if (!frozen_) a_lo = a_hi;  // A at t = dt/2
  for (int level = 1; level < g.nt(); ++level) {
    load_source(level);
    if (!frozen_) {
      eval_a((level + 0.5) * dt, a_hi);
      eval_space(level * dt, sc_dyn);
    }
    for (std::size_t node : g.interior()) {
      cplx rhs = sc->sqrtg[node] * F[node] + apply_space(*sc, cur, node);
      if (frozen_) {
        next[node] = 2.0 * cur[node] - prev[node] + dt * dt * rhs / a_frozen_[node];
      } else {
        next[node] = cur[node] + (a_lo[node] / a_hi[node]) * (cur[node] - prev[node]) + dt * dt * rhs / a_hi[node];
      }
    }
    set_boundary(next, level + 1);
    observe(level + 1, next);
    prev.swap(cur);
    cur.swap(next);
    if (!frozen_) a_lo.swap(a_hi);
  }
}

ScalarField WaveOperator::residual(const ScalarField& u, const ScalarField* F) const {
  const auto& g = *grid_;
  const double dt = g.dt();
  ScalarField r = ScalarField::zeros(grid_);
  std::vector<double> a_lo, a_hi;
  SpaceCoeffs sc_dyn;
  const SpaceCoeffs* sc = &space_frozen_;
  for (int level = 1; level < g.nt(); ++level) {
    if (frozen_) {
      a_lo = a_frozen_;
      a_hi = a_frozen_;
    } else {
      eval_a((level - 0.5) * dt, a_lo);
      eval_a((level + 0.5) * dt, a_hi);
      eval_space(level * dt, sc_dyn);
      sc = &sc_dyn;
    }
    Slice prev = u.slice(level - 1), cur = u.slice(level), next = u.slice(level + 1);
    for (std::size_t node : g.interior()) {
      cplx time_part = (a_hi[node] * (next[node] - cur[node]) - a_lo[node] * (cur[node] - prev[node])) / (dt * dt);
      cplx box = (time_part - apply_space(*sc, cur, node)) / sc->sqrtg[node];
      r.at(level, node) = box - (F ? F->at(level, node) : cplx(0.0));
    }
  }
  return r;
}

ScalarField solve_linear(const WaveOperator& op, const ScalarField* F, const SigmaField& f, const Slice* u0,
                         const Slice* u1) {
  auto grid = op.grid();
  const std::size_t ns = grid->spatial_count();
  Slice zero(ns, cplx(0.0));
  ScalarField u = ScalarField::zeros(grid);
  WaveOperator::SourceFn src;
  if (F) {
    if (F->values.size() != grid->node_count()) throw ConfigError("source field has the wrong size");
    src = [F, ns](int level, Slice& out) {
      auto first = F->values.begin() + static_cast<std::ptrdiff_t>(level * ns);
      std::copy(first, first + static_cast<std::ptrdiff_t>(ns), out.begin());
    };
  }
  op.march(src, f, u0 ? *u0 : zero, u1 ? *u1 : zero, [&](int level, const Slice& s) {
    std::copy(s.begin(), s.end(), u.values.begin() + static_cast<std::ptrdiff_t>(level * ns));
  });
  if (!u.finite()) throw NumericalError("solution contains non-finite values");
  return u;
}

ScalarField solve_linear(MetricPtr metric, const ScalarField* F, const SigmaField& f, GridPtr grid, const Slice* u0,
                         const Slice* u1) {
  WaveOperator op(std::move(metric), std::move(grid));
  return solve_linear(op, F, f, u0, u1);
}

MetricPtr time_reflected(MetricPtr metric, double T) {
  if (metric->is_time_independent()) return metric;
  auto reflect = [T](const Vec& p) {
    Vec q = p;
    q(0) = T - p(0);
    return q;
  };
  auto m = std::make_shared<MetricField>(
      metric->spatial_dim(), metric->name() + ":reflected",
      [metric, reflect](const Vec& p) { return metric->beta(reflect(p)); },
      [metric, reflect](const Vec& p) { return metric->h(reflect(p)); });
  m->set_flat(metric->is_flat());
  m->fd_step = metric->fd_step;
  return m;
}

namespace {

SigmaField reverse_time(const SigmaField& f) {
  SigmaField r = SigmaField::zeros(f.grid);
  const int nt = f.grid->nt();
  for (int l = 0; l <= nt; ++l)
    for (std::size_t j = 0; j < f.grid->sigma_count(); ++j) r.at(l, j) = f.at(nt - l, j);
  return r;
}

ScalarField reverse_time(const ScalarField& u) {
  ScalarField r = ScalarField::zeros(u.grid);
  const int nt = u.grid->nt();
  for (int l = 0; l <= nt; ++l)
    for (std::size_t node = 0; node < u.grid->spatial_count(); ++node) r.at(l, node) = u.at(nt - l, node);
  return r;
}

}  // namespace

ScalarField solve_linear_backward(MetricPtr metric, const SigmaField& f, GridPtr grid, const ScalarField* F) {
  MetricPtr refl = time_reflected(std::move(metric), grid->T());
  WaveOperator op(refl, grid);
  SigmaField fr = reverse_time(f);
  if (F) {
    ScalarField Fr = reverse_time(*F);
    return reverse_time(solve_linear(op, &Fr, fr));
  }
  return reverse_time(solve_linear(op, nullptr, fr));
}

std::pair<ScalarField, SolveReport> solve_semilinear(const WaveOperator& op, const ScalarField& q, const SigmaField& f,
                                                     const SemilinearOptions& opt) {
  if (opt.m < 4) throw ConfigError("nonlinearity exponent m must be >= 4");
  if (q.values.size() != op.grid()->node_count()) throw ConfigError("potential has the wrong size");
  const double fmax = f.max_abs();
  if (fmax > opt.kappa)
    throw DivergenceError("boundary data too large: max |f| = " + format_double(fmax) + " exceeds kappa = " +
                          format_double(opt.kappa));
  SolveReport rep;
  rep.cfl = op.cfl();
  ScalarField u = solve_linear(op, nullptr, f);
  rep.iterations = 1;
  if (opt.record_energy) rep.energy_history.push_back(energy_norm(u, 1));
  const bool q_zero = q.max_abs() == 0.0;
  if (!q_zero) {
    const double eps = std::numeric_limits<double>::epsilon();
    int increases = 0;
    bool converged = false;
    ScalarField F = ScalarField::zeros(op.grid());
    while (rep.iterations < opt.max_iter) {
      for (std::size_t i = 0; i < F.values.size(); ++i) {
        cplx p = u.values[i];
        cplx pm = p;
        for (int k = 1; k < opt.m; ++k) pm *= p;
        F.values[i] = -q.values[i] * pm;
      }
      ScalarField un = solve_linear(op, &F, f);
      double diff = 0.0;
      for (std::size_t i = 0; i < un.values.size(); ++i) diff = std::max(diff, std::abs(un.values[i] - u.values[i]));
      ++rep.iterations;
      if (!rep.residual_history.empty() && diff > rep.residual_history.back()) {
        if (++increases >= 3)
          throw DivergenceError("Picard iteration diverges (data too large for the smallness regime)");
      } else {
        increases = 0;
      }
      rep.residual_history.push_back(diff);
      u = std::move(un);
      if (opt.record_energy) rep.energy_history.push_back(energy_norm(u, 1));
      if (diff <= opt.tol || diff <= 4.0 * eps * u.max_abs()) {
        converged = true;
        break;
      }
    }
    if (!converged)
      throw NumericalError("Picard iteration exceeded max_iter = " + std::to_string(opt.max_iter));
    rep.residual = rep.residual_history.back();
  }
  if (fmax > 0.0 && u.max_abs() > opt.c0 * fmax)
    throw NumericalError("solution bound max|u| <= c0 max|f| violated");
  return {std::move(u), rep};
}

std::pair<ScalarField, SolveReport> solve_semilinear(MetricPtr metric, const ScalarField& q, int m,
                                                     const SigmaField& f, GridPtr grid, double tol, int max_iter) {
  WaveOperator op(std::move(metric), std::move(grid));
  SemilinearOptions opt;
  opt.m = m;
  opt.tol = tol;
  opt.max_iter = max_iter;
  return solve_semilinear(op, q, f, opt);
}

TraceField normal_derivative(const MetricField& metric, const ScalarField& u) {
  const auto& g = *u.grid;
  const int n = g.spatial_dim();
  const auto& sig = g.sigma();
  TraceField out = TraceField::zeros(u.grid);
  std::vector<Mat> hinv;
  const bool frozen = metric.is_time_independent();
  if (frozen) {
    for (const auto& e : sig) hinv.push_back(metric.h(g.coords(0, e.node)).inverse());
  }
  for (int l = 0; l <= g.nt(); ++l) {
    const std::size_t base = static_cast<std::size_t>(l) * g.spatial_count();
    auto val = [&](std::size_t node) { return u.values[base + node]; };
    for (std::size_t j = 0; j < sig.size(); ++j) {
      const auto& e = sig[j];
      Mat hi = frozen ? hinv[j] : Mat(metric.h(g.coords(l, e.node)).inverse());
      CVec grad(n);
      for (int k = 0; k < n; ++k) {
        const std::size_t s = g.stride(k);
        const int i = g.index(e.node, k);
        const double h = g.dx(k);
        if (i == 0) {
          grad(k) = (-3.0 * val(e.node) + 4.0 * val(e.node + s) - val(e.node + 2 * s)) / (2.0 * h);
        } else if (i == g.nx(k)) {
          grad(k) = (3.0 * val(e.node) - 4.0 * val(e.node - s) + val(e.node - 2 * s)) / (2.0 * h);
        } else {
          grad(k) = (val(e.node + s) - val(e.node - s)) / (2.0 * h);
        }
      }
      cplx dn = 0.0;
      for (int k = 0; k < n; ++k) dn += hi(e.axis, k) * grad(k);
      out.at(l, j) = static_cast<double>(e.side) * dn / std::sqrt(hi(e.axis, e.axis));
    }
  }
  return out;
}

TraceField dn_map(const WaveOperator& op, const ScalarField& q, const SigmaField& f, const SemilinearOptions& opt) {
  auto [u, rep] = solve_semilinear(op, q, f, opt);
  return normal_derivative(op.metric(), u);
}

TraceField dn_map(MetricPtr metric, const ScalarField& q, int m, const SigmaField& f, GridPtr grid) {
  WaveOperator op(std::move(metric), std::move(grid));
  SemilinearOptions opt;
  opt.m = m;
  return dn_map(op, q, f, opt);
}

// ---------------------------------------------------------------------------
// Energy norms

namespace {

Slice spatial_derivative(const SpacetimeGrid& g, const Slice& u, int k) {
  Slice d(u.size());
  const std::size_t s = g.stride(k);
  const double h = g.dx(k);
  for (std::size_t node = 0; node < u.size(); ++node) {
    const int i = g.index(node, k);
    if (i == 0)
      d[node] = (-3.0 * u[node] + 4.0 * u[node + s] - u[node + 2 * s]) / (2.0 * h);
    else if (i == g.nx(k))
      d[node] = (3.0 * u[node] - 4.0 * u[node - s] + u[node - 2 * s]) / (2.0 * h);
    else
      d[node] = (u[node + s] - u[node - s]) / (2.0 * h);
  }
  return d;
}

double sobolev_norm(const SpacetimeGrid& g, const std::vector<double>& w, const Slice& u, int r) {
  auto sq = [&](const Slice& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += w[i] * std::norm(v[i]);
    return s;
  };
  double total = sq(u);
  if (r >= 1) {
    const int n = g.spatial_dim();
    std::vector<Slice> first;
    for (int k = 0; k < n; ++k) {
      first.push_back(spatial_derivative(g, u, k));
      total += sq(first.back());
    }
    if (r >= 2)
      for (int k = 0; k < n; ++k)
        for (int l = 0; l < n; ++l) total += sq(spatial_derivative(g, first[k], l));
  }
  return std::sqrt(total);
}

}  // namespace

double energy_norm(const ScalarField& u, int s) {
  if (s < 0 || s > 2) throw ConfigError("energy norm order must lie in [0, 2]");
  const auto& g = *u.grid;
  const int nt = g.nt();
  const double dt = g.dt();
  auto w = spatial_weights(g);
  const std::size_t ns = g.spatial_count();
  auto lvl = [&](int l, std::size_t node) { return u.values[static_cast<std::size_t>(l) * ns + node]; };
  double best = 0.0;
  Slice d1(ns), d2(ns);
  for (int l = 0; l <= nt; ++l) {
    Slice u0 = u.slice(l);
    double total = sobolev_norm(g, w, u0, s);
    if (s >= 1) {
      for (std::size_t node = 0; node < ns; ++node) {
        if (l == 0)
          d1[node] = (-3.0 * lvl(0, node) + 4.0 * lvl(1, node) - lvl(2, node)) / (2.0 * dt);
        else if (l == nt)
          d1[node] = (3.0 * lvl(nt, node) - 4.0 * lvl(nt - 1, node) + lvl(nt - 2, node)) / (2.0 * dt);
        else
          d1[node] = (lvl(l + 1, node) - lvl(l - 1, node)) / (2.0 * dt);
      }
      total += sobolev_norm(g, w, d1, s - 1);
    }
    if (s >= 2) {
      for (std::size_t node = 0; node < ns; ++node) {
        if (l == 0)
          d2[node] = (2.0 * lvl(0, node) - 5.0 * lvl(1, node) + 4.0 * lvl(2, node) - lvl(3, node)) / (dt * dt);
        else if (l == nt)
          d2[node] = (2.0 * lvl(nt, node) - 5.0 * lvl(nt - 1, node) + 4.0 * lvl(nt - 2, node) - lvl(nt - 3, node)) /
                     (dt * dt);
        else
          d2[node] = (lvl(l + 1, node) - 2.0 * lvl(l, node) + lvl(l - 1, node)) / (dt * dt);
      }
      total += sobolev_norm(g, w, d2, 0);
    }
    best = std::max(best, total);
  }
  return best;
}

// ---------------------------------------------------------------------------
// CSV

void write_field_csv(const ScalarField& u, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  const auto& g = *u.grid;
  const int n = g.spatial_dim();
  out << "t";
  for (int k = 0; k < n; ++k) out << ",x" << (k + 1);
  out << ",re,im\n";
  for (int l = 0; l <= g.nt(); ++l)
    for (std::size_t node = 0; node < g.spatial_count(); ++node) {
      Vec p = g.coords(l, node);
      for (int a = 0; a <= n; ++a) out << (a ? "," : "") << format_double(p(a));
      cplx z = u.at(l, node);
      out << ',' << format_double(z.real()) << ',' << format_double(z.imag()) << '\n';
    }
}

void write_trace_csv(const SigmaField& f, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  const auto& g = *f.grid;
  const int n = g.spatial_dim();
  out << "t";
  for (int k = 0; k < n; ++k) out << ",x" << (k + 1);
  out << ",axis,side,re,im\n";
  const auto& sig = g.sigma();
  for (int l = 0; l <= g.nt(); ++l)
    for (std::size_t j = 0; j < sig.size(); ++j) {
      Vec p = g.coords(l, sig[j].node);
      for (int a = 0; a <= n; ++a) out << (a ? "," : "") << format_double(p(a));
      cplx z = f.at(l, j);
      out << ',' << sig[j].axis << ',' << sig[j].side << ',' << format_double(z.real()) << ','
          << format_double(z.imag()) << '\n';
    }
}

}  // namespace qrecon
