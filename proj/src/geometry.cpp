#include "qrecon/geometry.hpp"

#include "ode.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace qrecon {

using detail::DynVec;

MetricField::MetricField(int n, std::string name, BetaFn beta, HFn h)
    : n_(n), name_(std::move(name)), beta_(std::move(beta)), h_(std::move(h)) {
  if (n < 1 || n > kMaxDim - 1) throw ConfigError("spatial dimension must be in [1, 3]");
}

void MetricField::set_derivatives(DBetaFn dbeta, DHFn dh) {
  dbeta_ = std::move(dbeta);
  dh_ = std::move(dh);
}

Mat MetricField::g(const Vec& p) const {
  Mat m = Mat::Zero(dim(), dim());
  m(0, 0) = -beta(p);
  m.bottomRightCorner(n_, n_) = h(p);
  return m;
}

Mat MetricField::g_inv(const Vec& p) const {
  Mat m = Mat::Zero(dim(), dim());
  m(0, 0) = -1.0 / beta(p);
  m.bottomRightCorner(n_, n_) = h(p).inverse();
  return m;
}

double MetricField::sqrt_abs_det(const Vec& p) const { return std::sqrt(beta(p) * h(p).determinant()); }

std::array<Mat, kMaxDim> MetricField::dg(const Vec& p) const {
  std::array<Mat, kMaxDim> out;
  if (dbeta_ && dh_) {
    Vec db = dbeta_(p);
    auto dh = dh_(p);
    for (int c = 0; c < dim(); ++c) {
      out[c] = Mat::Zero(dim(), dim());
      out[c](0, 0) = -db(c);
      out[c].bottomRightCorner(n_, n_) = dh[c];
    }
    return out;
  }
  for (int c = 0; c < dim(); ++c) {
    Vec pp = p, pm = p;
    pp(c) += fd_step;
    pm(c) -= fd_step;
    out[c] = (g(pp) - g(pm)) / (2.0 * fd_step);
  }
  return out;
}

void MetricField::check_invariants(const Vec& p) const {
  double b = beta(p);
  if (!(b > 0.0)) throw NumericalError("metric invariant violated: beta <= 0");
  Eigen::SelfAdjointEigenSolver<Mat> es(h(p));
  if (!(es.eigenvalues().minCoeff() > 0.0)) throw NumericalError("metric invariant violated: h not positive definite");
}

MetricPtr make_minkowski(int n) {
  auto m = std::make_shared<MetricField>(
      n, "minkowski", [](const Vec&) { return 1.0; }, [n](const Vec&) { return Mat(Mat::Identity(n, n)); });
  m->set_derivatives([n](const Vec&) { return Vec(Vec::Zero(n + 1)); },
                     [n](const Vec&) {
                       std::array<Mat, kMaxDim> d;
                       for (auto& x : d) x = Mat::Zero(n, n);
                       return d;
                     });
  m->set_flat(true);
  m->set_time_independent(true);
  return m;
}

MetricPtr make_perturbed_beta(int n, double c) {
  auto m = std::make_shared<MetricField>(
      n, "perturbed-beta",
      [n, c](const Vec& p) { return 1.0 + c * p.tail(n).squaredNorm(); },
      [n](const Vec&) { return Mat(Mat::Identity(n, n)); });
  m->set_derivatives(
      [n, c](const Vec& p) {
        Vec d = Vec::Zero(n + 1);
        d.tail(n) = 2.0 * c * p.tail(n);
        return d;
      },
      [n](const Vec&) {
        std::array<Mat, kMaxDim> d;
        for (auto& x : d) x = Mat::Zero(n, n);
        return d;
      });
  m->set_flat(c == 0.0);
  m->set_time_independent(true);
  return m;
}

MetricPtr make_time_dependent_h(int n, double c) {
  auto m = std::make_shared<MetricField>(
      n, "time-dependent-h", [](const Vec&) { return 1.0; },
      [n, c](const Vec& p) { return Mat((1.0 + c * p(0)) * Mat::Identity(n, n)); });
  m->set_derivatives([n](const Vec&) { return Vec(Vec::Zero(n + 1)); },
                     [n, c](const Vec&) {
                       std::array<Mat, kMaxDim> d;
                       for (auto& x : d) x = Mat::Zero(n, n);
                       d[0] = c * Mat::Identity(n, n);
                       return d;
                     });
  m->set_flat(c == 0.0);
  m->set_time_independent(c == 0.0);
  return m;
}

namespace {

struct GridTable {
  int dims = 0;                          // n + 1 axes (t, x...)
  std::vector<std::vector<double>> ax;   // sorted unique coordinates per axis
  std::vector<std::vector<double>> val;  // val[component][flat index]
  std::vector<std::size_t> stride;

  std::vector<double> interp(const Vec& p) const {
    std::vector<std::size_t> i0(dims);
    std::vector<double> w(dims);
    for (int a = 0; a < dims; ++a) {
      const auto& xs = ax[a];
      if (xs.size() == 1) {
        i0[a] = 0;
        w[a] = 0.0;
        continue;
      }
      double x = std::clamp(p(a), xs.front(), xs.back());
      auto it = std::upper_bound(xs.begin(), xs.end(), x);
      std::size_t k = static_cast<std::size_t>(std::distance(xs.begin(), it));
      k = std::clamp<std::size_t>(k, 1, xs.size() - 1) - 1;
      i0[a] = k;
      w[a] = (x - xs[k]) / (xs[k + 1] - xs[k]);
    }
    std::vector<double> out(val.size(), 0.0);
    const int corners = 1 << dims;
    for (int c = 0; c < corners; ++c) {
      double wt = 1.0;
      std::size_t idx = 0;
      bool skip = false;
      for (int a = 0; a < dims; ++a) {
        int bit = (c >> a) & 1;
        if (bit && ax[a].size() == 1) {
          skip = true;
          break;
        }
        wt *= bit ? w[a] : 1.0 - w[a];
        idx += (i0[a] + static_cast<std::size_t>(bit)) * stride[a];
      }
      if (skip || wt == 0.0) continue;
      for (std::size_t q = 0; q < val.size(); ++q) out[q] += wt * val[q][idx];
    }
    return out;
  }
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

MetricPtr load_grid_metric(const std::string& csv_path, int n) {
  std::ifstream in(csv_path);
  if (!in) throw ConfigError("cannot open metric CSV: " + csv_path);
  const int ncomp = 1 + n * (n + 1) / 2;
  const int ncols = n + 1 + ncomp;
  std::vector<std::vector<double>> rows;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (!header_seen) {
      header_seen = true;
      try {
        (void)std::stod(cells.at(0));
      } catch (...) {
        continue;  // header row
      }
    }
    if (static_cast<int>(cells.size()) != ncols)
      throw ConfigError("metric CSV row has " + std::to_string(cells.size()) + " columns, expected " +
                        std::to_string(ncols));
    std::vector<double> r;
    for (const auto& c : cells) r.push_back(std::stod(c));
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ConfigError("metric CSV has no data rows");
  auto table = std::make_shared<GridTable>();
  table->dims = n + 1;
  table->ax.resize(n + 1);
  for (int a = 0; a <= n; ++a) {
    std::set<double> u;
    for (const auto& r : rows) u.insert(r[a]);
    table->ax[a].assign(u.begin(), u.end());
  }
  table->stride.assign(n + 1, 1);
  std::size_t total = 1;
  for (int a = n; a >= 0; --a) {
    table->stride[a] = total;
    total *= table->ax[a].size();
  }
  if (total != rows.size()) throw ConfigError("metric CSV is not a full tensor grid");
  table->val.assign(ncomp, std::vector<double>(total, 0.0));
  for (const auto& r : rows) {
    std::size_t idx = 0;
    for (int a = 0; a <= n; ++a) {
      auto it = std::lower_bound(table->ax[a].begin(), table->ax[a].end(), r[a]);
      idx += static_cast<std::size_t>(std::distance(table->ax[a].begin(), it)) * table->stride[a];
    }
    for (int q = 0; q < ncomp; ++q) table->val[q][idx] = r[n + 1 + q];
  }
  auto beta = [table](const Vec& p) { return table->interp(p)[0]; };
  auto h = [table, n](const Vec& p) {
    auto v = table->interp(p);
    Mat m(n, n);
    int q = 1;
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) {
        m(i, j) = v[q];
        m(j, i) = v[q];
        ++q;
      }
    return m;
  };
  auto m = std::make_shared<MetricField>(n, "grid:" + csv_path, beta, h);
  m->set_time_independent(table->ax[0].size() == 1);
  return m;
}

Christoffel christoffel(const MetricField& metric, const Vec& p) {
  const int d = metric.dim();
  Mat ginv = metric.g_inv(p);
  auto dg = metric.dg(p);
  Christoffel gamma;
  for (int a = 0; a < d; ++a) gamma[a] = Mat::Zero(d, d);
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b)
      for (int c = b; c < d; ++c) {
        double s = 0.0;
        for (int e = 0; e < d; ++e) s += ginv(a, e) * (dg[b](e, c) + dg[c](e, b) - dg[e](b, c));
        gamma[a](b, c) = 0.5 * s;
        gamma[a](c, b) = 0.5 * s;
      }
  return gamma;
}

Christoffel christoffel(const MetricField& metric, const Event& e) { return christoffel(metric, e.coords()); }

Vec contract(const Christoffel& gamma, const Vec& u, const Vec& w) {
  const auto d = u.size();
  Vec out(d);
  for (Eigen::Index a = 0; a < d; ++a) out(a) = u.dot(gamma[a] * w);
  return out;
}

Riemann riemann(const MetricField& metric, const Vec& p, double step) {
  const int d = metric.dim();
  Christoffel g0 = christoffel(metric, p);
  std::array<Christoffel, kMaxDim> dgam;  // dgam[c][a](b, e) = d_c Gamma^a_{be}
  for (int c = 0; c < d; ++c) {
    Vec pp = p, pm = p;
    pp(c) += step;
    pm(c) -= step;
    Christoffel gp = christoffel(metric, pp), gm = christoffel(metric, pm);
    for (int a = 0; a < d; ++a) dgam[c][a] = (gp[a] - gm[a]) / (2.0 * step);
  }
  // up[a][b](c, dd) = R^a_{b c dd}
  std::array<std::array<Mat, kMaxDim>, kMaxDim> up;
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b) {
      up[a][b] = Mat::Zero(d, d);
      for (int c = 0; c < d; ++c)
        for (int dd = 0; dd < d; ++dd) {
          double r = dgam[c][a](dd, b) - dgam[dd][a](c, b);
          for (int e = 0; e < d; ++e) r += g0[a](c, e) * g0[e](dd, b) - g0[a](dd, e) * g0[e](c, b);
          up[a][b](c, dd) = r;
        }
    }
  Mat g = metric.g(p);
  Riemann low;
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b) {
      low[a][b] = Mat::Zero(d, d);
      for (int e = 0; e < d; ++e) low[a][b] += g(a, e) * up[e][b];
    }
  return low;
}

// ---------------------------------------------------------------------------
// Paths

namespace {

Vec hermite(double s0, double s1, const Vec& p0, const Vec& d0, const Vec& p1, const Vec& d1, double s) {
  double h = s1 - s0;
  if (h == 0.0) return p0;
  double u = (s - s0) / h;
  double u2 = u * u, u3 = u2 * u;
  double h00 = 2 * u3 - 3 * u2 + 1, h10 = u3 - 2 * u2 + u, h01 = -2 * u3 + 3 * u2, h11 = u3 - u2;
  return h00 * p0 + h10 * h * d0 + h01 * p1 + h11 * h * d1;
}

}  // namespace

std::size_t GeodesicPath::interval(double s) const {
  if (samples.size() < 2) return 0;
  auto it = std::upper_bound(samples.begin(), samples.end(), s,
                             [](double v, const PathSample& ps) { return v < ps.s; });
  std::size_t k = static_cast<std::size_t>(std::distance(samples.begin(), it));
  k = std::clamp<std::size_t>(k, 1, samples.size() - 1);
  return k - 1;
}

Vec GeodesicPath::position(double s) const {
  if (samples.size() == 1) return samples[0].p;
  std::size_t i = interval(s);
  const auto& a = samples[i];
  const auto& b = samples[i + 1];
  return hermite(a.s, b.s, a.p, a.v, b.p, b.v, s);
}

Vec GeodesicPath::velocity(double s) const {
  if (samples.size() == 1) return samples[0].v;
  std::size_t i = interval(s);
  const auto& a = samples[i];
  const auto& b = samples[i + 1];
  return hermite(a.s, b.s, a.v, a.a, b.v, b.a, s);
}

double GeodesicPath::parameter_at_time(double t) const {
  const bool increasing = samples.back().p(0) >= samples.front().p(0);
  auto key = [&](const PathSample& ps) { return increasing ? ps.p(0) : -ps.p(0); };
  double target = increasing ? t : -t;
  std::size_t lo = 0, hi = samples.size() - 1;
  if (target <= key(samples[lo])) return samples[lo].s;
  if (target >= key(samples[hi])) return samples[hi].s;
  while (hi - lo > 1) {
    std::size_t mid = (lo + hi) / 2;
    if (key(samples[mid]) <= target)
      lo = mid;
    else
      hi = mid;
  }
  double a = samples[lo].s, b = samples[hi].s;
  for (int it = 0; it < 200 && b - a > 1e-15 * (1.0 + std::abs(a)); ++it) {
    double mid = 0.5 * (a + b);
    double tm = position(mid)(0);
    if ((increasing ? tm : -tm) <= target)
      a = mid;
    else
      b = mid;
  }
  return 0.5 * (a + b);
}

GeodesicPath make_path(std::vector<PathSample> samples, CausalType type) {
  GeodesicPath path;
  path.causal_type = type;
  const std::size_t n = samples.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (samples[i].a.size() == 0) {
      std::size_t i0 = i == 0 ? 0 : i - 1;
      std::size_t i1 = i + 1 >= n ? n - 1 : i + 1;
      double ds = samples[i1].s - samples[i0].s;
      samples[i].a = ds > 0 ? Vec((samples[i1].v - samples[i0].v) / ds) : Vec(Vec::Zero(samples[i].v.size()));
    }
  }
  path.samples = std::move(samples);
  return path;
}

namespace {

struct GeodesicRhs {
  const MetricField* metric;
  int d;
  void operator()(double, const DynVec& y, DynVec& dy) const {
    Vec p = y.head(d), v = y.segment(d, d);
    Christoffel gam = christoffel(*metric, p);
    dy.resize(2 * d);
    dy.head(d) = v;
    dy.segment(d, d) = -contract(gam, v, v);
  }
};

void classify_exit(const Domain& dom, double slack, const Vec& p, ExitInfo& info) {
  double worst = 0.0;
  info.face = Face::none;
  auto consider = [&](double violation, Face f, int axis, int side) {
    if (violation > worst) {
      worst = violation;
      info.face = f;
      info.axis = axis;
      info.side = side;
    }
  };
  consider(-slack - p(0), Face::initial, -1, 0);
  consider(p(0) - dom.T - slack, Face::final, -1, 0);
  for (int k = 0; k < dom.spatial_dim(); ++k) {
    consider(dom.lower(k) - slack - p(k + 1), Face::lateral, k, -1);
    consider(p(k + 1) - dom.upper(k) - slack, Face::lateral, k, +1);
  }
}

}  // namespace

GeodesicPath integrate_geodesic(const MetricField& metric, const Event& start, const Vec& v0, double s_max,
                                const GeodesicOptions& opt) {
  const int d = metric.dim();
  if (v0.size() != d) throw ConfigError("initial velocity has wrong dimension");
  if (v0.norm() == 0.0) throw NumericalError("initial velocity is zero");
  Vec p0 = start.coords();
  Mat g0 = metric.g(p0);
  const double norm0 = v0.dot(g0 * v0);
  const double scale = std::max(1.0, v0.squaredNorm());
  if (norm0 > 1e-10 * scale) throw NumericalError("initial velocity is not causal");
  GeodesicPath path;
  path.causal_type = std::abs(norm0) <= 1e-10 * scale ? CausalType::null : CausalType::timelike;

  GeodesicRhs rhs{&metric, d};
  detail::OdeRhs f = [&rhs](double s, const DynVec& y, DynVec& dy) { rhs(s, y, dy); };
  auto make_sample = [&](double s, const DynVec& y) {
    PathSample ps;
    ps.s = s;
    ps.p = y.head(d);
    ps.v = y.segment(d, d);
    ps.a = -contract(christoffel(metric, ps.p), ps.v, ps.v);
    return ps;
  };
  auto inside = [&](const DynVec& y) {
    return !opt.stop_domain || opt.stop_domain->contains(y.head(d), opt.stop_slack);
  };

  DynVec y(2 * d);
  y.head(d) = p0;
  y.segment(d, d) = v0;
  const double dir = s_max >= 0 ? 1.0 : -1.0;
  double s = 0.0;
  double h = dir * std::min(opt.h0, std::abs(s_max));
  std::vector<PathSample> out;
  out.push_back(make_sample(0.0, y));
  int steps = 0;
  while (dir * (s_max - s) > 1e-14) {
    if (++steps > opt.max_steps) throw NumericalError("geodesic integration exceeded max steps");
    if (std::abs(h) < opt.h_min) throw NumericalError("geodesic step size underflow");
    if (dir * (s + h - s_max) > 0.0) h = s_max - s;
    double err = 0.0;
    DynVec yn = detail::dopri_step(f, s, y, h, opt.tol, opt.tol, err);
    if (err > 1.0) {
      h = detail::next_step(h, err);
      continue;
    }
    if (!inside(yn)) {
      // Bisect on the step length for the boundary crossing.
      double lo = 0.0, hi = h;
      DynVec y_hi = yn;
      for (int it = 0; it < 80 && std::abs(hi - lo) > 1e-14 * (1.0 + std::abs(s)); ++it) {
        double mid = 0.5 * (lo + hi);
        double e2 = 0.0;
        DynVec ym = detail::dopri_step(f, s, y, mid, opt.tol, opt.tol, e2);
        if (inside(ym)) {
          lo = mid;
        } else {
          hi = mid;
          y_hi = ym;
        }
      }
      if (std::abs(hi) < 1e-12 && out.size() == 1)
        throw OutsideDomainError("geodesic exits immediately (start on boundary moving outward)");
      s += hi;
      y = y_hi;
      out.push_back(make_sample(s, y));
      path.exit.exited = true;
      path.exit.s = s;
      path.exit.p = y.head(d);
      classify_exit(*opt.stop_domain, opt.stop_slack, path.exit.p, path.exit);
      break;
    }
    s += h;
    y = std::move(yn);
    out.push_back(make_sample(s, y));
    h = detail::next_step(h, err);
    if (std::abs(h) > opt.h_max) h = dir * opt.h_max;
  }
  double drift = 0.0;
  for (const auto& ps : out) drift = std::max(drift, std::abs(ps.v.dot(metric.g(ps.p) * ps.v) - norm0));
  path.max_norm_drift = drift;
  if (drift > opt.drift_tol * scale)
    throw NumericalError("geodesic norm drift " + format_double(drift) + " above tolerance");
  if (dir < 0) std::reverse(out.begin(), out.end());
  path.samples = std::move(out);
  return path;
}

// ---------------------------------------------------------------------------
// Frames

Mat pseudo_eta(int n) {
  Mat eta = Mat::Identity(n + 1, n + 1);
  eta(0, 0) = 0.0;
  eta(1, 1) = 0.0;
  eta(0, 1) = -2.0;
  eta(1, 0) = -2.0;
  return eta;
}

Mat frame_gram(const MetricField& metric, const Frame& f) {
  const int d = static_cast<int>(f.e.size());
  Mat g = metric.g(f.p);
  Mat out(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) out(i, j) = f.e[i].dot(g * f.e[j]);
  return out;
}

double frame_defect(const MetricField& metric, const Frame& f) {
  return (frame_gram(metric, f) - pseudo_eta(metric.spatial_dim())).cwiseAbs().maxCoeff();
}

Vec unit_time_normal(const MetricField& metric, const Vec& p) {
  Vec u = Vec::Zero(metric.dim());
  u(0) = 1.0 / std::sqrt(metric.beta(p));
  return u;
}

std::vector<Vec> spatial_basis(const MetricField& metric, const Vec& p) {
  const int n = metric.spatial_dim();
  Mat h = metric.h(p);
  std::vector<Vec> basis;
  for (int k = 0; k < n; ++k) {
    Vec w = Vec::Zero(n);
    w(k) = 1.0;
    for (const auto& b : basis) w -= b.dot(h * w) * b;
    w /= std::sqrt(w.dot(h * w));
    basis.push_back(w);
  }
  return basis;
}

Vec null_vector(const MetricField& metric, const Vec& p, const Vec& spatial_dir, TimeDirection dir) {
  const int n = metric.spatial_dim();
  Mat h = metric.h(p);
  double nrm = std::sqrt(spatial_dir.dot(h * spatial_dir));
  if (!(nrm > 0.0)) throw NumericalError("zero spatial direction");
  Vec v = unit_time_normal(metric, p);
  if (dir == TimeDirection::past) v = -v;
  v.tail(n) = spatial_dir / nrm;
  return v;
}

Frame build_frame(const MetricField& metric, const Event& e, const Vec& null_dir, double tol) {
  const int n = metric.spatial_dim();
  Vec p = e.coords();
  Mat g = metric.g(p);
  const double nn = null_dir.dot(g * null_dir);
  if (std::abs(nn) > tol * std::max(1.0, null_dir.squaredNorm()))
    throw NumericalError("frame direction is not null (g(e0,e0) = " + format_double(nn) + ")");
  if (!(null_dir(0) > 0.0)) throw NumericalError("frame direction is not future-directed");
  Vec u = unit_time_normal(metric, p);
  const double a = -null_dir.dot(g * u);
  Vec nu = null_dir / a - u;  // spatial, h-unit
  Frame f;
  f.p = p;
  f.e.push_back(null_dir);
  f.e.push_back((u - nu) / a);
  // Orthonormal completion of the spatial complement of nu.
  Mat h = metric.h(p);
  std::vector<Vec> spatial{Vec(nu.tail(n))};
  for (int k = 0; k < n && static_cast<int>(spatial.size()) < n; ++k) {
    Vec w = Vec::Zero(n);
    w(k) = 1.0;
    for (const auto& b : spatial) w -= b.dot(h * w) * b;
    double wn = std::sqrt(std::max(0.0, w.dot(h * w)));
    if (wn < 1e-6) continue;
    w /= wn;
    spatial.push_back(w);
  }
  for (std::size_t k = 1; k < spatial.size(); ++k) {
    Vec ek = Vec::Zero(n + 1);
    ek.tail(n) = spatial[k];
    f.e.push_back(ek);
  }
  double defect = frame_defect(metric, f);
  if (defect > std::max(tol, 1e-9)) throw NumericalError("frame identities violated by " + format_double(defect));
  return f;
}

std::vector<Vec> FrameField::at(double s_query) const {
  const std::size_t m = s.size();
  if (m == 1) return e[0];
  auto it = std::upper_bound(s.begin(), s.end(), s_query);
  std::size_t k = static_cast<std::size_t>(std::distance(s.begin(), it));
  k = std::clamp<std::size_t>(k, 1, m - 1) - 1;
  std::vector<Vec> out(e[k].size());
  for (std::size_t j = 0; j < out.size(); ++j)
    out[j] = hermite(s[k], s[k + 1], e[k][j], de[k][j], e[k + 1][j], de[k + 1][j], s_query);
  return out;
}

FrameField parallel_transport(const MetricField& metric, const GeodesicPath& path, const Frame& f0, double s_start,
                              double tol) {
  const int d = metric.dim();
  const int n = d - 1;
  if (static_cast<int>(f0.e.size()) != d) throw ConfigError("frame has wrong size");
  // State: position, velocity (= e0), e1..en.
  detail::OdeRhs f = [&](double, const DynVec& y, DynVec& dy) {
    Vec p = y.head(d);
    Christoffel gam = christoffel(metric, p);
    dy.resize(y.size());
    Vec v = y.segment(d, d);
    dy.head(d) = v;
    for (int k = 0; k <= n; ++k) {
      Vec ek = y.segment(d + k * d, d);
      dy.segment(d + k * d, d) = -contract(gam, v, ek);
    }
  };
  DynVec y0(d + d * d);
  y0.head(d) = path.position(s_start);
  y0.segment(d, d) = path.velocity(s_start);
  if ((f0.e[0] - Vec(y0.segment(d, d))).norm() > 1e-6 * (1.0 + f0.e[0].norm()))
    throw NumericalError("frame e0 does not match the path velocity");
  for (int k = 1; k <= n; ++k) y0.segment(d + k * d, d) = f0.e[k];

  FrameField field;
  const std::size_t m = path.samples.size();
  field.s.resize(m);
  field.e.assign(m, {});
  field.de.assign(m, {});
  auto store = [&](std::size_t i, const DynVec& y) {
    Vec p = y.head(d);
    Christoffel gam = christoffel(metric, p);
    Vec v = y.segment(d, d);
    field.s[i] = path.samples[i].s;
    field.e[i].resize(d);
    field.de[i].resize(d);
    for (int k = 0; k <= n; ++k) {
      field.e[i][k] = y.segment(d + k * d, d);
      field.de[i][k] = -contract(gam, v, field.e[i][k]);
    }
    Frame fr{p, field.e[i]};
    field.max_defect = std::max(field.max_defect, frame_defect(metric, fr));
  };
  const double ode_tol = 1e-12;
  // Forward sweep.
  std::size_t first_fwd = path.interval(s_start);
  if (path.samples[first_fwd].s < s_start) ++first_fwd;
  {
    DynVec y = y0;
    double s = s_start;
    for (std::size_t i = first_fwd; i < m; ++i) {
      y = detail::integrate_to(f, s, path.samples[i].s, y, ode_tol);
      s = path.samples[i].s;
      store(i, y);
    }
  }
  {
    DynVec y = y0;
    double s = s_start;
    for (std::size_t i = first_fwd; i-- > 0;) {
      y = detail::integrate_to(f, s, path.samples[i].s, y, ode_tol);
      s = path.samples[i].s;
      store(i, y);
    }
  }
  if (field.max_defect > tol)
    throw NumericalError("parallel transport drift " + format_double(field.max_defect) + " above tolerance");
  return field;
}

FrameField parallel_transport(const MetricField& metric, const GeodesicPath& path, const Frame& f0) {
  return parallel_transport(metric, path, f0, path.s_min());
}

// ---------------------------------------------------------------------------
// Fermi chart

FermiChart::FermiChart(MetricPtr metric, GeodesicPath path, FrameField frames, double delta)
    : metric_(std::move(metric)),
      path_(std::move(path)),
      frames_(std::move(frames)),
      delta_(delta),
      n_(metric_->spatial_dim()),
      affine_(metric_->is_flat()) {
  if (!(delta > 0.0)) throw ConfigError("tube radius must be positive");
  if (affine_) {
    Mat basis(n_ + 1, n_ + 1);
    auto e = frames_.at(0.0);
    for (int k = 0; k <= n_; ++k) basis.col(k) = e[k];
    affine_basis_inv_ = basis.inverse();
  }
}

Vec FermiChart::exp_map(const Vec& base, const Vec& v) const {
  const int d = n_ + 1;
  if (v.norm() == 0.0) return base;
  GeodesicRhs rhs{metric_.get(), d};
  detail::OdeRhs f = [&rhs](double s, const DynVec& y, DynVec& dy) { rhs(s, y, dy); };
  DynVec y(2 * d);
  y.head(d) = base;
  y.segment(d, d) = v;
  y = detail::integrate_to(f, 0.0, 1.0, y, 1e-13, 0.25, 0.25);
  return y.head(d);
}

Vec FermiChart::forward(double s, const Vec& y) const {
  Vec base = path_.position(s);
  auto e = frames_.at(s);
  Vec v = Vec::Zero(n_ + 1);
  for (int k = 1; k <= n_; ++k) v += y(k - 1) * e[k];
  if (affine_) return base + v;
  return exp_map(base, v);
}

Mat FermiChart::jacobian(double s, const Vec& y) const {
  Mat J(n_ + 1, n_ + 1);
  if (affine_) {
    auto e = frames_.at(s);
    J.col(0) = path_.velocity(s);
    for (int k = 1; k <= n_; ++k) J.col(k) = e[k];
    return J;
  }
  const double hs = 1e-5;
  J.col(0) = (forward(s + hs, y) - forward(s - hs, y)) / (2 * hs);
  for (int k = 0; k < n_; ++k) {
    Vec yp = y, ym = y;
    yp(k) += hs;
    ym(k) -= hs;
    J.col(k + 1) = (forward(s, yp) - forward(s, ym)) / (2 * hs);
  }
  return J;
}

std::array<Mat, kMaxDim> FermiChart::second_derivatives(double s, const Vec& y) const {
  const int d = n_ + 1;
  std::array<Mat, kMaxDim> out;
  for (int a = 0; a < d; ++a) out[a] = Mat::Zero(d, d);
  if (affine_) return out;
  const double h = 1e-4;
  // Differentiate the Jacobian columns.
  for (int b = 0; b < d; ++b) {
    double sp = s, sm = s;
    Vec yp = y, ym = y;
    if (b == 0) {
      sp += h;
      sm -= h;
    } else {
      yp(b - 1) += h;
      ym(b - 1) -= h;
    }
    Mat dJ = (jacobian(sp, yp) - jacobian(sm, ym)) / (2 * h);
    for (int a = 0; a < d; ++a)
      for (int c = 0; c < d; ++c) out[a](b, c) = dJ(a, c);
  }
  for (int a = 0; a < d; ++a) out[a] = 0.5 * (out[a] + out[a].transpose()).eval();
  return out;
}

Mat FermiChart::pulled_back_metric(double s, const Vec& y) const {
  Mat J = jacobian(s, y);
  return J.transpose() * metric_->g(forward(s, y)) * J;
}

double FermiChart::initial_s_guess(const Vec& p) const {
  double best = path_.samples.front().s;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& ps : path_.samples) {
    double dd = (ps.p - p).squaredNorm();
    if (dd < best_d) {
      best_d = dd;
      best = ps.s;
    }
  }
  return best;
}

ChartPoint FermiChart::inverse(const Vec& p) const {
  ChartPoint cp;
  const int d = n_ + 1;
  if (affine_) {
    Vec c = affine_basis_inv_ * (p - path_.position(0.0));
    cp.s = c(0);
    cp.y = c.tail(n_);
    cp.inside = cp.s >= s_min() && cp.s <= s_max() && cp.y.norm() < delta_;
    return cp;
  }
  double s = initial_s_guess(p);
  Vec y = Vec::Zero(n_);
  // Cheap linearised iteration first.
  for (int it = 0; it < 4; ++it) {
    auto e = frames_.at(s);
    Mat B(d, d);
    B.col(0) = path_.velocity(s);
    for (int k = 1; k <= n_; ++k) B.col(k) = e[k];
    Vec c = B.partialPivLu().solve(Vec(p - path_.position(s)));
    s = std::clamp(s + c(0), s_min(), s_max());
    y = c.tail(n_);
  }
  if (y.norm() > 2.0 * delta_) {
    cp.s = s;
    cp.y = y;
    return cp;
  }
  Vec x(d);
  x(0) = s;
  x.tail(n_) = y;
  Vec r = forward(x(0), x.tail(n_)) - p;
  bool ok = false;
  for (int it = 0; it < 30; ++it) {
    if (r.norm() <= 1e-12 * (1.0 + p.norm())) {
      ok = true;
      break;
    }
    Mat J = jacobian(x(0), x.tail(n_));
    Vec dx = -J.partialPivLu().solve(r);
    double lam = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 12; ++ls) {
      Vec xn = x + lam * dx;
      xn(0) = std::clamp(xn(0), s_min(), s_max());
      Vec rn = forward(xn(0), xn.tail(n_)) - p;
      if (rn.norm() < r.norm()) {
        x = xn;
        r = rn;
        improved = true;
        break;
      }
      lam *= 0.5;
    }
    if (!improved) break;
  }
  if (!ok && r.norm() <= 1e-9 * (1.0 + p.norm())) ok = true;
  cp.s = x(0);
  cp.y = x.tail(n_);
  cp.inside = ok && cp.s > s_min() && cp.s < s_max() && cp.y.norm() < delta_;
  return cp;
}

void FermiChart::check_injectivity(int samples_per_axis) const {
  const int k = std::max(3, samples_per_axis);
  for (int i = 0; i < k; ++i) {
    double s = s_min() + (s_max() - s_min()) * (i + 0.5) / k;
    double det0 = jacobian(s, Vec::Zero(n_)).determinant();
    if (std::abs(det0) < 1e-12) throw NumericalError("chart Jacobian degenerate on the axis");
    const int m = n_ == 1 ? k : std::max(3, k / 2);
    std::vector<Vec> ys;
    if (n_ == 1) {
      for (int j = 0; j < m; ++j) ys.push_back(Vec::Constant(1, delta_ * (-1.0 + 2.0 * (j + 0.5) / m)));
    } else {
      Vec y(n_);
      std::vector<int> idx(n_, 0);
      while (true) {
        for (int a = 0; a < n_; ++a) y(a) = delta_ * (-1.0 + 2.0 * (idx[a] + 0.5) / m);
        if (y.norm() < delta_) ys.push_back(y);
        int a = 0;
        while (a < n_ && ++idx[a] == m) idx[a++] = 0;
        if (a == n_) break;
      }
    }
    for (const auto& y : ys) {
      double det = jacobian(s, y).determinant();
      if (det * det0 <= 0.0 || std::abs(det) < 1e-3 * std::abs(det0))
        throw NumericalError("tube radius too large: chart is not injective on the tube");
    }
  }
}

ChartPtr fermi_chart(MetricPtr metric, const GeodesicPath& path, const Frame& f0, double delta, double s_start) {
  FrameField frames = parallel_transport(*metric, path, f0, s_start);
  auto chart = std::make_shared<FermiChart>(metric, path, std::move(frames), delta);
  chart->check_injectivity();
  return chart;
}

ChartPtr trace_chart(MetricPtr metric, const Domain& domain, const Event& base, const Vec& null_dir, double delta,
                     double margin) {
  GeodesicOptions opt;
  opt.stop_domain = domain;
  opt.stop_slack = margin;
  const double span = 50.0 * (domain.T + (domain.upper - domain.lower).norm() + 1.0);
  GeodesicPath fwd = integrate_geodesic(*metric, base, null_dir, span, opt);
  GeodesicPath bwd = integrate_geodesic(*metric, base, null_dir, -span, opt);
  std::vector<PathSample> merged = bwd.samples;
  merged.pop_back();  // s = 0 duplicated
  merged.insert(merged.end(), fwd.samples.begin(), fwd.samples.end());
  GeodesicPath path = make_path(std::move(merged), fwd.causal_type);
  path.max_norm_drift = std::max(fwd.max_norm_drift, bwd.max_norm_drift);
  Frame f0 = build_frame(*metric, base, null_dir);
  return fermi_chart(std::move(metric), path, f0, delta, 0.0);
}

// ---------------------------------------------------------------------------
// Boundary optimal geodesics

std::optional<BoundaryHit> trace_to_boundary(const MetricField& metric, const Domain& domain, const Event& x,
                                             const Vec& v, const GeodesicOptions& opt_in) {
  GeodesicOptions opt = opt_in;
  opt.stop_domain = domain;
  opt.stop_slack = 0.0;
  const double span = 50.0 * (domain.T + (domain.upper - domain.lower).norm() + 1.0);
  GeodesicPath path = integrate_geodesic(metric, x, v, span, opt);
  if (!path.exit.exited || path.exit.face != Face::lateral) return std::nullopt;
  const Vec& pe = path.exit.p;
  if (!(pe(0) > 0.0 && pe(0) < domain.T)) return std::nullopt;
  BoundaryHit hit;
  hit.initial_velocity = v;
  hit.axis = path.exit.axis;
  hit.side = path.exit.side;
  // Snap the boundary coordinate exactly onto the face.
  Vec pb = pe;
  pb(hit.axis + 1) = hit.side < 0 ? domain.lower(hit.axis) : domain.upper(hit.axis);
  hit.boundary_event = Event::from_coords(pb);
  const int n = metric.spatial_dim();
  Vec w = path.samples.back().v.tail(n);
  Mat h = metric.h(pb);
  Mat hinv = h.inverse();
  double wn = std::sqrt(w.dot(h * w));
  double normal = std::abs(w(hit.axis)) / (std::sqrt(hinv(hit.axis, hit.axis)) * wn);
  hit.angle = std::asin(std::clamp(normal, 0.0, 1.0));
  hit.transversal = hit.angle >= kTransversalityThreshold;
  hit.path = std::move(path);
  return hit;
}

namespace {

Vec direction_from_angles(const MetricField& metric, const Vec& p, const std::vector<double>& ang) {
  const int n = metric.spatial_dim();
  auto basis = spatial_basis(metric, p);
  Vec w = Vec::Zero(n);
  if (n == 2) {
    w = std::cos(ang[0]) * basis[0] + std::sin(ang[0]) * basis[1];
  } else if (n == 3) {
    double th = ang[0], ph = ang[1];
    w = std::sin(th) * std::cos(ph) * basis[0] + std::sin(th) * std::sin(ph) * basis[1] + std::cos(th) * basis[2];
  }
  return w;
}

}  // namespace

BoundaryHit boundary_optimal_geodesic(const MetricField& metric, const Domain& domain, const Event& x,
                                      TimeDirection direction, double angular_resolution,
                                      const GeodesicOptions& opt) {
  Vec p = x.coords();
  if (!domain.contains(p) || p(0) <= 0.0 || p(0) >= domain.T)
    throw OutsideDomainError("event is not interior to [0,T] x Omega");
  for (int k = 0; k < domain.spatial_dim(); ++k)
    if (p(k + 1) <= domain.lower(k) || p(k + 1) >= domain.upper(k))
      throw OutsideDomainError("event is not interior to [0,T] x Omega");
  const int n = metric.spatial_dim();
  const double sign = direction == TimeDirection::future ? 1.0 : -1.0;
  // Objective: boundary time, minimised for future, maximised for past.
  auto score = [&](const BoundaryHit& h) { return sign * h.boundary_event.t; };
  auto try_dir = [&](const Vec& w) -> std::optional<BoundaryHit> {
    return trace_to_boundary(metric, domain, x, null_vector(metric, p, w, direction), opt);
  };
  std::optional<BoundaryHit> best;
  auto consider = [&](std::optional<BoundaryHit> h) {
    if (h && (!best || score(*h) < score(*best))) best = std::move(h);
  };
  if (n == 1) {
    consider(try_dir(Vec::Constant(1, 1.0)));
    consider(try_dir(Vec::Constant(1, -1.0)));
  } else if (n == 2) {
    const double res = std::max(1e-4, angular_resolution);
    const int m = std::max(8, static_cast<int>(std::ceil(2.0 * std::numbers::pi / res)));
    double best_theta = 0.0;
    for (int i = 0; i < m; ++i) {
      double th = 2.0 * std::numbers::pi * i / m;
      auto h = try_dir(direction_from_angles(metric, p, {th}));
      if (h && (!best || score(*h) < score(*best))) {
        best = std::move(h);
        best_theta = th;
      }
    }
    if (best) {
      // Golden-section refinement around the best sampled direction.
      const double step = 2.0 * std::numbers::pi / m;
      double a = best_theta - step, b = best_theta + step;
      const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
      auto f = [&](double th) {
        auto h = try_dir(direction_from_angles(metric, p, {th}));
        return h ? score(*h) : std::numeric_limits<double>::infinity();
      };
      double c = b - gr * (b - a), d = a + gr * (b - a);
      double fc = f(c), fd = f(d);
      for (int it = 0; it < 60 && b - a > 1e-10; ++it) {
        if (fc < fd) {
          b = d;
          d = c;
          fd = fc;
          c = b - gr * (b - a);
          fc = f(c);
        } else {
          a = c;
          c = d;
          fc = fd;
          d = a + gr * (b - a);
          fd = f(d);
        }
      }
      consider(try_dir(direction_from_angles(metric, p, {0.5 * (a + b)})));
    }
  } else {
    const double res = std::max(1e-3, angular_resolution);
    const int m = std::max(32, static_cast<int>(std::ceil(4.0 * std::numbers::pi / (res * res))));
    std::vector<double> best_ang{0.0, 0.0};
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < m; ++i) {
      double z = 1.0 - 2.0 * (i + 0.5) / m;
      std::vector<double> ang{std::acos(z), golden * i};
      auto h = try_dir(direction_from_angles(metric, p, ang));
      if (h && (!best || score(*h) < score(*best))) {
        best = std::move(h);
        best_ang = ang;
      }
    }
    if (best) {
      double step = res;
      for (int it = 0; it < 40 && step > 1e-8; ++it) {
        bool moved = false;
        for (int a = 0; a < 2; ++a)
          for (double sgn : {-1.0, 1.0}) {
            auto ang = best_ang;
            ang[a] += sgn * step;
            auto h = try_dir(direction_from_angles(metric, p, ang));
            if (h && score(*h) < score(*best)) {
              best = std::move(h);
              best_ang = ang;
              moved = true;
            }
          }
        if (!moved) step *= 0.5;
      }
    }
  }
  if (!best) throw OutsideDomainError("no null direction reaches the lateral boundary before {t=0} or {t=T}");
  return *best;
}

// ---------------------------------------------------------------------------
// Intersections

std::vector<Event> intersections(const GeodesicPath& g1, const GeodesicPath& g2, double spatial_tol, int cap,
                                 int resample) {
  auto trange = [](const GeodesicPath& g) {
    double a = g.samples.front().p(0), b = g.samples.back().p(0);
    return std::make_pair(std::min(a, b), std::max(a, b));
  };
  auto [a1, b1] = trange(g1);
  auto [a2, b2] = trange(g2);
  const double lo = std::max(a1, a2), hi = std::min(b1, b2);
  std::vector<Event> out;
  if (!(hi > lo)) return out;
  const int n = static_cast<int>(g1.samples.front().p.size()) - 1;
  auto spatial = [n](const GeodesicPath& g, double t) -> Vec { return g.position(g.parameter_at_time(t)).tail(n); };
  auto dist = [&](double t) { return (spatial(g1, t) - spatial(g2, t)).norm(); };
  const int m = std::max(16, resample);
  std::vector<double> ts(m + 1), ds(m + 1);
  for (int i = 0; i <= m; ++i) {
    ts[i] = lo + (hi - lo) * i / m;
    ds[i] = dist(ts[i]);
  }
  int run = 0;
  for (int i = 0; i <= m; ++i) {
    run = ds[i] < spatial_tol ? run + 1 : 0;
    if (run >= 3 && (ts[i] - ts[i - run + 1]) > 10.0 * spatial_tol)
      throw NumericalError("degenerate intersection: the paths coincide on an interval");
  }
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int i = 0; i <= m; ++i) {
    bool left = i == 0 || ds[i] <= ds[i - 1];
    bool right = i == m || ds[i] < ds[i + 1];
    if (!(left && right)) continue;
    double a = ts[std::max(0, i - 1)], b = ts[std::min(m, i + 1)];
    double c = b - gr * (b - a), d = a + gr * (b - a);
    double fc = dist(c), fd = dist(d);
    for (int it = 0; it < 200 && b - a > 1e-14 * (1.0 + std::abs(a)); ++it) {
      if (fc < fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - gr * (b - a);
        fc = dist(c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + gr * (b - a);
        fd = dist(d);
      }
    }
    double tstar = 0.5 * (a + b);
    double dstar = dist(tstar);
    if (dstar > spatial_tol) continue;
    if (!out.empty() && std::abs(out.back().t - tstar) < 1e-9) continue;
    Vec mid = 0.5 * (spatial(g1, tstar) + spatial(g2, tstar));
    out.emplace_back(tstar, mid);
  }
  std::sort(out.begin(), out.end(), [](const Event& x, const Event& y) { return x.t < y.t; });
  if (static_cast<int>(out.size()) > cap)
    throw IntersectionBoundError("found " + std::to_string(out.size()) +
                                 " intersection points, exceeding the intersection bound P = " + std::to_string(cap));
  return out;
}

}  // namespace qrecon
