#include "qrecon/reconstruction.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace qrecon {

Rational sigma(int s, int m, int n) {
  if (m < 4) throw ConfigError("sigma requires m >= 4");
  if (n < 1) throw ConfigError("sigma requires n >= 1");
  if (!(2 * (s + 1) > n + 1)) throw ConfigError("sigma requires s + 1 > (n + 1) / 2");
  const long long mm = m, ss = s, nn = n;
  return Rational(8 * (mm - 1), 2 * mm * (mm - 1) * (8 * ss - nn + 13) + 2 * mm - 1);
}

// ---------------------------------------------------------------------------
// Parameter choice

namespace {

double s_hat_of(int m, double s, int n) { return (2.0 * m - 1.0) * (s - n / 8.0 + 13.0 / 8.0); }

void check_param_domain(int m, double delta, double M) {
  if (m < 2) throw ConfigError("m must be at least 2");
  if (!(M > 0.0)) throw ConfigError("M must be positive");
  if (!(delta > 0.0 && delta < M)) throw ConfigError("delta must lie in (0, M)");
}

}  // namespace

double objective(int m, double s, int n, double delta, double M, double kappa0, double eps, double tau) {
  const double gamma0 = std::pow(kappa0, 2 * m - 1) / M;
  return 2.0 / std::sqrt(tau) + gamma0 * delta / m * std::pow(eps, -m) +
         std::pow(eps, m - 1) * std::pow(tau, s_hat_of(m, s, n)) / (m - 1);
}

OptimalParams critical_point(int m, double s, int n, double delta, double M, double kappa0) {
  check_param_domain(m, delta, M);
  OptimalParams out;
  out.kappa0 = kappa0;
  out.s_hat = s_hat_of(m, s, n);
  out.gamma0 = std::pow(kappa0, 2 * m - 1) / M;
  const double sh = out.s_hat;
  const double den = 2.0 * sh * m + 2.0 * m - 1.0;
  const double ratio = (m - 1.0) / sh;
  // Work with logarithms: gamma0 * delta underflows for small kappa0.
  const double log_g = (2 * m - 1) * std::log(kappa0) - std::log(M) + std::log(delta);
  out.tau = std::exp(2.0 * (2 * m - 1) / den * std::log(ratio) - 2.0 * (m - 1) / den * log_g);
  out.eps = std::exp(-2.0 * sh / den * std::log(ratio) +
                     (4.0 * sh * m + 2.0 * m - 1.0 - 2.0 * sh) / (den * (2 * m - 1)) * log_g);
  return out;
}

OptimalParams optimal_params(int m, double s, int n, double delta, double M, double kappa, double tau0) {
  check_param_domain(m, delta, M);
  if (!(kappa > 0.0 && kappa < 1.0)) throw ConfigError("kappa must lie in (0, 1)");
  if (!(tau0 >= 1.0)) throw ConfigError("tau0 must be at least 1");
  double kappa0 = kappa;
  for (int h = 0; h < 4000; ++h) {
    OptimalParams p = critical_point(m, s, n, delta, M, kappa0);
    p.halvings = h;
    const double lhs = p.eps * std::pow(p.tau, p.s_hat / (2 * m - 1));
    if (p.tau >= tau0 && lhs <= kappa) return p;
    kappa0 *= 0.5;
  }
  throw NumericalError("optimal_params: kappa0 halving did not reach tau >= tau0");
}

DeskParams anchored_params(int m, double s, int n, double delta, double M, double kappa0, const DeskAnchor& a) {
  if (!(a.eps_ref > 0.0 && a.tau_ref > 0.0)) throw ConfigError("anchor eps_ref and tau_ref must be positive");
  DeskParams out;
  out.theory = critical_point(m, s, n, delta, M, kappa0);
  OptimalParams ref = critical_point(m, s, n, a.delta_ref, M, kappa0);
  out.eps = a.eps_ref * out.theory.eps / ref.eps;
  out.tau = a.tau_ref * out.theory.tau / ref.tau;
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian averages

double delta_lemma_constant(int d) { return std::tgamma((d + 1) / 2.0) / std::tgamma(d / 2.0); }

double gaussian_average(const std::function<double(const Vec&)>& b, const Vec& z0, double tau, int nodes_per_axis) {
  const int d = static_cast<int>(z0.size());
  if (d < 1 || d > 2) throw ConfigError("gaussian_average supports d = 1, 2");
  if (nodes_per_axis < 3) throw ConfigError("need at least 3 nodes per axis");
  const double L = 9.0 / std::sqrt(tau);
  const int N = nodes_per_axis - 1;
  const double h = 2.0 * L / N;
  auto w = trapezoid_weights(N, h);
  std::vector<double> g(N + 1);
  for (int i = 0; i <= N; ++i) {
    double z = -L + i * h;
    g[i] = std::exp(-tau * z * z);
  }
  double total = 0.0;
  Vec z(d);
  if (d == 1) {
    for (int i = 0; i <= N; ++i) {
      z(0) = z0(0) - L + i * h;
      total += w[i] * g[i] * b(z);
    }
  } else {
    for (int i = 0; i <= N; ++i) {
      double row = 0.0;
      z(0) = z0(0) - L + i * h;
      for (int j = 0; j <= N; ++j) {
        z(1) = z0(1) - L + j * h;
        row += w[j] * g[j] * b(z);
      }
      total += w[i] * g[i] * row;
    }
  }
  return std::pow(tau / std::numbers::pi, d / 2.0) * total;
}

// ---------------------------------------------------------------------------
// Probes

void ProbeOptions::validate() const {
  if (!(tau >= 1.0)) throw ConfigError("probe.tau must be at least 1");
  if (!(tau0 >= 1.0)) throw ConfigError("probe.tau0 must be at least 1");
  if (m < 4) throw ConfigError("probe.m must be at least 4");
  if (!(eps > 0.0)) throw ConfigError("probe.eps must be positive");
  if (!(beam_delta > 0.0 && beam_delta <= chart_delta)) throw ConfigError("probe.beam_delta must lie in (0, chart_delta]");
  if (!(chart_margin >= 0.0)) throw ConfigError("probe.chart_margin must be non-negative");
  if (!(angle > 0.0 && angle < std::numbers::pi)) throw ConfigError("probe.angle must lie in (0, pi)");
  if (!(angular_resolution > 0.0)) throw ConfigError("probe.angular_resolution must be positive");
  if (!(v0_floor > 0.0) || !(vhat_floor > 0.0)) throw ConfigError("probe floors must be positive");
}

namespace {

BeamSpec beam_spec(ChartPtr chart, double tau, const ProbeOptions& opt) {
  BeamSpec spec;
  const int n = chart->spatial_dim();
  spec.chart = std::move(chart);
  spec.tau = tau;
  spec.p = 4;
  spec.delta = opt.beam_delta;
  spec.s0 = 0.0;
  spec.H0 = cplx(0.0, 1.0) * CMat::Identity(n, n);
  return spec;
}

CorrectedBeam beam_along(MetricPtr metric, const Domain& domain, GridPtr grid, const Event& x, const Vec& dir,
                         double tau, BeamDirection direction, const ProbeOptions& opt) {
  ChartPtr chart = trace_chart(metric, domain, x, dir, opt.chart_delta, opt.chart_margin);
  Beam beam = assemble_beam(beam_spec(chart, tau, opt));
  check_resolution(beam, *grid);
  return correct_beam(beam, direction, grid);
}

// Angle between the spatial parts of two null vectors at p, measured with h.
double spatial_angle(const MetricField& metric, const Vec& p, const Vec& a, const Vec& b) {
  const int n = metric.spatial_dim();
  Mat h = metric.h(p);
  Vec wa = a.tail(n), wb = b.tail(n);
  double c = wa.dot(h * wb) / std::sqrt(wa.dot(h * wa) * wb.dot(h * wb));
  return std::acos(std::clamp(c, -1.0, 1.0));
}

// Unit vector h-orthogonal to w in the span of w and a coordinate basis vector.
Vec orthogonal_direction(const MetricField& metric, const Vec& p, const Vec& w) {
  auto basis = spatial_basis(metric, p);
  Mat h = metric.h(p);
  Vec best;
  double best_norm = -1.0;
  for (const Vec& e : basis) {
    Vec c = e - (e.dot(h * w) / w.dot(h * w)) * w;
    double nrm = std::sqrt(c.dot(h * c));
    if (nrm > best_norm) {
      best_norm = nrm;
      best = c / nrm;
    }
  }
  return best;
}

cplx value_at(const ScalarField& u, const Vec& p) { return interpolate(u, p); }

}  // namespace

ProbeBundle build_probe(MetricPtr metric, const Domain& domain, GridPtr grid, const Event& p0,
                        const ProbeOptions& opt) {
  opt.validate();
  const int n = metric->spatial_dim();
  const Vec p = p0.coords();
  BoundaryHit past = boundary_optimal_geodesic(*metric, domain, p0, TimeDirection::past, opt.angular_resolution);
  BoundaryHit fut = boundary_optimal_geodesic(*metric, domain, p0, TimeDirection::future, opt.angular_resolution);

  ProbeBundle b;
  b.p0 = p0;
  b.tau = opt.tau;
  b.tau0 = opt.tau0;
  b.dir1 = -past.initial_velocity;
  const Vec w1 = past.initial_velocity.tail(n);
  if (n == 1) {
    b.dir2 = null_vector(*metric, p, w1, TimeDirection::future);
  } else {
    const Vec perp = orthogonal_direction(*metric, p, w1 / std::sqrt(w1.dot(metric->h(p) * w1)));
    const Vec w1n = w1 / std::sqrt(w1.dot(metric->h(p) * w1));
    bool found = false;
    for (double scale : {1.0, 1.5, 2.0, 3.0}) {
      for (double sgn : {1.0, -1.0}) {
        double a = std::min(sgn * opt.angle * scale, std::numbers::pi / 2);
        Vec w2 = std::cos(a) * w1n + std::sin(a) * perp;
        Vec back = null_vector(*metric, p, w2, TimeDirection::past);
        if (trace_to_boundary(*metric, domain, p0, back)) {
          b.dir2 = -back;
          found = true;
          break;
        }
      }
      if (found) break;
    }
    if (!found) throw NumericalError("no perturbed geodesic through p0 reaches the lateral boundary in the past");
  }
  b.tangent_angle = n == 1 ? std::numbers::pi : spatial_angle(*metric, p, b.dir1, b.dir2);
  if (b.tangent_angle < opt.min_angle) throw NumericalError("tangents of gamma1 and gamma2 are nearly parallel");

  b.beams.push_back(beam_along(metric, domain, grid, p0, b.dir1, opt.tau, BeamDirection::forward, opt));
  b.beams.push_back(beam_along(metric, domain, grid, p0, b.dir2, opt.tau, BeamDirection::forward, opt));

  b.v0 = beam_along(metric, domain, grid, p0, fut.initial_velocity, opt.tau0, BeamDirection::backward, opt);
  const cplx raw = value_at(b.v0.v, p);
  if (std::abs(raw) < opt.v0_floor * b.v0.beam->scale()) throw NumericalError("v0(p0) is below its floor");
  b.v0_field = (1.0 / raw) * b.v0.v;
  b.v0_p0 = value_at(b.v0_field, p);

  // Fixed beams v5..vm along gamma1; tau0 doubles until |vhat(p0)| clears its floor.
  double tau0 = opt.tau0;
  for (int attempt = 0;; ++attempt) {
    b.fixed.clear();
    b.v_hat = 1.0;
    for (int j = 4; j < opt.m; ++j) {
      b.fixed.push_back(beam_along(metric, domain, grid, p0, b.dir1, tau0, BeamDirection::forward, opt));
      b.v_hat *= value_at(b.fixed.back().v, p);
    }
    if (std::abs(b.v_hat) >= opt.vhat_floor) break;
    if (attempt == 3) throw NumericalError("|vhat(p0)| stays below its floor");
    tau0 *= 2.0;
  }
  b.tau0 = tau0;

  b.hessian = phase_hessian(*b.beams[0].beam, *b.beams[1].beam, p);
  if (!(std::abs(b.hessian.det) >= opt.hessian_floor)) throw NumericalError("|det H| is below its floor");

  const double s8 = std::pow(opt.tau, 0.125);
  std::vector<SigmaField> f;
  for (int j = 0; j < 2; ++j) b.v_terms.push_back(s8 * b.beams[j].v);
  for (int j = 0; j < 2; ++j) b.v_terms.push_back(conj(b.v_terms[j]));
  for (const auto& fb : b.fixed) b.v_terms.push_back(fb.v);
  for (const auto& v : b.v_terms) f.push_back(restrict_to_sigma(v));
  b.probe = DnProbe::uniform(std::move(f), opt.eps);
  return b;
}

cplx recovery_denominator(const ProbeBundle& bundle, int m) {
  const int n = bundle.p0.spatial_dim();
  double fact = 1.0;
  for (int k = 2; k <= m; ++k) fact *= k;
  return fact * std::pow(std::numbers::pi, (n + 1) / 2.0) * bundle.v0_p0 * bundle.v_hat /
         std::sqrt(std::abs(bundle.hessian.det));
}

cplx recover_point(cplx identity_rhs, const ProbeBundle& bundle, int m) {
  if (!(std::abs(bundle.v_hat) > 0.0)) throw NumericalError("vhat(p0) vanishes");
  if (!(std::abs(bundle.hessian.det) > 0.0)) throw NumericalError("det H vanishes");
  return -identity_rhs / recovery_denominator(bundle, m);
}

// ---------------------------------------------------------------------------
// Noise

namespace {

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h) {
  const auto* c = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= c[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

DnCallable noisy_dn(DnCallable dn, std::vector<double> sigma_w, double delta, std::uint64_t seed) {
  if (!(delta >= 0.0)) throw ConfigError("noise level must be non-negative");
  return [dn = std::move(dn), w = std::move(sigma_w), delta, seed](const SigmaField& f) {
    TraceField out = dn(f);
    if (delta == 0.0) return out;
    std::uint64_t key = fnv1a(&seed, sizeof(seed), 14695981039346656037ULL);
    key = fnv1a(f.values.data(), f.values.size() * sizeof(cplx), key);
    std::mt19937_64 rng(key);
    std::normal_distribution<double> N;
    SigmaField noise = SigmaField::zeros(out.grid);
    for (auto& v : noise.values) {
      double re = N(rng);
      double im = N(rng);
      v = cplx(re, im);
    }
    const double nrm = sigma_l2(noise, w);
    if (!(nrm > 0.0)) throw NumericalError("noise has zero norm");
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += (delta / nrm) * noise.values[i];
    return out;
  };
}

// ---------------------------------------------------------------------------
// Pointwise pipeline

PointRecovery recover_at(const RecoveryConfig& cfg, const Event& p0, std::uint64_t point_seed) {
  PointRecovery out;
  out.p0 = p0;
  try {
    out.q_true = value_at(cfg.q_true, p0.coords()).real();
    ProbeBundle bundle = build_probe(cfg.metric, cfg.domain, cfg.grid, p0, cfg.probe);
    WaveOperator op(cfg.metric, cfg.grid);
    DnCallable dn = nonlinear_dn(op, cfg.q_true, cfg.solver);
    if (cfg.noise_delta > 0.0)
      dn = noisy_dn(dn, sigma_weights(*cfg.metric, *cfg.grid), cfg.noise_delta, cfg.seed ^ (point_seed * 0x9E3779B97F4A7C15ULL));
    out.identity = identity_evaluate(op, &cfg.q_true, bundle.v0_field, bundle.probe, dn, &bundle.v_terms, cfg.jobs);
    out.q_hat = recover_point(out.identity.rhs_boundary, bundle, cfg.probe.m);
    out.ok = true;
  } catch (const NumericalError& e) {
    out.failure = e.what();
  }
  return out;
}

std::vector<Event> w_grid(const MetricField& metric, const Domain& domain, const Vec& lo, const Vec& hi,
                          const std::vector<int>& counts, double angular_resolution) {
  const int d = static_cast<int>(lo.size());
  if (hi.size() != d || static_cast<int>(counts.size()) != d || d != metric.dim())
    throw ConfigError("W grid bounds must have one entry per spacetime coordinate");
  std::size_t total = 1;
  for (int c : counts) {
    if (c < 1) throw ConfigError("W grid counts must be positive");
    total *= static_cast<std::size_t>(c);
  }
  std::vector<Event> out;
  for (std::size_t k = 0; k < total; ++k) {
    Vec p(d);
    std::size_t r = k;
    for (int a = 0; a < d; ++a) {
      int i = static_cast<int>(r % counts[a]);
      r /= counts[a];
      p(a) = counts[a] == 1 ? lo(a) : lo(a) + (hi(a) - lo(a)) * i / (counts[a] - 1);
    }
    Event e = Event::from_coords(p);
    try {
      boundary_optimal_geodesic(metric, domain, e, TimeDirection::past, angular_resolution);
      boundary_optimal_geodesic(metric, domain, e, TimeDirection::future, angular_resolution);
      out.push_back(e);
    } catch (const NumericalError&) {
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Several intersection points

void check_intersection_cap(const std::vector<GeodesicPath>& paths, int P, double spatial_tol) {
  if (P < 1) throw ConfigError("intersection cap P must be positive");
  for (std::size_t i = 0; i < paths.size(); ++i)
    for (std::size_t j = i + 1; j < paths.size(); ++j) intersections(paths[i], paths[j], spatial_tol, P);
}

CorrectedBeam filter_beam(MetricPtr metric, const Domain& domain, GridPtr grid, const Event& x, double tau,
                          const ProbeOptions& opt) {
  BoundaryHit fut = boundary_optimal_geodesic(*metric, domain, x, TimeDirection::future, opt.angular_resolution);
  return beam_along(std::move(metric), domain, std::move(grid), x, fut.initial_velocity, tau,
                    BeamDirection::backward, opt);
}

cplx filter_value(const CorrectedBeam& beam, const Vec& p) { return value_at(beam.v, p) / beam.beam->scale(); }

namespace {

std::vector<std::size_t> time_order(const std::vector<Event>& pts) {
  std::vector<std::size_t> idx(pts.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return pts[a].t < pts[b].t; });
  return idx;
}

double condition_number(const CMat& A) {
  Eigen::JacobiSVD<CMat> svd(A);
  const auto& s = svd.singularValues();
  double lo = s.minCoeff();
  return lo > 0.0 ? s.maxCoeff() / lo : std::numeric_limits<double>::infinity();
}

}  // namespace

SeparationMatrix matrix_from_beams(std::vector<Event> points, const std::vector<const CorrectedBeam*>& beams) {
  if (points.empty() || points.size() != beams.size()) throw ConfigError("need one beam per point");
  auto order = time_order(points);
  SeparationMatrix out;
  const int P = static_cast<int>(points.size());
  std::vector<const CorrectedBeam*> sorted_beams;
  for (auto i : order) {
    out.points.push_back(points[i]);
    sorted_beams.push_back(beams[i]);
  }
  out.filters.assign(P, -1);
  out.A = CMat::Zero(P, P);
  for (int k = 0; k < P; ++k)
    for (int l = 0; l < P; ++l) out.A(k, l) = filter_value(*sorted_beams[k], out.points[l].coords());
  out.det = out.A.determinant();
  out.condition = condition_number(out.A);
  return out;
}

SeparationMatrix separation_matrix(std::vector<Event> points, MetricPtr metric, const Domain& domain, GridPtr grid,
                                   double tau_sep, const ProbeOptions& opt, double d_min, int max_doublings) {
  if (points.empty()) throw ConfigError("separation matrix needs at least one point");
  double tau = tau_sep;
  for (int k = 0; k <= max_doublings; ++k, tau *= 2.0) {
    std::vector<CorrectedBeam> beams;
    for (const auto& x : points) beams.push_back(filter_beam(metric, domain, grid, x, tau, opt));
    std::vector<const CorrectedBeam*> ptrs;
    for (const auto& b : beams) ptrs.push_back(&b);
    SeparationMatrix mat = matrix_from_beams(points, ptrs);
    mat.tau_sep = tau;
    if (std::abs(mat.det) >= d_min) return mat;
  }
  throw NumericalError("separation matrix determinant stays below d_min after tau_sep escalation");
}

SeparationSolution solve_separation(const SeparationMatrix& mat, const CVec& measured, double max_condition) {
  const auto P = mat.A.rows();
  if (measured.size() != P) throw ConfigError("measured vector does not match the separation matrix");
  SeparationSolution out;
  Eigen::FullPivLU<CMat> lu(mat.A);
  if (!lu.isInvertible()) throw NumericalError("separation matrix is singular");
  out.values = lu.solve(measured);
  const double bn = measured.norm();
  out.residual = (mat.A * out.values - measured).norm() / (bn > 0.0 ? bn : 1.0);
  out.flagged = condition_number(mat.A) > max_condition;
  return out;
}

namespace {

// Largest |det| over choices of one covering beam per point, with the choice.
std::pair<double, std::vector<int>> best_choice(const std::vector<Event>& pts, const std::vector<std::size_t>& ids,
                                                const SeparationFilter& filt) {
  std::vector<int> choice(ids.size(), 0);
  std::vector<int> best_choice;
  double best = -1.0;
  std::size_t combos = 1;
  for (auto i : ids) {
    if (filt.covers[i].empty()) return {-1.0, {}};
    combos *= filt.covers[i].size();
  }
  combos = std::min<std::size_t>(combos, 4096);
  for (std::size_t c = 0; c < combos; ++c) {
    std::size_t r = c;
    std::vector<const CorrectedBeam*> beams;
    std::vector<Event> sub;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const auto& cov = filt.covers[ids[k]];
      choice[k] = cov[r % cov.size()];
      r /= cov.size();
      beams.push_back(&filt.beams[choice[k]]);
      sub.push_back(pts[ids[k]]);
    }
    double d = std::abs(matrix_from_beams(sub, beams).det);
    if (d > best) {
      best = d;
      best_choice = choice;
    }
  }
  return {best, best_choice};
}

// Future null directions through x that reach the lateral boundary, the boundary-optimal one first.
std::vector<Vec> future_directions(const MetricField& metric, const Domain& domain, const Event& x,
                                   const ProbeOptions& opt) {
  std::vector<Vec> out;
  const Vec p = x.coords();
  const int n = metric.spatial_dim();
  out.push_back(boundary_optimal_geodesic(metric, domain, x, TimeDirection::future, opt.angular_resolution)
                    .initial_velocity);
  auto basis = spatial_basis(metric, p);
  std::vector<Vec> cands;
  if (n == 1) {
    cands.push_back(basis[0]);
    cands.push_back(-basis[0]);
  } else {
    const Vec w = out[0].tail(n);
    const Vec perp = orthogonal_direction(metric, p, w / std::sqrt(w.dot(metric.h(p) * w)));
    const Vec wn = w / std::sqrt(w.dot(metric.h(p) * w));
    for (double a : {0.5, -0.5, 1.0, -1.0, 1.5, -1.5})
      cands.push_back(std::cos(a) * wn + std::sin(a) * perp);
  }
  for (const Vec& c : cands) {
    Vec v = null_vector(metric, p, c, TimeDirection::future);
    if ((v - out[0]).norm() < 1e-9) continue;
    if (trace_to_boundary(metric, domain, x, v)) out.push_back(v);
  }
  return out;
}

}  // namespace

SeparationFilter separation_filter(MetricPtr metric, const Domain& domain, GridPtr grid, const std::vector<Event>& W,
                                   int P, double delta_sep, double tau_sep, const ProbeOptions& opt,
                                   std::uint64_t seed, int samples, double d_min) {
  if (W.empty()) throw ConfigError("W grid is empty");
  if (P < 1) throw ConfigError("P must be positive");
  SeparationFilter filt;
  filt.covers.assign(W.size(), {});
  std::vector<std::vector<Vec>> dirs(W.size());
  std::vector<std::size_t> used_dirs(W.size(), 0);
  auto add_beam = [&](std::size_t i) -> bool {
    if (dirs[i].empty()) dirs[i] = future_directions(*metric, domain, W[i], opt);
    while (used_dirs[i] < dirs[i].size()) {
      const Vec dir = dirs[i][used_dirs[i]++];
      try {
        filt.beams.push_back(beam_along(metric, domain, grid, W[i], dir, tau_sep, BeamDirection::backward, opt));
      } catch (const NumericalError&) {
        continue;
      }
      filt.anchors.push_back(W[i]);
      const int id = static_cast<int>(filt.beams.size()) - 1;
      for (std::size_t j = 0; j < W.size(); ++j)
        if (std::abs(filter_value(filt.beams.back(), W[j].coords())) >= 2.0 / 3.0) filt.covers[j].push_back(id);
      return true;
    }
    return false;
  };
  for (std::size_t i = 0; i < W.size(); ++i)
    if (filt.covers[i].empty() && !add_beam(i))
      throw NumericalError("grid point without an admissible boundary-optimal geodesic");

  std::mt19937_64 rng(seed);
  const int Pmax = std::min<int>(P, static_cast<int>(W.size()));
  std::uniform_int_distribution<int> size_dist(1, Pmax);
  std::uniform_int_distribution<std::size_t> pick(0, W.size() - 1);
  for (int s = 0; s < samples; ++s) {
    const int k = size_dist(rng);
    std::vector<std::size_t> ids;
    for (int tries = 0; tries < 200 && static_cast<int>(ids.size()) < k; ++tries) {
      std::size_t c = pick(rng);
      bool ok = true;
      for (auto j : ids)
        if (j == c || (W[j].coords() - W[c].coords()).norm() <= delta_sep) ok = false;
      if (ok) ids.push_back(c);
    }
    if (static_cast<int>(ids.size()) < k) continue;
    ++filt.sampled;
    for (;;) {
      if (best_choice(W, ids, filt).first >= d_min) {
        ++filt.separable;
        break;
      }
      bool added = false;
      for (auto i : ids) added = add_beam(i) || added;
      if (!added) break;
    }
  }
  return filt;
}

// ---------------------------------------------------------------------------
// Stability sweep

LogFit fit_log_log(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("log-log fit needs at least two points");
  const std::size_t N = x.size();
  double mx = 0.0, my = 0.0;
  std::vector<double> lx(N), ly(N);
  for (std::size_t i = 0; i < N; ++i) {
    if (!(x[i] > 0.0 && y[i] > 0.0)) throw NumericalError("log-log fit needs positive data");
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
    mx += lx[i];
    my += ly[i];
  }
  mx /= N;
  my /= N;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (!(sxx > 0.0)) throw NumericalError("log-log fit needs distinct abscissae");
  LogFit out;
  out.slope = sxy / sxx;
  out.intercept = my - out.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    double r = ly[i] - out.intercept - out.slope * lx[i];
    sse += r * r;
  }
  out.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  out.stderr_slope = N > 2 ? std::sqrt(sse / (N - 2) / sxx) : 0.0;
  return out;
}

StabilityReport stability_sweep(const SweepConfig& cfg) {
  if (cfg.deltas.empty()) throw ConfigError("sweep needs at least one delta");
  for (std::size_t i = 1; i < cfg.deltas.size(); ++i)
    if (!(cfg.deltas[i] > cfg.deltas[i - 1])) throw ConfigError("delta ladder must be strictly increasing");
  if (cfg.W.empty()) throw ConfigError("sweep needs a non-empty W grid");
  const int m = cfg.base.probe.m;
  const int n = cfg.base.metric->spatial_dim();
  StabilityReport rep;
  rep.sigma_exact = sigma(cfg.s, m, n);
  rep.sigma_value = boost::rational_cast<double>(rep.sigma_exact);
  // kappa0 from the largest delta, where the constraint tau >= tau0 binds.
  const double kappa0 = optimal_params(m, cfg.s, n, cfg.deltas.back(), cfg.M, cfg.kappa, cfg.tau0).kappa0;
  for (std::size_t i = 0; i < cfg.deltas.size(); ++i) {
    SweepPoint sp;
    sp.delta = cfg.deltas[i];
    sp.params = anchored_params(m, cfg.s, n, sp.delta, cfg.M, kappa0, cfg.anchor);
    RecoveryConfig rc = cfg.base;
    rc.probe.tau = sp.params.tau;
    rc.probe.eps = sp.params.eps;
    rc.noise_delta = sp.delta;
    rc.seed = cfg.base.seed + 0x632BE59BD9B4E019ULL * (i + 1);
    rc.jobs = 1;
    sp.points.resize(cfg.W.size());
    parallel_for(cfg.W.size(), cfg.base.jobs, [&](std::size_t k) { sp.points[k] = recover_at(rc, cfg.W[k], k + 1); });
    for (const auto& pr : sp.points) {
      if (!pr.ok) {
        ++sp.failures;
        continue;
      }
      sp.error = std::max(sp.error, std::abs(pr.q_hat - pr.q_true));
    }
    rep.ladder.push_back(std::move(sp));
  }
  std::vector<double> xs, ys;
  for (const auto& sp : rep.ladder)
    if (sp.failures < static_cast<int>(sp.points.size()) && sp.error > 0.0) {
      xs.push_back(sp.delta);
      ys.push_back(sp.error);
    }
  if (xs.size() >= 2) {
    LogFit fit = fit_log_log(xs, ys);
    rep.slope_defined = true;
    rep.slope = fit.slope;
    rep.slope_stderr = fit.stderr_slope;
    rep.intercept = fit.intercept;
    rep.r2 = fit.r2;
  }
  return rep;
}

void write_sweep_csv(const StabilityReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path);
  out << "delta,eps,tau,point,t";
  const int n = report.ladder.empty() || report.ladder[0].points.empty()
                    ? 0
                    : report.ladder[0].points[0].p0.spatial_dim();
  for (int k = 0; k < n; ++k) out << ",x" << (k + 1);
  out << ",q_true,q_hat_re,q_hat_im,abs_err,status\n";
  for (const auto& sp : report.ladder)
    for (std::size_t i = 0; i < sp.points.size(); ++i) {
      const auto& pr = sp.points[i];
      out << format_double(sp.delta) << "," << format_double(sp.params.eps) << "," << format_double(sp.params.tau)
          << "," << i << "," << format_double(pr.p0.t);
      for (int k = 0; k < n; ++k) out << "," << format_double(pr.p0.x(k));
      out << "," << format_double(pr.q_true) << "," << format_double(pr.q_hat.real()) << ","
          << format_double(pr.q_hat.imag()) << "," << format_double(pr.ok ? std::abs(pr.q_hat - pr.q_true) : NAN)
          << "," << (pr.ok ? "ok" : "failed") << "\n";
    }
}

void write_sweep_summary(const StabilityReport& report, const SweepConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path);
  out << "config_hash = " << report.config_hash << "\n";
  out << "s = " << cfg.s << "\n";
  out << "m = " << cfg.base.probe.m << "\n";
  out << "n = " << cfg.base.metric->spatial_dim() << "\n";
  out << "sigma = " << report.sigma_exact.numerator() << "/" << report.sigma_exact.denominator() << "\n";
  out << "sigma_value = " << format_double(report.sigma_value) << "\n";
  out << "ladder_size = " << report.ladder.size() << "\n";
  if (report.slope_defined) {
    out << "slope = " << format_double(report.slope) << "\n";
    out << "slope_stderr = " << format_double(report.slope_stderr) << "\n";
    out << "slope_band_low = " << format_double(report.slope - 1.96 * report.slope_stderr) << "\n";
    out << "slope_band_high = " << format_double(report.slope + 1.96 * report.slope_stderr) << "\n";
    out << "intercept = " << format_double(report.intercept) << "\n";
    out << "r2 = " << format_double(report.r2) << "\n";
  } else {
    out << "slope = undefined\n";
  }
  for (std::size_t i = 0; i < report.ladder.size(); ++i) {
    const auto& sp = report.ladder[i];
    out << "ladder." << i << ".delta = " << format_double(sp.delta) << "\n";
    out << "ladder." << i << ".eps = " << format_double(sp.params.eps) << "\n";
    out << "ladder." << i << ".tau = " << format_double(sp.params.tau) << "\n";
    out << "ladder." << i << ".error = " << format_double(sp.error) << "\n";
    out << "ladder." << i << ".failures = " << sp.failures << "\n";
  }
}

}  // namespace qrecon
