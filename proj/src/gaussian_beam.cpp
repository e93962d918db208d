#include "qrecon/gaussian_beam.hpp"

#include "ode.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace qrecon {

using detail::DynVec;

namespace {

constexpr double kMaxSampleSpacing = 0.002;

CMat hermite(double s0, double s1, const CMat& p0, const CMat& d0, const CMat& p1, const CMat& d1, double s) {
  double h = s1 - s0;
  double u = (s - s0) / h;
  double u2 = u * u, u3 = u2 * u;
  double h00 = 2 * u3 - 3 * u2 + 1, h10 = u3 - 2 * u2 + u, h01 = -2 * u3 + 3 * u2, h11 = u3 - u2;
  return h00 * p0 + (h10 * h) * d0 + h01 * p1 + (h11 * h) * d1;
}

CMat hermite_slope(double s0, double s1, const CMat& p0, const CMat& d0, const CMat& p1, const CMat& d1, double s) {
  double h = s1 - s0;
  double u = (s - s0) / h;
  double u2 = u * u;
  double g00 = (6 * u2 - 6 * u) / h, g10 = 3 * u2 - 4 * u + 1, g01 = (-6 * u2 + 6 * u) / h, g11 = 3 * u2 - 2 * u;
  return g00 * p0 + g10 * d0 + g01 * p1 + g11 * d1;
}

// Index i with s[i] <= s_query <= s[i+1], clamped to the sampled range.
std::size_t bracket(const std::vector<double>& s, double& s_query) {
  s_query = std::clamp(s_query, s.front(), s.back());
  auto it = std::upper_bound(s.begin(), s.end(), s_query);
  std::size_t k = static_cast<std::size_t>(std::distance(s.begin(), it));
  return std::clamp<std::size_t>(k, 1, s.size() - 1) - 1;
}

std::vector<double> sample_parameters(const FermiChart& chart) {
  const double range = chart.s_max() - chart.s_min();
  const double ds = std::min(kMaxSampleSpacing, range / 200.0);
  const long k0 = static_cast<long>(std::ceil(chart.s_min() / ds - 1e-9));
  const long k1 = static_cast<long>(std::floor(chart.s_max() / ds + 1e-9));
  if (k0 > 0 || k1 < 0) throw ConfigError("chart parameter range must contain s = 0");
  std::vector<double> s;
  for (long k = k0; k <= k1; ++k) s.push_back(static_cast<double>(k) * ds);
  return s;
}

Mat projector(int n) {
  Mat P = Mat::Identity(n, n);
  P(0, 0) = 0.0;
  return P;
}

DynVec pack(const std::vector<const CMat*>& ms, int n) {
  DynVec y(2 * n * n * static_cast<int>(ms.size()));
  int o = 0;
  for (const CMat* m : ms)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        y(o++) = (*m)(i, j).real();
        y(o++) = (*m)(i, j).imag();
      }
  return y;
}

void unpack(const DynVec& y, int n, std::vector<CMat*> ms) {
  int o = 0;
  for (CMat* m : ms) {
    m->resize(n, n);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        (*m)(i, j) = cplx(y(o), y(o + 1));
        o += 2;
      }
  }
}

// Integrates a matrix ODE over the sample grid from s = 0 outwards, storing the state at every sample.
std::vector<DynVec> march_samples(const detail::OdeRhs& f, const std::vector<double>& s, const DynVec& y0) {
  std::size_t i0 = 0;
  while (i0 < s.size() && std::abs(s[i0]) > 1e-12) ++i0;
  if (i0 == s.size()) throw ConfigError("sample grid misses s = 0");
  std::vector<DynVec> out(s.size());
  out[i0] = y0;
  for (std::size_t i = i0 + 1; i < s.size(); ++i)
    out[i] = detail::integrate_to(f, s[i - 1], s[i], out[i - 1], 1e-12, 0.05, s[i] - s[i - 1]);
  for (std::size_t i = i0; i-- > 0;)
    out[i] = detail::integrate_to(f, s[i + 1], s[i], out[i + 1], 1e-12, 0.05, s[i + 1] - s[i]);
  return out;
}

double min_im_eigenvalue(const CMat& H) {
  Mat im = H.imag();
  Mat sym = 0.5 * (im + im.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  return es.eigenvalues().minCoeff();
}

}  // namespace

void BeamSpec::validate() const {
  if (!chart) throw ConfigError("beam needs a chart");
  const int n = chart->spatial_dim();
  if (!(tau >= std::max(1.0, tau_floor))) throw ConfigError("tau must be at least " + format_double(std::max(1.0, tau_floor)));
  if (p < 2) throw ConfigError("normalization exponent p must be >= 2");
  if (order != 2) throw ConfigError("only the order-2 beam construction is available");
  if (!(delta > 0.0) || delta > chart->delta()) throw ConfigError("cutoff radius must lie in (0, tube radius]");
  if (H0.rows() != n || H0.cols() != n) throw ConfigError("H0 must be n x n");
  if ((H0 - H0.transpose()).norm() > 1e-12 * (1.0 + H0.norm())) throw ConfigError("H0 must be symmetric");
  if (!(min_im_eigenvalue(H0) > 0.0)) throw ConfigError("Im H0 must be positive definite");
  if (s0 < chart->s_min() || s0 > chart->s_max()) throw ConfigError("s0 outside the chart range");
}

CMat PhaseJet::at(double s_query) const {
  std::size_t i = bracket(s, s_query);
  return hermite(s[i], s[i + 1], H[i], dH[i], H[i + 1], dH[i + 1], s_query);
}

CMat PhaseJet::derivative_at(double s_query) const {
  std::size_t i = bracket(s, s_query);
  return hermite(s[i], s[i + 1], dH[i], ddH[i], dH[i + 1], ddH[i + 1], s_query);
}

cplx AmplitudeJet::at(double s_query) const {
  std::size_t i = bracket(s, s_query);
  CMat a(1, 1), da(1, 1), b(1, 1), db(1, 1);
  a(0, 0) = b00[i];
  da(0, 0) = db00[i];
  b(0, 0) = b00[i + 1];
  db(0, 0) = db00[i + 1];
  return hermite(s[i], s[i + 1], a, da, b, db, s_query)(0, 0);
}

cplx AmplitudeJet::derivative_at(double s_query) const {
  std::size_t i = bracket(s, s_query);
  CMat a(1, 1), da(1, 1), b(1, 1), db(1, 1);
  a(0, 0) = b00[i];
  da(0, 0) = db00[i];
  b(0, 0) = b00[i + 1];
  db(0, 0) = db00[i + 1];
  return hermite_slope(s[i], s[i + 1], a, da, b, db, s_query)(0, 0);
}

CMat riccati_curvature(const FermiChart& chart, double s) {
  const int n = chart.spatial_dim();
  const int d = n + 1;
  CMat M = CMat::Zero(n, n);
  if (chart.metric().is_flat()) return M;
  Vec p = chart.path().position(s);
  Riemann R = riemann(chart.metric(), p);
  auto e = chart.frames().at(s);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < n; ++k) {
      double v = 0.0;
      for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b) {
          double ab = e[0](a) * e[j + 1](b);
          if (ab == 0.0) continue;
          for (int c = 0; c < d; ++c)
            for (int dd = 0; dd < d; ++dd) v += ab * R[a][b](c, dd) * e[0](c) * e[k + 1](dd);
        }
      M(j, k) = 0.25 * v;
    }
  return 0.5 * (M + M.transpose());
}

PhaseJet solve_riccati(const MetricField& metric, const FermiChart& chart, const CMat& H0) {
  const int n = chart.spatial_dim();
  if (metric.spatial_dim() != n) throw ConfigError("metric and chart dimensions differ");
  if (!(min_im_eigenvalue(H0) > 0.0)) throw ConfigError("Im H0 must be positive definite");
  const Mat P = projector(n);
  const CMat Pc = P.cast<cplx>();
  detail::OdeRhs f = [&](double s, const DynVec& y, DynVec& dy) {
    CMat Y, Z;
    unpack(y, n, {&Y, &Z});
    CMat M = riccati_curvature(chart, s);
    CMat dY = -4.0 * Pc * Z;
    CMat dZ = M * Y;
    dy = pack({&dY, &dZ}, n);
  };
  PhaseJet jet;
  jet.s = sample_parameters(chart);
  CMat Y0 = CMat::Identity(n, n);
  CMat Z0 = H0;
  auto states = march_samples(f, jet.s, pack({&Y0, &Z0}, n));
  jet.min_im_eigenvalue = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < jet.s.size(); ++i) {
    CMat Y, Z;
    unpack(states[i], n, {&Y, &Z});
    Eigen::PartialPivLU<CMat> lu(Y);
    if (!std::isfinite(std::abs(Y.determinant())) || std::abs(Y.determinant()) < 1e-12)
      throw NumericalError("Riccati solution blows up at s = " + format_double(jet.s[i]));
    CMat H = Z * lu.inverse();
    H = 0.5 * (H + H.transpose()).eval();
    CMat M = riccati_curvature(chart, jet.s[i]);
    jet.H.push_back(H);
    jet.dH.push_back(4.0 * H * Pc * H + M);
    jet.Y.push_back(Y);
    jet.Z.push_back(Z);
    double ev = min_im_eigenvalue(H);
    jet.min_im_eigenvalue = std::min(jet.min_im_eigenvalue, ev);
    if (!(ev > 0.0))
      throw NumericalError("Im H(s) lost positivity at s = " + format_double(jet.s[i]));
  }
  // H'' = 4(H' P H + H P H') + M', with M' from differences of the sampled curvature block.
  const std::size_t N = jet.s.size();
  std::vector<CMat> M(N);
  for (std::size_t i = 0; i < N; ++i) M[i] = jet.dH[i] - 4.0 * jet.H[i] * Pc * jet.H[i];
  for (std::size_t i = 0; i < N; ++i) {
    CMat dM;
    if (i == 0)
      dM = (-3.0 * M[0] + 4.0 * M[1] - M[2]) / (jet.s[2] - jet.s[0]);
    else if (i == N - 1)
      dM = (3.0 * M[N - 1] - 4.0 * M[N - 2] + M[N - 3]) / (jet.s[N - 1] - jet.s[N - 3]);
    else
      dM = (M[i + 1] - M[i - 1]) / (jet.s[i + 1] - jet.s[i - 1]);
    jet.ddH.push_back(4.0 * (jet.dH[i] * Pc * jet.H[i] + jet.H[i] * Pc * jet.dH[i]) + dM);
  }
  if (metric.is_flat()) {
    // The second-order eikonal equation is checked at a few parameters along the range.
    for (double frac : {0.1, 0.5, 0.9}) {
      double s = chart.s_min() + frac * (chart.s_max() - chart.s_min());
      double res = eikonal_residual(chart, jet, s);
      if (res > 1e-8 * (1.0 + jet.at(s).norm()))
        throw NumericalError("second-order eikonal residual " + format_double(res) + " at s = " + format_double(s));
    }
  }
  return jet;
}

double eikonal_residual(const FermiChart& chart, const PhaseJet& phase, double s, double h) {
  const int n = chart.spatial_dim();
  const CMat H = phase.at(s);
  const CMat dH = phase.derivative_at(s);
  auto quad = [&](const Vec& y) {
    CVec dtheta(n + 1);
    CVec yc = y.cast<cplx>();
    dtheta(0) = yc.dot(dH * yc);  // dot conjugates its first argument, y is real
    CVec gy = 2.0 * H * yc;
    gy(0) += 1.0;
    dtheta.tail(n) = gy;
    Mat Ginv = chart.pulled_back_metric(s, y).inverse();
    return cplx(dtheta.transpose() * Ginv.cast<cplx>() * dtheta);
  };
  auto second = [&](double step) {
    CMat D(n, n);
    Vec z = Vec::Zero(n);
    cplx f0 = quad(z);
    for (int k = 0; k < n; ++k)
      for (int l = k; l < n; ++l) {
        Vec ek = Vec::Zero(n), el = Vec::Zero(n);
        ek(k) = step;
        el(l) = step;
        if (k == l) {
          D(k, k) = (quad(ek) - 2.0 * f0 + quad(Vec(-ek))) / (step * step);
        } else {
          D(k, l) = (quad(Vec(ek + el)) - quad(Vec(ek - el)) - quad(Vec(el - ek)) + quad(Vec(-ek - el))) /
                    (4.0 * step * step);
          D(l, k) = D(k, l);
        }
      }
    return D;
  };
  CMat D = (4.0 * second(h) - second(2.0 * h)) / 3.0;
  return D.cwiseAbs().maxCoeff();
}

AmplitudeJet solve_transport(const MetricField& metric, const FermiChart& chart, const PhaseJet& phase) {
  const int n = chart.spatial_dim();
  if (metric.spatial_dim() != n) throw ConfigError("metric and chart dimensions differ");
  if (phase.s.size() < 5) throw ConfigError("phase jet has too few samples");
  const CMat Pc = projector(n).cast<cplx>();
  detail::OdeRhs f = [&](double s, const DynVec& y, DynVec& dy) {
    CMat Y;
    unpack(y, n, {&Y});
    CMat dY = -4.0 * Pc * phase.at(s) * Y;
    dy = pack({&dY}, n);
  };
  AmplitudeJet amp;
  amp.s = phase.s;
  CMat Y0 = CMat::Identity(n, n);
  auto states = march_samples(f, amp.s, pack({&Y0}, n));
  std::size_t i0 = 0;
  while (std::abs(amp.s[i0]) > 1e-12) ++i0;
  const std::size_t m = amp.s.size();
  amp.Y.resize(m);
  amp.b00.resize(m);
  amp.db00.resize(m);
  amp.min_abs_det = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < m; ++i) {
    unpack(states[i], n, {&amp.Y[i]});
    cplx det = amp.Y[i].determinant();
    amp.min_abs_det = std::min(amp.min_abs_det, std::abs(det));
    if (!(std::abs(det) > 1e-8)) throw CausticError("det Y vanishes near s = " + format_double(amp.s[i]));
  }
  // Continuous branch of det(Y)^(-1/2) starting from 1 at s = 0.
  auto branch = [&](std::size_t i, cplx prev) {
    cplx b = 1.0 / std::sqrt(amp.Y[i].determinant());
    return std::abs(b - prev) <= std::abs(-b - prev) ? b : -b;
  };
  amp.b00[i0] = 1.0;
  for (std::size_t i = i0 + 1; i < m; ++i) amp.b00[i] = branch(i, amp.b00[i - 1]);
  for (std::size_t i = i0; i-- > 0;) amp.b00[i] = branch(i, amp.b00[i + 1]);
  for (std::size_t i = 0; i < m; ++i) amp.db00[i] = 2.0 * (Pc * phase.H[i]).trace() * amp.b00[i];

  // Transport residual -2 g(dTheta, db) + (box Theta) b = b' - 2 tr(P H) b on the axis, with b'
  // from fourth-order differences of the sampled amplitude.
  const double ds = amp.s[1] - amp.s[0];
  amp.max_transport_residual = 0.0;
  for (std::size_t i = 2; i + 2 < m; ++i) {
    cplx db = (-amp.b00[i + 2] + 8.0 * amp.b00[i + 1] - 8.0 * amp.b00[i - 1] + amp.b00[i - 2]) / (12.0 * ds);
    amp.max_transport_residual = std::max(amp.max_transport_residual, std::abs(db - amp.db00[i]));
  }
  return amp;
}

double cutoff(double r) {
  if (r <= 0.5) return 1.0;
  if (r >= 1.0) return 0.0;
  double u = 2.0 * r - 1.0;
  return 1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
}

double cutoff_d1(double r) {
  if (r <= 0.5 || r >= 1.0) return 0.0;
  double u = 2.0 * r - 1.0;
  return -2.0 * 30.0 * u * u * (1.0 - u) * (1.0 - u);
}

double cutoff_d2(double r) {
  if (r <= 0.5 || r >= 1.0) return 0.0;
  double u = 2.0 * r - 1.0;
  return -4.0 * 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u);
}

Beam::Beam(BeamSpec spec, std::shared_ptr<const PhaseJet> phase, std::shared_ptr<const AmplitudeJet> amp,
           bool conjugated)
    : spec_(std::move(spec)), phase_(std::move(phase)), amp_(std::move(amp)), conjugated_(conjugated) {
  b_ref_ = amp_->at(spec_.s0);
}

double Beam::scale() const {
  return std::pow(spec_.tau, spatial_dim() / (2.0 * spec_.p));
}

Beam Beam::with_tau(double tau) const {
  BeamSpec s = spec_;
  s.tau = tau;
  s.validate();
  return Beam(s, phase_, amp_, conjugated_);
}

cplx Beam::theta(double s, const Vec& y) const {
  CVec yc = y.cast<cplx>();
  return cplx(y(0)) + (yc.transpose() * phase_->at(s) * yc)(0, 0);
}

cplx Beam::at_chart(double s, const Vec& y) const {
  double r = y.norm() / spec_.delta;
  if (r >= 1.0) return 0.0;
  cplx v = scale() * std::exp(cplx(0.0, spec_.tau) * theta(s, y)) * cutoff(r) * amp_->at(s) / b_ref_;
  return conjugated_ ? std::conj(v) : v;
}

Beam::Jet Beam::chart_jet(double s, const Vec& y) const {
  const int n = spatial_dim();
  const int d = n + 1;
  Jet jet;
  jet.d = CVec::Zero(d);
  jet.dd = CMat::Zero(d, d);
  const double dl = spec_.delta;
  const double ynorm = y.norm();
  const double r = ynorm / dl;
  if (r >= 1.0) {
    jet.v = 0.0;
    return jet;
  }
  const CMat Pc = projector(n).cast<cplx>();
  const CVec yc = y.cast<cplx>();
  const CMat H = phase_->at(s);
  const CMat dH = phase_->derivative_at(s);
  const double hs = std::max(1e-6, 0.5 * (phase_->s[1] - phase_->s[0]));
  const CMat ddH = (phase_->derivative_at(s + hs) - phase_->derivative_at(s - hs)) / (2.0 * hs);

  // Phase derivatives in (s, y).
  cplx th = cplx(y(0)) + (yc.transpose() * H * yc)(0, 0);
  CVec dth(d);
  dth(0) = (yc.transpose() * dH * yc)(0, 0);
  CVec gy = 2.0 * H * yc;
  gy(0) += 1.0;
  dth.tail(n) = gy;
  CMat ddth(d, d);
  ddth(0, 0) = (yc.transpose() * ddH * yc)(0, 0);
  CVec sy = 2.0 * dH * yc;
  ddth.block(0, 1, 1, n) = sy.transpose();
  ddth.block(1, 0, n, 1) = sy;
  ddth.block(1, 1, n, n) = 2.0 * H;

  // Amplitude chi(|y|/delta') b(s) / b(s0).
  const cplx b = amp_->at(s) / b_ref_;
  const cplx db = amp_->derivative_at(s) / b_ref_;
  const cplx trPH = (Pc * H).trace();
  const cplx ddb = 2.0 * (Pc * dH).trace() * b + 2.0 * trPH * db;
  double chi = cutoff(r);
  Vec gchi = Vec::Zero(n);
  Mat hchi = Mat::Zero(n, n);
  if (r > 0.5) {
    Vec u = y / ynorm;
    double c1 = cutoff_d1(r), c2 = cutoff_d2(r);
    gchi = c1 * u / dl;
    hchi = c2 * u * u.transpose() / (dl * dl) + c1 * (Mat::Identity(n, n) - u * u.transpose()) / (dl * ynorm);
  }
  cplx a = chi * b;
  CVec da(d);
  da(0) = chi * db;
  da.tail(n) = gchi.cast<cplx>() * b;
  CMat dda(d, d);
  dda(0, 0) = chi * ddb;
  CVec asy = gchi.cast<cplx>() * db;
  dda.block(0, 1, 1, n) = asy.transpose();
  dda.block(1, 0, n, 1) = asy;
  dda.block(1, 1, n, n) = hchi.cast<cplx>() * b;

  const cplx it(0.0, spec_.tau);
  const cplx ph = scale() * std::exp(it * th);
  jet.v = ph * a;
  jet.d = ph * (it * dth * a + da);
  jet.dd = ph * (it * it * a * dth * dth.transpose() + it * (a * ddth + dth * da.transpose() + da * dth.transpose()) + dda);
  if (conjugated_) {
    jet.v = std::conj(jet.v);
    jet.d = jet.d.conjugate();
    jet.dd = jet.dd.conjugate();
  }
  return jet;
}

cplx Beam::operator()(const Vec& p) const {
  ChartPoint cp = spec_.chart->inverse(p);
  if (!cp.inside) return 0.0;
  return at_chart(cp.s, cp.y);
}

Beam assemble_beam(const BeamSpec& spec) {
  spec.validate();
  const auto& chart = *spec.chart;
  auto phase = std::make_shared<PhaseJet>(solve_riccati(chart.metric(), chart, spec.H0));
  auto amp = std::make_shared<AmplitudeJet>(solve_transport(chart.metric(), chart, *phase));
  return Beam(spec, std::move(phase), std::move(amp));
}

Beam conjugate_beam(const Beam& beam) {
  return beam.conjugate();
}

ScalarField sample_beam(const Beam& beam, GridPtr grid) {
  ScalarField u = ScalarField::zeros(grid);
  const std::size_t ns = grid->spatial_count();
  parallel_for(static_cast<std::size_t>(grid->nt() + 1), default_jobs(), [&](std::size_t l) {
    const int level = static_cast<int>(l);
    for (std::size_t node = 0; node < ns; ++node) u.at(level, node) = beam(grid->coords(level, node));
  });
  return u;
}

SigmaField beam_trace(const Beam& beam, GridPtr grid) {
  SigmaField f = SigmaField::zeros(grid);
  const auto& sig = grid->sigma();
  parallel_for(static_cast<std::size_t>(grid->nt() + 1), default_jobs(), [&](std::size_t l) {
    const int level = static_cast<int>(l);
    for (std::size_t j = 0; j < sig.size(); ++j) f.at(level, j) = beam(grid->coords(level, sig[j].node));
  });
  return f;
}

void check_resolution(const Beam& beam, const SpacetimeGrid& grid, double nodes_per_wavelength) {
  const auto& chart = beam.chart();
  const int n = chart.spatial_dim();
  const double kmax = 2.0 * M_PI / nodes_per_wavelength;
  for (int i = 0; i <= 4; ++i) {
    double s = chart.s_min() + (chart.s_max() - chart.s_min()) * i / 4.0;
    Mat Jinv = chart.jacobian(s, Vec::Zero(n)).inverse();
    for (int a = 0; a <= n; ++a) {
      double step = a == 0 ? grid.dt() : grid.dx(a - 1);
      double k = beam.spec().tau * std::abs(Jinv(1, a));
      if (k * step > kmax)
        throw NumericalError("grid does not resolve the beam oscillation: " + format_double(2.0 * M_PI / (k * step)) +
                             " nodes per wavelength along axis " + std::to_string(a));
    }
  }
}

cplx beam_box(const Beam& beam, const Vec& p) {
  const auto& chart = beam.chart();
  const auto& metric = chart.metric();
  const int d = chart.spatial_dim() + 1;
  ChartPoint cp = chart.inverse(p);
  if (!cp.inside || cp.y.norm() >= beam.spec().delta) return 0.0;
  Beam::Jet jet = beam.chart_jet(cp.s, cp.y);
  Mat J = chart.jacobian(cp.s, cp.y);
  Mat Ginv = (J.transpose() * metric.g(p) * J).inverse();
  if (chart.affine()) return -(Ginv.cast<cplx>().cwiseProduct(jet.dd)).sum();
  // Christoffel symbols of the pulled-back metric from the transformation law.
  Mat Jinv = J.inverse();
  auto d2F = chart.second_derivatives(cp.s, cp.y);
  Christoffel gam = christoffel(metric, p);
  cplx box = 0.0;
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b) {
      Vec w(d);
      for (int e = 0; e < d; ++e) {
        double v = d2F[e](a, b);
        for (int f = 0; f < d; ++f)
          for (int h = 0; h < d; ++h) v += gam[e](f, h) * J(f, a) * J(h, b);
        w(e) = v;
      }
      Vec gt = Jinv * w;
      cplx corr = 0.0;
      for (int c = 0; c < d; ++c) corr += gt(c) * jet.d(c);
      box -= Ginv(a, b) * (jet.dd(a, b) - corr);
    }
  return box;
}

ResidualResult beam_residual(const Beam& beam, GridPtr grid) {
  check_resolution(beam, *grid);
  ResidualResult res;
  res.tau = beam.spec().tau;
  res.field = ScalarField::zeros(grid);
  const std::size_t ns = grid->spatial_count();
  parallel_for(static_cast<std::size_t>(grid->nt() + 1), default_jobs(), [&](std::size_t l) {
    const int level = static_cast<int>(l);
    for (std::size_t node = 0; node < ns; ++node) res.field.at(level, node) = beam_box(beam, grid->coords(level, node));
  });
  res.l2 = l2_norm(res.field);
  return res;
}

namespace {

void require_quiet_levels(const Beam& beam, const SpacetimeGrid& grid, int l0, int l1) {
  const double tol = 1e-10 * beam.scale();
  for (int level : {l0, l1})
    for (std::size_t node = 0; node < grid.spatial_count(); ++node)
      if (std::abs(beam(grid.coords(level, node))) > tol)
        throw NumericalError("beam geodesic touches the Cauchy surface t = " + format_double(grid.t(level)));
}

}  // namespace

cplx CorrectedBeam::operator()(const Vec& p) const {
  return interpolate(v, p);
}

CorrectedBeam correct_beam(const Beam& beam, BeamDirection direction, GridPtr grid) {
  const auto& chart = beam.chart();
  if (direction == BeamDirection::forward)
    require_quiet_levels(beam, *grid, 0, 1);
  else
    require_quiet_levels(beam, *grid, grid->nt(), grid->nt() - 1);
  CorrectedBeam cb;
  cb.beam = std::make_shared<Beam>(beam);
  cb.direction = direction;
  SigmaField f = beam_trace(beam, grid);
  // Levels next to the Cauchy surface carry at most 1e-10 relative values; zero them exactly.
  const int quiet0 = direction == BeamDirection::forward ? 0 : grid->nt();
  for (std::size_t j = 0; j < grid->sigma_count(); ++j) f.at(quiet0, j) = 0.0;
  if (direction == BeamDirection::forward)
    cb.v = solve_linear(chart.metric_ptr(), nullptr, f, grid);
  else
    cb.v = solve_linear_backward(chart.metric_ptr(), f, grid);
  ScalarField vt = sample_beam(beam, grid);
  cb.r = cb.v - vt;
  return cb;
}

CorrectionNorms correction_norms(const Beam& beam, GridPtr grid) {
  require_quiet_levels(beam, *grid, 0, 1);
  const auto& chart = beam.chart();
  SigmaField f = beam_trace(beam, grid);
  for (std::size_t j = 0; j < grid->sigma_count(); ++j) f.at(0, j) = 0.0;
  WaveOperator op(chart.metric_ptr(), grid);
  const std::size_t ns = grid->spatial_count();
  const auto ws = spatial_weights(*grid);
  const auto wt = trapezoid_weights(grid->nt(), grid->dt());
  Slice zero(ns, cplx(0.0)), vt(ns);
  double rr = 0.0, bb = 0.0;
  const int jobs = default_jobs();
  const std::size_t chunk = std::max<std::size_t>(1, ns / static_cast<std::size_t>(4 * jobs));
  const std::size_t nchunks = (ns + chunk - 1) / chunk;
  op.march(nullptr, f, zero, zero, [&](int level, const Slice& u) {
    parallel_for(nchunks, jobs, [&](std::size_t c) {
      for (std::size_t node = c * chunk; node < std::min(ns, (c + 1) * chunk); ++node)
        vt[node] = beam(grid->coords(level, node));
    });
    double r_level = 0.0, b_level = 0.0;
    for (std::size_t node = 0; node < ns; ++node) {
      r_level += ws[node] * std::norm(u[node] - vt[node]);
      b_level += ws[node] * std::norm(vt[node]);
    }
    rr += wt[level] * r_level;
    bb += wt[level] * b_level;
  });
  CorrectionNorms out;
  out.r_l2 = std::sqrt(rr);
  out.beam_l2 = std::sqrt(bb);
  if (!std::isfinite(out.r_l2)) throw NumericalError("correction norm is not finite");
  return out;
}

PhaseHessian phase_hessian(const Beam& b1, const Beam& b2, const Vec& e) {
  const auto& metric = b1.chart().metric();
  const int n = metric.spatial_dim();
  const int d = n + 1;
  if (b2.spatial_dim() != n) throw ConfigError("beams live in different dimensions");
  Mat Hc = Mat::Zero(d, d);
  for (const Beam* b : {&b1, &b2}) {
    ChartPoint cp = b->chart().inverse(e);
    if (!cp.inside) throw NumericalError("event lies outside a beam tube");
    Mat Jinv = b->chart().jacobian(cp.s, cp.y).inverse();
    Mat Jy = Jinv.bottomRows(n);
    Mat imH = b->phase().at(cp.s).imag();
    Hc += 2.0 * Jy.transpose() * imH * Jy;
  }
  PhaseHessian out;
  out.frame = Mat::Zero(d, d);
  out.frame.col(0) = unit_time_normal(metric, e);
  auto sb = spatial_basis(metric, e);
  for (int k = 0; k < n; ++k) out.frame.block(1, k + 1, n, 1) = sb[k];
  out.H = out.frame.transpose() * Hc * out.frame;
  out.H = 0.5 * (out.H + out.H.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Mat> es(out.H);
  double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  if (!(lo > 1e-8 * hi)) throw NumericalError("phase Hessian is degenerate (parallel tangents)");
  out.det = out.H.determinant();
  return out;
}

double beam_lp_norm(const Beam& beam, const SpacetimeGrid& grid, double p) {
  const auto& metric = beam.chart().metric();
  const auto ws = spatial_weights(grid);
  const auto wt = trapezoid_weights(grid.nt(), grid.dt());
  std::vector<double> per_level(static_cast<std::size_t>(grid.nt() + 1), 0.0);
  parallel_for(per_level.size(), default_jobs(), [&](std::size_t l) {
    const int level = static_cast<int>(l);
    double acc = 0.0;
    for (std::size_t node = 0; node < grid.spatial_count(); ++node) {
      Vec x = grid.coords(level, node);
      cplx v = beam(x);
      if (v != 0.0) acc += ws[node] * metric.sqrt_abs_det(x) * std::pow(std::abs(v), p);
    }
    per_level[l] = wt[l] * acc;
  });
  double total = 0.0;
  for (double v : per_level) total += v;
  return std::pow(total, 1.0 / p);
}

void write_beam_csv(const Beam& beam, const SpacetimeGrid& grid, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path);
  const int n = grid.spatial_dim();
  out << "t";
  for (int k = 1; k <= n; ++k) out << ",x" << k;
  out << ",s";
  for (int k = 1; k <= n; ++k) out << ",y" << k;
  out << ",re,im\n";
  for (int level = 0; level <= grid.nt(); ++level)
    for (std::size_t node = 0; node < grid.spatial_count(); ++node) {
      Vec p = grid.coords(level, node);
      ChartPoint cp = beam.chart().inverse(p);
      if (!cp.inside) continue;
      cplx v = beam.at_chart(cp.s, cp.y);
      if (v == 0.0) continue;
      for (int a = 0; a <= n; ++a) out << (a ? "," : "") << format_double(p(a));
      out << "," << format_double(cp.s);
      for (int k = 0; k < n; ++k) out << "," << format_double(cp.y(k));
      out << "," << format_double(v.real()) << "," << format_double(v.imag()) << "\n";
    }
}

}  // namespace qrecon
