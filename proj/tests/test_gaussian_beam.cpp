#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "qrecon/gaussian_beam.hpp"

#include <cmath>
#include <random>

using namespace qrecon;

namespace {

Domain box(int n, double T) {
  Domain d;
  d.T = T;
  d.lower = Vec::Zero(n);
  d.upper = Vec::Ones(n);
  return d;
}

Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

Vec v3(double a, double b, double c) {
  Vec v(3);
  v << a, b, c;
  return v;
}

CMat iI(int n, double scale = 1.0) {
  return cplx(0.0, scale) * CMat::Identity(n, n);
}

// Right-moving beam through (0.9, 0.5) in [0,2] x [0,1].
BeamSpec spec_1d(double tau, MetricPtr metric = make_minkowski(1), double dir = 1.0) {
  Domain d = box(1, 2.0);
  Vec base = v2(0.9, 0.5);
  Vec nd = null_vector(*metric, base, Vec::Constant(1, dir), TimeDirection::future);
  BeamSpec spec;
  spec.chart = trace_chart(metric, d, Event::from_coords(base), nd, 0.2, 0.3);
  spec.tau = tau;
  spec.delta = 0.15;
  spec.H0 = iI(1);
  return spec;
}

BeamSpec spec_2d(double tau, MetricPtr metric = make_minkowski(2), CMat H0 = iI(2)) {
  Domain d = box(2, 2.0);
  Vec base = v3(1.0, 0.5, 0.5);
  Vec nd = null_vector(*metric, base, v2(1.0, 0.3), TimeDirection::future);
  BeamSpec spec;
  spec.chart = trace_chart(metric, d, Event::from_coords(base), nd, 0.2, 0.3);
  spec.tau = tau;
  spec.delta = 0.15;
  spec.H0 = H0;
  return spec;
}

GridPtr grid_1d(int nx, double T = 2.0) {
  return std::make_shared<SpacetimeGrid>(
      SpacetimeGrid::with_cfl(*make_minkowski(1), box(1, T), {nx}, 0.9));
}

}  // namespace

TEST_CASE("Riccati in 1+1 Minkowski keeps H constant and positive") {
  BeamSpec spec = spec_1d(40.0);
  PhaseJet jet = solve_riccati(spec.chart->metric(), *spec.chart, spec.H0);
  CHECK(jet.min_im_eigenvalue > 0.0);
  for (const auto& H : jet.H) CHECK(std::abs(H(0, 0) - cplx(0.0, 1.0)) < 1e-12);
  for (double s : {-0.5, 0.0, 0.4}) CHECK(eikonal_residual(*spec.chart, jet, s) <= 1e-8);
}

TEST_CASE("Riccati in 2+1 Minkowski solves the eikonal equation to second order") {
  BeamSpec spec = spec_2d(40.0);
  PhaseJet jet = solve_riccati(spec.chart->metric(), *spec.chart, spec.H0);
  CHECK(jet.min_im_eigenvalue > 0.0);
  for (double s : {-0.6, -0.1, 0.0, 0.3, 0.7}) CHECK(eikonal_residual(*spec.chart, jet, s) <= 1e-8);
  // Flat closed form: Y = I - 4 s P H0, Z = H0.
  for (std::size_t i = 0; i < jet.s.size(); i += 37) {
    CMat P = CMat::Identity(2, 2);
    P(0, 0) = 0.0;
    CMat Y = CMat::Identity(2, 2) - 4.0 * jet.s[i] * P * spec.H0;
    CHECK((jet.H[i] - spec.H0 * Y.inverse()).norm() < 1e-9);
  }
}

TEST_CASE("Im H stays positive for random initial Hessians") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> N;
  for (int trial = 0; trial < 5; ++trial) {
    Mat A(2, 2), B(2, 2);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        A(i, j) = N(rng);
        B(i, j) = N(rng);
      }
    Mat im = A * A.transpose() + 0.2 * Mat::Identity(2, 2);
    Mat re = 0.5 * (B + B.transpose());
    CMat H0 = re.cast<cplx>() + cplx(0.0, 1.0) * im.cast<cplx>();
    BeamSpec spec = spec_2d(40.0, make_minkowski(2), H0);
    PhaseJet jet = solve_riccati(spec.chart->metric(), *spec.chart, spec.H0);
    for (const auto& H : jet.H) {
      Eigen::SelfAdjointEigenSolver<Mat> es(Mat(0.5 * (H.imag() + H.imag().transpose())));
      CHECK(es.eigenvalues().minCoeff() > 0.0);
    }
  }
}

TEST_CASE("Riccati curvature block matches the pulled-back metric") {
  // Second y-derivatives of G^{y1 y1} on the axis equal 2 M.
  BeamSpec spec = spec_2d(40.0, make_perturbed_beta(2, 0.5));
  const auto& chart = *spec.chart;
  for (double s : {-0.3, 0.2}) {
    CMat M = riccati_curvature(chart, s);
    auto g11 = [&](const Vec& y) { return chart.pulled_back_metric(s, y).inverse()(1, 1); };
    auto hess = [&](double h) {
      Mat D(2, 2);
      Vec z = Vec::Zero(2);
      for (int k = 0; k < 2; ++k)
        for (int l = 0; l < 2; ++l) {
          Vec ek = Vec::Zero(2), el = Vec::Zero(2);
          ek(k) = h;
          el(l) = h;
          D(k, l) = (g11(z + ek + el) - g11(z + ek - el) - g11(z - ek + el) + g11(z - ek - el)) / (4 * h * h);
        }
      return D;
    };
    Mat D = (4.0 * hess(0.02) - hess(0.04)) / 3.0;
    Mat M2 = 2.0 * M.real();
    CHECK(M2.norm() > 1e-2);
    CHECK((D - M2).norm() <= 0.05 * M2.norm());
  }
}

TEST_CASE("curved Riccati solution reduces the eikonal residual") {
  BeamSpec spec = spec_2d(40.0, make_perturbed_beta(2, 0.5));
  const auto& chart = *spec.chart;
  PhaseJet jet = solve_riccati(chart.metric(), chart, spec.H0);
  // Same initial data with the curvature term dropped.
  PhaseJet flat = jet;
  CMat P = CMat::Identity(2, 2);
  P(0, 0) = 0.0;
  for (std::size_t i = 0; i < flat.s.size(); ++i) {
    CMat Y = CMat::Identity(2, 2) - 4.0 * flat.s[i] * P * spec.H0;
    flat.H[i] = spec.H0 * Y.inverse();
    flat.dH[i] = 4.0 * flat.H[i] * P * flat.H[i];
    flat.ddH[i] = 4.0 * (flat.dH[i] * P * flat.H[i] + flat.H[i] * P * flat.dH[i]);
  }
  for (double s : {-0.4, 0.4}) {
    double with = eikonal_residual(chart, jet, s, 0.02);
    double without = eikonal_residual(chart, flat, s, 0.02);
    CHECK(with < 0.05 * without);
  }
}

TEST_CASE("phase vanishes on the axis with differential dy1") {
  Beam beam = assemble_beam(spec_2d(40.0));
  const double h = 1e-6;
  for (double s : {-0.4, 0.0, 0.5}) {
    Vec z = Vec::Zero(2);
    CHECK(std::abs(beam.theta(s, z)) == 0.0);
    CHECK(std::abs((beam.theta(s, v2(h, 0)) - beam.theta(s, v2(-h, 0))) / (2 * h) - 1.0) < 1e-9);
    CHECK(std::abs((beam.theta(s, v2(0, h)) - beam.theta(s, v2(0, -h))) / (2 * h)) < 1e-9);
    CHECK(std::abs((beam.theta(s + h, z) - beam.theta(s - h, z)) / (2 * h)) < 1e-9);
  }
}

TEST_CASE("transport along a 2+1 Minkowski beam") {
  BeamSpec spec = spec_2d(40.0);
  const auto& chart = *spec.chart;
  PhaseJet jet = solve_riccati(chart.metric(), chart, spec.H0);
  AmplitudeJet amp = solve_transport(chart.metric(), chart, jet);
  CHECK(amp.at(0.0) == cplx(1.0));
  CHECK(amp.min_abs_det > 0.5);
  CHECK(amp.max_transport_residual <= 1e-6);
  // Closed form for H0 = iI: b00 = (1 - 4 i s)^(-1/2).
  for (double s : {-0.5, 0.25, 0.6}) CHECK(std::abs(amp.at(s) - 1.0 / std::sqrt(cplx(1.0, -4.0 * s))) < 1e-8);
}

TEST_CASE("transport in 1+1 Minkowski is trivial") {
  BeamSpec spec = spec_1d(40.0);
  Beam beam = assemble_beam(spec);
  for (std::size_t i = 0; i < beam.amplitude().s.size(); i += 50) CHECK(std::abs(beam.amplitude().b00[i] - 1.0) < 1e-12);
}

TEST_CASE("beam value at the normalization point") {
  for (double tau : {40.0, 160.0}) {
    BeamSpec spec = spec_2d(tau);
    spec.s0 = 0.3;
    Beam beam = assemble_beam(spec);
    Vec p = spec.chart->path().position(0.3);
    CHECK(std::abs(std::abs(beam(p)) - std::pow(tau, 0.25)) < 1e-8 * std::pow(tau, 0.25));
    CHECK(std::abs(beam.at_chart(0.0, Vec::Zero(2))) != doctest::Approx(std::pow(tau, 0.25)));
  }
}

TEST_CASE("Gaussian envelope bound across the tube") {
  Beam beam = assemble_beam(spec_2d(40.0));
  const double tau = 40.0, sc = beam.scale();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  // Fit c on the inner tube.
  double c_hat = std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, Vec>> pts;
  for (int i = 0; i < 400; ++i) {
    Vec y = 0.15 * v2(U(rng), U(rng));
    double s = 0.6 * U(rng);
    if (y.norm() >= 0.15 || y.norm() < 1e-3) continue;
    pts.emplace_back(s, y);
    double ratio = std::abs(beam.at_chart(s, y)) / (sc * std::abs(beam.amplitude().at(s)));
    if (y.norm() < 0.075) c_hat = std::min(c_hat, -std::log(ratio) / (tau * y.squaredNorm()));
  }
  CHECK(c_hat > 0.0);
  for (const auto& [s, y] : pts) {
    double bound = 1.05 * sc * std::abs(beam.amplitude().at(s)) * std::exp(-c_hat * tau * y.squaredNorm());
    CHECK(std::abs(beam.at_chart(s, y)) <= bound);
  }
  CHECK(beam.at_chart(0.0, v2(0.15, 0.0)) == cplx(0.0));
}

TEST_CASE("L4 norm stays bounded along the tau ladder") {
  auto g = grid_1d(400);
  Beam b40 = assemble_beam(spec_1d(40.0));
  double n40 = beam_lp_norm(b40, *g, 4.0);
  double n320 = beam_lp_norm(b40.with_tau(320.0), *g, 4.0);
  CHECK(n40 > 0.0);
  CHECK(n320 / n40 >= 0.5);
  CHECK(n320 / n40 <= 2.0);
  // Closed form over the full tube: |v|^4 = tau^(1/2) e^(-4 tau y^2), dV = 2 ds dy, over s in a range
  // of length 1.0 (x from 0 to 1 along t - x = 0.4 covers s in [-0.5, 0.5]).
  const double exact4 = 2.0 * 1.0 * std::sqrt(M_PI / 4.0);
  CHECK(std::abs(std::pow(n320, 4.0) - exact4) < 0.05 * exact4);
}

TEST_CASE("residual of the 1+1 Minkowski beam vanishes") {
  auto g = grid_1d(400);
  Beam beam = assemble_beam(spec_1d(80.0));
  ResidualResult r = beam_residual(beam, g);
  CHECK(r.tau == 80.0);
  CHECK(r.l2 == 0.0);
}

TEST_CASE("residual is supported in the tube and checks resolution") {
  auto metric = make_minkowski(2);
  auto g = std::make_shared<SpacetimeGrid>(SpacetimeGrid::with_cfl(*metric, box(2, 2.0), {40, 40}, 0.9));
  Beam beam = assemble_beam(spec_2d(10.0));
  ResidualResult r = beam_residual(beam, g);
  CHECK(r.l2 > 0.0);
  for (int l = 0; l <= g->nt(); l += 3)
    for (std::size_t node = 0; node < g->spatial_count(); ++node) {
      ChartPoint cp = beam.chart().inverse(g->coords(l, node));
      if (!cp.inside || cp.y.norm() >= 0.15) CHECK(r.field.at(l, node) == cplx(0.0));
    }
  CHECK_THROWS_AS(beam_residual(beam.with_tau(200.0), g), NumericalError);
}

TEST_CASE("analytic residual matches finite differences on a curved metric") {
  auto metric = make_perturbed_beta(1, 0.3);
  BeamSpec spec = spec_1d(20.0, metric);
  Beam beam = assemble_beam(spec);
  // Oracle: divergence form -1/sqrt|g| d_a(sqrt|g| g^ab d_b v) by central differences in (t, x),
  // Richardson-extrapolated over two steps.
  auto fd_box = [&](const Vec& p, double h) {
    auto flux = [&](const Vec& q, int a) {
      Mat gi = metric->g_inv(q);
      cplx acc = 0.0;
      for (int b = 0; b < 2; ++b) {
        Vec e = Vec::Zero(2);
        e(b) = h;
        acc += gi(a, b) * (beam(Vec(q + e)) - beam(Vec(q - e))) / (2 * h);
      }
      return metric->sqrt_abs_det(q) * acc;
    };
    cplx div = 0.0;
    for (int a = 0; a < 2; ++a) {
      Vec e = Vec::Zero(2);
      e(a) = h;
      div += (flux(Vec(p + e), a) - flux(Vec(p - e), a)) / (2 * h);
    }
    return -div / metric->sqrt_abs_det(p);
  };
  double max_res = 0.0;
  for (double y : {0.0, 0.03, -0.05})
    for (double s : {-0.3, 0.0, 0.3}) {
      Vec p = spec.chart->forward(s, Vec::Constant(1, y));
      cplx oracle = (4.0 * fd_box(p, 1e-3) - fd_box(p, 2e-3)) / 3.0;
      cplx an = beam_box(beam, p);
      max_res = std::max(max_res, std::abs(an));
      CHECK(std::abs(an - oracle) <= 2e-3 + 0.02 * std::abs(an));
    }
  CHECK(max_res > 0.05);
}

TEST_CASE("forward correction is a discrete solution with the beam trace") {
  auto g = grid_1d(200);
  Beam beam = assemble_beam(spec_1d(40.0));
  CorrectedBeam cb = correct_beam(beam, BeamDirection::forward, g);
  WaveOperator op(beam.chart().metric_ptr(), g);
  ScalarField res = op.residual(cb.v, nullptr);
  CHECK(res.max_abs() <= 1e-8 * cb.v.max_abs() / (g->dx(0) * g->dx(0)));
  SigmaField f = beam_trace(beam, g);
  for (int l = 1; l <= g->nt(); ++l)
    for (std::size_t j = 0; j < g->sigma_count(); ++j) CHECK(cb.v.at(l, g->sigma()[j].node) == f.at(l, j));
  for (std::size_t node = 0; node < g->spatial_count(); ++node) CHECK(cb.v.at(0, node) == cplx(0.0));
  // The correction is a discretisation error: small against the beam.
  CHECK(l2_norm(cb.r) < 0.5 * l2_norm(sample_beam(beam, g)));
  CorrectionNorms cn = correction_norms(beam, g);
  CHECK(cn.r_l2 == doctest::Approx(l2_norm(cb.r)).epsilon(1e-10));
}

TEST_CASE("backward correction vanishes at T") {
  auto g = grid_1d(200);
  Beam beam = assemble_beam(spec_1d(40.0, make_minkowski(1), -1.0));
  CorrectedBeam cb = correct_beam(beam, BeamDirection::backward, g);
  for (std::size_t node = 0; node < g->spatial_count(); ++node) {
    CHECK(cb.v.at(g->nt(), node) == cplx(0.0));
    CHECK(std::abs(cb.v.at(g->nt() - 1, node)) < 1e-12);
  }
  CHECK(l2_norm(cb.r) < 0.5 * l2_norm(sample_beam(beam, g)));
}

TEST_CASE("correction rejects beams touching the Cauchy surface") {
  auto metric = make_minkowski(1);
  Domain d = box(1, 2.0);
  Vec base = v2(0.3, 0.5);
  BeamSpec spec;
  spec.chart = trace_chart(metric, d, Event::from_coords(base), v2(1.0, 1.0), 0.2, 0.3);
  spec.tau = 40.0;
  spec.delta = 0.15;
  spec.H0 = iI(1);
  Beam beam = assemble_beam(spec);
  CHECK_THROWS_AS(correct_beam(beam, BeamDirection::forward, grid_1d(100)), NumericalError);
}

TEST_CASE("correction ratio decreases with tau on a co-refined grid") {
  Beam beam = assemble_beam(spec_1d(40.0));
  CorrectionNorms a = correction_norms(beam, grid_1d(60));
  CorrectionNorms b = correction_norms(beam.with_tau(80.0), grid_1d(224));
  CHECK(b.ratio() < a.ratio());
}

TEST_CASE("conjugate beams") {
  Beam beam = assemble_beam(spec_2d(40.0));
  Beam c = conjugate_beam(beam);
  Beam cc = conjugate_beam(c);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    Vec p = v3(2.0 * U(rng), U(rng), U(rng));
    cplx v = beam(p);
    CHECK(c(p) == std::conj(v));
    CHECK(cc(p) == v);
    CHECK(std::abs(c(p)) == std::abs(v));
    cplx prod = v * c(p);
    CHECK(prod.imag() == 0.0);
    CHECK(prod.real() >= 0.0);
  }
}

TEST_CASE("phase Hessian of two 1+1 null beams") {
  auto metric = make_minkowski(1);
  Domain d = box(1, 2.0);
  Vec e = v2(0.9, 0.5);
  auto make = [&](double dir, double scale) {
    BeamSpec spec;
    spec.chart = trace_chart(metric, d, Event::from_coords(e), v2(1.0, dir), 0.2, 0.3);
    spec.tau = 40.0;
    spec.delta = 0.15;
    spec.H0 = iI(1, scale);
    return assemble_beam(spec);
  };
  Beam b1 = make(1.0, 1.0), b2 = make(-1.0, 1.0);
  PhaseHessian H = phase_hessian(b1, b2, e);
  // Oracle: y = (t - x)/2 and (t + x)/2, each contributing 2 J^T J.
  CHECK((H.H - Mat::Identity(2, 2)).norm() < 1e-12);
  CHECK(H.det > 0.0);
  PhaseHessian Hs = phase_hessian(b2, b1, e);
  CHECK((Hs.H - H.H).norm() < 1e-14);
  PhaseHessian H2 = phase_hessian(make(1.0, 2.0), make(-1.0, 2.0), e);
  double factor = H2.H.norm() / H.H.norm();
  CHECK(factor >= 1.5);
  CHECK(factor <= 2.5);
  CHECK_THROWS_AS(phase_hessian(b1, b1, e), NumericalError);
}

TEST_CASE("phase Hessian in 2+1 is positive definite for distinct tangents") {
  auto metric = make_minkowski(2);
  Domain d = box(2, 2.0);
  Vec e = v3(1.0, 0.5, 0.5);
  auto make = [&](double angle) {
    BeamSpec spec;
    Vec nd = null_vector(*metric, e, v2(std::cos(angle), std::sin(angle)), TimeDirection::future);
    spec.chart = trace_chart(metric, d, Event::from_coords(e), nd, 0.2, 0.3);
    spec.tau = 40.0;
    spec.delta = 0.15;
    spec.H0 = iI(2);
    return assemble_beam(spec);
  };
  PhaseHessian H = phase_hessian(make(0.0), make(1.2), e);
  Eigen::SelfAdjointEigenSolver<Mat> es(H.H);
  CHECK(es.eigenvalues().minCoeff() > 0.0);
  CHECK(H.det > 0.0);
}

TEST_CASE("beam trace is compatible with vanishing Cauchy data to order 2") {
  auto g = grid_1d(200);
  Beam beam = assemble_beam(spec_1d(40.0));
  SigmaField f = beam_trace(beam, g);
  Slice zero(g->spatial_count(), cplx(0.0));
  CompatibilityResult c = compatibility_check(f, &zero, &zero, nullptr, 2);
  CHECK(c.pass);
}

TEST_CASE("BeamSpec validation") {
  BeamSpec spec = spec_1d(40.0);
  spec.H0 = CMat::Identity(1, 1);
  CHECK_THROWS_AS(assemble_beam(spec), ConfigError);
  spec = spec_1d(0.5);
  CHECK_THROWS_AS(assemble_beam(spec), ConfigError);
  spec = spec_1d(40.0);
  spec.delta = 0.5;
  CHECK_THROWS_AS(assemble_beam(spec), ConfigError);
  spec = spec_1d(40.0);
  spec.order = 3;
  CHECK_THROWS_AS(assemble_beam(spec), ConfigError);
}
