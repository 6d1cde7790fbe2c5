#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numbers>
#include <random>

#include "vibro/coupling.hpp"
#include "vibro/quadrature.hpp"

using namespace vibro;
using std::numbers::pi;

namespace {

// Unit interval, driven piston at x = 0, free piston at x = 1.
CoupledProblem interval_problem(double g, int modes, double t_end, double p0 = 1.0) {
    CavityGeometry geom;
    geom.edges = {1.0};
    geom.patches.push_back(full_face_patch(geom, 0, 0, 1.0));
    geom.patches.push_back(full_face_patch(geom, 0, 1, 1.0));
    CoupledProblem pb;
    pb.model = ModalModel::build(geom, modes, 1);
    pb.cfg = {g, 1.0, 1.0, g * g};
    pb.medium = {1.0, g};
    pb.op = {50.0, 0.5, 1.0};
    pb.lapse = TimeLapse(DampingFunction::exponential(2.0));
    pb.src.p0 = p0;
    pb.src.omega = 2.0;
    pb.src.mask = {true, false};
    pb.src.ramp = 1.0;
    const double fmax = std::max(std::sqrt(pb.model.cavity->eigenvalues().maxCoeff()), std::sqrt(50.0));
    pb.grid = TimeGrid::for_frequency(t_end, fmax);
    return pb;
}

PicardOptions kmax(int k, bool throw_on_divergence = true) {
    PicardOptions o;
    o.k_max = k;
    o.throw_on_divergence = throw_on_divergence;
    return o;
}

cplx quad_harmonic(double w, double lam, double t, double c) {
    const double W = c * c * lam;
    auto f = [&](double tau) { return std::exp(cplx(0.0, w * tau)) * sine_kernel(W, t - tau); };
    return integrate_adaptive<cplx>(f, 0.0, t, 1e-14, 1e-13, 20000);
}

}  // namespace

TEST(CouplingConfig, DerivedQuantitiesAndValidation) {
    CouplingConfig c{1.2, 1000.0, 2e-3, 1e-6};
    EXPECT_DOUBLE_EQ(c.sigma_m(), 2.0);
    EXPECT_DOUBLE_EQ(c.sigma0(), 2.4e-3);
    EXPECT_DOUBLE_EQ(c.g(), 1.2e-3);
    EXPECT_NO_THROW(c.validate());
    EXPECT_FALSE(c.scaling_warning().has_value());
    c.eps = 1e-3;
    EXPECT_TRUE(c.scaling_warning().has_value());
    c.rho_m = 0.0;
    try {
        c.validate();
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
    }
    CouplingConfig heavy{2.0, 1.0, 1.0, 1.0};
    EXPECT_THROW(heavy.validate(), Error);
}

TEST(HarmonicSource, EnvelopeAndValidation) {
    HarmonicSource s;
    s.omega = 3.0;
    s.ramp = 2.0;
    s.t_off = 5.0;
    EXPECT_EQ(s.envelope(0.0).first, 0.0);
    EXPECT_NEAR(s.envelope(1.0).first, 0.5, 1e-15);
    EXPECT_EQ(s.envelope(2.5).first, 1.0);
    EXPECT_EQ(s.envelope(5.0).first, 0.0);
    const double h = 1e-6, t = 0.7;
    EXPECT_NEAR(std::abs(s.rate(t) - (s.value(t + h) - s.value(t - h)) / (2 * h)), 0.0, 1e-8);
    s.omega = 0.0;
    EXPECT_THROW(s.validate(1), Error);
    s.omega = 1.0;
    s.mask = {true, false};
    EXPECT_THROW(s.validate(1), Error);
}

TEST(HarmonicIntegral, EmptyIntervalIsZero) {
    EXPECT_EQ(harmonic_integral(2.0, 3.0, 0.0, 1.5).value, cplx(0.0));
}

TEST(HarmonicIntegral, MatchesQuadratureOnRandomDraws) {
    std::mt19937_64 rng(20240611);
    std::uniform_real_distribution<double> uw(0.1, 10.0), ul(0.0, 30.0), ut(0.0, 5.0), uc(0.5, 2.0);
    for (int i = 0; i < 100; ++i) {
        const double w = uw(rng), lam = ul(rng), t = ut(rng), c = uc(rng);
        const cplx v = harmonic_integral(w, lam, t, c).value;
        const cplx q = quad_harmonic(w, lam, t, c);
        EXPECT_LT(std::abs(v - q), 1e-10 * std::max(1.0, std::abs(q))) << w << " " << lam << " " << t << " " << c;
    }
}

TEST(HarmonicIntegral, ZeroFrequencyLimit) {
    const double lam = 2.3, c = 1.4, t = 1.7, W = c * c * lam;
    const cplx v = harmonic_integral(0.0, lam, t, c).value;
    EXPECT_NEAR(std::abs(v - (1.0 - std::cos(t * std::sqrt(W))) / W), 0.0, 1e-14);
    EXPECT_NEAR(std::abs(harmonic_integral(0.0, 0.0, t, c).value - 0.5 * t * t), 0.0, 1e-15);
}

TEST(HarmonicIntegral, ResonantLimitBranch) {
    const double w = 2.0, c = 1.0, t = 3.1;
    const auto r = harmonic_integral(w, w * w, t, c);
    EXPECT_TRUE(r.limit_branch);
    EXPECT_LT(std::abs(r.value - quad_harmonic(w, w * w, t, c)), 1e-12);
    const auto near = harmonic_integral(w, w * w * (1 + 1e-10), t, c);
    EXPECT_TRUE(near.limit_branch);
    EXPECT_LT(std::abs(near.value - quad_harmonic(w, w * w * (1 + 1e-10), t, c)), 1e-8);
    try {
        harmonic_integral(w, w * w, t, c, false);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::resonance_singularity);
    }
}

TEST(HarmonicIntegral, ResonanceFunctionParts) {
    const double w = 1.3, lam = 4.0, t = 0.9;
    const auto r = harmonic_integral(w, lam, t, 1.0);
    const double Om = 2.0;
    EXPECT_LT(std::abs(r.R - (r.R_plus * std::exp(cplx(0, Om * t)) + r.R_minus * std::exp(cplx(0, -Om * t)))), 1e-15);
}

TEST(ClosedFormMeanPressure, ZeroAmplitudeAndLowFrequencyScaling) {
    CavityGeometry g;
    g.edges = {1.0};
    g.patches.push_back(full_face_patch(g, 0, 0, 1.0));
    AcousticMedium med{1.0, 1.0};
    HarmonicSource s;
    s.omega = 1.0;
    TimeGrid grid(2.0, 20);
    auto f = closed_form_mean_pressure(med, s, g, 0, 8, 0.0, grid, {0.0, 0.5});
    EXPECT_EQ(f.value.norm(), 0.0);
    s.omega = 1e-4;
    const double a1 = closed_form_mean_pressure(med, s, g, 0, 8, 1.0, grid, {0.3}).value.norm();
    s.omega = 2e-4;
    const double a2 = closed_form_mean_pressure(med, s, g, 0, 8, 1.0, grid, {0.3}).value.norm();
    EXPECT_NEAR(a2 / a1, 4.0, 1e-6);
}

TEST(ClosedFormMeanPressure, MatchesModalSolveOnInterval) {
    CavityGeometry g;
    g.edges = {1.3};
    g.patches.push_back(full_face_patch(g, 0, 1, 1.0));
    auto model = ModalModel::build(g, 24, 1);
    AcousticMedium med{1.1, 0.9};
    HarmonicSource s;
    s.omega = 3.7;
    const cplx U(0.02, -0.01);
    const TimeGrid grid = TimeGrid::for_frequency(4.0, med.c * std::sqrt(model.cavity->eigenvalues().maxCoeff()));
    BoundaryVibration bv{{std::make_shared<HarmonicSignal>(Eigen::VectorXcd::Constant(1, U), s.omega)}};
    const ModalHistory p = solve_pressure(model, bv, med, grid);
    const std::vector<double> sv = {0.0, 0.25, 0.6, 1.0};
    const auto f = closed_form_mean_pressure(med, s, g, 0, 24, U, grid, sv);
    Eigen::MatrixXcd ref(grid.size(), static_cast<Eigen::Index>(sv.size()));
    for (int n = 0; n < grid.size(); ++n)
        for (std::size_t j = 0; j < sv.size(); ++j) {
            const double x[1] = {1.3 * (1.0 - sv[j])};
            ref(n, static_cast<Eigen::Index>(j)) = pressure_at(*model.cavity, p.value.row(n).transpose(), x);
        }
    EXPECT_LT((f.value - ref).norm() / ref.norm(), 1e-6);
}

TEST(ClosedFormMeanPressure, MatchesCrossSectionAverageInBox) {
    CavityGeometry g;
    g.edges = {1.2, 0.7};
    PatchGeometry patch = full_face_patch(g, 0, 0);
    patch.lo = {0.1};
    patch.hi = {0.45};
    g.patches.push_back(patch);
    auto model = ModalModel::build(g, 12, 1);
    AcousticMedium med{1.0, 1.3};
    HarmonicSource s;
    s.omega = 2.2;
    const cplx U(0.01, 0.0);
    const TimeGrid grid = TimeGrid::for_frequency(3.0, std::sqrt(model.cavity->eigenvalues().maxCoeff()));
    auto drive = std::make_shared<HarmonicSignal>(Eigen::VectorXcd::Constant(1, U), s.omega);
    auto vol = std::make_shared<MappedSumSignal>();
    vol->add(trace_integral(g, *model.cavity, 0).cast<cplx>(), drive);
    const ModalHistory p = solve_pressure_volume(*model.cavity, vol, med, grid);
    const std::vector<double> sv = {0.0, 0.4, 0.9};
    const auto f = closed_form_mean_pressure(med, s, g, 0, 12, U, grid, sv);
    // Cross-section average keeps only modes constant in y.
    const SpectralBasis& cav = *model.cavity;
    Eigen::MatrixXcd ref = Eigen::MatrixXcd::Zero(grid.size(), static_cast<Eigen::Index>(sv.size()));
    for (std::size_t k = 0; k < cav.size(); ++k) {
        if (cav.mode(k).index[1] != 0) continue;
        for (std::size_t j = 0; j < sv.size(); ++j) {
            const double x[2] = {1.2 * sv[j], 0.0};
            const double ybar = cav.value(k, x);  // constant in y
            ref.col(static_cast<Eigen::Index>(j)) += p.value.col(static_cast<Eigen::Index>(k)) * ybar;
        }
    }
    EXPECT_LT((f.value - ref).norm() / ref.norm(), 1e-6);
}

TEST(MeanCurvature, SpectralMultiplier) {
    auto b = std::make_shared<const SpectralBasis>(BasisKind::patch_dirichlet, std::vector<double>{0.0},
                                                   std::vector<double>{1.0}, 4);
    ModalField u{b, Eigen::VectorXd::Zero(4), 0.0};
    EXPECT_EQ(mean_curvature(u).coeffs.norm(), 0.0);
    // sin(pi y) = coefficient 1/sqrt(2) on the first normalized mode.
    u.coeffs[0] = 1.0 / std::sqrt(2.0);
    EXPECT_NEAR(mean_curvature(u).coeffs[0], -pi * pi / 2.0 / std::sqrt(2.0), 1e-13);
    ModalField a{b, Eigen::Vector4d(1, 0, 2, 0), 0.0}, c{b, Eigen::Vector4d(0, 3, -1, 1), 0.0};
    ModalField s{b, 2.0 * a.coeffs - 0.5 * c.coeffs, 0.0};
    EXPECT_LT((mean_curvature(s).coeffs - (2.0 * mean_curvature(a).coeffs - 0.5 * mean_curvature(c).coeffs)).norm(), 1e-12);
}

TEST(Lcpo, ExactWhenCurvatureIsUniform) {
    auto b = std::make_shared<const SpectralBasis>(BasisKind::patch_dirichlet, std::vector<double>{0.0},
                                                   std::vector<double>{1.0}, 3);
    ModalField u{b, Eigen::Vector3d(1.0, 0.0, 0.0), 0.0};
    const double gbar = lcpo_gamma_bar(u);
    EXPECT_NEAR(gbar, pi * pi / 2.0, 1e-12);
    MembraneOperator op{2.0, 0.5, 0.05};
    TimeLapse lapse(DampingFunction::exponential(0.3));
    auto src = std::make_shared<HarmonicSignal>(Eigen::Vector3cd(1.0, 0.0, 0.0), 1.5);
    const TimeGrid grid = TimeGrid::for_frequency(3.0, std::sqrt(op.p(b->eigenvalue(2))));
    const LcpoResult r = lcpo_iteration(u, op, gbar, lapse, src, grid, 2);
    EXPECT_NEAR(r.curvature_ratio, 0.0, 1e-15);
    EXPECT_EQ(r.next_correction, 0.0);
    const ModalHistory exact = solve_membrane(*b, op, lapse, *src, grid);
    EXPECT_LT((r.iterates[1].value - exact.value).norm(), 1e-9 * exact.value.norm());
}

TEST(Lcpo, RejectsNonUniformCurvatureAndZeroMean) {
    auto b = std::make_shared<const SpectralBasis>(BasisKind::patch_dirichlet, std::vector<double>{0.0},
                                                   std::vector<double>{1.0}, 3);
    ModalField u{b, Eigen::Vector3d(1.0, 0.0, 1.0), 0.0};
    MembraneOperator op{2.0, 0.0, 0.05};
    auto src = std::make_shared<HarmonicSignal>(Eigen::Vector3cd(1.0, 0.0, 0.0), 1.5);
    try {
        lcpo_iteration(u, op, lcpo_gamma_bar(u), TimeLapse(), src, TimeGrid(1.0, 50), 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::assumption_violation);
    }
    ModalField odd{b, Eigen::Vector3d(0.0, 1.0, 0.0), 0.0};
    try {
        lcpo_gamma_bar(odd);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::degenerate_input);
    }
}

// Thin patch: the (j,1) modes share the transverse curvature, so their spread shrinks with h^2.
TEST(Lcpo, FirstTruncationErrorIsQuadratic) {
    std::vector<double> eps, err;
    for (double h : {0.2, 0.1, 0.05}) {
        auto b = std::make_shared<const SpectralBasis>(BasisKind::patch_dirichlet, std::vector<double>{0.0, 0.0},
                                                       std::vector<double>{1.0, h}, 3);
        Eigen::VectorXd shape = Eigen::VectorXd::Zero(9);
        for (std::size_t k = 0; k < b->size(); ++k) {
            const auto& m = b->mode(k);
            if (m.index[1] == 1 && m.index[0] == 1) shape[static_cast<Eigen::Index>(k)] = 1.0;
            if (m.index[1] == 1 && m.index[0] == 3) shape[static_cast<Eigen::Index>(k)] = 0.6;
        }
        ModalField u{b, shape, 0.0};
        MembraneOperator op{1.0, 0.5, 1e-3};
        const double gbar = lcpo_gamma_bar(u);
        const double wbar = std::sqrt(op.p(2.0 * gbar));
        auto src = std::make_shared<HarmonicSignal>(shape.cast<cplx>(), 0.5 * wbar);
        TimeLapse lapse(DampingFunction::exponential(0.2 * wbar));
        const TimeGrid grid = TimeGrid::for_frequency(6.0 / wbar, std::sqrt(op.p(b->eigenvalues().maxCoeff())));
        const LcpoResult r = lcpo_iteration(u, op, gbar, lapse, src, grid, 1);
        const ModalHistory exact = solve_membrane(*b, op, lapse, *src, grid);
        eps.push_back(r.curvature_ratio);
        err.push_back((r.iterates[1].value - exact.value).norm() / exact.value.norm());
        EXPECT_LT(r.corrections[0] / r.iterates[0].value.norm(), 3.0 * r.curvature_ratio);
    }
    for (std::size_t i = 1; i < eps.size(); ++i) {
        const double slope = std::log(err[i - 1] / err[i]) / std::log(eps[i - 1] / eps[i]);
        EXPECT_GT(slope, 1.8) << "eps " << eps[i] << " err " << err[i];
    }
}

TEST(Picard, ZeroDriveGivesZeroIterates) {
    CoupledProblem pb = interval_problem(1e-3, 8, 1.0, 0.0);
    const IterateLedger L = picard_iterate(pb);
    for (const auto& rec : L.iterates) {
        EXPECT_EQ(rec.p.value.norm(), 0.0);
        for (const auto& u : rec.u) EXPECT_EQ(u.value.norm(), 0.0);
    }
    EXPECT_TRUE(L.u_ratios.empty());
}

TEST(Picard, PairedIteratesAndLinearity) {
    CoupledProblem pb = interval_problem(1e-2, 8, 1.5);
    const IterateLedger L = picard_iterate(pb, kmax(4));
    ASSERT_EQ(L.k_max(), 4);
    EXPECT_EQ(L.iterates[0].p.value.norm(), 0.0);
    EXPECT_EQ(L.iterates[1].p.value.norm(), 0.0);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_TRUE(L.iterates[1].u[i].value == L.iterates[2].u[i].value);
    EXPECT_TRUE(L.iterates[2].p.value == L.iterates[3].p.value);
    EXPECT_GT(L.iterates[2].p.value.norm(), 0.0);

    CoupledProblem pb2 = pb;
    pb2.src.p0 = 2.0 * pb.src.p0;
    const IterateLedger L2 = picard_iterate(pb2, kmax(2));
    EXPECT_TRUE(L2.iterates[2].p.value == (2.0 * L.iterates[2].p.value).eval());
    CoupledProblem pb3 = pb;
    pb3.src.p0 = cplx(0.3, -1.7);
    const IterateLedger L3 = picard_iterate(pb3, kmax(2));
    EXPECT_LT((L3.iterates[2].p.value - pb3.src.p0 * L.iterates[2].p.value).norm(), 1e-13 * L3.iterates[2].p.value.norm());
}

TEST(Picard, CorrectionsContractWithCouplingStrength) {
    for (double g : {1e-2, 1e-3}) {
        CoupledProblem pb = interval_problem(g, 8, 2.0);
        const IterateLedger L = picard_iterate(pb, kmax(5));
        ASSERT_EQ(L.u_ratios.size(), 2u);
        ASSERT_EQ(L.p_ratios.size(), 1u);
        for (double r : L.u_ratios) EXPECT_LT(r, 10.0 * g);
        for (double r : L.p_ratios) EXPECT_LT(r, 10.0 * g);
        EXPECT_TRUE(L.contracting);
    }
}

TEST(Picard, StrongCouplingIsReported) {
    CoupledProblem pb = interval_problem(0.9, 8, 4.0);
    pb.cfg = {0.9, 1.0, 0.05, 0.81};
    pb.medium.rho0 = 0.9;
    pb.op = {1.0, 0.0, 0.05};
    pb.lapse = TimeLapse();
    try {
        picard_iterate(pb, kmax(5));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::contraction_violation);
    }
    EXPECT_FALSE(picard_iterate(pb, kmax(5, false)).contracting);
}

TEST(Picard, GridRefinementConvergesAtSecondOrderOrBetter) {
    std::vector<Eigen::MatrixXcd> p;
    const CoupledProblem base = interval_problem(1e-2, 6, 1.0);
    for (int f : {1, 2, 4}) {
        CoupledProblem pb = base;
        pb.grid = TimeGrid(1.0, base.grid.steps * f);
        const IterateLedger L = picard_iterate(pb, kmax(3));
        Eigen::MatrixXcd v(base.grid.size(), L.last().p.value.cols());
        for (int n = 0; n < base.grid.size(); ++n) v.row(n) = L.last().p.value.row(n * f);
        p.push_back(v);
    }
    const double e1 = (p[0] - p[1]).norm(), e2 = (p[1] - p[2]).norm();
    EXPECT_GT(std::log2(e1 / e2), 2.0) << e1 << " " << e2;
}

TEST(Piston, ConstantDisplacementIsExact) {
    CoupledProblem pb = interval_problem(1e-3, 12, 1.0);
    const IterateLedger L = picard_iterate(pb, kmax(2));
    const PistonReport r = piston_pipeline(pb, L);
    EXPECT_EQ(r.ratio, 0.0);
    EXPECT_EQ(r.deviation, 0.0);
    EXPECT_TRUE(r.leading_order);
    EXPECT_TRUE(r.within_bound);
}

TEST(Piston, FirstEigenmodeRatioAndBound) {
    CavityGeometry g;
    g.edges = {1.0, 0.8};
    PatchGeometry patch = full_face_patch(g, 1, 1);
    patch.lo = {0.2};
    patch.hi = {0.7};
    g.patches.push_back(patch);
    auto model = ModalModel::build(g, 8, 4);
    Eigen::VectorXcd amp = Eigen::VectorXcd::Zero(4);
    amp[0] = 1e-3;
    BoundaryVibration bv{{std::make_shared<HarmonicSignal>(amp, 2.0)}};
    AcousticMedium med{1.0, 1.0};
    const TimeGrid grid = TimeGrid::for_frequency(2.0, std::sqrt(model.cavity->eigenvalues().maxCoeff()));
    const PistonReport r = piston_pipeline(model, bv, med, grid, 1e-3);
    EXPECT_NEAR(r.ratio, std::sqrt(1.0 - 8.0 / (pi * pi)), 1e-12);
    EXPECT_NEAR(r.bound, 1.0, 1e-12);
    EXPECT_LE(r.ratio, r.bound);
    EXPECT_NEAR(r.c_piston, r.ratio / 1e-3, 1e-9);
    EXPECT_FALSE(r.leading_order);
    EXPECT_LE(r.deviation, r.c_piston * 1e-3);
    EXPECT_TRUE(r.within_bound);

    BoundaryVibration zero{{std::make_shared<HarmonicSignal>(Eigen::VectorXcd::Zero(4), 2.0)}};
    try {
        piston_pipeline(model, zero, med, grid, 1e-3);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::degenerate_input);
    }
}
