#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numbers>
#include <random>

#include "vibro/acoustics.hpp"

using namespace vibro;
using std::numbers::pi;

namespace {

ModalModel interval_model(double L, int modes, double gamma = 9.0) {
    CavityGeometry g;
    g.edges = {L};
    g.patches.push_back(full_face_patch(g, 0, 1, gamma));
    return ModalModel::build(g, modes, 1);
}

ModalModel plate_model(int cavity_modes = 4, int patch_modes = 3) {
    CavityGeometry g;
    g.edges = {1.0, 0.73};
    g.patches.push_back(full_face_patch(g, 1, 1));
    return ModalModel::build(g, cavity_modes, patch_modes);
}

// u = amp * cos(omega t) * e_k on a single-patch model
std::shared_ptr<FunctionSignal> standing(Eigen::Index n, Eigen::VectorXd shape, double omega) {
    return std::make_shared<FunctionSignal>(
        n, [=](double t) { return Eigen::VectorXcd((shape * std::cos(omega * t)).cast<cplx>()); },
        [=](double t) { return Eigen::VectorXcd((-omega * shape * std::sin(omega * t)).cast<cplx>()); });
}

BoundarySnapshot static_snapshot(const std::vector<Eigen::VectorXd>& u) {
    BoundarySnapshot s;
    for (const auto& v : u) s.patches.push_back({v, Eigen::VectorXd::Zero(v.size()), Eigen::VectorXd::Zero(v.size())});
    return s;
}

BoundarySnapshot moving_snapshot(const Eigen::VectorXd& shape, double eps, double omega, double t) {
    BoundarySnapshot s;
    s.t = t;
    s.patches.push_back({eps * std::cos(omega * t) * shape, -eps * omega * std::sin(omega * t) * shape,
                         -eps * omega * omega * std::cos(omega * t) * shape});
    return s;
}

double slope(double x1, double y1, double x2, double y2) { return std::log(y2 / y1) / std::log(x2 / x1); }

}  // namespace

TEST(SolvePressure, ZeroBoundaryGivesZero) {
    auto m = interval_model(1.0, 8);
    BoundaryVibration bv{{zero_signal(1)}};
    auto p = solve_pressure(m, bv, {1.0, 1.0}, TimeGrid(2.0, 100));
    EXPECT_EQ(p.value.norm(), 0.0);
}

TEST(SolvePressure, ConstantModeIsDoubleIntegralOfSource) {
    auto m = interval_model(1.3, 1);
    const double omega = 2.2, U = 0.01;
    auto u = std::make_shared<FunctionSignal>(
        1, [=](double t) { return Eigen::VectorXcd::Constant(1, U * std::sin(omega * t)); },
        [=](double t) { return Eigen::VectorXcd::Constant(1, U * omega * std::cos(omega * t)); });
    AcousticMedium med{1.5, 0.8};
    TimeGrid g(3.0, 60);
    auto p = solve_pressure(m, BoundaryVibration{{u}}, med, g);
    const double C = m.traces[0](0, 0);
    for (int n = 0; n <= g.steps; n += 7) {
        const double t = g.t(n);
        const double ref = med.rho0 * med.c * med.c *
                           integrate_adaptive<double>(
                               [&](double s) { return (t - s) * (-omega * omega * C * U * std::sin(omega * s)); }, 0.0,
                               std::max(t, 1e-300), 1e-14, 1e-13);
        EXPECT_NEAR(p.value(n, 0).real(), ref, 1e-8 * std::max(1e-6, std::abs(ref)));
    }
}

TEST(SolvePressure, ModalClosedFormForHarmonicPiston) {
    auto m = interval_model(1.0, 10);
    const double omega = 2.0, U = 1e-3;
    auto u = std::make_shared<FunctionSignal>(
        1, [=](double t) { return Eigen::VectorXcd::Constant(1, U * std::sin(omega * t)); },
        [=](double t) { return Eigen::VectorXcd::Constant(1, U * omega * std::cos(omega * t)); });
    AcousticMedium med{1.0, 1.0};
    TimeGrid g = TimeGrid::for_frequency(5.0, 9 * pi);
    auto p = solve_pressure(m, BoundaryVibration{{u}}, med, g);
    for (Eigen::Index n = 0; n < 10; ++n) {
        const double Om2 = m.cavity->eigenvalue(n), C = m.traces[0](n, 0);
        for (int k = 0; k <= g.steps; k += 13) {
            const double t = g.t(k);
            double y;
            if (n == 0) {
                y = C * U * (std::sin(omega * t) - omega * t);
            } else {
                const double Om = std::sqrt(Om2);
                y = -omega * omega * C * U * (std::sin(omega * t) - omega / Om * std::sin(Om * t)) / (Om2 - omega * omega);
            }
            EXPECT_NEAR(p.value(k, n).real(), y, 1e-10) << n << " " << t;
        }
    }
}

TEST(SolvePressure, InwardPistonCompressesTheCavity) {
    auto m = interval_model(2.0, 40);
    auto u = std::make_shared<FunctionSignal>(
        1, [](double t) { return Eigen::VectorXcd::Constant(1, 1e-3 * t * t); },
        [](double t) { return Eigen::VectorXcd::Constant(1, 2e-3 * t); });
    auto p = solve_pressure(m, BoundaryVibration{{u}}, {1.0, 1.0}, TimeGrid(0.5, 50));
    // mean pressure rises; near the piston the local pressure rises as well
    EXPECT_GT(p.value(50, 0).real(), 0.0);
    const double x[1] = {1.95};
    EXPECT_GT(pressure_at(*m.cavity, p.value.row(50).transpose(), x).real(), 0.0);
}

TEST(MetricPerturbation, ZeroAndSymmetry) {
    auto m = plate_model();
    MetricPerturbation zero(m, static_snapshot({Eigen::VectorXd::Zero(3)}));
    const double x[2] = {0.3, 0.5};
    EXPECT_EQ(zero.dG(x).norm(), 0.0);
    std::mt19937 rng(1);
    std::uniform_real_distribution<double> ux(0.0, 1.0), uy(0.0, 0.73), uc(-1e-2, 1e-2);
    for (auto kind : {MetricModel::quadratic, MetricModel::full_pullback}) {
        BoundarySnapshot s;
        s.patches.push_back({Eigen::Vector3d(uc(rng), uc(rng), uc(rng)), Eigen::Vector3d(uc(rng), uc(rng), uc(rng)),
                             Eigen::Vector3d(uc(rng), uc(rng), uc(rng))});
        MetricPerturbation mp(m, s, kind);
        for (int i = 0; i < 1000; ++i) {
            const double p[2] = {ux(rng), uy(rng)};
            Eigen::MatrixXd G = mp.dG(p);
            EXPECT_EQ((G - G.transpose()).norm(), 0.0);
            EXPECT_LT((G.bottomRightCorner(2, 2) - mp.dg(p)).norm(), 1e-18);
        }
    }
}

TEST(MetricPerturbation, SpatiallyConstantDisplacementHasOnlyNormalEntry) {
    // 1D-like: constant u on a face, quadratic model -> only the normal-normal entry
    auto m = interval_model(1.0, 3);
    MetricPerturbation mp(m, static_snapshot({Eigen::VectorXd::Constant(1, 0.02)}));
    const double x[1] = {0.4};
    Eigen::MatrixXd G = mp.dG(x);
    EXPECT_NEAR(G(1, 1), 0.02 * 0.02, 1e-18);
    EXPECT_EQ(G(0, 0), 0.0);
    EXPECT_EQ(G(0, 1), 0.0);
}

TEST(MetricPerturbation, EnvelopeViolation) {
    auto m = plate_model();
    Eigen::VectorXd u = Eigen::VectorXd::Zero(3);
    u[0] = 1.0;  // |u| up to sqrt(2)
    try {
        MetricPerturbation(m, static_snapshot({u}), MetricModel::quadratic, 0.1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::envelope_violation);
    }
    EXPECT_NO_THROW(MetricPerturbation(m, static_snapshot({u}), MetricModel::quadratic, 0.5));
}

TEST(MetricPerturbation, JetMatchesFiniteDifferences) {
    auto m = plate_model(3, 3);
    Eigen::Vector3d shape(0.7, -0.4, 0.2);
    const double eps = 1e-2, omega = 1.7, t = 0.6, h = 1e-5;
    MetricPerturbation mp(m, moving_snapshot(shape, eps, omega, t), MetricModel::full_pullback);
    MetricPerturbation mp_p(m, moving_snapshot(shape, eps, omega, t + h), MetricModel::full_pullback);
    MetricPerturbation mp_m(m, moving_snapshot(shape, eps, omega, t - h), MetricModel::full_pullback);
    const double x[2] = {0.37, 0.41};
    auto j = mp.jet(x);
    // time derivatives
    EXPECT_LT((j.w_t - (mp_p.jet(x).w - mp_m.jet(x).w) / (2 * h)).norm(), 1e-8);
    EXPECT_LT((j.J_t - (mp_p.jet(x).J - mp_m.jet(x).J) / (2 * h)).norm(), 1e-8);
    EXPECT_LT((j.w_tt - (mp_p.jet(x).w_t - mp_m.jet(x).w_t) / (2 * h)).norm(), 1e-8);
    // spatial derivatives
    const double hx = 1e-5;
    for (int i = 0; i < 2; ++i) {
        double xp[2] = {x[0], x[1]}, xm[2] = {x[0], x[1]};
        xp[i] += hx;
        xm[i] -= hx;
        EXPECT_LT((j.J.col(i) - (mp.jet(xp).w - mp.jet(xm).w) / (2 * hx)).norm(), 1e-8);
    }
    Eigen::VectorXd lap = Eigen::VectorXd::Zero(2);
    const double hl = 1e-4;
    for (int i = 0; i < 2; ++i) {
        double xp[2] = {x[0], x[1]}, xm[2] = {x[0], x[1]};
        xp[i] += hl;
        xm[i] -= hl;
        lap += (mp.jet(xp).w - 2 * j.w + mp.jet(xm).w) / (hl * hl);
    }
    EXPECT_LT((j.lap_w - lap).norm(), 1e-6);
}

TEST(Operators, ZeroDisplacementGivesZero) {
    auto m = plate_model();
    auto P = assemble_operators(m, static_snapshot({Eigen::VectorXd::Zero(3)}));
    EXPECT_EQ(P.V.norm(), 0.0);
    EXPECT_EQ(P.T0.norm() + P.T1.norm() + P.T2.norm(), 0.0);
}

TEST(Operators, ConstantModeAnnihilatedAndVSymmetric) {
    auto m = plate_model();
    Eigen::Vector3d u(0.01, -0.004, 0.002);
    for (auto kind : {MetricModel::quadratic, MetricModel::full_pullback}) {
        auto P = assemble_operators(m, static_snapshot({u}), kind);
        EXPECT_NEAR(P.V(0, 0), 0.0, 1e-18);
        EXPECT_LT((P.V - P.V.transpose()).norm(), 1e-14 * P.V.norm());
        EXPECT_GT(P.V.norm(), 0.0);
    }
}

TEST(Operators, StaticDisplacementHasNoTemporalPart) {
    auto m = plate_model();
    auto P = assemble_operators(m, static_snapshot({Eigen::Vector3d(0.01, 0.0, 0.003)}));
    EXPECT_EQ(P.T0.norm() + P.T1.norm() + P.T2.norm(), 0.0);
    EXPECT_EQ((P.W(1.3) - P.V.cast<cplx>()).norm(), 0.0);
}

TEST(Operators, WIsVPlusT) {
    auto m = plate_model();
    auto P = assemble_operators(m, moving_snapshot(Eigen::Vector3d(1, 0.5, 0.2), 1e-2, 2.0, 0.3));
    const double om = 3.1;
    EXPECT_LE((P.W(om) - P.V.cast<cplx>() - P.T(om)).norm(), 1e-15 * P.W(om).norm());
    EXPECT_GT(P.T1.norm(), 0.0);
    EXPECT_GT(P.T2.norm(), 0.0);
}

TEST(Operators, QuadraticScalingOfNorms) {
    auto m = plate_model();
    Eigen::Vector3d shape(1.0, 0.3, -0.2);
    std::vector<double> eps{1e-1, 1e-2, 1e-3};
    std::vector<double> nv, nt;
    for (double e : eps) {
        auto P = assemble_operators(m, moving_snapshot(shape, e, 2.0, 0.4));
        nv.push_back(P.relative_norm_V());
        nt.push_back(P.relative_norm_T(2.0));
    }
    for (int i = 0; i + 1 < 3; ++i) {
        EXPECT_NEAR(slope(eps[i], nv[i], eps[i + 1], nv[i + 1]), 2.0, 0.1);
        EXPECT_GE(slope(eps[i], nt[i], eps[i + 1], nt[i + 1]), 2.0 - 1e-6);
    }
}

TEST(Operators, StretchedIntervalIsUniformScaling) {
    const double L = 1.0, eps = 1e-2;
    auto m = interval_model(L, 8);
    // inward displacement -eps L at x = L stretches [0, L] to [0, L(1+eps)]
    auto P = assemble_operators(m, static_snapshot({Eigen::VectorXd::Constant(1, -eps * L)}), MetricModel::full_pullback);
    const double dg = 2 * eps + eps * eps;
    Eigen::MatrixXd ref = dg * P.lambda.asDiagonal();
    EXPECT_LT((P.V - ref).cwiseAbs().maxCoeff(), 1e-11);
}

TEST(EigenvalueShift, BasicsAndDegeneracy) {
    Eigen::VectorXd lam(3);
    lam << 0.0, 1.0, 4.0;
    Eigen::MatrixXd V = Eigen::MatrixXd::Zero(3, 3);
    EXPECT_EQ(eigenvalue_shift(1, V, lam, 2), 0.0);
    EXPECT_EQ(eigenfunction_correction(1, V, lam).norm(), 0.0);
    lam[2] = 1.0;
    try {
        eigenvalue_shift(1, V, lam);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::degenerate_eigenvalue);
    }
    EXPECT_THROW(eigenfunction_correction(2, V, lam), Error);
}

TEST(EigenvalueShift, TwoModeExactDiagonalization) {
    Eigen::Vector2d lam(1.0, 3.0);
    const double a = 0.02, b = -0.01, v = 0.03;
    Eigen::Matrix2d V;
    V << a, v, v, b;
    Eigen::Matrix2d A = Eigen::Matrix2d(lam.asDiagonal()) - V;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(A);
    // exact lowest eigenvalue vs first/second order
    const double exact = es.eigenvalues()[0];
    EXPECT_NEAR(lam[0] + eigenvalue_shift(0, V, lam, 1), 1.0 - a, 1e-15);
    EXPECT_NEAR(lam[0] + eigenvalue_shift(0, V, lam, 2), 1.0 - a - v * v / 2.0, 1e-15);
    EXPECT_LT(std::abs(lam[0] + eigenvalue_shift(0, V, lam, 2) - exact), 1e-5);
    auto c = eigenfunction_correction(0, V, lam);
    EXPECT_EQ(c[0], 0.0);
    EXPECT_NEAR(c[1], v / 2.0, 1e-15);
    // eigenvector of A: (1, c1) up to O((|V|/gap)^2)
    Eigen::Vector2d ev = es.eigenvectors().col(0);
    ev /= ev[0];
    EXPECT_NEAR(ev[1], c[1], 4.0 * (v / 2.0) * (v / 2.0));
}

TEST(EigenvalueShift, CorrectedVectorNormalToFirstOrder) {
    auto m = plate_model();
    std::vector<double> eps{1e-1, 1e-2};
    std::vector<double> dev;
    for (double e : eps) {
        auto P = assemble_operators(m, static_snapshot({Eigen::Vector3d(e, 0.3 * e, 0.0)}));
        auto c = eigenfunction_correction(3, P.V, P.lambda);
        dev.push_back(std::sqrt(1.0 + c.squaredNorm()) - 1.0);
    }
    // ||Psi~|| - 1 = O(||V||^2) = O(eps^4)
    EXPECT_NEAR(slope(eps[0], dev[0], eps[1], dev[1]), 4.0, 0.1);
}

TEST(KernelCorrection, ZeroCases) {
    auto m = plate_model(3, 2);
    Eigen::Vector2d shape(1.0, 0.2);
    AcousticMedium med{1.0, 1.0};
    TimeGrid g(2.0, 40);
    BoundaryVibration zero{{zero_signal(2)}};
    auto W = Eigen::MatrixXcd::Ones(9, 9).eval();
    EXPECT_EQ(kernel_correction_diagnostic(m, zero, med, W, g).ratio, 0.0);
    BoundaryVibration bv{{standing(2, 1e-2 * shape, 2.0)}};
    EXPECT_EQ(kernel_correction_diagnostic(m, bv, med, Eigen::MatrixXcd::Zero(9, 9), g).correction_norm, 0.0);
    EXPECT_GT(kernel_correction_diagnostic(m, bv, med, W, g).correction_norm, 0.0);
}
