#pragma once

// Brute-force reference solvers. Nothing here uses the Duhamel kernels, the Magnus
// machinery or the Picard iteration.

#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include <boost/numeric/odeint.hpp>
#include <Eigen/Dense>

#include "vibro/coupling_config.hpp"
#include "vibro/errors.hpp"
#include "vibro/geometry.hpp"
#include "vibro/magnus.hpp"
#include "vibro/membrane.hpp"
#include "vibro/signal.hpp"

namespace vibro::oracle {

namespace odeint = boost::numeric::odeint;
using State = std::vector<double>;

struct OdeTolerance {
    double abs = 1e-10;
    double rel = 1e-10;
};

/// Propagator Y(t) of Y' = A(s) Y, Y(tau) = I, by adaptive Dormand-Prince.
inline Eigen::MatrixXd ode_propagator(const TimeDependentGenerator& gen, double tau, double t, OdeTolerance tol = {1e-13, 1e-13}) {
    const int n = gen.dim;
    State y(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(i) * n + i] = 1.0;
    auto rhs = [&](const State& x, State& dx, double s) {
        Eigen::Map<const Eigen::MatrixXd> Y(x.data(), n, n);
        Eigen::Map<Eigen::MatrixXd> dY(dx.data(), n, n);
        dY = gen(s) * Y;
    };
    auto stepper = odeint::make_controlled(tol.abs, tol.rel, odeint::runge_kutta_dopri5<State>());
    odeint::integrate_adaptive(stepper, rhs, y, tau, t, (t - tau) / 100.0);
    return Eigen::Map<Eigen::MatrixXd>(y.data(), n, n);
}

/// Direct integration of u'' + 2 l'(t) u' + p(gamma_k) u = Psi_k(t) for every mode,
/// which is the expanded form of Sigma^-1 (Sigma u')' + p u = Psi. Zero initial data.
inline ModalHistory ode_membrane_oracle(const SpectralBasis& basis, const MembraneOperator& op, const TimeLapse& lapse,
                                        const ModalSignal& src, const TimeGrid& grid, OdeTolerance tol = {}) {
    const Eigen::Index K = static_cast<Eigen::Index>(basis.size());
    require(src.size() == K, "ode_membrane_oracle: source size differs from basis size");
    ModalHistory out{grid, Eigen::MatrixXcd::Zero(grid.size(), K), Eigen::MatrixXcd::Zero(grid.size(), K)};
    std::vector<double> times(grid.size());
    for (int n = 0; n < grid.size(); ++n) times[n] = grid.t(n);
    for (Eigen::Index k = 0; k < K; ++k) {
        const double pk = op.p(basis.eigenvalue(static_cast<std::size_t>(k)));
        // state: Re u, Im u, Re u', Im u'
        auto rhs = [&](const State& x, State& dx, double t) {
            const std::complex<double> psi = src.eval(t)[k];
            const double a = 2.0 * lapse.ell1(t);
            dx[0] = x[2];
            dx[1] = x[3];
            dx[2] = psi.real() - a * x[2] - pk * x[0];
            dx[3] = psi.imag() - a * x[3] - pk * x[1];
        };
        State y(4, 0.0);
        int idx = 0;
        auto observer = [&](const State& x, double) {
            out.value(idx, k) = {x[0], x[1]};
            out.rate(idx, k) = {x[2], x[3]};
            ++idx;
        };
        auto stepper = odeint::make_dense_output(tol.abs, tol.rel, odeint::runge_kutta_dopri5<State>());
        try {
            odeint::integrate_times(stepper, rhs, y, times.begin(), times.end(), grid.dt / 4.0, observer);
        } catch (const std::exception& e) {
            fail(ErrorKind::numeric_failure, std::string("ode_membrane_oracle: stepper failure: ") + e.what());
        }
        if (idx != grid.size() || !out.value.col(k).allFinite())
            fail(ErrorKind::numeric_failure, "ode_membrane_oracle: integration did not reach the end of the grid");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Coupled 1D finite differences
// ---------------------------------------------------------------------------

struct OracleConfig {
    int cells = 400;
    double cfl = 0.5;  // safety factor, c dt / dx <= cfl
    double dt = 0.0;   // 0 picks the largest step dividing the output step
};

struct FdtdResult {
    TimeGrid grid;               // output samples
    std::vector<double> x;       // nodes
    Eigen::MatrixXcd p;          // samples x nodes
    Eigen::MatrixXcd u, u_rate;  // samples x patches
    std::vector<double> energy;  // per sample
    double dt = 0.0, dx = 0.0;
};

/// Leapfrog for p_tt = c^2 p_xx on [0, L]. Piston patches at the ends move inward by u_i,
/// imposing p_x(0) = -rho0 u_0'' and p_x(L) = rho0 u_L''; each piston obeys
/// u'' + 2 l'(t) u' + p(gamma) u = (mask p_ex - p_end) / sigma_m. Rigid ends have p_x = 0.
inline FdtdResult fdtd_coupled_oracle(const CouplingConfig& cfg, const HarmonicSource& src, const CavityGeometry& geom,
                                      const MembraneOperator& op, const TimeLapse& lapse, double c,
                                      const TimeGrid& grid, OracleConfig oc = {}) {
    cfg.validate();
    geom.validate();
    require(geom.dim() == 1, "fdtd_coupled_oracle: one-dimensional cavity required");
    src.validate(geom.patches.size());
    require(c > 0.0, "fdtd_coupled_oracle: sound speed must be positive");
    require(oc.cells >= 4, "fdtd_coupled_oracle: too few cells");
    require(oc.cfl > 0.0 && oc.cfl <= 0.5, "fdtd_coupled_oracle: CFL safety factor must be in (0, 0.5]");
    const int M = oc.cells;
    const double L = geom.edges[0], dx = L / M;
    int sub;
    if (oc.dt > 0.0) {
        if (c * oc.dt / dx > oc.cfl) fail(ErrorKind::invalid_argument, "fdtd_coupled_oracle: CFL condition violated");
        sub = static_cast<int>(std::lround(grid.dt / oc.dt));
        require(sub >= 1 && std::abs(sub * oc.dt - grid.dt) < 1e-9 * grid.dt,
                "fdtd_coupled_oracle: dt must divide the output step");
    } else {
        sub = static_cast<int>(std::ceil(grid.dt * c / (oc.cfl * dx) - 1e-12));
    }
    const double dt = grid.dt / sub, r2 = (c * dt / dx) * (c * dt / dx);
    const std::size_t P = geom.patches.size();
    std::vector<int> end(P);
    std::vector<double> pg(P);
    for (std::size_t i = 0; i < P; ++i) {
        end[i] = geom.patches[i].side == 1 ? M : 0;
        pg[i] = op.p(geom.patches[i].lumped_eigenvalue);
    }
    const double sm = cfg.sigma_m(), rho0 = cfg.rho0;

    using VecC = Eigen::VectorXcd;
    VecC p0 = VecC::Zero(M + 1), p1, pm = VecC::Zero(M + 1);
    VecC u0 = VecC::Zero(P), um = VecC::Zero(P), u1(P), acc(P);
    VecC psi_acc = VecC::Zero(M + 1);  // time integral of p
    const long total = static_cast<long>(grid.steps) * sub;

    FdtdResult out;
    out.grid = grid;
    out.dt = dt;
    out.dx = dx;
    for (int j = 0; j <= M; ++j) out.x.push_back(j * dx);
    out.p = Eigen::MatrixXcd::Zero(grid.size(), M + 1);
    out.u = Eigen::MatrixXcd::Zero(grid.size(), static_cast<Eigen::Index>(P));
    out.u_rate = out.u;
    out.energy.assign(static_cast<std::size_t>(grid.size()), 0.0);

    auto energy = [&](const VecC& p, const VecC& psi, const VecC& u, const VecC& ud) {
        double e = 0.0;
        for (int j = 0; j <= M; ++j) e += (j == 0 || j == M ? 0.5 : 1.0) * dx * std::norm(p[j]) / (2.0 * rho0 * c * c);
        for (int j = 0; j < M; ++j) e += std::norm(psi[j + 1] - psi[j]) / (2.0 * rho0 * dx);
        for (std::size_t i = 0; i < P; ++i) e += 0.5 * sm * (std::norm(ud[i]) + pg[i] * std::norm(u[i]));
        return e;
    };

    for (long n = 0; n <= total; ++n) {
        const double t = n * dt;
        // Pistons.
        for (std::size_t i = 0; i < P; ++i) {
            const cplx drive = src.drives(i) ? src.value(t) : cplx(0.0);
            const cplx psi = (drive - p0[end[i]]) / sm;
            const double a = lapse.ell1(t);
            if (n == 0) {
                u1[i] = u0[i] + 0.5 * dt * dt * (psi - pg[i] * u0[i]);
                acc[i] = 2.0 * (u1[i] - u0[i]) / (dt * dt);
            } else {
                u1[i] = (2.0 * u0[i] - (1.0 - a * dt) * um[i] + dt * dt * (psi - pg[i] * u0[i])) / (1.0 + a * dt);
                acc[i] = (u1[i] - 2.0 * u0[i] + um[i]) / (dt * dt);
            }
        }
        if (n % sub == 0) {
            const int k = static_cast<int>(n / sub);
            out.p.row(k) = p0.transpose();
            VecC ud = (n == 0) ? VecC::Zero(P) : VecC((u1 - um) / (2.0 * dt));
            out.u.row(k) = u0.transpose();
            out.u_rate.row(k) = ud.transpose();
            out.energy[k] = energy(p0, psi_acc, u0, ud);
            if (n == total) break;
        }
        // Pressure.
        VecC lap(M + 1);
        for (int j = 1; j < M; ++j) lap[j] = p0[j + 1] - 2.0 * p0[j] + p0[j - 1];
        lap[0] = 2.0 * (p0[1] - p0[0]);
        lap[M] = 2.0 * (p0[M - 1] - p0[M]);
        for (std::size_t i = 0; i < P; ++i) lap[end[i]] += 2.0 * dx * rho0 * acc[i];
        p1 = n == 0 ? VecC(p0 + 0.5 * r2 * lap) : VecC(2.0 * p0 - pm + r2 * lap);
        psi_acc += 0.5 * dt * (p0 + p1);
        pm = p0;
        p0 = p1;
        um = u0;
        u0 = u1;
    }
    if (!out.p.allFinite() || !out.u.allFinite()) fail(ErrorKind::numeric_failure, "fdtd_coupled_oracle: non-finite field");
    return out;
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

enum class Norm { L2, Linf };

struct ErrorReport {
    double abs_error = 0.0;
    double rel_error = 0.0;
    std::vector<double> abs_per_mode, rel_per_mode;
};

namespace detail {

inline double norm_of(const Eigen::MatrixXcd& m, Norm n) {
    if (m.size() == 0) return 0.0;
    return n == Norm::L2 ? m.norm() : m.cwiseAbs().maxCoeff();
}

/// Linear interpolation of rows of `v` sampled on `g` at the times of `target`.
inline Eigen::MatrixXcd resample(const Eigen::MatrixXcd& v, const TimeGrid& g, const std::vector<double>& times) {
    Eigen::MatrixXcd out(static_cast<Eigen::Index>(times.size()), v.cols());
    for (std::size_t i = 0; i < times.size(); ++i) {
        const double x = std::clamp(times[i] / g.dt, 0.0, static_cast<double>(g.steps));
        const int k = std::min(static_cast<int>(x), g.steps - 1);
        const double s = x - k;
        out.row(static_cast<Eigen::Index>(i)) = (1.0 - s) * v.row(k) + s * v.row(k + 1);
    }
    return out;
}

}  // namespace detail

/// Error of `a` relative to reference `b`. Histories on different grids are
/// compared on the common time range at the samples of `b`, with linear interpolation of `a`.
inline ErrorReport compare(const Eigen::MatrixXcd& a, const TimeGrid& ga, const Eigen::MatrixXcd& b, const TimeGrid& gb,
                           Norm norm = Norm::L2) {
    require(a.cols() == b.cols(), "compare: field sizes differ");
    require(a.rows() == ga.size() && b.rows() == gb.size(), "compare: samples do not match the grids");
    const double t_end = std::min(ga.end(), gb.end());
    require(t_end > 0.0, "compare: disjoint time ranges");
    Eigen::MatrixXcd A, B;
    if (ga.steps == gb.steps && ga.dt == gb.dt) {
        A = a;
        B = b;
    } else {
        std::vector<double> times;
        for (int n = 0; n < gb.size() && gb.t(n) <= t_end * (1 + 1e-12); ++n) times.push_back(gb.t(n));
        A = detail::resample(a, ga, times);
        B = b.topRows(static_cast<Eigen::Index>(times.size()));
    }
    ErrorReport r;
    const Eigen::MatrixXcd D = A - B;
    r.abs_error = detail::norm_of(D, norm);
    const double ref = detail::norm_of(B, norm);
    r.rel_error = ref > 0.0 ? r.abs_error / ref : (r.abs_error == 0.0 ? 0.0 : INFINITY);
    for (Eigen::Index k = 0; k < D.cols(); ++k) {
        const double e = detail::norm_of(D.col(k), norm), s = detail::norm_of(B.col(k), norm);
        r.abs_per_mode.push_back(e);
        r.rel_per_mode.push_back(s > 0.0 ? e / s : (e == 0.0 ? 0.0 : INFINITY));
    }
    return r;
}

inline ErrorReport compare(const ModalHistory& a, const ModalHistory& b, Norm norm = Norm::L2) {
    return compare(a.value, a.grid, b.value, b.grid, norm);
}

}  // namespace vibro::oracle
