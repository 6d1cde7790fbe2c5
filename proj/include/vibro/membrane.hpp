#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <boost/math/tools/roots.hpp>
#include <Eigen/Dense>

#include "vibro/errors.hpp"
#include "vibro/geometry.hpp"
#include "vibro/magnus.hpp"
#include "vibro/quadrature.hpp"
#include "vibro/signal.hpp"

namespace vibro {

// ---------------------------------------------------------------------------
// Time lapse
// ---------------------------------------------------------------------------

enum class DampingFamily { none, exponential, rational, custom };

/// Damping function D(t). Built-in families carry analytic derivatives:
/// exponential D = exp(-rate t), rational D = 1/(1 + rate t).
struct DampingFunction {
    DampingFamily family = DampingFamily::none;
    double rate = 0.0;
    std::function<double(double)> custom;
    double t_scale = 1.0;

    static DampingFunction none() { return {}; }
    static DampingFunction exponential(double alpha) { return {DampingFamily::exponential, alpha, {}, 1.0}; }
    static DampingFunction rational(double beta) { return {DampingFamily::rational, beta, {}, 1.0}; }
    static DampingFunction from(std::function<double(double)> D, double t_scale = 1.0) {
        return {DampingFamily::custom, 0.0, std::move(D), t_scale};
    }

    double operator()(double t) const {
        switch (family) {
            case DampingFamily::none: return 1.0;
            case DampingFamily::exponential: return std::exp(-rate * t);
            case DampingFamily::rational: return 1.0 / (1.0 + rate * t);
            case DampingFamily::custom: return custom(t);
        }
        return 1.0;
    }
};

/// Sigma = 1/D^2 and the derivatives of l = log sqrt(Sigma) = -log D.
class TimeLapse {
public:
    explicit TimeLapse(DampingFunction D = {}) : D_(std::move(D)) {}

    const DampingFunction& damping() const { return D_; }
    double D(double t) const { return D_(t); }
    double sigma(double t) const {
        const double d = D_(t);
        return 1.0 / (d * d);
    }
    double ell(double t) const {
        switch (D_.family) {
            case DampingFamily::none: return 0.0;
            case DampingFamily::exponential: return D_.rate * t;
            case DampingFamily::rational: return std::log1p(D_.rate * t);
            case DampingFamily::custom: return -std::log(D_(t));
        }
        return 0.0;
    }
    /// k-th derivative of l, k = 1..3.
    double ell_derivative(int k, double t) const {
        switch (D_.family) {
            case DampingFamily::none: return 0.0;
            case DampingFamily::exponential: return k == 1 ? D_.rate : 0.0;
            case DampingFamily::rational: {
                const double b = D_.rate, r = b / (1.0 + b * t);
                if (k == 1) return r;
                if (k == 2) return -r * r;
                return 2.0 * r * r * r;
            }
            case DampingFamily::custom: break;
        }
        // Central differences with a step matched to the derivative order.
        const double hs[4] = {0.0, 1e-6, 1e-4, 1e-3};
        const double h = hs[k] * D_.t_scale;
        auto f = [&](double s) { return ell(s); };
        if (k == 1) return (f(t + h) - f(t - h)) / (2 * h);
        if (k == 2) return (f(t + h) - 2 * f(t) + f(t - h)) / (h * h);
        return (f(t + 2 * h) - 2 * f(t + h) + 2 * f(t - h) - f(t - 2 * h)) / (2 * h * h * h);
    }
    double ell1(double t) const { return ell_derivative(1, t); }
    double ell2(double t) const { return ell_derivative(2, t); }
    double ell3(double t) const { return ell_derivative(3, t); }

    /// Effective mass q = l'' + l'^2; the transformed modal frequency^2 is p(gamma) - q.
    double q(double t) const {
        const double a = ell1(t);
        return ell2(t) + a * a;
    }
    double q_rate(double t) const { return ell3(t) + 2.0 * ell1(t) * ell2(t); }

private:
    DampingFunction D_;
};

/// Validates D(0) = 1 and D > 0 on the check points.
inline TimeLapse time_lapse_from_damping(DampingFunction D, const std::vector<double>& check_times = {}) {
    if (D.family == DampingFamily::custom) require(static_cast<bool>(D.custom), "custom damping function is empty");
    require(D.t_scale > 0.0, "damping time scale must be positive");
    require(std::abs(D(0.0) - 1.0) < 1e-12, "damping function must satisfy D(0) = 1");
    for (double t : check_times) {
        const double v = D(t);
        if (!(v > 0.0) || !std::isfinite(v))
            fail(ErrorKind::invalid_argument, "damping function is not positive at t=" + std::to_string(t));
    }
    return TimeLapse(std::move(D));
}

inline double effective_mass(const TimeLapse& lapse, double t) { return lapse.q(t); }

// ---------------------------------------------------------------------------
// Damping ODE  D' = -alpha f1(t) f2(D) + g(t),  D(0) = 1
// ---------------------------------------------------------------------------

struct DampingODE {
    std::function<double(double)> f1, f2, g;
    double alpha = 0.0;
};

/// Homogeneous solution by inverting H2(D) = -alpha H1(t), H1 = int_0^t f1, H2 = int_1^D dx/f2.
inline double damping_homogeneous(const DampingODE& ode, double t) {
    require(static_cast<bool>(ode.f1) && static_cast<bool>(ode.f2), "damping ODE needs f1 and f2");
    if (ode.alpha == 0.0 || t == 0.0) return 1.0;
    const double H1 = integrate_adaptive<double>(ode.f1, 0.0, t, 1e-14, 1e-13);
    const double target = -ode.alpha * H1;
    auto H2 = [&](double D) {
        return integrate_adaptive<double>([&](double x) { return 1.0 / ode.f2(x); }, 1.0, D, 1e-14, 1e-13);
    };
    auto F = [&](double D) { return H2(D) - target; };
    double hi = 1.0, lo = 0.5;
    // H2 increasing in D: widen the bracket in the direction of the target.
    if (target > 0.0) {
        lo = 1.0;
        hi = 2.0;
        while (F(hi) < 0.0) {
            hi *= 2.0;
            if (hi > 1e300) fail(ErrorKind::numeric_failure, "damping ODE: H2 cannot be inverted");
        }
    } else {
        while (F(lo) > 0.0) {
            lo *= 0.5;
            if (lo < 1e-300) fail(ErrorKind::numeric_failure, "damping ODE: H2 cannot be inverted");
        }
    }
    std::uintmax_t iters = 200;
    auto r = boost::math::tools::toms748_solve(F, lo, hi, boost::math::tools::eps_tolerance<double>(50), iters);
    if (iters >= 200) fail(ErrorKind::numeric_failure, "damping ODE: root finder did not converge");
    return 0.5 * (r.first + r.second);
}

/// Damping values on ascending times. A nonzero g adds the variation-of-constants
/// correction D = D_h (1 + int_0^t g / D_h).
inline std::vector<double> damping_ode_solve(const DampingODE& ode, const std::vector<double>& times) {
    std::vector<double> out;
    out.reserve(times.size());
    double acc = 0.0, prev = 0.0;
    for (double t : times) {
        require(t >= prev, "damping_ode_solve: times must be ascending and nonnegative");
        const double Dh = damping_homogeneous(ode, t);
        if (ode.g) {
            acc += integrate_adaptive<double>([&](double s) { return ode.g(s) / damping_homogeneous(ode, s); }, prev, t,
                                              1e-13, 1e-11);
            out.push_back(Dh * (1.0 + acc));
        } else {
            out.push_back(Dh);
        }
        prev = t;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Membrane operator and modal Duhamel solution
// ---------------------------------------------------------------------------

struct MembraneOperator {
    double cm2 = 0.0;  // c_m^2
    double cH2 = 0.0;  // c_H^2
    double d = 0.0;    // thickness

    double p(double gamma) const { return cm2 * gamma - cH2 * d * d * gamma * gamma; }

    void validate(const SpectralBasis& basis) const {
        require(cm2 > 0.0 && cH2 >= 0.0 && d > 0.0, "membrane parameters must be positive");
        double gmax = 0.0;
        for (std::size_t k = 0; k < basis.size(); ++k) gmax = std::max(gmax, basis.eigenvalue(k));
        require(cm2 > cH2 * d * d * gmax, "membrane operator: c_m^2 <= c_H^2 d^2 gamma_max on this basis");
    }
};

struct MembraneOptions {
    int gauss_points = 8;
    int zeta_points = 16;
    bool pointwise_q = false;  // W = p - q(tau) instead of the zeta-average
    std::vector<double> p_override;  // per-mode frequency^2 replacing p(gamma_k) when non-empty
};

struct ModalHistory {
    TimeGrid grid;
    Eigen::MatrixXcd value;  // (steps+1) x modes
    Eigen::MatrixXcd rate;

    std::shared_ptr<ModalSeries> series() const { return std::make_shared<ModalSeries>(grid, value, rate); }
};

namespace detail {

struct SourceNodes {
    std::vector<double> tau;       // N*m node times
    std::vector<double> weight;    // quadrature weights
    Eigen::MatrixXcd psi;          // N*m x modes
};

inline SourceNodes sample_source(const ModalSignal& src, const TimeGrid& grid, int m) {
    const GaussRule& r = gauss_legendre(m);
    const double h = grid.dt;
    SourceNodes s;
    const int N = grid.steps;
    s.tau.resize(static_cast<std::size_t>(N) * m);
    s.weight.resize(s.tau.size());
    s.psi.resize(static_cast<Eigen::Index>(s.tau.size()), src.size());
    for (int j = 0; j < N; ++j)
        for (int g = 0; g < m; ++g) {
            const std::size_t i = static_cast<std::size_t>(j) * m + g;
            s.tau[i] = (j + 0.5 * (1.0 + r.x[g])) * h;
            s.weight[i] = 0.5 * h * r.w[g];
            Eigen::VectorXcd v = src.eval(s.tau[i]);
            if (!v.allFinite()) fail(ErrorKind::numeric_failure, "non-finite source value");
            s.psi.row(static_cast<Eigen::Index>(i)) = v.transpose();
        }
    return s;
}

}  // namespace detail

/// u_k(t) = int_0^t e^{l(tau)-l(t)} S(p_k - qbar(t-tau), t-tau) Psi_k(tau) dtau, with
/// qbar(D) = int_0^1 q(D z) dz, evaluated by per-interval Gauss quadrature on the grid.
/// Homogeneous initial data.
inline ModalHistory solve_membrane(const SpectralBasis& basis, const MembraneOperator& op, const TimeLapse& lapse,
                                   const ModalSignal& src, const TimeGrid& grid, MembraneOptions opt = {}) {
    op.validate(basis);
    const Eigen::Index K = static_cast<Eigen::Index>(basis.size());
    require(src.size() == K, "solve_membrane: source size differs from basis size");
    require(opt.p_override.empty() || static_cast<Eigen::Index>(opt.p_override.size()) == K,
            "solve_membrane: p_override needs one value per mode");
    require(opt.gauss_points >= 1 && opt.zeta_points >= 1, "solve_membrane: bad quadrature options");
    const int N = grid.steps, m = opt.gauss_points;
    const double h = grid.dt;
    const GaussRule& r = gauss_legendre(m);

    detail::SourceNodes nodes = detail::sample_source(src, grid, m);
    const Eigen::Index NM = static_cast<Eigen::Index>(nodes.tau.size());

    std::vector<double> ell_t(N + 1), ell1_t(N + 1), ell_tau(NM);
    for (int n = 0; n <= N; ++n) {
        ell_t[n] = lapse.ell(grid.t(n));
        ell1_t[n] = lapse.ell1(grid.t(n));
    }
    double lmax = -std::numeric_limits<double>::infinity(), lmin = -lmax;
    for (Eigen::Index i = 0; i < NM; ++i) {
        ell_tau[i] = lapse.ell(nodes.tau[i]);
        lmax = std::max(lmax, ell_tau[i]);
        lmin = std::min(lmin, ell_tau[i]);
    }
    for (double v : ell_t) {
        lmax = std::max(lmax, v);
        lmin = std::min(lmin, v);
    }
    const bool factor = (lmax - lmin) < 600.0;

    // Weighted source columns F = w * e^{l(tau) - lmax} * Psi.
    Eigen::MatrixXcd F = nodes.psi;
    for (Eigen::Index i = 0; i < NM; ++i)
        F.row(i) *= nodes.weight[i] * (factor ? std::exp(ell_tau[i] - lmax) : 1.0);

    // Lag Delta(d, g) = (d - (1 + x_g)/2) h for d = 1..N.
    auto lag = [&](int d, int g) { return (d - 0.5 * (1.0 + r.x[g])) * h; };

    // zeta-averaged mass and its lag derivative on the lag table.
    Eigen::MatrixXd qbar, qbar_rate;
    if (!opt.pointwise_q) {
        qbar.resize(N + 1, m);
        qbar_rate.resize(N + 1, m);
        const GaussRule& z = gauss_legendre(opt.zeta_points);
        for (int d = 1; d <= N; ++d)
            for (int g = 0; g < m; ++g) {
                const double D = lag(d, g);
                double a = 0.0, b = 0.0;
                for (std::size_t i = 0; i < z.size(); ++i) {
                    const double zeta = 0.5 * (1.0 + z.x[i]), w = 0.5 * z.w[i];
                    a += w * lapse.q(D * zeta);
                    b += w * zeta * lapse.q_rate(D * zeta);
                }
                qbar(d, g) = a;
                qbar_rate(d, g) = b;
            }
    }
    std::vector<double> q_tau;
    if (opt.pointwise_q) {
        q_tau.resize(NM);
        for (Eigen::Index i = 0; i < NM; ++i) q_tau[i] = lapse.q(nodes.tau[i]);
    }

    ModalHistory out{grid, Eigen::MatrixXcd::Zero(N + 1, K), Eigen::MatrixXcd::Zero(N + 1, K)};
    Eigen::MatrixXd Kv(N + 1, m), Kd(N + 1, m);
    for (Eigen::Index k = 0; k < K; ++k) {
        const double pk = opt.p_override.empty() ? op.p(basis.eigenvalue(static_cast<std::size_t>(k)))
                                                 : opt.p_override[static_cast<std::size_t>(k)];
        if (!opt.pointwise_q) {
            for (int d = 1; d <= N; ++d)
                for (int g = 0; g < m; ++g) {
                    const WaveKernel wk = wave_kernel(pk - qbar(d, g), lag(d, g));
                    Kv(d, g) = wk.S;
                    Kd(d, g) = wk.C - wk.dS_dW * qbar_rate(d, g);
                }
            if (!Kv.bottomRows(N).allFinite() || !Kd.bottomRows(N).allFinite())
                fail(ErrorKind::numeric_failure, "solve_membrane: non-finite kernel in mode " + std::to_string(k));
        }
        for (int n = 1; n <= N; ++n) {
            cplx su = 0.0, sd = 0.0;
            for (int j = 0; j < n; ++j) {
                const int d = n - j;
                for (int g = 0; g < m; ++g) {
                    const Eigen::Index i = static_cast<Eigen::Index>(j) * m + g;
                    double kv, kd;
                    if (opt.pointwise_q) {
                        const WaveKernel wk = wave_kernel(pk - q_tau[i], lag(d, g));
                        kv = wk.S;
                        kd = wk.C;
                    } else {
                        kv = Kv(d, g);
                        kd = Kd(d, g);
                    }
                    cplx f = F(i, k);
                    if (!factor) f *= std::exp(ell_tau[i] - ell_t[n]);
                    su += kv * f;
                    sd += kd * f;
                }
            }
            const double pref = factor ? std::exp(lmax - ell_t[n]) : 1.0;
            const cplx u = pref * su;
            out.value(n, k) = u;
            out.rate(n, k) = -ell1_t[n] * u + pref * sd;
        }
        if (!out.value.col(k).allFinite())
            fail(ErrorKind::numeric_failure, "solve_membrane: non-finite result in mode " + std::to_string(k));
    }
    return out;
}

/// Closed form for Sigma = e^{2 alpha t}: kernel e^{-alpha D} S(p - alpha^2, D), same quadrature.
inline ModalHistory solve_membrane_exponential(const SpectralBasis& basis, const MembraneOperator& op, double alpha,
                                               const ModalSignal& src, const TimeGrid& grid, int gauss_points = 8) {
    op.validate(basis);
    const Eigen::Index K = static_cast<Eigen::Index>(basis.size());
    require(src.size() == K, "solve_membrane_exponential: source size differs from basis size");
    const int N = grid.steps, m = gauss_points;
    detail::SourceNodes nodes = detail::sample_source(src, grid, m);
    ModalHistory out{grid, Eigen::MatrixXcd::Zero(N + 1, K), Eigen::MatrixXcd::Zero(N + 1, K)};
    for (Eigen::Index k = 0; k < K; ++k) {
        const double W = op.p(basis.eigenvalue(static_cast<std::size_t>(k))) - alpha * alpha;
        for (int n = 1; n <= N; ++n) {
            const double t = grid.t(n);
            cplx su = 0.0, sd = 0.0;
            for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n) * m; ++i) {
                const double D = t - nodes.tau[i];
                const WaveKernel wk = wave_kernel(W, D);
                const double e = std::exp(-alpha * D) * nodes.weight[i];
                su += e * wk.S * nodes.psi(i, k);
                sd += e * (wk.C - alpha * wk.S) * nodes.psi(i, k);
            }
            out.value(n, k) = su;
            out.rate(n, k) = sd;
        }
    }
    return out;
}

}  // namespace vibro
