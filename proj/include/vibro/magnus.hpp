#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vibro/errors.hpp"
#include "vibro/quadrature.hpp"

namespace vibro {

// ---------------------------------------------------------------------------
// Bernoulli numbers
// ---------------------------------------------------------------------------

struct Rational {
    std::int64_t num = 0;
    std::int64_t den = 1;
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    bool operator==(const Rational&) const = default;
};

/// B_k of x/(e^x - 1), so B_1 = -1/2. Exact for k <= 20.
inline Rational bernoulli(int k) {
    require(k >= 0, "bernoulli: k must be nonnegative");
    if (k > 20) fail(ErrorKind::unsupported, "bernoulli: k > 20 is not supported");
    using i128 = __int128;
    struct Q {
        i128 n, d;
    };
    auto gcd = [](i128 a, i128 b) {
        if (a < 0) a = -a;
        if (b < 0) b = -b;
        while (b != 0) {
            i128 r = a % b;
            a = b;
            b = r;
        }
        return a;
    };
    auto norm = [&](Q q) {
        if (q.d < 0) q = {-q.n, -q.d};
        i128 g = gcd(q.n, q.d);
        if (g > 1) q = {q.n / g, q.d / g};
        return q;
    };
    // sum_{j=0}^{m} C(m+1, j) B_j = 0
    std::vector<Q> B{{1, 1}};
    for (int m = 1; m <= k; ++m) {
        Q s{0, 1};
        i128 binom = 1;  // C(m+1, j)
        for (int j = 0; j < m; ++j) {
            s = norm({s.n * B[j].d + binom * B[j].n * s.d, s.d * B[j].d});
            binom = binom * (m + 1 - j) / (j + 1);
        }
        B.push_back(norm({-s.n, s.d * (m + 1)}));
    }
    return {static_cast<std::int64_t>(B[k].n), static_cast<std::int64_t>(B[k].d)};
}

// ---------------------------------------------------------------------------
// Generators and truncated Magnus series
// ---------------------------------------------------------------------------

struct TimeDependentGenerator {
    std::function<Eigen::MatrixXd(double)> A;
    int dim = 0;

    Eigen::MatrixXd operator()(double t) const {
        Eigen::MatrixXd m = A(t);
        if (m.rows() != dim || m.cols() != dim) fail(ErrorKind::invalid_argument, "generator returned a matrix of the wrong size");
        if (!m.allFinite()) fail(ErrorKind::numeric_failure, "generator returned non-finite entries at t=" + std::to_string(t));
        return m;
    }
};

struct MagnusGenerator {
    std::vector<Eigen::MatrixXd> terms;
    double tau = 0.0, t = 0.0;

    Eigen::MatrixXd sum(int order) const {
        Eigen::MatrixXd s = Eigen::MatrixXd::Zero(terms.front().rows(), terms.front().cols());
        for (int k = 0; k < order && k < static_cast<int>(terms.size()); ++k) s += terms[k];
        return s;
    }
    Eigen::MatrixXd sum() const { return sum(static_cast<int>(terms.size())); }
};

struct MagnusOptions {
    double abs_tol = 1e-11;
    int max_intervals = 400;
};

/// First `order` (1..3) Magnus terms over [tau, t] by nested adaptive Gauss-Kronrod.
inline MagnusGenerator magnus_terms(const TimeDependentGenerator& gen, double tau, double t, int order,
                                    MagnusOptions opt = {}) {
    require(order >= 1 && order <= 3, "magnus_terms: order must be 1, 2 or 3");
    require(tau <= t, "magnus_terms: tau must not exceed t");
    require(gen.dim > 0, "magnus_terms: empty generator");
    using M = Eigen::MatrixXd;
    const int n = gen.dim;
    MagnusGenerator out;
    out.tau = tau;
    out.t = t;
    if (tau == t) {
        out.terms.assign(order, M::Zero(n, n));
        return out;
    }
    const double tol = opt.abs_tol;
    // Inner integrals run at a tighter tolerance so the outer estimate dominates.
    const double inner_tol = tol * 1e-2;
    auto comm = [](const M& a, const M& b) -> M { return a * b - b * a; };

    out.terms.push_back(integrate_adaptive<M>([&](double s) { return gen(s); }, tau, t, tol, 0.0, opt.max_intervals));

    if (order >= 2) {
        M g2 = integrate_adaptive<M>(
            [&](double t1) {
                const M a1 = gen(t1);
                return integrate_adaptive<M>([&](double t2) { return comm(a1, gen(t2)); }, tau, t1, inner_tol, 0.0,
                                             opt.max_intervals);
            },
            tau, t, tol, 0.0, opt.max_intervals);
        out.terms.push_back(0.5 * g2);
    }
    if (order >= 3) {
        M g3 = integrate_adaptive<M>(
            [&](double t1) {
                const M a1 = gen(t1);
                return integrate_adaptive<M>(
                    [&](double t2) {
                        const M a2 = gen(t2);
                        return integrate_adaptive<M>(
                            [&](double t3) {
                                const M a3 = gen(t3);
                                return M(comm(a1, comm(a2, a3)) + comm(a3, comm(a2, a1)));
                            },
                            tau, t2, inner_tol * 1e-2, 0.0, opt.max_intervals);
                    },
                    tau, t1, inner_tol, 0.0, opt.max_intervals);
            },
            tau, t, tol, 0.0, opt.max_intervals);
        out.terms.push_back(g3 / 6.0);
    }
    return out;
}

struct ConvergenceCertificate {
    double value = 0.0;
    bool ok = false;
};

/// Sufficient condition for Magnus convergence: integral of ||A||_F below pi.
inline ConvergenceCertificate convergence_certificate(const TimeDependentGenerator& gen, double tau, double t) {
    require(tau <= t, "convergence_certificate: tau must not exceed t");
    ConvergenceCertificate c;
    c.value = integrate_adaptive<double>([&](double s) { return gen(s).norm(); }, tau, t, 1e-12, 1e-12);
    c.ok = c.value < std::numbers::pi;
    return c;
}

/// Truncated inverse derivative of the exponential map:
/// sum_k B_k/k! ad_Omega^k X for k < terms.
inline Eigen::MatrixXd dexp_inverse(const Eigen::MatrixXd& omega, const Eigen::MatrixXd& X, int terms) {
    require(terms >= 1 && terms <= 21, "dexp_inverse: 1..21 terms");
    Eigen::MatrixXd ad = X, out = Eigen::MatrixXd::Zero(X.rows(), X.cols());
    double fact = 1.0;
    for (int k = 0; k < terms; ++k) {
        if (k > 0) {
            ad = omega * ad - ad * omega;
            fact *= k;
        }
        out += bernoulli(k).value() / fact * ad;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix exponential (Pade 13, scaling and squaring)
// ---------------------------------------------------------------------------

template <class Mat>
Mat matrix_exponential(const Mat& A) {
    require(A.rows() == A.cols(), "matrix_exponential: matrix must be square");
    if (!A.allFinite()) fail(ErrorKind::numeric_failure, "matrix_exponential: non-finite input");
    static constexpr double b[14] = {64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
                                     1187353796428800.0,  129060195264000.0,   10559470521600.0,
                                     670442572800.0,      33522128640.0,       1323241920.0,
                                     40840800.0,          960960.0,            16380.0,
                                     182.0,               1.0};
    constexpr double theta13 = 5.371920351148152;
    const Eigen::Index n = A.rows();
    const double norm1 = A.cwiseAbs().colwise().sum().maxCoeff();
    int s = 0;
    if (norm1 > theta13) s = std::max(0, static_cast<int>(std::ceil(std::log2(norm1 / theta13))));
    const Mat X = A / std::ldexp(1.0, s);
    const Mat I = Mat::Identity(n, n);
    const Mat X2 = X * X, X4 = X2 * X2, X6 = X4 * X2;
    const Mat U = X * (X6 * (b[13] * X6 + b[11] * X4 + b[9] * X2) + b[7] * X6 + b[5] * X4 + b[3] * X2 + b[1] * I);
    const Mat V = X6 * (b[12] * X6 + b[10] * X4 + b[8] * X2) + b[6] * X6 + b[4] * X4 + b[2] * X2 + b[0] * I;
    Mat R = (V - U).partialPivLu().solve(V + U);
    for (int k = 0; k < s; ++k) R = R * R;
    if (!R.allFinite()) fail(ErrorKind::numeric_failure, "matrix_exponential: overflow");
    return R;
}

// ---------------------------------------------------------------------------
// Scalar wave kernels
// ---------------------------------------------------------------------------

/// sin(dt sqrt(lam)) / sqrt(lam), equal to dt at lam = 0.
inline double sine_kernel(double lam, double dt) {
    require(lam >= 0.0, "sine_kernel: negative eigenvalue, use sinh_kernel");
    require(dt >= 0.0, "sine_kernel: negative time step");
    const double x2 = lam * dt * dt;
    if (x2 < 1e-8) return dt * (1.0 - x2 / 6.0 + x2 * x2 / 120.0);
    const double r = std::sqrt(lam);
    return std::sin(dt * r) / r;
}

inline double cosine_kernel(double lam, double dt) {
    require(lam >= 0.0, "cosine_kernel: negative eigenvalue, use cosh_kernel");
    return std::cos(dt * std::sqrt(lam));
}

/// sinh(dt sqrt(mu)) / sqrt(mu) for mu >= 0 (over-damped branch).
inline double sinh_kernel(double mu, double dt) {
    require(mu >= 0.0, "sinh_kernel: negative argument");
    require(dt >= 0.0, "sinh_kernel: negative time step");
    const double x2 = mu * dt * dt;
    if (x2 < 1e-8) return dt * (1.0 + x2 / 6.0 + x2 * x2 / 120.0);
    const double r = std::sqrt(mu);
    return std::sinh(dt * r) / r;
}

inline double cosh_kernel(double mu, double dt) {
    require(mu >= 0.0, "cosh_kernel: negative argument");
    return std::cosh(dt * std::sqrt(mu));
}

/// Kernel S(W, d) solving S'' + W S = 0, S(0) = 0, S'(0) = 1, for either sign of W,
/// together with C = dS/dd and dS/dW.
struct WaveKernel {
    double S = 0.0, C = 0.0, dS_dW = 0.0;
};

inline WaveKernel wave_kernel(double W, double d) {
    WaveKernel k;
    const double x2 = W * d * d;
    if (std::abs(x2) < 1e-2) {
        // S = d sum (-x2)^j/(2j+1)!, C = sum (-x2)^j/(2j)!
        double term_s = d, term_c = 1.0, term_w = 0.0;
        k.S = term_s;
        k.C = term_c;
        double pw = 1.0;  // (-x2)^j
        double fs = 1.0, fc = 1.0;
        for (int j = 1; j <= 8; ++j) {
            fs *= (2.0 * j) * (2.0 * j + 1.0);
            fc *= (2.0 * j - 1.0) * (2.0 * j);
            const double prev = pw;
            pw *= -x2;
            k.S += d * pw / fs;
            k.C += pw / fc;
            // d/dW of d (-W d^2)^j / (2j+1)! = -j d^3 (-W d^2)^{j-1} / (2j+1)!
            term_w += -j * d * d * d * prev / fs;
        }
        k.dS_dW = term_w;
        return k;
    }
    if (W > 0.0) {
        const double r = std::sqrt(W);
        k.S = std::sin(d * r) / r;
        k.C = std::cos(d * r);
    } else {
        const double r = std::sqrt(-W);
        k.S = std::sinh(d * r) / r;
        k.C = std::cosh(d * r);
    }
    k.dS_dW = (d * k.C - k.S) / (2.0 * W);
    return k;
}

/// Derivative of sine_kernel with respect to lam.
inline double sine_kernel_dlambda(double lam, double dt) {
    require(lam >= 0.0 && dt >= 0.0, "sine_kernel_dlambda: arguments must be nonnegative");
    return wave_kernel(lam, dt).dS_dW;
}

/// Exact propagator of (w, dw/dt) for w'' = -lam w over dt, one 2x2 block per lam.
inline std::vector<Eigen::Matrix2d> block_wave_exponential(const std::vector<double>& lambdas, double dt) {
    require(dt >= 0.0, "block_wave_exponential: negative time step");
    std::vector<Eigen::Matrix2d> out;
    out.reserve(lambdas.size());
    for (double lam : lambdas) {
        require(lam >= 0.0, "block_wave_exponential: negative eigenvalue");
        const double s = sine_kernel(lam, dt), c = cosine_kernel(lam, dt);
        Eigen::Matrix2d G;
        G << c, s, -lam * s, c;
        out.push_back(G);
    }
    return out;
}

}  // namespace vibro
