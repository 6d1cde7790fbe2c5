#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "vibro/errors.hpp"

namespace vibro {

/// Gauss-Legendre rule on [-1, 1].
struct GaussRule {
    std::vector<double> x;
    std::vector<double> w;
    std::size_t size() const { return x.size(); }
};

namespace detail {

inline GaussRule compute_gauss_legendre(int n) {
    GaussRule r;
    r.x.resize(n);
    r.w.resize(n);
    for (int i = 0; i < (n + 1) / 2; ++i) {
        // Tricomi initial guess, then Newton on P_n.
        double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = z;
            for (int k = 2; k <= n; ++k) {
                double p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n * (z * p1 - p0) / (z * z - 1.0);
            double dz = p1 / dp;
            z -= dz;
            if (std::abs(dz) < 1e-16) break;
        }
        double p0 = 1.0, p1 = z;
        for (int k = 2; k <= n; ++k) {
            double p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        dp = n * (z * p1 - p0) / (z * z - 1.0);
        r.x[i] = -z;
        r.x[n - 1 - i] = z;
        r.w[i] = r.w[n - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    if (n % 2 == 1) r.x[n / 2] = 0.0;
    return r;
}

}  // namespace detail

/// Cached n-point Gauss-Legendre rule.
inline const GaussRule& gauss_legendre(int n) {
    require(n >= 1, "gauss_legendre: n must be positive");
    static std::mutex mtx;
    static std::map<int, GaussRule> cache;
    std::lock_guard<std::mutex> lock(mtx);
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, detail::compute_gauss_legendre(n)).first;
    return it->second;
}

template <class F>
auto integrate_gauss(F&& f, double a, double b, int n) {
    const GaussRule& r = gauss_legendre(n);
    const double h = 0.5 * (b - a), m = 0.5 * (a + b);
    auto acc = f(m + h * r.x[0]) * (r.w[0] * h);
    for (std::size_t i = 1; i < r.size(); ++i) acc += f(m + h * r.x[i]) * (r.w[i] * h);
    return acc;
}

inline double abs_norm(double v) { return std::abs(v); }
inline double abs_norm(const std::complex<double>& v) { return std::abs(v); }
template <class Derived>
double abs_norm(const Eigen::MatrixBase<Derived>& m) {
    return m.norm();
}

struct QuadratureReport {
    double error_estimate = 0.0;
    int evaluations = 0;
    int intervals = 0;
    bool converged = false;
};

namespace detail {

// Kronrod 15 / Gauss 7 nodes and weights on [-1, 1] (positive half, centre first).
inline constexpr double gk_xk[8] = {0.0,
                                    0.207784955007898467600689403773245,
                                    0.405845151377397166906606412076961,
                                    0.586087235467691130294144845693013,
                                    0.741531185599394439863864773280788,
                                    0.864864423359769072789712788640926,
                                    0.949107912342758524526189684047851,
                                    0.991455371120812639206854697526329};
inline constexpr double gk_wk[8] = {0.209482141084727828012999174891714,
                                    0.204432940075298892414161999234649,
                                    0.190350578064785409913256402421014,
                                    0.169004726639267902826583426598550,
                                    0.140653259715525918745189590510238,
                                    0.104790010322250183839876322541518,
                                    0.063092092629978553290700663189204,
                                    0.022935322010529224963732008058970};
// Gauss weights for the nodes gk_xk[0], gk_xk[2], gk_xk[4], gk_xk[6].
inline constexpr double gk_wg[4] = {0.417959183673469387755102040816327,
                                    0.381830050505118944950369775488975,
                                    0.279705391489276667901467771423780,
                                    0.129484966168869693270611432679082};

template <class T, class F>
void gk15(F& f, double a, double b, T& kron, double& err) {
    const double c = 0.5 * (a + b), h = 0.5 * (b - a);
    T fc = f(c);
    kron = fc * (gk_wk[0] * h);
    T gauss = fc * (gk_wg[0] * h);
    for (int j = 1; j < 8; ++j) {
        T f1 = f(c - h * gk_xk[j]);
        T f2 = f(c + h * gk_xk[j]);
        T s = f1 + f2;
        kron += s * (gk_wk[j] * h);
        if (j % 2 == 0) gauss += s * (gk_wg[j / 2] * h);
    }
    T diff = kron - gauss;
    err = abs_norm(diff);
}

}  // namespace detail

/// Globally adaptive Gauss-Kronrod (7/15) quadrature for scalar, complex or
/// Eigen-valued integrands. Throws numeric_failure when the tolerance is not met
/// within max_intervals subintervals.
template <class T, class F>
T integrate_adaptive(F&& f, double a, double b, double abs_tol, double rel_tol = 0.0,
                     int max_intervals = 2000, QuadratureReport* report = nullptr) {
    struct Piece {
        double a, b;
        T value;
        double err;
    };
    std::vector<Piece> pieces;
    pieces.reserve(64);
    if (a == b) {
        T z = f(a) * 0.0;
        if (report) *report = {0.0, 1, 0, true};
        return z;
    }
    {
        Piece p{a, b, T{}, 0.0};
        detail::gk15<T>(f, a, b, p.value, p.err);
        pieces.push_back(std::move(p));
    }
    int evals = 15;
    auto total = [&]() {
        T s = pieces[0].value;
        double e = pieces[0].err;
        for (std::size_t i = 1; i < pieces.size(); ++i) {
            s += pieces[i].value;
            e += pieces[i].err;
        }
        return std::make_pair(s, e);
    };
    auto [sum, err] = total();
    while (err > std::max(abs_tol, rel_tol * abs_norm(sum))) {
        if (static_cast<int>(pieces.size()) >= max_intervals) {
            if (report) *report = {err, evals, static_cast<int>(pieces.size()), false};
            fail(ErrorKind::numeric_failure,
                 "adaptive quadrature did not converge (error estimate " + std::to_string(err) + ")");
        }
        auto worst = std::max_element(pieces.begin(), pieces.end(),
                                      [](const Piece& l, const Piece& r) { return l.err < r.err; });
        const double lo = worst->a, hi = worst->b, mid = 0.5 * (lo + hi);
        Piece left{lo, mid, T{}, 0.0}, right{mid, hi, T{}, 0.0};
        detail::gk15<T>(f, lo, mid, left.value, left.err);
        detail::gk15<T>(f, mid, hi, right.value, right.err);
        evals += 30;
        *worst = std::move(left);
        pieces.push_back(std::move(right));
        std::tie(sum, err) = total();
    }
    if (report) *report = {err, evals, static_cast<int>(pieces.size()), true};
    return sum;
}

}  // namespace vibro
