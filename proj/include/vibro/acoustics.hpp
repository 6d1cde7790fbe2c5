#pragma once

#include <cmath>
#include <complex>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vibro/errors.hpp"
#include "vibro/geometry.hpp"
#include "vibro/magnus.hpp"
#include "vibro/membrane.hpp"
#include "vibro/quadrature.hpp"
#include "vibro/signal.hpp"

namespace vibro {

struct AcousticMedium {
    double c = 343.0;
    double rho0 = 1.2;

    void validate() const { require(c > 0.0 && rho0 > 0.0, "medium: c and rho0 must be positive"); }
};

/// Cavity basis, one basis per patch, and the trace couplings between them.
struct ModalModel {
    CavityGeometry geom;
    BasisPtr cavity;
    std::vector<BasisPtr> patches;
    std::vector<Eigen::MatrixXd> traces;  // cavity modes x patch modes

    static ModalModel build(const CavityGeometry& geom, int cavity_modes_per_axis, int patch_modes_per_axis) {
        ModalModel m;
        m.geom = geom;
        m.cavity = build_cavity_basis(geom, cavity_modes_per_axis);
        for (std::size_t i = 0; i < geom.patches.size(); ++i) {
            m.patches.push_back(build_patch_basis(geom.patches[i], patch_modes_per_axis));
            m.traces.push_back(trace_coupling(geom, *m.cavity, i, *m.patches.back()));
        }
        return m;
    }
    std::size_t patch_count() const { return patches.size(); }
};

/// Time-dependent modal coefficients of u (inward normal displacement) per patch.
struct BoundaryVibration {
    std::vector<SignalPtr> u;
};

/// b_n(t) = sum_i int_{Gamma_i} Psi_n u_i, the signed volume change seen by cavity mode n.
inline std::shared_ptr<MappedSumSignal> boundary_volume_signal(const ModalModel& model, const BoundaryVibration& bv) {
    require(bv.u.size() == model.patch_count(), "boundary vibration: one signal per patch required");
    auto s = std::make_shared<MappedSumSignal>();
    for (std::size_t i = 0; i < bv.u.size(); ++i) s->add(model.traces[i].cast<cplx>(), bv.u[i]);
    return s;
}

struct PressureOptions {
    int gauss_points = 8;
};

/// p_n'' + c^2 lambda_n p_n = rho0 c^2 b_n'' with zero initial data, solved as
/// p_n = rho0 c^2 (z_n + b_n), z'' + Omega^2 z = -Omega^2 b, propagated exactly per step.
inline ModalHistory solve_pressure_volume(const SpectralBasis& cav, const SignalPtr& b, const AcousticMedium& med,
                                          const TimeGrid& grid, PressureOptions opt = {}) {
    med.validate();
    const Eigen::Index K = static_cast<Eigen::Index>(cav.size());
    require(b != nullptr && b->size() == K, "solve_pressure: volume signal does not match the cavity basis");
    require(grid.end() <= b->t_max() * (1 + 1e-12), "solve_pressure: boundary signal shorter than the time grid");
    const int N = grid.steps, m = opt.gauss_points;
    const double h = grid.dt, scale = med.rho0 * med.c * med.c;
    const GaussRule& r = gauss_legendre(m);

    std::vector<double> om2(K);
    for (Eigen::Index n = 0; n < K; ++n) om2[n] = med.c * med.c * cav.eigenvalue(static_cast<std::size_t>(n));
    const auto G = block_wave_exponential(om2, h);
    // Per-node kernels S(h - sigma), C(h - sigma).
    Eigen::MatrixXd Sk(K, m), Ck(K, m);
    for (Eigen::Index n = 0; n < K; ++n)
        for (int g = 0; g < m; ++g) {
            const double lagv = h - 0.5 * h * (1.0 + r.x[g]);
            Sk(n, g) = sine_kernel(om2[n], lagv);
            Ck(n, g) = cosine_kernel(om2[n], lagv);
        }

    ModalHistory out{grid, Eigen::MatrixXcd::Zero(N + 1, K), Eigen::MatrixXcd::Zero(N + 1, K)};
    Eigen::VectorXcd b0 = b->eval(0.0), bd0 = b->eval_rate(0.0);
    Eigen::VectorXcd z = -b0, zd = -bd0;
    out.value.row(0) = (scale * (z + b0)).transpose();
    out.rate.row(0) = (scale * (zd + bd0)).transpose();
    std::vector<Eigen::VectorXcd> bn(m);
    for (int s = 0; s < N; ++s) {
        const double t0 = grid.t(s);
        for (int g = 0; g < m; ++g) bn[g] = b->eval(t0 + 0.5 * h * (1.0 + r.x[g]));
        Eigen::VectorXcd zn(K), zdn(K);
        for (Eigen::Index n = 0; n < K; ++n) {
            cplx iz = 0.0, izd = 0.0;
            for (int g = 0; g < m; ++g) {
                const cplx f = -om2[n] * bn[g][n] * (0.5 * h * r.w[g]);
                iz += Sk(n, g) * f;
                izd += Ck(n, g) * f;
            }
            zn[n] = G[n](0, 0) * z[n] + G[n](0, 1) * zd[n] + iz;
            zdn[n] = G[n](1, 0) * z[n] + G[n](1, 1) * zd[n] + izd;
        }
        z = zn;
        zd = zdn;
        const double t1 = grid.t(s + 1);
        out.value.row(s + 1) = (scale * (z + b->eval(t1))).transpose();
        out.rate.row(s + 1) = (scale * (zd + b->eval_rate(t1))).transpose();
    }
    if (!out.value.allFinite()) fail(ErrorKind::numeric_failure, "solve_pressure: non-finite pressure");
    return out;
}

inline ModalHistory solve_pressure(const ModalModel& model, const BoundaryVibration& bv, const AcousticMedium& med,
                                   const TimeGrid& grid, PressureOptions opt = {}) {
    return solve_pressure_volume(*model.cavity, boundary_volume_signal(model, bv), med, grid, opt);
}

/// Pressure at a cavity point from modal coefficients.
inline cplx pressure_at(const SpectralBasis& cav, const Eigen::VectorXcd& coeffs, std::span<const double> x) {
    cplx s = 0.0;
    for (std::size_t n = 0; n < cav.size(); ++n) s += coeffs[static_cast<Eigen::Index>(n)] * cav.value(n, x);
    return s;
}

// ============================================================================
// Metric perturbation
// ============================================================================

enum class MetricModel {
    quadratic,      // (grad w)^T grad w and its space-time analogue
    full_pullback,  // complete pull-back including the terms linear in w
};

struct PatchSnapshot {
    Eigen::VectorXd u, u_t, u_tt;
};

/// Boundary displacement and its first two time derivatives at one instant.
struct BoundarySnapshot {
    double t = 0.0;
    std::vector<PatchSnapshot> patches;
};

/// Real parts of u, u_t and a centred difference of u_t.
inline BoundarySnapshot snapshot(const BoundaryVibration& bv, double t, double fd_step) {
    require(fd_step > 0.0, "snapshot: finite-difference step must be positive");
    BoundarySnapshot s;
    s.t = t;
    for (const auto& sig : bv.u) {
        PatchSnapshot p;
        p.u = sig->eval(t).real();
        p.u_t = sig->eval_rate(t).real();
        const double lo = std::max(0.0, t - fd_step), hi = std::min(sig->t_max(), t + fd_step);
        require(hi > lo, "snapshot: no room for the finite difference");
        p.u_tt = ((sig->eval_rate(hi) - sig->eval_rate(lo)) / (hi - lo)).real();
        s.patches.push_back(std::move(p));
    }
    return s;
}

/// Displacement w = sum_i (1 - s_i) u_i n_in,i and its derivatives at a point.
struct DisplacementJet {
    Eigen::VectorXd w, w_t, w_tt, lap_w;
    Eigen::MatrixXd J, J_t;  // J(k, i) = d_i w_k
};

class MetricPerturbation {
public:
    MetricPerturbation(const ModalModel& model, BoundarySnapshot snap, MetricModel kind = MetricModel::quadratic,
                       double eps = 0.0)
        : model_(&model), snap_(std::move(snap)), kind_(kind) {
        require(snap_.patches.size() == model.patch_count(), "metric perturbation: one snapshot per patch required");
        for (std::size_t i = 0; i < snap_.patches.size(); ++i) {
            const auto n = static_cast<Eigen::Index>(model.patches[i]->size());
            const auto& p = snap_.patches[i];
            require(p.u.size() == n && p.u_t.size() == n && p.u_tt.size() == n, "metric perturbation: coefficient size mismatch");
        }
        if (eps > 0.0) check_envelope(eps);
    }

    int dim() const { return model_->geom.dim(); }
    MetricModel kind() const { return kind_; }
    const BoundarySnapshot& snapshot() const { return snap_; }

    DisplacementJet jet(std::span<const double> x) const {
        const int d = dim();
        DisplacementJet j{Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d),
                          Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Zero(d, d), Eigen::MatrixXd::Zero(d, d)};
        const auto& geom = model_->geom;
        for (std::size_t i = 0; i < geom.patches.size(); ++i) {
            const PatchGeometry& pg = geom.patches[i];
            const auto tang = tangential_axes(d, pg.axis);
            double y[3];
            bool inside = true;
            for (std::size_t a = 0; a < tang.size(); ++a) {
                y[a] = x[tang[a]];
                if (y[a] < pg.lo[a] || y[a] > pg.hi[a]) inside = false;
            }
            if (!inside) continue;
            const double a_len = geom.edges[pg.axis];
            const double rr = pg.side == 1 ? x[pg.axis] / a_len : 1.0 - x[pg.axis] / a_len;
            const double dr = (pg.side == 1 ? 1.0 : -1.0) / a_len;
            const double nin = -pg.outward_normal_sign();
            const SpectralBasis& pb = *model_->patches[i];
            const PatchSnapshot& ps = snap_.patches[i];
            std::span<const double> ys(y, tang.size());
            double u = 0, ut = 0, utt = 0, lap = 0;
            double gu[3] = {0, 0, 0}, gut[3] = {0, 0, 0}, gb[3];
            for (std::size_t k = 0; k < pb.size(); ++k) {
                const auto kk = static_cast<Eigen::Index>(k);
                const double v = pb.value(k, ys);
                u += ps.u[kk] * v;
                ut += ps.u_t[kk] * v;
                utt += ps.u_tt[kk] * v;
                lap -= pb.eigenvalue(k) * ps.u[kk] * v;
                pb.gradient(k, ys, gb);
                for (std::size_t a = 0; a < tang.size(); ++a) {
                    gu[a] += ps.u[kk] * gb[a];
                    gut[a] += ps.u_t[kk] * gb[a];
                }
            }
            const int ax = pg.axis;
            j.w[ax] += nin * rr * u;
            j.w_t[ax] += nin * rr * ut;
            j.w_tt[ax] += nin * rr * utt;
            j.lap_w[ax] += nin * rr * lap;
            j.J(ax, ax) += nin * dr * u;
            j.J_t(ax, ax) += nin * dr * ut;
            for (std::size_t a = 0; a < tang.size(); ++a) {
                j.J(ax, tang[a]) += nin * rr * gu[a];
                j.J_t(ax, tang[a]) += nin * rr * gut[a];
            }
        }
        return j;
    }

    /// Spatial block dg.
    Eigen::MatrixXd dg(std::span<const double> x) const { return dg_from(jet(x)); }

    /// Space-time perturbation dG with coordinates ordered (t, x_1..x_n).
    Eigen::MatrixXd dG(std::span<const double> x) const {
        const DisplacementJet j = jet(x);
        const int d = dim();
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(d + 1, d + 1);
        G(0, 0) = j.w_t.squaredNorm();
        Eigen::VectorXd ti = j.J.transpose() * j.w_t;
        if (kind_ == MetricModel::full_pullback) ti += j.w_t;
        G.block(0, 1, 1, d) = ti.transpose();
        G.block(1, 0, d, 1) = ti;
        G.block(1, 1, d, d) = dg_from(j);
        return G;
    }

private:
    Eigen::MatrixXd dg_from(const DisplacementJet& j) const {
        Eigen::MatrixXd g = j.J.transpose() * j.J;
        if (kind_ == MetricModel::full_pullback) g += j.J + j.J.transpose();
        return g;
    }

    void check_envelope(double eps) const {
        const auto& geom = model_->geom;
        for (std::size_t i = 0; i < geom.patches.size(); ++i) {
            const SpectralBasis& pb = *model_->patches[i];
            const Eigen::VectorXd vals = pb.samples() * snap_.patches[i].u;
            const double mx = vals.size() ? vals.cwiseAbs().maxCoeff() : 0.0;
            if (mx > 3.0 * eps)
                fail(ErrorKind::envelope_violation, "patch " + std::to_string(i) + ": |u| = " + std::to_string(mx) +
                                                        " exceeds 3 eps = " + std::to_string(3.0 * eps));
        }
    }

    const ModalModel* model_;
    BoundarySnapshot snap_;
    MetricModel kind_;
};

inline MetricPerturbation assemble_metric_perturbation(const ModalModel& model, BoundarySnapshot snap,
                                                       MetricModel kind = MetricModel::quadratic, double eps = 0.0) {
    return MetricPerturbation(model, std::move(snap), kind, eps);
}

// ============================================================================
// Perturbation operators
// ============================================================================

namespace detail {

/// Composite Gauss grid over the cavity, split at patch edges so that the
/// piecewise-smooth displacement is integrated accurately.
inline QuadGrid cavity_operator_grid(const ModalModel& model, int nodes_per_piece) {
    const auto& geom = model.geom;
    const int d = geom.dim();
    std::vector<std::vector<double>> ax_x(d), ax_w(d);
    for (int a = 0; a < d; ++a) {
        std::vector<double> br{0.0, geom.edges[a]};
        for (const auto& p : geom.patches) {
            const auto tang = tangential_axes(d, p.axis);
            for (std::size_t k = 0; k < tang.size(); ++k)
                if (tang[k] == a) {
                    br.push_back(p.lo[k]);
                    br.push_back(p.hi[k]);
                }
        }
        std::sort(br.begin(), br.end());
        br.erase(std::unique(br.begin(), br.end(), [](double l, double r) { return std::abs(l - r) < 1e-14; }), br.end());
        const GaussRule& r = gauss_legendre(nodes_per_piece);
        for (std::size_t s = 0; s + 1 < br.size(); ++s) {
            const double lo = br[s], hi = br[s + 1], hh = 0.5 * (hi - lo);
            if (hh <= 0.0) continue;
            for (std::size_t g = 0; g < r.size(); ++g) {
                ax_x[a].push_back(lo + hh * (1.0 + r.x[g]));
                ax_w[a].push_back(hh * r.w[g]);
            }
        }
    }
    QuadGrid q;
    q.dim = d;
    q.npts = 1;
    for (int a = 0; a < d; ++a) q.npts *= ax_x[a].size();
    q.points.resize(q.npts * d);
    q.weights.assign(q.npts, 1.0);
    for (std::size_t p = 0; p < q.npts; ++p) {
        std::size_t rem = p;
        for (int a = d - 1; a >= 0; --a) {
            const std::size_t i = rem % ax_x[a].size();
            rem /= ax_x[a].size();
            q.points[p * d + a] = ax_x[a][i];
            q.weights[p] *= ax_w[a][i];
        }
    }
    return q;
}

}  // namespace detail

struct OperatorOptions {
    int nodes_per_piece = 0;  // 0: chosen from the mode counts
    double c = 1.0;           // sound speed in the reference metric diag(-c^2, I)
};

/// Galerkin matrices of the perturbation operators on the cavity basis at one instant.
/// V acts on p; T = T0 + T1 d/dt + T2 d^2/dt^2; W = V + T.
struct PerturbationOperators {
    Eigen::MatrixXd V, T0, T1, T2;
    Eigen::VectorXd lambda;

    Eigen::MatrixXcd T(double omega) const {
        return T0.cast<cplx>() + cplx(0.0, omega) * T1.cast<cplx>() - omega * omega * T2.cast<cplx>();
    }
    Eigen::MatrixXcd W(double omega) const { return V.cast<cplx>() + T(omega); }
    Eigen::MatrixXd W0() const { return V + T0; }

    double scale() const { return lambda.norm(); }
    double relative_norm_V() const { return V.norm() / scale(); }
    double relative_norm_T(double omega) const { return T(omega).norm() / scale(); }
    double relative_norm_W(double omega) const { return W(omega).norm() / scale(); }
};

/// Assemble V (weak symmetric form, including the measure change) and T (strong form).
inline PerturbationOperators assemble_operators(const MetricPerturbation& mp, const ModalModel& model,
                                                OperatorOptions opt = {}) {
    const SpectralBasis& cav = *model.cavity;
    const int d = model.geom.dim();
    const Eigen::Index K = static_cast<Eigen::Index>(cav.size());
    int npp = opt.nodes_per_piece;
    if (npp <= 0) {
        int pmax = 0;
        for (const auto& pb : model.patches) pmax = std::max(pmax, pb->max_index());
        npp = 2 * (cav.max_index() + 2 * pmax) + 12;
    }
    const QuadGrid q = detail::cavity_operator_grid(model, npp);
    const double c2 = opt.c * opt.c, g0tt = -1.0 / c2;

    PerturbationOperators P{Eigen::MatrixXd::Zero(K, K), Eigen::MatrixXd::Zero(K, K), Eigen::MatrixXd::Zero(K, K),
                            Eigen::MatrixXd::Zero(K, K), cav.eigenvalues()};
    Eigen::VectorXd val(K);
    Eigen::MatrixXd grad(K, d);
    double gb[3];
    for (std::size_t p = 0; p < q.npts; ++p) {
        const auto x = q.point(p);
        const double wq = q.weights[p];
        const DisplacementJet j = mp.jet(x);
        if (j.J.isZero(0.0) && j.w.isZero(0.0) && j.w_t.isZero(0.0) && j.w_tt.isZero(0.0)) continue;
        for (Eigen::Index n = 0; n < K; ++n) {
            val[n] = cav.value(static_cast<std::size_t>(n), x);
            cav.gradient(static_cast<std::size_t>(n), x, gb);
            for (int a = 0; a < d; ++a) grad(n, a) = gb[a];
        }
        const bool full = mp.kind() == MetricModel::full_pullback;
        // spatial block and its trace
        Eigen::MatrixXd dg = j.J.transpose() * j.J;
        if (full) dg += j.J + j.J.transpose();
        const double tr = dg.trace();
        // V: -(dK - (lam_m + lam_n)/2 dM)
        const Eigen::MatrixXd A = 0.5 * tr * Eigen::MatrixXd::Identity(d, d) - dg;
        const Eigen::MatrixXd dK = grad * A * grad.transpose();
        const Eigen::MatrixXd dM = 0.5 * tr * val * val.transpose();
        for (Eigen::Index m = 0; m < K; ++m)
            for (Eigen::Index n = 0; n < K; ++n)
                P.V(m, n) -= wq * (dK(m, n) - 0.5 * (P.lambda[m] + P.lambda[n]) * dM(m, n));

        // space-time components and their derivatives
        const Eigen::VectorXd& wt = j.w_t;
        const double Gtt = wt.squaredNorm();
        const double Gtt_t = 2.0 * wt.dot(j.w_tt);
        const Eigen::VectorXd grad_Gtt = 2.0 * j.J_t.transpose() * wt;  // d_i |w_t|^2
        Eigen::VectorXd Gti = j.J.transpose() * wt;
        Eigen::VectorXd Gti_t = j.J_t.transpose() * wt + j.J.transpose() * j.w_tt;
        // div of (J^T w_t): sum_i sum_k (d_i d_i w_k w_t,k + d_i w_k d_i w_t,k)
        double div_Gti = j.lap_w.dot(wt) + (j.J.array() * j.J_t.array()).sum();
        double tr_t = 2.0 * (j.J.array() * j.J_t.array()).sum();
        if (full) {
            Gti += wt;
            Gti_t += j.w_tt;
            div_Gti += j.J_t.trace();
            tr_t += 2.0 * j.J_t.trace();
        }
        // raised: dG^tt = Gtt / c^4, dG^ti = -Gti / c^2
        const double up_tt = Gtt / (c2 * c2), up_tt_t = Gtt_t / (c2 * c2);
        const Eigen::VectorXd up_ti = -Gti / c2, up_ti_t = -Gti_t / c2;
        const double div_up_ti = -div_Gti / c2;
        const double Tr_t = g0tt * Gtt_t + tr_t;  // d/dt Tr(G0^-1 dG)

        // T2: -dG^tt
        const Eigen::MatrixXd mass = val * val.transpose();
        P.T2 -= wq * up_tt * mass;
        // T1: (1/2 G0^tt dTr/dt - d_t dG^tt - d_i dG^it) p_t - 2 dG^ti d_i p_t
        const double c1 = 0.5 * g0tt * Tr_t - up_tt_t - div_up_ti;
        const Eigen::VectorXd adv1 = grad * up_ti;  // (dG^ti d_i Psi_n) per n
        P.T1 += wq * (c1 * mass - 2.0 * val * adv1.transpose());
        // T0: -d_t dG^ti d_i p + 1/2 d_i(G0^tt dG_tt) d_i p
        const Eigen::VectorXd adv0 = grad * (-up_ti_t + 0.5 * g0tt * grad_Gtt);
        P.T0 += wq * val * adv0.transpose();
    }
    return P;
}

inline PerturbationOperators assemble_operators(const ModalModel& model, const BoundarySnapshot& snap,
                                                MetricModel kind = MetricModel::quadratic, OperatorOptions opt = {}) {
    MetricPerturbation mp(model, snap, kind);
    return assemble_operators(mp, model, opt);
}

// ============================================================================
// Spectral corrections
// ============================================================================

namespace detail {

inline void check_gap(const Eigen::VectorXd& lambda, Eigen::Index n) {
    for (Eigen::Index m = 0; m < lambda.size(); ++m)
        if (m != n && std::abs(lambda[m] - lambda[n]) <= 1e-9)
            fail(ErrorKind::degenerate_eigenvalue,
                 "eigenvalue " + std::to_string(n) + " is degenerate with " + std::to_string(m));
}

}  // namespace detail

/// Shift of lambda_n for the operator diag(lambda) - V.
inline double eigenvalue_shift(Eigen::Index n, const Eigen::MatrixXd& V, const Eigen::VectorXd& lambda, int order = 1) {
    require(order == 1 || order == 2, "eigenvalue_shift: order must be 1 or 2");
    require(V.rows() == V.cols() && V.rows() == lambda.size(), "eigenvalue_shift: size mismatch");
    require(n >= 0 && n < lambda.size(), "eigenvalue_shift: mode index out of range");
    detail::check_gap(lambda, n);
    double s = -V(n, n);
    if (order == 2)
        for (Eigen::Index m = 0; m < lambda.size(); ++m)
            if (m != n) s -= V(m, n) * V(m, n) / (lambda[m] - lambda[n]);
    return s;
}

/// First-order mixing coefficients of mode n; the n-th entry is zero.
inline Eigen::VectorXd eigenfunction_correction(Eigen::Index n, const Eigen::MatrixXd& V, const Eigen::VectorXd& lambda) {
    require(V.rows() == V.cols() && V.rows() == lambda.size(), "eigenfunction_correction: size mismatch");
    require(n >= 0 && n < lambda.size(), "eigenfunction_correction: mode index out of range");
    detail::check_gap(lambda, n);
    Eigen::VectorXd c = Eigen::VectorXd::Zero(lambda.size());
    for (Eigen::Index m = 0; m < lambda.size(); ++m)
        if (m != n) c[m] = V(m, n) / (lambda[m] - lambda[n]);
    return c;
}

// ============================================================================
// Kernel correction diagnostic
// ============================================================================

struct KernelCorrection {
    double ratio = 0.0;
    double leading_norm = 0.0;
    double correction_norm = 0.0;
};

/// First-order change of the sine kernel S(c^2 (diag(lambda) - W)) against the
/// leading term, both applied to the boundary source b'' over the grid.
inline KernelCorrection kernel_correction_diagnostic(const ModalModel& model, const BoundaryVibration& bv,
                                                     const AcousticMedium& med, const Eigen::MatrixXcd& W,
                                                     const TimeGrid& grid, int gauss_points = 4) {
    const SpectralBasis& cav = *model.cavity;
    const Eigen::Index K = static_cast<Eigen::Index>(cav.size());
    require(W.rows() == K && W.cols() == K, "kernel_correction_diagnostic: W size mismatch");
    auto b = boundary_volume_signal(model, bv);
    const GaussRule& r = gauss_legendre(gauss_points);
    const double h = grid.dt, c2 = med.c * med.c, fd = 1e-3 * h;
    std::vector<double> a(K);
    for (Eigen::Index n = 0; n < K; ++n) a[n] = c2 * cav.eigenvalue(static_cast<std::size_t>(n));
    const Eigen::MatrixXcd E = -c2 * W;

    // b'' at the quadrature nodes
    const int N = grid.steps;
    std::vector<double> tau, wt;
    std::vector<Eigen::VectorXcd> bdd;
    for (int s = 0; s < N; ++s)
        for (std::size_t g = 0; g < r.size(); ++g) {
            const double t = grid.t(s) + 0.5 * h * (1.0 + r.x[g]);
            tau.push_back(t);
            wt.push_back(0.5 * h * r.w[g]);
            const double lo = std::max(0.0, t - fd), hi = std::min(b->t_max(), t + fd);
            bdd.push_back((b->eval_rate(hi) - b->eval_rate(lo)) / (hi - lo));
        }

    double lead2 = 0.0, corr2 = 0.0;
    Eigen::VectorXd S(K), dS(K);
    for (int nt = 1; nt <= N; ++nt) {
        const double t = grid.t(nt);
        Eigen::VectorXcd lead = Eigen::VectorXcd::Zero(K), corr = Eigen::VectorXcd::Zero(K);
        for (std::size_t i = 0; i < tau.size() && tau[i] < t; ++i) {
            const double D = t - tau[i];
            for (Eigen::Index n = 0; n < K; ++n) {
                const WaveKernel wk = wave_kernel(a[n], D);
                S[n] = wk.S;
                dS[n] = wk.dS_dW;
            }
            for (Eigen::Index n = 0; n < K; ++n) {
                lead[n] += wt[i] * S[n] * bdd[i][n];
                for (Eigen::Index m = 0; m < K; ++m) {
                    // Frechet derivative of S at diag(a) in direction E
                    const double dd = std::abs(a[n] - a[m]) > 1e-12 * std::max(1.0, std::abs(a[n]))
                                          ? (S[n] - S[m]) / (a[n] - a[m])
                                          : dS[n];
                    corr[n] += wt[i] * E(n, m) * dd * bdd[i][m];
                }
            }
        }
        lead2 += lead.squaredNorm();
        corr2 += corr.squaredNorm();
    }
    KernelCorrection kc;
    kc.leading_norm = std::sqrt(lead2);
    kc.correction_norm = std::sqrt(corr2);
    kc.ratio = kc.leading_norm > 0.0 ? kc.correction_norm / kc.leading_norm : 0.0;
    return kc;
}

}  // namespace vibro
