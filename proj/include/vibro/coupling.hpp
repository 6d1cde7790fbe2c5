#pragma once

#include <cmath>
#include <complex>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vibro/acoustics.hpp"
#include "vibro/coupling_config.hpp"
#include "vibro/errors.hpp"
#include "vibro/geometry.hpp"
#include "vibro/magnus.hpp"
#include "vibro/membrane.hpp"
#include "vibro/signal.hpp"

namespace vibro {

// ---------------------------------------------------------------------------
// Picard decoupling
// ---------------------------------------------------------------------------

/// Everything the coupled solve needs. medium.rho0 must equal cfg.rho0.
struct CoupledProblem {
    ModalModel model;
    AcousticMedium medium;
    MembraneOperator op;
    TimeLapse lapse;
    CouplingConfig cfg;
    HarmonicSource src;
    TimeGrid grid;

    void validate() const {
        cfg.validate();
        medium.validate();
        src.validate(model.patch_count());
        require(model.patch_count() > 0, "coupled problem needs at least one patch");
        require(std::abs(medium.rho0 - cfg.rho0) <= 1e-12 * cfg.rho0, "medium and coupling densities differ");
        require(grid.steps >= 1, "coupled problem needs a time grid");
        for (const auto& b : model.patches) op.validate(*b);
    }
};

struct PicardOptions {
    int k_max = 3;
    MembraneOptions membrane;
    PressureOptions pressure;
    bool throw_on_divergence = true;
};

struct IterateRecord {
    std::vector<ModalHistory> u;  // per patch
    ModalHistory p;
};

/// Iterates k = 0..k_max with u^(k+1) = M(p^(k)) and p^(k+1) = P(u^(k)).
struct IterateLedger {
    std::vector<IterateRecord> iterates;
    std::vector<double> du, dp;  // ||u^(k+1) - u^(k)||, ||p^(k+1) - p^(k)||, k = 0..k_max-1
    // Successive ratios of the nonzero corrections. The scheme pairs iterates
    // (u1 = u2, p2 = p3), so these are ||u3-u2||/||u1||, ||p4-p3||/||p2||, ...
    std::vector<double> u_ratios, p_ratios;
    bool contracting = true;

    const IterateRecord& last() const { return iterates.back(); }
    int k_max() const { return static_cast<int>(iterates.size()) - 1; }
};

namespace detail {

inline double patches_norm(const std::vector<ModalHistory>& a, const std::vector<ModalHistory>* b = nullptr) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += b ? (a[i].value - (*b)[i].value).squaredNorm() : a[i].value.squaredNorm();
    return std::sqrt(s);
}

inline std::vector<double> nonzero_ratios(const std::vector<double>& corr) {
    std::vector<double> nz, r;
    for (double c : corr)
        if (c > 0.0) nz.push_back(c);
    for (std::size_t i = 1; i < nz.size(); ++i) r.push_back(nz[i] / nz[i - 1]);
    return r;
}

inline Eigen::VectorXd patch_mode_integrals(const SpectralBasis& b) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(b.size()));
    for (std::size_t k = 0; k < b.size(); ++k) v[static_cast<Eigen::Index>(k)] = b.mode_mean(k) * b.measure();
    return v;
}

inline SignalPtr drive_signal(const HarmonicSource& src) {
    auto v = [src](double t) { return Eigen::VectorXcd::Constant(1, src.value(t)); };
    auto r = [src](double t) { return Eigen::VectorXcd::Constant(1, src.rate(t)); };
    return std::make_shared<FunctionSignal>(1, v, r);
}

inline ModalHistory zero_history(const TimeGrid& grid, Eigen::Index modes) {
    return {grid, Eigen::MatrixXcd::Zero(grid.size(), modes), Eigen::MatrixXcd::Zero(grid.size(), modes)};
}

}  // namespace detail

/// Modal membrane source on patch i: (p_ex mask int Phi_k - sum_n C(n,k) p_n) / sigma_m.
inline std::shared_ptr<MappedSumSignal> membrane_source(const CoupledProblem& pb, std::size_t i, const SignalPtr& pressure) {
    const SpectralBasis& b = *pb.model.patches[i];
    const double sm = pb.cfg.sigma_m();
    auto s = std::make_shared<MappedSumSignal>();
    s->add((-pb.model.traces[i].transpose() / sm).cast<cplx>(), pressure);
    if (pb.src.drives(i)) s->add((detail::patch_mode_integrals(b) / sm).cast<cplx>(), detail::drive_signal(pb.src));
    return s;
}

inline IterateLedger picard_iterate(const CoupledProblem& pb, PicardOptions opt = {}) {
    pb.validate();
    require(opt.k_max >= 2, "picard_iterate: k_max must be at least 2");
    const std::size_t P = pb.model.patch_count();
    const Eigen::Index K = static_cast<Eigen::Index>(pb.model.cavity->size());

    IterateLedger L;
    IterateRecord zero;
    for (std::size_t i = 0; i < P; ++i)
        zero.u.push_back(detail::zero_history(pb.grid, static_cast<Eigen::Index>(pb.model.patches[i]->size())));
    zero.p = detail::zero_history(pb.grid, K);
    L.iterates.push_back(zero);

    for (int k = 0; k < opt.k_max; ++k) {
        const IterateRecord& cur = L.iterates.back();
        IterateRecord next;
        SignalPtr pk = cur.p.series();
        for (std::size_t i = 0; i < P; ++i) {
            auto s = membrane_source(pb, i, pk);
            next.u.push_back(solve_membrane(*pb.model.patches[i], pb.op, pb.lapse, *s, pb.grid, opt.membrane));
        }
        BoundaryVibration bv;
        for (const auto& h : cur.u) bv.u.push_back(h.series());
        next.p = solve_pressure(pb.model, bv, pb.medium, pb.grid, opt.pressure);
        L.du.push_back(detail::patches_norm(next.u, &cur.u));
        L.dp.push_back((next.p.value - cur.p.value).norm());
        L.iterates.push_back(std::move(next));
    }
    L.u_ratios = detail::nonzero_ratios(L.du);
    L.p_ratios = detail::nonzero_ratios(L.dp);
    for (double r : L.u_ratios) L.contracting = L.contracting && r < 1.0;
    for (double r : L.p_ratios) L.contracting = L.contracting && r < 1.0;
    if (!L.contracting && opt.throw_on_divergence)
        fail(ErrorKind::contraction_violation, "picard_iterate: correction norms do not decrease");
    return L;
}

// ---------------------------------------------------------------------------
// Resonance function
// ---------------------------------------------------------------------------

struct ResonanceParts {
    cplx value;           // int_0^t e^{i w tau} sin(Omega (t - tau)) / Omega dtau
    cplx R;               // cos(Omega t) + i w sin(Omega t) / Omega
    cplx R_plus, R_minus; // R = R_plus e^{i Omega t} + R_minus e^{-i Omega t} for Omega > 0
    bool limit_branch = false;
};

/// value = (e^{i w t} - R(t)) / (Omega^2 - w^2), Omega^2 = c^2 lambda. Inside the band
/// |w^2 - Omega^2| < 1e-8 w^2 the removable singularity is replaced by -dR/dOmega^2.
inline ResonanceParts harmonic_integral(double omega, double lambda, double t, double c, bool allow_limit = true) {
    require(omega >= 0.0 && lambda >= 0.0 && t >= 0.0 && c > 0.0, "harmonic_integral: arguments out of range");
    const double W = c * c * lambda, w2 = omega * omega;
    const double S = sine_kernel(W, t), C = cosine_kernel(W, t);
    ResonanceParts r;
    r.R = cplx(C, omega * S);
    if (W > 0.0) {
        const double q = omega / std::sqrt(W);
        r.R_plus = 0.5 * (1.0 + q);
        r.R_minus = 0.5 * (1.0 - q);
    }
    if (std::abs(w2 - W) < 1e-8 * w2 || (w2 == 0.0 && W == 0.0)) {
        if (!allow_limit) fail(ErrorKind::resonance_singularity, "harmonic_integral: resonant frequency");
        r.limit_branch = true;
        if (W == 0.0) {
            r.value = 0.5 * t * t;
        } else {
            r.value = cplx(0.5 * t * S, -omega * (t * C - S) / (2.0 * W));
        }
        return r;
    }
    r.value = (std::exp(cplx(0.0, omega * t)) - r.R) / (W - w2);
    return r;
}

/// Cross-section average of the pressure driven by a piston u(t) = u_mean e^{i w t} on
/// one box face, at normal positions s in [0,1] (s = 0 on the driven face).
struct MeanPressureField {
    TimeGrid grid;
    std::vector<double> s;
    Eigen::MatrixXcd value;  // times x s
};

inline MeanPressureField closed_form_mean_pressure(const AcousticMedium& med, const HarmonicSource& src,
                                                   const CavityGeometry& geom, std::size_t patch_index,
                                                   int normal_modes, cplx u_mean, const TimeGrid& grid,
                                                   const std::vector<double>& s) {
    med.validate();
    geom.validate();
    require(src.omega > 0.0, "closed_form_mean_pressure: omega must be positive");
    require(normal_modes >= 1, "closed_form_mean_pressure: need at least one mode");
    const PatchGeometry& patch = geom.patches.at(patch_index);
    const int ax = patch.axis;
    const double a = geom.edges[ax];
    double face = 1.0;
    for (int j = 0; j < geom.dim(); ++j)
        if (j != ax) face *= geom.edges[j];
    const double frac = patch.measure() / face;
    const SpectralBasis chi(BasisKind::cavity_neumann, {0.0}, {a}, normal_modes);
    auto x_of = [&](double sv) { return patch.side == 1 ? a * (1.0 - sv) : a * sv; };
    const double x0 = x_of(0.0);

    MeanPressureField f{grid, s, Eigen::MatrixXcd::Zero(grid.size(), static_cast<Eigen::Index>(s.size()))};
    if (u_mean == 0.0) return f;
    const cplx pref = -src.omega * src.omega * med.rho0 * med.c * med.c * u_mean * frac;
    for (std::size_t n = 0; n < chi.size(); ++n) {
        const double lam = chi.eigenvalue(n);
        const double c0 = chi.value(n, std::vector<double>{x0});
        for (int ti = 0; ti < grid.size(); ++ti) {
            const cplx hv = harmonic_integral(src.omega, lam, grid.t(ti), med.c).value;
            for (std::size_t j = 0; j < s.size(); ++j)
                f.value(ti, static_cast<Eigen::Index>(j)) += pref * c0 * chi.value(n, std::vector<double>{x_of(s[j])}) * hv;
        }
    }
    return f;
}

// ---------------------------------------------------------------------------
// Curvature
// ---------------------------------------------------------------------------

/// Half the patch Laplacian, applied spectrally: H_k = -gamma_k u_k / 2.
inline ModalField mean_curvature(const ModalField& u) {
    u.validate();
    ModalField h = u;
    for (std::size_t k = 0; k < u.basis->size(); ++k)
        h.coeffs[static_cast<Eigen::Index>(k)] *= -0.5 * u.basis->eigenvalue(k);
    return h;
}

/// Background curvature scale from the patch means: gamma_bar = -<H[u]> / <u>.
inline double lcpo_gamma_bar(const ModalField& u) {
    const double m = geometric_mean(u);
    const double scale = u.coeffs.norm() * std::sqrt(1.0 / u.basis->measure());
    if (!(std::abs(m) > 1e-12 * scale)) fail(ErrorKind::degenerate_input, "lcpo: u has zero patch mean");
    return -geometric_mean(mean_curvature(u)) / m;
}

/// Per-mode factor of V_curv = (2 c_m^2 - 8 gamma_bar c_H^2 d^2) dH with dH = H[u] + gamma_bar u.
inline Eigen::VectorXd lcpo_multiplier(const SpectralBasis& b, const MembraneOperator& op, double gamma_bar) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(b.size()));
    const double a = 2.0 * op.cm2 - 8.0 * gamma_bar * op.cH2 * op.d * op.d;
    for (std::size_t k = 0; k < b.size(); ++k) v[static_cast<Eigen::Index>(k)] = a * (gamma_bar - 0.5 * b.eigenvalue(k));
    return v;
}

struct LcpoResult {
    double gamma_bar = 0.0;
    double curvature_ratio = 0.0;       // ||dH|| / (gamma_bar ||u||) on the reference field
    std::vector<ModalHistory> iterates; // l = 0..l_max
    std::vector<double> corrections;    // ||u^(l+1) - u^(l)||, l = 0..l_max-1
    double next_correction = 0.0;       // last entry of `corrections`
};

/// Constant-coefficient solves with p(2 gamma_bar), corrected by V_curv of the previous iterate.
inline LcpoResult lcpo_iteration(const ModalField& u_ref, const MembraneOperator& op, double gamma_bar,
                                 const TimeLapse& lapse, const SignalPtr& src, const TimeGrid& grid, int l_max,
                                 MembraneOptions opt = {}) {
    u_ref.validate();
    require(l_max >= 1, "lcpo_iteration: l_max must be at least 1");
    require(gamma_bar > 0.0, "lcpo_iteration: gamma_bar must be positive");
    const SpectralBasis& b = *u_ref.basis;
    const Eigen::Index K = static_cast<Eigen::Index>(b.size());
    require(src != nullptr && src->size() == K, "lcpo_iteration: source does not match the basis");

    LcpoResult r;
    r.gamma_bar = gamma_bar;
    const double un = u_ref.coeffs.norm();
    if (!(un > 0.0)) fail(ErrorKind::degenerate_input, "lcpo_iteration: reference field has zero norm");
    Eigen::VectorXd dH(K);
    for (Eigen::Index k = 0; k < K; ++k) dH[k] = (gamma_bar - 0.5 * b.eigenvalue(static_cast<std::size_t>(k))) * u_ref.coeffs[k];
    r.curvature_ratio = dH.norm() / (gamma_bar * un);
    if (r.curvature_ratio >= 1.0)
        fail(ErrorKind::assumption_violation, "lcpo_iteration: curvature deviation is not small (ratio " +
                                                  std::to_string(r.curvature_ratio) + ")");

    const double p_bar = op.p(2.0 * gamma_bar);
    require(p_bar > 0.0, "lcpo_iteration: p(2 gamma_bar) must be positive");
    opt.p_override.assign(static_cast<std::size_t>(K), p_bar);
    const Eigen::MatrixXcd Vc = lcpo_multiplier(b, op, gamma_bar).asDiagonal().toDenseMatrix().cast<cplx>();

    r.iterates.push_back(solve_membrane(b, op, lapse, *src, grid, opt));
    for (int l = 0; l < l_max; ++l) {
        MappedSumSignal s;
        s.add(Eigen::MatrixXcd::Identity(K, K), src);
        s.add(Vc, r.iterates.back().series());
        r.iterates.push_back(solve_membrane(b, op, lapse, s, grid, opt));
        r.corrections.push_back((r.iterates.back().value - r.iterates[r.iterates.size() - 2].value).norm());
    }
    r.next_correction = r.corrections.back();
    return r;
}

// ---------------------------------------------------------------------------
// Piston approximation
// ---------------------------------------------------------------------------

struct PistonReport {
    std::vector<Eigen::VectorXcd> mean_u;     // <u_i>(t_n) per patch
    std::vector<double> ratio_per_patch;      // space-time ||u - <u>|| / ||u||
    std::vector<double> bound_per_patch;      // (1/sqrt(gamma_1)) ||grad u|| / ||u||
    double ratio = 0.0, bound = 0.0;
    double c_piston = 0.0;                    // ratio / eps
    bool leading_order = false;
    ModalHistory p_full, p_piston;
    double deviation = 0.0;                   // ||p_piston - p_full|| / ||p_full||
    bool within_bound = false;                // deviation <= c_piston * eps
};

/// Replaces each patch displacement by its surface mean and compares the driven pressure.
inline PistonReport piston_pipeline(const ModalModel& model, const BoundaryVibration& bv, const AcousticMedium& med,
                                    const TimeGrid& grid, double eps, double c_max = 10.0, PressureOptions opt = {}) {
    require(eps > 0.0, "piston_pipeline: eps must be positive");
    require(bv.u.size() == model.patch_count(), "piston_pipeline: one signal per patch required");
    PistonReport r;
    double n2_all = 0.0, d2_all = 0.0, g2_all = 0.0, wg_all = 0.0;
    auto vol = std::make_shared<MappedSumSignal>();
    for (std::size_t i = 0; i < model.patch_count(); ++i) {
        const SpectralBasis& b = *model.patches[i];
        const Eigen::Index Ki = static_cast<Eigen::Index>(b.size());
        Eigen::VectorXd means(Ki), gam(Ki);
        for (Eigen::Index k = 0; k < Ki; ++k) {
            means[k] = b.mode_mean(static_cast<std::size_t>(k));
            gam[k] = b.eigenvalue(static_cast<std::size_t>(k));
        }
        Eigen::VectorXcd mu(grid.size());
        double n2 = 0.0, d2 = 0.0, g2 = 0.0;
        for (int n = 0; n < grid.size(); ++n) {
            const Eigen::VectorXcd c = bv.u[i]->eval(grid.t(n));
            mu[n] = (means.transpose().cast<cplx>() * c)(0);
            const double a2 = c.squaredNorm();
            n2 += a2;
            d2 += std::max(0.0, a2 - std::norm(mu[n]) * b.measure());
            g2 += (gam.array() * c.array().abs2()).sum();
        }
        r.mean_u.push_back(mu);
        r.ratio_per_patch.push_back(n2 > 0.0 ? std::sqrt(d2 / n2) : 0.0);
        r.bound_per_patch.push_back(n2 > 0.0 ? std::sqrt(g2 / (gam[0] * n2)) : 0.0);
        n2_all += n2;
        d2_all += d2;
        g2_all += g2;
        wg_all += gam[0] * n2;
        vol->add((trace_integral(model.geom, *model.cavity, i) * means.transpose()).cast<cplx>(), bv.u[i]);
    }
    if (!(n2_all > 0.0)) fail(ErrorKind::degenerate_input, "piston_pipeline: u has zero norm");
    r.ratio = std::sqrt(d2_all / n2_all);
    r.bound = std::sqrt(g2_all / wg_all);
    r.c_piston = r.ratio / eps;
    r.leading_order = r.c_piston < c_max;
    r.p_full = solve_pressure(model, bv, med, grid, opt);
    r.p_piston = solve_pressure_volume(*model.cavity, vol, med, grid, opt);
    const double ref = r.p_full.value.norm();
    const double diff = (r.p_piston.value - r.p_full.value).norm();
    r.deviation = ref > 0.0 ? diff / ref : (diff == 0.0 ? 0.0 : INFINITY);
    r.within_bound = r.deviation <= r.c_piston * eps;
    return r;
}

inline PistonReport piston_pipeline(const CoupledProblem& pb, const IterateLedger& L, double c_max = 10.0) {
    BoundaryVibration bv;
    for (const auto& h : L.last().u) bv.u.push_back(h.series());
    return piston_pipeline(pb.model, bv, pb.medium, pb.grid, pb.cfg.eps, c_max);
}

}  // namespace vibro
