#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vibro/errors.hpp"
#include "vibro/quadrature.hpp"

namespace vibro {

// ============================================================================
// Domain description
// ============================================================================

/// Rectangular patch on one face of the box. `lo`/`hi` give the extents along the
/// tangential axes in ascending axis order. In a 1D cavity the face is a point and
/// the patch carries a single lumped mode with eigenvalue `lumped_eigenvalue`.
struct PatchGeometry {
    int axis = 0;
    int side = 1;  // 0: face x_axis = 0, 1: face x_axis = a_axis
    std::vector<double> lo, hi;
    double lumped_eigenvalue = 0.0;

    double outward_normal_sign() const { return side == 1 ? 1.0 : -1.0; }
    int dim() const { return static_cast<int>(lo.size()); }
    double measure() const {
        double m = 1.0;
        for (std::size_t j = 0; j < lo.size(); ++j) m *= hi[j] - lo[j];
        return m;
    }
};

inline std::vector<int> tangential_axes(int cavity_dim, int normal_axis) {
    std::vector<int> t;
    for (int j = 0; j < cavity_dim; ++j)
        if (j != normal_axis) t.push_back(j);
    return t;
}

struct CavityGeometry {
    std::vector<double> edges;
    std::vector<PatchGeometry> patches;

    int dim() const { return static_cast<int>(edges.size()); }
    double volume() const {
        return std::accumulate(edges.begin(), edges.end(), 1.0, std::multiplies<>());
    }

    void validate() const {
        require(dim() >= 1 && dim() <= 3, "cavity dimension must be 1, 2 or 3");
        for (double a : edges) require(a > 0.0 && std::isfinite(a), "cavity edge lengths must be positive");
        for (std::size_t i = 0; i < patches.size(); ++i) {
            const auto& p = patches[i];
            const std::string tag = "patch " + std::to_string(i) + ": ";
            require(p.axis >= 0 && p.axis < dim(), tag + "normal axis out of range");
            require(p.side == 0 || p.side == 1, tag + "side must be 0 or 1");
            require(p.dim() == dim() - 1 && p.hi.size() == p.lo.size(), tag + "extent count must equal cavity dimension - 1");
            auto tang = tangential_axes(dim(), p.axis);
            for (int j = 0; j < p.dim(); ++j) {
                require(p.hi[j] > p.lo[j], tag + "zero or negative patch extent");
                require(p.lo[j] >= -1e-12 * edges[tang[j]] && p.hi[j] <= edges[tang[j]] * (1 + 1e-12),
                        tag + "extent outside the host face");
            }
            if (dim() == 1) require(p.lumped_eigenvalue > 0.0, tag + "point patches need a positive lumped eigenvalue");
            for (std::size_t k = 0; k < i; ++k) {
                const auto& q = patches[k];
                if (q.axis != p.axis || q.side != p.side) continue;
                double overlap = 1.0;
                for (int j = 0; j < p.dim(); ++j)
                    overlap *= std::max(0.0, std::min(p.hi[j], q.hi[j]) - std::max(p.lo[j], q.lo[j]));
                require(dim() > 1 && overlap <= 0.0, tag + "overlaps patch " + std::to_string(k));
            }
        }
    }
};

/// Whole-face patch helper.
inline PatchGeometry full_face_patch(const CavityGeometry& g, int axis, int side, double lumped_eigenvalue = 0.0) {
    PatchGeometry p;
    p.axis = axis;
    p.side = side;
    for (int j : tangential_axes(g.dim(), axis)) {
        p.lo.push_back(0.0);
        p.hi.push_back(g.edges[j]);
    }
    p.lumped_eigenvalue = lumped_eigenvalue;
    return p;
}

// ============================================================================
// Spectral bases
// ============================================================================

enum class BasisKind { cavity_neumann, patch_dirichlet };

/// Tensor-product Gauss-Legendre grid on a box.
struct QuadGrid {
    int dim = 0;
    std::size_t npts = 1;
    std::vector<double> points;   // npts * dim, row-major
    std::vector<double> weights;  // npts

    std::span<const double> point(std::size_t i) const {
        return {points.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }

    static QuadGrid tensor(const std::vector<double>& origin, const std::vector<double>& lengths,
                           const std::vector<int>& nodes) {
        QuadGrid g;
        g.dim = static_cast<int>(lengths.size());
        g.npts = 1;
        for (int n : nodes) g.npts *= static_cast<std::size_t>(n);
        g.points.resize(g.npts * g.dim);
        g.weights.assign(g.npts, 1.0);
        std::vector<int> idx(g.dim, 0);
        for (std::size_t p = 0; p < g.npts; ++p) {
            std::size_t rem = p;
            for (int j = g.dim - 1; j >= 0; --j) {
                idx[j] = static_cast<int>(rem % nodes[j]);
                rem /= nodes[j];
            }
            for (int j = 0; j < g.dim; ++j) {
                const GaussRule& r = gauss_legendre(nodes[j]);
                const double h = 0.5 * lengths[j];
                g.points[p * g.dim + j] = origin[j] + h * (1.0 + r.x[idx[j]]);
                g.weights[p] *= h * r.w[idx[j]];
            }
        }
        return g;
    }
};

struct Mode {
    double eigenvalue = 0.0;
    std::vector<int> index;
};

/// Analytic eigenbasis of the Neumann Laplacian on a box (cosines) or of the
/// Dirichlet Laplacian on a rectangular patch (sines). Immutable once built.
class SpectralBasis {
public:
    SpectralBasis(BasisKind kind, std::vector<double> origin, std::vector<double> lengths, int modes_per_axis,
                  double lumped_eigenvalue = 0.0)
        : kind_(kind), origin_(std::move(origin)), lengths_(std::move(lengths)), per_axis_(modes_per_axis) {
        require(modes_per_axis >= 1, "modes_per_axis must be positive");
        const int d = dim();
        for (double l : lengths_) require(l > 0.0, "basis extent must be positive");
        if (d == 0) {
            require(kind_ == BasisKind::patch_dirichlet, "a point basis must be a patch basis");
            require(lumped_eigenvalue > 0.0, "point patch needs a positive lumped eigenvalue");
            modes_.push_back({lumped_eigenvalue, {}});
        } else {
            const int lo = kind_ == BasisKind::cavity_neumann ? 0 : 1;
            std::size_t total = 1;
            for (int j = 0; j < d; ++j) total *= static_cast<std::size_t>(modes_per_axis);
            std::vector<int> idx(d);
            for (std::size_t p = 0; p < total; ++p) {
                std::size_t rem = p;
                for (int j = d - 1; j >= 0; --j) {
                    idx[j] = lo + static_cast<int>(rem % modes_per_axis);
                    rem /= modes_per_axis;
                }
                double lam = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double k = idx[j] * std::numbers::pi / lengths_[j];
                    lam += k * k;
                }
                modes_.push_back({lam, idx});
            }
            std::stable_sort(modes_.begin(), modes_.end(), [](const Mode& a, const Mode& b) {
                if (a.eigenvalue != b.eigenvalue) return a.eigenvalue < b.eigenvalue;
                return a.index < b.index;
            });
        }
        std::vector<int> nodes(d, quadrature_nodes(max_index()));
        grid_ = QuadGrid::tensor(origin_, lengths_, nodes);
        if (d == 0) {
            grid_.npts = 1;
            grid_.weights = {1.0};
        }
        samples_.resize(static_cast<Eigen::Index>(grid_.npts), static_cast<Eigen::Index>(modes_.size()));
        for (std::size_t p = 0; p < grid_.npts; ++p)
            for (std::size_t k = 0; k < modes_.size(); ++k)
                samples_(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k)) = value(k, grid_.point(p));
    }

    /// Nodes per axis for products of modes up to index m.
    static int quadrature_nodes(int max_index) { return 2 * max_index + 12; }

    BasisKind kind() const { return kind_; }
    int dim() const { return static_cast<int>(lengths_.size()); }
    std::size_t size() const { return modes_.size(); }
    int modes_per_axis() const { return per_axis_; }
    int max_index() const { return kind_ == BasisKind::cavity_neumann ? per_axis_ - 1 : per_axis_; }
    const std::vector<double>& origin() const { return origin_; }
    const std::vector<double>& lengths() const { return lengths_; }
    const Mode& mode(std::size_t k) const { return modes_[k]; }
    double eigenvalue(std::size_t k) const { return modes_[k].eigenvalue; }
    Eigen::VectorXd eigenvalues() const {
        Eigen::VectorXd v(static_cast<Eigen::Index>(size()));
        for (std::size_t k = 0; k < size(); ++k) v[static_cast<Eigen::Index>(k)] = modes_[k].eigenvalue;
        return v;
    }
    double measure() const {
        return std::accumulate(lengths_.begin(), lengths_.end(), 1.0, std::multiplies<>());
    }
    const QuadGrid& grid() const { return grid_; }
    /// Mode values on the quadrature grid, npts x size().
    const Eigen::MatrixXd& samples() const { return samples_; }

    double value(std::size_t k, std::span<const double> x) const {
        double v = 1.0;
        for (int j = 0; j < dim(); ++j) v *= factor(j, modes_[k].index[j], x[j]);
        return v;
    }

    /// Gradient of mode k at x, written to g[0..dim).
    void gradient(std::size_t k, std::span<const double> x, double* g) const {
        const int d = dim();
        double f[3], df[3];
        for (int j = 0; j < d; ++j) {
            f[j] = factor(j, modes_[k].index[j], x[j]);
            df[j] = dfactor(j, modes_[k].index[j], x[j]);
        }
        for (int j = 0; j < d; ++j) {
            double v = df[j];
            for (int i = 0; i < d; ++i)
                if (i != j) v *= f[i];
            g[j] = v;
        }
    }

    /// Mean of mode k over the basis domain, (1/|D|) * integral.
    double mode_mean(std::size_t k) const {
        if (dim() == 0) return 1.0;
        double m = 1.0;
        for (int j = 0; j < dim(); ++j) {
            const int n = modes_[k].index[j];
            const double l = lengths_[j];
            if (kind_ == BasisKind::cavity_neumann) {
                m *= n == 0 ? std::sqrt(1.0 / l) : 0.0;
            } else {
                m *= std::sqrt(2.0 / l) * (1.0 - std::cos(n * std::numbers::pi)) / (n * std::numbers::pi);
            }
        }
        return m;
    }

private:
    double factor(int j, int n, double x) const {
        const double l = lengths_[j];
        const double arg = n * std::numbers::pi * (x - origin_[j]) / l;
        if (kind_ == BasisKind::cavity_neumann) return (n == 0 ? std::sqrt(1.0 / l) : std::sqrt(2.0 / l)) * std::cos(arg);
        return std::sqrt(2.0 / l) * std::sin(arg);
    }
    double dfactor(int j, int n, double x) const {
        const double l = lengths_[j];
        const double k = n * std::numbers::pi / l;
        const double arg = k * (x - origin_[j]);
        if (kind_ == BasisKind::cavity_neumann) return n == 0 ? 0.0 : -std::sqrt(2.0 / l) * k * std::sin(arg);
        return std::sqrt(2.0 / l) * k * std::cos(arg);
    }

    BasisKind kind_;
    std::vector<double> origin_, lengths_;
    int per_axis_;
    std::vector<Mode> modes_;
    QuadGrid grid_;
    Eigen::MatrixXd samples_;
};

using BasisPtr = std::shared_ptr<const SpectralBasis>;

inline BasisPtr build_cavity_basis(const CavityGeometry& geom, int modes_per_axis) {
    geom.validate();
    require(modes_per_axis >= 1, "build_cavity_basis: modes_per_axis must be positive");
    return std::make_shared<const SpectralBasis>(BasisKind::cavity_neumann, std::vector<double>(geom.dim(), 0.0),
                                                 geom.edges, modes_per_axis);
}

inline BasisPtr build_patch_basis(const PatchGeometry& patch, int modes_per_axis) {
    require(modes_per_axis >= 1, "build_patch_basis: modes_per_axis must be positive");
    std::vector<double> len;
    for (int j = 0; j < patch.dim(); ++j) {
        require(patch.hi[j] > patch.lo[j], "build_patch_basis: zero patch extent");
        len.push_back(patch.hi[j] - patch.lo[j]);
    }
    if (patch.dim() == 0) modes_per_axis = 1;
    return std::make_shared<const SpectralBasis>(BasisKind::patch_dirichlet, patch.lo, len, modes_per_axis,
                                                 patch.lumped_eigenvalue);
}

/// Gram matrix under the basis quadrature rule.
inline Eigen::MatrixXd gram_matrix(const SpectralBasis& b) {
    const Eigen::Map<const Eigen::VectorXd> w(b.grid().weights.data(), static_cast<Eigen::Index>(b.grid().npts));
    return b.samples().transpose() * w.asDiagonal() * b.samples();
}

// ============================================================================
// Modal fields
// ============================================================================

struct ModalField {
    BasisPtr basis;
    Eigen::VectorXd coeffs;
    double t = 0.0;

    void validate() const {
        require(basis != nullptr, "modal field without basis");
        require(coeffs.size() == static_cast<Eigen::Index>(basis->size()), "coefficient count differs from basis size");
        require(coeffs.allFinite(), "non-finite modal coefficient");
    }
};

/// Quadrature projection of samples taken on the basis grid.
inline ModalField project(const Eigen::VectorXd& samples, const BasisPtr& basis) {
    require(basis != nullptr, "project: null basis");
    require(samples.size() == static_cast<Eigen::Index>(basis->grid().npts), "project: samples do not match the quadrature grid");
    const Eigen::Map<const Eigen::VectorXd> w(basis->grid().weights.data(), samples.size());
    ModalField f{basis, basis->samples().transpose() * (w.array() * samples.array()).matrix(), 0.0};
    return f;
}

/// Surface mean (1/|Gamma|) * integral of u for coefficients on a patch basis.
template <class Vec>
auto geometric_mean(const SpectralBasis& basis, const Vec& c) {
    using S = typename Vec::Scalar;
    S m = S(0);
    for (std::size_t k = 0; k < basis.size(); ++k) m += c[static_cast<Eigen::Index>(k)] * basis.mode_mean(k);
    return m;
}

inline double geometric_mean(const ModalField& u) {
    u.validate();
    return geometric_mean(*u.basis, u.coeffs);
}

struct PoincareCertificate {
    double lhs = 0.0;  // ||u - <u>|| / ||u||
    double rhs = 0.0;  // ||grad u|| / (sqrt(gamma_1) ||u||)
    bool holds = false;
    bool leading_order = false;
};

/// Poincare ratio pair for coefficients on a patch-Dirichlet basis.
/// `leading_order` is rhs < c_max * eps.
template <class Vec>
PoincareCertificate poincare_certificate(const SpectralBasis& basis, const Vec& c, double eps, double c_max = 10.0) {
    require(basis.kind() == BasisKind::patch_dirichlet, "poincare_certificate needs a patch basis");
    double norm2 = 0.0, grad2 = 0.0, gamma1 = basis.eigenvalue(0);
    for (std::size_t k = 0; k < basis.size(); ++k) {
        const double a2 = std::norm(c[static_cast<Eigen::Index>(k)]);
        norm2 += a2;
        grad2 += basis.eigenvalue(k) * a2;
    }
    if (!(norm2 > 0.0)) fail(ErrorKind::degenerate_input, "poincare_certificate: u has zero norm");
    const auto mean = geometric_mean(basis, c);
    const double dev2 = std::max(0.0, norm2 - std::norm(mean) * basis.measure());
    PoincareCertificate r;
    r.lhs = std::sqrt(dev2 / norm2);
    r.rhs = std::sqrt(grad2 / (gamma1 * norm2));
    r.holds = r.lhs <= r.rhs * (1.0 + 1e-12);
    r.leading_order = r.rhs < c_max * eps;
    return r;
}

inline PoincareCertificate poincare_certificate(const ModalField& u, double eps, double c_max = 10.0) {
    u.validate();
    return poincare_certificate(*u.basis, u.coeffs, eps, c_max);
}

// ============================================================================
// Boundary traces
// ============================================================================

/// Map a patch-local point to the cavity point on the host face.
inline void patch_to_cavity(const CavityGeometry& geom, const PatchGeometry& patch, std::span<const double> y,
                            double* x) {
    auto tang = tangential_axes(geom.dim(), patch.axis);
    x[patch.axis] = patch.side == 1 ? geom.edges[patch.axis] : 0.0;
    for (std::size_t j = 0; j < tang.size(); ++j) x[tang[j]] = y[j];
}

/// Trace coupling C(n, k) = integral over the patch of Psi_n * Phi_k.
inline Eigen::MatrixXd trace_coupling(const CavityGeometry& geom, const SpectralBasis& cavity, std::size_t patch_index,
                                      const SpectralBasis& patch_basis) {
    const PatchGeometry& patch = geom.patches.at(patch_index);
    const int d = patch.dim();
    const int nodes = SpectralBasis::quadrature_nodes(cavity.max_index() + patch_basis.max_index());
    QuadGrid g = QuadGrid::tensor(patch.lo, patch_basis.lengths(), std::vector<int>(d, nodes));
    if (d == 0) {
        g.npts = 1;
        g.weights = {1.0};
    }
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cavity.size()),
                                              static_cast<Eigen::Index>(patch_basis.size()));
    std::vector<double> x(geom.dim());
    Eigen::VectorXd cv(static_cast<Eigen::Index>(cavity.size())), pv(static_cast<Eigen::Index>(patch_basis.size()));
    for (std::size_t p = 0; p < g.npts; ++p) {
        auto y = g.point(p);
        patch_to_cavity(geom, patch, y, x.data());
        for (std::size_t n = 0; n < cavity.size(); ++n) cv[static_cast<Eigen::Index>(n)] = cavity.value(n, x);
        for (std::size_t k = 0; k < patch_basis.size(); ++k) pv[static_cast<Eigen::Index>(k)] = patch_basis.value(k, y);
        C.noalias() += g.weights[p] * cv * pv.transpose();
    }
    return C;
}

/// Integral of each cavity mode over a patch.
inline Eigen::VectorXd trace_integral(const CavityGeometry& geom, const SpectralBasis& cavity, std::size_t patch_index) {
    const PatchGeometry& patch = geom.patches.at(patch_index);
    const int d = patch.dim();
    std::vector<double> len;
    for (int j = 0; j < d; ++j) len.push_back(patch.hi[j] - patch.lo[j]);
    QuadGrid g = QuadGrid::tensor(patch.lo, len, std::vector<int>(d, SpectralBasis::quadrature_nodes(cavity.max_index())));
    if (d == 0) {
        g.npts = 1;
        g.weights = {1.0};
    }
    Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cavity.size()));
    std::vector<double> x(geom.dim());
    for (std::size_t p = 0; p < g.npts; ++p) {
        patch_to_cavity(geom, patch, g.point(p), x.data());
        for (std::size_t n = 0; n < cavity.size(); ++n) v[static_cast<Eigen::Index>(n)] += g.weights[p] * cavity.value(n, x);
    }
    return v;
}

}  // namespace vibro
