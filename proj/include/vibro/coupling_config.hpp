#pragma once

#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "vibro/errors.hpp"

namespace vibro {

/// Densities and thickness of the fluid/membrane pair.
struct CouplingConfig {
    double rho0 = 1.2;     // fluid density
    double rho_m = 1000.0; // membrane volumetric density
    double d = 1e-3;       // membrane thickness
    double eps = 1e-3;     // perturbation strength

    double sigma_m() const { return rho_m * d; }
    double sigma0() const { return rho0 * d; }
    double g() const { return rho0 / rho_m; }

    void validate() const {
        require(rho0 > 0.0 && std::isfinite(rho0), "fluid density must be positive");
        require(rho_m > 0.0 && std::isfinite(rho_m), "membrane density must be positive");
        require(d > 0.0 && std::isfinite(d), "membrane thickness must be positive");
        require(eps > 0.0 && std::isfinite(eps), "perturbation strength must be positive");
        require(g() < 1.0, "coupling strength rho0/rho_m must be below 1");
    }

    /// Set when g^2 and eps differ by more than a factor 10.
    std::optional<std::string> scaling_warning() const {
        const double g2 = g() * g();
        if (g2 > 10.0 * eps || eps > 10.0 * g2)
            return "coupling strength squared (" + std::to_string(g2) + ") and perturbation strength (" +
                   std::to_string(eps) + ") differ by more than a factor 10";
        return std::nullopt;
    }
};

/// External pressure p0 exp(i omega t) on the masked patches. `ramp` > 0 multiplies the
/// drive by a C^3 onset reaching 1 at t = ramp; `t_off` switches it off.
struct HarmonicSource {
    std::complex<double> p0 = 1.0;
    double omega = 1.0;
    std::vector<bool> mask;  // one flag per patch; empty drives every patch
    double ramp = 0.0;
    double t_off = std::numeric_limits<double>::infinity();

    void validate(std::size_t patches) const {
        require(omega > 0.0 && std::isfinite(omega), "harmonic source needs omega > 0");
        require(std::isfinite(p0.real()) && std::isfinite(p0.imag()), "harmonic source amplitude must be finite");
        require(mask.empty() || mask.size() == patches, "harmonic source mask needs one flag per patch");
        require(ramp >= 0.0 && t_off > 0.0, "harmonic source ramp/t_off out of range");
    }
    bool drives(std::size_t i) const { return mask.empty() || mask[i]; }

    /// Envelope value and derivative.
    std::pair<double, double> envelope(double t) const {
        if (t >= t_off) return {0.0, 0.0};
        if (ramp <= 0.0 || t >= ramp) return {1.0, 0.0};
        if (t <= 0.0) return {0.0, 0.0};
        const double s = t / ramp;
        const double s3 = s * s * s;
        const double v = s3 * s * (35.0 - 84.0 * s + 70.0 * s * s - 20.0 * s3);
        const double dv = 140.0 * s3 * (1.0 - s) * (1.0 - s) * (1.0 - s) / ramp;
        return {v, dv};
    }
    std::complex<double> value(double t) const {
        return p0 * envelope(t).first * std::exp(std::complex<double>(0.0, omega * t));
    }
    std::complex<double> rate(double t) const {
        auto [v, dv] = envelope(t);
        return p0 * (dv + std::complex<double>(0.0, omega) * v) * std::exp(std::complex<double>(0.0, omega * t));
    }
};

}  // namespace vibro
