#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "vibro/errors.hpp"

namespace vibro {

using cplx = std::complex<double>;

/// Uniform grid t_k = k * dt, k = 0..steps.
struct TimeGrid {
    double dt = 0.0;
    int steps = 0;

    TimeGrid() = default;
    TimeGrid(double t_end, int steps_) : dt(t_end / steps_), steps(steps_) {
        require(steps_ >= 1, "time grid needs at least one step");
        require(t_end > 0.0 && std::isfinite(t_end), "time grid end must be positive");
    }
    /// Smallest grid on [0, t_end] with max_freq * dt <= cfl.
    static TimeGrid for_frequency(double t_end, double max_freq, double cfl = 0.2, int min_steps = 16) {
        require(max_freq >= 0.0 && cfl > 0.0, "for_frequency: bad arguments");
        int n = static_cast<int>(std::ceil(t_end * max_freq / cfl));
        return TimeGrid(t_end, std::max(n, min_steps));
    }
    int size() const { return steps + 1; }
    double t(int k) const { return k * dt; }
    double end() const { return steps * dt; }
};

/// Vector-valued complex signal of time, with its time derivative.
class ModalSignal {
public:
    virtual ~ModalSignal() = default;
    virtual Eigen::Index size() const = 0;
    virtual Eigen::VectorXcd eval(double t) const = 0;
    virtual Eigen::VectorXcd eval_rate(double t) const = 0;
    /// Largest time at which the signal may be evaluated.
    virtual double t_max() const { return std::numeric_limits<double>::infinity(); }
};

using SignalPtr = std::shared_ptr<const ModalSignal>;

/// Samples on a uniform grid with derivatives; cubic Hermite in between.
class ModalSeries : public ModalSignal {
public:
    ModalSeries(TimeGrid grid, Eigen::MatrixXcd values, Eigen::MatrixXcd rates)
        : grid_(grid), values_(std::move(values)), rates_(std::move(rates)) {
        require(values_.rows() == grid_.size() && rates_.rows() == grid_.size() && values_.cols() == rates_.cols(),
                "ModalSeries: sample shape does not match the grid");
    }

    Eigen::Index size() const override { return values_.cols(); }
    const TimeGrid& grid() const { return grid_; }
    double t_max() const override { return grid_.end(); }
    const Eigen::MatrixXcd& values() const { return values_; }
    const Eigen::MatrixXcd& rates() const { return rates_; }

    Eigen::VectorXcd eval(double t) const override {
        auto [k, s] = locate(t);
        const double h = grid_.dt;
        const double h00 = (1 + 2 * s) * (1 - s) * (1 - s), h10 = s * (1 - s) * (1 - s);
        const double h01 = s * s * (3 - 2 * s), h11 = s * s * (s - 1);
        return (h00 * values_.row(k) + h10 * h * rates_.row(k) + h01 * values_.row(k + 1) + h11 * h * rates_.row(k + 1))
            .transpose();
    }
    Eigen::VectorXcd eval_rate(double t) const override {
        auto [k, s] = locate(t);
        const double h = grid_.dt;
        const double d00 = 6 * s * s - 6 * s, d10 = 3 * s * s - 4 * s + 1;
        const double d01 = -d00, d11 = 3 * s * s - 2 * s;
        return (d00 / h * values_.row(k) + d10 * rates_.row(k) + d01 / h * values_.row(k + 1) + d11 * rates_.row(k + 1))
            .transpose();
    }

private:
    std::pair<int, double> locate(double t) const {
        const double tol = 1e-9 * grid_.dt;
        require(t >= -tol && t <= grid_.end() + tol, "ModalSeries: time outside the sampled range");
        double x = std::clamp(t / grid_.dt, 0.0, static_cast<double>(grid_.steps));
        int k = std::min(static_cast<int>(x), grid_.steps - 1);
        return {k, x - k};
    }

    TimeGrid grid_;
    Eigen::MatrixXcd values_, rates_;
};

/// amplitude * exp(i omega t), amplitude per component.
class HarmonicSignal : public ModalSignal {
public:
    HarmonicSignal(Eigen::VectorXcd amplitude, double omega) : amp_(std::move(amplitude)), omega_(omega) {}
    Eigen::Index size() const override { return amp_.size(); }
    Eigen::VectorXcd eval(double t) const override { return amp_ * std::exp(cplx(0.0, omega_ * t)); }
    Eigen::VectorXcd eval_rate(double t) const override {
        return amp_ * (cplx(0.0, omega_) * std::exp(cplx(0.0, omega_ * t)));
    }
    double omega() const { return omega_; }
    const Eigen::VectorXcd& amplitude() const { return amp_; }

private:
    Eigen::VectorXcd amp_;
    double omega_;
};

/// Signal backed by callables.
class FunctionSignal : public ModalSignal {
public:
    using Fn = std::function<Eigen::VectorXcd(double)>;
    FunctionSignal(Eigen::Index n, Fn value, Fn rate) : n_(n), value_(std::move(value)), rate_(std::move(rate)) {}
    Eigen::Index size() const override { return n_; }
    Eigen::VectorXcd eval(double t) const override { return value_(t); }
    Eigen::VectorXcd eval_rate(double t) const override { return rate_(t); }

private:
    Eigen::Index n_;
    Fn value_, rate_;
};

/// sum of signals mapped through fixed matrices: sum_i M_i * s_i(t).
class MappedSumSignal : public ModalSignal {
public:
    void add(Eigen::MatrixXcd map, SignalPtr s) {
        require(s != nullptr && map.cols() == s->size(), "MappedSumSignal: map does not match the signal");
        if (!terms_.empty()) require(map.rows() == terms_.front().first.rows(), "MappedSumSignal: inconsistent output size");
        terms_.emplace_back(std::move(map), std::move(s));
    }
    Eigen::Index size() const override { return terms_.empty() ? 0 : terms_.front().first.rows(); }
    double t_max() const override {
        double t = std::numeric_limits<double>::infinity();
        for (const auto& term : terms_) t = std::min(t, term.second->t_max());
        return t;
    }
    Eigen::VectorXcd eval(double t) const override {
        Eigen::VectorXcd out = Eigen::VectorXcd::Zero(size());
        for (const auto& [m, s] : terms_) out += m * s->eval(t);
        return out;
    }
    Eigen::VectorXcd eval_rate(double t) const override {
        Eigen::VectorXcd out = Eigen::VectorXcd::Zero(size());
        for (const auto& [m, s] : terms_) out += m * s->eval_rate(t);
        return out;
    }

private:
    std::vector<std::pair<Eigen::MatrixXcd, SignalPtr>> terms_;
};

inline SignalPtr zero_signal(Eigen::Index n) {
    return std::make_shared<HarmonicSignal>(Eigen::VectorXcd::Zero(n), 0.0);
}

/// Discrete L2 norm over a series (all samples, all columns).
inline double series_norm(const Eigen::MatrixXcd& m) { return m.norm(); }

}  // namespace vibro
