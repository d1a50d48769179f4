#pragma once

#include "mfgen/error.hpp"
#include "mfgen/rng.hpp"
#include "mfgen/targets.hpp"
#include "mfgen/types.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <vector>

namespace mfgen {

/// Overdamped Langevin run dX = grad log pi(X) dt + sqrt(2) dW from X_0 ~ N(0, init_scale^2 I).
struct WGFRun {
    TargetDistribution target = TargetDistribution::isotropic_gaussian(2, 1.0);
    Eigen::Index particles = 2000;
    double dt = 0.01;
    std::size_t steps = 200;
    std::size_t stride = 10;
    std::uint64_t seed = 0;
    double init_scale = 1.0;

    void validate() const {
        if (!target.has_score()) throw UnsupportedError("Langevin flow needs a target with an analytic score");
        if (particles < 2) throw DomainError("Langevin flow needs at least 2 particles");
        if (!(dt > 0.0) || !std::isfinite(dt)) throw DomainError("step size must be positive");
        if (stride < 1) throw DomainError("snapshot stride must be at least 1");
        if (!(init_scale > 0.0)) throw DomainError("initial scale must be positive");
    }
};

/// Euler-Maruyama particle flow; returns the initial ensemble, every `stride`-th step and the final step.
inline std::vector<ParticleEnsemble> langevin_flow(const WGFRun& run) {
    run.validate();
    const int d = run.target.dim();
    const Eigen::Index n = run.particles;
    const std::uint64_t init_key = rng::derive(run.seed, {0x696e6974ULL});
    RowMatrix x(n, d);
    for (Eigen::Index r = 0; r < n; ++r)
        for (int i = 0; i < d; ++i)
            x(r, i) = run.init_scale * rng::counter_normal(init_key, static_cast<std::uint64_t>(r * d + i));

    std::vector<ParticleEnsemble> out;
    auto snap = [&](std::size_t k) {
        ParticleEnsemble e;
        e.states = x;
        e.time_label = static_cast<double>(k) * run.dt;
        e.seed = run.seed;
        e.tag = "langevin:" + std::to_string(k);
        out.push_back(std::move(e));
    };
    snap(0);
    const double noise = std::sqrt(2.0 * run.dt);
    Vector xr(d);
    for (std::size_t k = 0; k < run.steps; ++k) {
        const std::uint64_t key = rng::derive(run.seed, {0x6c616e67ULL, k});
        for (Eigen::Index r = 0; r < n; ++r) {
            xr = x.row(r).transpose();
            const Vector g = run.target.score(xr);
            for (int i = 0; i < d; ++i) {
                const double v = xr[i] + run.dt * g[i] + noise * rng::counter_normal(key, static_cast<std::uint64_t>(r * d + i));
                if (!std::isfinite(v)) throw DivergedError("Langevin particle became non-finite", k + 1);
                x(r, i) = v;
            }
        }
        if ((k + 1) % run.stride == 0 || k + 1 == run.steps) snap(k + 1);
    }
    return out;
}

/// Exact per-coordinate variance recursion of the scheme for pi = N(m, w I): v <- (1 - dt / w)^2 v + 2 dt.
inline double langevin_discrete_variance(double v0, double dt, std::size_t steps, double w = 1.0) {
    double v = v0;
    for (std::size_t k = 0; k < steps; ++k) v = (1.0 - dt / w) * (1.0 - dt / w) * v + 2.0 * dt;
    return v;
}

/// Continuous-time relaxation w + (v0 - w) e^{-2 t / w} of the variance toward pi = N(m, w I).
inline double langevin_variance(double v0, double t, double w = 1.0) { return w + (v0 - w) * std::exp(-2.0 * t / w); }

/// Silverman's rule h = (4 / (d + 2))^{1/(d+4)} n^{-1/(d+4)} sigma_bar, sigma_bar the mean coordinate std.
inline double silverman_bandwidth(const RowMatrix& x) {
    if (x.rows() < 2) throw DomainError("bandwidth needs at least 2 points");
    const double n = static_cast<double>(x.rows()), d = static_cast<double>(x.cols());
    const RowMatrix c = x.rowwise() - x.colwise().mean();
    const double sbar = (c.array().square().colwise().sum() / (n - 1.0)).sqrt().mean();
    return std::pow(4.0 / (d + 2.0), 1.0 / (d + 4.0)) * std::pow(n, -1.0 / (d + 4.0)) * sbar;
}

/// KL(rho_hat || pi) ~ mean_i [log rho_hat_{-i}(x_i) - log pi(x_i)] with a leave-one-out Gaussian KDE.
inline double kde_kl(const RowMatrix& x, const TargetDistribution& target, double h) {
    const Eigen::Index n = x.rows();
    if (n < 2) throw DomainError("KDE needs at least 2 particles");
    if (x.cols() != target.dim()) throw ShapeError("particle dimension does not match the target");
    if (!(h > 0.0)) throw DomainError("KDE bandwidth must be positive");
    const double d = static_cast<double>(x.cols());
    const double c = -0.5 / (h * h);
    const double log_norm = -0.5 * d * std::log(2.0 * std::numbers::pi * h * h) - std::log(static_cast<double>(n - 1));
    double total = 0.0;
    std::vector<double> e(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
            e[static_cast<std::size_t>(j)] = j == i ? -std::numeric_limits<double>::infinity()
                                                     : c * (x.row(i) - x.row(j)).squaredNorm();
            mx = std::max(mx, e[static_cast<std::size_t>(j)]);
        }
        double s = 0.0;
        for (double v : e) s += std::exp(v - mx);
        total += mx + std::log(s) + log_norm - target.log_density(x.row(i).transpose()).get();
    }
    return total / static_cast<double>(n);
}

struct FreeEnergyTrace {
    std::vector<std::size_t> steps;
    std::vector<double> kl;
    double bandwidth = 0.0;
};

/// KDE-KL per snapshot with one bandwidth for the whole trace. A non-positive bandwidth selects
/// Silverman's rule on the last snapshot.
inline FreeEnergyTrace free_energy_trace(const std::vector<ParticleEnsemble>& snapshots, const TargetDistribution& target,
                                         double bandwidth = 0.0, double dt = 0.0) {
    if (snapshots.size() < 2) throw DomainError("free-energy trace needs at least 2 snapshots");
    for (const auto& s : snapshots)
        if (s.size() == 0) throw DomainError("empty snapshot");
    FreeEnergyTrace t;
    t.bandwidth = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(snapshots.back().states);
    for (const auto& s : snapshots) {
        t.steps.push_back(dt > 0.0 ? static_cast<std::size_t>(std::llround(s.time_label / dt)) : t.steps.size());
        t.kl.push_back(kde_kl(s.states, target, t.bandwidth));
    }
    return t;
}

/// Trailing moving average over `window` entries (shorter at the start).
inline std::vector<double> moving_average(const std::vector<double>& v, std::size_t window) {
    if (window < 1) throw DomainError("smoothing window must be at least 1");
    std::vector<double> out(v.size());
    double run = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) {
        run += v[k];
        if (k >= window) run -= v[k - window];
        out[k] = run / static_cast<double>(std::min(k + 1, window));
    }
    return out;
}

/// Fraction of adjacent pairs (a, b) with b < a.
inline double decreasing_fraction(const std::vector<double>& v) {
    if (v.size() < 2) return 1.0;
    std::size_t dec = 0;
    for (std::size_t k = 1; k < v.size(); ++k) dec += v[k] < v[k - 1] ? 1 : 0;
    return static_cast<double>(dec) / static_cast<double>(v.size() - 1);
}

/// KL(N(m1, S1) || N(m2, S2)).
inline double gaussian_kl(const Vector& m1, const Matrix& S1, const Vector& m2, const Matrix& S2) {
    const Eigen::LDLT<Matrix> l2(S2);
    const double d = static_cast<double>(m1.size());
    const Vector dm = m2 - m1;
    const double logdet1 = S1.ldlt().vectorD().array().log().sum();
    const double logdet2 = l2.vectorD().array().log().sum();
    return 0.5 * (l2.solve(S1).trace() + dm.dot(l2.solve(dm)) - d + logdet2 - logdet1);
}

inline void write_trace_csv(std::ostream& os, const FreeEnergyTrace& t) {
    os << "step,kl_estimate\n";
    char buf[64];
    for (std::size_t k = 0; k < t.kl.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", t.kl[k]);
        os << t.steps[k] << ',' << buf << '\n';
    }
}

} // namespace mfgen
