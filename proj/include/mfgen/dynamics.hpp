#pragma once

#include "mfgen/autodiff.hpp"
#include "mfgen/error.hpp"
#include "mfgen/rng.hpp"
#include "mfgen/targets.hpp"
#include "mfgen/types.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace mfgen {

/// Constant-coefficient affine noising specification.
///
/// The generation drift is f(x) = a x + b (b applied to every coordinate) with diffusion sigma.
/// Noising runs the time-reversed law dY = -f(Y) ds + sigma dW from eta(., 0) = pi; a = 1/2,
/// b = 0, sigma = 1 is the Ornstein-Uhlenbeck instance.
struct SDESpec {
    double a = 0.5;
    double b = 0.0;
    double sigma = 1.0;
    double T = 3.0;
    int d = 2;

    void validate() const {
        if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("sde.sigma must be positive");
        if (!(T > 0.0) || !std::isfinite(T)) throw ConfigError("sde.T must be positive");
        if (!std::isfinite(a) || !std::isfinite(b)) throw ConfigError("sde drift coefficients must be finite");
        if (d < 1) throw ConfigError("dimension must be at least 1");
    }

    double drift(double x) const noexcept { return a * x + b; }
    /// Divergence of f, constant for affine drifts.
    double div_drift() const noexcept { return a * d; }

    /// Mean scaling e^{-a s} of the noising transition.
    double mean_scale(double s) const noexcept { return std::exp(-a * s); }
    /// Additive mean shift of the transition started at 0.
    double mean_shift(double s) const noexcept {
        return a == 0.0 ? -b * s : -(b / a) * (1.0 - std::exp(-a * s));
    }
    /// Transition variance per coordinate.
    double noise_variance(double s) const noexcept {
        return a == 0.0 ? sigma * sigma * s : sigma * sigma * (1.0 - std::exp(-2.0 * a * s)) / (2.0 * a);
    }
};

/// Pushes states through the exact noising transition at per-row times `s`.
/// Noise for row r uses counters (r * d + i) of `key`.
inline RowMatrix perturb_rows(const SDESpec& spec, const RowMatrix& y0, const std::vector<double>& s, std::uint64_t key) {
    RowMatrix y(y0.rows(), y0.cols());
    for (Eigen::Index r = 0; r < y0.rows(); ++r) {
        const double sr = s[static_cast<std::size_t>(r)];
        const double m = spec.mean_scale(sr), shift = spec.mean_shift(sr), sd = std::sqrt(spec.noise_variance(sr));
        for (Eigen::Index i = 0; i < y0.cols(); ++i)
            y(r, i) = m * y0(r, i) + shift +
                      sd * rng::counter_normal(key, static_cast<std::uint64_t>(r * y0.cols() + i));
    }
    return y;
}

inline ParticleEnsemble ou_perturb(const SDESpec& spec, const ParticleEnsemble& batch, double s, std::uint64_t seed) {
    spec.validate();
    if (!(s >= 0.0 && s <= spec.T)) throw DomainError("noising time " + std::to_string(s) + " outside [0, T]");
    ParticleEnsemble out;
    out.seed = seed;
    out.time_label = s;
    out.tag = batch.tag + "+noised";
    if (s == 0.0) {
        out.states = batch.states;
        return out;
    }
    out.states = perturb_rows(spec, batch.states, std::vector<double>(static_cast<std::size_t>(batch.size()), s),
                              rng::derive(seed, {0x6f75ULL}));
    return out;
}

/// Batch score field: fills `out` (n x d) with the score at noising time s for each row of `y`.
using ScoreFn = std::function<void(const RowMatrix& y, double s, RowMatrix& out)>;

inline ScoreFn network_score(const MLPParams& net) {
    if (net.output_dim() != net.state_dim()) throw ShapeError("score network must have d_out == d");
    return [&net](const RowMatrix& y, double s, RowMatrix& out) {
        Matrix in(y.cols() + 1, y.rows());
        in.topRows(y.cols()) = y.transpose();
        in.row(y.cols()).setConstant(s);
        out = mlp_values(net, in).transpose();
    };
}

inline ScoreFn zero_score() {
    return [](const RowMatrix& y, double, RowMatrix& out) { out = RowMatrix::Zero(y.rows(), y.cols()); };
}

/// Closed-form noised Gaussian eta(., s) = N(mu(s), C(s)) for pi = N(m, Sigma).
class GaussianEta {
public:
    GaussianEta(const SDESpec& spec, const TargetDistribution& target) : spec_(spec) {
        if (target.kind() != TargetKind::gaussian)
            throw UnsupportedError("analytic eta is only available for a Gaussian target, got " + to_string(target.kind()));
        if (target.dim() != spec.d) throw ShapeError("target dimension does not match the SDE dimension");
        m_ = target.means().front();
        Sigma_ = target.covariances().front();
    }

    int dim() const noexcept { return spec_.d; }
    Vector mean(double s) const { return spec_.mean_scale(s) * m_ + Vector::Constant(spec_.d, spec_.mean_shift(s)); }
    Matrix cov(double s) const {
        const double e = spec_.mean_scale(s);
        return e * e * Sigma_ + spec_.noise_variance(s) * Matrix::Identity(spec_.d, spec_.d);
    }
    Vector mean_rate(double s) const {
        return -spec_.a * spec_.mean_scale(s) * m_ - Vector::Constant(spec_.d, spec_.b * spec_.mean_scale(s));
    }
    Matrix cov_rate(double s) const {
        const double e2 = std::exp(-2.0 * spec_.a * s);
        return -2.0 * spec_.a * e2 * Sigma_ + spec_.sigma * spec_.sigma * e2 * Matrix::Identity(spec_.d, spec_.d);
    }

    Vector score(const Vector& y, double s) const { return -cov(s).llt().solve(y - mean(s)); }
    double log_density(const Vector& y, double s) const {
        const Eigen::LLT<Matrix> llt(cov(s));
        const Vector r = y - mean(s);
        const Matrix L = llt.matrixL();
        return -0.5 * (r.dot(llt.solve(r)) + 2.0 * L.diagonal().array().log().sum() +
                       spec_.d * std::log(2.0 * std::numbers::pi));
    }

    ScoreFn score_fn() const {
        return [self = *this](const RowMatrix& y, double s, RowMatrix& out) {
            const Matrix P = self.cov(s).inverse();
            const Vector mu = self.mean(s);
            out = -((y.rowwise() - mu.transpose()) * P);
        };
    }

private:
    SDESpec spec_;
    Vector m_;
    Matrix Sigma_;
};

/// Field evaluator for the analytic score of eta (vector field indexed by noising time).
class GaussianEtaScoreEvaluator {
public:
    using scalar = double;
    explicit GaussianEtaScoreEvaluator(GaussianEta eta) : eta_(std::move(eta)) {}
    int state_dim() const { return eta_.dim(); }
    int output_dim() const { return eta_.dim(); }

    FieldJets<double> operator()(const std::vector<double>& x, const std::vector<double>& t, JetRequest req) const {
        const int d = eta_.dim();
        const int n = static_cast<int>(t.size());
        FieldJets<double> out;
        out.allocate(d, d, n, req);
        for (int j = 0; j < n; ++j) {
            const double s = t[static_cast<std::size_t>(j)];
            const Matrix P = eta_.cov(s).inverse();
            const Vector r = Eigen::Map<const Vector>(x.data() + static_cast<std::ptrdiff_t>(d) * j, d) - eta_.mean(s);
            const Vector v = -P * r;
            const Vector ds = P * eta_.cov_rate(s) * P * r + P * eta_.mean_rate(s);
            for (int c = 0; c < d; ++c) {
                out.val[static_cast<std::size_t>(c + d * j)] = v(c);
                if (req.time) out.dtime[static_cast<std::size_t>(c + d * j)] = ds(c);
                if (req.spatial || req.laplacian)
                    for (int i = 0; i < d; ++i) out.jac[static_cast<std::size_t>(c + d * (i + d * j))] = -P(c, i);
            }
        }
        return out;
    }

private:
    GaussianEta eta_;
};

/// Field evaluator for the analytic log-density of eta (scalar potential).
class GaussianEtaLogDensityEvaluator {
public:
    using scalar = double;
    explicit GaussianEtaLogDensityEvaluator(GaussianEta eta) : eta_(std::move(eta)) {}
    int state_dim() const { return eta_.dim(); }
    int output_dim() const { return 1; }

    FieldJets<double> operator()(const std::vector<double>& x, const std::vector<double>& t, JetRequest req) const {
        const int d = eta_.dim();
        const int n = static_cast<int>(t.size());
        FieldJets<double> out;
        out.allocate(d, 1, n, req);
        for (int j = 0; j < n; ++j) {
            const double s = t[static_cast<std::size_t>(j)];
            const Matrix P = eta_.cov(s).inverse();
            const Vector y = Eigen::Map<const Vector>(x.data() + static_cast<std::ptrdiff_t>(d) * j, d);
            const Vector r = y - eta_.mean(s);
            const auto jj = static_cast<std::size_t>(j);
            out.val[jj] = eta_.log_density(y, s);
            if (req.spatial || req.laplacian) {
                const Vector g = -P * r;
                for (int i = 0; i < d; ++i) out.jac[static_cast<std::size_t>(i + d * j)] = g(i);
            }
            if (req.time) {
                const Matrix Cd = eta_.cov_rate(s);
                out.dtime[jj] = -0.5 * (P * Cd).trace() + 0.5 * r.dot(P * Cd * P * r) + r.dot(P * eta_.mean_rate(s));
            }
            if (req.laplacian) out.lap[jj] = -P.trace();
        }
        return out;
    }

private:
    GaussianEta eta_;
};

/// Called after every integration step with (step index, generation time, states).
using StepObserver = std::function<void(std::size_t step, double t, const RowMatrix& states)>;

namespace detail {

inline std::size_t step_count(double T, double dt) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("time step must be positive");
    const double r = std::round(T / dt);
    if (r < 1.0 || std::abs(r * dt - T) > 1e-12 * std::max(1.0, T))
        throw ConfigError("time step does not divide the horizon");
    return static_cast<std::size_t>(r);
}

inline RowMatrix standard_normal_rows(Eigen::Index n, int d, std::uint64_t key) {
    RowMatrix x(n, d);
    for (Eigen::Index r = 0; r < n; ++r)
        for (int i = 0; i < d; ++i) x(r, i) = rng::counter_normal(key, static_cast<std::uint64_t>(r * d + i));
    return x;
}

inline void check_finite(const RowMatrix& x, std::size_t step, const char* what) {
    if (!x.allFinite()) throw DivergedError(std::string(what) + ": non-finite state", step);
}

} // namespace detail

/// Generation-time initial law N(0, I) drawn from the seed.
inline RowMatrix initial_standard_normal(Eigen::Index n, int d, std::uint64_t seed) {
    return detail::standard_normal_rows(n, d, rng::derive(seed, {0x696e6974ULL}));
}

/// Euler-Maruyama integration of dX = [f(X) + sigma^2 score(X, T - t)] dt + sigma dW on [0, T].
inline ParticleEnsemble reverse_sde_simulate(const SDESpec& spec, const ScoreFn& score, Eigen::Index n, double dt,
                                             std::uint64_t seed, const RowMatrix* initial = nullptr,
                                             const StepObserver& observe = {}) {
    spec.validate();
    if (n < 1) throw DomainError("particle count must be at least 1");
    const std::size_t steps = detail::step_count(spec.T, dt);
    RowMatrix x = initial ? *initial : initial_standard_normal(n, spec.d, seed);
    if (x.cols() != spec.d) throw ShapeError("initial states have the wrong dimension");
    n = x.rows();
    const double s2 = spec.sigma * spec.sigma;
    const double noise = spec.sigma * std::sqrt(dt);
    RowMatrix sc;
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = k * dt;
        score(x, spec.T - t, sc);
        const std::uint64_t key = rng::derive(seed, {0x726576ULL, k});
        for (Eigen::Index r = 0; r < n; ++r)
            for (int i = 0; i < spec.d; ++i) {
                const double xi = x(r, i);
                x(r, i) = xi + (spec.drift(xi) + s2 * sc(r, i)) * dt +
                          noise * rng::counter_normal(key, static_cast<std::uint64_t>(r * spec.d + i));
            }
        detail::check_finite(x, k, "reverse SDE");
        if (observe) observe(k + 1, (k + 1) * dt, x);
    }
    ParticleEnsemble e;
    e.states = std::move(x);
    e.time_label = 0.0;
    e.seed = seed;
    e.tag = "reverse-sde";
    return e;
}

enum class OdeIntegrator { euler, rk4 };

/// Integrates dx = [f(x) + (sigma^2 / 2) score(x, T - t)] dt on [0, T] from N(0, I) draws.
inline ParticleEnsemble probability_flow_simulate(const SDESpec& spec, const ScoreFn& score, Eigen::Index n,
                                                  double dt, std::uint64_t seed,
                                                  OdeIntegrator method = OdeIntegrator::rk4,
                                                  const RowMatrix* initial = nullptr,
                                                  const StepObserver& observe = {}) {
    spec.validate();
    if (n < 1) throw DomainError("particle count must be at least 1");
    const std::size_t steps = detail::step_count(spec.T, dt);
    RowMatrix x = initial ? *initial : initial_standard_normal(n, spec.d, seed);
    if (x.cols() != spec.d) throw ShapeError("initial states have the wrong dimension");
    const double half = 0.5 * spec.sigma * spec.sigma;
    RowMatrix sc;
    auto velocity = [&](const RowMatrix& y, double t) {
        score(y, spec.T - t, sc);
        RowMatrix v = half * sc;
        v.array() += spec.a * y.array() + spec.b;
        return v;
    };
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = k * dt;
        if (method == OdeIntegrator::euler) {
            x += dt * velocity(x, t);
        } else {
            const RowMatrix k1 = velocity(x, t);
            const RowMatrix k2 = velocity(x + 0.5 * dt * k1, t + 0.5 * dt);
            const RowMatrix k3 = velocity(x + 0.5 * dt * k2, t + 0.5 * dt);
            const RowMatrix k4 = velocity(x + dt * k3, t + dt);
            x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        detail::check_finite(x, k, "probability flow");
        if (observe) observe(k + 1, (k + 1) * dt, x);
    }
    ParticleEnsemble e;
    e.states = std::move(x);
    e.time_label = 0.0;
    e.seed = seed;
    e.tag = "probability-flow";
    return e;
}

/// Quantities accumulated along a potential flow v = -grad U.
template <class S>
struct CNFPath {
    std::vector<S> x;         ///< endpoint, flat d x n (row-major ensemble layout)
    std::vector<S> div_int;   ///< oriented integral of div v along each trajectory
    std::vector<S> transport; ///< integral of |grad U|^2 / 2 over the traversed interval
    std::vector<S> hjb;       ///< integral of |dU/dt - |grad U|^2 / 2| over the traversed interval
};

struct CNFOptions {
    bool transport = false;
    bool hjb = false;
};

enum class FlowDirection { forward, reverse };

/// RK4 integration of dx/dt = -grad_x U(x, t) jointly with the divergence integral.
///
/// Forward runs t: 0 -> T, reverse runs T -> 0 with the same step sequence mirrored. Along either
/// direction, log rho(end) = log rho(start) - div_int. `Eval` is any field evaluator of a scalar
/// potential (a network evaluator on or off a tape, or an analytic potential).
template <class Eval, class S = typename Eval::scalar>
CNFPath<S> cnf_integrate(const Eval& U, std::vector<S> x, double T, std::size_t steps, FlowDirection dir,
                         CNFOptions opt = {}, const StepObserver& observe = {}) {
    if (U.output_dim() != 1) throw ShapeError("CNF potential must have scalar output");
    if (steps == 0) throw ConfigError("CNF integration needs at least one step");
    const int d = U.state_dim();
    if (x.size() % static_cast<std::size_t>(d) != 0) throw ShapeError("state batch length is not a multiple of d");
    const int n = static_cast<int>(x.size() / static_cast<std::size_t>(d));
    const double h = (dir == FlowDirection::forward ? 1.0 : -1.0) * T / static_cast<double>(steps);
    const double t0 = dir == FlowDirection::forward ? 0.0 : T;
    JetRequest req{true, opt.hjb, true};

    CNFPath<S> path;
    path.div_int.assign(static_cast<std::size_t>(n), S(0.0));
    if (opt.transport) path.transport.assign(static_cast<std::size_t>(n), S(0.0));
    if (opt.hjb) path.hjb.assign(static_cast<std::size_t>(n), S(0.0));

    // Stage derivative of the augmented state (x, div, transport, hjb) at (y, t).
    struct Stage {
        std::vector<S> dx, ddiv, dtr, dhjb;
    };
    auto stage = [&](const std::vector<S>& y, double t) {
        const auto jets = U(y, std::vector<double>(static_cast<std::size_t>(n), t), req);
        Stage st;
        st.dx.resize(y.size());
        st.ddiv.resize(static_cast<std::size_t>(n));
        if (opt.transport) st.dtr.resize(static_cast<std::size_t>(n));
        if (opt.hjb) st.dhjb.resize(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
            S g2(0.0);
            for (int i = 0; i < d; ++i) {
                const S& g = jets.jacobian(0, i, j);
                st.dx[static_cast<std::size_t>(i + d * j)] = -g;
                if (opt.transport || opt.hjb) g2 = g2 + g * g;
            }
            const auto jj = static_cast<std::size_t>(j);
            st.ddiv[jj] = -jets.laplacian(0, j);
            if (opt.transport) st.dtr[jj] = 0.5 * g2;
            if (opt.hjb) st.dhjb[jj] = abs_pow(jets.time(0, j) - 0.5 * g2, 1);
        }
        return st;
    };
    auto axpy = [](const std::vector<S>& y, double c, const std::vector<S>& k) {
        std::vector<S> r(y.size());
        for (std::size_t q = 0; q < y.size(); ++q) r[q] = y[q] + c * k[q];
        return r;
    };
    auto combine = [&](std::vector<S>& acc, const std::vector<S>& k1, const std::vector<S>& k2,
                       const std::vector<S>& k3, const std::vector<S>& k4, double hh) {
        const double c = hh / 6.0;
        for (std::size_t q = 0; q < acc.size(); ++q) acc[q] = acc[q] + c * (k1[q] + 2.0 * (k2[q] + k3[q]) + k4[q]);
    };
    // Time-reversed accumulation keeps transport and penalty integrals nonnegative.
    const double habs = std::abs(h);

    for (std::size_t k = 0; k < steps; ++k) {
        const double t = t0 + h * static_cast<double>(k);
        const Stage a = stage(x, t);
        const Stage b = stage(axpy(x, 0.5 * h, a.dx), t + 0.5 * h);
        const Stage c = stage(axpy(x, 0.5 * h, b.dx), t + 0.5 * h);
        const Stage e = stage(axpy(x, h, c.dx), t + h);
        combine(x, a.dx, b.dx, c.dx, e.dx, h);
        combine(path.div_int, a.ddiv, b.ddiv, c.ddiv, e.ddiv, h);
        if (opt.transport) combine(path.transport, a.dtr, b.dtr, c.dtr, e.dtr, habs);
        if (opt.hjb) combine(path.hjb, a.dhjb, b.dhjb, c.dhjb, e.dhjb, habs);
        bool finite = true;
        for (const auto& v : x) finite = finite && std::isfinite(value_of(v));
        if (!finite) throw DivergedError("CNF integration: non-finite state", k);
        if (observe) {
            RowMatrix snap(n, d);
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < d; ++i) snap(j, i) = value_of(x[static_cast<std::size_t>(i + d * j)]);
            observe(k + 1, t + h, snap);
        }
    }
    path.x = std::move(x);
    return path;
}

/// Analytic potential U(x, t) = c |x|^2 / 2 + k t, for tests and oracles.
class QuadraticPotential {
public:
    using scalar = double;
    QuadraticPotential(int d, double c, double k = 0.0) : d_(d), c_(c), k_(k) {}
    int state_dim() const { return d_; }
    int output_dim() const { return 1; }

    FieldJets<double> operator()(const std::vector<double>& x, const std::vector<double>& t, JetRequest req) const {
        const int n = static_cast<int>(t.size());
        FieldJets<double> out;
        out.allocate(d_, 1, n, req);
        for (int j = 0; j < n; ++j) {
            double r2 = 0.0;
            for (int i = 0; i < d_; ++i) {
                const double xi = x[static_cast<std::size_t>(i + d_ * j)];
                r2 += xi * xi;
                if (req.spatial || req.laplacian) out.jac[static_cast<std::size_t>(i + d_ * j)] = c_ * xi;
            }
            const auto jj = static_cast<std::size_t>(j);
            out.val[jj] = 0.5 * c_ * r2 + k_ * t[jj];
            if (req.time) out.dtime[jj] = k_;
            if (req.laplacian) out.lap[jj] = c_ * d_;
        }
        return out;
    }

private:
    int d_;
    double c_, k_;
};

} // namespace mfgen
