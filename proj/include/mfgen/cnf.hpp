#pragma once

#include "mfgen/autodiff.hpp"
#include "mfgen/dynamics.hpp"
#include "mfgen/error.hpp"
#include "mfgen/losses.hpp"
#include "mfgen/rng.hpp"
#include "mfgen/targets.hpp"
#include "mfgen/trainer.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace mfgen {

enum class CNFObjective {
    ot_flow,        ///< maximum likelihood on data + transport (+ alpha1 HJB)
    ot_bg,          ///< lambda forward KL + (1 - lambda) reverse KL + transport
    generalized_ot, ///< reverse KL to the target as terminal cost + transport
};

inline CNFObjective parse_cnf_objective(const std::string& s) {
    if (s == "ot_flow") return CNFObjective::ot_flow;
    if (s == "ot_bg") return CNFObjective::ot_bg;
    if (s == "generalized_ot") return CNFObjective::generalized_ot;
    throw ConfigError("unknown CNF objective '" + s + "' (expected ot_flow, ot_bg or generalized_ot)");
}

inline std::string to_string(CNFObjective o) {
    switch (o) {
    case CNFObjective::ot_flow: return "ot_flow";
    case CNFObjective::ot_bg: return "ot_bg";
    case CNFObjective::generalized_ot: return "generalized_ot";
    }
    return "unknown";
}

/// Training setup of a potential flow v = -grad U carrying data at t = 0 to N(0, I) at t = T.
struct CNFRun {
    NetSpec net;
    CNFObjective objective = CNFObjective::ot_flow;
    double lambda = 0.5;
    double alpha1 = 0.0;
    double T = 1.0;
    double dt = 0.125;
    double transport_weight = 1.0;
    TrainConfig train;

    void validate() const {
        train.validate();
        if (!(T > 0.0) || !std::isfinite(T)) throw ConfigError("cnf.T must be positive");
        if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("cnf.dt must be positive");
        if (alpha1 < 0.0) throw ConfigError("loss.alpha1 must be nonnegative");
        if (transport_weight < 0.0) throw ConfigError("cnf.transport_weight must be nonnegative");
        if (objective == CNFObjective::ot_bg && !(lambda >= 0.0 && lambda <= 1.0))
            throw ConfigError("cnf.lambda must lie in [0, 1]");
        detail::step_count(T, dt);
    }
    std::size_t steps() const { return detail::step_count(T, dt); }
    FlowLossOptions loss_options() const { return {T, steps(), alpha1, transport_weight}; }
};

/// Random hidden layers with a zero output layer, so the initial flow is the identity.
inline MLPParams init_cnf_network(const NetSpec& net, int d, std::uint64_t seed) {
    MLPParams p = make_mlp(d, 1, net.widths(), net.activation, rng::derive(seed, {0x636e66ULL}));
    p.layers.back().weight.setZero();
    p.layers.back().bias.setZero();
    return p;
}

inline BatchLoss cnf_batch_loss(const CNFRun& run, const TargetDistribution& target) {
    run.validate();
    const FlowLossOptions opt = run.loss_options();
    LogDensityFn logpi;
    if (run.objective != CNFObjective::ot_flow) logpi = LogDensityFn::of(target);
    const double lambda = run.objective == CNFObjective::ot_bg ? run.lambda : 0.0;
    const int d = target.dim();
    const int bs = run.train.batch_size;
    const CNFObjective obj = run.objective;
    return [=](TapeNetworkEvaluator& ev, std::uint64_t, std::uint64_t bseed) -> Var {
        if (obj == CNFObjective::ot_flow)
            return otflow_objective(ev, target.sample(bs, rng::derive(bseed, {1})).states, opt);
        const RowMatrix data = lambda > 0.0 ? target.sample(bs, rng::derive(bseed, {1})).states : RowMatrix(0, d);
        const RowMatrix latent = initial_standard_normal(bs, d, rng::derive(bseed, {2}));
        return otbg_objective(ev, data, latent, lambda, logpi, opt);
    };
}

inline TrainResult train_cnf(const CNFRun& run, const TargetDistribution& target) {
    run.validate();
    auto state = make_train_state(init_cnf_network(run.net, target.dim(), run.train.seed));
    train_loop(state, run.train, cnf_batch_loss(run, target));
    return {std::move(state.params), std::move(state.trace)};
}

namespace detail {

inline std::vector<double> flat_rows(const RowMatrix& x) { return flatten(x); }

inline RowMatrix unflat_rows(const std::vector<double>& v, Eigen::Index n, int d) {
    RowMatrix out(n, d);
    for (Eigen::Index q = 0; q < n; ++q)
        for (int i = 0; i < d; ++i) out(q, i) = v[static_cast<std::size_t>(i + d * q)];
    return out;
}

} // namespace detail

struct CNFSamples {
    ParticleEnsemble samples;
    std::vector<double> log_likelihood; ///< model log-density at each sample
    RowMatrix latent;                   ///< reference draws the samples were generated from
};

/// Pulls N(0, I) draws at t = T back to t = 0 and reports log rho(x) = log rho_ref(z) - oriented div integral.
template <class Eval>
CNFSamples generate_cnf_with(const Eval& U, double T, Eigen::Index n, double dt, std::uint64_t seed) {
    const int d = U.state_dim();
    CNFSamples out;
    out.latent = initial_standard_normal(n, d, seed);
    const auto path = cnf_integrate(U, detail::flat_rows(out.latent), T, detail::step_count(T, dt), FlowDirection::reverse);
    out.samples.states = detail::unflat_rows(path.x, n, d);
    out.samples.time_label = 0.0;
    out.samples.seed = seed;
    out.samples.tag = "cnf";
    out.log_likelihood.resize(static_cast<std::size_t>(n));
    for (Eigen::Index q = 0; q < n; ++q)
        out.log_likelihood[static_cast<std::size_t>(q)] =
            std_normal_log_density(out.latent.row(q).data(), d) - path.div_int[static_cast<std::size_t>(q)];
    return out;
}

inline CNFSamples generate_cnf(const MLPParams& potential, double T, Eigen::Index n, double dt, std::uint64_t seed) {
    if (potential.output_dim() != 1) throw ShapeError("CNF potential must have scalar output");
    return generate_cnf_with(NetworkEvaluator(potential), T, n, dt, seed);
}

/// Model log-density at given points: push to t = T, log rho(x) = log rho_ref(z) + div integral.
template <class Eval>
std::vector<double> cnf_log_likelihood(const Eval& U, const RowMatrix& x, double T, double dt) {
    const int d = U.state_dim();
    if (x.cols() != d) throw ShapeError("points do not match the potential dimension");
    const auto path = cnf_integrate(U, detail::flat_rows(x), T, detail::step_count(T, dt), FlowDirection::forward);
    std::vector<double> ll(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index q = 0; q < x.rows(); ++q)
        ll[static_cast<std::size_t>(q)] =
            std_normal_log_density(path.x.data() + d * q, d) + path.div_int[static_cast<std::size_t>(q)];
    return ll;
}

/// max |x - back(forward(x))| over all coordinates, with matched step sequences.
template <class Eval>
double cnf_roundtrip_error(const Eval& U, const RowMatrix& x, double T, double dt) {
    const std::size_t steps = detail::step_count(T, dt);
    const auto z = cnf_integrate(U, detail::flat_rows(x), T, steps, FlowDirection::forward);
    const auto back = cnf_integrate(U, z.x, T, steps, FlowDirection::reverse);
    double worst = 0.0;
    const auto flat = detail::flat_rows(x);
    for (std::size_t k = 0; k < flat.size(); ++k) worst = std::max(worst, std::abs(back.x[k] - flat[k]));
    return worst;
}

/// Mean over trajectories of sum_k |x_{k+1} - 2 x_k + x_{k-1}| along the forward flow.
template <class Eval>
double cnf_path_curvature(const Eval& U, const RowMatrix& x, double T, double dt) {
    std::vector<RowMatrix> states{x};
    cnf_integrate(U, detail::flat_rows(x), T, detail::step_count(T, dt), FlowDirection::forward, {},
                  [&](std::size_t, double, const RowMatrix& s) { states.push_back(s); });
    double total = 0.0;
    for (std::size_t k = 1; k + 1 < states.size(); ++k)
        total += (states[k + 1] - 2.0 * states[k] + states[k - 1]).rowwise().norm().sum();
    return total / static_cast<double>(x.rows());
}

/// Midpoint quadrature of exp(log rho) over the square [-L, L]^2 with m x m cells.
template <class Eval>
double cnf_density_mass_2d(const Eval& U, double T, double dt, double L, int m) {
    if (U.state_dim() != 2) throw ShapeError("density mass check is 2-D");
    const double h = 2.0 * L / m;
    RowMatrix pts(static_cast<Eigen::Index>(m) * m, 2);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) pts.row(static_cast<Eigen::Index>(i) * m + j) << -L + (i + 0.5) * h, -L + (j + 0.5) * h;
    double mass = 0.0;
    for (double ll : cnf_log_likelihood(U, pts, T, dt)) mass += std::exp(ll);
    return mass * h * h;
}

} // namespace mfgen
