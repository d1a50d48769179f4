#pragma once

#include "mfgen/autodiff.hpp"
#include "mfgen/dynamics.hpp"
#include "mfgen/error.hpp"
#include "mfgen/hamiltonian.hpp"
#include "mfgen/rng.hpp"
#include "mfgen/tape.hpp"
#include "mfgen/targets.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

namespace mfgen {

/// Weights of the regularized score-matching objective.
struct RegularizerConfig {
    double alpha0 = 1.0; ///< score-matching weight
    double alpha1 = 0.0; ///< HJB-equation weight
    double alpha2 = 0.0; ///< terminal-condition weight
    int p = 2;           ///< residual exponent

    void validate() const {
        if (alpha0 < 0.0 || alpha1 < 0.0 || alpha2 < 0.0) throw ConfigError("loss weights must be nonnegative");
        if (alpha0 == 0.0 && alpha1 == 0.0 && alpha2 == 0.0) throw ConfigError("loss weights must not all be zero");
        if (p != 1 && p != 2) throw ConfigError("loss.p must be 1 or 2, got " + std::to_string(p));
    }
};

/// Noised training points: y_j ~ eta(., s_j), stored flat (coordinate i of point j at i + d*j).
struct NoisedBatch {
    int d = 0;
    std::vector<double> y;
    std::vector<double> s;
    std::vector<double> y0; ///< the clean samples the noise was applied to

    int size() const { return static_cast<int>(s.size()); }
};

/// Applies the exact transition to each data row at its own noising time.
inline NoisedBatch make_noised_batch_at(const SDESpec& spec, const RowMatrix& data, const std::vector<double>& s,
                                        std::uint64_t seed) {
    spec.validate();
    if (data.rows() < 1) throw DomainError("empty batch");
    if (data.cols() != spec.d) throw ShapeError("data dimension does not match the SDE");
    if (static_cast<std::size_t>(data.rows()) != s.size()) throw ShapeError("one noising time per sample is required");
    for (double v : s)
        if (!(v >= 0.0 && v <= spec.T)) throw DomainError("noising time outside [0, T]");
    NoisedBatch b;
    b.d = static_cast<int>(data.cols());
    b.s = s;
    b.y0 = flatten(data);
    b.y = flatten(perturb_rows(spec, data, s, rng::derive(seed, {0x6e6f6973ULL})));
    return b;
}

/// Draws one uniform noising time per data row and applies the exact transition.
inline NoisedBatch make_noised_batch(const SDESpec& spec, const RowMatrix& data, std::uint64_t seed) {
    const std::uint64_t tkey = rng::derive(seed, {0x74696d65ULL});
    std::vector<double> s(static_cast<std::size_t>(data.rows()));
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = spec.T * rng::counter_uniform(tkey, j);
    return make_noised_batch_at(spec, data, s, seed);
}

template <class S>
S mean_of(const std::vector<S>& v) {
    if (v.empty()) throw DomainError("empty batch");
    S acc(0.0);
    for (const auto& x : v) acc = acc + x;
    return acc / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------------------------
// Score matching

/// Per-sample implicit score-matching integrand sigma^2 (|s|^2 / 2 + div s).
template <class S>
std::vector<S> ism_terms(const FieldJets<S>& j, const SDESpec& spec) {
    const double s2 = spec.sigma * spec.sigma;
    std::vector<S> out(static_cast<std::size_t>(j.n));
    for (int q = 0; q < j.n; ++q) {
        S acc(0.0);
        for (int i = 0; i < j.d; ++i) acc = acc + 0.5 * (j.value(i, q) * j.value(i, q)) + j.jacobian(i, i, q);
        out[static_cast<std::size_t>(q)] = s2 * acc;
    }
    return out;
}

/// Per-sample explicit score-matching integrand sigma^2 |s - grad log eta|^2 / 2.
template <class S>
std::vector<S> esm_terms(const FieldJets<S>& j, const FieldJets<double>& exact, const SDESpec& spec) {
    const double s2 = spec.sigma * spec.sigma;
    std::vector<S> out(static_cast<std::size_t>(j.n));
    for (int q = 0; q < j.n; ++q) {
        S acc(0.0);
        for (int i = 0; i < j.d; ++i) {
            const S e = j.value(i, q) - exact.value(i, q);
            acc = acc + e * e;
        }
        out[static_cast<std::size_t>(q)] = 0.5 * s2 * acc;
    }
    return out;
}

template <class Eval>
void check_score_field(const Eval& net, const SDESpec& spec) {
    if (net.output_dim() != net.state_dim()) throw ShapeError("score field must have d_out == d");
    if (net.state_dim() != spec.d) throw ShapeError("score field dimension does not match the SDE");
}

/// T * mean over the batch of sigma^2 (|s|^2 / 2 + div s).
template <class Eval, class S = typename Eval::scalar>
S ism_loss(const Eval& net, const SDESpec& spec, const NoisedBatch& batch) {
    check_score_field(net, spec);
    if (batch.size() < 1) throw DomainError("empty batch");
    const auto j = net(batch.y, batch.s, JetRequest::divergence());
    return spec.T * mean_of(ism_terms(j, spec));
}

/// T * mean over the batch of sigma^2 |s - grad log eta|^2 / 2, with the exact eta score.
template <class Eval, class S = typename Eval::scalar>
S esm_loss(const Eval& net, const GaussianEta& eta, const SDESpec& spec, const NoisedBatch& batch) {
    check_score_field(net, spec);
    if (batch.size() < 1) throw DomainError("empty batch");
    const auto j = net(batch.y, batch.s, JetRequest::value_only());
    const auto exact = GaussianEtaScoreEvaluator(eta)(batch.y, batch.s, JetRequest::value_only());
    return spec.T * mean_of(esm_terms(j, exact, spec));
}

// ---------------------------------------------------------------------------------------------
// HJB regularizers

/// Per-component residual of the gradient of the HJB equation for a score field, in row-major
/// (component fastest) order: entry i + d*q is component i at point q.
template <class S>
std::vector<S> r1_residuals(const FieldJets<S>& j, const std::vector<double>& y, const SDESpec& spec) {
    const double s2 = spec.sigma * spec.sigma;
    const int d = j.d;
    std::vector<S> out(static_cast<std::size_t>(d) * static_cast<std::size_t>(j.n));
    for (int q = 0; q < j.n; ++q) {
        for (int i = 0; i < d; ++i) {
            // d_s s_i - (d_i f) . s - f . d_i s - sigma^2 s . d_i s - d_i(div f) - sigma^2/2 lap s_i,
            // where d_i f_k = a delta_ik and div f is constant for affine drifts.
            S r = j.time(i, q) - spec.a * j.value(i, q) - 0.5 * s2 * j.laplacian(i, q);
            for (int k = 0; k < d; ++k) {
                const double fk = spec.drift(y[static_cast<std::size_t>(k + d * q)]);
                r = r - (fk + s2 * j.value(k, q)) * j.jacobian(k, i, q);
            }
            out[static_cast<std::size_t>(i + d * q)] = r;
        }
    }
    return out;
}

/// Per-sample terminal integrand |s(y, 0)|^2 + 2 div s(y, 0).
template <class S>
std::vector<S> terminal_terms(const FieldJets<S>& j) {
    std::vector<S> out(static_cast<std::size_t>(j.n));
    for (int q = 0; q < j.n; ++q) {
        S acc(0.0);
        for (int i = 0; i < j.d; ++i) acc = acc + j.value(i, q) * j.value(i, q) + 2.0 * j.jacobian(i, i, q);
        out[static_cast<std::size_t>(q)] = acc;
    }
    return out;
}

namespace detail {

template <class S>
S r1_equation_term(const FieldJets<S>& j, const std::vector<double>& y, const SDESpec& spec, int p) {
    const auto res = r1_residuals(j, y, spec);
    std::vector<S> per(static_cast<std::size_t>(j.n), S(0.0));
    for (int q = 0; q < j.n; ++q)
        for (int i = 0; i < j.d; ++i)
            per[static_cast<std::size_t>(q)] =
                per[static_cast<std::size_t>(q)] + abs_pow(res[static_cast<std::size_t>(i + j.d * q)], p);
    return spec.T * mean_of(per);
}

template <class Eval, class S = typename Eval::scalar>
S terminal_term(const Eval& net, const NoisedBatch& batch) {
    const auto j = net(batch.y0, std::vector<double>(batch.s.size(), 0.0), JetRequest::divergence());
    return mean_of(terminal_terms(j));
}

} // namespace detail

/// alpha1 * T * mean sum_i |residual_i|^p over eta samples + alpha2 * mean over pi samples of
/// |s(y, 0)|^2 + 2 div s(y, 0). Terminal samples are the clean points of the batch.
template <class Eval, class S = typename Eval::scalar>
S hjb_r1(const Eval& net, const SDESpec& spec, const NoisedBatch& batch, const RegularizerConfig& cfg) {
    if (cfg.p != 1 && cfg.p != 2) throw ConfigError("loss.p must be 1 or 2");
    check_score_field(net, spec);
    S out(0.0);
    if (cfg.alpha1 > 0.0) {
        const auto j = net(batch.y, batch.s, JetRequest::second());
        out = out + cfg.alpha1 * detail::r1_equation_term(j, batch.y, spec, cfg.p);
    }
    if (cfg.alpha2 > 0.0) out = out + cfg.alpha2 * detail::terminal_term(net, batch);
    return out;
}

/// Per-sample residual of the HJB equation for a log-density potential phi.
template <class S>
std::vector<S> r2_residuals(const FieldJets<S>& j, const std::vector<double>& y, const SDESpec& spec) {
    const double s2 = spec.sigma * spec.sigma;
    const int d = j.d;
    std::vector<S> out(static_cast<std::size_t>(j.n));
    for (int q = 0; q < j.n; ++q) {
        S r = j.time(0, q) - spec.div_drift() - 0.5 * s2 * j.laplacian(0, q);
        for (int i = 0; i < d; ++i) {
            const S& g = j.jacobian(0, i, q);
            r = r - (spec.drift(y[static_cast<std::size_t>(i + d * q)]) + 0.5 * s2 * g) * g;
        }
        out[static_cast<std::size_t>(q)] = r;
    }
    return out;
}

/// alpha1 * T * mean |residual|^p + alpha2 * mean over pi of |grad phi(y, 0)|^2 + 2 lap phi(y, 0).
template <class Eval, class S = typename Eval::scalar>
S hjb_r2(const Eval& phi, const SDESpec& spec, const NoisedBatch& batch, const RegularizerConfig& cfg) {
    if (cfg.p != 1 && cfg.p != 2) throw ConfigError("loss.p must be 1 or 2");
    if (phi.output_dim() != 1) throw ShapeError("potential network must have scalar output");
    if (phi.state_dim() != spec.d) throw ShapeError("potential dimension does not match the SDE");
    S out(0.0);
    if (cfg.alpha1 > 0.0) {
        const auto j = phi(batch.y, batch.s, JetRequest::second());
        std::vector<S> per = r2_residuals(j, batch.y, spec);
        for (auto& v : per) v = abs_pow(v, cfg.p);
        out = out + cfg.alpha1 * spec.T * mean_of(per);
    }
    if (cfg.alpha2 > 0.0) {
        const auto j = phi(batch.y0, std::vector<double>(batch.s.size(), 0.0),
                           JetRequest{true, false, true});
        std::vector<S> per(static_cast<std::size_t>(j.n));
        for (int q = 0; q < j.n; ++q) {
            S acc = 2.0 * j.laplacian(0, q);
            for (int i = 0; i < j.d; ++i) acc = acc + j.jacobian(0, i, q) * j.jacobian(0, i, q);
            per[static_cast<std::size_t>(q)] = acc;
        }
        out = out + cfg.alpha2 * mean_of(per);
    }
    return out;
}

/// alpha0 * ISM + R1 on a shared network evaluation of the noised batch.
template <class Eval, class S = typename Eval::scalar>
S sgm_objective(const Eval& net, const SDESpec& spec, const NoisedBatch& batch, const RegularizerConfig& cfg) {
    cfg.validate();
    check_score_field(net, spec);
    S out(0.0);
    if (cfg.alpha0 > 0.0 || cfg.alpha1 > 0.0) {
        const auto j = net(batch.y, batch.s, cfg.alpha1 > 0.0 ? JetRequest::second() : JetRequest::divergence());
        if (cfg.alpha0 > 0.0) out = out + cfg.alpha0 * spec.T * mean_of(ism_terms(j, spec));
        if (cfg.alpha1 > 0.0) out = out + cfg.alpha1 * detail::r1_equation_term(j, batch.y, spec, cfg.p);
    }
    if (cfg.alpha2 > 0.0) out = out + cfg.alpha2 * detail::terminal_term(net, batch);
    return out;
}

/// General HJB penalty alpha1 * T * mean |dU/dt - H(x, grad U)| at given space-time points.
/// `H` maps the gradient (as a vector of scalars) to the Hamiltonian value.
template <class Eval, class HFn, class S = typename Eval::scalar>
S hjb_penalty(const Eval& U, const std::vector<double>& x, const std::vector<double>& t, double T, HFn&& H,
              double alpha1) {
    if (U.output_dim() != 1) throw ShapeError("HJB penalty needs a scalar potential");
    const auto j = U(x, t, JetRequest::first());
    std::vector<S> per(static_cast<std::size_t>(j.n));
    std::vector<S> p(static_cast<std::size_t>(j.d));
    for (int q = 0; q < j.n; ++q) {
        for (int i = 0; i < j.d; ++i) p[static_cast<std::size_t>(i)] = j.jacobian(0, i, q);
        per[static_cast<std::size_t>(q)] = abs_pow(j.time(0, q) - H(p), 1);
    }
    return alpha1 * T * mean_of(per);
}

/// Bounded-velocity Hamiltonian c |p| in a form usable on the tape (subgradient 0 at p = 0).
template <class S>
S bounded_velocity_hamiltonian(const std::vector<S>& p, double c) {
    using std::sqrt;
    S n2(0.0);
    for (const auto& v : p) n2 = n2 + v * v;
    if (value_of(n2) == 0.0) return S(0.0);
    return c * sqrt(n2);
}

// ---------------------------------------------------------------------------------------------
// Potential flows

inline double std_normal_log_density(const double* x, int d) {
    double r2 = 0.0;
    for (int i = 0; i < d; ++i) r2 += x[i] * x[i];
    return -0.5 * r2 - 0.5 * d * std::log(2.0 * std::numbers::pi);
}

template <class S>
S std_normal_log_density(const std::vector<S>& x, int d, int q) {
    S r2(0.0);
    for (int i = 0; i < d; ++i) {
        const S& v = x[static_cast<std::size_t>(i + d * q)];
        r2 = r2 + v * v;
    }
    return -0.5 * r2 - 0.5 * d * std::log(2.0 * std::numbers::pi);
}

/// Terms of the potential-flow objective averaged over the batch.
template <class S>
struct FlowLossTerms {
    S nll = S(0.0);       ///< -log rho_ref(x(T)) - integral of div v, i.e. the model negative log-likelihood
    S transport = S(0.0); ///< integral of |grad U|^2 / 2
    S hjb = S(0.0);       ///< integral of |dU/dt - |grad U|^2 / 2|
    S total = S(0.0);
};

struct FlowLossOptions {
    double T = 1.0;
    std::size_t steps = 8;
    double alpha1 = 0.0;
    double transport_weight = 1.0;
};

/// OT-flow objective: data at t = 0 pushed to N(0, I) at t = T by v = -grad U.
template <class Eval, class S = typename Eval::scalar>
FlowLossTerms<S> otflow_terms(const Eval& U, const RowMatrix& data, const FlowLossOptions& opt) {
    if (data.rows() < 1) throw DomainError("empty batch");
    if (data.cols() != U.state_dim()) throw ShapeError("data dimension does not match the potential");
    const int d = U.state_dim();
    const int n = static_cast<int>(data.rows());
    std::vector<S> x0(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
    for (int q = 0; q < n; ++q)
        for (int i = 0; i < d; ++i) x0[static_cast<std::size_t>(i + d * q)] = S(data(q, i));
    const auto path = cnf_integrate(U, std::move(x0), opt.T, opt.steps, FlowDirection::forward,
                                    CNFOptions{opt.transport_weight != 0.0, opt.alpha1 > 0.0});
    FlowLossTerms<S> out;
    std::vector<S> nll(static_cast<std::size_t>(n));
    for (int q = 0; q < n; ++q)
        nll[static_cast<std::size_t>(q)] = -std_normal_log_density(path.x, d, q) - path.div_int[static_cast<std::size_t>(q)];
    out.nll = mean_of(nll);
    out.total = out.nll;
    if (opt.transport_weight != 0.0) {
        out.transport = mean_of(path.transport);
        out.total = out.total + opt.transport_weight * out.transport;
    }
    if (opt.alpha1 > 0.0) {
        out.hjb = mean_of(path.hjb);
        out.total = out.total + opt.alpha1 * out.hjb;
    }
    return out;
}

template <class Eval, class S = typename Eval::scalar>
S otflow_objective(const Eval& U, const RowMatrix& data, const FlowLossOptions& opt) {
    return otflow_terms(U, data, opt).total;
}

/// Target log-density (up to a constant) with its gradient.
struct LogDensityFn {
    std::function<double(const Vector&)> value;
    std::function<Vector(const Vector&)> gradient;

    static LogDensityFn of(const TargetDistribution& t) {
        if (!t.has_score()) throw UnsupportedError("target log-density must be differentiable");
        return {[t](const Vector& x) { return t.log_density(x).get(); }, [t](const Vector& x) { return t.score(x); }};
    }
};

namespace detail {

/// log pi at tape states: exact value with first-order linearization for the adjoint.
template <class S>
S target_log_density(const LogDensityFn& f, const std::vector<S>& x, int d, int q) {
    Vector xv(d);
    for (int i = 0; i < d; ++i) xv(i) = value_of(x[static_cast<std::size_t>(i + d * q)]);
    S out(f.value(xv));
    if constexpr (!std::is_same_v<S, double>) {
        const Vector g = f.gradient(xv);
        for (int i = 0; i < d; ++i) {
            const S& xi = x[static_cast<std::size_t>(i + d * q)];
            out = out + g(i) * (xi - S(value_of(xi)));
        }
    }
    return out;
}

} // namespace detail

struct OTBGTerms {
    double forward_kl = 0.0, reverse_kl = 0.0, transport = 0.0, hjb = 0.0, total = 0.0;
};

/// OT-Boltzmann-generator objective lambda KL(pi || rho) + (1 - lambda) KL(rho || pi) + transport.
///
/// The forward KL uses data samples pushed to the reference; the reverse KL pulls reference
/// samples `latent` back to t = 0 and evaluates the target. Transport and HJB penalties are
/// lambda-weighted mixtures of their estimates along the two sets of trajectories.
template <class Eval, class S = typename Eval::scalar>
S otbg_objective(const Eval& U, const RowMatrix& data, const RowMatrix& latent, double lambda,
                 const LogDensityFn& target, const FlowLossOptions& opt, OTBGTerms* terms = nullptr) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("cnf.lambda must lie in [0, 1]");
    const int d = U.state_dim();
    S total(0.0);
    OTBGTerms rec;
    if (lambda > 0.0) {
        const auto fwd = otflow_terms(U, data, opt);
        std::vector<S> logpi(static_cast<std::size_t>(data.rows()));
        for (Eigen::Index q = 0; q < data.rows(); ++q) logpi[static_cast<std::size_t>(q)] = S(target.value(data.row(q).transpose()));
        const S kl = mean_of(logpi) + fwd.nll;
        total = total + lambda * (kl + opt.transport_weight * fwd.transport + opt.alpha1 * fwd.hjb);
        rec.forward_kl = value_of(kl);
        rec.transport += lambda * value_of(fwd.transport);
        rec.hjb += lambda * value_of(fwd.hjb);
    }
    if (lambda < 1.0) {
        if (latent.rows() < 1) throw DomainError("empty latent batch");
        if (latent.cols() != d) throw ShapeError("latent dimension does not match the potential");
        const int n = static_cast<int>(latent.rows());
        std::vector<S> z(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
        for (int q = 0; q < n; ++q)
            for (int i = 0; i < d; ++i) z[static_cast<std::size_t>(i + d * q)] = S(latent(q, i));
        const auto path = cnf_integrate(U, z, opt.T, opt.steps, FlowDirection::reverse,
                                        CNFOptions{opt.transport_weight != 0.0, opt.alpha1 > 0.0});
        std::vector<S> per(static_cast<std::size_t>(n));
        for (int q = 0; q < n; ++q) {
            const S logrho = std_normal_log_density(z, d, q) - path.div_int[static_cast<std::size_t>(q)];
            per[static_cast<std::size_t>(q)] = logrho - detail::target_log_density(target, path.x, d, q);
        }
        const S kl = mean_of(per);
        S extra(0.0);
        if (opt.transport_weight != 0.0) extra = extra + opt.transport_weight * mean_of(path.transport);
        if (opt.alpha1 > 0.0) extra = extra + opt.alpha1 * mean_of(path.hjb);
        total = total + (1.0 - lambda) * (kl + extra);
        rec.reverse_kl = value_of(kl);
        if (opt.transport_weight != 0.0) rec.transport += (1.0 - lambda) * value_of(mean_of(path.transport));
        if (opt.alpha1 > 0.0) rec.hjb += (1.0 - lambda) * value_of(mean_of(path.hjb));
    }
    rec.total = value_of(total);
    if (terms) *terms = rec;
    return total;
}

} // namespace mfgen
