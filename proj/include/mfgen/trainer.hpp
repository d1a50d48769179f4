#pragma once

#include "mfgen/autodiff.hpp"
#include "mfgen/error.hpp"
#include "mfgen/losses.hpp"
#include "mfgen/mlp.hpp"
#include "mfgen/rng.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace mfgen {

struct AdamState {
    ParamTensors m, v;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline AdamState make_adam(const MLPParams& net) {
    AdamState s;
    s.m = zeros_like(net.layers);
    s.v = zeros_like(net.layers);
    return s;
}

/// One bias-corrected Adam update in place.
inline void adam_step(MLPParams& params, const ParamTensors& grads, AdamState& st, double lr) {
    if (!same_shape(params.layers, grads) || !same_shape(params.layers, st.m) || !same_shape(params.layers, st.v))
        throw ShapeError("Adam: gradient or moment shapes do not match the parameters");
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    auto update = [&](auto& w, const auto& g, auto& m, auto& v) {
        m = st.beta1 * m + (1.0 - st.beta1) * g;
        v = st.beta2 * v + (1.0 - st.beta2) * g.cwiseProduct(g);
        w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + st.eps);
    };
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        update(params.layers[l].weight, grads[l].weight, st.m[l].weight, st.v[l].weight);
        update(params.layers[l].bias, grads[l].bias, st.m[l].bias, st.v[l].bias);
    }
}

/// Network architecture: `hidden` layers of `width` units.
struct NetSpec {
    int hidden = 2;
    int width = 32;
    Activation activation = Activation::gelu;

    std::vector<int> widths() const { return std::vector<int>(static_cast<std::size_t>(hidden), width); }
};

struct TrainConfig {
    std::uint64_t batches = 1000;
    int batch_size = 64;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    std::uint64_t eval_every = 100;
    double clip_norm = 0.0; ///< global gradient-norm clip; 0 disables

    void validate() const {
        if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
        if (!(learning_rate > 0.0)) throw ConfigError("train.lr must be positive");
        if (eval_every < 1) throw ConfigError("train.eval_every must be at least 1");
        if (clip_norm < 0.0) throw ConfigError("gradient clip must be nonnegative");
    }
};

struct TracePoint {
    std::uint64_t step; ///< number of completed batches
    double loss;        ///< mean batch loss since the previous trace point
};

/// Everything needed to continue a run bit-for-bit.
struct TrainState {
    MLPParams params;
    AdamState adam;
    std::uint64_t next_batch = 0;
    std::vector<TracePoint> trace;
    double window_sum = 0.0;
    std::uint64_t window_count = 0;
};

inline TrainState make_train_state(MLPParams params) {
    TrainState s;
    s.adam = make_adam(params);
    s.params = std::move(params);
    return s;
}

/// Training aborted on a non-finite loss or gradient; carries the last finite parameters.
class DivergedTrainingError : public DivergedError {
public:
    DivergedTrainingError(const std::string& what, std::size_t step, MLPParams last)
        : DivergedError(what, step), last_(std::move(last)) {}
    const MLPParams& last_params() const noexcept { return last_; }

private:
    MLPParams last_;
};

/// Per-batch loss on the tape: (evaluator, batch index, batch seed) -> loss.
using BatchLoss = std::function<Var(TapeNetworkEvaluator&, std::uint64_t, std::uint64_t)>;

/// Runs batches [state.next_batch, stop) of the optimization; stop defaults to cfg.batches.
/// Batch b draws its randomness from derive(cfg.seed, {b}) so interrupted runs resume exactly.
inline void train_loop(TrainState& state, const TrainConfig& cfg, const BatchLoss& loss,
                       std::uint64_t stop = UINT64_MAX) {
    cfg.validate();
    state.params.validate();
    stop = std::min(stop, cfg.batches);
    for (std::uint64_t b = state.next_batch; b < stop; ++b) {
        const std::uint64_t bseed = rng::derive(cfg.seed, {0x62617463ULL, b});
        auto r = param_grad(state.params, [&](TapeNetworkEvaluator& ev) { return loss(ev, b, bseed); });
        const double g2 = squared_norm(r.grad);
        if (!std::isfinite(r.value) || !std::isfinite(g2))
            throw DivergedTrainingError("training produced a non-finite loss or gradient", b, state.params);
        if (cfg.clip_norm > 0.0 && g2 > cfg.clip_norm * cfg.clip_norm) {
            const double c = cfg.clip_norm / std::sqrt(g2);
            for (auto& l : r.grad) {
                l.weight *= c;
                l.bias *= c;
            }
        }
        adam_step(state.params, r.grad, state.adam, cfg.learning_rate);
        state.window_sum += r.value;
        ++state.window_count;
        state.next_batch = b + 1;
        if (state.next_batch % cfg.eval_every == 0 || state.next_batch == cfg.batches) {
            state.trace.push_back({state.next_batch, state.window_sum / static_cast<double>(state.window_count)});
            state.window_sum = 0.0;
            state.window_count = 0;
        }
    }
}

// ---------------------------------------------------------------------------------------------
// Score-based training

enum class SGMObjective {
    score,     ///< vector score network: alpha0 ISM + R1
    potential, ///< scalar log-density network phi, score = grad phi: alpha0 ISM + R2
};

inline SGMObjective parse_sgm_objective(const std::string& s) {
    if (s == "score" || s == "ism") return SGMObjective::score;
    if (s == "potential") return SGMObjective::potential;
    throw ConfigError("unknown SGM objective '" + s + "'");
}

/// alpha0 * ISM of grad phi + R2, with one shared second-order evaluation.
template <class Eval, class S = typename Eval::scalar>
S potential_sgm_objective(const Eval& phi, const SDESpec& spec, const NoisedBatch& batch, const RegularizerConfig& cfg) {
    cfg.validate();
    if (phi.output_dim() != 1) throw ShapeError("potential network must have scalar output");
    S out(0.0);
    if (cfg.alpha0 > 0.0 || cfg.alpha1 > 0.0) {
        const auto j = phi(batch.y, batch.s, cfg.alpha1 > 0.0 ? JetRequest::second() : JetRequest{true, false, true});
        if (cfg.alpha0 > 0.0) {
            const double s2 = spec.sigma * spec.sigma;
            std::vector<S> per(static_cast<std::size_t>(j.n));
            for (int q = 0; q < j.n; ++q) {
                S acc = j.laplacian(0, q);
                for (int i = 0; i < j.d; ++i) acc = acc + 0.5 * (j.jacobian(0, i, q) * j.jacobian(0, i, q));
                per[static_cast<std::size_t>(q)] = s2 * acc;
            }
            out = out + cfg.alpha0 * spec.T * mean_of(per);
        }
        if (cfg.alpha1 > 0.0) {
            std::vector<S> per = r2_residuals(j, batch.y, spec);
            for (auto& v : per) v = abs_pow(v, cfg.p);
            out = out + cfg.alpha1 * spec.T * mean_of(per);
        }
    }
    if (cfg.alpha2 > 0.0) {
        RegularizerConfig term{0.0, 0.0, cfg.alpha2, cfg.p};
        out = out + hjb_r2(phi, spec, batch, term);
    }
    return out;
}

inline MLPParams init_sgm_network(const NetSpec& net, const SDESpec& spec, SGMObjective obj, std::uint64_t seed) {
    return make_mlp(spec.d, obj == SGMObjective::score ? spec.d : 1, net.widths(), net.activation,
                    rng::derive(seed, {0x696e6974ULL}));
}

/// Batch loss for score-based training: fresh target samples and noising per batch.
inline BatchLoss sgm_batch_loss(const TargetDistribution& target, const SDESpec& spec, const RegularizerConfig& reg,
                                SGMObjective obj, int batch_size) {
    reg.validate();
    return [=](TapeNetworkEvaluator& ev, std::uint64_t, std::uint64_t bseed) {
        const auto data = target.sample(batch_size, rng::derive(bseed, {1}));
        const auto batch = make_noised_batch(spec, data.states, rng::derive(bseed, {2}));
        return obj == SGMObjective::score ? sgm_objective(ev, spec, batch, reg)
                                          : potential_sgm_objective(ev, spec, batch, reg);
    };
}

struct TrainResult {
    MLPParams params;
    std::vector<TracePoint> trace;
};

inline TrainResult train_sgm(const TrainConfig& cfg, const RegularizerConfig& reg, const NetSpec& net,
                             const TargetDistribution& target, const SDESpec& spec,
                             SGMObjective obj = SGMObjective::score) {
    spec.validate();
    if (target.dim() != spec.d) throw ShapeError("target dimension does not match the SDE");
    auto state = make_train_state(init_sgm_network(net, spec, obj, cfg.seed));
    train_loop(state, cfg, sgm_batch_loss(target, spec, reg, obj, cfg.batch_size));
    return {std::move(state.params), std::move(state.trace)};
}

/// Score field of a trained network: the network itself, or grad phi for a potential.
inline ScoreFn trained_score(const MLPParams& net) {
    if (net.output_dim() != 1) return network_score(net);
    return [&net](const RowMatrix& y, double s, RowMatrix& out) {
        const auto jets = NetworkEvaluator(net)(flatten(y), std::vector<double>(static_cast<std::size_t>(y.rows()), s),
                                                JetRequest::divergence());
        out.resize(y.rows(), y.cols());
        for (Eigen::Index q = 0; q < y.rows(); ++q)
            for (Eigen::Index i = 0; i < y.cols(); ++i)
                out(q, i) = jets.jacobian(0, static_cast<int>(i), static_cast<int>(q));
    };
}

// ---------------------------------------------------------------------------------------------
// Checkpoints of the full optimizer state

inline void write_train_state(std::ostream& os, const TrainState& s) {
    os << "mfgen-train-state 1\n";
    write_mlp(os, s.params);
    os << "adam " << s.adam.step << ' ';
    detail::write_hex(os, s.adam.beta1);
    os << ' ';
    detail::write_hex(os, s.adam.beta2);
    os << ' ';
    detail::write_hex(os, s.adam.eps);
    os << '\n';
    write_tensors(os, s.adam.m);
    write_tensors(os, s.adam.v);
    os << "progress " << s.next_batch << ' ' << s.window_count << ' ';
    detail::write_hex(os, s.window_sum);
    os << "\ntrace " << s.trace.size() << '\n';
    for (const auto& p : s.trace) {
        os << p.step << ' ';
        detail::write_hex(os, p.loss);
        os << '\n';
    }
}

inline TrainState read_train_state(std::istream& is) {
    detail::expect_token(is, "mfgen-train-state");
    detail::expect_token(is, "1");
    TrainState s;
    s.params = read_mlp(is);
    detail::expect_token(is, "adam");
    is >> s.adam.step;
    s.adam.beta1 = detail::read_hex(is);
    s.adam.beta2 = detail::read_hex(is);
    s.adam.eps = detail::read_hex(is);
    s.adam.m = read_tensors(is);
    s.adam.v = read_tensors(is);
    detail::expect_token(is, "progress");
    is >> s.next_batch >> s.window_count;
    s.window_sum = detail::read_hex(is);
    detail::expect_token(is, "trace");
    std::size_t n = 0;
    is >> n;
    for (std::size_t k = 0; k < n; ++k) {
        TracePoint p{};
        is >> p.step;
        p.loss = detail::read_hex(is);
        s.trace.push_back(p);
    }
    if (!is) throw ConfigError("truncated training-state checkpoint");
    if (!same_shape(s.params.layers, s.adam.m) || !same_shape(s.params.layers, s.adam.v))
        throw ShapeError("checkpoint optimizer moments do not match the parameters");
    return s;
}

inline void save_train_state(const std::string& path, const TrainState& s) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write checkpoint '" + path + "'");
    write_train_state(os, s);
}

inline TrainState load_train_state(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read checkpoint '" + path + "'");
    return read_train_state(is);
}

} // namespace mfgen
