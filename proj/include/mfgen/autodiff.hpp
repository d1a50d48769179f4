#pragma once

#include "mfgen/error.hpp"
#include "mfgen/jets.hpp"
#include "mfgen/mlp.hpp"
#include "mfgen/rng.hpp"
#include "mfgen/tape.hpp"
#include "mfgen/types.hpp"

#include <memory>
#include <utility>
#include <vector>

namespace mfgen {

/// Value and derivatives of a vector field at n points.
///
/// Entries are addressed by output component c, state coordinate i and point j. States enter
/// as a flat vector with coordinate i of point j at i + d*j (the row-major ensemble layout).
template <class S>
struct FieldJets {
    int d = 0, d_out = 0, n = 0;
    JetRequest req;
    std::vector<S> val, jac, dtime, lap;

    const S& value(int c, int j) const { return val[static_cast<std::size_t>(c + d_out * j)]; }
    const S& jacobian(int c, int i, int j) const {
        return jac[static_cast<std::size_t>(c + d_out * (i + d * j))];
    }
    const S& time(int c, int j) const { return dtime[static_cast<std::size_t>(c + d_out * j)]; }
    const S& laplacian(int c, int j) const { return lap[static_cast<std::size_t>(c + d_out * j)]; }

    void allocate(int d_, int d_out_, int n_, JetRequest r) {
        d = d_;
        d_out = d_out_;
        n = n_;
        req = r;
        const auto m = static_cast<std::size_t>(d_out) * static_cast<std::size_t>(n);
        val.assign(m, S(0.0));
        if (r.spatial || r.laplacian) jac.assign(m * static_cast<std::size_t>(d), S(0.0));
        if (r.time) dtime.assign(m, S(0.0));
        if (r.laplacian) lap.assign(m, S(0.0));
    }
};

/// Single-point derivative record.
struct DerivativeBundle {
    Vector value;
    Matrix jacobian_x;          ///< d_out x d
    Vector time_partial;
    Vector component_laplacians; ///< empty unless second order was requested
};

enum class DerivativeOrder { first, second };

inline std::vector<double> flatten(const RowMatrix& states) {
    return std::vector<double>(states.data(), states.data() + states.size());
}

namespace detail {

/// Seeds and second-order selections matching a request; spatial directions first, then time.
struct JetLayout {
    int d = 0, spatial = 0, time_block = -1, second = 0;
    std::vector<Matrix> seeds;
    std::vector<int> second_dirs;
};

inline JetLayout jet_layout(int d, int n, JetRequest req) {
    JetLayout lay;
    lay.d = d;
    const bool spatial = req.spatial || req.laplacian;
    if (spatial) {
        lay.spatial = d;
        for (int i = 0; i < d; ++i) {
            Matrix s = Matrix::Zero(d + 1, n);
            s.row(i).setOnes();
            lay.seeds.push_back(std::move(s));
        }
    }
    if (req.time) {
        lay.time_block = static_cast<int>(lay.seeds.size());
        Matrix s = Matrix::Zero(d + 1, n);
        s.row(d).setOnes();
        lay.seeds.push_back(std::move(s));
    }
    if (req.laplacian) {
        lay.second = d;
        for (int i = 0; i < d; ++i) lay.second_dirs.push_back(i);
    }
    return lay;
}

inline Matrix stack_inputs(int d, const double* x, const std::vector<double>& t, int n) {
    Matrix in(d + 1, n);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < d; ++i) in(i, j) = x[i + static_cast<std::ptrdiff_t>(d) * j];
        in(d, j) = t[static_cast<std::size_t>(j)];
    }
    return in;
}

template <class S, class Get>
void unpack_jets(FieldJets<S>& out, const JetLayout& lay, int n, Get&& get) {
    const int d = lay.d;
    const int K = static_cast<int>(lay.seeds.size());
    for (int j = 0; j < n; ++j) {
        for (int c = 0; c < out.d_out; ++c) {
            const auto o = static_cast<std::size_t>(c + out.d_out * j);
            out.val[o] = get(c, j);
            for (int i = 0; i < lay.spatial; ++i)
                out.jac[static_cast<std::size_t>(c + out.d_out * (i + d * j))] = get(c, (1 + i) * n + j);
            if (lay.time_block >= 0) out.dtime[o] = get(c, (1 + lay.time_block) * n + j);
            if (lay.second > 0) {
                S acc = get(c, (1 + K) * n + j);
                for (int i = 1; i < lay.second; ++i) acc = acc + get(c, (1 + K + i) * n + j);
                out.lap[o] = acc;
            }
        }
    }
}

inline void check_request(const MLPParams& net, JetRequest req) {
    if (req.laplacian && !is_twice_differentiable(net.activation))
        throw UnsupportedActivationError("second derivatives need a C2 activation, got " +
                                         std::string(to_string(net.activation)));
}

} // namespace detail

/// Evaluates a network and its derivatives in plain double precision.
class NetworkEvaluator {
public:
    using scalar = double;

    explicit NetworkEvaluator(const MLPParams& net) : net_(&net) {}
    explicit NetworkEvaluator(MLPParams&&) = delete; // the evaluator only references the network

    int state_dim() const { return net_->state_dim(); }
    int output_dim() const { return net_->output_dim(); }
    const MLPParams& net() const { return *net_; }

    FieldJets<double> operator()(const std::vector<double>& x, const std::vector<double>& t, JetRequest req) const {
        const int d = state_dim();
        const int n = static_cast<int>(t.size());
        if (x.size() != static_cast<std::size_t>(d) * t.size()) throw ShapeError("state batch does not match time batch");
        detail::check_request(*net_, req);
        const auto lay = detail::jet_layout(d, n, req);
        const auto cache = jet_forward(*net_, detail::stack_inputs(d, x.data(), t, n), lay.seeds, lay.second_dirs, false);
        FieldJets<double> out;
        out.allocate(d, output_dim(), n, req);
        detail::unpack_jets(out, lay, n, [&](int c, int col) { return cache.output(c, col); });
        return out;
    }

private:
    const MLPParams* net_;
};

/// Evaluates a network on a tape so that losses built from the results can be differentiated
/// with respect to the parameters (and to the states when those are tape variables).
class TapeNetworkEvaluator {
public:
    using scalar = Var;

    TapeNetworkEvaluator(const MLPParams& net, Tape& tape, ParamTensors& grad_sink, std::vector<bool> frozen = {})
        : net_(&net), tape_(&tape), sink_(&grad_sink), frozen_(std::move(frozen)) {}
    TapeNetworkEvaluator(MLPParams&&, Tape&, ParamTensors&, std::vector<bool> = {}) = delete;

    int state_dim() const { return net_->state_dim(); }
    int output_dim() const { return net_->output_dim(); }
    const MLPParams& net() const { return *net_; }
    Tape& tape() const { return *tape_; }

    FieldJets<Var> operator()(const std::vector<double>& x, const std::vector<double>& t, JetRequest req) const {
        return eval(x.data(), nullptr, t, req);
    }

    FieldJets<Var> operator()(const std::vector<Var>& x, const std::vector<double>& t, JetRequest req) const {
        std::vector<double> xv(x.size());
        for (std::size_t k = 0; k < x.size(); ++k) {
            if (x[k].tape && x[k].tape != tape_) throw UnsupportedGraphError("state recorded on a different tape");
            xv[k] = x[k].v;
        }
        return eval(xv.data(), &x, t, req);
    }

private:
    FieldJets<Var> eval(const double* x, const std::vector<Var>* xvars, const std::vector<double>& t,
                        JetRequest req) const {
        const int d = state_dim();
        const int n = static_cast<int>(t.size());
        const int d_out = output_dim();
        detail::check_request(*net_, req);
        auto lay = std::make_shared<detail::JetLayout>(detail::jet_layout(d, n, req));
        auto cache = std::make_shared<JetCache>(
            jet_forward(*net_, detail::stack_inputs(d, x, t, n), lay->seeds, lay->second_dirs, true));

        std::vector<int> input_ids;
        if (xvars)
            for (const auto& v : *xvars) input_ids.push_back(v.tape ? v.id : -1);

        // Block outputs are ordered exactly as the cache columns: d_out x (n * blocks), column-major.
        const int blocks = cache->blocks();
        const int count = d_out * n * blocks;
        const MLPParams* net = net_;
        ParamTensors* sink = sink_;
        const std::vector<bool> frozen = frozen_;
        const int first = tape_->begin_block(
            count, [net, sink, frozen, cache, d, n, d_out, blocks, ids = std::move(input_ids)](
                       const double* out_adj, std::vector<double>& adj) {
                Matrix a(d_out, static_cast<Eigen::Index>(n) * blocks);
                std::copy(out_adj, out_adj + a.size(), a.data());
                if (a.isZero(0.0)) return;
                const Matrix in_adj = jet_backward(*net, *cache, std::move(a), sink, frozen);
                for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (ids[k] < 0) continue;
                    const auto i = static_cast<Eigen::Index>(k % static_cast<std::size_t>(d));
                    const auto j = static_cast<Eigen::Index>(k / static_cast<std::size_t>(d));
                    adj[static_cast<std::size_t>(ids[k])] += in_adj(i, j);
                }
            });

        FieldJets<Var> out;
        out.allocate(d, d_out, n, req);
        Tape* tp = tape_;
        detail::unpack_jets(out, *lay, n, [&](int c, int col) {
            return Var(tp, first + c + d_out * col, cache->output(c, col));
        });
        return out;
    }

    const MLPParams* net_;
    Tape* tape_;
    ParamTensors* sink_;
    std::vector<bool> frozen_;
};

/// Network output at a single (x, t).
inline Vector forward(const MLPParams& net, const Vector& x, double t) {
    if (net.layers.empty()) throw ConfigError("network has no layers");
    if (x.size() != net.state_dim())
        throw ConfigError("state has dimension " + std::to_string(x.size()) + ", network expects " +
                          std::to_string(net.state_dim()));
    if (!std::isfinite(t)) throw ConfigError("time must be finite");
    Matrix in(x.size() + 1, 1);
    in.col(0).head(x.size()) = x;
    in(x.size(), 0) = t;
    return mlp_values(net, in).col(0);
}

/// Network outputs for a batch: states d x n, times of length n; returns d_out x n.
inline Matrix forward_batch(const MLPParams& net, const Matrix& x, const Vector& t) {
    if (x.rows() != net.state_dim() || t.size() != x.cols()) throw ConfigError("batch shape does not match network");
    Matrix in(x.rows() + 1, x.cols());
    in.topRows(x.rows()) = x;
    in.row(x.rows()) = t.transpose();
    return mlp_values(net, in);
}

inline DerivativeBundle derivatives(const MLPParams& net, const Vector& x, double t, DerivativeOrder order) {
    if (x.size() != net.state_dim()) throw ConfigError("state dimension does not match network");
    const JetRequest req = order == DerivativeOrder::second ? JetRequest::second() : JetRequest::first();
    const auto jets = NetworkEvaluator(net)(std::vector<double>(x.data(), x.data() + x.size()), {t}, req);
    const int d = jets.d, m = jets.d_out;
    DerivativeBundle b;
    b.value.resize(m);
    b.jacobian_x.resize(m, d);
    b.time_partial.resize(m);
    if (req.laplacian) b.component_laplacians.resize(m);
    for (int c = 0; c < m; ++c) {
        b.value(c) = jets.value(c, 0);
        b.time_partial(c) = jets.time(c, 0);
        for (int i = 0; i < d; ++i) b.jacobian_x(c, i) = jets.jacobian(c, i, 0);
        if (req.laplacian) b.component_laplacians(c) = jets.laplacian(c, 0);
    }
    return b;
}

/// Exact divergence of a vector field network (d_out == d).
inline double divergence(const MLPParams& net, const Vector& x, double t) {
    if (net.output_dim() != net.state_dim())
        throw ShapeError("divergence needs d_out == d, got d_out=" + std::to_string(net.output_dim()));
    return derivatives(net, x, t, DerivativeOrder::first).jacobian_x.trace();
}

/// Hutchinson estimate v^T J v averaged over Rademacher probes, for each column of `x` (d x n).
/// Stochastic; kept for high-dimensional experiments and never used where exactness matters.
inline Vector hutchinson_divergence(const MLPParams& net, const Matrix& x, const Vector& t, int probes,
                                    std::uint64_t seed) {
    if (net.output_dim() != net.state_dim()) throw ShapeError("divergence needs d_out == d");
    if (probes < 1) throw ConfigError("at least one probe is required");
    const auto d = x.rows();
    const auto n = x.cols();
    Matrix in(d + 1, n);
    in.topRows(d) = x;
    in.row(d) = t.transpose();
    Vector est = Vector::Zero(n);
    const std::uint64_t key = rng::derive(seed, {0x68757463ULL});
    for (int p = 0; p < probes; ++p) {
        Matrix v = Matrix::Zero(d + 1, n);
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index i = 0; i < d; ++i)
                v(i, j) = rng::counter_uniform(key, static_cast<std::uint64_t>((p * n + j) * d + i)) < 0.5 ? -1.0 : 1.0;
        const auto cache = jet_forward(net, in, {v}, {}, false);
        const Matrix jv = cache.block(1);
        est += (v.topRows(d).array() * jv.array()).colwise().sum().transpose().matrix();
    }
    return est / probes;
}

struct GradResult {
    double value = 0.0;
    ParamTensors grad;
};

/// Exact parameter gradient of a scalar loss built on a TapeNetworkEvaluator.
///
/// `loss` is called once with the evaluator and must return the loss as a Var. Layers whose
/// entry in `frozen` is true receive a zero gradient.
template <class LossFn>
GradResult param_grad(const MLPParams& net, LossFn&& loss, const std::vector<bool>& frozen = {}) {
    net.validate();
    Tape tape;
    GradResult r;
    r.grad = zeros_like(net.layers);
    TapeNetworkEvaluator eval(net, tape, r.grad, frozen);
    const Var out = loss(eval);
    r.value = out.v;
    if (out.tape) tape.backward(out);
    return r;
}

} // namespace mfgen
