#include "mfgen/trainer.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <sstream>

using namespace mfgen;

namespace {

/// One affine layer on (x, t) with a single output; only the bias is exercised.
MLPParams scalar_param(double b) {
    MLPParams net;
    net.layers.push_back({Matrix::Zero(1, 2), Vector::Constant(1, b)});
    return net;
}

bool identical(const MLPParams& a, const MLPParams& b) {
    if (!same_shape(a.layers, b.layers)) return false;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
        if (!(a.layers[l].weight.array() == b.layers[l].weight.array()).all() ||
            !(a.layers[l].bias.array() == b.layers[l].bias.array()).all())
            return false;
    return true;
}

} // namespace

TEST_CASE("Adam: zero gradient leaves parameters unchanged") {
    auto net = make_mlp(2, 2, {4}, Activation::gelu, 1);
    const auto before = net;
    auto st = make_adam(net);
    adam_step(net, zeros_like(net.layers), st, 1e-3);
    CHECK(identical(net, before));
    CHECK(st.step == 1);
    CHECK_THROWS_AS(adam_step(net, zeros_like(make_mlp(2, 2, {5}, Activation::gelu, 1).layers), st, 1e-3), ShapeError);
}

TEST_CASE("Adam: constant gradient follows the scalar recursion") {
    auto net = scalar_param(1.0);
    auto st = make_adam(net);
    auto g = zeros_like(net.layers);
    g[0].bias(0) = 0.3;
    double theta = 1.0, m = 0.0, v = 0.0;
    for (int k = 1; k <= 25; ++k) {
        adam_step(net, g, st, 0.01);
        m = 0.9 * m + 0.1 * 0.3;
        v = 0.999 * v + 0.001 * 0.09;
        theta -= 0.01 * (m / (1 - std::pow(0.9, k))) / (std::sqrt(v / (1 - std::pow(0.999, k))) + 1e-8);
        CHECK(net.layers[0].bias(0) == Catch::Approx(theta).epsilon(1e-14));
    }
}

TEST_CASE("Adam minimizes a one-parameter quadratic") {
    auto net = scalar_param(0.0);
    auto st = make_adam(net);
    int steps = 0;
    for (; steps < 5000; ++steps) {
        auto g = zeros_like(net.layers);
        g[0].bias(0) = 2.0 * (net.layers[0].bias(0) - 3.0);
        adam_step(net, g, st, 1e-2);
    }
    CHECK(std::abs(net.layers[0].bias(0) - 3.0) < 1e-6);
}

TEST_CASE("zero batches returns the initial network") {
    const SDESpec spec;
    TrainConfig cfg;
    cfg.batches = 0;
    cfg.seed = 4;
    const NetSpec ns{2, 8, Activation::gelu};
    const auto res = train_sgm(cfg, RegularizerConfig{}, ns, TargetDistribution::checkerboard(), spec);
    CHECK(identical(res.params, init_sgm_network(ns, spec, SGMObjective::score, 4)));
    CHECK(res.trace.empty());
}

TEST_CASE("training is reproducible and resumes exactly from a checkpoint") {
    const SDESpec spec;
    TrainConfig cfg;
    cfg.batches = 60;
    cfg.batch_size = 16;
    cfg.eval_every = 7;
    cfg.seed = 11;
    const RegularizerConfig reg{1.0, 0.5, 0.2, 1};
    const NetSpec ns{2, 8, Activation::gelu};
    const auto target = TargetDistribution::checkerboard();
    const auto a = train_sgm(cfg, reg, ns, target, spec);
    const auto b = train_sgm(cfg, reg, ns, target, spec);
    CHECK(identical(a.params, b.params));
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t k = 0; k < a.trace.size(); ++k) CHECK(a.trace[k].loss == b.trace[k].loss);
    CHECK(a.trace.back().step == 60);

    auto state = make_train_state(init_sgm_network(ns, spec, SGMObjective::score, cfg.seed));
    const auto loss = sgm_batch_loss(target, spec, reg, SGMObjective::score, cfg.batch_size);
    train_loop(state, cfg, loss, 25);
    std::stringstream ss;
    write_train_state(ss, state);
    auto resumed = read_train_state(ss);
    train_loop(resumed, cfg, loss);
    CHECK(identical(resumed.params, a.params));
    REQUIRE(resumed.trace.size() == a.trace.size());
    for (std::size_t k = 0; k < a.trace.size(); ++k) CHECK(resumed.trace[k].loss == a.trace[k].loss);
}

TEST_CASE("potential objective trains and its score is the gradient") {
    const SDESpec spec;
    TrainConfig cfg;
    cfg.batches = 5;
    cfg.batch_size = 8;
    const NetSpec ns{1, 8, Activation::gelu};
    const auto res = train_sgm(cfg, RegularizerConfig{1.0, 1.0, 1.0, 1}, ns, TargetDistribution::checkerboard(), spec,
                               SGMObjective::potential);
    CHECK(res.params.output_dim() == 1);
    RowMatrix y(1, 2);
    y << 0.3, -0.4;
    RowMatrix out;
    trained_score(res.params)(y, 0.5, out);
    const auto b = derivatives(res.params, y.row(0).transpose(), 0.5, DerivativeOrder::first);
    CHECK(out(0, 0) == b.jacobian_x(0, 0));
    CHECK(out(0, 1) == b.jacobian_x(0, 1));
}

TEST_CASE("non-finite loss aborts with the last parameters") {
    auto state = make_train_state(make_mlp(2, 2, {4}, Activation::gelu, 1));
    const auto initial = state.params;
    TrainConfig cfg;
    cfg.batches = 10;
    const BatchLoss bad = [](TapeNetworkEvaluator& ev, std::uint64_t b, std::uint64_t) {
        const auto j = ev(std::vector<double>{0.1, 0.2}, {0.0}, JetRequest::value_only());
        return b == 3 ? j.value(0, 0) * std::numeric_limits<double>::quiet_NaN() : j.value(0, 0);
    };
    try {
        train_loop(state, cfg, bad);
        FAIL("expected divergence");
    } catch (const DivergedTrainingError& e) {
        CHECK(e.step() == 3);
        CHECK(identical(e.last_params(), state.params));
        CHECK_FALSE(identical(e.last_params(), initial));
    }
}
