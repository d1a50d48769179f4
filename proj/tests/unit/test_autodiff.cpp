#include "helpers.hpp"

#include "mfgen/autodiff.hpp"

#include <catch_amalgamated.hpp>

#include <random>
#include <sstream>

using namespace mfgen;
using testing_support::ref_forward;
using testing_support::rel_err;

namespace {

MLPParams single_layer(const Matrix& W_state, const Vector& b) {
    MLPParams net;
    LayerParams l;
    l.weight = Matrix::Zero(W_state.rows(), W_state.cols() + 1);
    l.weight.leftCols(W_state.cols()) = W_state;
    l.bias = b;
    net.layers.push_back(l);
    return net;
}

Vector random_point(std::mt19937_64& gen, int d) {
    std::normal_distribution<double> nd;
    Vector x(d);
    for (int i = 0; i < d; ++i) x(i) = nd(gen);
    return x;
}

} // namespace

TEST_CASE("zero-weight network returns the last bias") {
    auto net = make_zero_mlp(2, 2, {8, 8}, Activation::gelu);
    net.layers.back().bias << 0.25, -1.5;
    const Vector y = forward(net, Vector::Constant(2, 3.0), 0.7);
    CHECK(y(0) == 0.25);
    CHECK(y(1) == -1.5);
}

TEST_CASE("single affine layer maps x to Wx + b") {
    Matrix W(2, 2);
    W << 1.0, 2.0, -3.0, 0.5;
    Vector b(2);
    b << 0.1, 0.2;
    const auto net = single_layer(W, b);
    Vector x(2);
    x << 0.3, -0.7;
    const Vector y = forward(net, x, 1.3);
    CHECK(y.isApprox(W * x + b, 1e-15));
}

TEST_CASE("forward matches straight-line scalar evaluation") {
    for (auto act : {Activation::gelu, Activation::tanh}) {
        const auto net = make_mlp(2, 2, {32, 32}, act, 42);
        Vector x(2);
        x << 0.4, -1.1;
        const Vector y = forward(net, x, 0.8);
        const auto ref = ref_forward(net, {0.4L, -1.1L}, 0.8L);
        for (int c = 0; c < 2; ++c) CHECK(std::abs(y(c) - static_cast<double>(ref[static_cast<std::size_t>(c)])) < 1e-13);
    }
}

TEST_CASE("forward rejects wrong state dimension") {
    const auto net = make_mlp(2, 2, {4}, Activation::gelu, 1);
    CHECK_THROWS_AS(forward(net, Vector::Zero(3), 0.0), ConfigError);
}

TEST_CASE("GeLU derivative at zero is one half") {
    CHECK(activation_derivs(Activation::gelu, 0.0).d1 == 0.5);
    CHECK(activation_derivs(Activation::gelu, 0.0).f == 0.0);
}

TEST_CASE("activation derivatives match finite differences") {
    const double h = 1e-5;
    for (auto act : {Activation::gelu, Activation::tanh}) {
        for (double z : {-2.3, -0.4, 0.0, 0.9, 3.1}) {
            const auto a = activation_derivs(act, z);
            const auto p = activation_derivs(act, z + h);
            const auto m = activation_derivs(act, z - h);
            CHECK(std::abs(a.d1 - (p.f - m.f) / (2 * h)) < 1e-8);
            CHECK(std::abs(a.d2 - (p.d1 - m.d1) / (2 * h)) < 1e-8);
            CHECK(std::abs(a.d3 - (p.d2 - m.d2) / (2 * h)) < 1e-8);
        }
    }
}

TEST_CASE("affine network: divergence is the trace and laplacians vanish") {
    Matrix A(2, 2);
    A << 1.5, -0.3, 0.7, -0.25;
    const auto net = single_layer(A, Vector::Zero(2));
    Vector x(2);
    x << 0.2, 0.9;
    CHECK(divergence(net, x, 0.1) == Catch::Approx(1.25).epsilon(1e-15));
    const auto b = derivatives(net, x, 0.1, DerivativeOrder::second);
    CHECK(b.component_laplacians.isZero(0.0));
    CHECK(b.jacobian_x.isApprox(A));
}

TEST_CASE("affine composition of hidden layers keeps zero curvature") {
    // tanh'' vanishes only at 0, so use a multilayer net whose hidden pre-activations are zero:
    // zero first-layer weights make every hidden unit constant in x.
    auto net = make_mlp(2, 2, {6}, Activation::tanh, 3);
    net.layers[0].weight.setZero();
    Vector x(2);
    x << 1.0, -2.0;
    const auto b = derivatives(net, x, 0.5, DerivativeOrder::second);
    CHECK(b.component_laplacians.isZero(0.0));
    CHECK(b.jacobian_x.isZero(0.0));
}

TEST_CASE("identity field has divergence d, curl field has divergence zero") {
    const auto id = single_layer(Matrix::Identity(2, 2), Vector::Zero(2));
    CHECK(divergence(id, Vector::Ones(2), 0.0) == 2.0);
    Matrix C(2, 2);
    C << 0.0, -1.0, 1.0, 0.0;
    const auto curl = single_layer(C, Vector::Zero(2));
    CHECK(divergence(curl, Vector::Ones(2), 0.0) == 0.0);
}

TEST_CASE("divergence rejects non-square fields") {
    const auto net = make_mlp(2, 1, {4}, Activation::gelu, 1);
    CHECK_THROWS_AS(divergence(net, Vector::Zero(2), 0.0), ShapeError);
}

TEST_CASE("derivatives match long-double finite differences on random nets") {
    std::mt19937_64 gen(7);
    const long double h = 1e-4L;
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 1 + trial % 3;
        const int d_out = trial % 2 == 0 ? d : 1;
        const auto net = make_mlp(d, d_out, {16, 16}, trial % 4 == 3 ? Activation::tanh : Activation::gelu, 100 + trial);
        const Vector x = random_point(gen, d);
        const double t = 0.37 * trial / 7.0;
        const auto b = derivatives(net, x, t, DerivativeOrder::second);
        std::vector<long double> xl(x.data(), x.data() + d);
        const auto f0 = ref_forward(net, xl, t);
        for (int i = 0; i < d; ++i) {
            auto xp = xl, xm = xl;
            xp[static_cast<std::size_t>(i)] += h;
            xm[static_cast<std::size_t>(i)] -= h;
            const auto fp = ref_forward(net, xp, t), fm = ref_forward(net, xm, t);
            for (int c = 0; c < d_out; ++c) {
                const auto k = static_cast<std::size_t>(c);
                CHECK(rel_err(b.jacobian_x(c, i), static_cast<double>((fp[k] - fm[k]) / (2 * h))) < 1e-5);
            }
        }
        const auto tp = ref_forward(net, xl, t + h), tm = ref_forward(net, xl, t - h);
        for (int c = 0; c < d_out; ++c) {
            const auto k = static_cast<std::size_t>(c);
            CHECK(rel_err(b.time_partial(c), static_cast<double>((tp[k] - tm[k]) / (2 * h))) < 1e-5);
            long double lap = 0;
            for (int i = 0; i < d; ++i) {
                auto xp = xl, xm = xl;
                xp[static_cast<std::size_t>(i)] += h;
                xm[static_cast<std::size_t>(i)] -= h;
                lap += (ref_forward(net, xp, t)[k] - 2 * f0[k] + ref_forward(net, xm, t)[k]) / (h * h);
            }
            CHECK(rel_err(b.component_laplacians(c), static_cast<double>(lap)) < 1e-4);
        }
    }
}

TEST_CASE("second order with relu is rejected") {
    const auto net = make_mlp(2, 2, {4}, Activation::relu, 1);
    CHECK_THROWS_AS(derivatives(net, Vector::Zero(2), 0.0, DerivativeOrder::second), UnsupportedActivationError);
    CHECK_NOTHROW(derivatives(net, Vector::Ones(2), 0.0, DerivativeOrder::first));
}

namespace {

double loss_norm2(const MLPParams& net, const Vector& x, double t) { return forward(net, x, t).squaredNorm(); }

template <class F>
void check_param_fd(MLPParams net, const ParamTensors& grad, F&& loss, double tol) {
    const double h = 1e-4;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        for (Eigen::Index k = 0; k < net.layers[l].weight.size(); ++k) {
            double& w = net.layers[l].weight.data()[k];
            const double w0 = w;
            w = w0 + h;
            const double fp = loss(net);
            w = w0 - h;
            const double fm = loss(net);
            w = w0;
            CHECK(rel_err(grad[l].weight.data()[k], (fp - fm) / (2 * h)) < tol);
        }
        for (Eigen::Index k = 0; k < net.layers[l].bias.size(); ++k) {
            double& w = net.layers[l].bias.data()[k];
            const double w0 = w;
            w = w0 + h;
            const double fp = loss(net);
            w = w0 - h;
            const double fm = loss(net);
            w = w0;
            CHECK(rel_err(grad[l].bias.data()[k], (fp - fm) / (2 * h)) < tol);
        }
    }
}

} // namespace

TEST_CASE("param_grad of squared output matches finite differences") {
    const auto net = make_mlp(2, 2, {8, 8}, Activation::gelu, 11);
    Vector x(2);
    x << 0.3, -0.6;
    const double t = 1.2;
    const auto r = param_grad(net, [&](TapeNetworkEvaluator& ev) {
        const auto j = ev(std::vector<double>{x(0), x(1)}, {t}, JetRequest::value_only());
        return j.value(0, 0) * j.value(0, 0) + j.value(1, 0) * j.value(1, 0);
    });
    CHECK(r.value == Catch::Approx(loss_norm2(net, x, t)).epsilon(1e-14));
    check_param_fd(net, r.grad, [&](const MLPParams& n) { return loss_norm2(n, x, t); }, 1e-5);
}

TEST_CASE("param_grad through jacobian, time partial and laplacian matches finite differences") {
    const auto net = make_mlp(2, 2, {6, 6}, Activation::tanh, 12);
    const std::vector<double> xs = {0.3, -0.6, 1.1, 0.2};
    const std::vector<double> ts = {0.4, 2.0};
    auto scalar_loss = [&](auto& ev) {
        const auto j = ev(xs, ts, JetRequest::second());
        using S = std::decay_t<decltype(j.value(0, 0))>;
        S acc(0.0);
        for (int p = 0; p < 2; ++p)
            for (int c = 0; c < 2; ++c)
                acc = acc + j.laplacian(c, p) * j.value(c, p) + j.time(c, p) * j.jacobian(c, 1 - c, p) +
                      abs_pow(j.jacobian(c, c, p) - S(0.5), 2);
        return acc;
    };
    const auto r = param_grad(net, [&](TapeNetworkEvaluator& ev) { return scalar_loss(ev); });
    check_param_fd(net, r.grad, [&](const MLPParams& n) {
        NetworkEvaluator ev(n);
        return scalar_loss(ev);
    }, 1e-4);
}

TEST_CASE("state variables on the tape receive exact gradients") {
    const auto net = make_mlp(2, 1, {8, 8}, Activation::gelu, 5);
    Tape tape;
    ParamTensors sink = zeros_like(net.layers);
    TapeNetworkEvaluator ev(net, tape, sink);
    std::vector<Var> x = {tape.leaf(0.7), tape.leaf(-0.2)};
    const auto j = ev(x, {0.5}, JetRequest::second());
    const Var out = j.laplacian(0, 0) + j.jacobian(0, 0, 0) * j.value(0, 0);
    const auto adj = tape.backward(out);
    auto f = [&](double a, double b) {
        const auto jj = NetworkEvaluator(net)({a, b}, {0.5}, JetRequest::second());
        return jj.laplacian(0, 0) + jj.jacobian(0, 0, 0) * jj.value(0, 0);
    };
    const double h = 1e-4;
    CHECK(rel_err(adj[static_cast<std::size_t>(x[0].id)], (f(0.7 + h, -0.2) - f(0.7 - h, -0.2)) / (2 * h)) < 1e-5);
    CHECK(rel_err(adj[static_cast<std::size_t>(x[1].id)], (f(0.7, -0.2 + h) - f(0.7, -0.2 - h)) / (2 * h)) < 1e-5);
}

TEST_CASE("frozen layers get zero gradient; unsupported primitives are rejected") {
    const auto net = make_mlp(2, 2, {4, 4}, Activation::gelu, 3);
    const auto r = param_grad(net, [&](TapeNetworkEvaluator& ev) {
        const auto j = ev(std::vector<double>{0.1, 0.2}, {0.3}, JetRequest::value_only());
        return j.value(0, 0) + j.value(1, 0);
    }, {true, false, false});
    CHECK(r.grad[0].weight.isZero(0.0));
    CHECK(r.grad[0].bias.isZero(0.0));
    CHECK_FALSE(r.grad[2].weight.isZero(0.0));
    CHECK_THROWS_AS(param_grad(net, [&](TapeNetworkEvaluator& ev) {
        return pow(ev(std::vector<double>{0.1, 0.2}, {0.3}, JetRequest::value_only()).value(0, 0), 3);
    }), UnsupportedGraphError);
}

TEST_CASE("derivatives are deterministic and checkpoints round-trip exactly") {
    const auto net = make_mlp(2, 2, {32, 32}, Activation::gelu, 99);
    Vector x(2);
    x << -0.3, 0.8;
    const auto a = derivatives(net, x, 0.2, DerivativeOrder::second);
    const auto b = derivatives(net, x, 0.2, DerivativeOrder::second);
    CHECK((a.jacobian_x.array() == b.jacobian_x.array()).all());
    CHECK((a.component_laplacians.array() == b.component_laplacians.array()).all());
    std::stringstream ss;
    write_mlp(ss, net);
    const auto back = read_mlp(ss);
    REQUIRE(back.layers.size() == net.layers.size());
    CHECK(back.activation == net.activation);
    CHECK(back.seed == net.seed);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        CHECK((back.layers[l].weight.array() == net.layers[l].weight.array()).all());
        CHECK((back.layers[l].bias.array() == net.layers[l].bias.array()).all());
    }
}

TEST_CASE("Hutchinson estimate averages to the exact trace") {
    const auto net = make_mlp(3, 3, {16}, Activation::gelu, 8);
    Matrix x = Matrix::Zero(3, 1);
    x << 0.2, -0.4, 0.6;
    const double exact = divergence(net, x.col(0), 0.5);
    const Vector est = hutchinson_divergence(net, x, Vector::Constant(1, 0.5), 20000, 1);
    CHECK(std::abs(est(0) - exact) < 0.05 * std::max(1.0, std::abs(exact)));
}
