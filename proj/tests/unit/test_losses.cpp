#include "helpers.hpp"

#include "mfgen/losses.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

using namespace mfgen;
using testing_support::rel_err;

namespace {

SDESpec ou2() { return SDESpec{}; }

struct Stats {
    double mean, se;
};

Stats stats(const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return {m, std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()))};
}

} // namespace

TEST_CASE("ISM of the zero field is zero; empty batches are rejected") {
    const auto spec = ou2();
    const auto net = make_zero_mlp(2, 2, {8}, Activation::gelu);
    const auto data = TargetDistribution::checkerboard().sample(64, 1);
    const auto batch = make_noised_batch(spec, data.states, 2);
    CHECK(ism_loss(NetworkEvaluator(net), spec, batch) == 0.0);
    CHECK_THROWS_AS(make_noised_batch(spec, RowMatrix(0, 2), 1), DomainError);
}

TEST_CASE("ISM of the analytic score satisfies the integration-by-parts identity") {
    const auto spec = ou2();
    const auto pi = TargetDistribution::isotropic_gaussian(2, 0.25);
    const GaussianEtaScoreEvaluator exact{GaussianEta(spec, pi)};
    const auto batch = make_noised_batch(spec, pi.sample(100000, 3).states, 4);
    const auto j = exact(batch.y, batch.s, JetRequest::divergence());
    const auto ism = ism_terms(j, spec);
    std::vector<double> combined(ism.size());
    for (int q = 0; q < j.n; ++q) {
        double n2 = 0;
        for (int i = 0; i < 2; ++i) n2 += j.value(i, q) * j.value(i, q);
        combined[static_cast<std::size_t>(q)] = spec.T * (ism[static_cast<std::size_t>(q)] + 0.5 * n2);
    }
    const auto st = stats(combined);
    CHECK(std::abs(st.mean) < 4.0 * st.se);
}

TEST_CASE("ESM: zero for the exact score, direct Monte Carlo for the zero field") {
    const auto spec = ou2();
    const auto pi = TargetDistribution::isotropic_gaussian(2, 0.25);
    const GaussianEta eta(spec, pi);
    const auto batch = make_noised_batch(spec, pi.sample(64, 3).states, 4);
    CHECK(esm_loss(GaussianEtaScoreEvaluator(eta), eta, spec, batch) == 0.0);
    const auto zero = make_zero_mlp(2, 2, {8}, Activation::gelu);
    double direct = 0;
    for (int q = 0; q < batch.size(); ++q) {
        const Vector y = Eigen::Map<const Vector>(batch.y.data() + 2 * q, 2);
        direct += 0.5 * eta.score(y, batch.s[static_cast<std::size_t>(q)]).squaredNorm();
    }
    direct *= spec.T / batch.size();
    CHECK(esm_loss(NetworkEvaluator(zero), eta, spec, batch) == Catch::Approx(direct).epsilon(1e-12));
    CHECK_THROWS_AS(GaussianEta(spec, TargetDistribution::checkerboard()), UnsupportedError);
}

TEST_CASE("ESM and ISM differences agree between network pairs") {
    const auto spec = ou2();
    const auto pi = TargetDistribution::isotropic_gaussian(2, 0.25);
    const GaussianEta eta(spec, pi);
    const auto batch = make_noised_batch(spec, pi.sample(20000, 5).states, 6);
    const auto A = make_mlp(2, 2, {16, 16}, Activation::gelu, 1);
    const auto B = make_mlp(2, 2, {16, 16}, Activation::gelu, 2);
    const auto ex = GaussianEtaScoreEvaluator(eta)(batch.y, batch.s, JetRequest::value_only());
    const auto ja = NetworkEvaluator(A)(batch.y, batch.s, JetRequest::divergence());
    const auto jb = NetworkEvaluator(B)(batch.y, batch.s, JetRequest::divergence());
    const auto ea = esm_terms(ja, ex, spec), eb = esm_terms(jb, ex, spec);
    const auto ia = ism_terms(ja, spec), ib = ism_terms(jb, spec);
    std::vector<double> diff(ea.size());
    for (std::size_t q = 0; q < diff.size(); ++q) diff[q] = spec.T * ((ea[q] - eb[q]) - (ia[q] - ib[q]));
    const auto st = stats(diff);
    CHECK(std::abs(st.mean) <= 3.0 * st.se);
}

TEST_CASE("R1: zero field vanishes, analytic score solves the equation") {
    const auto spec = ou2();
    const auto pi = TargetDistribution::isotropic_gaussian(2, 0.25);
    const auto batch = make_noised_batch(spec, pi.sample(256, 3).states, 4);
    RegularizerConfig cfg{0.0, 1.0, 1.0, 2};
    const auto zero = make_zero_mlp(2, 2, {8}, Activation::gelu);
    CHECK(hjb_r1(NetworkEvaluator(zero), spec, batch, cfg) == 0.0);
    cfg.alpha2 = 0.0;
    const GaussianEtaScoreEvaluator exact{GaussianEta(spec, pi)};
    CHECK(std::abs(hjb_r1(exact, spec, batch, cfg)) < 1e-20);
    cfg.p = 1;
    CHECK(std::abs(hjb_r1(exact, spec, batch, cfg)) < 1e-10);
    cfg.p = 3;
    CHECK_THROWS_AS(hjb_r1(exact, spec, batch, cfg), ConfigError);
}

TEST_CASE("R1 with alpha1 = 0 is the terminal implicit score-matching term") {
    const auto spec = ou2();
    const auto data = TargetDistribution::checkerboard().sample(32, 3);
    const auto batch = make_noised_batch(spec, data.states, 4);
    const auto net = make_mlp(2, 2, {16, 16}, Activation::gelu, 5);
    const RegularizerConfig cfg{0.0, 0.0, 0.7, 2};
    double direct = 0;
    for (Eigen::Index q = 0; q < data.size(); ++q) {
        const Vector y = data.states.row(q).transpose();
        direct += forward(net, y, 0.0).squaredNorm() + 2.0 * divergence(net, y, 0.0);
    }
    direct *= 0.7 / static_cast<double>(data.size());
    CHECK(hjb_r1(NetworkEvaluator(net), spec, batch, cfg) == Catch::Approx(direct).epsilon(1e-12));
}

TEST_CASE("R1 parameter gradients match finite differences") {
    const auto spec = ou2();
    const auto data = TargetDistribution::checkerboard().sample(4, 3);
    const auto batch = make_noised_batch(spec, data.states, 4);
    for (int p : {1, 2}) {
        const RegularizerConfig cfg{1.0, 1.0, 0.5, p};
        auto net = make_mlp(2, 2, {8, 8}, Activation::gelu, 20 + p);
        const auto r = param_grad(net, [&](TapeNetworkEvaluator& ev) { return sgm_objective(ev, spec, batch, cfg); });
        CHECK(r.value == Catch::Approx(sgm_objective(NetworkEvaluator(net), spec, batch, cfg)).epsilon(1e-13));
        const double h = 1e-4;
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            for (Eigen::Index k = 0; k < net.layers[l].weight.size(); ++k) {
                double& w = net.layers[l].weight.data()[k];
                const double w0 = w;
                w = w0 + h;
                const double fp = sgm_objective(NetworkEvaluator(net), spec, batch, cfg);
                w = w0 - h;
                const double fm = sgm_objective(NetworkEvaluator(net), spec, batch, cfg);
                w = w0;
                CHECK(rel_err(r.grad[l].weight.data()[k], (fp - fm) / (2 * h)) < 1e-4);
            }
        }
    }
}

TEST_CASE("R2: zero potential, analytic log-density, zero weights") {
    const auto spec = ou2();
    const auto pi = TargetDistribution::isotropic_gaussian(2, 0.25);
    const auto batch = make_noised_batch(spec, pi.sample(128, 3).states, 4);
    const auto zero = make_zero_mlp(2, 1, {8}, Activation::gelu);
    const RegularizerConfig cfg{0.0, 1.0, 0.0, 1};
    CHECK(hjb_r2(NetworkEvaluator(zero), spec, batch, cfg) == Catch::Approx(spec.T * 1.0).epsilon(1e-15));
    const GaussianEtaLogDensityEvaluator logeta{GaussianEta(spec, pi)};
    CHECK(std::abs(hjb_r2(logeta, spec, batch, cfg)) < 1e-10);
    const RegularizerConfig none{0.0, 0.0, 0.0, 1};
    const auto scalar_net = make_mlp(2, 1, {8}, Activation::gelu, 1);
    const auto vector_net = make_mlp(2, 2, {8}, Activation::gelu, 1);
    CHECK(hjb_r2(NetworkEvaluator(scalar_net), spec, batch, none) == 0.0);
    CHECK_THROWS_AS(hjb_r2(NetworkEvaluator(vector_net), spec, batch, cfg), ShapeError);
}

TEST_CASE("R2 terminal term matches the analytic log-density identity") {
    // For phi = log pi, E_pi[|grad phi|^2 + 2 lap phi] = -E_pi[|grad log pi|^2] = -tr(Sigma^-1).
    const auto spec = ou2();
    const auto pi = TargetDistribution::isotropic_gaussian(2, 0.25);
    const auto batch = make_noised_batch(spec, pi.sample(100000, 3).states, 4);
    const GaussianEtaLogDensityEvaluator logeta{GaussianEta(spec, pi)};
    const RegularizerConfig cfg{0.0, 0.0, 1.0, 1};
    CHECK(hjb_r2(logeta, spec, batch, cfg) == Catch::Approx(-8.0).epsilon(0.02));
}

TEST_CASE("OT-flow objective: quadratic potential closed form") {
    const int d = 2;
    const double T = 1.0;
    const QuadraticPotential U(d, 1.0);
    const auto data = TargetDistribution::isotropic_gaussian(d, 1.0).sample(16, 2);
    FlowLossOptions opt{T, 1000, 1.0, 1.0};
    const auto terms = otflow_terms(U, data.states, opt);
    double nll = 0, tr = 0;
    for (Eigen::Index q = 0; q < data.size(); ++q) {
        const double r2 = data.states.row(q).squaredNorm();
        nll += 0.5 * r2 * std::exp(-2 * T) + 0.5 * d * std::log(2 * std::numbers::pi) + d * T;
        tr += 0.25 * r2 * (1 - std::exp(-2 * T));
    }
    nll /= 16.0;
    tr /= 16.0;
    CHECK(std::abs(terms.nll - nll) < 1e-3);
    CHECK(std::abs(terms.transport - tr) < 1e-3);
    CHECK(std::abs(terms.hjb - tr) < 1e-3);
    CHECK(std::abs(terms.total - (nll + 2 * tr)) < 1e-3);
}

TEST_CASE("OT-flow objective with zero potential is the plain cross-entropy") {
    const auto zero = make_zero_mlp(2, 1, {8}, Activation::gelu);
    const auto data = TargetDistribution::checkerboard().sample(32, 2);
    const double got = otflow_objective(NetworkEvaluator(zero), data.states, FlowLossOptions{1.0, 4, 1.0, 1.0});
    double ce = 0;
    for (Eigen::Index q = 0; q < data.size(); ++q) ce -= std_normal_log_density(data.states.row(q).data(), 2);
    CHECK(got == Catch::Approx(ce / 32.0).epsilon(1e-14));
}

TEST_CASE("OT-BG objective: lambda endpoints and identity flow") {
    const auto pi = TargetDistribution::isotropic_gaussian(2, 1.0);
    const auto logpi = LogDensityFn::of(pi);
    const auto data = pi.sample(32, 1).states;
    const auto latent = pi.sample(32, 2).states;
    const auto net = make_mlp(2, 1, {8}, Activation::gelu, 4);
    const FlowLossOptions opt{1.0, 4, 0.0, 1.0};
    const NetworkEvaluator ev(net);
    double mean_logpi = 0;
    for (Eigen::Index q = 0; q < data.rows(); ++q) mean_logpi += logpi.value(data.row(q).transpose());
    mean_logpi /= 32.0;
    CHECK(otbg_objective(ev, data, latent, 1.0, logpi, opt) ==
          Catch::Approx(otflow_objective(ev, data, opt) + mean_logpi).epsilon(1e-13));
    const auto zero_net = make_zero_mlp(2, 1, {8}, Activation::gelu);
    const NetworkEvaluator zero(zero_net);
    for (double lambda : {0.0, 0.3, 1.0}) {
        OTBGTerms terms;
        const double v = otbg_objective(zero, data, latent, lambda, logpi, opt, &terms);
        CHECK(std::abs(v) < 1e-12);
        CHECK(std::abs(terms.reverse_kl) < 1e-12);
        CHECK(terms.transport == 0.0);
    }
    CHECK_THROWS_AS(otbg_objective(ev, data, latent, 1.5, logpi, opt), ConfigError);
}

TEST_CASE("OT-BG reverse-KL gradient matches finite differences") {
    const auto pi = TargetDistribution::gaussian_mixture({0.5, 0.5}, {Vector::Constant(2, 1.0), Vector::Constant(2, -1.0)},
                                                        {Matrix::Identity(2, 2), Matrix::Identity(2, 2)});
    const auto logpi = LogDensityFn::of(pi);
    const auto data = pi.sample(4, 1).states;
    const auto latent = TargetDistribution::isotropic_gaussian(2, 1.0).sample(4, 2).states;
    auto net = make_mlp(2, 1, {6}, Activation::tanh, 9);
    const FlowLossOptions opt{1.0, 3, 0.5, 1.0};
    const auto r = param_grad(net, [&](TapeNetworkEvaluator& ev) { return otbg_objective(ev, data, latent, 0.4, logpi, opt); });
    const double h = 1e-5;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        for (Eigen::Index k = 0; k < net.layers[l].weight.size(); ++k) {
            double& w = net.layers[l].weight.data()[k];
            const double w0 = w;
            w = w0 + h;
            const double fp = otbg_objective(NetworkEvaluator(net), data, latent, 0.4, logpi, opt);
            w = w0 - h;
            const double fm = otbg_objective(NetworkEvaluator(net), data, latent, 0.4, logpi, opt);
            w = w0;
            CHECK(rel_err(r.grad[l].weight.data()[k], (fp - fm) / (2 * h)) < 1e-4);
        }
    }
}

TEST_CASE("general HJB penalty with bounded-velocity Hamiltonian") {
    // U = c|x|^2/2 + k t: dU/dt - c_b |grad U| = k - c_b c |x|.
    const QuadraticPotential U(2, 2.0, 0.5);
    const std::vector<double> x = {0.3, 0.4, 0.0, 0.0};
    const std::vector<double> t = {0.1, 0.2};
    const double v = hjb_penalty(U, x, t, 2.0,
        [](const std::vector<double>& p) { return bounded_velocity_hamiltonian(p, 1.5); }, 1.0);
    CHECK(v == Catch::Approx(2.0 * 0.5 * (std::abs(0.5 - 1.5 * 2.0 * 0.5) + 0.5)).epsilon(1e-14));
}
