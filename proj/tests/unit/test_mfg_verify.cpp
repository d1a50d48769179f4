#include "mfgen/mfg_verify.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>

using namespace mfgen;

namespace {

double grid_variance(const GridField1D& f, Eigen::Index m) {
    const Eigen::Index n = f.nx();
    Vector x(n), w(n);
    for (Eigen::Index j = 0; j < n; ++j) x[j] = f.x(j);
    const Vector r = f.values.row(m).transpose();
    const double mass = trapezoid(r, f.h);
    const double mean = trapezoid(x.cwiseProduct(r), f.h) / mass;
    return trapezoid((x.array() - mean).square().matrix().cwiseProduct(r), f.h) / mass;
}

} // namespace

TEST_CASE("heat equation spreads a narrow Gaussian with variance v0 + 2 s") {
    SDESpec heat{0.0, 0.0, std::sqrt(2.0), 1.0, 1};
    Grid1D g{-10.0, 10.0, 1.0, 2001, 1001};
    const auto eta = fp_solve_1d(heat, gaussian_on_grid(g, 0.0, 0.01), g);
    for (Eigen::Index m : {Eigen::Index(0), Eigen::Index(250), Eigen::Index(1000)})
        CHECK(grid_variance(eta, m) == Catch::Approx(0.01 + 2.0 * eta.t(m)).epsilon(1e-4));
}

TEST_CASE("OU Fokker-Planck solve matches the closed form and conserves mass") {
    SDESpec ou{0.5, 0.0, 1.0, 3.0, 1};
    Grid1D g{-8.0, 8.0, 3.0, 401, 1501};
    const auto eta = fp_solve_1d(ou, gaussian_on_grid(g, 0.7, 0.25), g);
    const auto exact = analytic_ou_field(ou, 0.7, 0.25, g);
    for (Eigen::Index m = 0; m < eta.nt(); m += 100) {
        CHECK(std::abs(trapezoid(eta.values.row(m).transpose(), eta.h) - 1.0) < 1e-8);
        CHECK(l1_distance(eta.values.row(m).transpose(), exact.values.row(m).transpose(), eta.h) < 5e-4);
    }
}

TEST_CASE("zero time steps returns the initial density") {
    SDESpec ou{0.5, 0.0, 1.0, 3.0, 1};
    Grid1D g{-8.0, 8.0, 0.0, 101, 1};
    const Vector r0 = gaussian_on_grid(g, 0.0, 1.0);
    const auto eta = fp_solve_1d(ou, r0, g);
    REQUIRE(eta.nt() == 1);
    CHECK(eta.values.row(0).transpose() == r0);
    CHECK(duality_check_1d(eta, ou) == 0.0);
}

TEST_CASE("FP input validation and grid-resolution failure") {
    SDESpec ou{0.5, 0.0, 1.0, 3.0, 1};
    Grid1D g{-8.0, 8.0, 3.0, 101, 11};
    CHECK_THROWS_AS(fp_solve_1d(ou, 2.0 * gaussian_on_grid(g, 0.0, 1.0), g), DomainError);
    CHECK_THROWS_AS(fp_solve_1d(ou, gaussian_on_grid(g, 0.0, 1.0).head(50), g), ShapeError);
    // strong drift, weak diffusion, coarse grid: centered advection undershoots
    SDESpec stiff{-5.0, 0.0, 0.05, 1.0, 1};
    Grid1D coarse{-8.0, 8.0, 1.0, 41, 11};
    CHECK_THROWS_AS(fp_solve_1d(stiff, gaussian_on_grid(coarse, 0.0, 1.0), coarse), GridResolutionError);
}

TEST_CASE("HJB residual of -log eta: stationary law and refinement") {
    SDESpec ou{0.5, 0.0, 1.0, 3.0, 1};
    Grid1D g{-8.0, 8.0, 3.0, 201, 301};
    // N(0, 1) is stationary; U is quadratic so centered differences are exact
    const auto stat = analytic_ou_field(ou, 0.0, 1.0, g);
    CHECK(hjb_residual_1d(stat, ou).max_abs < 1e-9);
    double prev = 0;
    for (int k = 0; k < 3; ++k) {
        const auto r = hjb_residual_1d(analytic_ou_field(ou, 0.0, 0.25, refinement_level(g, 3, k)), ou).max_abs;
        if (k > 0) CHECK(prev / r >= 1.8);
        prev = r;
    }
    GridField1D bad = stat;
    bad.values.setZero();
    CHECK_THROWS_AS(hjb_residual_1d(bad, ou), DomainError);
}

TEST_CASE("duality deviation shrinks under refinement, also for small sigma") {
    for (double sigma : {1.0, 0.1}) {
        SDESpec s{0.5, 0.0, sigma, 3.0, 1};
        Grid1D g = sigma == 1.0 ? Grid1D{-8.0, 8.0, 3.0, 401, 1501} : Grid1D{-3.0, 3.0, 3.0, 1201, 1501};
        const double coarse = duality_check_1d(analytic_ou_field(s, 0.0, 0.25, refinement_level(g, 2, 0)), s);
        const double fine = duality_check_1d(analytic_ou_field(s, 0.0, 0.25, g), s);
        CHECK(fine < coarse / 3.0);
        CHECK(fine < 1e-3);
    }
}

TEST_CASE("variational derivatives of KL, cross-entropy and Fisher information") {
    Grid1D g{-8.0, 8.0, 0.0, 2000, 1};
    const double h = g.h();
    const Vector x = g.nodes();
    const Vector rho = gaussian_on_grid(g, 0.2, 0.8);
    const Vector chi = (x.array().sin() * rho.array()).matrix();
    const auto kl = variational_derivative_check({Functional::kl, gaussian_on_grid(g, -0.4, 1.3)}, rho, chi, h, 1e-4);
    CHECK(kl.rel_error <= 1e-4);
    const auto ce = variational_derivative_check({Functional::cross_entropy, gaussian_on_grid(g, 1.0, 2.0)}, rho, chi, h, 0.3);
    CHECK(ce.rel_error <= 1e-8);
    const auto fi = variational_derivative_check({Functional::fisher, {}, 0.7}, rho, chi, h, 1e-4);
    CHECK(fi.rel_error <= 1e-3);
    CHECK_THROWS_AS(variational_derivative_check({Functional::kl, rho}, rho, chi, h, 10.0), DomainError);
    CHECK(parse_functional("fisher") == Functional::fisher);
    CHECK_THROWS_AS(parse_functional("entropy"), ConfigError);
}

TEST_CASE("verification suite passes with defaults and serializes") {
    const auto rep = verify_suite(VerifyConfig{});
    for (const auto& c : rep.checks) {
        INFO(c.name << " = " << c.measured);
        CHECK(c.passed);
    }
    CHECK(rep.to_json()["passed"].get<bool>());
    VerifyConfig bad;
    bad.grid.nx = 800;
    CHECK_THROWS_AS(verify_suite(bad), ConfigError);
}
