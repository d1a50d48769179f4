#include "mfgen/metrics.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>

using namespace mfgen;

namespace {

double phi_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

} // namespace

TEST_CASE("MMD of identical samples: biased >= 0, unbiased near zero") {
    const auto X = TargetDistribution::isotropic_gaussian(2, 1.0).sample(500, 1).states;
    CHECK(mmd_squared_biased(X, X, 1.0) >= 0.0);
    CHECK(std::abs(mmd_squared(X, X, 1.0)) < 0.01);
    CHECK_THROWS_AS(mmd_squared(X.topRows(1), X, 1.0), DomainError);
}

TEST_CASE("MMD matches a brute-force loop and the Gaussian closed form") {
    const auto X = TargetDistribution::isotropic_gaussian(2, 1.0).sample(2000, 2).states;
    const auto Y = TargetDistribution::gaussian(Vector((Vector(2) << 3.0, 0.0).finished()), Matrix::Identity(2, 2))
                       .sample(2000, 3)
                       .states;
    const double got = mmd_squared(X, Y, 1.0);
    double xx = 0, yy = 0, xy = 0;
    for (int i = 0; i < 2000; ++i)
        for (int j = 0; j < 2000; ++j) {
            const double dxx = (X.row(i) - X.row(j)).squaredNorm();
            const double dyy = (Y.row(i) - Y.row(j)).squaredNorm();
            if (i != j) {
                xx += std::exp(-0.5 * dxx);
                yy += std::exp(-0.5 * dyy);
            }
            xy += std::exp(-0.5 * (X.row(i) - Y.row(j)).squaredNorm());
        }
    const double brute = xx / (2000.0 * 1999.0) + yy / (2000.0 * 1999.0) - 2.0 * xy / (2000.0 * 2000.0);
    CHECK(got == Catch::Approx(brute).epsilon(1e-10));
    // population value: 2 c (1 - exp(-|delta|^2 / (2 (h^2 + 2)))) with c = (h^2 / (h^2 + 2))^{d/2}
    const double pop = 2.0 / 3.0 * (1.0 - std::exp(-9.0 / 6.0));
    CHECK(std::abs(got - pop) < 0.03);
}

TEST_CASE("MMD vanishes for a huge bandwidth and is symmetric") {
    const auto X = TargetDistribution::isotropic_gaussian(2, 1.0).sample(200, 4).states;
    const auto Y = TargetDistribution::checkerboard().sample(300, 5).states;
    CHECK(std::abs(mmd_squared(X, Y, 1e6)) < 1e-9);
    CHECK(mmd_squared(X, Y, 0.8) == Catch::Approx(mmd_squared(Y, X, 0.8)).epsilon(1e-12));
    RowMatrix Xp = X.colwise().reverse();
    CHECK(mmd_squared(Xp, Y, 0.8) == Catch::Approx(mmd_squared(X, Y, 0.8)).epsilon(1e-12));
}

TEST_CASE("energy distance: near zero for one law, positive for a shift") {
    const auto g = TargetDistribution::isotropic_gaussian(2, 1.0);
    const auto X = g.sample(1000, 1).states, Y = g.sample(1000, 2).states;
    const double same = energy_distance(X, Y);
    CHECK(same >= 0.0);
    CHECK(same < 0.02);
    RowMatrix Z = Y;
    Z.col(0).array() += 1.0;
    CHECK(energy_distance(X, Z) > 0.3);
}

TEST_CASE("support overlap: true samples, Gaussian mass and off-support points") {
    const auto cb = TargetDistribution::checkerboard();
    CHECK(support_overlap(cb.sample(5000, 1).states, cb) == 1.0);
    const auto X = TargetDistribution::isotropic_gaussian(2, 1.0).sample(100000, 2).states;
    double mass = 0;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            if ((i + j) % 2 == 0)
                mass += (phi_cdf(-1.0 + i) - phi_cdf(-2.0 + i)) * (phi_cdf(-1.0 + j) - phi_cdf(-2.0 + j));
    const double se = std::sqrt(mass * (1 - mass) / 100000.0);
    CHECK(std::abs(support_overlap(X, cb) - mass) < 3.0 * se);
    RowMatrix off(3, 2);
    off << 0.5, -0.5, 3.0, 3.0, -1.5, -0.5;
    CHECK(support_overlap(off, cb) == 0.0);
    CHECK_THROWS_AS(support_overlap(off, TargetDistribution::isotropic_gaussian(2, 1.0)), UnsupportedError);
}

TEST_CASE("moment report and JSON serialization") {
    const auto g = TargetDistribution::isotropic_gaussian(2, 0.25);
    const auto X = g.sample(100000, 3).states;
    const auto m = moment_report(X, g);
    CHECK(m.mean_error.maxCoeff() < 0.01);
    CHECK(m.cov_max_abs < 0.01);
    const auto r = metric_report(X.topRows(500), g.sample(500, 4).states, &g);
    const auto j = r.to_json();
    CHECK(j.contains("mmd2"));
    CHECK(j["mmd_bandwidth"].get<double>() > 0.0);
    CHECK_FALSE(j.contains("support_overlap"));
}
