#pragma once

#include "mfgen/error.hpp"
#include "mfgen/types.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace mfgen {

/// Running cost L(x, v) together with the control-to-velocity map of the dynamics.
///
/// `zero` is the plain normalizing-flow cost, feasible only on the ball |v| <= bound (bound = inf
/// leaves it unbounded). `sgm` and `probability_flow` use dx = (f + sigma v) dt with
/// L = |v|^2/2 - div f and L = |v|^2/2 - div f / 2 respectively.
enum class RunningCost { zero, quadratic, sgm, probability_flow };

enum class Dynamics { ode, sde };

inline std::string to_string(RunningCost c) {
    switch (c) {
    case RunningCost::zero: return "zero";
    case RunningCost::quadratic: return "quadratic";
    case RunningCost::sgm: return "sgm";
    case RunningCost::probability_flow: return "probability_flow";
    }
    return "unknown";
}

/// Parameters entering L and H: affine drift f(x) = a x + b, diffusion sigma, velocity bound.
struct CostParams {
    double a = 0.0;
    double b = 0.0;
    double sigma = 1.0;
    double bound = std::numeric_limits<double>::infinity();
};

/// One row of the model table: terminal functional, interaction, running cost and dynamics.
struct MFGIngredients {
    std::string model;
    std::string terminal;
    std::string interaction;
    RunningCost running_cost = RunningCost::quadratic;
    Dynamics dynamics = Dynamics::ode;
    CostParams params;

    static MFGIngredients normalizing_flow(double bound = std::numeric_limits<double>::infinity()) {
        return {"cnf", "kl_to_reference", "none", RunningCost::zero, Dynamics::ode, {0.0, 0.0, 1.0, bound}};
    }
    static MFGIngredients ot_flow() {
        return {"ot_flow", "kl_to_reference", "none", RunningCost::quadratic, Dynamics::ode, {}};
    }
    static MFGIngredients ot_boltzmann() {
        return {"ot_bg", "two_sided_kl", "none", RunningCost::quadratic, Dynamics::ode, {}};
    }
    static MFGIngredients score_based(double a, double b, double sigma) {
        return {"sgm", "cross_entropy", "none", RunningCost::sgm, Dynamics::sde, {a, b, sigma}};
    }
    static MFGIngredients probability_flow(double a, double b, double sigma) {
        return {"probability_flow", "half_cross_entropy", "fisher_information", RunningCost::probability_flow,
                Dynamics::ode, {a, b, sigma}};
    }
};

namespace detail {

inline double drift_dot(const CostParams& c, const Vector& x, const Vector& p) {
    return c.a * x.dot(p) + c.b * p.sum();
}

inline double div_drift(const CostParams& c, Eigen::Index d) { return c.a * static_cast<double>(d); }

} // namespace detail

/// Closed-form Hamiltonian H(x, p) = sup_v [-p . (velocity of v) - L(x, v)].
inline double hamiltonian(const MFGIngredients& m, const Vector& x, const Vector& p) {
    if (x.size() != p.size()) throw ShapeError("x and p must have the same dimension");
    const auto& c = m.params;
    switch (m.running_cost) {
    case RunningCost::zero:
        if (!std::isfinite(c.bound))
            throw IllPosedHamiltonianError("L = 0 with an unbounded feasible set: the supremum is infinite");
        return c.bound * p.norm();
    case RunningCost::quadratic: return 0.5 * p.squaredNorm();
    case RunningCost::sgm:
        return -detail::drift_dot(c, x, p) + 0.5 * c.sigma * c.sigma * p.squaredNorm() + detail::div_drift(c, x.size());
    case RunningCost::probability_flow:
        return -detail::drift_dot(c, x, p) + 0.5 * c.sigma * c.sigma * p.squaredNorm() +
               0.5 * detail::div_drift(c, x.size());
    }
    return 0.0;
}

/// -p . (velocity of control v) - L(x, v) for one control value.
inline double legendre_objective(const MFGIngredients& m, const Vector& x, const Vector& p, const Vector& v) {
    const auto& c = m.params;
    switch (m.running_cost) {
    case RunningCost::zero: return -p.dot(v);
    case RunningCost::quadratic: return -p.dot(v) - 0.5 * v.squaredNorm();
    case RunningCost::sgm:
        return -(detail::drift_dot(c, x, p) + c.sigma * p.dot(v)) - 0.5 * v.squaredNorm() + detail::div_drift(c, x.size());
    case RunningCost::probability_flow:
        return -(detail::drift_dot(c, x, p) + c.sigma * p.dot(v)) - 0.5 * v.squaredNorm() +
               0.5 * detail::div_drift(c, x.size());
    }
    return 0.0;
}

struct LegendreGrid {
    double radius = 8.0;   ///< half-width of the control box when the feasible set is unbounded
    int points = 401;      ///< grid points per axis
    int boundary_points = 0; ///< extra samples on the sphere |v| = bound (2-D only); 0 picks a default
};

struct LegendreResult {
    double value = 0.0;
    double spacing = 0.0;
    bool attained_on_boundary = false;
};

namespace detail {

inline LegendreResult grid_sup(const MFGIngredients& m, const Vector& x, const Vector& p, double R, int points,
                               double ball, int boundary_points) {
    const auto d = x.size();
    LegendreResult r;
    r.value = -std::numeric_limits<double>::infinity();
    r.spacing = 2.0 * R / (points - 1);
    std::vector<int> idx(static_cast<std::size_t>(d), 0);
    Vector v(d);
    Vector best = Vector::Zero(d);
    while (true) {
        for (Eigen::Index i = 0; i < d; ++i) v(i) = -R + r.spacing * idx[static_cast<std::size_t>(i)];
        if (v.norm() <= ball) {
            const double val = legendre_objective(m, x, p, v);
            if (val > r.value) {
                r.value = val;
                best = v;
            }
        }
        Eigen::Index k = 0;
        while (k < d && ++idx[static_cast<std::size_t>(k)] == points) idx[static_cast<std::size_t>(k++)] = 0;
        if (k == d) break;
    }
    if (std::isfinite(ball) && d == 2) {
        for (int q = 0; q < boundary_points; ++q) {
            const double th = 2.0 * std::numbers::pi * q / boundary_points;
            v << ball * std::cos(th), ball * std::sin(th);
            const double val = legendre_objective(m, x, p, v);
            if (val > r.value) {
                r.value = val;
                best = v;
            }
        }
    }
    const double edge = std::isfinite(ball) ? ball - r.spacing : R - r.spacing;
    r.attained_on_boundary = std::isfinite(ball) ? best.norm() > edge : best.lpNorm<Eigen::Infinity>() > edge;
    return r;
}

} // namespace detail

/// Grid maximum of -p . (velocity of v) - L(x, v) over the feasible controls.
///
/// For an unbounded feasible set the search box is doubled once; if the maximum sits on the box
/// boundary and keeps growing the supremum is declared infinite.
inline LegendreResult legendre_sup(const MFGIngredients& m, const Vector& x, const Vector& p,
                                   const LegendreGrid& grid = {}) {
    if (x.size() != p.size()) throw ShapeError("x and p must have the same dimension");
    if (grid.points < 3) throw ConfigError("Legendre grid needs at least 3 points per axis");
    const double bound = m.params.bound;
    const bool bounded = m.running_cost == RunningCost::zero && std::isfinite(bound);
    if (bounded) {
        const int bp = grid.boundary_points > 0 ? grid.boundary_points : 20000;
        return detail::grid_sup(m, x, p, bound, grid.points, bound, bp);
    }
    const double inf = std::numeric_limits<double>::infinity();
    const auto small = detail::grid_sup(m, x, p, grid.radius, grid.points, inf, 0);
    if (small.attained_on_boundary) {
        const auto large = detail::grid_sup(m, x, p, 2.0 * grid.radius, grid.points, inf, 0);
        if (large.attained_on_boundary && large.value > small.value + 1e-9 * std::max(1.0, std::abs(small.value)))
            throw IllPosedHamiltonianError("grid supremum of the Legendre transform grows with the search box (" +
                                           to_string(m.running_cost) + " running cost)");
    }
    return small;
}

} // namespace mfgen
