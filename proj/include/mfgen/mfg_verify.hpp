#pragma once

#include "mfgen/dynamics.hpp"
#include "mfgen/error.hpp"
#include "mfgen/types.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

namespace mfgen {

/// Values on a uniform space-time grid; row m is time t0 + m tau, column j is x0 + j h.
struct GridField1D {
    double x0 = -8.0, h = 0.02;
    double t0 = 0.0, tau = 0.001;
    RowMatrix values;
    bool is_density = false;

    Eigen::Index nx() const noexcept { return values.cols(); }
    Eigen::Index nt() const noexcept { return values.rows(); }
    double x(Eigen::Index j) const noexcept { return x0 + h * static_cast<double>(j); }
    double t(Eigen::Index m) const noexcept { return t0 + tau * static_cast<double>(m); }

    void validate() const {
        if (!(h > 0.0) || !(tau > 0.0)) throw ShapeError("grid spacings must be positive");
        if (nx() < 3 || nt() < 1) throw ShapeError("grid needs at least 3 space points and 1 time level");
        if (!values.allFinite()) throw DomainError("grid values must be finite");
    }
};

/// Uniform space-time grid of [lo, hi] x [0, T] with nx x nt points.
struct Grid1D {
    double lo = -8.0, hi = 8.0, T = 3.0;
    Eigen::Index nx = 801, nt = 3001;

    double h() const { return (hi - lo) / static_cast<double>(nx - 1); }
    double tau() const { return nt > 1 ? T / static_cast<double>(nt - 1) : 1.0; }
    void validate() const {
        if (!(hi > lo)) throw ConfigError("grid bounds must satisfy lo < hi");
        if (nx < 3) throw ConfigError("grid needs at least 3 space points");
        if (nt < 1) throw ConfigError("grid needs at least 1 time level");
        if (!(T >= 0.0) || (nt > 1 && !(T > 0.0))) throw ConfigError("grid horizon must be positive");
    }
    Vector nodes() const { return Vector::LinSpaced(nx, lo, hi); }
};

/// Trapezoid rule on a uniform grid.
inline double trapezoid(const Eigen::Ref<const Vector>& v, double h) {
    if (v.size() < 2) return 0.0;
    return h * (v.sum() - 0.5 * (v[0] + v[v.size() - 1]));
}

namespace detail {

/// Solves the tridiagonal system with sub-diagonal a, diagonal b, super-diagonal c (Thomas algorithm).
inline void thomas(const Vector& a, Vector b, const Vector& c, Vector& rhs) {
    const Eigen::Index n = b.size();
    for (Eigen::Index i = 1; i < n; ++i) {
        const double w = a[i] / b[i - 1];
        b[i] -= w * c[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    rhs[n - 1] /= b[n - 1];
    for (Eigen::Index i = n - 2; i >= 0; --i) rhs[i] = (rhs[i] - c[i] * rhs[i + 1]) / b[i];
}

/// Applies the conservative operator (L rho)_j for d rho/dt = d/dx (c rho + D d rho/dx) on nodes with
/// half cells at the ends and zero flux through the boundary. `c` holds the nx - 1 interface values.
struct FluxOperator {
    Vector lower, diag, upper; // row j: lower[j] rho_{j-1} + diag[j] rho_j + upper[j] rho_{j+1}

    FluxOperator(const Vector& c, double D, double h) {
        const Eigen::Index n = c.size() + 1;
        lower = Vector::Zero(n);
        diag = Vector::Zero(n);
        upper = Vector::Zero(n);
        // interface k between nodes k and k+1: F = c_k (rho_k + rho_{k+1}) / 2 + D (rho_{k+1} - rho_k) / h
        for (Eigen::Index k = 0; k + 1 < n; ++k) {
            const double wl = 0.5 * c[k] - D / h, wr = 0.5 * c[k] + D / h;
            const double vl = k == 0 ? 2.0 / h : 1.0 / h;         // node k receives +F / width_k
            const double vr = k + 2 == n ? 2.0 / h : 1.0 / h;     // node k+1 receives -F / width_{k+1}
            diag[k] += vl * wl;
            upper[k] += vl * wr;
            lower[k + 1] -= vr * wl;
            diag[k + 1] -= vr * wr;
        }
    }

    Vector apply(const Vector& r) const {
        const Eigen::Index n = r.size();
        Vector out = diag.cwiseProduct(r);
        out.head(n - 1) += upper.head(n - 1).cwiseProduct(r.tail(n - 1));
        out.tail(n - 1) += lower.tail(n - 1).cwiseProduct(r.head(n - 1));
        return out;
    }
};

/// Crank-Nicolson march of d rho/dt = d/dx (c(x, t) rho + D d rho/dx); velocity(m) returns interface values at level m.
inline RowMatrix crank_nicolson(const Vector& rho0, double h, double tau, Eigen::Index nt, double D,
                                const std::function<Vector(Eigen::Index)>& velocity) {
    const Eigen::Index n = rho0.size();
    RowMatrix out(nt, n);
    out.row(0) = rho0.transpose();
    if (nt == 1) return out;
    FluxOperator cur(velocity(0), D, h);
    Vector r = rho0;
    for (Eigen::Index m = 1; m < nt; ++m) {
        FluxOperator next(velocity(m), D, h);
        Vector rhs = r + 0.5 * tau * cur.apply(r);
        const Vector a = -0.5 * tau * next.lower, c = -0.5 * tau * next.upper;
        const Vector b = Vector::Ones(n) - 0.5 * tau * next.diag;
        thomas(a, b, c, rhs);
        if (rhs.minCoeff() < -1e-6)
            throw GridResolutionError("negative density " + std::to_string(rhs.minCoeff()) + " at step " +
                                      std::to_string(m) + "; refine the grid");
        if (!rhs.allFinite()) throw GridResolutionError("non-finite density at step " + std::to_string(m));
        r = rhs;
        out.row(m) = r.transpose();
        cur = std::move(next);
    }
    return out;
}

inline void check_initial_density(const Vector& rho0, double h, Eigen::Index nx) {
    if (rho0.size() != nx) throw ShapeError("initial density does not match the grid");
    if (rho0.minCoeff() < 0.0) throw DomainError("initial density must be nonnegative");
    if (std::abs(trapezoid(rho0, h) - 1.0) > 1e-6) throw DomainError("initial density must have unit mass");
}

} // namespace detail

/// Crank-Nicolson solution of d eta/ds = d/dx (f eta) + sigma^2/2 d^2 eta/dx^2 with no-flux boundaries.
inline GridField1D fp_solve_1d(const SDESpec& spec, const Vector& eta0, const Grid1D& grid) {
    grid.validate();
    if (spec.d != 1) throw ShapeError("fp_solve_1d needs a 1-D SDE");
    if (!(spec.sigma > 0.0)) throw ConfigError("sde.sigma must be positive");
    const double h = grid.h();
    detail::check_initial_density(eta0, h, grid.nx);
    Vector c(grid.nx - 1);
    for (Eigen::Index k = 0; k + 1 < grid.nx; ++k) c[k] = spec.drift(grid.lo + h * (k + 0.5));
    GridField1D out;
    out.x0 = grid.lo;
    out.h = h;
    out.tau = grid.tau();
    out.is_density = true;
    out.values = detail::crank_nicolson(eta0, h, out.tau, grid.nt, 0.5 * spec.sigma * spec.sigma,
                                        [&](Eigen::Index) -> Vector { return c; });
    return out;
}

/// Gaussian N(m, v) density on the grid nodes.
inline Vector gaussian_on_grid(const Grid1D& grid, double m, double v) {
    const Vector x = grid.nodes();
    return ((-(x.array() - m).square() / (2.0 * v)).exp() / std::sqrt(2.0 * std::numbers::pi * v)).matrix();
}

/// Closed-form noised law eta(., s) for eta(., 0) = N(m0, v0) on the whole grid.
inline GridField1D analytic_ou_field(const SDESpec& spec, double m0, double v0, const Grid1D& grid) {
    grid.validate();
    GridField1D out;
    out.x0 = grid.lo;
    out.h = grid.h();
    out.tau = grid.tau();
    out.is_density = true;
    out.values.resize(grid.nt, grid.nx);
    for (Eigen::Index m = 0; m < grid.nt; ++m) {
        const double s = out.t(m), k = spec.mean_scale(s);
        out.values.row(m) = gaussian_on_grid(grid, m0 * k + spec.mean_shift(s), v0 * k * k + spec.noise_variance(s)).transpose();
    }
    return out;
}

/// L1 distance of two grid functions (trapezoid).
inline double l1_distance(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b, double h) {
    return trapezoid((a - b).cwiseAbs(), h);
}

struct HJBResidual {
    RowMatrix field;          ///< |residual| on evaluated nodes, 0 elsewhere; rows indexed by t
    double max_abs = 0.0;
    Eigen::Index evaluated = 0;
};

/// Residual of -dU/dt - f dU/dx + sigma^2/2 (dU/dx)^2 + df/dx - sigma^2/2 d^2U/dx^2 for U(x, t) = -log eta(x, T - t),
/// on interior nodes whose stencil has eta > floor. Throws DomainError if eta <= 0 on a stencil above the floor band.
inline HJBResidual hjb_residual_1d(const GridField1D& eta, const SDESpec& spec, double floor = 1e-12) {
    eta.validate();
    const Eigen::Index nt = eta.nt(), nx = eta.nx();
    if (nt < 3) throw ShapeError("HJB residual needs at least 3 time levels");
    const double s2 = spec.sigma * spec.sigma, h = eta.h, tau = eta.tau, fx = spec.a;
    HJBResidual r;
    r.field = RowMatrix::Zero(nt, nx);
    auto U = [&](Eigen::Index m, Eigen::Index j) { return -std::log(eta.values(nt - 1 - m, j)); };
    for (Eigen::Index m = 1; m + 1 < nt; ++m) {
        for (Eigen::Index j = 1; j + 1 < nx; ++j) {
            bool ok = true;
            for (Eigen::Index dm = -1; dm <= 1 && ok; ++dm)
                for (Eigen::Index dj = -1; dj <= 1; ++dj)
                    if (!(eta.values(nt - 1 - m - dm, j + dj) > floor)) ok = false;
            if (!ok) continue;
            const double ut = (U(m + 1, j) - U(m - 1, j)) / (2.0 * tau);
            const double ux = (U(m, j + 1) - U(m, j - 1)) / (2.0 * h);
            const double uxx = (U(m, j + 1) - 2.0 * U(m, j) + U(m, j - 1)) / (h * h);
            const double res = -ut - spec.drift(eta.x(j)) * ux + 0.5 * s2 * ux * ux + fx - 0.5 * s2 * uxx;
            r.field(m, j) = std::abs(res);
            r.max_abs = std::max(r.max_abs, std::abs(res));
            ++r.evaluated;
        }
    }
    if (r.evaluated == 0) throw DomainError("no grid node has a positive density stencil");
    return r;
}

/// Solves the controlled Fokker-Planck equation with drift f + sigma^2 d/dx log eta(., T - t) from rho(., 0) = eta(., T)
/// and returns max_t of the L1 distance between rho(., t) and eta(., T - t).
inline double duality_check_1d(const GridField1D& eta, const SDESpec& spec, double floor = 1e-300) {
    eta.validate();
    const Eigen::Index nt = eta.nt(), nx = eta.nx();
    const double s2 = spec.sigma * spec.sigma, h = eta.h;
    auto velocity = [&](Eigen::Index m) -> Vector {
        const auto row = eta.values.row(nt - 1 - m);
        Vector c(nx - 1);
        for (Eigen::Index k = 0; k + 1 < nx; ++k) {
            const double a = row(k), b = row(k + 1);
            const double dlog = a > floor && b > floor ? (std::log(b) - std::log(a)) / h : 0.0;
            c[k] = -(spec.drift(eta.x0 + h * (k + 0.5)) + s2 * dlog);
        }
        return c;
    };
    const Vector rho0 = eta.values.row(nt - 1).transpose();
    const RowMatrix rho = detail::crank_nicolson(rho0, h, eta.tau, nt, 0.5 * s2, velocity);
    double worst = 0.0;
    for (Eigen::Index m = 0; m < nt; ++m)
        worst = std::max(worst, l1_distance(rho.row(m).transpose(), eta.values.row(nt - 1 - m).transpose(), h));
    return worst;
}

enum class Functional { kl, cross_entropy, fisher };

inline Functional parse_functional(const std::string& s) {
    if (s == "kl") return Functional::kl;
    if (s == "cross_entropy") return Functional::cross_entropy;
    if (s == "fisher") return Functional::fisher;
    throw ConfigError("unknown functional '" + s + "' (expected kl, cross_entropy or fisher)");
}

inline std::string to_string(Functional f) {
    switch (f) {
    case Functional::kl: return "kl";
    case Functional::cross_entropy: return "cross_entropy";
    case Functional::fisher: return "fisher";
    }
    return "unknown";
}

struct VariationalCheck {
    double directional = 0.0;   ///< Richardson-extrapolated central difference of F along chi
    double inner_product = 0.0; ///< quadrature of (dF/drho) chi
    double rel_error = 0.0;
};

/// Functional inputs: `ref` is rho_ref for KL and pi for cross-entropy; sigma scales the Fisher information.
struct FunctionalSpec {
    Functional kind = Functional::kl;
    Vector ref;
    double sigma = 1.0;
};

namespace detail {

inline double functional_value(const FunctionalSpec& f, const Vector& rho, double h) {
    const Eigen::Index n = rho.size();
    switch (f.kind) {
    case Functional::kl: return trapezoid((rho.array() * (rho.array() / f.ref.array()).log()).matrix(), h);
    case Functional::cross_entropy: return -trapezoid((rho.array() * f.ref.array().log()).matrix(), h);
    case Functional::fisher: {
        double s = 0.0;
        for (Eigen::Index k = 0; k + 1 < n; ++k) {
            const double g = (rho[k + 1] - rho[k]) / h;
            s += h * g * g / (0.5 * (rho[k] + rho[k + 1]));
        }
        return f.sigma * f.sigma / 8.0 * s;
    }
    }
    return 0.0;
}

inline Vector functional_gradient(const FunctionalSpec& f, const Vector& rho, double h) {
    const Eigen::Index n = rho.size();
    switch (f.kind) {
    case Functional::kl: return (1.0 + (rho.array() / f.ref.array()).log()).matrix();
    case Functional::cross_entropy: return -f.ref.array().log().matrix();
    case Functional::fisher: {
        Vector g = Vector::Zero(n);
        const double s2 = f.sigma * f.sigma;
        for (Eigen::Index j = 1; j + 1 < n; ++j) {
            const double d1 = (rho[j + 1] - rho[j - 1]) / (2.0 * h);
            const double d2 = (rho[j + 1] - 2.0 * rho[j] + rho[j - 1]) / (h * h);
            g[j] = -s2 / 4.0 * d2 / rho[j] + s2 / 8.0 * d1 * d1 / (rho[j] * rho[j]);
        }
        return g;
    }
    }
    return {};
}

} // namespace detail

/// Compares the central difference (F(rho + eps chi) - F(rho - eps chi)) / (2 eps), Richardson-extrapolated
/// with eps / 2, against the quadrature of (dF/drho) chi.
inline VariationalCheck variational_derivative_check(const FunctionalSpec& f, const Vector& rho, const Vector& chi,
                                                     double h, double eps) {
    if (rho.size() != chi.size()) throw ShapeError("rho and chi must share the grid");
    if (f.kind != Functional::fisher && f.ref.size() != rho.size()) throw ShapeError("reference density must share the grid");
    if (!(eps > 0.0)) throw DomainError("perturbation size must be positive");
    if (!(rho.minCoeff() > 0.0) || !((rho - eps * chi.cwiseAbs()).minCoeff() > 0.0))
        throw DomainError("rho and rho +- eps chi must stay positive");
    if (f.kind != Functional::fisher && !(f.ref.minCoeff() > 0.0)) throw DomainError("reference density must be positive");
    auto central = [&](double e) {
        return (detail::functional_value(f, rho + e * chi, h) - detail::functional_value(f, rho - e * chi, h)) / (2.0 * e);
    };
    VariationalCheck c;
    c.directional = (4.0 * central(0.5 * eps) - central(eps)) / 3.0;
    c.inner_product = trapezoid(detail::functional_gradient(f, rho, h).cwiseProduct(chi), h);
    c.rel_error = std::abs(c.directional - c.inner_product) / std::max(std::abs(c.inner_product), 1e-300);
    return c;
}

struct CheckResult {
    std::string name;
    double measured = 0.0;
    double tolerance = 0.0;
    std::string comparison; ///< "<=" or ">="
    bool passed = false;
};

struct VerificationReport {
    std::vector<CheckResult> checks;
    nlohmann::json details = nlohmann::json::object();

    void add(std::string name, double measured, double tolerance, bool upper = true) {
        const bool ok = std::isfinite(measured) && (upper ? measured <= tolerance : measured >= tolerance);
        checks.push_back({std::move(name), measured, tolerance, upper ? "<=" : ">=", ok});
    }
    bool all_passed() const {
        return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
    }
    nlohmann::json to_json() const {
        nlohmann::json j;
        j["passed"] = all_passed();
        for (const auto& c : checks)
            j["checks"].push_back({{"name", c.name}, {"measured", c.measured}, {"tolerance", c.tolerance},
                                   {"comparison", c.comparison}, {"passed", c.passed}});
        j["details"] = details;
        return j;
    }
};

/// Settings of the verification suite. Level k of a refinement study uses (nx - 1) 2^k + 1 space and
/// (nt - 1) 2^k + 1 time points; the finest level equals (nx, nt).
struct VerifyConfig {
    SDESpec spec{0.5, 0.0, 1.0, 3.0, 1};
    double init_mean = 0.0;
    double init_var = 0.25;
    Grid1D grid{-8.0, 8.0, 3.0, 801, 3001};
    int levels = 3;
    double small_sigma = 0.1;
    Grid1D small_sigma_grid{-3.0, 3.0, 3.0, 2401, 3001};
    double hjb_floor = 1e-12;
    Eigen::Index variational_points = 2000;
    double eps = 1e-4;
    double fp_order_min = 1.8;
    double hjb_ratio_min = 1.8;
    double kl_tol = 1e-4, cross_entropy_tol = 1e-8, fisher_tol = 1e-3;

    void validate() const {
        spec.validate();
        grid.validate();
        small_sigma_grid.validate();
        if (spec.d != 1) throw ConfigError("verification runs in 1-D");
        if (levels < 2) throw ConfigError("verify.levels must be at least 2");
        if (!(init_var > 0.0)) throw ConfigError("verify.init_var must be positive");
        if (!(small_sigma > 0.0)) throw ConfigError("verify.small_sigma must be positive");
        for (const auto& g : {grid, small_sigma_grid})
            if ((g.nx - 1) % (1 << (levels - 1)) != 0 || (g.nt - 1) % (1 << (levels - 1)) != 0)
                throw ConfigError("grid sizes minus one must be divisible by 2^(levels - 1)");
    }
};

/// Grid of refinement level k counted from the coarsest (0) to the finest (levels - 1).
inline Grid1D refinement_level(const Grid1D& finest, int levels, int k) {
    Grid1D g = finest;
    const Eigen::Index div = Eigen::Index(1) << (levels - 1 - k);
    g.nx = (finest.nx - 1) / div + 1;
    g.nt = (finest.nt - 1) / div + 1;
    return g;
}

inline std::vector<double> observed_orders(const std::vector<double>& errors) {
    std::vector<double> p;
    for (std::size_t k = 1; k < errors.size(); ++k) p.push_back(std::log2(errors[k - 1] / errors[k]));
    return p;
}

inline double min_of(const std::vector<double>& v) { return *std::min_element(v.begin(), v.end()); }

/// Runs the full 1-D verification suite.
inline VerificationReport verify_suite(const VerifyConfig& cfg) {
    cfg.validate();
    VerificationReport rep;
    const SDESpec& sp = cfg.spec;
    auto study = [&](const std::string& name, const SDESpec& s, const Grid1D& finest, auto&& error_of) {
        std::vector<double> errs;
        for (int k = 0; k < cfg.levels; ++k) errs.push_back(error_of(s, refinement_level(finest, cfg.levels, k)));
        rep.details[name] = {{"errors", errs}, {"orders", observed_orders(errs)}};
        return errs;
    };

    // Fokker-Planck solve vs the closed-form noised Gaussian at the final time
    double worst_mass = 0.0;
    const auto fp_err = study("fp_l1", sp, cfg.grid, [&](const SDESpec& s, const Grid1D& g) {
        const auto eta = fp_solve_1d(s, gaussian_on_grid(g, cfg.init_mean, cfg.init_var), g);
        const auto exact = analytic_ou_field(s, cfg.init_mean, cfg.init_var, g);
        double worst = 0.0;
        for (Eigen::Index m = 0; m < eta.nt(); ++m) {
            worst = std::max(worst, l1_distance(eta.values.row(m).transpose(), exact.values.row(m).transpose(), eta.h));
            worst_mass = std::max(worst_mass, std::abs(trapezoid(eta.values.row(m).transpose(), eta.h) - 1.0));
        }
        return worst;
    });
    rep.add("fp_l1_order", min_of(observed_orders(fp_err)), cfg.fp_order_min, false);
    rep.add("fp_l1_finest", fp_err.back(), 1e-3);
    rep.add("fp_mass_conservation", worst_mass, 1e-8);

    // HJB residual of U = -log eta for the analytic field and for the solved field
    const auto hjb_exact = study("hjb_residual_analytic", sp, cfg.grid, [&](const SDESpec& s, const Grid1D& g) {
        return hjb_residual_1d(analytic_ou_field(s, cfg.init_mean, cfg.init_var, g), s, cfg.hjb_floor).max_abs;
    });
    rep.add("hjb_analytic_min_ratio", std::exp2(min_of(observed_orders(hjb_exact))), cfg.hjb_ratio_min, false);
    const auto hjb_fp = study("hjb_residual_fp", sp, cfg.grid, [&](const SDESpec& s, const Grid1D& g) {
        return hjb_residual_1d(fp_solve_1d(s, gaussian_on_grid(g, cfg.init_mean, cfg.init_var), g), s, cfg.hjb_floor).max_abs;
    });
    rep.add("hjb_fp_min_order", min_of(observed_orders(hjb_fp)), 1.0, false);

    // controlled Fokker-Planck with the optimal drift reproduces the reversed law
    auto duality = [&](const SDESpec& s, const Grid1D& g) {
        return duality_check_1d(analytic_ou_field(s, cfg.init_mean, cfg.init_var, g), s);
    };
    const auto dual = study("duality", sp, cfg.grid, duality);
    rep.add("duality_min_order", min_of(observed_orders(dual)), 1.0, false);
    SDESpec small = sp;
    small.sigma = cfg.small_sigma;
    const auto dual_small = study("duality_small_sigma", small, cfg.small_sigma_grid, duality);
    rep.add("duality_small_sigma_min_order", min_of(observed_orders(dual_small)), 1.0, false);

    // variational derivatives on a fine grid
    Grid1D vg = cfg.grid;
    vg.nx = cfg.variational_points;
    const double h = vg.h();
    const Vector x = vg.nodes();
    const Vector rho = gaussian_on_grid(vg, 0.0, 1.0);
    const Vector chi = ((x.array().square() - 1.0) * rho.array()).matrix() * 0.5;
    auto var_check = [&](Functional k, const Vector& ref, double tol) {
        const auto c = variational_derivative_check({k, ref, sp.sigma}, rho, chi, h, cfg.eps);
        rep.details["variational_" + to_string(k)] = {{"directional", c.directional}, {"inner_product", c.inner_product}};
        rep.add("variational_" + to_string(k) + "_rel_error", c.rel_error, tol);
    };
    var_check(Functional::kl, gaussian_on_grid(vg, 0.5, 1.5), cfg.kl_tol);
    var_check(Functional::cross_entropy, gaussian_on_grid(vg, -0.3, 2.0), cfg.cross_entropy_tol);
    var_check(Functional::fisher, Vector(), cfg.fisher_tol);
    return rep;
}

} // namespace mfgen
