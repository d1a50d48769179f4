#pragma once

#include "mfgen/error.hpp"
#include "mfgen/targets.hpp"
#include "mfgen/types.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace mfgen {

struct SampleMoments {
    Vector mean;
    Matrix cov; ///< unbiased sample covariance
};

inline SampleMoments sample_moments(const RowMatrix& x) {
    if (x.rows() < 2) throw DomainError("moments need at least 2 samples");
    SampleMoments m;
    m.mean = x.colwise().mean().transpose();
    const RowMatrix c = x.rowwise() - m.mean.transpose();
    m.cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    return m;
}

namespace detail {

inline void check_two_samples(const RowMatrix& X, const RowMatrix& Y) {
    if (X.rows() < 2 || Y.rows() < 2) throw DomainError("two-sample statistics need at least 2 points per sample");
    if (X.cols() != Y.cols()) throw ShapeError("samples have different dimensions");
}

template <class K>
double pair_sum(const RowMatrix& A, const RowMatrix& B, bool skip_diagonal, K&& k) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        double row = 0.0;
        for (Eigen::Index j = 0; j < B.rows(); ++j) {
            if (skip_diagonal && i == j) continue;
            row += k((A.row(i) - B.row(j)).squaredNorm());
        }
        total += row;
    }
    return total;
}

} // namespace detail

/// Unbiased MMD^2 U-statistic with kernel exp(-|a - b|^2 / (2 h^2)).
inline double mmd_squared(const RowMatrix& X, const RowMatrix& Y, double bandwidth) {
    detail::check_two_samples(X, Y);
    if (!(bandwidth > 0.0)) throw DomainError("MMD bandwidth must be positive");
    const double c = -0.5 / (bandwidth * bandwidth);
    auto k = [c](double r2) { return std::exp(c * r2); };
    const double n = static_cast<double>(X.rows()), m = static_cast<double>(Y.rows());
    return detail::pair_sum(X, X, true, k) / (n * (n - 1)) + detail::pair_sum(Y, Y, true, k) / (m * (m - 1)) -
           2.0 * detail::pair_sum(X, Y, false, k) / (n * m);
}

/// Biased (V-statistic) MMD^2, always nonnegative.
inline double mmd_squared_biased(const RowMatrix& X, const RowMatrix& Y, double bandwidth) {
    detail::check_two_samples(X, Y);
    const double c = -0.5 / (bandwidth * bandwidth);
    auto k = [c](double r2) { return std::exp(c * r2); };
    const double n = static_cast<double>(X.rows()), m = static_cast<double>(Y.rows());
    return detail::pair_sum(X, X, false, k) / (n * n) + detail::pair_sum(Y, Y, false, k) / (m * m) -
           2.0 * detail::pair_sum(X, Y, false, k) / (n * m);
}

/// Median pairwise distance of the pooled sample, using at most `max_points` evenly strided points.
inline double median_heuristic(const RowMatrix& X, const RowMatrix& Y, Eigen::Index max_points = 1000) {
    detail::check_two_samples(X, Y);
    RowMatrix pooled(X.rows() + Y.rows(), X.cols());
    pooled << X, Y;
    const Eigen::Index total = pooled.rows();
    const Eigen::Index k = std::min(total, max_points);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(k));
    for (Eigen::Index q = 0; q < k; ++q) idx[static_cast<std::size_t>(q)] = q * total / k;
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(k * (k - 1) / 2));
    for (Eigen::Index a = 0; a < k; ++a)
        for (Eigen::Index b = a + 1; b < k; ++b)
            d.push_back((pooled.row(idx[static_cast<std::size_t>(a)]) - pooled.row(idx[static_cast<std::size_t>(b)])).norm());
    auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    if (!(*mid > 0.0)) throw DomainError("median pairwise distance is zero");
    return *mid;
}

/// Energy distance 2 E|X - Y| - E|X - X'| - E|Y - Y'| between the empirical measures (>= 0).
inline double energy_distance(const RowMatrix& X, const RowMatrix& Y) {
    detail::check_two_samples(X, Y);
    auto k = [](double r2) { return std::sqrt(r2); };
    const double n = static_cast<double>(X.rows()), m = static_cast<double>(Y.rows());
    const double e = 2.0 * detail::pair_sum(X, Y, false, k) / (n * m) - detail::pair_sum(X, X, false, k) / (n * n) -
                     detail::pair_sum(Y, Y, false, k) / (m * m);
    return std::max(e, 0.0);
}

/// Fraction of points strictly inside the checkerboard's support cells.
inline double support_overlap(const RowMatrix& X, const TargetDistribution& target) {
    if (target.kind() != TargetKind::checkerboard) throw UnsupportedError("support overlap needs a checkerboard target");
    if (X.rows() < 1) throw DomainError("empty sample");
    if (X.cols() != 2) throw ShapeError("checkerboard points are 2-D");
    Eigen::Index inside = 0;
    for (Eigen::Index r = 0; r < X.rows(); ++r) inside += target.in_support(X.row(r).transpose()) ? 1 : 0;
    return static_cast<double>(inside) / static_cast<double>(X.rows());
}

struct MomentErrors {
    Vector mean_error;      ///< |sample mean - target mean| per coordinate
    double cov_frobenius = 0.0;
    double cov_max_abs = 0.0;
};

inline MomentErrors moment_report(const RowMatrix& X, const TargetDistribution& target) {
    if (X.cols() != target.dim()) throw ShapeError("sample dimension does not match the target");
    const auto m = sample_moments(X);
    const Matrix dc = m.cov - target.covariance();
    return {(m.mean - target.mean()).cwiseAbs(), dc.norm(), dc.cwiseAbs().maxCoeff()};
}

struct MetricReport {
    double mmd2 = 0.0;
    double bandwidth = 0.0;
    double energy = 0.0;
    Eigen::Index n_generated = 0, n_reference = 0;
    std::optional<MomentErrors> moments;
    std::optional<double> overlap;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["mmd2"] = mmd2;
        j["mmd_bandwidth"] = bandwidth;
        j["energy_distance"] = energy;
        j["n_generated"] = n_generated;
        j["n_reference"] = n_reference;
        if (moments) {
            j["mean_error"] = std::vector<double>(moments->mean_error.data(),
                                                  moments->mean_error.data() + moments->mean_error.size());
            j["cov_frobenius_error"] = moments->cov_frobenius;
            j["cov_max_abs_error"] = moments->cov_max_abs;
        }
        if (overlap) j["support_overlap"] = *overlap;
        return j;
    }
};

/// Two-sample report of generated points X against reference points Y. Moment errors and support
/// overlap are added when a target is given (overlap only for the checkerboard).
inline MetricReport metric_report(const RowMatrix& X, const RowMatrix& Y, const TargetDistribution* target = nullptr,
                                  std::optional<double> bandwidth = std::nullopt) {
    MetricReport r;
    r.bandwidth = bandwidth ? *bandwidth : median_heuristic(X, Y);
    r.mmd2 = mmd_squared(X, Y, r.bandwidth);
    r.energy = energy_distance(X, Y);
    r.n_generated = X.rows();
    r.n_reference = Y.rows();
    if (target) {
        r.moments = moment_report(X, *target);
        if (target->kind() == TargetKind::checkerboard) r.overlap = support_overlap(X, *target);
    }
    return r;
}

} // namespace mfgen
