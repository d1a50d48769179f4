#pragma once

#include "mfgen/error.hpp"
#include "mfgen/rng.hpp"
#include "mfgen/types.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace mfgen {

/// Result of a log-density query. Off-support points carry no usable value.
struct LogDensityValue {
    double value = 0.0;
    bool off_support = false;
    bool up_to_constant = false;

    /// The log-density; throws DomainError for the off-support sentinel instead of returning -inf.
    double get() const {
        if (off_support) throw DomainError("log-density is -infinity off the support");
        return value;
    }
};

enum class TargetKind { checkerboard, gaussian, gaussian_mixture };

inline std::string to_string(TargetKind k) {
    switch (k) {
    case TargetKind::checkerboard: return "checkerboard";
    case TargetKind::gaussian: return "gaussian";
    case TargetKind::gaussian_mixture: return "gaussian_mixture";
    }
    return "unknown";
}

/// Target law pi: checkerboard, Gaussian or Gaussian mixture.
///
/// The checkerboard is the uniform law on the 8 unit cells (i, j) of the 4x4 grid over [-2, 2]^2
/// with i + j even, where cell (i, j) is [-2 + i, -1 + i] x [-2 + j, -1 + j].
class TargetDistribution {
public:
    static TargetDistribution checkerboard() {
        TargetDistribution t;
        t.kind_ = TargetKind::checkerboard;
        t.dim_ = 2;
        return t;
    }

    static TargetDistribution gaussian(const Vector& mean, const Matrix& cov) {
        return mixture({1.0}, {mean}, {cov}, TargetKind::gaussian);
    }

    static TargetDistribution isotropic_gaussian(int d, double variance, double mean = 0.0) {
        return gaussian(Vector::Constant(d, mean), variance * Matrix::Identity(d, d));
    }

    static TargetDistribution gaussian_mixture(const std::vector<double>& weights, const std::vector<Vector>& means,
                                               const std::vector<Matrix>& covs) {
        return mixture(weights, means, covs, TargetKind::gaussian_mixture);
    }

    TargetKind kind() const noexcept { return kind_; }
    int dim() const noexcept { return dim_; }
    bool has_score() const noexcept { return kind_ != TargetKind::checkerboard; }
    const std::vector<double>& weights() const noexcept { return weights_; }
    const std::vector<Vector>& means() const noexcept { return means_; }
    const std::vector<Matrix>& covariances() const noexcept { return covs_; }

    /// i.i.d. draws; draw k uses counters addressed by (seed, k), so prefixes agree across n.
    ParticleEnsemble sample(Eigen::Index n, std::uint64_t seed) const {
        if (n < 1) throw DomainError("sample count must be at least 1");
        ParticleEnsemble e;
        e.states.resize(n, dim_);
        e.seed = seed;
        e.tag = "target:" + to_string(kind_);
        const std::uint64_t key = rng::derive(seed, {0x7461726765ULL});
        const auto stride = static_cast<std::uint64_t>(dim_ + 1);
        for (Eigen::Index r = 0; r < n; ++r) {
            const std::uint64_t base = static_cast<std::uint64_t>(r) * stride;
            if (kind_ == TargetKind::checkerboard) {
                const int cell = std::min(7, static_cast<int>(rng::counter_uniform(key, base) * 8.0));
                const int i = cell / 2;
                const int j = 2 * (cell % 2) + (i % 2);
                e.states(r, 0) = -2.0 + i + rng::counter_uniform(key, base + 1);
                e.states(r, 1) = -2.0 + j + rng::counter_uniform(key, base + 2);
                continue;
            }
            std::size_t comp = 0;
            if (weights_.size() > 1) {
                double u = rng::counter_uniform(key, base);
                while (comp + 1 < weights_.size() && u >= weights_[comp]) u -= weights_[comp++];
            }
            Vector z(dim_);
            for (int i = 0; i < dim_; ++i) z(i) = rng::counter_normal(key, base + 1 + static_cast<std::uint64_t>(i));
            e.states.row(r) = (means_[comp] + chol_[comp] * z).transpose();
        }
        return e;
    }

    /// Whether x lies strictly inside a checkerboard support cell.
    bool in_support(const Vector& x) const {
        if (kind_ != TargetKind::checkerboard) return x.allFinite();
        if (x.size() != 2) throw ShapeError("checkerboard points are 2-D");
        const double u = x(0) + 2.0, v = x(1) + 2.0;
        if (!(u > 0.0 && u < 4.0 && v > 0.0 && v < 4.0)) return false;
        const double fi = std::floor(u), fj = std::floor(v);
        if (u == fi || v == fj) return false;
        return (static_cast<int>(fi) + static_cast<int>(fj)) % 2 == 0;
    }

    LogDensityValue log_density(const Vector& x) const {
        check_point(x);
        if (kind_ == TargetKind::checkerboard) {
            if (!in_support(x)) return {0.0, true, true};
            return {-std::log(8.0), false, true};
        }
        double mx = -std::numeric_limits<double>::infinity();
        std::vector<double> terms(weights_.size());
        for (std::size_t k = 0; k < weights_.size(); ++k) {
            terms[k] = std::log(weights_[k]) + component_log_density(k, x);
            mx = std::max(mx, terms[k]);
        }
        double s = 0.0;
        for (double v : terms) s += std::exp(v - mx);
        return {mx + std::log(s), false, false};
    }

    /// Gradient of the log-density; unavailable for the discontinuous checkerboard.
    Vector score(const Vector& x) const {
        check_point(x);
        if (kind_ == TargetKind::checkerboard) throw UnsupportedError("checkerboard density has no score");
        if (weights_.size() == 1) return -prec_[0] * (x - means_[0]);
        std::vector<double> terms(weights_.size());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < weights_.size(); ++k) {
            terms[k] = std::log(weights_[k]) + component_log_density(k, x);
            mx = std::max(mx, terms[k]);
        }
        double total = 0.0;
        Vector g = Vector::Zero(dim_);
        for (std::size_t k = 0; k < weights_.size(); ++k) {
            const double r = std::exp(terms[k] - mx);
            total += r;
            g -= r * (prec_[k] * (x - means_[k]));
        }
        return g / total;
    }

    Vector mean() const {
        if (kind_ == TargetKind::checkerboard) return Vector::Zero(2);
        Vector m = Vector::Zero(dim_);
        for (std::size_t k = 0; k < weights_.size(); ++k) m += weights_[k] * means_[k];
        return m;
    }

    Matrix covariance() const {
        if (kind_ == TargetKind::checkerboard) {
            Matrix c(2, 2);
            c << 4.0 / 3.0, 0.25, 0.25, 4.0 / 3.0;
            return c;
        }
        const Vector m = mean();
        Matrix c = -m * m.transpose();
        for (std::size_t k = 0; k < weights_.size(); ++k)
            c += weights_[k] * (covs_[k] + means_[k] * means_[k].transpose());
        return c;
    }

private:
    static TargetDistribution mixture(const std::vector<double>& weights, const std::vector<Vector>& means,
                                      const std::vector<Matrix>& covs, TargetKind kind) {
        if (weights.empty() || weights.size() != means.size() || weights.size() != covs.size())
            throw ConfigError("mixture needs matching non-empty weights, means and covariances");
        double total = 0.0;
        for (double w : weights) {
            if (!(w > 0.0)) throw ConfigError("mixture weights must be positive");
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-12) throw ConfigError("mixture weights must sum to 1");
        TargetDistribution t;
        t.kind_ = kind;
        t.dim_ = static_cast<int>(means.front().size());
        if (t.dim_ < 1) throw ConfigError("target dimension must be at least 1");
        for (std::size_t k = 0; k < weights.size(); ++k) {
            const auto& S = covs[k];
            if (means[k].size() != t.dim_ || S.rows() != t.dim_ || S.cols() != t.dim_)
                throw ShapeError("mixture component dimensions disagree");
            if (!means[k].allFinite() || !S.allFinite()) throw ConfigError("target parameters must be finite");
            if (!S.isApprox(S.transpose(), 1e-12)) throw ConfigError("covariance must be symmetric");
            Eigen::LLT<Matrix> llt(S);
            if (llt.info() != Eigen::Success) throw ConfigError("covariance must be positive definite");
            const Matrix L = llt.matrixL();
            t.chol_.push_back(L);
            t.prec_.push_back(llt.solve(Matrix::Identity(t.dim_, t.dim_)));
            t.logdet_.push_back(2.0 * L.diagonal().array().log().sum());
        }
        t.weights_ = weights;
        t.means_ = means;
        t.covs_ = covs;
        return t;
    }

    double component_log_density(std::size_t k, const Vector& x) const {
        const Vector r = x - means_[k];
        return -0.5 * (r.dot(prec_[k] * r) + logdet_[k] + dim_ * std::log(2.0 * std::numbers::pi));
    }

    void check_point(const Vector& x) const {
        if (x.size() != dim_) throw ShapeError("point dimension does not match target");
        if (!x.allFinite()) throw DomainError("point must be finite");
    }

    TargetKind kind_ = TargetKind::gaussian;
    int dim_ = 0;
    std::vector<double> weights_;
    std::vector<Vector> means_;
    std::vector<Matrix> covs_, chol_, prec_;
    std::vector<double> logdet_;
};

} // namespace mfgen
