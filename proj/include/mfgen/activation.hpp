#pragma once

#include "mfgen/error.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>

namespace mfgen {

/// Hidden-layer nonlinearity. GeLU uses the exact normal CDF, not the tanh approximation.
enum class Activation { gelu, tanh, relu };

inline std::string_view to_string(Activation a) {
    switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    }
    return "unknown";
}

inline Activation parse_activation(std::string_view name) {
    if (name == "gelu" || name == "GeLU" || name == "GELU") return Activation::gelu;
    if (name == "tanh") return Activation::tanh;
    if (name == "relu") return Activation::relu;
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

/// Whether the activation has a continuous second derivative.
constexpr bool is_twice_differentiable(Activation a) noexcept { return a != Activation::relu; }

/// Value and first three derivatives of an activation at one point.
struct ActivationDerivs {
    double f, d1, d2, d3;
};

inline ActivationDerivs activation_derivs(Activation a, double z) noexcept {
    switch (a) {
    case Activation::gelu: {
        const double pdf = std::exp(-0.5 * z * z) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
        const double cdf = 0.5 * std::erfc(-z * (0.5 * std::numbers::sqrt2));
        return {z * cdf, cdf + z * pdf, pdf * (2.0 - z * z), pdf * z * (z * z - 4.0)};
    }
    case Activation::tanh: {
        const double t = std::tanh(z);
        const double s = 1.0 - t * t;
        return {t, s, -2.0 * t * s, s * (6.0 * t * t - 2.0)};
    }
    case Activation::relu:
        return {z > 0.0 ? z : 0.0, z > 0.0 ? 1.0 : 0.0, 0.0, 0.0};
    }
    return {0.0, 0.0, 0.0, 0.0};
}

inline double activation_value(Activation a, double z) noexcept {
    switch (a) {
    case Activation::gelu: return z * 0.5 * std::erfc(-z * (0.5 * std::numbers::sqrt2));
    case Activation::tanh: return std::tanh(z);
    case Activation::relu: return z > 0.0 ? z : 0.0;
    }
    return 0.0;
}

} // namespace mfgen
