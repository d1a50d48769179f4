#pragma once

#include "mfgen/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace testing_support {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Straight-line long-double evaluation of an MLP, independent of the batched jet code.
inline std::vector<long double> ref_forward(const mfgen::MLPParams& net, const std::vector<long double>& x,
                                            long double t) {
    std::vector<long double> h(x);
    h.push_back(t);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& W = net.layers[l].weight;
        const auto& b = net.layers[l].bias;
        std::vector<long double> z(static_cast<std::size_t>(W.rows()));
        for (Eigen::Index r = 0; r < W.rows(); ++r) {
            long double acc = b(r);
            for (Eigen::Index c = 0; c < W.cols(); ++c) acc += static_cast<long double>(W(r, c)) * h[static_cast<std::size_t>(c)];
            z[static_cast<std::size_t>(r)] = acc;
        }
        if (l + 1 < net.layers.size()) {
            for (auto& v : z) {
                switch (net.activation) {
                case mfgen::Activation::gelu: v = v * 0.5L * std::erfc(-v / std::sqrt(2.0L)); break;
                case mfgen::Activation::tanh: v = std::tanh(v); break;
                case mfgen::Activation::relu: v = v > 0 ? v : 0; break;
                }
            }
        }
        h = std::move(z);
    }
    return h;
}

} // namespace testing_support
