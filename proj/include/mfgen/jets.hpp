#pragma once

#include "mfgen/activation.hpp"
#include "mfgen/error.hpp"
#include "mfgen/mlp.hpp"
#include "mfgen/types.hpp"

#include <vector>

namespace mfgen {

/// Which derivatives of a field are requested at a batch of points.
///
/// `spatial` gives the Jacobian with respect to the state, `time` the partial with respect to the
/// time input and `laplacian` the per-component Laplacian (it implies `spatial`).
struct JetRequest {
    bool spatial = false;
    bool time = false;
    bool laplacian = false;

    static constexpr JetRequest value_only() { return {}; }
    static constexpr JetRequest first() { return {true, true, false}; }
    static constexpr JetRequest second() { return {true, true, true}; }
    static constexpr JetRequest divergence() { return {true, false, false}; }
};

/// Truncated Taylor propagation through an MLP for a batch of n points.
///
/// Columns are grouped in blocks of n: block 0 carries values, blocks 1..K first-order tangents
/// along the input seeds, and the remaining blocks the diagonal second-order terms
/// d^2/de^2 along selected seeds. Second-order inputs are zero, so only the curvature of the
/// network contributes.
struct JetCache {
    int n = 0;
    int first_count = 0;
    std::vector<int> second_dirs; ///< seed index of each second-order block
    bool keep_for_backward = false;
    std::vector<Matrix> inputs;   ///< input to each layer, in_l x (n * blocks)
    std::vector<Matrix> pre;      ///< pre-activation of each hidden layer
    std::vector<Matrix> d1, d2;   ///< activation derivatives at the value block of each hidden layer
    Matrix output;                ///< d_out x (n * blocks)

    int blocks() const { return 1 + first_count + static_cast<int>(second_dirs.size()); }
    auto block(int b) const { return output.middleCols(static_cast<Eigen::Index>(b) * n, n); }
};

namespace detail {

inline void check_input(const MLPParams& net, const Matrix& inputs) {
    if (net.layers.empty()) throw ShapeError("network has no layers");
    if (inputs.rows() != net.input_dim())
        throw ShapeError("input has " + std::to_string(inputs.rows()) + " rows, network expects " +
                         std::to_string(net.input_dim()));
}

} // namespace detail

/// Propagates values and tangents through the network.
///
/// `inputs` is (d+1) x n holding state and time. Each entry of `seeds` is a (d+1) x n tangent
/// matrix. `second_dirs` selects seeds whose second directional derivative is propagated.
inline JetCache jet_forward(const MLPParams& net, const Matrix& inputs, const std::vector<Matrix>& seeds,
                            const std::vector<int>& second_dirs, bool keep_for_backward) {
    detail::check_input(net, inputs);
    if (!second_dirs.empty() && !is_twice_differentiable(net.activation))
        throw UnsupportedActivationError("second derivatives need a C2 activation, got " +
                                         std::string(to_string(net.activation)));
    JetCache c;
    c.n = static_cast<int>(inputs.cols());
    c.first_count = static_cast<int>(seeds.size());
    c.second_dirs = second_dirs;
    c.keep_for_backward = keep_for_backward;
    const Eigen::Index n = c.n;
    const int nb = c.blocks();
    for (int s : second_dirs)
        if (s < 0 || s >= c.first_count) throw ShapeError("second-order direction refers to a missing seed");

    Matrix h(inputs.rows(), n * nb);
    h.leftCols(n) = inputs;
    for (int k = 0; k < c.first_count; ++k) {
        if (seeds[k].rows() != inputs.rows() || seeds[k].cols() != n) throw ShapeError("seed shape mismatch");
        h.middleCols((k + 1) * n, n) = seeds[k];
    }
    if (!second_dirs.empty()) h.rightCols(n * static_cast<Eigen::Index>(second_dirs.size())).setZero();

    const std::size_t L = net.layers.size();
    for (std::size_t l = 0; l < L; ++l) {
        const auto& layer = net.layers[l];
        Matrix z = layer.weight * h;
        z.leftCols(n).colwise() += layer.bias;
        if (keep_for_backward) c.inputs.push_back(std::move(h));
        if (l + 1 == L) {
            c.output = std::move(z);
            break;
        }
        const Eigen::Index w = z.rows();
        h.resize(w, n * nb);
        if (nb == 1 && !keep_for_backward) {
            h = z.unaryExpr([a = net.activation](double v) { return activation_value(a, v); });
            continue;
        }
        Matrix s1(w, n), s2(w, n);
        for (Eigen::Index j = 0; j < n; ++j) {
            for (Eigen::Index i = 0; i < w; ++i) {
                const auto ad = activation_derivs(net.activation, z(i, j));
                h(i, j) = ad.f;
                s1(i, j) = ad.d1;
                s2(i, j) = ad.d2;
            }
        }
        for (int k = 0; k < c.first_count; ++k) {
            const Eigen::Index off = (k + 1) * n;
            h.middleCols(off, n).array() = s1.array() * z.middleCols(off, n).array();
        }
        for (std::size_t q = 0; q < second_dirs.size(); ++q) {
            const Eigen::Index off = (1 + c.first_count + static_cast<Eigen::Index>(q)) * n;
            const Eigen::Index dir = (1 + second_dirs[q]) * n;
            h.middleCols(off, n).array() = s2.array() * z.middleCols(dir, n).array().square() +
                                           s1.array() * z.middleCols(off, n).array();
        }
        if (keep_for_backward) {
            c.pre.push_back(std::move(z));
            c.d1.push_back(std::move(s1));
            c.d2.push_back(std::move(s2));
        }
    }
    return c;
}

/// Reverse sweep through the jet propagation.
///
/// `adjoint` is d_out x (n * blocks), the derivative of a scalar with respect to every entry of
/// `cache.output`. Parameter derivatives are accumulated into `grad` (skipping layers marked in
/// `frozen`), and the derivative with respect to the value inputs ((d+1) x n) is returned.
inline Matrix jet_backward(const MLPParams& net, const JetCache& cache, Matrix adjoint, ParamTensors* grad,
                           const std::vector<bool>& frozen = {}) {
    if (!cache.keep_for_backward) throw UnsupportedGraphError("jet cache was built without backward data");
    const Eigen::Index n = cache.n;
    const int K = cache.first_count;
    const auto S = static_cast<int>(cache.second_dirs.size());
    const std::size_t L = net.layers.size();
    for (std::size_t l = L; l-- > 0;) {
        const auto& layer = net.layers[l];
        const bool skip = l < frozen.size() && frozen[l];
        if (grad && !skip) {
            (*grad)[l].weight.noalias() += adjoint * cache.inputs[l].transpose();
            (*grad)[l].bias += adjoint.leftCols(n).rowwise().sum();
        }
        Matrix hbar = layer.weight.transpose() * adjoint;
        if (l == 0) return hbar.leftCols(n);

        const Matrix& z = cache.pre[l - 1];
        const auto s1 = cache.d1[l - 1].array();
        const auto s2 = cache.d2[l - 1].array();
        Matrix zbar(hbar.rows(), hbar.cols());
        auto zb0 = zbar.leftCols(n).array();
        zb0 = hbar.leftCols(n).array() * s1;
        for (int k = 0; k < K; ++k) {
            const Eigen::Index off = (k + 1) * n;
            zb0 += hbar.middleCols(off, n).array() * s2 * z.middleCols(off, n).array();
            zbar.middleCols(off, n).array() = hbar.middleCols(off, n).array() * s1;
        }
        if (S > 0) {
            Matrix s3(z.rows(), n);
            for (Eigen::Index j = 0; j < n; ++j)
                for (Eigen::Index i = 0; i < z.rows(); ++i) s3(i, j) = activation_derivs(net.activation, z(i, j)).d3;
            for (int q = 0; q < S; ++q) {
                const Eigen::Index off = (1 + K + q) * n;
                const Eigen::Index dir = (1 + cache.second_dirs[q]) * n;
                const auto hq = hbar.middleCols(off, n).array();
                const auto zd = z.middleCols(dir, n).array();
                zb0 += hq * (s3.array() * zd.square() + s2 * z.middleCols(off, n).array());
                zbar.middleCols(dir, n).array() += 2.0 * hq * s2 * zd;
                zbar.middleCols(off, n).array() = hq * s1;
            }
        }
        adjoint = std::move(zbar);
    }
    return Matrix();
}

/// Plain forward evaluation: returns d_out x n outputs for (d+1) x n inputs.
inline Matrix mlp_values(const MLPParams& net, const Matrix& inputs) {
    return jet_forward(net, inputs, {}, {}, false).output;
}

} // namespace mfgen
