#pragma once

#include "mfgen/activation.hpp"
#include "mfgen/error.hpp"
#include "mfgen/types.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace mfgen {

struct LayerParams {
    Matrix weight; ///< rows = outputs, cols = inputs
    Vector bias;
};

/// One tensor pair per layer; used both for parameters and for gradients / optimizer moments.
using ParamTensors = std::vector<LayerParams>;

/// Parameters of a fully connected network mapping (state, time) to a vector.
///
/// The input is the state of dimension `state_dim()` concatenated with the raw time value.
/// Every layer except the last is followed by `activation`.
struct MLPParams {
    ParamTensors layers;
    Activation activation = Activation::gelu;
    std::uint64_t seed = 0;

    int input_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols()); }
    int state_dim() const { return input_dim() - 1; }
    int output_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().weight.rows()); }
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
        return n;
    }

    /// Throws ShapeError / DomainError when the invariants do not hold.
    void validate() const {
        if (layers.empty()) throw ShapeError("network has no layers");
        if (layers.front().weight.cols() < 2) throw ShapeError("network input must hold state and time");
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const auto& l = layers[k];
            if (l.bias.size() != l.weight.rows())
                throw ShapeError("layer " + std::to_string(k) + ": bias length does not match weight rows");
            if (k > 0 && l.weight.cols() != layers[k - 1].weight.rows())
                throw ShapeError("layer " + std::to_string(k) + ": input width does not match previous output");
            if (!l.weight.allFinite() || !l.bias.allFinite())
                throw DomainError("layer " + std::to_string(k) + " has non-finite entries");
        }
    }
};

inline ParamTensors zeros_like(const ParamTensors& p) {
    ParamTensors z(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) {
        z[k].weight = Matrix::Zero(p[k].weight.rows(), p[k].weight.cols());
        z[k].bias = Vector::Zero(p[k].bias.size());
    }
    return z;
}

inline bool same_shape(const ParamTensors& a, const ParamTensors& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (a[k].weight.rows() != b[k].weight.rows() || a[k].weight.cols() != b[k].weight.cols() ||
            a[k].bias.size() != b[k].bias.size())
            return false;
    }
    return true;
}

inline double squared_norm(const ParamTensors& p) {
    double s = 0.0;
    for (const auto& l : p) s += l.weight.squaredNorm() + l.bias.squaredNorm();
    return s;
}

/// Layer widths from input to output: {state_dim + 1, hidden..., output_dim}.
inline std::vector<int> layer_widths(int state_dim, int output_dim, const std::vector<int>& hidden) {
    std::vector<int> w{state_dim + 1};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(output_dim);
    return w;
}

/// Network with weights and biases drawn uniformly on [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline MLPParams make_mlp(int state_dim, int output_dim, const std::vector<int>& hidden, Activation activation,
                          std::uint64_t seed) {
    if (state_dim < 1 || output_dim < 1) throw ShapeError("network dimensions must be positive");
    for (int h : hidden)
        if (h < 1) throw ShapeError("hidden widths must be positive");
    MLPParams net;
    net.activation = activation;
    net.seed = seed;
    std::mt19937_64 gen(seed);
    const auto widths = layer_widths(state_dim, output_dim, hidden);
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(widths[k]));
        std::uniform_real_distribution<double> u(-bound, bound);
        LayerParams layer{Matrix(widths[k + 1], widths[k]), Vector(widths[k + 1])};
        for (Eigen::Index i = 0; i < layer.weight.rows(); ++i)
            for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) layer.weight(i, j) = u(gen);
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = u(gen);
        net.layers.push_back(std::move(layer));
    }
    return net;
}

/// Same architecture as make_mlp with every parameter set to zero.
inline MLPParams make_zero_mlp(int state_dim, int output_dim, const std::vector<int>& hidden, Activation activation) {
    MLPParams net = make_mlp(state_dim, output_dim, hidden, activation, 0);
    for (auto& l : net.layers) {
        l.weight.setZero();
        l.bias.setZero();
    }
    return net;
}

// Checkpoint text format. Every value is written as a C99 hex float so the round trip is exact.
//
//   mfgen-mlp 1
//   activation gelu
//   seed 42
//   layers 3
//   layer <rows> <cols>
//   <rows*cols weights, row-major>
//   <rows biases>
//   ...

namespace detail {

inline void write_hex(std::ostream& os, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    os << buf;
}

inline double read_hex(std::istream& is) {
    std::string tok;
    if (!(is >> tok)) throw ConfigError("checkpoint: unexpected end of data");
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw ConfigError("checkpoint: bad number '" + tok + "'");
    return v;
}

inline void expect_token(std::istream& is, const std::string& want) {
    std::string tok;
    if (!(is >> tok) || tok != want) throw ConfigError("checkpoint: expected '" + want + "', got '" + tok + "'");
}

} // namespace detail

inline void write_tensors(std::ostream& os, const ParamTensors& tensors) {
    os << "layers " << tensors.size() << '\n';
    for (const auto& l : tensors) {
        os << "layer " << l.weight.rows() << ' ' << l.weight.cols() << '\n';
        for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
            for (Eigen::Index j = 0; j < l.weight.cols(); ++j) {
                if (j) os << ' ';
                detail::write_hex(os, l.weight(i, j));
            }
            os << '\n';
        }
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) {
            if (i) os << ' ';
            detail::write_hex(os, l.bias(i));
        }
        os << '\n';
    }
}

inline ParamTensors read_tensors(std::istream& is) {
    detail::expect_token(is, "layers");
    std::size_t count = 0;
    if (!(is >> count)) throw ConfigError("checkpoint: missing layer count");
    ParamTensors tensors;
    for (std::size_t k = 0; k < count; ++k) {
        detail::expect_token(is, "layer");
        Eigen::Index rows = 0, cols = 0;
        if (!(is >> rows >> cols) || rows < 1 || cols < 1) throw ConfigError("checkpoint: bad layer shape");
        LayerParams l{Matrix(rows, cols), Vector(rows)};
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) l.weight(i, j) = detail::read_hex(is);
        for (Eigen::Index i = 0; i < rows; ++i) l.bias(i) = detail::read_hex(is);
        tensors.push_back(std::move(l));
    }
    return tensors;
}

inline void write_mlp(std::ostream& os, const MLPParams& net) {
    os << "mfgen-mlp 1\n";
    os << "activation " << to_string(net.activation) << '\n';
    os << "seed " << net.seed << '\n';
    write_tensors(os, net.layers);
}

inline MLPParams read_mlp(std::istream& is) {
    detail::expect_token(is, "mfgen-mlp");
    int version = 0;
    if (!(is >> version) || version != 1) throw ConfigError("checkpoint: unsupported version");
    MLPParams net;
    detail::expect_token(is, "activation");
    std::string act;
    is >> act;
    net.activation = parse_activation(act);
    detail::expect_token(is, "seed");
    if (!(is >> net.seed)) throw ConfigError("checkpoint: bad seed");
    net.layers = read_tensors(is);
    net.validate();
    return net;
}

inline void save_mlp(const std::string& path, const MLPParams& net) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open '" + path + "' for writing");
    write_mlp(os, net);
}

inline MLPParams load_mlp(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open checkpoint '" + path + "'");
    return read_mlp(is);
}

} // namespace mfgen
