#pragma once

#include "mfgen/error.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace mfgen {

class Tape;

/// Scalar recorded on a reverse-mode tape. A null tape marks a constant.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    double v = 0.0;

    Var() = default;
    Var(double value) : v(value) {} // NOLINT: implicit constants keep generic code readable
    Var(Tape* t, int i, double value) : tape(t), id(i), v(value) {}

    double value() const noexcept { return v; }
    bool is_constant() const noexcept { return tape == nullptr; }
};

/// Linear record of scalar operations with support for opaque multi-output blocks.
///
/// A block is a set of consecutive leaf nodes produced by an external computation (a network
/// evaluation). When the reverse sweep reaches the first output of a block, its callback receives
/// the output adjoints and adds input adjoints into the global adjoint array.
class Tape {
public:
    using BlockBackward = std::function<void(const double* output_adjoints, std::vector<double>& adjoints)>;

    Var leaf(double value) {
        nodes_.push_back({-1, -1, 0.0, 0.0});
        return {this, static_cast<int>(nodes_.size()) - 1, value};
    }

    Var unary(const Var& a, double value, double da) {
        nodes_.push_back({a.id, -1, da, 0.0});
        return {this, static_cast<int>(nodes_.size()) - 1, value};
    }

    Var binary(const Var& a, const Var& b, double value, double da, double db) {
        nodes_.push_back({a.id, b.id, da, db});
        return {this, static_cast<int>(nodes_.size()) - 1, value};
    }

    /// Appends `count` leaf outputs owned by a block and returns the index of the first one.
    int begin_block(int count, BlockBackward backward) {
        const int first = static_cast<int>(nodes_.size());
        for (int k = 0; k < count; ++k) nodes_.push_back({-1, -1, 0.0, 0.0});
        blocks_.push_back({first, count, std::move(backward)});
        return first;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from `out`; returns the adjoint of every node and runs block callbacks.
    std::vector<double> backward(const Var& out) {
        if (out.tape != this) throw UnsupportedGraphError("output is not recorded on this tape");
        std::vector<double> adj(nodes_.size(), 0.0);
        adj[static_cast<std::size_t>(out.id)] = 1.0;
        auto block = blocks_.rbegin();
        for (int i = out.id; i >= 0; --i) {
            const auto& node = nodes_[static_cast<std::size_t>(i)];
            const double g = adj[static_cast<std::size_t>(i)];
            if (g != 0.0) {
                if (node.a >= 0) adj[static_cast<std::size_t>(node.a)] += g * node.da;
                if (node.b >= 0) adj[static_cast<std::size_t>(node.b)] += g * node.db;
            }
            while (block != blocks_.rend() && block->first > i) ++block;
            if (block != blocks_.rend() && block->first == i) {
                block->backward(adj.data() + i, adj);
                ++block;
            }
        }
        return adj;
    }

private:
    struct Node {
        int a, b;
        double da, db;
    };
    struct Block {
        int first, count;
        BlockBackward backward;
    };
    std::vector<Node> nodes_;
    std::vector<Block> blocks_;
};

namespace detail {

inline Tape* common_tape(const Var& a, const Var& b) {
    if (a.tape && b.tape && a.tape != b.tape) throw UnsupportedGraphError("operands recorded on different tapes");
    return a.tape ? a.tape : b.tape;
}

} // namespace detail

inline Var operator+(const Var& a, const Var& b) {
    Tape* t = detail::common_tape(a, b);
    if (!t) return {a.v + b.v};
    if (!a.tape) return t->unary(b, a.v + b.v, 1.0);
    if (!b.tape) return t->unary(a, a.v + b.v, 1.0);
    return t->binary(a, b, a.v + b.v, 1.0, 1.0);
}

inline Var operator-(const Var& a, const Var& b) {
    Tape* t = detail::common_tape(a, b);
    if (!t) return {a.v - b.v};
    if (!a.tape) return t->unary(b, a.v - b.v, -1.0);
    if (!b.tape) return t->unary(a, a.v - b.v, 1.0);
    return t->binary(a, b, a.v - b.v, 1.0, -1.0);
}

inline Var operator*(const Var& a, const Var& b) {
    Tape* t = detail::common_tape(a, b);
    if (!t) return {a.v * b.v};
    if (!a.tape) return t->unary(b, a.v * b.v, a.v);
    if (!b.tape) return t->unary(a, a.v * b.v, b.v);
    return t->binary(a, b, a.v * b.v, b.v, a.v);
}

inline Var operator/(const Var& a, const Var& b) {
    Tape* t = detail::common_tape(a, b);
    const double q = a.v / b.v;
    if (!t) return {q};
    if (!a.tape) return t->unary(b, q, -q / b.v);
    if (!b.tape) return t->unary(a, q, 1.0 / b.v);
    return t->binary(a, b, q, 1.0 / b.v, -q / b.v);
}

inline Var operator-(const Var& a) { return a.tape ? a.tape->unary(a, -a.v, -1.0) : Var(-a.v); }

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }

/// |a| with subgradient 0 at exactly 0.
inline Var abs(const Var& a) {
    const double s = a.v > 0.0 ? 1.0 : (a.v < 0.0 ? -1.0 : 0.0);
    return a.tape ? a.tape->unary(a, std::abs(a.v), s) : Var(std::abs(a.v));
}

inline Var exp(const Var& a) {
    const double e = std::exp(a.v);
    return a.tape ? a.tape->unary(a, e, e) : Var(e);
}

inline Var log(const Var& a) {
    return a.tape ? a.tape->unary(a, std::log(a.v), 1.0 / a.v) : Var(std::log(a.v));
}

inline Var sqrt(const Var& a) {
    const double r = std::sqrt(a.v);
    return a.tape ? a.tape->unary(a, r, 0.5 / r) : Var(r);
}

/// Integer powers used by the regularizers; other exponents are not part of the supported graph.
inline Var pow(const Var& a, int p) {
    if (p == 1) return a;
    if (p == 2) return a * a;
    throw UnsupportedGraphError("pow supports exponents 1 and 2, got " + std::to_string(p));
}

inline double value_of(double x) noexcept { return x; }
inline double value_of(const Var& x) noexcept { return x.v; }

/// |x|^p for p in {1, 2}, shared by double and Var code paths.
template <class S>
S abs_pow(const S& x, int p) {
    using std::abs;
    if (p == 1) return abs(x);
    if (p == 2) return x * x;
    throw UnsupportedGraphError("|x|^p supports p in {1, 2}, got " + std::to_string(p));
}

} // namespace mfgen
