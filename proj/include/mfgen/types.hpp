#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>

namespace mfgen {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A batch of d-dimensional states, one particle per row.
struct ParticleEnsemble {
    RowMatrix states;
    double time_label = 0.0;
    std::uint64_t seed = 0;
    std::string tag;

    Eigen::Index size() const noexcept { return states.rows(); }
    Eigen::Index dim() const noexcept { return states.cols(); }

    /// Column-major d x n copy, the layout network evaluation expects.
    Matrix columns() const { return states.transpose(); }
};

} // namespace mfgen
