#pragma once

#include <Eigen/Dense>

namespace marv {

// Hidden-state and weight matrices are row-major throughout: rows are tokens
// (or output features for weights), which keeps per-row slicing contiguous.
template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = MatX<float>;
using MatD = MatX<double>;
using VecF = VecX<float>;
using VecD = VecX<double>;

template <typename S>
bool all_finite(const MatX<S>& m) {
  return m.allFinite();
}

}  // namespace marv
