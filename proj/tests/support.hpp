#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "spurlab/numkit/matrix.hpp"
#include "spurlab/numkit/rng.hpp"

// Hand-rolled generators shared by the property tests.
namespace spurlab::testkit {

inline Matrix random_matrix(RngStream& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

inline Matrix random_symmetric(RngStream& rng, std::size_t n) {
  Matrix m = random_matrix(rng, n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) m(j, i) = m(i, j);
  return m;
}

inline std::size_t random_size(RngStream& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.uniform_index(hi - lo + 1));
}

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = m(r, c);
  return e;
}

inline bool bitwise_equal(const Matrix& a, const Matrix& b) { return a == b; }

}  // namespace spurlab::testkit
