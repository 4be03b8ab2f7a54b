#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "spurlab/numkit/error.hpp"
#include "spurlab/numkit/matrix.hpp"

namespace spurlab {

struct SymEig {
  std::vector<double> values;  // descending
  Matrix vectors;              // column i pairs with values[i]; columns orthonormal
};

inline constexpr double kSymmetryTolerance = 1e-10;

// Cyclic Jacobi eigensolver for real symmetric matrices.
//
// Sweeps rotate away every off-diagonal pair until the off-diagonal Frobenius
// norm drops below 1e-12 (scaled by max(1, ||m||_F)). Eigenpairs are returned
// sorted by descending eigenvalue; equal eigenvalues keep the order in which
// the sweep left them. Each eigenvector is sign-normalized so its first
// entry with magnitude above 1e-12 is positive.
inline SymEig sym_eig(const Matrix& m) {
  if (m.rows() != m.cols()) {
    throw PreconditionError("sym_eig: matrix is not square (" + m.shape_string() + ")");
  }
  if (const double asym = max_abs_asymmetry(m); asym > kSymmetryTolerance) {
    throw PreconditionError("sym_eig: matrix is not symmetric (max asymmetry " +
                            std::to_string(asym) + ")");
  }
  const std::size_t n = m.rows();
  // Work on the symmetric part so residual asymmetry inside the tolerance
  // cannot stall the rotations.
  Matrix a = m;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) a(i, j) = a(j, i) = 0.5 * (m(i, j) + m(j, i));
  Matrix v = Matrix::identity(n);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };
  const double tol = 1e-12 * std::max(1.0, frobenius_norm(m));

  constexpr int kMaxSweeps = 100;
  int sweep = 0;
  for (; sweep < kMaxSweeps && off_norm() >= tol; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (off_norm() >= tol) {
    throw NumericError("sym_eig: Jacobi did not converge in " + std::to_string(kMaxSweeps) +
                       " sweeps");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  SymEig out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t c = 0; c < n; ++c) {
    const std::size_t src = order[c];
    out.values[c] = a(src, src);
    double sign = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (std::abs(v(k, src)) > 1e-12) {
        sign = v(k, src) > 0.0 ? 1.0 : -1.0;
        break;
      }
    }
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, c) = sign * v(k, src);
  }
  return out;
}

}  // namespace spurlab
