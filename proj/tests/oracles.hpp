#pragma once

// Reference implementations used only by tests. Written as direct loops that
// mirror the textbook definitions, independent of the library's fast paths.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "jpool/gradcheck.hpp"
#include "jpool/tensor.hpp"

namespace jpool::oracle {

inline Tensor random_tensor(Dims dims, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(dims));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.values()) v = d(rng);
  return t;
}

/// Values bounded away from zero, so ReLU kinks are never within a finite-difference step.
inline Tensor random_tensor_away_from_zero(Dims dims, std::mt19937_64& rng) {
  Tensor t(std::move(dims));
  std::uniform_real_distribution<double> d(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.values()) v = sign(rng) ? d(rng) : -d(rng);
  return t;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  Matrix m(r, c);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (double& v : m.storage()) v = d(rng);
  return m;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

/// Direct 3D cross-correlation: 7 nested loops over (co, t, y, x, ci, kt, ky, kx).
inline Tensor naive_conv3d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t st,
                           std::size_t sy, std::size_t sx, std::size_t pt, std::size_t py,
                           std::size_t px) {
  const long C = x.dim(0), L = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long Co = w.dim(0), KT = w.dim(2), KY = w.dim(3), KX = w.dim(4);
  const long Lo = (L + 2 * long(pt) - KT) / long(st) + 1;
  const long Ho = (H + 2 * long(py) - KY) / long(sy) + 1;
  const long Wo = (W + 2 * long(px) - KX) / long(sx) + 1;
  Tensor y({std::size_t(Co), std::size_t(Lo), std::size_t(Ho), std::size_t(Wo)});
  for (long co = 0; co < Co; ++co)
    for (long t = 0; t < Lo; ++t)
      for (long yy = 0; yy < Ho; ++yy)
        for (long xx = 0; xx < Wo; ++xx) {
          double s = b[co];
          for (long ci = 0; ci < C; ++ci)
            for (long kt = 0; kt < KT; ++kt)
              for (long ky = 0; ky < KY; ++ky)
                for (long kx = 0; kx < KX; ++kx) {
                  const long ti = t * long(st) + kt - long(pt);
                  const long yi = yy * long(sy) + ky - long(py);
                  const long xi = xx * long(sx) + kx - long(px);
                  if (ti < 0 || ti >= L || yi < 0 || yi >= H || xi < 0 || xi >= W) continue;
                  s += w[(((co * C + ci) * KT + kt) * KY + ky) * KX + kx] *
                       x[((ci * L + ti) * H + yi) * W + xi];
                }
          y[((co * Lo + t) * Ho + yy) * Wo + xx] = s;
        }
  return y;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace jpool::oracle
