// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "protoprompt/error.hpp"
#include "protoprompt/rng.hpp"

namespace protoprompt {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);

/// dot(a,b)/(|a||b|). Throws DegenerateVector on a zero-norm input.
double cosine_sim(std::span<const double> a, std::span<const double> b);

/// log(sum(exp(v))) via max-shift. Throws EmptyInput on an empty span.
double log_sum_exp(std::span<const double> v);

Vector l2_normalize(std::span<const double> v);

/// Entry (i,j) is cosine_sim(a[i], b[j]).
Matrix pairwise_cosine(std::span<const Vector> a, std::span<const Vector> b);

/// Gradient of l2_normalize at `v` applied to `grad_out`, given the normalized output.
Vector l2_normalize_backward(std::span<const double> normalized, double input_norm,
                             std::span<const double> grad_out);

bool all_finite(std::span<const double> v);

// out = a * b, with a (n x k) and b (k x m).
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
// out += a^T * b, with a (k x n) and b (k x m).
void matmul_at_b_acc(const Matrix& a, const Matrix& b, Matrix& out);
// out = a * b^T, with a (n x k) and b (m x k).
void matmul_a_bt(const Matrix& a, const Matrix& b, Matrix& out);

void axpy(double alpha, std::span<const double> x, std::span<double> y);

Vector random_normal_vector(std::size_t dim, Rng& rng);

struct EigenResult {
  Vector values;   // ascending
  Matrix vectors;  // column k pairs with values[k]
};

/// Eigen-decomposition of a symmetric matrix. NumericError if the solver
/// fails or the residual |A v - lambda v| exceeds tolerance * max|A| * n.
EigenResult symmetric_eigen(const Matrix& a, double tolerance = 1e-10);

}  // namespace protoprompt
