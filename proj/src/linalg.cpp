// SPDX-License-Identifier: Apache-2.0
#include "protoprompt/linalg.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace protoprompt {

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::ShapeError, "dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::ShapeError, "cosine_sim: dimension mismatch");
  const double na = norm(a);
  const double nb = norm(b);
  require(na > 0.0 && nb > 0.0, ErrorKind::DegenerateVector, "cosine_sim: zero-norm input");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double log_sum_exp(std::span<const double> v) {
  require(!v.empty(), ErrorKind::EmptyInput, "log_sum_exp: empty input");
  const double peak = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(peak)) return peak;
  double s = 0.0;
  for (double x : v) s += std::exp(x - peak);
  return peak + std::log(s);
}

Vector l2_normalize(std::span<const double> v) {
  const double n = norm(v);
  require(std::isfinite(n), ErrorKind::NumericError, "l2_normalize: non-finite vector");
  require(n > 0.0, ErrorKind::DegenerateVector, "l2_normalize: zero vector");
  Vector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

Vector l2_normalize_backward(std::span<const double> normalized, double input_norm,
                             std::span<const double> grad_out) {
  const double proj = dot(normalized, grad_out);
  Vector grad(normalized.size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    grad[i] = (grad_out[i] - normalized[i] * proj) / input_norm;
  }
  return grad;
}

Matrix pairwise_cosine(std::span<const Vector> a, std::span<const Vector> b) {
  Matrix out(a.size(), b.size());
  if (a.empty() || b.empty()) return out;
  const std::size_t dim = a.front().size();
  for (const auto& v : a) require(v.size() == dim, ErrorKind::ShapeError, "pairwise_cosine: mixed dims");
  for (const auto& v : b) require(v.size() == dim, ErrorKind::ShapeError, "pairwise_cosine: mixed dims");
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) out(i, j) = cosine_sim(a[i], b[j]);
  }
  return out;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMajor> view(const Matrix& m) {
  return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

Eigen::Map<RowMajor> view(Matrix& m) {
  return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

}  // namespace

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  require(a.cols == b.rows, ErrorKind::ShapeError, "matmul: inner dimension mismatch");
  out.rows = a.rows;
  out.cols = b.cols;
  out.data.assign(a.rows * b.cols, 0.0);
  view(out).noalias() = view(a) * view(b);
}

void matmul_at_b_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  require(a.rows == b.rows && out.rows == a.cols && out.cols == b.cols, ErrorKind::ShapeError,
          "matmul_at_b_acc: shape mismatch");
  view(out).noalias() += view(a).transpose() * view(b);
}

void matmul_a_bt(const Matrix& a, const Matrix& b, Matrix& out) {
  require(a.cols == b.cols, ErrorKind::ShapeError, "matmul_a_bt: inner dimension mismatch");
  out.rows = a.rows;
  out.cols = b.rows;
  out.data.assign(a.rows * b.rows, 0.0);
  view(out).noalias() = view(a) * view(b).transpose();
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require(x.size() == y.size(), ErrorKind::ShapeError, "axpy: dimension mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Vector random_normal_vector(std::size_t dim, Rng& rng) {
  Vector v(dim);
  for (double& x : v) x = rng.normal();
  return v;
}

}  // namespace protoprompt

namespace protoprompt {

EigenResult symmetric_eigen(const Matrix& input, double tolerance) {
  require(input.rows == input.cols, ErrorKind::ShapeError, "symmetric_eigen needs a square matrix");
  require(all_finite(input.data), ErrorKind::NumericError, "symmetric_eigen: non-finite input");
  const auto n = static_cast<Eigen::Index>(input.rows);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> a(input.data.data(), n, n);
  const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
  require(solver.info() == Eigen::Success, ErrorKind::NumericError, "symmetric_eigen did not converge");
  const Eigen::MatrixXd& v = solver.eigenvectors();
  const double scale = std::max(1.0, sym.cwiseAbs().maxCoeff());
  const double residual = (sym * v - v * solver.eigenvalues().asDiagonal()).cwiseAbs().maxCoeff();
  require(residual <= tolerance * scale * static_cast<double>(std::max<Eigen::Index>(n, 1)), ErrorKind::NumericError,
          "symmetric_eigen residual above tolerance");
  EigenResult out;
  out.values.assign(solver.eigenvalues().data(), solver.eigenvalues().data() + n);
  out.vectors = Matrix(input.rows, input.cols);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < n; ++k) out.vectors(static_cast<std::size_t>(i), static_cast<std::size_t>(k)) = v(i, k);
  return out;
}

}  // namespace protoprompt
