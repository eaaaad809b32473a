#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "kvdistill/matrix.hpp"

namespace kvdistill {

// Row-major boolean matrix; keep(r, c) == true marks an entry that takes
// part in the row softmax.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> keep;

  Mask(std::size_t r, std::size_t c, bool value = true)
      : rows(r), cols(c), keep(r * c, value ? 1 : 0) {}
  bool operator()(std::size_t r, std::size_t c) const { return keep[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { keep[r * cols + c] = v ? 1 : 0; }
};

constexpr double kLayerNormEps = 1e-5;

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
void add_inplace(Matrix& acc, const Matrix& b);
void axpy_inplace(Matrix& acc, double s, const Matrix& b);

// Row-wise softmax with max subtraction. Masked entries are exactly zero;
// a row with no kept entry raises DegenerateRowError.
Matrix softmax_rows(const Matrix& x, const std::optional<Mask>& mask = std::nullopt);

// Per-row normalization to zero mean / unit variance, then gamma * x + beta.
// gamma and beta are 1 x cols.
Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                  double eps = kLayerNormEps);

// Exact GELU: x * Phi(x).
double gelu(double x);
double gelu_grad(double x);
double softplus(double x);
double sigmoid(double x);

double norm2(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);
// Throws NormalizationError when the norm is <= 1e-12.
std::vector<double> l2_normalize(std::span<const double> v);
Matrix normalize_rows(const Matrix& x);
// Dot product of two unit vectors.
double cosine(std::span<const double> a, std::span<const double> b);

}  // namespace kvdistill
