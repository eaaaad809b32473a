#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kvdistill/autodiff.hpp"
#include "kvdistill/embedbank.hpp"
#include "kvdistill/matrix.hpp"

namespace kvdistill {

inline constexpr double kDefaultAlpha = 1.0;
inline constexpr double kDefaultBeta = 5.5;
inline constexpr double kDefaultTau = 100.0;

// The permanent key-value cache classifier. Everything inference needs is in
// here; it holds no teacher state.
struct CacheModel {
  Matrix keys;     // N x D support global features, unit rows
  Matrix values;   // N x C one-hot labels
  Matrix adapter;  // D x D, applied as adapter * z
  double alpha = kDefaultAlpha;
  double beta = kDefaultBeta;
  double tau = kDefaultTau;

  std::size_t dim() const { return keys.cols(); }
  std::size_t num_classes() const { return values.cols(); }
  std::size_t num_supports() const { return keys.rows(); }

  // Throws ValidationError.
  void validate() const;
  bool operator==(const CacheModel&) const = default;
};

struct CacheEntries {
  Matrix keys;
  Matrix values;
};

// Keys are the supports' global features, values their one-hot labels, in
// episode support order.
CacheEntries build_cache(const EmbeddingBank& bank, const Episode& episode);

// Identity adapter: reproduces training-free Tip-Adapter.
CacheModel make_cache_model(const EmbeddingBank& bank, const Episode& episode,
                            double alpha = kDefaultAlpha, double beta = kDefaultBeta,
                            double tau = kDefaultTau);

// logit_c = tau * cos(z, prompt_c)
std::vector<double> zero_shot_logits(std::span<const double> z, const Matrix& prompts, double tau);
std::vector<double> adapter_apply(const Matrix& adapter, std::span<const double> z);
// sum_j exp(-beta (1 - cos(az/|az|, key_j))) * value_j. Throws
// NormalizationError for a zero az.
std::vector<double> cache_logits(std::span<const double> az, const Matrix& keys,
                                 const Matrix& values, double beta);
// Inference path: zero-shot + alpha * cache(adapter * z).
std::vector<double> test_logits(std::span<const double> z, const CacheModel& model,
                                const Matrix& prompts);
// test_logits for every row of `queries` (n x D) -> n x C.
Matrix test_logits_batch(const Matrix& queries, const CacheModel& model, const Matrix& prompts);

// Differentiable cache branch for a batch of query rows (n x D):
// exp(beta * (normalize(z W^T) K^T - 1)) V.
Var cache_logits_ad(Var adapter, const Matrix& queries, const Matrix& keys, const Matrix& values,
                    double beta);

inline constexpr char kStudentMagic[4] = {'T', 'O', 'G', 'S'};
inline constexpr std::uint32_t kStudentVersion = 1;

void save_student(const CacheModel& model, const std::filesystem::path& path);
CacheModel load_student(const std::filesystem::path& path);
// Exact byte size of a TOGS file for the given shapes.
std::size_t student_file_size(std::size_t dim, std::size_t classes, std::size_t supports);

}  // namespace kvdistill
