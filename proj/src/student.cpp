#include "kvdistill/student.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "kvdistill/binary_io.hpp"
#include "kvdistill/errors.hpp"
#include "kvdistill/kernels.hpp"

namespace kvdistill {

void CacheModel::validate() const {
  const std::size_t n = keys.rows();
  const std::size_t d = keys.cols();
  if (n == 0 || d == 0) throw ValidationError("cache model: empty cache");
  if (values.rows() != n || values.cols() == 0) throw ValidationError("cache model: values shape");
  if (adapter.rows() != d || adapter.cols() != d) throw ValidationError("cache model: adapter must be D x D");
  if (!(alpha >= 0.0) || !(beta > 0.0) || !(tau > 0.0) || !std::isfinite(alpha) ||
      !std::isfinite(beta) || !std::isfinite(tau)) {
    throw ValidationError("cache model: need alpha >= 0, beta > 0, tau > 0");
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (std::abs(norm2(keys.row(j)) - 1.0) > 1e-6) {
      throw ValidationError("cache model: key " + std::to_string(j) + " is not unit norm");
    }
    int ones = 0;
    for (double v : values.row(j)) {
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw ValidationError("cache model: value row " + std::to_string(j) + " is not one-hot");
  }
}

CacheEntries build_cache(const EmbeddingBank& bank, const Episode& episode) {
  validate_episode(bank, episode);
  CacheEntries c{Matrix(episode.supports.size(), bank.dim),
                 Matrix(episode.supports.size(), bank.num_classes)};
  for (std::size_t j = 0; j < episode.supports.size(); ++j) {
    const ImageRecord& im = bank.images[episode.supports[j]];
    const auto g = im.global();
    std::copy(g.begin(), g.end(), c.keys.row(j).begin());
    c.values(j, im.label) = 1.0;
  }
  return c;
}

CacheModel make_cache_model(const EmbeddingBank& bank, const Episode& episode, double alpha,
                            double beta, double tau) {
  CacheEntries c = build_cache(bank, episode);
  CacheModel m{std::move(c.keys), std::move(c.values), Matrix::identity(bank.dim), alpha, beta, tau};
  m.validate();
  return m;
}

std::vector<double> zero_shot_logits(std::span<const double> z, const Matrix& prompts, double tau) {
  if (z.size() != prompts.cols()) throw DimensionError("zero_shot_logits: dim mismatch");
  std::vector<double> out(prompts.rows());
  for (std::size_t c = 0; c < prompts.rows(); ++c) out[c] = tau * cosine(z, prompts.row(c));
  return out;
}

std::vector<double> adapter_apply(const Matrix& adapter, std::span<const double> z) {
  if (adapter.cols() != z.size()) throw DimensionError("adapter_apply: dim mismatch");
  std::vector<double> out(adapter.rows());
  for (std::size_t i = 0; i < adapter.rows(); ++i) out[i] = dot(adapter.row(i), z);
  return out;
}

std::vector<double> cache_logits(std::span<const double> az, const Matrix& keys,
                                 const Matrix& values, double beta) {
  if (az.size() != keys.cols() || keys.rows() != values.rows()) {
    throw DimensionError("cache_logits: shape mismatch");
  }
  const std::vector<double> unit = l2_normalize(az);
  std::vector<double> out(values.cols(), 0.0);
  for (std::size_t j = 0; j < keys.rows(); ++j) {
    const double affinity = std::exp(-beta * (1.0 - cosine(unit, keys.row(j))));
    for (std::size_t c = 0; c < values.cols(); ++c) out[c] += affinity * values(j, c);
  }
  return out;
}

std::vector<double> test_logits(std::span<const double> z, const CacheModel& model,
                                const Matrix& prompts) {
  std::vector<double> out = zero_shot_logits(z, prompts, model.tau);
  if (model.alpha == 0.0) return out;
  const std::vector<double> cache =
      cache_logits(adapter_apply(model.adapter, z), model.keys, model.values, model.beta);
  if (cache.size() != out.size()) throw DimensionError("test_logits: class count mismatch");
  for (std::size_t c = 0; c < out.size(); ++c) out[c] += model.alpha * cache[c];
  return out;
}

Matrix test_logits_batch(const Matrix& queries, const CacheModel& model, const Matrix& prompts) {
  Matrix out(queries.rows(), prompts.rows());
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    const auto row = test_logits(queries.row(i), model, prompts);
    std::copy(row.begin(), row.end(), out.row(i).begin());
  }
  return out;
}

Var cache_logits_ad(Var adapter, const Matrix& queries, const Matrix& keys, const Matrix& values,
                    double beta) {
  Tape& t = adapter.tape();
  Var z = t.constant(queries);
  Var az = ad::normalize_rows(ad::matmul_nt(z, adapter));
  Var affinity = ad::exp_affine(ad::matmul_nt(az, t.constant(keys)), beta, -beta);
  return ad::matmul(affinity, t.constant(values));
}

std::size_t student_file_size(std::size_t dim, std::size_t classes, std::size_t supports) {
  return 4 + 4 * 4 + 3 * 8 + 8 * (supports * dim + supports * classes + dim * dim);
}

void save_student(const CacheModel& model, const std::filesystem::path& path) {
  model.validate();
  binary::Writer w;
  w.bytes(kStudentMagic, 4);
  w.u32(kStudentVersion);
  w.u32(static_cast<std::uint32_t>(model.dim()));
  w.u32(static_cast<std::uint32_t>(model.num_classes()));
  w.u32(static_cast<std::uint32_t>(model.num_supports()));
  w.f64(model.tau);
  w.f64(model.alpha);
  w.f64(model.beta);
  for (const Matrix* m : {&model.keys, &model.values, &model.adapter})
    for (double v : m->data()) w.f64(v);
  w.write_file(path);
}

CacheModel load_student(const std::filesystem::path& path) {
  binary::Reader r = binary::Reader::from_file(path, "TOGS");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kStudentMagic, 4) != 0) {
    throw FormatError("not a TOGS student file (bad magic) in " + path.string());
  }
  const std::uint32_t version = r.u32();
  if (version != kStudentVersion) throw FormatError("unsupported TOGS version " + std::to_string(version));
  const std::size_t d = r.u32();
  const std::size_t c = r.u32();
  const std::size_t n = r.u32();
  if (r.size() != student_file_size(d, c, n)) {
    throw FormatError("TOGS size " + std::to_string(r.size()) + " does not match header (expected " +
                      std::to_string(student_file_size(d, c, n)) + ")");
  }
  CacheModel m;
  m.tau = r.f64();
  m.alpha = r.f64();
  m.beta = r.f64();
  auto read_block = [&r](std::size_t rows, std::size_t cols) {
    std::vector<double> data(rows * cols);
    for (double& v : data) v = r.f64();
    try {
      return Matrix(rows, cols, std::move(data));
    } catch (const NonFiniteError&) {
      throw FormatError("TOGS block holds a non-finite value");
    }
  };
  m.keys = read_block(n, d);
  m.values = read_block(n, c);
  m.adapter = read_block(d, d);
  m.validate();
  return m;
}

}  // namespace kvdistill
