#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvdistill/autodiff.hpp"
#include "kvdistill/embedbank.hpp"
#include "kvdistill/objective.hpp"
#include "kvdistill/rng.hpp"
#include "kvdistill/student.hpp"
#include "kvdistill/teacher.hpp"

namespace kvdistill {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  Matrix m;
  Matrix v;
  std::size_t step = 0;
};

// 0.5 * lr0 * (1 + cos(pi * t / T)). Throws ContractError unless 0 <= t <= T.
double cosine_lr(std::size_t t, std::size_t total, double lr0);

// One decoupled-weight-decay Adam update with bias correction. The state is
// lazily shaped on the first call. Throws DimensionError on shape mismatch.
void adamw_step(Matrix& param, const Matrix& grad, AdamState& state, double lr, const AdamConfig& cfg);

struct TrainConfig {
  double lr0 = 1e-3;
  std::size_t epochs = 100;
  AdamConfig adam;
  LossWeights loss;
  double beta = kDefaultBeta;  // cache sharpness
  // Teacher architecture and toggles. input_dim is taken from the bank;
  // hidden == 0 means hidden = D.
  TeacherConfig teacher{.input_dim = 0, .hidden = 0};
  GridMode grid_mode = GridMode::multiscale;
  std::uint64_t seed = 0;
  double sigma_aug = 0.02;
  // Run the teacher forward even when delta == lambda == 0 (it then cannot
  // influence the student).
  bool force_teacher = false;
  // After training, choose test-time alpha and beta on the episode's
  // validation images.
  bool search_alpha_beta = true;
  std::vector<double> alpha_grid{1.0, 2.0, 4.0, 7.0, 10.0};
  std::vector<double> beta_grid{1.0, 3.0, 5.5, 8.0, 12.0};

  // Throws ConfigError.
  void validate() const;
  bool teacher_active() const;
  // True when the teacher branch cannot affect training (delta = lambda = 0).
  bool student_only() const { return loss.delta == 0.0 && loss.lambda == 0.0; }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double ce = 0.0;
  double focal = 0.0;
  double lr = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct Metrics {
  std::vector<EpochRecord> epochs;
  double query_accuracy = 0.0;
  Matrix query_logits;  // queries x C, inference path
  double zero_shot_accuracy = 0.0;
  double training_free_accuracy = 0.0;  // identity adapter, no training
  std::optional<double> teacher_accuracy;
  std::optional<double> filter_precision;
  double alpha = kDefaultAlpha;  // test-time values stored in the student
  double beta = kDefaultBeta;

  bool operator==(const Metrics&) const = default;
};

struct TrainResult {
  CacheModel model;
  TeacherParams teacher;
  Metrics metrics;
};

// Concatenated rows of the given images' global features (n x D).
Matrix global_rows(const EmbeddingBank& bank, std::span<const std::size_t> ids);
// Stacked patch rows of the given images restricted to `views` (n*|views| x D).
Matrix patch_rows(const EmbeddingBank& bank, std::span<const std::size_t> ids,
                  std::span<const std::size_t> views);
std::vector<std::size_t> labels_of(const EmbeddingBank& bank, std::span<const std::size_t> ids);

// Adds gaussian noise of expected norm sigma to every row, then re-normalizes.
Matrix jitter_rows(const Matrix& rows, double sigma, Rng& rng);

// Fraction of rows whose argmax equals the label (first index wins ties).
double argmax_accuracy(const Matrix& logits, std::span<const std::size_t> labels);

// Inference-path logits for the episode's queries.
Matrix query_logits(const CacheModel& model, const EmbeddingBank& bank, const Episode& episode);
// Query accuracy of the student alone. Throws ContractError on an empty query set.
double evaluate(const CacheModel& model, const EmbeddingBank& bank, const Episode& episode);

// Mean over images of |kept \ {0}| ∩ foreground / |kept \ {0}|, where kept
// holds layout view indices. Images with no planted foreground are skipped;
// returns nullopt when none remain.
std::optional<double> filter_precision(const EmbeddingBank& bank, std::span<const std::size_t> ids,
                                       const std::vector<std::vector<std::size_t>>& kept_views);

// Picks (alpha, beta) maximizing accuracy on `ids`; ties keep the earliest pair.
std::pair<double, double> search_alpha_beta(const CacheModel& model, const EmbeddingBank& bank,
                                            std::span<const std::size_t> ids,
                                            std::span<const double> alphas,
                                            std::span<const double> betas);

// Throws DivergenceError (with the epoch) if the loss becomes non-finite.
TrainResult train(const EmbeddingBank& bank, const Episode& episode, const TrainConfig& config);

// Teacher-branch forward over the given images in chunks; returns logits and
// the kept layout-view indices per image.
struct TeacherEval {
  Matrix logits;
  std::vector<std::vector<std::size_t>> kept_views;
};
TeacherEval teacher_eval(const TeacherParams& teacher, const EmbeddingBank& bank,
                         std::span<const std::size_t> ids, GridMode grid_mode,
                         std::size_t chunk = 64);

void write_metrics_csv(const Metrics& metrics, const std::filesystem::path& path);

// Full training checkpoint: student plus teacher parameters.
inline constexpr char kCheckpointMagic[4] = {'T', 'O', 'G', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const CacheModel& model, TeacherParams& teacher, const std::filesystem::path& path);
struct Checkpoint {
  CacheModel model;
  TeacherParams teacher;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Named ablation arm: a transformation of a base config.
struct Arm {
  std::string name;
  std::string description;
};
const std::vector<Arm>& ablation_arms();
// Throws ConfigError naming the valid arms for an unknown name.
TrainConfig apply_arm(const TrainConfig& base, const std::string& arm);

struct AblationRun {
  std::string arm;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::optional<double> teacher_accuracy;
  std::optional<double> filter_precision;
};

struct AblationTable {
  std::vector<std::string> arms;
  std::vector<std::size_t> shots;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRun> runs;  // arm-major, then shots, then seeds

  const AblationRun& run(std::size_t arm, std::size_t shot, std::size_t seed) const;
  double mean(std::size_t arm, std::size_t shot) const;
  std::optional<double> mean_filter_precision(std::size_t arm, std::size_t shot) const;
};

// Every (arm, K, seed) cell trains on sample_episode(bank, K, seed) with
// config.seed = seed. Cells run on up to `jobs` threads; results are
// assembled in a fixed order.
AblationTable run_ablation(const EmbeddingBank& bank, std::span<const std::size_t> shots,
                           std::span<const std::string> arms, std::span<const std::uint64_t> seeds,
                           const TrainConfig& base, std::size_t jobs = 1);

// Rows = shots, columns = arms, cells = mean accuracy over seeds.
void write_ablation_csv(const AblationTable& table, const std::filesystem::path& path);

}  // namespace kvdistill
