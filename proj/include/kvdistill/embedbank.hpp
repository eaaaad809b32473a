#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kvdistill/matrix.hpp"

namespace kvdistill {

enum class ViewKind : std::uint8_t { global, grid3x3, grid2x2, vhalf, hhalf };

const char* to_string(ViewKind kind);

// Axis-aligned rectangle in unit-square coordinates.
struct Rect {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 1.0;
  double y1 = 1.0;

  double area() const { return (x1 - x0) * (y1 - y0); }
  bool operator==(const Rect&) const = default;
};

struct View {
  ViewKind kind;
  Rect rect;
};

using PatchLayout = std::vector<View>;

// The 18-view multi-scale layout: global, 3x3 grid (row-major), 2x2 grid
// (row-major), vertical halves (left, right), horizontal halves (top, bottom).
PatchLayout multiscale_layout();

// Which layout views the teacher sees as patch nodes.
enum class GridMode : std::uint8_t {
  multiscale,           // all 18 views
  grid2x2,              // the 4 quarter cells
  grid3x3,              // the 9 ninth cells
  global_grid2x2,       // global + 2x2 (5 nodes)
  global_grid2x2_3x3,   // global + 2x2 + 3x3 (14 nodes)
};

const char* to_string(GridMode mode);
GridMode grid_mode_from_string(const std::string& name);
// Layout indices (ascending) selected by `mode` from the 18-view layout.
std::vector<std::size_t> view_indices(GridMode mode);

enum class Split : std::uint8_t { support_pool = 0, query = 1 };

// One image: M x D feature rows, row 0 being the global view. `stored` holds
// the 32-bit values exactly as persisted; `features` is their 64-bit,
// re-normalized counterpart used for all computation.
struct ImageRecord {
  std::uint32_t label = 0;
  Split split = Split::support_pool;
  std::vector<float> stored;
  Matrix features;
  // Planted foreground view indices; empty when unknown.
  std::vector<std::uint16_t> foreground;

  std::span<const double> global() const { return features.row(0); }
};

struct EmbeddingBank {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::size_t patches_per_image = 0;
  std::vector<float> stored_prompts;  // C x D
  Matrix prompts;                     // C x D, re-normalized 64-bit
  std::vector<ImageRecord> images;

  // Throws ValidationError on any broken invariant.
  void validate() const;

  // Equality over the persisted fields.
  bool operator==(const EmbeddingBank& other) const;
};

// Builds an image record from 32-bit rows, deriving the 64-bit view.
ImageRecord make_image(std::uint32_t label, Split split, std::vector<float> stored,
                       std::size_t patches, std::size_t dim,
                       std::vector<std::uint16_t> foreground = {});
// Sets stored_prompts and prompts from 32-bit rows.
void set_prompts(EmbeddingBank& bank, std::vector<float> stored);

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t dim = 32;
  std::size_t patches = 18;
  std::size_t foreground = 4;
  double sigma_foreground = 0.4;
  double sigma_background = 0.6;
  double sigma_text = 0.3;
  std::size_t images_per_class = 40;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
};

EmbeddingBank gen_synthetic(const SyntheticSpec& spec);

struct Episode {
  std::size_t shots = 0;
  // K per class, grouped by class in ascending label order.
  std::vector<std::size_t> supports;
  // Every query-split image, ascending.
  std::vector<std::size_t> queries;
  // Support-pool images not drawn as supports, ascending. Used for
  // hyperparameter selection only.
  std::vector<std::size_t> validation;

  bool operator==(const Episode&) const = default;
};

// Draws K supports per class from the support pool. Throws SamplingError if a
// class has fewer than K pool images.
Episode sample_episode(const EmbeddingBank& bank, std::size_t shots, std::uint64_t seed);
// Throws SamplingError if ids are out of range, overlap, or violate K per class.
void validate_episode(const EmbeddingBank& bank, const Episode& episode);

inline constexpr char kBankMagic[4] = {'T', 'O', 'G', 'B'};
inline constexpr std::uint32_t kBankVersion = 1;

void save_bank(const EmbeddingBank& bank, const std::filesystem::path& path);
EmbeddingBank load_bank(const std::filesystem::path& path);

// FNV-1a 64 over the file bytes.
std::uint64_t file_checksum(const std::filesystem::path& path);

}  // namespace kvdistill
