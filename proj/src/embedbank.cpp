#include "kvdistill/embedbank.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>

#include "kvdistill/binary_io.hpp"
#include "kvdistill/errors.hpp"
#include "kvdistill/kernels.hpp"
#include "kvdistill/rng.hpp"

namespace kvdistill {
namespace {

constexpr double kStoredNormTolerance = 1e-3;

// 32-bit rows -> 64-bit rows re-normalized to unit length.
Matrix widen_rows(const std::vector<float>& stored, std::size_t rows, std::size_t dim) {
  if (stored.size() != rows * dim) throw ValidationError("row block has wrong length");
  Matrix out(rows, dim);
  for (std::size_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double v = stored[r * dim + c];
      if (!std::isfinite(v)) throw ValidationError("non-finite stored value");
      out(r, c) = v;
      n2 += v * v;
    }
    const double n = std::sqrt(n2);
    if (!(n > 1e-12)) {
      // Keep the zero row; validate() reports it with context.
      continue;
    }
    for (std::size_t c = 0; c < dim; ++c) out(r, c) /= n;
  }
  return out;
}

void check_stored_norms(const std::vector<float>& stored, std::size_t rows, std::size_t dim,
                        const std::string& what) {
  for (std::size_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double v = stored[r * dim + c];
      n2 += v * v;
    }
    const double n = std::sqrt(n2);
    if (!(std::abs(n - 1.0) <= kStoredNormTolerance)) {
      throw ValidationError(what + " row " + std::to_string(r) + " has norm " + std::to_string(n) +
                            " (expected 1 within 1e-3)");
    }
  }
}

std::vector<float> narrow(std::span<const double> v) {
  std::vector<float> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [](double x) { return static_cast<float>(x); });
  return out;
}

// Noise vectors have expected norm sigma regardless of dimension.
std::vector<double> gaussian_direction(Rng& rng, std::span<const double> center, double sigma) {
  std::vector<double> v(center.begin(), center.end());
  const double scale = sigma / std::sqrt(static_cast<double>(v.size()));
  for (double& x : v) x += scale * rng.normal();
  return l2_normalize(v);
}

}  // namespace

const char* to_string(ViewKind kind) {
  switch (kind) {
    case ViewKind::global: return "global";
    case ViewKind::grid3x3: return "grid3x3";
    case ViewKind::grid2x2: return "grid2x2";
    case ViewKind::vhalf: return "vhalf";
    case ViewKind::hhalf: return "hhalf";
  }
  return "?";
}

PatchLayout multiscale_layout() {
  PatchLayout layout;
  layout.reserve(18);
  layout.push_back({ViewKind::global, {0.0, 0.0, 1.0, 1.0}});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      layout.push_back({ViewKind::grid3x3, {c / 3.0, r / 3.0, (c + 1) / 3.0, (r + 1) / 3.0}});
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c)
      layout.push_back({ViewKind::grid2x2, {c * 0.5, r * 0.5, (c + 1) * 0.5, (r + 1) * 0.5}});
  layout.push_back({ViewKind::vhalf, {0.0, 0.0, 0.5, 1.0}});
  layout.push_back({ViewKind::vhalf, {0.5, 0.0, 1.0, 1.0}});
  layout.push_back({ViewKind::hhalf, {0.0, 0.0, 1.0, 0.5}});
  layout.push_back({ViewKind::hhalf, {0.0, 0.5, 1.0, 1.0}});
  return layout;
}

const char* to_string(GridMode mode) {
  switch (mode) {
    case GridMode::multiscale: return "multiscale";
    case GridMode::grid2x2: return "grid2x2";
    case GridMode::grid3x3: return "grid3x3";
    case GridMode::global_grid2x2: return "global_grid2x2";
    case GridMode::global_grid2x2_3x3: return "global_grid2x2_3x3";
  }
  return "?";
}

GridMode grid_mode_from_string(const std::string& name) {
  for (GridMode m : {GridMode::multiscale, GridMode::grid2x2, GridMode::grid3x3,
                     GridMode::global_grid2x2, GridMode::global_grid2x2_3x3}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("unknown grid mode '" + name +
                    "' (valid: multiscale, grid2x2, grid3x3, global_grid2x2, global_grid2x2_3x3)");
}

std::vector<std::size_t> view_indices(GridMode mode) {
  const PatchLayout layout = multiscale_layout();
  auto keep = [mode](ViewKind k) {
    switch (mode) {
      case GridMode::multiscale: return true;
      case GridMode::grid2x2: return k == ViewKind::grid2x2;
      case GridMode::grid3x3: return k == ViewKind::grid3x3;
      case GridMode::global_grid2x2: return k == ViewKind::global || k == ViewKind::grid2x2;
      case GridMode::global_grid2x2_3x3:
        return k == ViewKind::global || k == ViewKind::grid2x2 || k == ViewKind::grid3x3;
    }
    return false;
  };
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (keep(layout[i].kind)) out.push_back(i);
  return out;
}

ImageRecord make_image(std::uint32_t label, Split split, std::vector<float> stored,
                       std::size_t patches, std::size_t dim,
                       std::vector<std::uint16_t> foreground) {
  ImageRecord rec;
  rec.label = label;
  rec.split = split;
  rec.features = widen_rows(stored, patches, dim);
  rec.stored = std::move(stored);
  rec.foreground = std::move(foreground);
  return rec;
}

void set_prompts(EmbeddingBank& bank, std::vector<float> stored) {
  bank.prompts = widen_rows(stored, bank.num_classes, bank.dim);
  bank.stored_prompts = std::move(stored);
}

void EmbeddingBank::validate() const {
  if (dim == 0 || num_classes == 0 || patches_per_image == 0) {
    throw ValidationError("bank dimensions must be positive");
  }
  if (stored_prompts.size() != num_classes * dim) throw ValidationError("prompt block has wrong length");
  check_stored_norms(stored_prompts, num_classes, dim, "prompt");
  std::vector<std::size_t> queries_per_class(num_classes, 0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ImageRecord& im = images[i];
    const std::string what = "image " + std::to_string(i);
    if (im.label >= num_classes) throw ValidationError(what + ": label out of range");
    if (im.split != Split::support_pool && im.split != Split::query) {
      throw ValidationError(what + ": unknown split tag");
    }
    if (im.stored.size() != patches_per_image * dim) throw ValidationError(what + ": wrong feature length");
    check_stored_norms(im.stored, patches_per_image, dim, what + " feature");
    if (im.foreground.size() > patches_per_image - 1) {
      throw ValidationError(what + ": too many foreground indices");
    }
    std::set<std::uint16_t> seen;
    for (std::uint16_t f : im.foreground) {
      if (f == 0 || f >= patches_per_image || !seen.insert(f).second) {
        throw ValidationError(what + ": invalid foreground index " + std::to_string(f));
      }
    }
    if (im.split == Split::query) ++queries_per_class[im.label];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (queries_per_class[c] == 0) {
      throw ValidationError("class " + std::to_string(c) + " has no query image");
    }
  }
}

bool EmbeddingBank::operator==(const EmbeddingBank& o) const {
  if (dim != o.dim || num_classes != o.num_classes || patches_per_image != o.patches_per_image ||
      stored_prompts != o.stored_prompts || images.size() != o.images.size()) {
    return false;
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ImageRecord& a = images[i];
    const ImageRecord& b = o.images[i];
    if (a.label != b.label || a.split != b.split || a.stored != b.stored ||
        a.foreground != b.foreground) {
      return false;
    }
  }
  return true;
}

void SyntheticSpec::validate() const {
  if (classes < 1) throw ConfigError("synthetic: classes must be >= 1");
  if (dim < 2) throw ConfigError("synthetic: dim must be >= 2");
  if (patches < 2) throw ConfigError("synthetic: patches must be >= 2");
  if (patches > 65535) throw ConfigError("synthetic: patches must fit in u16");
  if (foreground < 1 || foreground > patches - 1) {
    throw ConfigError("synthetic: foreground count must be in [1, patches-1] = [1, " +
                      std::to_string(patches - 1) + "], got " + std::to_string(foreground));
  }
  if (!(sigma_foreground > 0.0) || !(sigma_background > 0.0) || !(sigma_text > 0.0)) {
    throw ConfigError("synthetic: noise scales must be positive");
  }
  if (images_per_class < 2) throw ConfigError("synthetic: images_per_class must be >= 2");
}

EmbeddingBank gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t C = spec.classes;
  const std::size_t D = spec.dim;
  const std::size_t M = spec.patches;
  Rng rng(spec.seed);

  const std::vector<double> zero(D, 0.0);
  std::vector<std::vector<double>> class_dirs;
  for (std::size_t c = 0; c < C; ++c) class_dirs.push_back(gaussian_direction(rng, zero, 1.0));
  const std::vector<double> background = gaussian_direction(rng, zero, 1.0);

  EmbeddingBank bank;
  bank.dim = D;
  bank.num_classes = C;
  bank.patches_per_image = M;

  std::vector<double> prompts;
  prompts.reserve(C * D);
  for (std::size_t c = 0; c < C; ++c) {
    const auto p = gaussian_direction(rng, class_dirs[c], spec.sigma_text);
    prompts.insert(prompts.end(), p.begin(), p.end());
  }
  set_prompts(bank, narrow(prompts));

  const std::size_t pool_per_class = spec.images_per_class / 2;
  std::vector<std::uint16_t> candidates(M - 1);
  std::iota(candidates.begin(), candidates.end(), std::uint16_t{1});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < spec.images_per_class; ++i) {
      rng.shuffle(candidates.begin(), candidates.end());
      std::vector<std::uint16_t> fg(candidates.begin(),
                                    candidates.begin() + static_cast<std::ptrdiff_t>(spec.foreground));
      std::sort(fg.begin(), fg.end());

      std::vector<std::vector<double>> rows(M);
      std::vector<double> mean(D, 0.0);
      for (std::size_t p = 1; p < M; ++p) {
        const bool is_fg = std::binary_search(fg.begin(), fg.end(), static_cast<std::uint16_t>(p));
        rows[p] = is_fg ? gaussian_direction(rng, class_dirs[c], spec.sigma_foreground)
                        : gaussian_direction(rng, background, spec.sigma_background);
        for (std::size_t d = 0; d < D; ++d) mean[d] += rows[p][d] / static_cast<double>(M - 1);
      }
      rows[0] = l2_normalize(mean);

      std::vector<float> stored;
      stored.reserve(M * D);
      for (const auto& r : rows) {
        const auto f = narrow(r);
        stored.insert(stored.end(), f.begin(), f.end());
      }
      const Split split = i < pool_per_class ? Split::support_pool : Split::query;
      bank.images.push_back(make_image(static_cast<std::uint32_t>(c), split, std::move(stored), M, D,
                                       std::move(fg)));
    }
  }
  bank.validate();
  return bank;
}

Episode sample_episode(const EmbeddingBank& bank, std::size_t shots, std::uint64_t seed) {
  if (shots == 0) throw SamplingError("sample_episode: shots must be >= 1");
  std::vector<std::vector<std::size_t>> pool(bank.num_classes);
  Episode ep;
  ep.shots = shots;
  for (std::size_t i = 0; i < bank.images.size(); ++i) {
    const ImageRecord& im = bank.images[i];
    if (im.split == Split::support_pool) {
      pool[im.label].push_back(i);
    } else {
      ep.queries.push_back(i);
    }
  }
  Rng rng = Rng::stream(seed, 0x5EED);
  for (std::size_t c = 0; c < bank.num_classes; ++c) {
    if (pool[c].size() < shots) {
      throw SamplingError("sample_episode: class " + std::to_string(c) + " has " +
                          std::to_string(pool[c].size()) + " support-pool images, need " +
                          std::to_string(shots));
    }
    rng.shuffle(pool[c].begin(), pool[c].end());
    ep.supports.insert(ep.supports.end(), pool[c].begin(),
                       pool[c].begin() + static_cast<std::ptrdiff_t>(shots));
    ep.validation.insert(ep.validation.end(), pool[c].begin() + static_cast<std::ptrdiff_t>(shots),
                         pool[c].end());
  }
  std::sort(ep.validation.begin(), ep.validation.end());
  return ep;
}

void validate_episode(const EmbeddingBank& bank, const Episode& episode) {
  std::set<std::size_t> seen;
  std::vector<std::size_t> per_class(bank.num_classes, 0);
  for (std::size_t id : episode.supports) {
    if (id >= bank.images.size()) throw SamplingError("episode: support id out of range");
    if (bank.images[id].split != Split::support_pool) {
      throw SamplingError("episode: support " + std::to_string(id) + " is not in the support pool");
    }
    if (!seen.insert(id).second) throw SamplingError("episode: duplicate support id");
    ++per_class[bank.images[id].label];
  }
  for (std::size_t c = 0; c < bank.num_classes; ++c) {
    if (per_class[c] != episode.shots) {
      throw SamplingError("episode: class " + std::to_string(c) + " has " +
                          std::to_string(per_class[c]) + " supports, expected " +
                          std::to_string(episode.shots));
    }
  }
  for (const auto* ids : {&episode.queries, &episode.validation}) {
    for (std::size_t id : *ids) {
      if (id >= bank.images.size()) throw SamplingError("episode: id out of range");
      if (!seen.insert(id).second) throw SamplingError("episode: id " + std::to_string(id) + " reused");
    }
  }
  if (episode.queries.empty()) throw SamplingError("episode: empty query set");
}

void save_bank(const EmbeddingBank& bank, const std::filesystem::path& path) {
  bank.validate();
  binary::Writer w;
  w.bytes(kBankMagic, 4);
  w.u32(kBankVersion);
  w.u32(static_cast<std::uint32_t>(bank.dim));
  w.u32(static_cast<std::uint32_t>(bank.num_classes));
  w.u32(static_cast<std::uint32_t>(bank.patches_per_image));
  w.u32(static_cast<std::uint32_t>(bank.images.size()));
  for (float v : bank.stored_prompts) w.f32(v);
  for (const ImageRecord& im : bank.images) {
    w.u32(im.label);
    w.u8(static_cast<std::uint8_t>(im.split));
    w.u16(static_cast<std::uint16_t>(im.foreground.size()));
    for (std::uint16_t f : im.foreground) w.u16(f);
    for (float v : im.stored) w.f32(v);
  }
  w.write_file(path);
}

EmbeddingBank load_bank(const std::filesystem::path& path) {
  binary::Reader r = binary::Reader::from_file(path, "TOGB");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kBankMagic, 4) != 0) {
    throw FormatError("not a TOGB bank (bad magic) in " + path.string());
  }
  const std::uint32_t version = r.u32();
  if (version != kBankVersion) {
    throw FormatError("unsupported TOGB version " + std::to_string(version));
  }
  EmbeddingBank bank;
  bank.dim = r.u32();
  bank.num_classes = r.u32();
  bank.patches_per_image = r.u32();
  const std::uint32_t count = r.u32();
  if (bank.dim == 0 || bank.num_classes == 0 || bank.patches_per_image == 0) {
    throw FormatError("TOGB header has a zero dimension");
  }
  // Each image needs at least 7 header bytes plus its feature block.
  const std::size_t block = bank.patches_per_image * bank.dim;
  if (bank.num_classes * bank.dim * 4 > r.remaining() ||
      static_cast<std::size_t>(count) * (7 + 4 * block) > r.remaining()) {
    throw IoError("truncated TOGB file: header promises more data than present");
  }
  std::vector<float> prompts(bank.num_classes * bank.dim);
  for (float& v : prompts) v = r.f32();
  set_prompts(bank, std::move(prompts));
  bank.images.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t label = r.u32();
    const std::uint8_t split = r.u8();
    if (split > 1) throw FormatError("TOGB image " + std::to_string(i) + ": bad split tag");
    std::vector<std::uint16_t> fg(r.u16());
    for (auto& f : fg) f = r.u16();
    std::vector<float> stored(block);
    for (float& v : stored) v = r.f32();
    bank.images.push_back(make_image(label, static_cast<Split>(split), std::move(stored),
                                     bank.patches_per_image, bank.dim, std::move(fg)));
  }
  if (r.remaining() != 0) throw FormatError("TOGB file has trailing bytes");
  bank.validate();
  return bank;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace kvdistill
