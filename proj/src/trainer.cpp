#include "kvdistill/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

#include "kvdistill/binary_io.hpp"
#include "kvdistill/errors.hpp"
#include "kvdistill/kernels.hpp"

namespace kvdistill {
namespace {

std::vector<std::size_t> resolve_views(const EmbeddingBank& bank, GridMode mode) {
  if (mode == GridMode::multiscale) {
    std::vector<std::size_t> all(bank.patches_per_image);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  if (bank.patches_per_image != multiscale_layout().size()) {
    throw ConfigError(std::string("grid mode ") + to_string(mode) + " needs an 18-view bank");
  }
  return view_indices(mode);
}

TeacherConfig resolve_teacher(const TrainConfig& cfg, const EmbeddingBank& bank) {
  TeacherConfig t = cfg.teacher;
  t.input_dim = bank.dim;
  if (t.hidden == 0) t.hidden = bank.dim;
  return t;
}

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

double cosine_lr(std::size_t t, std::size_t total, double lr0) {
  if (total == 0 || t > total) {
    throw ContractError("cosine_lr: need 0 <= t <= T, got t=" + std::to_string(t) +
                        " T=" + std::to_string(total));
  }
  if (t == total) return 0.0;
  const double ratio = static_cast<double>(t) / static_cast<double>(total);
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * ratio));
}

void adamw_step(Matrix& param, const Matrix& grad, AdamState& state, double lr, const AdamConfig& cfg) {
  if (!param.same_shape(grad)) throw DimensionError("adamw_step: parameter and gradient shapes differ");
  if (state.m.empty() && state.step == 0) {
    state.m = Matrix(param.rows(), param.cols());
    state.v = Matrix(param.rows(), param.cols());
  }
  if (!state.m.same_shape(param) || !state.v.same_shape(param)) {
    throw DimensionError("adamw_step: optimizer state shape differs from parameter");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto p = param.data();
  auto g = grad.data();
  auto m = state.m.data();
  auto v = state.v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] -= lr * cfg.weight_decay * p[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("lr0 must be > 0");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam.eps > 0.0) || !(adam.weight_decay >= 0.0)) {
    throw ConfigError("adam eps must be > 0 and weight decay >= 0");
  }
  loss.validate();
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  if (!(sigma_aug >= 0.0)) throw ConfigError("sigma_aug must be >= 0");
  TeacherConfig t = teacher;
  if (t.input_dim == 0) t.input_dim = 1;
  if (t.hidden == 0) t.hidden = t.encoder_heads * t.graph_heads;
  t.validate();
  if (search_alpha_beta && (alpha_grid.empty() || beta_grid.empty())) {
    throw ConfigError("alpha/beta search needs non-empty grids");
  }
}

bool TrainConfig::teacher_active() const { return !student_only() || force_teacher; }

Matrix global_rows(const EmbeddingBank& bank, std::span<const std::size_t> ids) {
  Matrix out(ids.size(), bank.dim);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto g = bank.images.at(ids[i]).global();
    std::copy(g.begin(), g.end(), out.row(i).begin());
  }
  return out;
}

Matrix patch_rows(const EmbeddingBank& bank, std::span<const std::size_t> ids,
                  std::span<const std::size_t> views) {
  Matrix out(ids.size() * views.size(), bank.dim);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Matrix& f = bank.images.at(ids[i]).features;
    for (std::size_t k = 0; k < views.size(); ++k) {
      const auto src = f.row(views[k]);
      std::copy(src.begin(), src.end(), out.row(i * views.size() + k).begin());
    }
  }
  return out;
}

std::vector<std::size_t> labels_of(const EmbeddingBank& bank, std::span<const std::size_t> ids) {
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) out.push_back(bank.images.at(id).label);
  return out;
}

Matrix jitter_rows(const Matrix& rows, double sigma, Rng& rng) {
  Matrix out = rows;
  const double scale = sigma / std::sqrt(static_cast<double>(rows.cols()));
  for (double& v : out.data()) v += scale * rng.normal();
  return normalize_rows(out);
}

double argmax_accuracy(const Matrix& logits, std::span<const std::size_t> labels) {
  if (logits.rows() == 0) throw ContractError("accuracy of an empty set");
  if (labels.size() != logits.rows()) throw DimensionError("argmax_accuracy: label count != rows");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels[r]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

Matrix query_logits(const CacheModel& model, const EmbeddingBank& bank, const Episode& episode) {
  if (episode.queries.empty()) throw ContractError("evaluate: empty query set");
  return test_logits_batch(global_rows(bank, episode.queries), model, bank.prompts);
}

double evaluate(const CacheModel& model, const EmbeddingBank& bank, const Episode& episode) {
  return argmax_accuracy(query_logits(model, bank, episode), labels_of(bank, episode.queries));
}

std::optional<double> filter_precision(const EmbeddingBank& bank, std::span<const std::size_t> ids,
                                       const std::vector<std::vector<std::size_t>>& kept_views) {
  if (kept_views.size() != ids.size()) throw DimensionError("filter_precision: one kept set per image");
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& fg = bank.images.at(ids[i]).foreground;
    if (fg.empty()) continue;
    std::size_t kept = 0;
    std::size_t hits = 0;
    for (std::size_t v : kept_views[i]) {
      if (v == 0) continue;
      ++kept;
      if (std::find(fg.begin(), fg.end(), v) != fg.end()) ++hits;
    }
    if (kept == 0) continue;
    total += static_cast<double>(hits) / static_cast<double>(kept);
    ++counted;
  }
  if (counted == 0) return std::nullopt;
  return total / static_cast<double>(counted);
}

std::pair<double, double> search_alpha_beta(const CacheModel& model, const EmbeddingBank& bank,
                                            std::span<const std::size_t> ids,
                                            std::span<const double> alphas,
                                            std::span<const double> betas) {
  if (ids.empty()) throw ContractError("search_alpha_beta: empty validation set");
  const Matrix z = global_rows(bank, ids);
  const std::vector<std::size_t> labels = labels_of(bank, ids);
  double best = -1.0;
  std::pair<double, double> chosen{model.alpha, model.beta};
  CacheModel trial = model;
  for (double a : alphas) {
    for (double b : betas) {
      trial.alpha = a;
      trial.beta = b;
      const double acc = argmax_accuracy(test_logits_batch(z, trial, bank.prompts), labels);
      if (acc > best) {
        best = acc;
        chosen = {a, b};
      }
    }
  }
  return chosen;
}

TeacherEval teacher_eval(const TeacherParams& teacher, const EmbeddingBank& bank,
                         std::span<const std::size_t> ids, GridMode grid_mode, std::size_t chunk) {
  if (chunk == 0) throw ContractError("teacher_eval: chunk must be positive");
  const std::vector<std::size_t> views = resolve_views(bank, grid_mode);
  TeacherEval out{Matrix(ids.size(), bank.num_classes), {}};
  out.kept_views.reserve(ids.size());
  for (std::size_t lo = 0; lo < ids.size(); lo += chunk) {
    const std::size_t n = std::min(chunk, ids.size() - lo);
    const auto part = ids.subspan(lo, n);
    Tape t;
    Binder bind(t, false);
    TeacherOutput res = teacher_forward(bind, teacher, patch_rows(bank, part, views), bank.prompts, n);
    const Matrix& l = res.logits.value();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(l.row(i).begin(), l.row(i).end(), out.logits.row(lo + i).begin());
      std::vector<std::size_t> kv;
      kv.reserve(res.kept[i].size());
      for (std::size_t k : res.kept[i]) kv.push_back(views[k]);
      out.kept_views.push_back(std::move(kv));
    }
  }
  return out;
}

TrainResult train(const EmbeddingBank& bank, const Episode& episode, const TrainConfig& config) {
  config.validate();
  validate_episode(bank, episode);
  const std::vector<std::size_t> views = resolve_views(bank, config.grid_mode);
  const TeacherConfig tcfg = resolve_teacher(config, bank);
  const LossWeights& w = config.loss;

  CacheEntries cache = build_cache(bank, episode);
  const std::vector<std::size_t> labels = labels_of(bank, episode.supports);
  const Matrix support_global = global_rows(bank, episode.supports);
  const bool teacher_on = config.teacher_active();
  const Matrix support_patches = teacher_on ? patch_rows(bank, episode.supports, views) : Matrix();
  const std::size_t n = episode.supports.size();

  Param adapter(Matrix::identity(bank.dim));
  TrainResult result{CacheModel{}, init_teacher(tcfg, config.seed), Metrics{}};
  TeacherParams& teacher = result.teacher;

  std::vector<Param*> params{&adapter};
  if (teacher_on) {
    for (NamedParam& np : teacher.parameters()) params.push_back(np.param);
  }
  std::vector<AdamState> states(params.size());
  Rng student_rng = Rng::stream(config.seed, 0x57D);
  Rng teacher_rng = Rng::stream(config.seed, 0x7EA);

  Metrics& metrics = result.metrics;
  metrics.epochs.reserve(config.epochs);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    try {
      const Matrix z =
          config.sigma_aug > 0.0 ? jitter_rows(support_global, config.sigma_aug, student_rng) : support_global;
      Matrix patches;
      if (teacher_on) {
        patches = config.sigma_aug > 0.0 ? jitter_rows(support_patches, config.sigma_aug, teacher_rng)
                                         : support_patches;
      }
      Tape t;
      Binder bind(t, true);
      Var l_zs = t.constant(scale(matmul_nt(z, bank.prompts), w.tau));
      Var l_cache = cache_logits_ad(bind(adapter), z, cache.keys, cache.values, config.beta);
      std::optional<Var> graph;
      if (teacher_on) graph = teacher_forward(bind, teacher, patches, bank.prompts, n).logits;
      LossTerms terms = total_loss_ad(l_zs, l_cache, graph, labels, w);
      for (Param* p : params) p->zero_grad();
      t.backward(terms.total);
      for (Param* p : params) ensure_finite(p->grad, "gradient");
      const double lr = cosine_lr(epoch, config.epochs, config.lr0);
      for (std::size_t i = 0; i < params.size(); ++i) {
        adamw_step(params[i]->value, params[i]->grad, states[i], lr, config.adam);
      }
      ensure_finite(adapter.value, "adapter");
      metrics.epochs.push_back({epoch, terms.total.value()(0, 0), terms.ce.value()(0, 0),
                                terms.focal.value()(0, 0), lr});
    } catch (const NonFiniteError& e) {
      throw DivergenceError(static_cast<int>(epoch), e.what());
    } catch (const NormalizationError& e) {
      throw DivergenceError(static_cast<int>(epoch), e.what());
    }
  }

  CacheModel model{std::move(cache.keys), std::move(cache.values), adapter.value, w.alpha, config.beta,
                   w.tau};
  if (config.search_alpha_beta && !episode.validation.empty()) {
    const auto [a, b] = search_alpha_beta(model, bank, episode.validation, config.alpha_grid, config.beta_grid);
    model.alpha = a;
    model.beta = b;
  }
  model.validate();

  const std::vector<std::size_t> qlabels = labels_of(bank, episode.queries);
  metrics.query_logits = query_logits(model, bank, episode);
  metrics.query_accuracy = argmax_accuracy(metrics.query_logits, qlabels);
  CacheModel zs = model;
  zs.alpha = 0.0;
  metrics.zero_shot_accuracy = evaluate(zs, bank, episode);
  CacheModel free_model = model;
  free_model.adapter = Matrix::identity(bank.dim);
  metrics.training_free_accuracy = evaluate(free_model, bank, episode);
  metrics.alpha = model.alpha;
  metrics.beta = model.beta;
  if (teacher_on) {
    TeacherEval te = teacher_eval(teacher, bank, episode.queries, config.grid_mode);
    metrics.teacher_accuracy = argmax_accuracy(te.logits, qlabels);
    const bool filtering = tcfg.use_filter && tcfg.keep_fraction < 1.0;
    if (filtering) metrics.filter_precision = filter_precision(bank, episode.queries, te.kept_views);
  }
  result.model = std::move(model);
  return result;
}

void write_metrics_csv(const Metrics& metrics, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "epoch,loss,ce,focal,lr\n";
  for (const EpochRecord& e : metrics.epochs) {
    os << e.epoch << ',' << format_double(e.loss) << ',' << format_double(e.ce) << ','
       << format_double(e.focal) << ',' << format_double(e.lr) << '\n';
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << os.str();
  if (!f) throw IoError("write failed for " + path.string());
}

namespace {

void write_teacher_config(binary::Writer& w, const TeacherConfig& c) {
  for (std::size_t v : {c.input_dim, c.hidden, c.encoder_layers, c.encoder_heads, c.graph_layers,
                        c.graph_heads, c.ffn_multiplier}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.f64(c.keep_fraction);
  w.u8(c.use_mgt ? 1 : 0);
  w.u8(c.use_text_edges ? 1 : 0);
  w.u8(c.use_filter ? 1 : 0);
}

TeacherConfig read_teacher_config(binary::Reader& r) {
  TeacherConfig c;
  c.input_dim = r.u32();
  c.hidden = r.u32();
  c.encoder_layers = r.u32();
  c.encoder_heads = r.u32();
  c.graph_layers = r.u32();
  c.graph_heads = r.u32();
  c.ffn_multiplier = r.u32();
  c.keep_fraction = r.f64();
  c.use_mgt = r.u8() != 0;
  c.use_text_edges = r.u8() != 0;
  c.use_filter = r.u8() != 0;
  return c;
}

}  // namespace

void save_checkpoint(const CacheModel& model, TeacherParams& teacher, const std::filesystem::path& path) {
  model.validate();
  binary::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const auto d = static_cast<std::uint32_t>(model.dim());
  const auto c = static_cast<std::uint32_t>(model.num_classes());
  const auto n = static_cast<std::uint32_t>(model.num_supports());
  w.u32(d);
  w.u32(c);
  w.u32(n);
  w.f64(model.tau);
  w.f64(model.alpha);
  w.f64(model.beta);
  for (const Matrix* m : {&model.keys, &model.values, &model.adapter})
    for (double v : m->data()) w.f64(v);
  write_teacher_config(w, teacher.config);
  const auto named = teacher.parameters();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const NamedParam& np : named) {
    w.u32(static_cast<std::uint32_t>(np.name.size()));
    w.bytes(np.name.data(), np.name.size());
    w.u32(static_cast<std::uint32_t>(np.param->value.rows()));
    w.u32(static_cast<std::uint32_t>(np.param->value.cols()));
    for (double v : np.param->value.data()) w.f64(v);
  }
  w.write_file(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  binary::Reader r = binary::Reader::from_file(path, "checkpoint");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError("not a checkpoint file (bad magic) in " + path.string());
  }
  if (r.u32() != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const std::size_t d = r.u32();
  const std::size_t c = r.u32();
  const std::size_t n = r.u32();
  Checkpoint ck;
  ck.model.tau = r.f64();
  ck.model.alpha = r.f64();
  ck.model.beta = r.f64();
  auto read_block = [&r](std::size_t rows, std::size_t cols) {
    std::vector<double> data(rows * cols);
    for (double& v : data) v = r.f64();
    try {
      return Matrix(rows, cols, std::move(data));
    } catch (const NonFiniteError&) {
      throw FormatError("checkpoint holds a non-finite value");
    }
  };
  ck.model.keys = read_block(n, d);
  ck.model.values = read_block(n, c);
  ck.model.adapter = read_block(d, d);
  ck.model.validate();
  const TeacherConfig tc = read_teacher_config(r);
  try {
    tc.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint teacher config: ") + e.what());
  }
  ck.teacher = init_teacher(tc, 0);
  std::map<std::string, Param*> by_name;
  for (NamedParam& np : ck.teacher.parameters()) by_name[np.name] = np.param;
  const std::size_t count = r.u32();
  if (count != by_name.size()) throw FormatError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < count; ++i) {
    std::string name(r.u32(), '\0');
    r.bytes(name.data(), name.size());
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint has unknown parameter " + name);
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    Param& p = *it->second;
    if (rows != p.value.rows() || cols != p.value.cols()) {
      throw FormatError("checkpoint parameter " + name + " has the wrong shape");
    }
    p = Param(read_block(rows, cols));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in checkpoint");
  return ck;
}

const std::vector<Arm>& ablation_arms() {
  static const std::vector<Arm> arms = {
      {"default", "full method"},
      {"student_only", "delta = lambda = 0 (cache adapter alone)"},
      {"ce_only", "lambda = 0: mixture cross-entropy only"},
      {"ce_graph", "gamma_focal = 0: plain cross-entropy on the graph branch"},
      {"pool_25", "keep 25% of patch nodes"},
      {"pool_50", "keep 50% of patch nodes"},
      {"pool_75", "keep 75% of patch nodes"},
      {"pool_all", "sum over all patch nodes"},
      {"grid_multiscale", "18 multi-scale views"},
      {"grid_2x2", "2x2 grid cells only"},
      {"grid_3x3", "3x3 grid cells only"},
      {"grid_global_2x2", "global view + 2x2 grid"},
      {"grid_global_2x2_3x3", "global view + 2x2 + 3x3 grids"},
      {"no_mgt", "pool unimodal features, no graph layers"},
      {"no_text", "patch-only graph, no text nodes"},
      {"no_filter", "no node filtering"},
      {"no_transformer", "no unimodal Transformer layers"},
  };
  return arms;
}

TrainConfig apply_arm(const TrainConfig& base, const std::string& arm) {
  TrainConfig c = base;
  if (arm == "default" || arm == "grid_multiscale") {
    if (arm == "grid_multiscale") c.grid_mode = GridMode::multiscale;
  } else if (arm == "student_only") {
    c.loss.delta = 0.0;
    c.loss.lambda = 0.0;
  } else if (arm == "ce_only") {
    c.loss.lambda = 0.0;
  } else if (arm == "ce_graph") {
    c.loss.gamma_focal = 0.0;
  } else if (arm == "pool_25") {
    c.teacher.keep_fraction = 0.25;
  } else if (arm == "pool_50") {
    c.teacher.keep_fraction = 0.5;
  } else if (arm == "pool_75") {
    c.teacher.keep_fraction = 0.75;
  } else if (arm == "pool_all") {
    c.teacher.keep_fraction = 1.0;
  } else if (arm == "grid_2x2") {
    c.grid_mode = GridMode::grid2x2;
  } else if (arm == "grid_3x3") {
    c.grid_mode = GridMode::grid3x3;
  } else if (arm == "grid_global_2x2") {
    c.grid_mode = GridMode::global_grid2x2;
  } else if (arm == "grid_global_2x2_3x3") {
    c.grid_mode = GridMode::global_grid2x2_3x3;
  } else if (arm == "no_mgt") {
    c.teacher.use_mgt = false;
  } else if (arm == "no_text") {
    c.teacher.use_text_edges = false;
  } else if (arm == "no_filter") {
    c.teacher.use_filter = false;
  } else if (arm == "no_transformer") {
    c.teacher.encoder_layers = 0;
  } else {
    std::string valid;
    for (const Arm& a : ablation_arms()) valid += (valid.empty() ? "" : ", ") + a.name;
    throw ConfigError("unknown arm '" + arm + "'; valid arms: " + valid);
  }
  return c;
}

const AblationRun& AblationTable::run(std::size_t arm, std::size_t shot, std::size_t seed) const {
  return runs.at((arm * shots.size() + shot) * seeds.size() + seed);
}

double AblationTable::mean(std::size_t arm, std::size_t shot) const {
  double total = 0.0;
  for (std::size_t s = 0; s < seeds.size(); ++s) total += run(arm, shot, s).accuracy;
  return total / static_cast<double>(seeds.size());
}

std::optional<double> AblationTable::mean_filter_precision(std::size_t arm, std::size_t shot) const {
  double total = 0.0;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    const auto& fp = run(arm, shot, s).filter_precision;
    if (!fp) return std::nullopt;
    total += *fp;
  }
  return total / static_cast<double>(seeds.size());
}

AblationTable run_ablation(const EmbeddingBank& bank, std::span<const std::size_t> shots,
                           std::span<const std::string> arms, std::span<const std::uint64_t> seeds,
                           const TrainConfig& base, std::size_t jobs) {
  if (arms.empty() || shots.empty() || seeds.empty()) {
    throw ConfigError("ablation needs at least one arm, shot count and seed");
  }
  std::vector<TrainConfig> configs;
  for (const std::string& a : arms) configs.push_back(apply_arm(base, a));
  AblationTable table{{arms.begin(), arms.end()}, {shots.begin(), shots.end()}, {seeds.begin(), seeds.end()}, {}};
  const std::size_t cells = arms.size() * shots.size() * seeds.size();
  table.runs.resize(cells);
  std::vector<std::exception_ptr> errors(cells);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < cells; i = next++) {
      const std::size_t s = i % seeds.size();
      const std::size_t k = (i / seeds.size()) % shots.size();
      const std::size_t a = i / (seeds.size() * shots.size());
      try {
        TrainConfig cfg = configs[a];
        cfg.seed = seeds[s];
        const Episode ep = sample_episode(bank, shots[k], seeds[s]);
        const TrainResult res = train(bank, ep, cfg);
        table.runs[i] = {arms[a], shots[k], seeds[s], res.metrics.query_accuracy,
                         res.metrics.teacher_accuracy, res.metrics.filter_precision};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, cells);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return table;
}

void write_ablation_csv(const AblationTable& table, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "shots";
  for (const std::string& a : table.arms) os << ',' << a;
  os << '\n';
  for (std::size_t k = 0; k < table.shots.size(); ++k) {
    os << table.shots[k];
    for (std::size_t a = 0; a < table.arms.size(); ++a) os << ',' << format_double(table.mean(a, k));
    os << '\n';
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << os.str();
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace kvdistill
