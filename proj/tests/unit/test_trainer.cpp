#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "kvdistill/config_io.hpp"
#include "kvdistill/errors.hpp"
#include "kvdistill/kernels.hpp"
#include "kvdistill/trainer.hpp"
#include "oracles.hpp"
#include "reference_trainer.hpp"

using namespace kvdistill;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 12;
  c.teacher.encoder_layers = 1;
  c.teacher.encoder_heads = 2;
  c.teacher.graph_layers = 1;
  c.teacher.graph_heads = 2;
  return c;
}

oracle::StudentProblem student_problem(const EmbeddingBank& bank, const Episode& ep, const TrainConfig& c) {
  oracle::StudentProblem p;
  for (std::size_t id : ep.supports) {
    const auto g = bank.images[id].features.row(0);
    p.z.emplace_back(g.begin(), g.end());
    p.labels.push_back(bank.images[id].label);
  }
  p.keys = p.z;
  for (std::size_t c2 = 0; c2 < bank.num_classes; ++c2)
    p.prompts.emplace_back(bank.prompts.row(c2).begin(), bank.prompts.row(c2).end());
  p.classes = bank.num_classes;
  p.alpha = c.loss.alpha;
  p.beta = c.beta;
  p.tau = c.loss.tau;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("cosine learning-rate schedule") {
  CHECK(cosine_lr(0, 100, 1e-3) == 1e-3);
  CHECK(cosine_lr(100, 100, 1e-3) == 0.0);
  CHECK(cosine_lr(50, 100, 1e-3) == 5e-4);
  double prev = 1.0;
  for (std::size_t t = 0; t <= 37; ++t) {
    const double lr = cosine_lr(t, 37, 0.5);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3), ContractError);
}

TEST_CASE("AdamW steps") {
  AdamConfig no_decay;
  no_decay.weight_decay = 0.0;
  Matrix p{{0.3, -0.2}};
  AdamState s;
  adamw_step(p, Matrix(1, 2), s, 0.1, no_decay);
  CHECK(p == Matrix{{0.3, -0.2}});

  AdamConfig tiny_eps = no_decay;
  tiny_eps.eps = 1e-300;
  Matrix q{{2.0}};
  AdamState sq;
  adamw_step(q, Matrix{{1.0}}, sq, 0.01, tiny_eps);
  CHECK(std::abs(q(0, 0) - (2.0 - 0.01)) < 1e-15);

  // Five steps on f(x) = 0.5 * sum(c_i x_i^2) against the reference recurrence.
  Rng rng(1);
  AdamConfig cfg;
  cfg.weight_decay = 0.05;
  Matrix x = oracle::random_matrix(rng, 2, 3);
  const Matrix curv = oracle::random_matrix(rng, 2, 3, 4.0);
  std::vector<double> ref(x.data().begin(), x.data().end());
  oracle::AdamRef adam;
  adam.wd = 0.05;
  AdamState st;
  for (int k = 0; k < 5; ++k) {
    Matrix g(2, 3);
    std::vector<double> gr(6);
    for (std::size_t i = 0; i < 6; ++i) {
      g.data()[i] = curv.data()[i] * x.data()[i];
      gr[i] = curv.data()[i] * ref[i];
    }
    adamw_step(x, g, st, 0.02, cfg);
    adam.update(ref, gr, 0.02);
  }
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(x.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("student-only training reduces to the reference trainer") {
  const EmbeddingBank bank = fixture::small_bank(2);
  const Episode ep = sample_episode(bank, 2, 0);
  TrainConfig c = small_config();
  c.epochs = 20;
  c.sigma_aug = 0.0;
  c.loss.delta = 0.0;
  c.loss.lambda = 0.0;
  const TrainResult r = train(bank, ep, c);
  std::vector<double> w;
  const auto ref = oracle::train_student(student_problem(bank, ep, c), c.epochs, c.lr0, &w);
  REQUIRE(r.metrics.epochs.size() == ref.size());
  for (std::size_t e = 0; e < ref.size(); ++e) CHECK(std::abs(r.metrics.epochs[e].loss - ref[e]) < 1e-9);
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(r.model.adapter.data()[i] - w[i]) < 1e-9);

  // Running the detached teacher alongside changes nothing.
  c.force_teacher = true;
  const TrainResult forced = train(bank, ep, c);
  for (std::size_t e = 0; e < ref.size(); ++e) CHECK(forced.metrics.epochs[e].loss == r.metrics.epochs[e].loss);
  CHECK(forced.model == r.model);
  CHECK(forced.metrics.teacher_accuracy.has_value());
}

TEST_CASE("default training lowers the loss and is deterministic") {
  SyntheticSpec s;
  const EmbeddingBank bank = gen_synthetic(s);
  const Episode ep = sample_episode(bank, 1, 0);
  TrainConfig c;
  c.epochs = 30;
  const TrainResult a = train(bank, ep, c);
  CHECK(a.metrics.epochs.back().loss < a.metrics.epochs.front().loss);
  CHECK(a.metrics.epochs.size() == 30);
  const TrainResult b = train(bank, ep, c);
  CHECK(a.metrics == b.metrics);
  CHECK(a.model == b.model);
  CHECK(a.metrics.query_accuracy >= 0.0);
  CHECK(a.metrics.query_accuracy <= 1.0);
  REQUIRE(a.metrics.filter_precision.has_value());
  CHECK(*a.metrics.filter_precision >= 0.0);
  CHECK(*a.metrics.filter_precision <= 1.0);
}

TEST_CASE("evaluation on constructed banks") {
  const std::size_t C = 3, D = 4, M = 2;
  EmbeddingBank bank;
  bank.dim = D;
  bank.num_classes = C;
  bank.patches_per_image = M;
  std::vector<float> prompts(C * D, 0.0f);
  for (std::size_t c = 0; c < C; ++c) prompts[c * D + c] = 1.0f;
  set_prompts(bank, prompts);
  for (std::size_t c = 0; c < C; ++c) {
    for (Split sp : {Split::support_pool, Split::query}) {
      std::vector<float> rows(M * D, 0.0f);
      rows[c] = 1.0f;
      rows[D + 3] = 1.0f;
      bank.images.push_back(make_image(static_cast<std::uint32_t>(c), sp, rows, M, D));
    }
  }
  bank.validate();
  const Episode ep = sample_episode(bank, 1, 0);
  CacheModel m = make_cache_model(bank, ep);
  m.alpha = 0.0;
  CHECK(evaluate(m, bank, ep) == 1.0);

  EmbeddingBank wrong = bank;
  for (ImageRecord& im : wrong.images)
    if (im.split == Split::query) im.label = (im.label + 1) % C;
  CHECK(evaluate(m, wrong, ep) == 0.0);

  Episode empty = ep;
  empty.queries.clear();
  CHECK_THROWS_AS(evaluate(m, bank, empty), ContractError);
}

TEST_CASE("argmax accuracy breaks ties toward the first class") {
  const Matrix logits{{1, 1, 0}, {0, 2, 2}};
  CHECK(argmax_accuracy(logits, std::vector<std::size_t>{0, 1}) == 1.0);
  CHECK(argmax_accuracy(logits, std::vector<std::size_t>{1, 2}) == 0.0);
}

TEST_CASE("training-free accuracy matches an independent implementation") {
  SyntheticSpec s;
  s.seed = 4;
  const EmbeddingBank bank = gen_synthetic(s);
  const Episode ep = sample_episode(bank, 4, 1);
  TrainConfig c = small_config();
  c.loss.delta = 0.0;
  c.loss.lambda = 0.0;
  c.epochs = 2;
  c.search_alpha_beta = false;
  const TrainResult r = train(bank, ep, c);
  std::size_t correct = 0;
  for (std::size_t q : ep.queries) {
    const auto z = bank.images[q].features.row(0);
    std::vector<double> l(bank.num_classes);
    for (std::size_t k = 0; k < bank.num_classes; ++k) l[k] = c.loss.tau * dot(z, bank.prompts.row(k));
    for (std::size_t id : ep.supports)
      l[bank.images[id].label] +=
          c.loss.alpha * std::exp(-c.beta * (1.0 - dot(z, bank.images[id].features.row(0))));
    const auto best = std::max_element(l.begin(), l.end()) - l.begin();
    correct += static_cast<std::size_t>(best) == bank.images[q].label;
  }
  CHECK(r.metrics.training_free_accuracy == static_cast<double>(correct) / ep.queries.size());
}

TEST_CASE("feature jitter keeps rows unit length") {
  Rng rng(3);
  const Matrix rows = oracle::random_unit_rows(rng, 5, 8);
  Rng j(9);
  const Matrix out = jitter_rows(rows, 0.1, j);
  for (std::size_t r = 0; r < 5; ++r) CHECK(std::abs(norm2(out.row(r)) - 1.0) < 1e-12);
  CHECK(max_abs_diff(out, rows) > 0.0);

  const Matrix wide = oracle::random_unit_rows(rng, 200, 64);
  const Matrix shifted = jitter_rows(wide, 0.05, j);
  double mean_cos = 0.0;
  for (std::size_t r = 0; r < 200; ++r) mean_cos += dot(wide.row(r), shifted.row(r)) / 200.0;
  CHECK(mean_cos > 0.995);
  CHECK(mean_cos < 0.9995);
}

TEST_CASE("filter precision") {
  SyntheticSpec s;
  s.classes = 2;
  s.images_per_class = 2;
  const EmbeddingBank bank = gen_synthetic(s);
  const std::vector<std::size_t> ids{0, 1};
  std::vector<std::vector<std::size_t>> kept;
  for (std::size_t id : ids) {
    const auto& fg = bank.images[id].foreground;
    kept.push_back({0, fg[0], fg[1]});
  }
  CHECK(*filter_precision(bank, ids, kept) == 1.0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& fg = bank.images[ids[i]].foreground;
    std::vector<std::size_t> miss;
    for (std::size_t v = 1; v < bank.patches_per_image && miss.size() < 3; ++v)
      if (std::find(fg.begin(), fg.end(), v) == fg.end()) miss.push_back(v);
    kept[i] = {fg[0], miss[0], miss[1], miss[2]};
  }
  CHECK(std::abs(*filter_precision(bank, ids, kept) - 0.25) < 1e-15);
}

TEST_CASE("alpha and beta search keeps the earliest best pair") {
  const EmbeddingBank bank = fixture::small_bank(5);
  const Episode ep = sample_episode(bank, 2, 3);
  const CacheModel m = make_cache_model(bank, ep);
  const std::vector<double> alphas{1.0, 1.0}, betas{5.5};
  const auto [a, b] = search_alpha_beta(m, bank, ep.validation, alphas, betas);
  CHECK(a == 1.0);
  CHECK(b == 5.5);
  double best = -1.0;
  const std::vector<double> grid_a{0.5, 2.0, 8.0}, grid_b{1.0, 5.5};
  for (double x : grid_a)
    for (double y : grid_b) {
      CacheModel t = m;
      t.alpha = x;
      t.beta = y;
      Episode v;
      v.queries = ep.validation;
      best = std::max(best, evaluate(t, bank, v));
    }
  const auto [sa, sb] = search_alpha_beta(m, bank, ep.validation, grid_a, grid_b);
  CacheModel chosen = m;
  chosen.alpha = sa;
  chosen.beta = sb;
  Episode v;
  v.queries = ep.validation;
  CHECK(evaluate(chosen, bank, v) == best);
}

TEST_CASE("metrics csv, checkpoints and exported students") {
  const EmbeddingBank bank = fixture::small_bank(6);
  const Episode ep = sample_episode(bank, 1, 2);
  TrainConfig c = small_config();
  c.epochs = 3;
  TrainResult r = train(bank, ep, c);
  const fs::path dir = fs::temp_directory_path() / "kvd_trainer_test";
  fs::create_directories(dir);
  write_metrics_csv(r.metrics, dir / "m.csv");
  std::istringstream lines(slurp(dir / "m.csv"));
  std::string line;
  std::getline(lines, line);
  CHECK(line == "epoch,loss,ce,focal,lr");
  std::size_t n = 0;
  while (std::getline(lines, line)) ++n;
  CHECK(n == 3);

  save_checkpoint(r.model, r.teacher, dir / "c.togc");
  Checkpoint ck = load_checkpoint(dir / "c.togc");
  CHECK(ck.model == r.model);
  auto a = r.teacher.parameters();
  auto b = ck.teacher.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].param->value == b[i].param->value);
  }
  save_student(ck.model, dir / "s.togs");
  CHECK(fs::file_size(dir / "s.togs") == student_file_size(bank.dim, bank.num_classes, ep.supports.size()));
  CHECK(fs::file_size(dir / "c.togc") > fs::file_size(dir / "s.togs"));

  std::string bytes = slurp(dir / "c.togc");
  bytes[0] = 'X';
  std::ofstream(dir / "bad.togc", std::ios::binary) << bytes;
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.togc"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("ablation arms and tables") {
  TrainConfig base;
  CHECK(apply_arm(base, "pool_all").teacher.keep_fraction == 1.0);
  CHECK(apply_arm(base, "pool_25").teacher.keep_fraction == 0.25);
  CHECK(apply_arm(base, "student_only").student_only());
  CHECK(apply_arm(base, "ce_only").loss.lambda == 0.0);
  CHECK(apply_arm(base, "ce_graph").loss.gamma_focal == 0.0);
  CHECK(!apply_arm(base, "no_mgt").teacher.use_mgt);
  CHECK(!apply_arm(base, "no_text").teacher.use_text_edges);
  CHECK(!apply_arm(base, "no_filter").teacher.use_filter);
  CHECK(apply_arm(base, "no_transformer").teacher.encoder_layers == 0);
  CHECK(apply_arm(base, "grid_2x2").grid_mode == GridMode::grid2x2);
  CHECK_THROWS_AS(apply_arm(base, "nope"), ConfigError);
  CHECK(ablation_arms().size() >= 17);

  const EmbeddingBank bank = fixture::small_bank(7);
  TrainConfig c = small_config();
  c.epochs = 3;
  const std::vector<std::size_t> shots{1};
  const std::vector<std::string> one_arm{"default"};
  const std::vector<std::uint64_t> seed0{0};
  const AblationTable single = run_ablation(bank, shots, one_arm, seed0, c);
  CHECK(single.runs.size() == 1);

  const std::vector<std::size_t> shots2{1, 2};
  const std::vector<std::string> arms{"default", "pool_all"};
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const AblationTable t = run_ablation(bank, shots2, arms, seeds, c, 2);
  CHECK(t.runs.size() == 12);
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t k = 0; k < 2; ++k) {
      double m = 0.0;
      for (std::size_t s = 0; s < 3; ++s) m += t.run(a, k, s).accuracy;
      CHECK(std::abs(t.mean(a, k) - m / 3.0) < 1e-15);
    }
  // pool_all column equals runs trained with keep fraction 1.
  TrainConfig all = c;
  all.teacher.keep_fraction = 1.0;
  all.seed = 1;
  const TrainResult direct = train(bank, sample_episode(bank, 2, 1), all);
  CHECK(t.run(1, 1, 1).accuracy == direct.metrics.query_accuracy);

  const AblationTable serial = run_ablation(bank, shots2, arms, seeds, c, 1);
  for (std::size_t i = 0; i < t.runs.size(); ++i) CHECK(serial.runs[i].accuracy == t.runs[i].accuracy);
}

TEST_CASE("config json round trip") {
  TrainConfig c;
  c.lr0 = 0.005;
  c.loss.delta = 0.25;
  c.teacher.keep_fraction = 0.75;
  c.grid_mode = GridMode::grid3x3;
  c.alpha_grid = {1.0, 3.0};
  const Json j = to_json(c);
  TrainConfig back;
  apply_json(back, j);
  CHECK(to_json(back) == j);
  CHECK(back.grid_mode == GridMode::grid3x3);

  TrainConfig x;
  CHECK_THROWS_AS(apply_json(x, Json{{"learning_rate", 1.0}}), ConfigError);
  CHECK_THROWS_AS(apply_json(x, Json{{"epochs", "ten"}}), ConfigError);
  CHECK_THROWS_AS(apply_json(x, Json{{"epochs", -3}}), ConfigError);
  CHECK_THROWS_AS(apply_json(x, Json{{"use_mgt", 1}}), ConfigError);
  CHECK_THROWS_AS(apply_json(x, Json::array()), ConfigError);

  Metrics m;
  m.query_accuracy = 0.5;
  TrainConfig so;
  so.loss.delta = 0.0;
  so.loss.lambda = 0.0;
  CHECK(run_summary(so, m, 4, "b.togb")["mode"] == "tip-adapter-f-equivalent");
  CHECK(run_summary(TrainConfig{}, m, 4, "b.togb")["mode"] == "graph-teacher");
}
