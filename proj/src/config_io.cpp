#include "kvdistill/config_io.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "kvdistill/errors.hpp"

namespace kvdistill {
namespace {

using Setter = std::function<void(TrainConfig&, const Json&)>;

template <typename T>
T as(const Json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0)) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type or value");
  }
}

template <typename T>
Setter field(T TrainConfig::*member, const std::string& key) {
  return [member, key](TrainConfig& c, const Json& v) { c.*member = as<T>(v, key); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"lr0", field(&TrainConfig::lr0, "lr0")},
      {"epochs", field(&TrainConfig::epochs, "epochs")},
      {"beta1", [](TrainConfig& c, const Json& v) { c.adam.beta1 = as<double>(v, "beta1"); }},
      {"beta2", [](TrainConfig& c, const Json& v) { c.adam.beta2 = as<double>(v, "beta2"); }},
      {"eps", [](TrainConfig& c, const Json& v) { c.adam.eps = as<double>(v, "eps"); }},
      {"weight_decay", [](TrainConfig& c, const Json& v) { c.adam.weight_decay = as<double>(v, "weight_decay"); }},
      {"alpha", [](TrainConfig& c, const Json& v) { c.loss.alpha = as<double>(v, "alpha"); }},
      {"delta", [](TrainConfig& c, const Json& v) { c.loss.delta = as<double>(v, "delta"); }},
      {"lambda", [](TrainConfig& c, const Json& v) { c.loss.lambda = as<double>(v, "lambda"); }},
      {"gamma_focal", [](TrainConfig& c, const Json& v) { c.loss.gamma_focal = as<double>(v, "gamma_focal"); }},
      {"tau", [](TrainConfig& c, const Json& v) { c.loss.tau = as<double>(v, "tau"); }},
      {"beta", field(&TrainConfig::beta, "beta")},
      {"hidden", [](TrainConfig& c, const Json& v) { c.teacher.hidden = as<std::size_t>(v, "hidden"); }},
      {"encoder_layers",
       [](TrainConfig& c, const Json& v) { c.teacher.encoder_layers = as<std::size_t>(v, "encoder_layers"); }},
      {"encoder_heads",
       [](TrainConfig& c, const Json& v) { c.teacher.encoder_heads = as<std::size_t>(v, "encoder_heads"); }},
      {"graph_layers",
       [](TrainConfig& c, const Json& v) { c.teacher.graph_layers = as<std::size_t>(v, "graph_layers"); }},
      {"graph_heads",
       [](TrainConfig& c, const Json& v) { c.teacher.graph_heads = as<std::size_t>(v, "graph_heads"); }},
      {"ffn_multiplier",
       [](TrainConfig& c, const Json& v) { c.teacher.ffn_multiplier = as<std::size_t>(v, "ffn_multiplier"); }},
      {"keep_fraction",
       [](TrainConfig& c, const Json& v) { c.teacher.keep_fraction = as<double>(v, "keep_fraction"); }},
      {"use_mgt", [](TrainConfig& c, const Json& v) { c.teacher.use_mgt = as<bool>(v, "use_mgt"); }},
      {"use_text_edges",
       [](TrainConfig& c, const Json& v) { c.teacher.use_text_edges = as<bool>(v, "use_text_edges"); }},
      {"use_filter", [](TrainConfig& c, const Json& v) { c.teacher.use_filter = as<bool>(v, "use_filter"); }},
      {"grid_mode",
       [](TrainConfig& c, const Json& v) { c.grid_mode = grid_mode_from_string(as<std::string>(v, "grid_mode")); }},
      {"seed", field(&TrainConfig::seed, "seed")},
      {"sigma_aug", field(&TrainConfig::sigma_aug, "sigma_aug")},
      {"force_teacher", field(&TrainConfig::force_teacher, "force_teacher")},
      {"search_alpha_beta", field(&TrainConfig::search_alpha_beta, "search_alpha_beta")},
      {"alpha_grid", field(&TrainConfig::alpha_grid, "alpha_grid")},
      {"beta_grid", field(&TrainConfig::beta_grid, "beta_grid")},
  };
  return table;
}

}  // namespace

Json to_json(const TrainConfig& c) {
  Json j;
  j["lr0"] = c.lr0;
  j["epochs"] = c.epochs;
  j["beta1"] = c.adam.beta1;
  j["beta2"] = c.adam.beta2;
  j["eps"] = c.adam.eps;
  j["weight_decay"] = c.adam.weight_decay;
  j["alpha"] = c.loss.alpha;
  j["delta"] = c.loss.delta;
  j["lambda"] = c.loss.lambda;
  j["gamma_focal"] = c.loss.gamma_focal;
  j["tau"] = c.loss.tau;
  j["beta"] = c.beta;
  j["hidden"] = c.teacher.hidden;
  j["encoder_layers"] = c.teacher.encoder_layers;
  j["encoder_heads"] = c.teacher.encoder_heads;
  j["graph_layers"] = c.teacher.graph_layers;
  j["graph_heads"] = c.teacher.graph_heads;
  j["ffn_multiplier"] = c.teacher.ffn_multiplier;
  j["keep_fraction"] = c.teacher.keep_fraction;
  j["use_mgt"] = c.teacher.use_mgt;
  j["use_text_edges"] = c.teacher.use_text_edges;
  j["use_filter"] = c.teacher.use_filter;
  j["grid_mode"] = to_string(c.grid_mode);
  j["seed"] = c.seed;
  j["sigma_aug"] = c.sigma_aug;
  j["force_teacher"] = c.force_teacher;
  j["search_alpha_beta"] = c.search_alpha_beta;
  j["alpha_grid"] = c.alpha_grid;
  j["beta_grid"] = c.beta_grid;
  return j;
}

void apply_json(TrainConfig& config, const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto& table = setters();
  for (const auto& [key, value] : j.items()) {
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(config, value);
  }
}

TrainConfig train_config_from_file(const std::filesystem::path& path) {
  TrainConfig c;
  apply_json(c, read_json(path));
  return c;
}

Json to_json(const SyntheticSpec& s) {
  Json j;
  j["classes"] = s.classes;
  j["dim"] = s.dim;
  j["patches"] = s.patches;
  j["foreground"] = s.foreground;
  j["sigma_foreground"] = s.sigma_foreground;
  j["sigma_background"] = s.sigma_background;
  j["sigma_text"] = s.sigma_text;
  j["images_per_class"] = s.images_per_class;
  j["seed"] = s.seed;
  return j;
}

Json to_json(const Metrics& m, bool include_logits) {
  Json j;
  j["query_accuracy"] = m.query_accuracy;
  j["zero_shot_accuracy"] = m.zero_shot_accuracy;
  j["training_free_accuracy"] = m.training_free_accuracy;
  j["teacher_accuracy"] = m.teacher_accuracy ? Json(*m.teacher_accuracy) : Json(nullptr);
  j["filter_precision"] = m.filter_precision ? Json(*m.filter_precision) : Json(nullptr);
  j["alpha"] = m.alpha;
  j["beta"] = m.beta;
  if (!m.epochs.empty()) {
    j["first_loss"] = m.epochs.front().loss;
    j["final_loss"] = m.epochs.back().loss;
  }
  j["epochs"] = m.epochs.size();
  if (include_logits) {
    Json rows = Json::array();
    for (std::size_t r = 0; r < m.query_logits.rows(); ++r) {
      const auto row = m.query_logits.row(r);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["query_logits"] = std::move(rows);
  }
  return j;
}

Json run_summary(const TrainConfig& config, const Metrics& metrics, std::size_t shots,
                 const std::string& bank_path) {
  Json j;
  j["mode"] = config.student_only() ? "tip-adapter-f-equivalent" : "graph-teacher";
  j["bank"] = bank_path;
  j["shots"] = shots;
  j["seed"] = config.seed;
  j["metrics"] = to_json(metrics);
  j["config"] = to_json(config);
  return j;
}

void write_json(const Json& j, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw IoError("write failed for " + path.string());
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(f);
  } catch (const Json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace kvdistill
