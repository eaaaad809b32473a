// kvdistill command-line driver: synthetic banks, training, evaluation,
// ablation sweeps and student export.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kvdistill/config_io.hpp"
#include "kvdistill/embedbank.hpp"
#include "kvdistill/errors.hpp"
#include "kvdistill/student.hpp"
#include "kvdistill/trainer.hpp"

namespace fs = std::filesystem;
using namespace kvdistill;

namespace {

enum ExitCode { kOk = 0, kIoFormat = 1, kUsage = 2, kDivergence = 3 };

// Flags that override TrainConfig keys. Each flag is stored as text and
// converted to the JSON type of the key it overrides, so a config file and
// flags go through the same validation.
class ConfigFlags {
 public:
  void add(CLI::App& app) {
    const Json defaults = to_json(TrainConfig{});
    for (const auto& [key, value] : defaults.items()) {
      std::string flag = "--" + key;
      for (char& c : flag)
        if (c == '_') c = '-';
      auto& slot = values_[key];
      std::string help = "override '" + key + "' (default " + value.dump() + ")";
      app.add_option(flag, slot, help);
    }
    app.add_option("--config", config_path_, "JSON config file; flags win over it");
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config_path_.empty()) apply_json(cfg, read_json(config_path_));
    const Json defaults = to_json(TrainConfig{});
    Json overrides = Json::object();
    for (const auto& [key, text] : values_) {
      if (text.empty()) continue;
      overrides[key] = parse_value(defaults.at(key), key, text);
    }
    apply_json(cfg, overrides);
    cfg.validate();
    return cfg;
  }

 private:
  static Json parse_value(const Json& like, const std::string& key, const std::string& text) {
    try {
      if (like.is_boolean()) {
        if (text == "true" || text == "1" || text == "on") return true;
        if (text == "false" || text == "0" || text == "off") return false;
        throw ConfigError("");
      }
      if (like.is_string()) return text;
      if (like.is_array()) {
        Json arr = Json::array();
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) arr.push_back(std::stod(item));
        return arr;
      }
      if (like.is_number_unsigned() || like.is_number_integer()) {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(text, &used);
        if (used != text.size() || text.front() == '-') throw ConfigError("");
        return v;
      }
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      if (used != text.size()) throw ConfigError("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("invalid value '" + text + "' for --" + key);
    }
  }

  std::map<std::string, std::string> values_;
  std::string config_path_;
};

std::vector<std::size_t> all_queries(const EmbeddingBank& bank) {
  std::vector<std::size_t> q;
  for (std::size_t i = 0; i < bank.images.size(); ++i)
    if (bank.images[i].split == Split::query) q.push_back(i);
  return q;
}

void write_logits(const Matrix& logits, const fs::path& path) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  write_json(rows, path);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  for (const std::string& item : split_list(text)) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item.front() == '-') {
      throw ConfigError(std::string("invalid ") + what + " entry '" + item + "'");
    }
    out.push_back(static_cast<T>(v));
  }
  if (out.empty()) throw ConfigError(std::string("empty ") + what + " list");
  return out;
}

int run_guarded(const std::function<void()>& body) {
  try {
    body();
    return kOk;
  } catch (const DivergenceError& e) {
    std::cerr << "error: training diverged at epoch " << e.epoch() << ": " << e.what() << "\n";
    return kDivergence;
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const SamplingError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoFormat;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot cache adapter trained with a training-only graph teacher"};
  app.require_subcommand(1);
  std::function<void()> action;

  // gen-synthetic
  SyntheticSpec spec;
  std::string bank_out;
  auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic embedding bank (TOGB)");
  gen->add_option("--classes", spec.classes, "number of classes")->capture_default_str();
  gen->add_option("--dim", spec.dim, "embedding dimension")->capture_default_str();
  gen->add_option("--patches", spec.patches, "views per image, including the global view")->capture_default_str();
  gen->add_option("--foreground", spec.foreground, "planted foreground views per image")->capture_default_str();
  gen->add_option("--sigma-foreground", spec.sigma_foreground)->capture_default_str();
  gen->add_option("--sigma-background", spec.sigma_background)->capture_default_str();
  gen->add_option("--sigma-text", spec.sigma_text)->capture_default_str();
  gen->add_option("--images-per-class", spec.images_per_class)->capture_default_str();
  gen->add_option("--seed", spec.seed)->capture_default_str();
  gen->add_option("--out", bank_out, "output TOGB path")->required();
  gen->callback([&] {
    action = [&] {
      spec.validate();
      const EmbeddingBank bank = gen_synthetic(spec);
      save_bank(bank, bank_out);
      std::printf("wrote %s (%zu images)\nchecksum: %016" PRIx64 "\n", bank_out.c_str(), bank.images.size(),
                  file_checksum(bank_out));
    };
  });

  // train
  ConfigFlags train_flags;
  std::string train_bank, student_out, metrics_csv, summary_json, checkpoint_out, train_logits;
  std::size_t shots = 4;
  auto* tr = app.add_subcommand("train", "train a student and export it (TOGS)");
  tr->add_option("--bank", train_bank, "TOGB bank")->required();
  tr->add_option("--shots", shots, "supports per class")->capture_default_str();
  tr->add_option("--out", student_out, "output TOGS path")->required();
  tr->add_option("--metrics-csv", metrics_csv, "per-epoch metrics (default <out>.metrics.csv)");
  tr->add_option("--summary-json", summary_json, "run summary (default <out>.json)");
  tr->add_option("--checkpoint", checkpoint_out, "also write a full checkpoint with teacher weights");
  tr->add_option("--logits-out", train_logits, "write query logits as JSON");
  train_flags.add(*tr);
  tr->callback([&] {
    action = [&] {
      const TrainConfig cfg = train_flags.resolve();
      const EmbeddingBank bank = load_bank(train_bank);
      const Episode ep = sample_episode(bank, shots, cfg.seed);
      TrainResult res = train(bank, ep, cfg);
      save_student(res.model, student_out);
      write_metrics_csv(res.metrics, metrics_csv.empty() ? student_out + ".metrics.csv" : metrics_csv);
      write_json(run_summary(cfg, res.metrics, shots, train_bank),
                 summary_json.empty() ? student_out + ".json" : summary_json);
      if (!checkpoint_out.empty()) save_checkpoint(res.model, res.teacher, checkpoint_out);
      if (!train_logits.empty()) write_logits(res.metrics.query_logits, train_logits);
      std::printf("query accuracy: %.6f\n", res.metrics.query_accuracy);
      if (res.metrics.teacher_accuracy) std::printf("teacher accuracy: %.6f\n", *res.metrics.teacher_accuracy);
      if (res.metrics.filter_precision) std::printf("filter precision: %.6f\n", *res.metrics.filter_precision);
    };
  });

  // eval
  std::string eval_student, eval_bank, eval_logits, eval_json;
  std::optional<double> eval_alpha;
  auto* ev = app.add_subcommand("eval", "evaluate a TOGS student on the bank's query images");
  ev->add_option("--student", eval_student, "TOGS student file")->required();
  ev->add_option("--bank", eval_bank, "TOGB bank")->required();
  ev->add_option("--alpha", eval_alpha, "override the cache weight (0 = zero-shot)");
  ev->add_option("--logits-out", eval_logits, "write query logits as JSON");
  ev->add_option("--json", eval_json, "write the accuracy report as JSON");
  ev->callback([&] {
    action = [&] {
      CacheModel model = load_student(eval_student);
      if (eval_alpha) {
        if (!(*eval_alpha >= 0.0)) throw ConfigError("--alpha must be >= 0");
        model.alpha = *eval_alpha;
      }
      const EmbeddingBank bank = load_bank(eval_bank);
      if (model.dim() != bank.dim || model.num_classes() != bank.num_classes) {
        throw FormatError("student shape (D=" + std::to_string(model.dim()) + ", C=" +
                          std::to_string(model.num_classes()) + ") does not match the bank");
      }
      Episode ep;
      ep.queries = all_queries(bank);
      const Matrix logits = query_logits(model, bank, ep);
      const double acc = argmax_accuracy(logits, labels_of(bank, ep.queries));
      if (!eval_logits.empty()) write_logits(logits, eval_logits);
      if (!eval_json.empty()) {
        Json j;
        j["accuracy"] = acc;
        j["queries"] = ep.queries.size();
        j["alpha"] = model.alpha;
        j["beta"] = model.beta;
        j["tau"] = model.tau;
        write_json(j, eval_json);
      }
      std::printf("accuracy: %.6f\n", acc);
    };
  });

  // ablate
  ConfigFlags ablate_flags;
  std::string ablate_bank, arms_text = "default", shots_text = "1,4,16", seeds_text = "0,1,2", ablate_out,
                           runs_dir;
  std::size_t jobs = 1;
  bool list_arms = false;
  auto* ab = app.add_subcommand("ablate", "run ablation arms over shots and seeds");
  ab->add_option("--bank", ablate_bank, "TOGB bank");
  ab->add_option("--arms", arms_text, "comma-separated arm names")->capture_default_str();
  ab->add_option("--shots", shots_text, "comma-separated shot counts")->capture_default_str();
  ab->add_option("--seeds", seeds_text, "comma-separated seeds")->capture_default_str();
  ab->add_option("--jobs", jobs, "parallel training runs")->capture_default_str();
  ab->add_option("--out", ablate_out, "CSV of mean accuracies (rows shots, columns arms)");
  ab->add_option("--runs-dir", runs_dir, "directory for one JSON per run");
  ab->add_flag("--list-arms", list_arms, "print the available arms and exit");
  ablate_flags.add(*ab);
  ab->callback([&] {
    action = [&] {
      if (list_arms) {
        for (const Arm& a : ablation_arms()) std::printf("%-22s %s\n", a.name.c_str(), a.description.c_str());
        return;
      }
      if (ablate_bank.empty() || ablate_out.empty()) throw ConfigError("ablate needs --bank and --out");
      const std::vector<std::string> arms = split_list(arms_text);
      if (arms.empty()) throw ConfigError("empty arm list");
      const TrainConfig base = ablate_flags.resolve();
      for (const std::string& a : arms) apply_arm(base, a);
      const auto shot_list = parse_list<std::size_t>(shots_text, "shots");
      const auto seed_list = parse_list<std::uint64_t>(seeds_text, "seeds");
      const EmbeddingBank bank = load_bank(ablate_bank);
      const AblationTable table = run_ablation(bank, shot_list, arms, seed_list, base, jobs);
      write_ablation_csv(table, ablate_out);
      if (!runs_dir.empty()) {
        fs::create_directories(runs_dir);
        for (const AblationRun& r : table.runs) {
          Json j;
          j["arm"] = r.arm;
          j["shots"] = r.shots;
          j["seed"] = r.seed;
          j["accuracy"] = r.accuracy;
          j["teacher_accuracy"] = r.teacher_accuracy ? Json(*r.teacher_accuracy) : Json(nullptr);
          j["filter_precision"] = r.filter_precision ? Json(*r.filter_precision) : Json(nullptr);
          TrainConfig cfg = apply_arm(base, r.arm);
          cfg.seed = r.seed;
          j["config"] = to_json(cfg);
          write_json(j, fs::path(runs_dir) /
                            (r.arm + "_k" + std::to_string(r.shots) + "_s" + std::to_string(r.seed) + ".json"));
        }
      }
      std::ifstream csv(ablate_out);
      std::cout << csv.rdbuf();
    };
  });

  // export
  std::string ck_in, export_out;
  auto* ex = app.add_subcommand("export", "extract the student (TOGS) from a full checkpoint");
  ex->add_option("--checkpoint", ck_in, "checkpoint written by train --checkpoint")->required();
  ex->add_option("--out", export_out, "output TOGS path")->required();
  ex->callback([&] {
    action = [&] {
      const Checkpoint ck = load_checkpoint(ck_in);
      save_student(ck.model, export_out);
      std::printf("wrote %s (%zu bytes)\n", export_out.c_str(),
                  student_file_size(ck.model.dim(), ck.model.num_classes(), ck.model.num_supports()));
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  return run_guarded(action);
}
