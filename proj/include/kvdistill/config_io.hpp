#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "kvdistill/embedbank.hpp"
#include "kvdistill/trainer.hpp"

namespace kvdistill {

using Json = nlohmann::ordered_json;

// Flat JSON view of every TrainConfig field.
Json to_json(const TrainConfig& config);
// Overlays the keys present in `j` onto `config`. Unknown keys and wrongly
// typed values raise ConfigError.
void apply_json(TrainConfig& config, const Json& j);
TrainConfig train_config_from_file(const std::filesystem::path& path);

Json to_json(const SyntheticSpec& spec);
Json to_json(const Metrics& metrics, bool include_logits = false);

// Summary written next to a trained student: accuracies, config echo, seed
// and the run mode ("tip-adapter-f-equivalent" when delta = lambda = 0).
Json run_summary(const TrainConfig& config, const Metrics& metrics, std::size_t shots,
                 const std::string& bank_path);

void write_json(const Json& j, const std::filesystem::path& path);
Json read_json(const std::filesystem::path& path);

}  // namespace kvdistill
