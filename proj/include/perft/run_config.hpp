#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "perft/checkpoint.hpp"
#include "perft/data.hpp"
#include "perft/model.hpp"
#include "perft/perft.hpp"
#include "perft/training.hpp"

namespace perft {

struct TaskSource {
  TaskSpec spec;
  std::size_t train_samples = 2000;
  std::size_t eval_samples = 256;
  std::optional<std::filesystem::path> train_jsonl;
  std::optional<std::filesystem::path> eval_jsonl;

  std::string label() const;
  std::vector<Sample> train_set() const;
  // Generated eval sets use their own seed stream and skip samples that also
  // occur in the training set.
  std::vector<Sample> eval_set() const;
};

struct RunConfig {
  ModelConfig model;
  std::optional<PerftConfig> perft;
  TrainConfig train;
  TaskSource task;
  std::filesystem::path output_dir = "runs/default";
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> backbone;    // checkpoint to fine-tune / evaluate
  std::optional<BackboneDims> dims;                 // count-params backbone override
  StorageDtype storage = StorageDtype::float64;     // checkpoint tensor encoding
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const PerftConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const TaskSpec& c);
nlohmann::json to_json(const BackboneDims& d);
nlohmann::json to_json(const RunConfig& c);

// Each parser rejects unknown keys and ill-typed values with a ConfigError
// naming the dotted path of the offending field.
ModelConfig parse_model_config(const nlohmann::json& j, const std::string& path = "model");
PerftConfig parse_perft_config(const nlohmann::json& j, const std::string& path = "perft");
TrainConfig parse_train_config(const nlohmann::json& j, const std::string& path = "train");
TaskSpec parse_task_spec(const nlohmann::json& j, const std::string& path = "task");
BackboneDims parse_dims(const nlohmann::json& j, const std::string& path = "dims");
RunConfig parse_run_config(const nlohmann::json& j);

nlohmann::json load_json_file(const std::filesystem::path& path);
// "a.b.c=value": value parsed as JSON when possible, otherwise kept as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace perft
