#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "perft/model.hpp"

namespace perft {

// Weight dump: a directory holding manifest.json plus one raw little-endian
// file per tensor under tensors/ (float64 by default, float32 on request;
// values are always widened back to double on load). The manifest lists name,
// shape, role and file for every tensor, and carries free-form metadata (the
// model and PERFT configs for checkpoints).
struct DumpEntry {
  std::string name;
  std::string role;  // backbone | adapter | peft_router
  Tensor value;
};

inline constexpr const char* kDumpFormat = "perft-lab-weights";
inline constexpr int kDumpVersion = 1;

enum class StorageDtype { float64, float32 };

std::string_view storage_dtype_name(StorageDtype d);  // "float64" | "float32"
StorageDtype parse_storage_dtype(std::string_view name);

void write_weight_dump(const std::filesystem::path& dir, std::span<const DumpEntry> entries,
                       const nlohmann::json& metadata = nlohmann::json::object(),
                       StorageDtype dtype = StorageDtype::float64);
std::vector<DumpEntry> read_weight_dump(const std::filesystem::path& dir,
                                        nlohmann::json* metadata = nullptr);

void save_checkpoint(const LanguageModel& model, const std::filesystem::path& dir,
                     StorageDtype dtype = StorageDtype::float64);
LanguageModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace perft
