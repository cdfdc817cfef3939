#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "rwkv_clip/data.hpp"
#include "rwkv_clip/model.hpp"
#include "rwkv_clip/trainer.hpp"

namespace rwkv_clip::cli {

/// Bad flags, unreadable or malformed config files. Maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ToyDataConfig {
  std::size_t train = 512;
  std::size_t heldout = 128;
  std::optional<std::uint64_t> seed;  // defaults to the training seed
  std::size_t canvas = 32;
  bool generated = true;
};

struct DataConfig {
  std::optional<ToyDataConfig> toy;
  std::filesystem::path train_jsonl;
  std::filesystem::path heldout_jsonl;  // optional
  std::filesystem::path image_dir;      // defaults to the JSONL's directory
};

/// Everything one `train` invocation needs:
///   {"image": {...}, "text": {...}, "train": {...}, "data": {...}}
/// Every section and key is optional except "data"; unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

/// Parses JSON text; syntax errors name the line and column.
nlohmann::json parse_json_text(const std::string& text, const std::string& origin);
nlohmann::json read_json_file(const std::filesystem::path& path);

/// Relative data paths resolve against `base_dir` (the config file's directory).
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json run_config_to_json(const RunConfig& config);

struct Datasets {
  std::vector<PairedRecord> train;
  std::vector<PairedRecord> heldout;
  std::filesystem::path image_dir;
};

Datasets load_datasets(const DataConfig& data, std::uint64_t seed);

}  // namespace rwkv_clip::cli
