#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "prunelab/model.hpp"
#include "prunelab/task.hpp"

namespace prunelab {

nlohmann::json to_json(const ModelConfig& c);
/// Strict: unknown keys and wrong types raise ConfigError. Missing keys keep defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TaskSpec& t);
TaskSpec task_spec_from_json(const nlohmann::json& j);

/// Checkpoint layout (little-endian):
///   "PRLBCKPT" | u32 version=1 | string model-config JSON | u64 tensor count
///   per tensor: string name | u32 rank | u64 dims[rank] | f64 values[numel]
/// Strings are a u64 byte length followed by the bytes.
void save_checkpoint(const Model& model, const std::filesystem::path& path);

/// Rebuilds the model from the stored config and fills in its values.
Model load_checkpoint(const std::filesystem::path& path);

/// As above, but throws MismatchError unless the stored config equals `expected`.
Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace prunelab
