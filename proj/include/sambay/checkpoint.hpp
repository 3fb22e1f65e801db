#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "sambay/arch.hpp"
#include "sambay/tensor.hpp"

// On-disk tensor sets (checkpoints and decode-state snapshots).
//
//   <dir>/manifest.json   {"format": "sambay-tensors", "version": 1,
//                          "tensors": [{"name", "file", "dtype", "shape"}...],
//                          "config": {...}, "meta": {...}}
//   <dir>/<file>          numel * sizeof(dtype) bytes, row-major,
//                         little-endian IEEE-754 (dtype "f32" or "f64")
//
// File names are the tensor names with every character outside
// [A-Za-z0-9._-] replaced by '_', plus ".bin".
namespace sambay {

using json = nlohmann::json;

json config_to_json(const ModelConfig& cfg);
// Rejects unknown keys and ill-typed values with ConfigError. Missing keys
// keep their defaults.
ModelConfig config_from_json(const json& j);
ModelConfig load_config_file(const std::filesystem::path& path);

template <typename T>
void save_tensors(const std::filesystem::path& dir, const std::map<std::string, Tensor<T>>& tensors,
                  const json& config = json::object(), const json& meta = json::object());

// Values stored in either dtype are converted to T.
template <typename T>
std::map<std::string, Tensor<T>> load_tensors(const std::filesystem::path& dir, json* manifest = nullptr);

template <typename T>
void save_model(const std::filesystem::path& dir, const Model<T>& model, const json& meta = json::object());

template <typename T>
Model<T> load_model(const std::filesystem::path& dir, json* manifest = nullptr);

}  // namespace sambay
