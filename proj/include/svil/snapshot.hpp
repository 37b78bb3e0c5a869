#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "svil/tensor.hpp"

namespace svil::io {

using Json = nlohmann::json;

// Flat little-endian float64 files.
void write_blob(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_blob(const std::filesystem::path& path);

Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& doc);

// Manifest + blob pair for an ordered list of named tensors.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Writes <stem>.json (with `extra` merged in under "meta") and <stem>.bin.
void save_tensors(const std::filesystem::path& stem, std::span<const NamedTensor> tensors,
                  const Json& meta = Json::object());
std::vector<NamedTensor> load_tensors(const std::filesystem::path& stem, Json* meta = nullptr);

std::filesystem::path manifest_path(const std::filesystem::path& stem);
std::filesystem::path blob_path(const std::filesystem::path& stem);

}  // namespace svil::io
