#include "svil/snapshot.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace svil::io {

namespace {

std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffULL) << (8 * (7 - i));
    return r;
  }
}

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& stem) {
  auto p = stem;
  p += ".json";
  return p;
}

std::filesystem::path blob_path(const std::filesystem::path& stem) {
  auto p = stem;
  p += ".bin";
  return p;
}

void write_blob(const std::filesystem::path& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (double v : values) {
    const std::uint64_t bits = to_little_endian(std::bit_cast<std::uint64_t>(v));
    out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<double> read_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  if (bytes % 8 != 0) throw std::runtime_error(path.string() + ": size is not a multiple of 8 bytes");
  std::vector<double> values(bytes / 8);
  for (auto& v : values) {
    std::uint64_t bits = 0;
    in.read(reinterpret_cast<char*>(&bits), sizeof(bits));
    v = std::bit_cast<double>(to_little_endian(bits));
  }
  return values;
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Json::parse(in);
}

void write_json(const std::filesystem::path& path, const Json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
}

void save_tensors(const std::filesystem::path& stem, std::span<const NamedTensor> tensors,
                  const Json& meta) {
  Json manifest;
  manifest["format"] = "svil-tensors/1";
  manifest["meta"] = meta;
  Json entries = Json::array();
  std::vector<double> flat;
  for (const auto& t : tensors) {
    entries.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", flat.size()}});
    flat.insert(flat.end(), t.tensor.values().begin(), t.tensor.values().end());
  }
  manifest["tensors"] = entries;
  manifest["count"] = flat.size();
  write_json(manifest_path(stem), manifest);
  write_blob(blob_path(stem), flat);
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& stem, Json* meta) {
  const Json manifest = read_json(manifest_path(stem));
  if (manifest.value("format", "") != "svil-tensors/1") {
    throw std::runtime_error(manifest_path(stem).string() + ": not a tensor manifest");
  }
  const auto flat = read_blob(blob_path(stem));
  if (flat.size() != manifest.at("count").get<std::size_t>()) {
    throw std::runtime_error(blob_path(stem).string() + ": value count does not match manifest");
  }
  std::vector<NamedTensor> out;
  for (const auto& e : manifest.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto n = shape_volume(shape);
    if (offset + n > flat.size()) throw std::runtime_error("tensor " + e.at("name").get<std::string>() + " overruns blob");
    out.push_back({e.at("name").get<std::string>(),
                   Tensor(shape, std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                                     flat.begin() + static_cast<std::ptrdiff_t>(offset + n)))});
  }
  if (meta) *meta = manifest.value("meta", Json::object());
  return out;
}

}  // namespace svil::io
