#pragma once

#include "json.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mumimo {

// Raw little-endian blobs plus "<path>.json" sidecars. Writes go through a
// temporary file that is renamed into place, so failures leave no partial output.

void write_f32_blob(const std::string& path, std::span<const float> values);
std::vector<float> read_f32_blob(const std::string& path);

void write_f64_blob(const std::string& path, std::span<const double> values);
std::vector<double> read_f64_blob(const std::string& path);

void write_u8_blob(const std::string& path, std::span<const std::uint8_t> values);
std::vector<std::uint8_t> read_u8_blob(const std::string& path);

void write_json(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json(const std::string& path);

std::string sidecar_path(const std::string& blob_path);

}  // namespace mumimo
