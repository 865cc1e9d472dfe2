#include "mumimo/blob_io.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace mumimo {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

namespace {

template <typename T>
void write_raw(const std::string& path, std::span<const T> values) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(T)));
        if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

template <typename T>
std::vector<T> read_raw(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes % sizeof(T) != 0) throw std::runtime_error("'" + path + "': size is not a multiple of the element size");
    std::vector<T> out(bytes / sizeof(T));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw std::runtime_error("read failed for '" + path + "'");
    return out;
}

}  // namespace

void write_f32_blob(const std::string& path, std::span<const float> values) { write_raw(path, values); }
std::vector<float> read_f32_blob(const std::string& path) { return read_raw<float>(path); }
void write_f64_blob(const std::string& path, std::span<const double> values) { write_raw(path, values); }
std::vector<double> read_f64_blob(const std::string& path) { return read_raw<double>(path); }
void write_u8_blob(const std::string& path, std::span<const std::uint8_t> values) { write_raw(path, values); }
std::vector<std::uint8_t> read_u8_blob(const std::string& path) { return read_raw<std::uint8_t>(path); }

void write_json(const std::string& path, const nlohmann::json& j) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
        out << j.dump(2) << '\n';
        if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("'" + path + "': " + e.what());
    }
}

std::string sidecar_path(const std::string& blob_path) { return blob_path + ".json"; }

}  // namespace mumimo
