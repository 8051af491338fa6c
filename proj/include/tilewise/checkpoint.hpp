#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tilewise/errors.hpp"
#include "tilewise/tensor.hpp"

namespace tilewise {

/// Ordered collection of named tensors. Saved as `<stem>.json` (manifest with
/// name, shape, dtype and byte offset per tensor) next to `<stem>.bin` (raw
/// little-endian f64 blob).
using NamedTensors = std::map<std::string, Tensor>;

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        std::uint64_t r = 0;
        for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
        return r;
    }
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& stem, const NamedTensors& tensors) {
    auto manifest_path = stem;
    manifest_path += ".json";
    auto blob_path = stem;
    blob_path += ".bin";
    if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());

    std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
    if (!blob) throw io_error("cannot open " + blob_path.string() + " for writing");

    nlohmann::ordered_json manifest;
    manifest["format"] = "tilewise-checkpoint";
    manifest["version"] = 1;
    manifest["blob"] = blob_path.filename().string();
    manifest["tensors"] = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f64"}, {"offset", offset}});
        for (double v : t.values()) {
            std::uint64_t bits = detail::to_little_endian(std::bit_cast<std::uint64_t>(v));
            blob.write(reinterpret_cast<const char*>(&bits), sizeof bits);
        }
        offset += t.size() * sizeof(double);
    }
    if (!blob) throw io_error("failed writing " + blob_path.string());

    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw io_error("cannot open " + manifest_path.string() + " for writing");
    out << manifest.dump(2) << '\n';
}

inline NamedTensors load_checkpoint(const std::filesystem::path& stem) {
    auto manifest_path = stem;
    manifest_path += ".json";
    std::ifstream in(manifest_path);
    if (!in) throw io_error("cannot open checkpoint manifest " + manifest_path.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("malformed checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "tilewise-checkpoint") throw io_error("not a tilewise checkpoint");

    const auto blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw io_error("cannot open checkpoint blob " + blob_path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

    NamedTensors out;
    for (const auto& entry : manifest.at("tensors")) {
        if (entry.at("dtype").get<std::string>() != "f64") throw io_error("unsupported dtype in checkpoint");
        auto shape = entry.at("shape").get<Shape>();
        auto offset = entry.at("offset").get<std::uint64_t>();
        const std::size_t count = shape_volume(shape);
        if (offset + count * sizeof(double) > bytes.size()) throw io_error("checkpoint blob truncated");
        std::vector<double> data(count);
        for (std::size_t i = 0; i < count; ++i) {
            std::uint64_t bits = 0;
            std::memcpy(&bits, bytes.data() + offset + i * sizeof(double), sizeof bits);
            data[i] = std::bit_cast<double>(detail::to_little_endian(bits));
        }
        out.emplace(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace tilewise
