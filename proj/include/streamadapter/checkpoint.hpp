// Checkpoint container: an 8-byte little-endian header length, a JSON manifest
// mapping tensor names to shape/dtype/offset (lexicographic by name), then the
// concatenated raw little-endian 64-bit floats. Round-trips are bitwise.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "streamadapter/tensor.hpp"

namespace streamadapter {

inline constexpr int kCheckpointFormatVersion = 1;

namespace ckpt_detail {

inline void put_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void put_f64_le(std::string& out, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64_le(out, bits);
}

inline double get_f64_le(const unsigned char* p) {
    uint64_t bits = get_u64_le(p);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const std::vector<Parameter>& params) {
    std::vector<const Parameter*> sorted;
    for (const auto& p : params) sorted.push_back(&p);
    std::sort(sorted.begin(), sorted.end(), [](const Parameter* a, const Parameter* b) { return a->name < b->name; });
    for (size_t i = 1; i < sorted.size(); ++i)
        if (sorted[i]->name == sorted[i - 1]->name)
            throw std::invalid_argument("save_checkpoint: duplicate tensor name " + sorted[i]->name);

    nlohmann::json tensors = nlohmann::json::object();
    uint64_t offset = 0;
    for (const auto* p : sorted) {
        tensors[p->name] = {{"shape", p->tensor.shape()}, {"dtype", "f64"}, {"offset", offset}};
        offset += static_cast<uint64_t>(p->tensor.numel()) * 8;
    }
    nlohmann::json manifest = {{"format_version", kCheckpointFormatVersion}, {"tensors", tensors}};
    std::string header = manifest.dump();

    std::string blob;
    blob.reserve(8 + header.size() + offset);
    ckpt_detail::put_u64_le(blob, header.size());
    blob += header;
    for (const auto* p : sorted)
        for (double v : p->tensor.data()) ckpt_detail::put_f64_le(blob, v);

    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
        f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!f) throw std::runtime_error("save_checkpoint: short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("save_checkpoint: cannot move " + tmp + " into place");
}

// Loads into the given parameters, matching by name and validating shapes.
// Either every tensor is loaded or none is.
inline void load_checkpoint(const std::string& path, std::vector<Parameter>& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8) throw std::runtime_error("load_checkpoint: truncated header length in " + path);
    uint64_t header_len = ckpt_detail::get_u64_le(bytes.data());
    if (bytes.size() < 8 + header_len) throw std::runtime_error("load_checkpoint: truncated manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<size_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("load_checkpoint: bad manifest: ") + e.what());
    }
    if (manifest.value("format_version", -1) != kCheckpointFormatVersion)
        throw std::runtime_error("load_checkpoint: unsupported format_version");
    const auto& tensors = manifest.at("tensors");

    const unsigned char* body = bytes.data() + 8 + header_len;
    size_t body_size = bytes.size() - 8 - static_cast<size_t>(header_len);

    // stage everything before touching any live tensor
    std::map<std::string, std::vector<double>> staged;
    for (auto& p : params) {
        if (!tensors.contains(p.name)) throw std::runtime_error("load_checkpoint: missing tensor " + p.name);
        const auto& entry = tensors.at(p.name);
        Shape shape = entry.at("shape").get<Shape>();
        if (shape != p.tensor.shape())
            throw std::runtime_error("load_checkpoint: shape mismatch for " + p.name + ": file has " +
                                     shape_str(shape) + ", model has " + shape_str(p.tensor.shape()));
        if (entry.at("dtype").get<std::string>() != "f64")
            throw std::runtime_error("load_checkpoint: unsupported dtype for " + p.name);
        uint64_t offset = entry.at("offset").get<uint64_t>();
        uint64_t n = static_cast<uint64_t>(p.tensor.numel());
        if (offset + n * 8 > body_size)
            throw std::runtime_error("load_checkpoint: body too short for " + p.name);
        std::vector<double> vals(n);
        for (uint64_t i = 0; i < n; ++i) vals[i] = ckpt_detail::get_f64_le(body + offset + i * 8);
        staged[p.name] = std::move(vals);
    }
    for (auto& p : params) p.tensor.mutable_data() = std::move(staged[p.name]);
}

}  // namespace streamadapter
