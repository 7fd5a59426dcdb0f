#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dvlm/errors.hpp"
#include "dvlm/params.hpp"

namespace dvlm {

// Checkpoint layout: <dir>/manifest.json lists every parameter with its shape
// and byte offset into <dir>/params.bin, which holds raw little-endian 32-bit
// floats in manifest order. The manifest also carries a caller-supplied
// metadata object (model configuration, vocabulary fingerprint, ...).
// Reloading a 64-bit store therefore rounds each value to the nearest float;
// saving is deterministic, so identical runs still produce identical files.
inline constexpr int kCheckpointFormat = 1;

template <class S>
void save_checkpoint(const std::string& dir, const ParamStore<S>& ps,
                     const nlohmann::json& meta) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);

    nlohmann::json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["meta"] = meta;
    nlohmann::json plist = nlohmann::json::array();
    std::uint64_t offset = 0;

    std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw IoError("cannot write checkpoint params: " + dir);
    for (size_t i = 0; i < ps.size(); ++i) {
        const Param<S>& p = ps.at(i);
        plist.push_back({{"name", p.name},
                         {"rows", p.value.rows},
                         {"cols", p.value.cols},
                         {"offset", offset}});
        std::vector<float> buf(p.value.a.size());
        for (size_t k = 0; k < buf.size(); ++k) buf[k] = static_cast<float>(p.value.a[k]);
        bin.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
        offset += buf.size() * sizeof(float);
    }
    manifest["params"] = std::move(plist);
    if (!bin) throw IoError("short write to checkpoint params: " + dir);
    bin.close();

    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot write checkpoint manifest: " + dir);
    mf << manifest.dump(2) << '\n';
}

// Parses <dir>/manifest.json and validates the format tag.
inline nlohmann::json read_checkpoint_manifest(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot read checkpoint manifest: " + dir);
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    if (!manifest.contains("format") || manifest["format"].get<int>() != kCheckpointFormat)
        throw IoError("unsupported checkpoint format in " + dir);
    return manifest;
}

inline nlohmann::json read_checkpoint_meta(const std::string& dir) {
    return read_checkpoint_manifest(dir)["meta"];
}

// Loads parameter values into an already-registered store; every manifest
// entry must exist with a matching shape. Returns the stored metadata.
template <class S>
nlohmann::json load_checkpoint(const std::string& dir, ParamStore<S>& ps) {
    namespace fs = std::filesystem;
    nlohmann::json manifest = read_checkpoint_manifest(dir);

    std::ifstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw IoError("cannot read checkpoint params: " + dir);

    for (const auto& entry : manifest["params"]) {
        std::string name = entry["name"].get<std::string>();
        int rows = entry["rows"].get<int>();
        int cols = entry["cols"].get<int>();
        std::uint64_t offset = entry["offset"].get<std::uint64_t>();
        if (!ps.has(name)) throw IoError("checkpoint parameter not registered: " + name);
        Param<S>& p = ps.get(name);
        if (p.value.rows != rows || p.value.cols != cols)
            throw IoError("checkpoint shape mismatch for " + name);
        std::vector<float> buf(p.value.a.size());
        bin.seekg(static_cast<std::streamoff>(offset));
        bin.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!bin) throw IoError("checkpoint params truncated at " + name);
        for (size_t k = 0; k < buf.size(); ++k) p.value.a[k] = static_cast<S>(buf[k]);
    }
    return manifest["meta"];
}

}  // namespace dvlm
