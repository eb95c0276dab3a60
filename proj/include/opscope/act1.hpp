#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "opscope/common.hpp"

namespace opscope::act1 {

// ACT1 container: magic "ACT1", uint32 little-endian manifest length, UTF-8
// JSON manifest, then one raw little-endian float64 row-major block per
// manifest entry, in manifest order. Every analysis artifact that holds
// matrices (activations, deltas, subspaces) uses this container, and it is
// the ingestion boundary for activation dumps written by external runtimes.

struct Block {
    std::string name;
    Eigen::MatrixXd data;
};

struct File {
    nlohmann::json manifest;  // includes a "matrices" array with name/rows/cols
    std::vector<Block> blocks;
};

inline void write(const std::string& path, nlohmann::json manifest,
                  const std::vector<Block>& blocks) {
    nlohmann::json mats = nlohmann::json::array();
    for (const auto& b : blocks) {
        nlohmann::json m;
        m["name"] = b.name;
        m["rows"] = b.data.rows();
        m["cols"] = b.data.cols();
        mats.push_back(m);
    }
    manifest["matrices"] = mats;
    manifest["dtype"] = "float64";
    manifest["endian"] = "little";
    manifest["order"] = "row_major";
    std::string ms = manifest.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw LoadError("cannot open \"" + path + "\" for writing");
    f.write("ACT1", 4);
    std::uint32_t len = static_cast<std::uint32_t>(ms.size());
    unsigned char lb[4] = {static_cast<unsigned char>(len & 0xff),
                           static_cast<unsigned char>((len >> 8) & 0xff),
                           static_cast<unsigned char>((len >> 16) & 0xff),
                           static_cast<unsigned char>((len >> 24) & 0xff)};
    f.write(reinterpret_cast<const char*>(lb), 4);
    f.write(ms.data(), static_cast<std::streamsize>(ms.size()));
    for (const auto& b : blocks) {
        for (long i = 0; i < b.data.rows(); ++i)
            for (long j = 0; j < b.data.cols(); ++j) {
                double v = b.data(i, j);
                f.write(reinterpret_cast<const char*>(&v), sizeof(double));
            }
    }
    if (!f) throw LoadError("short write to \"" + path + "\"");
}

inline File read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("cannot open \"" + path + "\"");
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "ACT1", 4) != 0)
        throw LoadError("\"" + path + "\": bad magic, expected ACT1");
    unsigned char lb[4];
    f.read(reinterpret_cast<char*>(lb), 4);
    if (!f) throw LoadError("\"" + path + "\": truncated manifest length");
    std::uint32_t len = static_cast<std::uint32_t>(lb[0]) |
                        (static_cast<std::uint32_t>(lb[1]) << 8) |
                        (static_cast<std::uint32_t>(lb[2]) << 16) |
                        (static_cast<std::uint32_t>(lb[3]) << 24);
    std::string ms(len, '\0');
    f.read(ms.data(), static_cast<std::streamsize>(len));
    if (!f) throw LoadError("\"" + path + "\": truncated manifest");

    File out;
    try {
        out.manifest = nlohmann::json::parse(ms);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("\"" + path + "\": malformed manifest JSON: " + e.what());
    }
    if (!out.manifest.contains("matrices") || !out.manifest["matrices"].is_array())
        throw LoadError("\"" + path + "\": manifest has no matrices array");

    for (const auto& m : out.manifest["matrices"]) {
        Block b;
        b.name = m.at("name").get<std::string>();
        long rows = m.at("rows").get<long>();
        long cols = m.at("cols").get<long>();
        if (rows < 0 || cols < 0)
            throw LoadError("\"" + path + "\": matrix \"" + b.name + "\" has negative shape");
        b.data.resize(rows, cols);
        for (long i = 0; i < rows; ++i)
            for (long j = 0; j < cols; ++j) {
                double v;
                f.read(reinterpret_cast<char*>(&v), sizeof(double));
                if (!f)
                    throw LoadError("\"" + path + "\": matrix \"" + b.name +
                                    "\" truncated (manifest/tensor mismatch)");
                b.data(i, j) = v;
            }
        out.blocks.push_back(std::move(b));
    }
    // trailing bytes also count as a manifest mismatch
    char extra;
    f.read(&extra, 1);
    if (f)
        throw LoadError("\"" + path + "\": trailing bytes beyond manifest");
    return out;
}

}  // namespace opscope::act1
