#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "opscope/common.hpp"
#include "opscope/model.hpp"

namespace opscope {

// TMW1 weight file: magic "TMW1", uint32 little-endian header length, UTF-8
// JSON header (config + ordered tensor manifest), then raw little-endian
// float32 tensors in manifest order, row-major.

namespace detail {

struct TensorRef {
    std::string name;
    std::vector<long> shape;
    const float* data;
};

inline long shape_count(const std::vector<long>& shape) {
    long n = 1;
    for (long s : shape) n *= s;
    return n;
}

// Row-major copies; Eigen matrices are column-major by default.
inline std::vector<float> to_row_major(const Eigen::MatrixXf& m) {
    std::vector<float> out(static_cast<std::size_t>(m.rows() * m.cols()));
    for (long i = 0; i < m.rows(); ++i)
        for (long j = 0; j < m.cols(); ++j)
            out[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
    return out;
}

inline Eigen::MatrixXf from_row_major(const std::vector<float>& v, long rows, long cols) {
    Eigen::MatrixXf m(rows, cols);
    for (long i = 0; i < rows; ++i)
        for (long j = 0; j < cols; ++j)
            m(i, j) = v[static_cast<std::size_t>(i * cols + j)];
    return m;
}

inline std::vector<std::pair<std::string, std::vector<long>>> tensor_manifest(
    const ModelConfig& cfg) {
    std::vector<std::pair<std::string, std::vector<long>>> m;
    const long d = cfg.d_model;
    m.push_back({"tok_embed", {cfg.vocab_size, d}});
    m.push_back({"pos_embed", {cfg.max_seq_len, d}});
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        m.push_back({p + "ln1_gain", {d}});
        m.push_back({p + "attn_wq", {d, d}});
        m.push_back({p + "attn_wk", {d, d}});
        m.push_back({p + "attn_wv", {d, d}});
        m.push_back({p + "attn_wo", {d, d}});
        m.push_back({p + "ln2_gain", {d}});
        m.push_back({p + "mlp_win", {cfg.d_mlp, d}});
        m.push_back({p + "mlp_bin", {cfg.d_mlp}});
        m.push_back({p + "mlp_wout", {d, cfg.d_mlp}});
        m.push_back({p + "mlp_bout", {d}});
    }
    m.push_back({"unembed", {cfg.vocab_size, d}});
    return m;
}

}  // namespace detail

inline void save_weights(const WeightBundle& w, const std::string& path) {
    w.validate();
    const auto& cfg = w.config;

    nlohmann::json header;
    header["config"] = {{"n_layers", cfg.n_layers},   {"d_model", cfg.d_model},
                        {"n_heads", cfg.n_heads},     {"d_mlp", cfg.d_mlp},
                        {"vocab_size", cfg.vocab_size},
                        {"max_seq_len", cfg.max_seq_len},
                        {"final_norm", cfg.final_norm}};
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, shape] : detail::tensor_manifest(cfg))
        tensors.push_back({{"name", name}, {"shape", shape}});
    header["tensors"] = tensors;
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw LoadError("cannot open \"" + path + "\" for writing");
    f.write("TMW1", 4);
    std::uint32_t len = static_cast<std::uint32_t>(hs.size());
    unsigned char lb[4] = {static_cast<unsigned char>(len & 0xff),
                           static_cast<unsigned char>((len >> 8) & 0xff),
                           static_cast<unsigned char>((len >> 16) & 0xff),
                           static_cast<unsigned char>((len >> 24) & 0xff)};
    f.write(reinterpret_cast<const char*>(lb), 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));

    auto write_mat = [&](const Eigen::MatrixXf& m) {
        auto rm = detail::to_row_major(m);
        f.write(reinterpret_cast<const char*>(rm.data()),
                static_cast<std::streamsize>(rm.size() * sizeof(float)));
    };
    auto write_vec = [&](const Eigen::VectorXf& v) {
        f.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(static_cast<std::size_t>(v.size()) * sizeof(float)));
    };

    write_mat(w.tok_embed);
    write_mat(w.pos_embed);
    for (const auto& lw : w.layers) {
        write_vec(lw.ln1_gain);
        write_mat(lw.attn_wq);
        write_mat(lw.attn_wk);
        write_mat(lw.attn_wv);
        write_mat(lw.attn_wo);
        write_vec(lw.ln2_gain);
        write_mat(lw.mlp_win);
        write_vec(lw.mlp_bin);
        write_mat(lw.mlp_wout);
        write_vec(lw.mlp_bout);
    }
    write_mat(w.unembed);
    if (!f) throw LoadError("short write to \"" + path + "\"");
}

inline WeightBundle load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("cannot open weight file \"" + path + "\"");
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "TMW1", 4) != 0)
        throw LoadError("\"" + path + "\": bad magic, expected TMW1");
    unsigned char lb[4];
    f.read(reinterpret_cast<char*>(lb), 4);
    if (!f) throw LoadError("\"" + path + "\": truncated header length");
    std::uint32_t len = static_cast<std::uint32_t>(lb[0]) |
                        (static_cast<std::uint32_t>(lb[1]) << 8) |
                        (static_cast<std::uint32_t>(lb[2]) << 16) |
                        (static_cast<std::uint32_t>(lb[3]) << 24);
    std::string hs(len, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(len));
    if (!f) throw LoadError("\"" + path + "\": truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("\"" + path + "\": malformed header JSON: " + e.what());
    }

    WeightBundle w;
    try {
        const auto& c = header.at("config");
        w.config.n_layers = c.at("n_layers").get<int>();
        w.config.d_model = c.at("d_model").get<int>();
        w.config.n_heads = c.at("n_heads").get<int>();
        w.config.d_mlp = c.at("d_mlp").get<int>();
        w.config.vocab_size = c.at("vocab_size").get<int>();
        w.config.max_seq_len = c.at("max_seq_len").get<int>();
        w.config.final_norm = c.at("final_norm").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("\"" + path + "\": missing config field: " + e.what());
    }
    w.config.validate();

    // The header's tensor list must match the schema exactly, in order.
    auto expected = detail::tensor_manifest(w.config);
    const auto& tensors = header.at("tensors");
    if (!tensors.is_array() || tensors.size() != expected.size())
        throw LoadError("\"" + path + "\": tensor manifest size mismatch");
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& t = tensors[i];
        if (t.at("name").get<std::string>() != expected[i].first)
            throw LoadError("\"" + path + "\": tensor \"" +
                            t.at("name").get<std::string>() +
                            "\" out of order, expected \"" + expected[i].first + "\"");
        auto shape = t.at("shape").get<std::vector<long>>();
        if (shape != expected[i].second)
            throw LoadError("tensor \"" + expected[i].first + "\": shape mismatch in header");
    }

    auto read_block = [&](const std::string& name, long count) {
        std::vector<float> buf(static_cast<std::size_t>(count));
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!f)
            throw LoadError("tensor \"" + name + "\": shape mismatch (file truncated)");
        for (float x : buf)
            if (!std::isfinite(x))
                throw LoadError("tensor \"" + name + "\": non-finite value");
        return buf;
    };
    auto read_mat = [&](const std::string& name, long rows, long cols) {
        return detail::from_row_major(read_block(name, rows * cols), rows, cols);
    };
    auto read_vec = [&](const std::string& name, long size) {
        auto buf = read_block(name, size);
        Eigen::VectorXf v(size);
        for (long i = 0; i < size; ++i) v[i] = buf[static_cast<std::size_t>(i)];
        return v;
    };

    const long d = w.config.d_model;
    w.tok_embed = read_mat("tok_embed", w.config.vocab_size, d);
    w.pos_embed = read_mat("pos_embed", w.config.max_seq_len, d);
    w.layers.resize(static_cast<std::size_t>(w.config.n_layers));
    for (int l = 0; l < w.config.n_layers; ++l) {
        auto& lw = w.layers[static_cast<std::size_t>(l)];
        const std::string p = "layers." + std::to_string(l) + ".";
        lw.ln1_gain = read_vec(p + "ln1_gain", d);
        lw.attn_wq = read_mat(p + "attn_wq", d, d);
        lw.attn_wk = read_mat(p + "attn_wk", d, d);
        lw.attn_wv = read_mat(p + "attn_wv", d, d);
        lw.attn_wo = read_mat(p + "attn_wo", d, d);
        lw.ln2_gain = read_vec(p + "ln2_gain", d);
        lw.mlp_win = read_mat(p + "mlp_win", w.config.d_mlp, d);
        lw.mlp_bin = read_vec(p + "mlp_bin", w.config.d_mlp);
        lw.mlp_wout = read_mat(p + "mlp_wout", d, w.config.d_mlp);
        lw.mlp_bout = read_vec(p + "mlp_bout", d);
    }
    w.unembed = read_mat("unembed", w.config.vocab_size, d);

    w.validate();
    return w;
}

/// FNV-1a of the raw file bytes; recorded in activation-store manifests.
inline std::string hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("cannot open \"" + path + "\" for hashing");
    std::string bytes((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
    return fnv1a64_hex(bytes);
}

}  // namespace opscope
