#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgpt/model.hpp"

namespace sgpt {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// token streams

// A corpus is just bytes; token id == byte value.
struct TokenStream {
    std::string id;
    std::vector<uint8_t> bytes;

    size_t size() const { return bytes.size(); }

    std::vector<int> window(size_t start, size_t len) const {
        if (start + len > bytes.size())
            throw std::out_of_range("token stream: window [" + std::to_string(start) + ", +" +
                                    std::to_string(len) + ") beyond corpus of " +
                                    std::to_string(bytes.size()) + " bytes");
        std::vector<int> w(len);
        for (size_t i = 0; i < len; ++i) w[i] = bytes[start + i];
        return w;
    }

    TokenStream slice(size_t start, size_t len, const std::string& suffix) const {
        if (start + len > bytes.size())
            throw std::out_of_range("token stream: slice beyond corpus");
        TokenStream s;
        s.id = id + suffix;
        s.bytes.assign(bytes.begin() + start, bytes.begin() + start + len);
        return s;
    }
};

inline TokenStream load_token_stream(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus file " + path);
    TokenStream ts;
    ts.id = path;
    ts.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return ts;
}

// Non-overlapping calibration windows drawn from the head of the corpus.
inline std::vector<std::vector<int>> head_windows(const TokenStream& corpus, int n_windows,
                                                  int window_len) {
    if (n_windows < 1 || window_len < 1)
        throw std::invalid_argument("calibration: windows and window length must be positive");
    if (corpus.size() < static_cast<size_t>(n_windows) * window_len)
        throw std::invalid_argument("calibration: corpus of " + std::to_string(corpus.size()) +
                                    " bytes is too short for " + std::to_string(n_windows) +
                                    " windows of " + std::to_string(window_len));
    std::vector<std::vector<int>> out;
    out.reserve(n_windows);
    for (int i = 0; i < n_windows; ++i)
        out.push_back(corpus.window(static_cast<size_t>(i) * window_len, window_len));
    return out;
}

// ---------------------------------------------------------------------------
// misc text helpers

// Shortest round-trip decimal form, locale independent.
inline std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline void write_text_atomic(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    fs::path tmp = p;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write file " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    fs::rename(tmp, p);
}

inline std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file " + path);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Comma-separated list of distinct non-negative layer indices; whitespace
// around entries is allowed, order is not significant.
inline std::vector<int> parse_layer_list(const std::string& s) {
    std::vector<int> out;
    // an empty (or all-blank) string is the empty set
    bool blank = true;
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
    if (blank) return out;

    size_t pos = 0;
    while (pos <= s.size()) {
        size_t comma = s.find(',', pos);
        std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos
                                                                   : comma - pos);
        size_t b = tok.find_first_not_of(" \t");
        size_t e = tok.find_last_not_of(" \t");
        if (b == std::string::npos)
            throw std::invalid_argument("layer list: empty entry in \"" + s + "\"");
        tok = tok.substr(b, e - b + 1);
        int value = 0;
        auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
        if (ec != std::errc() || ptr != tok.data() + tok.size() || value < 0)
            throw std::invalid_argument("layer list: \"" + tok +
                                        "\" is not a non-negative integer");
        for (int prev : out)
            if (prev == value)
                throw std::invalid_argument("layer list: duplicate index " + std::to_string(value));
        out.push_back(value);
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint file format
//
//   bytes 0..3   magic "SGPT"
//   byte  4      version (1)
//   bytes 5..8   header length, unsigned 32-bit little-endian
//   then         UTF-8 JSON header {config, metadata, tensors}
//   then         tensor payloads, little-endian f32, each 64-byte aligned
//
// Tensor byte offsets in the header are absolute file offsets.

namespace ckptfmt {

constexpr char kMagic[4] = {'S', 'G', 'P', 'T'};
constexpr uint8_t kVersion = 1;
constexpr size_t kAlign = 64;

inline size_t align_up(size_t x) { return (x + kAlign - 1) / kAlign * kAlign; }

inline json config_to_json(const ModelConfig& cfg, const std::vector<int>& heads_per_layer) {
    json j;
    j["n_layers"] = cfg.n_layers;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    j["d_ff"] = cfg.d_ff;
    j["vocab"] = cfg.vocab;
    j["max_seq"] = cfg.max_seq;
    j["rope_theta"] = cfg.rope_theta;
    j["tie_embeddings"] = cfg.tie_embeddings;
    j["eps"] = cfg.eps;
    j["n_heads_per_layer"] = heads_per_layer;
    return j;
}

inline void config_from_json(const json& j, ModelConfig& cfg, std::vector<int>& heads_per_layer) {
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.vocab = j.at("vocab").get<int>();
    cfg.max_seq = j.at("max_seq").get<int>();
    cfg.rope_theta = j.at("rope_theta").get<double>();
    cfg.tie_embeddings = j.at("tie_embeddings").get<bool>();
    cfg.eps = j.at("eps").get<double>();
    heads_per_layer = j.at("n_heads_per_layer").get<std::vector<int>>();
}

// Payload bytes are defined little-endian; swap on big-endian hosts.
inline void to_little_endian(std::vector<char>& bytes) {
    if constexpr (std::endian::native == std::endian::big) {
        for (size_t i = 0; i + 3 < bytes.size(); i += 4) {
            std::swap(bytes[i], bytes[i + 3]);
            std::swap(bytes[i + 1], bytes[i + 2]);
        }
    }
}

}  // namespace ckptfmt

// Canonical serialization: same checkpoint, same bytes.
inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    ckpt.validate();
    using namespace ckptfmt;

    // Offsets appear inside the header whose length they depend on, so
    // iterate until the layout stops moving (digit widths stabilize fast).
    std::map<std::string, size_t> offsets;
    for (const auto& [name, t] : ckpt.tensors) offsets[name] = 0;
    std::string header;
    for (int pass = 0; pass < 10; ++pass) {
        json j;
        j["config"] = config_to_json(ckpt.config, ckpt.heads_per_layer);
        j["metadata"] = ckpt.metadata;
        json tensors = json::object();
        for (const auto& [name, t] : ckpt.tensors) {
            json tj;
            tj["dtype"] = "f32";
            tj["shape"] = t.shape;
            tj["byte_offset"] = offsets[name];
            tj["byte_len"] = t.numel() * 4;
            tensors[name] = tj;
        }
        j["tensors"] = tensors;
        std::string new_header = j.dump();
        size_t cursor = align_up(4 + 1 + 4 + new_header.size());
        bool moved = false;
        for (const auto& [name, t] : ckpt.tensors) {
            if (offsets[name] != cursor) {
                offsets[name] = cursor;
                moved = true;
            }
            cursor = align_up(cursor + t.numel() * 4);
        }
        if (!moved && new_header == header) break;
        header = new_header;
    }

    size_t total = 0;
    for (const auto& [name, t] : ckpt.tensors)
        total = std::max(total, offsets[name] + t.numel() * 4);
    std::string out(total, '\0');
    std::memcpy(out.data(), kMagic, 4);
    out[4] = static_cast<char>(kVersion);
    uint32_t hlen = static_cast<uint32_t>(header.size());
    for (int i = 0; i < 4; ++i) out[5 + i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
    std::memcpy(out.data() + 9, header.data(), header.size());
    for (const auto& [name, t] : ckpt.tensors) {
        std::vector<char> payload(t.numel() * 4);
        std::memcpy(payload.data(), t.data.data(), payload.size());
        ckptfmt::to_little_endian(payload);
        std::memcpy(out.data() + offsets[name], payload.data(), payload.size());
    }
    return out;
}

inline void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    write_text_atomic(path, serialize_checkpoint(ckpt));
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin) {
    using namespace ckptfmt;
    if (bytes.size() < 9 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint " + origin + ": bad magic, not an SGPT file");
    if (static_cast<uint8_t>(bytes[4]) != kVersion)
        throw std::runtime_error("checkpoint " + origin + ": unsupported version " +
                                 std::to_string(static_cast<int>(bytes[4])));
    uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i)
        hlen |= static_cast<uint32_t>(static_cast<uint8_t>(bytes[5 + i])) << (8 * i);
    if (9 + static_cast<size_t>(hlen) > bytes.size())
        throw std::runtime_error("checkpoint " + origin + ": truncated header");

    json j;
    try {
        j = json::parse(bytes.substr(9, hlen));
    } catch (const std::exception& e) {
        throw std::runtime_error("checkpoint " + origin + ": invalid header JSON: " + e.what());
    }

    Checkpoint ckpt;
    config_from_json(j.at("config"), ckpt.config, ckpt.heads_per_layer);
    ckpt.metadata = j.at("metadata").get<std::map<std::string, std::string>>();

    std::vector<std::pair<size_t, size_t>> ranges;  // (offset, len)
    for (const auto& [name, tj] : j.at("tensors").items()) {
        if (tj.at("dtype").get<std::string>() != "f32")
            throw std::runtime_error("checkpoint " + origin + ": tensor " + name +
                                     " has unsupported dtype");
        std::vector<int> shape = tj.at("shape").get<std::vector<int>>();
        size_t offset = tj.at("byte_offset").get<size_t>();
        size_t len = tj.at("byte_len").get<size_t>();
        size_t numel = Tensor::numel_of(shape);
        if (len != numel * 4)
            throw std::runtime_error("checkpoint " + origin + ": tensor " + name +
                                     " byte_len does not match shape");
        if (offset % kAlign != 0)
            throw std::runtime_error("checkpoint " + origin + ": tensor " + name +
                                     " is not 64-byte aligned");
        if (offset + len > bytes.size())
            throw std::runtime_error("checkpoint " + origin + ": tensor " + name +
                                     " payload is truncated (offset " + std::to_string(offset) +
                                     " + " + std::to_string(len) + " beyond " +
                                     std::to_string(bytes.size()) + " bytes)");
        ranges.emplace_back(offset, len);
        std::vector<char> payload(bytes.data() + offset, bytes.data() + offset + len);
        ckptfmt::to_little_endian(payload);  // involution: LE bytes -> host order
        Tensor t;
        t.shape = std::move(shape);
        t.data.resize(numel);
        std::memcpy(t.data.data(), payload.data(), len);
        ckpt.tensors[name] = std::move(t);
    }
    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i)
        if (ranges[i].first < ranges[i - 1].first + ranges[i - 1].second)
            throw std::runtime_error("checkpoint " + origin + ": overlapping tensor payloads");

    try {
        ckpt.validate();
    } catch (const std::exception& e) {
        throw std::runtime_error("checkpoint " + origin + ": " + e.what());
    }
    return ckpt;
}

inline Checkpoint read_checkpoint(const std::string& path) {
    return deserialize_checkpoint(read_text(path), path);
}

// Comparison used by the surgery identities: everything except the
// history.* provenance entries must match bit for bit.
inline Checkpoint strip_history(const Checkpoint& ckpt) {
    Checkpoint out = ckpt;
    for (auto it = out.metadata.begin(); it != out.metadata.end();)
        it = it->first.rfind("history.", 0) == 0 ? out.metadata.erase(it) : std::next(it);
    return out;
}

inline bool checkpoints_equal_ignoring_history(const Checkpoint& a, const Checkpoint& b) {
    return serialize_checkpoint(strip_history(a)) == serialize_checkpoint(strip_history(b));
}

}  // namespace sgpt
