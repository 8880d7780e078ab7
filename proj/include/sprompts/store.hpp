#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sprompts/config.hpp"
#include "sprompts/encoder.hpp"
#include "sprompts/engine.hpp"

namespace sprompts::store {

class StoreError : public std::runtime_error {
  public:
    explicit StoreError(const std::string& what) : std::runtime_error(what) {}
};

// File layout: magic, uint64 little-endian manifest byte length, manifest
// JSON, then every block's float32 values little-endian in manifest order.
// The manifest carries per-block offsets (in floats) and content hashes, so
// truncation and corruption are hard errors, never silent.
inline constexpr char archive_magic[] = "SPCK1\n";
inline constexpr int archive_version = 1;

struct Block {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> values;
};

struct Archive {
    std::string kind; // "backbone" or "session"
    config::json meta;
    std::vector<Block> blocks;
};

inline std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

inline std::int64_t payload_floats(const Archive& a) {
    std::int64_t total = 0;
    for (const auto& b : a.blocks) total += static_cast<std::int64_t>(b.values.size());
    return total;
}

namespace detail {

inline std::int64_t shape_count(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64(const std::string& buf, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    return v;
}

inline float read_f32(const std::string& buf, std::size_t at) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace detail

inline void write_archive(const Archive& a, const std::string& path) {
    config::json manifest;
    manifest["format_version"] = archive_version;
    manifest["kind"] = a.kind;
    manifest["meta"] = a.meta;
    config::json blocks = config::json::array();
    std::int64_t offset = 0;
    for (const auto& b : a.blocks) {
        if (detail::shape_count(b.shape) != static_cast<std::int64_t>(b.values.size()))
            throw StoreError("write_archive: block '" + b.name +
                             "' shape does not match value count");
        config::json jb;
        jb["name"] = b.name;
        jb["shape"] = b.shape;
        jb["offset"] = offset;
        jb["hash"] = hash_hex(engine::hash_floats(b.values));
        blocks.push_back(jb);
        offset += static_cast<std::int64_t>(b.values.size());
    }
    manifest["blocks"] = blocks;

    const std::string text = manifest.dump();
    std::string out;
    out.reserve(sizeof(archive_magic) - 1 + 8 + text.size() + offset * 4);
    out.append(archive_magic, sizeof(archive_magic) - 1);
    detail::append_u64(out, text.size());
    out.append(text);
    for (const auto& b : a.blocks)
        for (float v : b.values) detail::append_f32(out, v);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw StoreError("cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw StoreError("write failed for '" + path + "'");
}

inline Archive read_archive(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw StoreError("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    const std::size_t magic_len = sizeof(archive_magic) - 1;
    if (buf.size() < magic_len + 8 ||
        buf.compare(0, magic_len, archive_magic, magic_len) != 0)
        throw StoreError("'" + path + "' is not a checkpoint file");
    const std::uint64_t manifest_len = detail::read_u64(buf, magic_len);
    if (magic_len + 8 + manifest_len > buf.size())
        throw StoreError("'" + path + "': truncated manifest");

    config::json manifest;
    try {
        manifest = config::json::parse(buf.substr(magic_len + 8, manifest_len));
    } catch (const nlohmann::json::exception& e) {
        throw StoreError("'" + path + "': corrupt manifest: " + e.what());
    }
    if (!manifest.contains("format_version") ||
        manifest.at("format_version").get<int>() != archive_version)
        throw StoreError("'" + path + "': unsupported format version");

    Archive a;
    try {
        a.kind = manifest.at("kind").get<std::string>();
        a.meta = manifest.at("meta");
    } catch (const nlohmann::json::exception& e) {
        throw StoreError("'" + path + "': corrupt manifest: " + e.what());
    }

    const std::size_t payload_at = magic_len + 8 + manifest_len;
    std::int64_t expected_floats = 0;
    try {
        for (const auto& jb : manifest.at("blocks")) {
            Block b;
            b.name = jb.at("name").get<std::string>();
            b.shape = jb.at("shape").get<std::vector<std::int64_t>>();
            const std::int64_t offset = jb.at("offset").get<std::int64_t>();
            const std::int64_t count = detail::shape_count(b.shape);
            if (offset != expected_floats)
                throw StoreError("'" + path + "': block '" + b.name +
                                 "' offset out of order");
            const std::size_t at = payload_at + static_cast<std::size_t>(offset) * 4;
            if (at + static_cast<std::size_t>(count) * 4 > buf.size())
                throw StoreError("'" + path + "': truncated payload at block '" +
                                 b.name + "'");
            b.values.resize(count);
            for (std::int64_t i = 0; i < count; ++i)
                b.values[i] = detail::read_f32(buf, at + static_cast<std::size_t>(i) * 4);
            if (hash_hex(engine::hash_floats(b.values)) !=
                jb.at("hash").get<std::string>())
                throw StoreError("'" + path + "': block '" + b.name + "' hash mismatch");
            expected_floats += count;
            a.blocks.push_back(std::move(b));
        }
    } catch (const nlohmann::json::exception& e) {
        throw StoreError("'" + path + "': corrupt manifest: " + e.what());
    }
    if (payload_at + static_cast<std::size_t>(expected_floats) * 4 != buf.size())
        throw StoreError("'" + path + "': payload size mismatch");
    return a;
}

// ---- backbone checkpoints ----

inline void save_backbone(const encoder::Backbone& bb, const encoder::PretrainStats& stats,
                          const std::string& path) {
    if (!bb.frozen()) throw StoreError("save_backbone: backbone must be frozen");
    Archive a;
    a.kind = "backbone";
    a.meta["encoder"] = config::to_json(bb.config());
    a.meta["fingerprint"] = hash_hex(bb.fingerprint());
    config::json js;
    js["epochs_run"] = stats.epochs_run;
    js["fc_accuracy"] = stats.fc_accuracy;
    js["clip_accuracy"] = stats.clip_accuracy;
    js["reached_gate"] = stats.reached_gate;
    a.meta["pretrain_stats"] = js;
    for (const auto& [name, t] : bb.named_params()) {
        Block b;
        b.name = name;
        b.shape = std::vector<std::int64_t>(t.shape().begin(), t.shape().end());
        b.values = t.values();
        a.blocks.push_back(std::move(b));
    }
    write_archive(a, path);
}

struct LoadedBackbone {
    encoder::Backbone backbone;
    encoder::PretrainStats stats;
};

inline LoadedBackbone load_backbone(const std::string& path) {
    Archive a = read_archive(path);
    if (a.kind != "backbone")
        throw StoreError("'" + path + "' is a '" + a.kind + "' checkpoint, not a backbone");
    encoder::EncoderConfig cfg;
    encoder::PretrainStats stats;
    std::string want_fp;
    try {
        cfg = config::encoder_from_json(a.meta.at("encoder"));
        want_fp = a.meta.at("fingerprint").get<std::string>();
        const auto& js = a.meta.at("pretrain_stats");
        stats.epochs_run = js.at("epochs_run").get<int>();
        stats.fc_accuracy = js.at("fc_accuracy").get<double>();
        stats.clip_accuracy = js.at("clip_accuracy").get<double>();
        stats.reached_gate = js.at("reached_gate").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw StoreError("'" + path + "': corrupt backbone meta: " + e.what());
    } catch (const config::ConfigError& e) {
        throw StoreError("'" + path + "': corrupt backbone meta: " + e.what());
    }
    LoadedBackbone out{encoder::Backbone(cfg, 0), stats};
    if (a.blocks.size() != out.backbone.named_params().size())
        throw StoreError("'" + path + "': backbone block count mismatch");
    for (const auto& b : a.blocks) out.backbone.load_values(b.name, b.values);
    out.backbone.freeze();
    if (hash_hex(out.backbone.fingerprint()) != want_fp)
        throw StoreError("'" + path + "': backbone fingerprint mismatch");
    return out;
}

// ---- session checkpoints ----

// Blocks mirror the in-memory pools: one block per stored entry, so the file
// grows by exactly what a session added (shared entries are stored once).
inline void save_session(const engine::SessionState& st, std::uint64_t backbone_fp,
                         const std::string& path) {
    Archive a;
    a.kind = "session";
    a.meta["method"] = config::to_json(st.config);
    a.meta["backbone_fingerprint"] = hash_hex(backbone_fp);
    a.meta["sessions"] = st.sessions;
    a.meta["feat_dim"] = st.feat_dim;
    a.meta["lang_dim"] = st.lang_dim;
    a.meta["n_classes"] = st.n_classes;

    for (std::size_t e = 0; e < st.image_prompts.entries.size(); ++e)
        a.blocks.push_back({"image_prompt." + std::to_string(e),
                            {st.image_prompts.rows, st.image_prompts.dim},
                            st.image_prompts.entries[e]});
    for (std::size_t e = 0; e < st.lang_prompts.entries.size(); ++e)
        a.blocks.push_back({"lang_prompt." + std::to_string(e),
                            {st.lang_prompts.rows, st.lang_prompts.dim},
                            st.lang_prompts.entries[e]});
    for (std::size_t e = 0; e < st.classifiers.entries.size(); ++e) {
        const auto& cl = st.classifiers.entries[e];
        a.blocks.push_back({"classifier." + std::to_string(e) + ".w",
                            {st.n_classes, st.feat_dim}, cl.w});
        a.blocks.push_back(
            {"classifier." + std::to_string(e) + ".b", {st.n_classes}, cl.b});
    }
    // centroid rows grouped per domain, in row order
    for (int d = 0; d < st.sessions; ++d) {
        Block b;
        b.name = "centroids." + std::to_string(d);
        std::int64_t rows = 0;
        for (std::size_t i = 0; i < st.centroids.rows.size(); ++i) {
            if (st.centroids.domain_of[i] != d) continue;
            b.values.insert(b.values.end(), st.centroids.rows[i].begin(),
                            st.centroids.rows[i].end());
            ++rows;
        }
        b.shape = {rows, static_cast<std::int64_t>(st.centroids.dim)};
        a.blocks.push_back(std::move(b));
    }
    write_archive(a, path);
}

struct LoadedSession {
    engine::SessionState state;
    std::uint64_t backbone_fingerprint = 0;
    std::string backbone_fingerprint_hex;
};

inline LoadedSession load_session(const std::string& path) {
    Archive a = read_archive(path);
    if (a.kind != "session")
        throw StoreError("'" + path + "' is a '" + a.kind + "' checkpoint, not a session");
    LoadedSession out;
    engine::SessionState& st = out.state;
    try {
        st.config = config::method_from_json(a.meta.at("method"));
        out.backbone_fingerprint_hex = a.meta.at("backbone_fingerprint").get<std::string>();
        st.sessions = a.meta.at("sessions").get<int>();
        st.feat_dim = a.meta.at("feat_dim").get<int>();
        st.lang_dim = a.meta.at("lang_dim").get<int>();
        st.n_classes = a.meta.at("n_classes").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw StoreError("'" + path + "': corrupt session meta: " + e.what());
    } catch (const config::ConfigError& e) {
        throw StoreError("'" + path + "': corrupt session meta: " + e.what());
    }
    out.backbone_fingerprint = 0;
    for (char c : out.backbone_fingerprint_hex) {
        out.backbone_fingerprint <<= 4;
        if (c >= '0' && c <= '9') out.backbone_fingerprint |= c - '0';
        else if (c >= 'a' && c <= 'f') out.backbone_fingerprint |= c - 'a' + 10;
        else throw StoreError("'" + path + "': bad fingerprint hex");
    }

    auto find = [&](const std::string& name) -> const Block* {
        for (const auto& b : a.blocks)
            if (b.name == name) return &b;
        return nullptr;
    };
    for (std::size_t e = 0;; ++e) {
        const Block* b = find("image_prompt." + std::to_string(e));
        if (!b) break;
        st.image_prompts.set_shape(b->shape.at(0), b->shape.at(1));
        st.image_prompts.append(b->values);
    }
    for (std::size_t e = 0;; ++e) {
        const Block* b = find("lang_prompt." + std::to_string(e));
        if (!b) break;
        st.lang_prompts.set_shape(b->shape.at(0), b->shape.at(1));
        st.lang_prompts.append(b->values);
    }
    for (std::size_t e = 0;; ++e) {
        const Block* w = find("classifier." + std::to_string(e) + ".w");
        const Block* bb = find("classifier." + std::to_string(e) + ".b");
        if (!w && !bb) break;
        if (!w || !bb)
            throw StoreError("'" + path + "': classifier entry " + std::to_string(e) +
                             " is missing a block");
        st.classifiers.entries.push_back({w->values, bb->values});
    }
    for (int d = 0; d < st.sessions; ++d) {
        const Block* b = find("centroids." + std::to_string(d));
        if (!b)
            throw StoreError("'" + path + "': missing centroids for domain " +
                             std::to_string(d));
        const std::int64_t rows = b->shape.at(0), dim = b->shape.at(1);
        std::vector<std::vector<float>> cents(rows);
        for (std::int64_t r = 0; r < rows; ++r)
            cents[r].assign(b->values.begin() + r * dim, b->values.begin() + (r + 1) * dim);
        st.centroids.append(d, cents);
    }
    return out;
}

// ---- parameter accounting ----

struct DomainAccounting {
    std::int64_t floats_added = 0;  // formula value for this session index
    double relative_increase = 0.0; // against the frozen backbone's float count
};

inline DomainAccounting param_accounting(const engine::MethodConfig& mc,
                                         const encoder::EncoderConfig& ec,
                                         std::int64_t backbone_params, int session) {
    if (backbone_params <= 0)
        throw StoreError("param_accounting: backbone parameter count must be positive");
    DomainAccounting out;
    out.floats_added = engine::session_param_growth(mc, ec, session);
    out.relative_increase =
        static_cast<double>(out.floats_added) / static_cast<double>(backbone_params);
    return out;
}

} // namespace sprompts::store
