#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sprompts/data.hpp"
#include "sprompts/encoder.hpp"
#include "sprompts/engine.hpp"
#include "sprompts/rng.hpp"

namespace sprompts::config {

// ordered_json keeps insertion order, so two runs of the same binary emit
// byte-identical documents
using json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void require_object(const json& j, const std::string& ctx) {
    if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
}

inline void reject_unknown_keys(const json& j, const std::string& ctx,
                                std::initializer_list<const char*> allowed) {
    require_object(j, ctx);
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            if (item.key() == a) known = true;
        if (!known) throw ConfigError(ctx + ": unknown key '" + item.key() + "'");
    }
}

template <typename T>
void read_field(const json& j, const std::string& ctx, const char* key, T& into) {
    if (!j.contains(key)) return;
    try {
        into = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(ctx + ": bad value for '" + key + "'");
    }
}

inline void read_field(const json& j, const std::string& ctx, const char* key,
                       float& into) {
    if (!j.contains(key)) return;
    try {
        into = static_cast<float>(j.at(key).get<double>());
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(ctx + ": bad value for '" + key + "'");
    }
}

} // namespace detail

inline encoder::EncoderConfig encoder_from_json(const json& j) {
    encoder::EncoderConfig c;
    detail::reject_unknown_keys(j, "encoder",
                                {"image_size", "patch_size", "embed_dim", "num_layers",
                                 "num_heads", "mlp_ratio", "text_embed_dim",
                                 "text_layers", "text_heads", "vocab"});
    detail::read_field(j, "encoder", "image_size", c.image_size);
    detail::read_field(j, "encoder", "patch_size", c.patch_size);
    detail::read_field(j, "encoder", "embed_dim", c.embed_dim);
    detail::read_field(j, "encoder", "num_layers", c.num_layers);
    detail::read_field(j, "encoder", "num_heads", c.num_heads);
    detail::read_field(j, "encoder", "mlp_ratio", c.mlp_ratio);
    detail::read_field(j, "encoder", "text_embed_dim", c.text_embed_dim);
    detail::read_field(j, "encoder", "text_layers", c.text_layers);
    detail::read_field(j, "encoder", "text_heads", c.text_heads);
    detail::read_field(j, "encoder", "vocab", c.vocab);
    return c;
}

inline json to_json(const encoder::EncoderConfig& c) {
    json j;
    j["image_size"] = c.image_size;
    j["patch_size"] = c.patch_size;
    j["embed_dim"] = c.embed_dim;
    j["num_layers"] = c.num_layers;
    j["num_heads"] = c.num_heads;
    j["mlp_ratio"] = c.mlp_ratio;
    j["text_embed_dim"] = c.text_embed_dim;
    j["text_layers"] = c.text_layers;
    j["text_heads"] = c.text_heads;
    j["vocab"] = c.vocab;
    return j;
}

inline encoder::PretrainConfig pretrain_from_json(const json& j) {
    encoder::PretrainConfig c;
    detail::reject_unknown_keys(
        j, "pretrain",
        {"samples", "holdout_fraction", "epochs", "batch", "lr", "momentum",
         "warmup_fraction", "threshold", "clip_scale", "image_context_rows",
         "text_context_rows", "seed"});
    detail::read_field(j, "pretrain", "samples", c.samples);
    detail::read_field(j, "pretrain", "holdout_fraction", c.holdout_fraction);
    detail::read_field(j, "pretrain", "epochs", c.epochs);
    detail::read_field(j, "pretrain", "batch", c.batch);
    detail::read_field(j, "pretrain", "lr", c.lr);
    detail::read_field(j, "pretrain", "momentum", c.momentum);
    detail::read_field(j, "pretrain", "warmup_fraction", c.warmup_fraction);
    detail::read_field(j, "pretrain", "threshold", c.threshold);
    detail::read_field(j, "pretrain", "clip_scale", c.clip_scale);
    detail::read_field(j, "pretrain", "image_context_rows", c.image_context_rows);
    detail::read_field(j, "pretrain", "text_context_rows", c.text_context_rows);
    detail::read_field(j, "pretrain", "seed", c.seed);
    return c;
}

inline json to_json(const encoder::PretrainConfig& c) {
    json j;
    j["samples"] = c.samples;
    j["holdout_fraction"] = c.holdout_fraction;
    j["epochs"] = c.epochs;
    j["batch"] = c.batch;
    j["lr"] = c.lr;
    j["momentum"] = c.momentum;
    j["warmup_fraction"] = c.warmup_fraction;
    j["threshold"] = c.threshold;
    j["clip_scale"] = c.clip_scale;
    j["image_context_rows"] = c.image_context_rows;
    j["text_context_rows"] = c.text_context_rows;
    j["seed"] = c.seed;
    return j;
}

inline engine::MethodConfig method_from_json(const json& j) {
    engine::MethodConfig c;
    detail::reject_unknown_keys(
        j, "method",
        {"variant", "prompt_len", "lang_prompt_len", "kmeans_k", "knn_k",
         "temperature", "ablation", "classifier_mode", "lr", "momentum", "batch",
         "epochs", "augment"});
    std::string variant = engine::variant_name(c.variant);
    std::string ablation = engine::ablation_name(c.ablation);
    std::string classifier = engine::classifier_mode_name(c.classifier_mode);
    detail::read_field(j, "method", "variant", variant);
    detail::read_field(j, "method", "ablation", ablation);
    detail::read_field(j, "method", "classifier_mode", classifier);
    try {
        c.variant = engine::variant_from_string(variant);
        c.ablation = engine::ablation_from_string(ablation);
        c.classifier_mode = engine::classifier_mode_from_string(classifier);
    } catch (const engine::EngineError& e) {
        throw ConfigError(std::string("method: ") + e.what());
    }
    detail::read_field(j, "method", "prompt_len", c.prompt_len);
    detail::read_field(j, "method", "lang_prompt_len", c.lang_prompt_len);
    detail::read_field(j, "method", "kmeans_k", c.kmeans_k);
    detail::read_field(j, "method", "knn_k", c.knn_k);
    detail::read_field(j, "method", "temperature", c.temperature);
    detail::read_field(j, "method", "lr", c.lr);
    detail::read_field(j, "method", "momentum", c.momentum);
    detail::read_field(j, "method", "batch", c.batch);
    detail::read_field(j, "method", "epochs", c.epochs);
    detail::read_field(j, "method", "augment", c.augment);
    return c;
}

inline json to_json(const engine::MethodConfig& c) {
    json j;
    j["variant"] = engine::variant_name(c.variant);
    j["prompt_len"] = c.prompt_len;
    j["lang_prompt_len"] = c.lang_prompt_len;
    j["kmeans_k"] = c.kmeans_k;
    j["knn_k"] = c.knn_k;
    j["temperature"] = c.temperature;
    j["ablation"] = engine::ablation_name(c.ablation);
    j["classifier_mode"] = engine::classifier_mode_name(c.classifier_mode);
    j["lr"] = c.lr;
    j["momentum"] = c.momentum;
    j["batch"] = c.batch;
    j["epochs"] = c.epochs;
    j["augment"] = c.augment;
    return j;
}

inline data::StreamSpec stream_from_json(const json& j) {
    data::StreamSpec c;
    detail::reject_unknown_keys(j, "stream",
                                {"image_size", "classes", "domains", "ood",
                                 "train_per_class", "test_per_class", "seed"});
    detail::read_field(j, "stream", "image_size", c.image_size);
    detail::read_field(j, "stream", "classes", c.classes);
    detail::read_field(j, "stream", "domains", c.domains);
    detail::read_field(j, "stream", "ood", c.ood);
    detail::read_field(j, "stream", "train_per_class", c.train_per_class);
    detail::read_field(j, "stream", "test_per_class", c.test_per_class);
    detail::read_field(j, "stream", "seed", c.seed);
    return c;
}

inline json to_json(const data::StreamSpec& c) {
    json j;
    j["image_size"] = c.image_size;
    j["classes"] = c.classes;
    j["domains"] = c.domains;
    j["ood"] = c.ood;
    j["train_per_class"] = c.train_per_class;
    j["test_per_class"] = c.test_per_class;
    j["seed"] = c.seed;
    return j;
}

// Grids for the comparison-table sweeps. Every list must stay non-empty;
// sweeping nothing is a configuration mistake, not an empty table.
struct SweepGrids {
    std::vector<int> kmeans_k{1, 3, 5, 7, 9};
    std::vector<int> knn_k{1, 3, 5};
    std::vector<int> prompt_len{2, 5, 10, 20};
    std::vector<int> lang_prompt_len{4, 8, 16};
};

inline SweepGrids sweep_grids_from_json(const json& j) {
    SweepGrids g;
    detail::reject_unknown_keys(j, "ablate",
                                {"kmeans_k", "knn_k", "prompt_len", "lang_prompt_len"});
    detail::read_field(j, "ablate", "kmeans_k", g.kmeans_k);
    detail::read_field(j, "ablate", "knn_k", g.knn_k);
    detail::read_field(j, "ablate", "prompt_len", g.prompt_len);
    detail::read_field(j, "ablate", "lang_prompt_len", g.lang_prompt_len);
    auto check = [](const char* name, const std::vector<int>& v) {
        if (v.empty())
            throw ConfigError(std::string("ablate.") + name + " must list at least one value");
        for (int x : v)
            if (x <= 0)
                throw ConfigError(std::string("ablate.") + name + " values must be positive");
    };
    check("kmeans_k", g.kmeans_k);
    check("knn_k", g.knn_k);
    check("prompt_len", g.prompt_len);
    check("lang_prompt_len", g.lang_prompt_len);
    return g;
}

inline json to_json(const SweepGrids& g) {
    json j;
    j["kmeans_k"] = g.kmeans_k;
    j["knn_k"] = g.knn_k;
    j["prompt_len"] = g.prompt_len;
    j["lang_prompt_len"] = g.lang_prompt_len;
    return j;
}

struct RunConfig {
    encoder::EncoderConfig encoder;
    encoder::PretrainConfig pretrain;
    engine::MethodConfig method;
    data::StreamSpec stream;
    std::vector<engine::PredictMode> modes{
        engine::PredictMode::dil, engine::PredictMode::til,
        engine::PredictMode::random_domain, engine::PredictMode::vote,
        engine::PredictMode::zero_shot};
    SweepGrids ablate;
    bool keep_checkpoints = true;
    std::uint64_t seed = 1;

    void validate() const {
        encoder.validate();
        method.validate();
        if (stream.image_size != encoder.image_size)
            throw ConfigError("stream.image_size must match encoder.image_size");
        if (stream.classes.size() != encoder.vocab.size())
            throw ConfigError("stream.classes and encoder.vocab must have equal size");
        if (stream.classes.empty()) throw ConfigError("stream.classes must be non-empty");
        if (stream.domains.empty()) throw ConfigError("stream.domains must be non-empty");
        if (modes.empty()) throw ConfigError("modes must be non-empty");
    }
};

inline RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    detail::reject_unknown_keys(j, "config",
                                {"encoder", "pretrain", "method", "stream", "modes",
                                 "ablate", "keep_checkpoints", "seed"});
    if (j.contains("encoder")) c.encoder = encoder_from_json(j.at("encoder"));
    if (j.contains("pretrain")) c.pretrain = pretrain_from_json(j.at("pretrain"));
    if (j.contains("method")) c.method = method_from_json(j.at("method"));
    if (j.contains("stream")) c.stream = stream_from_json(j.at("stream"));
    // the text vocabulary names the stream's classes unless given explicitly
    if (!j.contains("encoder") || !j.at("encoder").contains("vocab"))
        c.encoder.vocab = c.stream.classes;
    if (j.contains("modes")) {
        std::vector<std::string> names;
        detail::read_field(j, "config", "modes", names);
        c.modes.clear();
        for (const auto& n : names) {
            try {
                c.modes.push_back(engine::predict_mode_from_string(n));
            } catch (const engine::EngineError& e) {
                throw ConfigError(std::string("modes: ") + e.what());
            }
        }
    }
    if (j.contains("ablate")) c.ablate = sweep_grids_from_json(j.at("ablate"));
    detail::read_field(j, "config", "keep_checkpoints", c.keep_checkpoints);
    detail::read_field(j, "config", "seed", c.seed);
    c.validate();
    return c;
}

inline json to_json(const RunConfig& c) {
    json j;
    j["encoder"] = to_json(c.encoder);
    j["pretrain"] = to_json(c.pretrain);
    j["method"] = to_json(c.method);
    j["stream"] = to_json(c.stream);
    json modes = json::array();
    for (auto m : c.modes) modes.push_back(engine::predict_mode_name(m));
    j["modes"] = modes;
    j["ablate"] = to_json(c.ablate);
    j["keep_checkpoints"] = c.keep_checkpoints;
    j["seed"] = c.seed;
    return j;
}

inline json parse_json_text(const std::string& text, const std::string& ctx) {
    try {
        return json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(ctx + ": " + e.what());
    }
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return run_config_from_json(parse_json_text(buf.str(), path));
}

// Stable digest of a serialized document, for provenance blocks.
inline std::uint64_t digest(const json& j) {
    const std::string text = j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace sprompts::config
