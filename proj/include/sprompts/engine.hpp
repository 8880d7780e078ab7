#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sprompts/data.hpp"
#include "sprompts/encoder.hpp"
#include "sprompts/ops.hpp"
#include "sprompts/optim.hpp"
#include "sprompts/rng.hpp"
#include "sprompts/router.hpp"
#include "sprompts/tensor.hpp"

namespace sprompts::engine {

using gradcore::Tensor;

struct EngineError : std::runtime_error {
    explicit EngineError(const std::string& msg) : std::runtime_error(msg) {}
};

// Variant selects the per-domain classifier family: a trained linear head on
// image features, or cosine similarity against text features built from a
// trained language context.
enum class Variant { image_only, language_image };

enum class Ablation {
    none,
    shared_prompts_dependent, // one prompt set, retuned every session
    frozen_language_prompts,  // language context trained once, frozen after
    zero_shot_first_domain    // evaluation-only: always use domain 0
};

// Linear-head handling across sessions (image_only variant).
enum class ClassifierMode { independent, shared_tuned, frozen_after_first };

enum class PredictMode { dil, til, random_domain, vote, zero_shot };

inline std::string variant_name(Variant v) {
    return v == Variant::image_only ? "image_only" : "language_image";
}
inline Variant variant_from_string(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (s == "image_only" || s == "s-iprompts" || s == "siprompts") return Variant::image_only;
    if (s == "language_image" || s == "s-liprompts" || s == "sliprompts")
        return Variant::language_image;
    throw EngineError("unknown variant '" + s + "'");
}

inline std::string ablation_name(Ablation a) {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::shared_prompts_dependent: return "shared_prompts_dependent";
        case Ablation::frozen_language_prompts: return "frozen_language_prompts";
        case Ablation::zero_shot_first_domain: return "zero_shot_first_domain";
    }
    throw EngineError("unknown ablation value");
}
inline Ablation ablation_from_string(const std::string& s) {
    if (s == "none") return Ablation::none;
    if (s == "shared_prompts_dependent") return Ablation::shared_prompts_dependent;
    if (s == "frozen_language_prompts") return Ablation::frozen_language_prompts;
    if (s == "zero_shot_first_domain") return Ablation::zero_shot_first_domain;
    throw EngineError("unknown ablation '" + s + "'");
}

inline std::string classifier_mode_name(ClassifierMode m) {
    switch (m) {
        case ClassifierMode::independent: return "independent";
        case ClassifierMode::shared_tuned: return "shared_tuned";
        case ClassifierMode::frozen_after_first: return "frozen_after_first";
    }
    throw EngineError("unknown classifier mode value");
}
inline ClassifierMode classifier_mode_from_string(const std::string& s) {
    if (s == "independent") return ClassifierMode::independent;
    if (s == "shared_tuned") return ClassifierMode::shared_tuned;
    if (s == "frozen_after_first") return ClassifierMode::frozen_after_first;
    throw EngineError("unknown classifier mode '" + s + "'");
}

inline std::string predict_mode_name(PredictMode m) {
    switch (m) {
        case PredictMode::dil: return "dil";
        case PredictMode::til: return "til";
        case PredictMode::random_domain: return "random";
        case PredictMode::vote: return "vote";
        case PredictMode::zero_shot: return "zero-shot";
    }
    throw EngineError("unknown predict mode value");
}
inline PredictMode predict_mode_from_string(const std::string& s) {
    if (s == "dil") return PredictMode::dil;
    if (s == "til") return PredictMode::til;
    if (s == "random") return PredictMode::random_domain;
    if (s == "vote") return PredictMode::vote;
    if (s == "zero-shot" || s == "zero_shot") return PredictMode::zero_shot;
    throw EngineError("unknown predict mode '" + s + "'");
}

struct MethodConfig {
    Variant variant = Variant::language_image;
    int prompt_len = 10;      // image prompt rows per domain
    int lang_prompt_len = 16; // language context rows per domain
    int kmeans_k = 5;         // centroids per domain
    int knn_k = 1;            // neighbours consulted when routing
    float temperature = 1.0f; // multiplies each cosine before the softmax
    Ablation ablation = Ablation::none;
    ClassifierMode classifier_mode = ClassifierMode::independent;
    float lr = 0.1f;
    float momentum = 0.9f;
    int batch = 128;
    int epochs = 30;
    bool augment = true; // flip/crop jitter during session training

    void validate() const {
        if (prompt_len <= 0 || lang_prompt_len <= 0)
            throw EngineError("MethodConfig: prompt lengths must be positive");
        if (kmeans_k <= 0 || knn_k <= 0)
            throw EngineError("MethodConfig: kmeans_k and knn_k must be positive");
        if (!(temperature > 0.0f))
            throw EngineError("MethodConfig: temperature must be positive");
        if (lr <= 0.0f || momentum < 0.0f || momentum >= 1.0f)
            throw EngineError("MethodConfig: bad optimizer settings");
        if (batch <= 0 || epochs <= 0)
            throw EngineError("MethodConfig: batch and epochs must be positive");
    }
};

// ---- pools ----

struct PromptPool {
    std::int64_t rows = 0, dim = 0;
    std::vector<std::vector<float>> entries;

    void set_shape(std::int64_t r, std::int64_t d) {
        if (rows == 0 && dim == 0) {
            rows = r;
            dim = d;
        } else if (rows != r || dim != d) {
            throw EngineError("PromptPool: shape " + std::to_string(r) + "x" +
                              std::to_string(d) + " does not match pool " +
                              std::to_string(rows) + "x" + std::to_string(dim));
        }
    }
    void append(std::vector<float> entry) {
        if (static_cast<std::int64_t>(entry.size()) != rows * dim)
            throw EngineError("PromptPool: entry size " + std::to_string(entry.size()) +
                              " does not match " + std::to_string(rows * dim));
        entries.push_back(std::move(entry));
    }
};

// Linear head weights stored one row per class: w is C x D row-major.
struct Classifier {
    std::vector<float> w;
    std::vector<float> b;
};

struct ClassifierPool {
    std::vector<Classifier> entries;
};

// Everything a run accumulates across sessions. After a session completes the
// state is an immutable snapshot for inference; prediction never mutates it.
struct SessionState {
    MethodConfig config;
    int feat_dim = 0; // image feature width, also the routing feature width
    int lang_dim = 0;
    int n_classes = 0;
    PromptPool image_prompts;
    PromptPool lang_prompts;
    ClassifierPool classifiers;
    router::CentroidTable centroids;
    int sessions = 0;
};

inline std::uint64_t hash_floats(const std::vector<float>& v) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* b = reinterpret_cast<const unsigned char*>(v.data());
    for (std::size_t i = 0; i < v.size() * sizeof(float); ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Pool entry used for a given domain under the active ablation.
inline std::size_t image_entry(const MethodConfig& c, int domain) {
    return c.ablation == Ablation::shared_prompts_dependent ? 0u
                                                            : static_cast<std::size_t>(domain);
}
inline std::size_t lang_entry(const MethodConfig& c, int domain) {
    if (c.ablation == Ablation::shared_prompts_dependent ||
        c.ablation == Ablation::frozen_language_prompts)
        return 0;
    return static_cast<std::size_t>(domain);
}
inline std::size_t classifier_entry(const MethodConfig& c, int domain) {
    return c.classifier_mode == ClassifierMode::independent
               ? static_cast<std::size_t>(domain)
               : 0u;
}

// ---- classifier heads ----

// Linear-head class probabilities: softmax(W f + b). w has one row per class.
inline std::vector<float> fc_logits(const std::vector<float>& f,
                                    const std::vector<float>& w,
                                    const std::vector<float>& b) {
    const std::size_t d = f.size(), c = b.size();
    if (c == 0 || d == 0 || w.size() != c * d)
        throw EngineError("fc_logits: weight size " + std::to_string(w.size()) +
                          " does not match " + std::to_string(c) + " classes x " +
                          std::to_string(d) + " features");
    std::vector<double> z(c);
    for (std::size_t j = 0; j < c; ++j) {
        double acc = b[j];
        const float* row = w.data() + j * d;
        for (std::size_t i = 0; i < d; ++i) acc += static_cast<double>(row[i]) * f[i];
        z[j] = acc;
    }
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double sum = 0.0;
    for (double& v : z) {
        v = std::exp(v - zmax);
        sum += v;
    }
    std::vector<float> probs(c);
    for (std::size_t j = 0; j < c; ++j) probs[j] = static_cast<float>(z[j] / sum);
    return probs;
}

// Cosine-similarity class probabilities: softmax(tau * cos(f, g_j)). Each
// cosine is computed in double and rounded to float exactly once, so positive
// rescaling of f or any g_j cannot move the result.
inline std::vector<float> clip_logits(const std::vector<float>& f,
                                      const std::vector<std::vector<float>>& g,
                                      float tau) {
    if (!(tau > 0.0f)) throw EngineError("clip_logits: temperature must be positive");
    if (g.empty() || f.empty()) throw EngineError("clip_logits: empty inputs");
    double fn = 0.0;
    for (float v : f) fn += static_cast<double>(v) * v;
    if (fn == 0.0) throw EngineError("clip_logits: zero-norm feature");
    fn = std::sqrt(fn);
    const std::size_t c = g.size();
    std::vector<float> cosv(c);
    for (std::size_t j = 0; j < c; ++j) {
        if (g[j].size() != f.size())
            throw EngineError("clip_logits: class feature " + std::to_string(j) +
                              " width " + std::to_string(g[j].size()) +
                              " does not match feature width " + std::to_string(f.size()));
        double gn = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            gn += static_cast<double>(g[j][i]) * g[j][i];
            dot += static_cast<double>(f[i]) * g[j][i];
        }
        if (gn == 0.0)
            throw EngineError("clip_logits: zero-norm class feature " + std::to_string(j));
        cosv[j] = static_cast<float>(std::clamp(dot / (fn * std::sqrt(gn)), -1.0, 1.0));
    }
    std::vector<double> z(c);
    double zmax = -1e300;
    for (std::size_t j = 0; j < c; ++j) {
        z[j] = static_cast<double>(tau) * cosv[j];
        zmax = std::max(zmax, z[j]);
    }
    double sum = 0.0;
    for (double& v : z) {
        v = std::exp(v - zmax);
        sum += v;
    }
    std::vector<float> probs(c);
    for (std::size_t j = 0; j < c; ++j) probs[j] = static_cast<float>(z[j] / sum);
    return probs;
}

// ---- session training ----

struct SessionTrainables {
    Tensor image_prompt;            // [prompt_len, feat_dim]
    Tensor lang_prompt;             // [lang_prompt_len, lang_dim], language_image only
    Tensor w, b;                    // [feat_dim, C], [C], image_only only
    std::vector<Tensor> trainables; // exactly what the optimizer updates
};

// Builds the trainables for session st.sessions: fresh normal(0, 0.02) draws,
// or the continued/frozen entries the active ablation dictates.
inline SessionTrainables init_session_prompts(const encoder::Backbone& backbone,
                                              const SessionState& st,
                                              std::uint64_t run_seed) {
    const MethodConfig& mc = st.config;
    mc.validate();
    const auto& ec = backbone.config();
    const int s = st.sessions;
    const bool shared = mc.ablation == Ablation::shared_prompts_dependent;
    const bool frozen_lang = mc.ablation == Ablation::frozen_language_prompts;

    auto check_len = [s](std::size_t have, std::size_t want, const char* pool) {
        if (have != want)
            throw EngineError(std::string("init_session_prompts: ") + pool + " holds " +
                              std::to_string(have) + " entries before session " +
                              std::to_string(s) + ", expected " + std::to_string(want));
    };
    const std::size_t want_img = shared ? std::min(s, 1) : s;
    check_len(st.image_prompts.entries.size(), want_img, "image prompt pool");
    if (mc.variant == Variant::language_image) {
        const std::size_t want_lang = (shared || frozen_lang) ? std::min(s, 1) : s;
        check_len(st.lang_prompts.entries.size(), want_lang, "language prompt pool");
    } else {
        const std::size_t want_cls =
            mc.classifier_mode == ClassifierMode::independent ? s : std::min(s, 1);
        check_len(st.classifiers.entries.size(), want_cls, "classifier pool");
    }

    Rng rng(derive_seed(run_seed, "prompt-init", static_cast<std::uint64_t>(s)));
    SessionTrainables out;

    if (shared && s > 0) {
        out.image_prompt = Tensor::leaf({mc.prompt_len, ec.embed_dim},
                                        st.image_prompts.entries[0], true, "image_prompt");
    } else {
        out.image_prompt = Tensor::randn({mc.prompt_len, ec.embed_dim}, rng, 0.02f, true,
                                         "image_prompt");
    }
    out.trainables.push_back(out.image_prompt);

    if (mc.variant == Variant::language_image) {
        if ((shared || frozen_lang) && s > 0) {
            const bool trainable = shared; // frozen ablation stops training it
            out.lang_prompt = Tensor::leaf({mc.lang_prompt_len, ec.text_embed_dim},
                                           st.lang_prompts.entries[0], trainable,
                                           "lang_prompt");
            if (trainable) out.trainables.push_back(out.lang_prompt);
        } else {
            out.lang_prompt = Tensor::randn({mc.lang_prompt_len, ec.text_embed_dim}, rng,
                                            0.02f, true, "lang_prompt");
            out.trainables.push_back(out.lang_prompt);
        }
    } else {
        const int c = ec.num_classes();
        const bool reuse = mc.classifier_mode != ClassifierMode::independent && s > 0;
        if (reuse) {
            // stored rows are per class; the training tensor is its transpose
            const auto& entry = st.classifiers.entries[0];
            std::vector<float> wt(static_cast<std::size_t>(ec.embed_dim) * c);
            for (int j = 0; j < c; ++j)
                for (int i = 0; i < ec.embed_dim; ++i)
                    wt[i * c + j] = entry.w[j * ec.embed_dim + i];
            const bool trainable = mc.classifier_mode == ClassifierMode::shared_tuned;
            out.w = Tensor::leaf({ec.embed_dim, c}, std::move(wt), trainable, "head_w");
            out.b = Tensor::leaf({c}, st.classifiers.entries[0].b, trainable, "head_b");
            if (trainable) {
                out.trainables.push_back(out.w);
                out.trainables.push_back(out.b);
            }
        } else {
            out.w = Tensor::randn({ec.embed_dim, c}, rng, 0.02f, true, "head_w");
            out.b = Tensor::zeros({c}, true, "head_b");
            out.trainables.push_back(out.w);
            out.trainables.push_back(out.b);
        }
    }
    return out;
}

// Writes the trained session parameters back into the pools, honoring the
// append-only contract (shared/frozen modes overwrite or keep entry 0).
inline void commit_session(SessionState& st, const SessionTrainables& tr) {
    const MethodConfig& mc = st.config;
    const int s = st.sessions;
    const bool shared = mc.ablation == Ablation::shared_prompts_dependent;
    const bool frozen_lang = mc.ablation == Ablation::frozen_language_prompts;

    st.image_prompts.set_shape(mc.prompt_len, st.feat_dim);
    if (shared && s > 0)
        st.image_prompts.entries[0] = tr.image_prompt.values();
    else
        st.image_prompts.append(tr.image_prompt.values());

    if (mc.variant == Variant::language_image) {
        st.lang_prompts.set_shape(mc.lang_prompt_len, st.lang_dim);
        if (s == 0)
            st.lang_prompts.append(tr.lang_prompt.values());
        else if (shared)
            st.lang_prompts.entries[0] = tr.lang_prompt.values();
        else if (!frozen_lang)
            st.lang_prompts.append(tr.lang_prompt.values());
    } else {
        const int c = st.n_classes, d = st.feat_dim;
        Classifier cls;
        cls.w.resize(static_cast<std::size_t>(c) * d);
        for (int j = 0; j < c; ++j)
            for (int i = 0; i < d; ++i) cls.w[j * d + i] = tr.w.values()[i * c + j];
        cls.b = tr.b.values();
        if (mc.classifier_mode == ClassifierMode::independent || s == 0)
            st.classifiers.entries.push_back(std::move(cls));
        else if (mc.classifier_mode == ClassifierMode::shared_tuned)
            st.classifiers.entries[0] = std::move(cls);
        // frozen_after_first: entry 0 stays as trained in session 0
    }
}

// Prompt-free image features for routing and clustering, row per image.
inline std::vector<std::vector<float>> prompt_free_features(
    const encoder::Backbone& backbone, const std::vector<const data::Image*>& images) {
    const int d = backbone.config().embed_dim;
    std::vector<std::vector<float>> out;
    out.reserve(images.size());
    for (std::size_t at = 0; at < images.size(); at += 256) {
        const std::size_t bs = std::min<std::size_t>(256, images.size() - at);
        std::vector<const data::Image*> chunk(images.begin() + at, images.begin() + at + bs);
        Tensor f = backbone.encode_image_batch(chunk, Tensor());
        for (std::size_t i = 0; i < bs; ++i)
            out.emplace_back(f.values().begin() + i * d, f.values().begin() + (i + 1) * d);
    }
    return out;
}

struct TrainSummary {
    int session = 0;
    std::int64_t steps = 0;
    float final_loss = 0.0f;
    double train_accuracy = 0.0;
};

namespace detail {

inline Tensor batch_logits(const encoder::Backbone& backbone, const SessionState& st,
                           const std::vector<const data::Image*>& images,
                           const SessionTrainables& tr) {
    Tensor f = backbone.encode_image_batch(images, tr.image_prompt);
    if (st.config.variant == Variant::language_image) {
        Tensor g = backbone.encode_text_all(tr.lang_prompt);
        return gradcore::scale(gradcore::cosine_rows(backbone.image_joint(f), g),
                               st.config.temperature);
    }
    return gradcore::linear(f, tr.w, tr.b);
}

} // namespace detail

// One incremental session: trains this session's prompts (and head) on the
// domain's data, then clusters its prompt-free features into routing
// centroids. Earlier pool entries are never touched.
inline TrainSummary train_session(const encoder::Backbone& backbone,
                                  const data::LabeledDataset& train_set,
                                  SessionState& st, std::uint64_t run_seed) {
    const MethodConfig& mc = st.config;
    mc.validate();
    if (!backbone.frozen()) throw EngineError("train_session: backbone must be frozen");
    if (train_set.size() == 0) throw EngineError("train_session: empty training set");
    const auto& ec = backbone.config();
    if (st.sessions == 0) {
        st.feat_dim = ec.embed_dim;
        st.lang_dim = ec.text_embed_dim;
        st.n_classes = ec.num_classes();
    } else if (st.feat_dim != ec.embed_dim || st.lang_dim != ec.text_embed_dim ||
               st.n_classes != ec.num_classes()) {
        throw EngineError("train_session: backbone dims changed between sessions");
    }
    for (std::int64_t y : train_set.labels)
        if (y < 0 || y >= st.n_classes)
            throw EngineError("train_session: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(st.n_classes) + ")");

    const int s = st.sessions;
    SessionTrainables tr = init_session_prompts(backbone, st, run_seed);
    gradcore::SgdMomentum opt(mc.momentum);
    for (auto& t : tr.trainables) opt.add_param(t);

    const std::int64_t n = static_cast<std::int64_t>(train_set.size());
    const std::int64_t steps_per_epoch = (n + mc.batch - 1) / mc.batch;
    const std::int64_t total_steps = steps_per_epoch * mc.epochs;
    gradcore::CosineLr sched(mc.lr, total_steps);

    TrainSummary summary;
    summary.session = s;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < mc.epochs; ++epoch) {
        std::vector<std::int64_t> order(n);
        for (std::int64_t i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(run_seed, "shuffle", s, epoch));
        for (std::int64_t i = n - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.next_below(i + 1)]);

        for (std::int64_t at = 0; at < n; at += mc.batch) {
            const std::int64_t bs = std::min<std::int64_t>(mc.batch, n - at);
            std::vector<data::Image> augmented;
            std::vector<const data::Image*> images(bs);
            std::vector<std::int64_t> labels(bs);
            if (mc.augment) augmented.reserve(bs);
            for (std::int64_t i = 0; i < bs; ++i) {
                const std::int64_t idx = order[at + i];
                labels[i] = train_set.labels[idx];
                if (mc.augment) {
                    Rng aug_rng(derive_seed(run_seed, "aug", s, epoch, at + i));
                    augmented.push_back(
                        data::augment_flip_crop(train_set.images[idx], aug_rng));
                    images[i] = &augmented.back();
                } else {
                    images[i] = &train_set.images[idx];
                }
            }
            Tensor loss = gradcore::cross_entropy_mean(
                detail::batch_logits(backbone, st, images, tr), labels);
            if (!std::isfinite(loss.item()))
                throw EngineError("train_session: non-finite loss at step " +
                                  std::to_string(step) + " of session " + std::to_string(s));
            summary.final_loss = loss.item();
            gradcore::backward(loss);
            opt.step(sched.at(step));
            ++step;
        }
    }
    summary.steps = step;

    // training accuracy on the unaugmented set, with the trained parameters
    {
        std::int64_t hits = 0;
        for (std::int64_t at = 0; at < n; at += 256) {
            const std::int64_t bs = std::min<std::int64_t>(256, n - at);
            std::vector<const data::Image*> images(bs);
            for (std::int64_t i = 0; i < bs; ++i) images[i] = &train_set.images[at + i];
            Tensor logits = detail::batch_logits(backbone, st, images, tr);
            const int c = st.n_classes;
            for (std::int64_t i = 0; i < bs; ++i) {
                int best = 0;
                for (int j = 1; j < c; ++j)
                    if (logits.values()[i * c + j] > logits.values()[i * c + best]) best = j;
                if (best == train_set.labels[at + i]) ++hits;
            }
        }
        summary.train_accuracy = static_cast<double>(hits) / n;
    }

    commit_session(st, tr);

    // cluster the domain's prompt-free features for the router
    std::vector<const data::Image*> all(n);
    for (std::int64_t i = 0; i < n; ++i) all[i] = &train_set.images[i];
    auto feats = prompt_free_features(backbone, all);
    auto km = router::kmeans_fit(feats, mc.kmeans_k,
                                 derive_seed(run_seed, "kmeans", s));
    st.centroids.append(s, km.centroids);

    st.sessions += 1;
    return summary;
}

// ---- inference ----

struct Prediction {
    std::vector<float> probs;
    int domain = 0;
};

struct PredictContext {
    PredictMode mode = PredictMode::dil;
    int til_domain = 0;      // TIL only
    std::uint64_t run_seed = 0;
    std::uint64_t tag_a = 0; // stable labels identifying the evaluation slot,
    std::uint64_t tag_b = 0; // so the random mode replays across runs
};

namespace detail {

// Class probabilities for every image under one fixed domain's parameters.
inline std::vector<std::vector<float>> domain_probs(
    const encoder::Backbone& backbone, const SessionState& st,
    const std::vector<const data::Image*>& images, int domain) {
    const MethodConfig& mc = st.config;
    const int d = st.feat_dim;
    Tensor prompt = Tensor::leaf({mc.prompt_len, d},
                                 st.image_prompts.entries.at(image_entry(mc, domain)));
    std::vector<std::vector<float>> g_rows;
    Classifier const* cls = nullptr;
    if (mc.variant == Variant::language_image) {
        Tensor lang = Tensor::leaf({mc.lang_prompt_len, st.lang_dim},
                                   st.lang_prompts.entries.at(lang_entry(mc, domain)));
        Tensor g = backbone.encode_text_all(lang);
        for (int j = 0; j < st.n_classes; ++j)
            g_rows.emplace_back(g.values().begin() + j * st.lang_dim,
                                g.values().begin() + (j + 1) * st.lang_dim);
    } else {
        cls = &st.classifiers.entries.at(classifier_entry(mc, domain));
    }

    std::vector<std::vector<float>> out;
    out.reserve(images.size());
    for (std::size_t at = 0; at < images.size(); at += 256) {
        const std::size_t bs = std::min<std::size_t>(256, images.size() - at);
        std::vector<const data::Image*> chunk(images.begin() + at, images.begin() + at + bs);
        Tensor f = backbone.encode_image_batch(chunk, prompt);
        if (mc.variant == Variant::language_image) {
            Tensor joint = backbone.image_joint(f);
            const int dl = st.lang_dim;
            for (std::size_t i = 0; i < bs; ++i) {
                std::vector<float> row(joint.values().begin() + i * dl,
                                       joint.values().begin() + (i + 1) * dl);
                out.push_back(clip_logits(row, g_rows, mc.temperature));
            }
        } else {
            for (std::size_t i = 0; i < bs; ++i) {
                std::vector<float> row(f.values().begin() + i * d,
                                       f.values().begin() + (i + 1) * d);
                out.push_back(fc_logits(row, cls->w, cls->b));
            }
        }
    }
    return out;
}

inline int argmax(const std::vector<float>& v) {
    int best = 0;
    for (std::size_t j = 1; j < v.size(); ++j)
        if (v[j] > v[best]) best = static_cast<int>(j);
    return best;
}

} // namespace detail

// Vote of every learned domain's classifier: majority class wins; tied
// classes resolve to the one whose voters are more confident (higher mean
// winning-class probability), then to the one voted by the lowest-index
// domain. The reported domain is the winning class's lowest-index voter.
inline Prediction vote_from_probs(const std::vector<std::vector<float>>& per_domain) {
    if (per_domain.empty()) throw EngineError("vote: no domains");
    const std::size_t c = per_domain[0].size();
    std::vector<int> votes(per_domain.size());
    std::vector<int> count(c, 0);
    for (std::size_t s = 0; s < per_domain.size(); ++s) {
        votes[s] = detail::argmax(per_domain[s]);
        ++count[votes[s]];
    }
    int best_count = 0;
    for (int v : count) best_count = std::max(best_count, v);
    int winner = -1;
    double winner_mean = -1.0;
    int winner_first_voter = -1;
    for (std::size_t cls = 0; cls < c; ++cls) {
        if (count[cls] != best_count) continue;
        double mean = 0.0;
        int first = -1;
        for (std::size_t s = 0; s < votes.size(); ++s)
            if (votes[s] == static_cast<int>(cls)) {
                mean += per_domain[s][cls];
                if (first < 0) first = static_cast<int>(s);
            }
        mean /= best_count;
        const bool better =
            winner < 0 || mean > winner_mean ||
            (mean == winner_mean && first < winner_first_voter);
        if (better) {
            winner = static_cast<int>(cls);
            winner_mean = mean;
            winner_first_voter = first;
        }
    }
    Prediction p;
    p.domain = winner_first_voter;
    p.probs = per_domain[winner_first_voter];
    return p;
}

// Batched prediction; bitwise identical to calling predict per sample because
// every kernel processes rows independently. Sample i's random-mode draw is
// derive_seed(run_seed, "random-domain", tag_a, tag_b, i).
inline std::vector<Prediction> predict_batch(const encoder::Backbone& backbone,
                                             const SessionState& st,
                                             const std::vector<const data::Image*>& images,
                                             const PredictContext& ctx) {
    if (st.sessions == 0) throw EngineError("predict: no completed sessions");
    if (images.empty()) return {};
    const int s_count = st.sessions;

    if (ctx.mode == PredictMode::vote) {
        std::vector<std::vector<std::vector<float>>> per_domain(s_count);
        for (int d = 0; d < s_count; ++d)
            per_domain[d] = detail::domain_probs(backbone, st, images, d);
        std::vector<Prediction> out(images.size());
        for (std::size_t i = 0; i < images.size(); ++i) {
            std::vector<std::vector<float>> rows(s_count);
            for (int d = 0; d < s_count; ++d) rows[d] = std::move(per_domain[d][i]);
            out[i] = vote_from_probs(rows);
        }
        return out;
    }

    std::vector<int> chosen(images.size());
    switch (ctx.mode) {
        case PredictMode::dil: {
            auto feats = prompt_free_features(backbone, images);
            for (std::size_t i = 0; i < images.size(); ++i)
                chosen[i] = static_cast<int>(router::identify_domain(
                    feats[i], st.centroids, st.config.knn_k));
            break;
        }
        case PredictMode::til:
            if (ctx.til_domain < 0 || ctx.til_domain >= s_count)
                throw EngineError("predict: unknown domain " +
                                  std::to_string(ctx.til_domain) + " (have " +
                                  std::to_string(s_count) + " sessions)");
            std::fill(chosen.begin(), chosen.end(), ctx.til_domain);
            break;
        case PredictMode::zero_shot:
            std::fill(chosen.begin(), chosen.end(), 0);
            break;
        case PredictMode::random_domain:
            for (std::size_t i = 0; i < images.size(); ++i)
                chosen[i] = static_cast<int>(
                    derive_seed(ctx.run_seed, "random-domain", ctx.tag_a, ctx.tag_b, i) %
                    static_cast<std::uint64_t>(s_count));
            break;
        case PredictMode::vote:
            break; // handled above
    }

    // group by chosen domain; row independence keeps outputs bitwise stable
    std::vector<Prediction> out(images.size());
    for (int d = 0; d < s_count; ++d) {
        std::vector<std::size_t> idx;
        std::vector<const data::Image*> group;
        for (std::size_t i = 0; i < images.size(); ++i)
            if (chosen[i] == d) {
                idx.push_back(i);
                group.push_back(images[i]);
            }
        if (idx.empty()) continue;
        auto probs = detail::domain_probs(backbone, st, group, d);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            out[idx[k]].probs = std::move(probs[k]);
            out[idx[k]].domain = d;
        }
    }
    return out;
}

inline Prediction predict(const encoder::Backbone& backbone, const SessionState& st,
                          const data::Image& image, const PredictContext& ctx) {
    return predict_batch(backbone, st, {&image}, ctx)[0];
}

// ---- parameter accounting ----

// Serialized float growth contributed by one completed session (0-based):
// prompt rows, classifier rows where the variant has them, and the routing
// centroids. Shared/frozen modes stop growing their part after session 0.
inline std::int64_t session_param_growth(const MethodConfig& mc,
                                         const encoder::EncoderConfig& ec, int session) {
    std::int64_t g = static_cast<std::int64_t>(mc.kmeans_k) * ec.embed_dim;
    const bool first = session == 0;
    if (first || mc.ablation != Ablation::shared_prompts_dependent)
        g += static_cast<std::int64_t>(mc.prompt_len) * ec.embed_dim;
    if (mc.variant == Variant::language_image) {
        const bool lang_grows = first ||
                                (mc.ablation != Ablation::shared_prompts_dependent &&
                                 mc.ablation != Ablation::frozen_language_prompts);
        if (lang_grows) g += static_cast<std::int64_t>(mc.lang_prompt_len) * ec.text_embed_dim;
    } else {
        if (first || mc.classifier_mode == ClassifierMode::independent)
            g += static_cast<std::int64_t>(ec.num_classes()) * (ec.embed_dim + 1);
    }
    return g;
}

// Total floats a state serializes to; the checkpoint payload has exactly this
// many, so consecutive-session differences mirror session_param_growth.
inline std::int64_t state_float_count(const SessionState& st) {
    std::int64_t n = 0;
    for (const auto& e : st.image_prompts.entries) n += static_cast<std::int64_t>(e.size());
    for (const auto& e : st.lang_prompts.entries) n += static_cast<std::int64_t>(e.size());
    for (const auto& c : st.classifiers.entries)
        n += static_cast<std::int64_t>(c.w.size() + c.b.size());
    for (const auto& r : st.centroids.rows) n += static_cast<std::int64_t>(r.size());
    return n;
}

} // namespace sprompts::engine
