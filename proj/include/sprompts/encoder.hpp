#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sprompts/data.hpp"
#include "sprompts/ops.hpp"
#include "sprompts/optim.hpp"
#include "sprompts/rng.hpp"
#include "sprompts/tensor.hpp"

namespace sprompts::encoder {

using gradcore::Shape;
using gradcore::Tensor;

struct EncoderError : std::runtime_error {
    explicit EncoderError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a training gate (e.g. the pretrain accuracy threshold) fails.
struct GateError : std::runtime_error {
    explicit GateError(const std::string& msg) : std::runtime_error(msg) {}
};

struct EncoderConfig {
    int image_size = 32;
    int patch_size = 8;
    int embed_dim = 64; // D_i
    int num_layers = 4;
    int num_heads = 4;
    float mlp_ratio = 4.0f;
    int text_embed_dim = 48; // D_l
    int text_layers = 2;
    int text_heads = 4;
    std::vector<std::string> vocab{"disk", "square", "triangle", "cross"};

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw EncoderError("EncoderConfig: image_size must be a positive multiple of patch_size");
        if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
            throw EncoderError("EncoderConfig: embed_dim must be divisible by num_heads");
        if (text_embed_dim <= 0 || text_heads <= 0 || text_embed_dim % text_heads != 0)
            throw EncoderError("EncoderConfig: text_embed_dim must be divisible by text_heads");
        if (num_layers <= 0 || text_layers < 0)
            throw EncoderError("EncoderConfig: num_layers must be positive, text_layers non-negative");
        if (vocab.empty()) throw EncoderError("EncoderConfig: empty vocab");
    }

    int n_patches() const {
        const int side = image_size / patch_size;
        return side * side;
    }
    int patch_dim() const { return patch_size * patch_size * 3; }
    int num_classes() const { return static_cast<int>(vocab.size()); }
};

struct PretrainConfig {
    int samples = 10000;
    double holdout_fraction = 0.1;
    int epochs = 30;
    int batch = 128;
    float lr = 0.02f;
    float momentum = 0.9f;
    double warmup_fraction = 0.1; // cold momentum starts collapse the trunk
    double threshold = 0.90;
    float clip_scale = 10.0f; // cosine logit scale used only for pretraining
    // Trainable placeholder rows attached during pretraining, then discarded.
    // Deployment attaches prompt rows of these lengths, and attention mass at
    // the readout positions depends on sequence length, so pretraining must
    // see the same token geometry or the learned alignment breaks.
    int image_context_rows = 0;
    int text_context_rows = 0;
    std::uint64_t seed = 7;
};

struct PretrainStats {
    int epochs_run = 0;
    double fc_accuracy = 0.0;
    double clip_accuracy = 0.0;
    bool reached_gate = false;
};

namespace detail {

struct BlockWeights {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
};

inline Tensor run_block(const BlockWeights& blk, const Tensor& x, std::int64_t batch,
                        std::int64_t tokens, std::int64_t heads) {
    using namespace gradcore;
    const std::int64_t d = x.dim(1);
    const std::int64_t dh = d / heads;
    Tensor h = layer_norm(x, blk.ln1_g, blk.ln1_b);
    Tensor q = split_heads(linear(h, blk.wq, blk.bq), batch, tokens, heads);
    Tensor k = split_heads(linear(h, blk.wk, blk.bk), batch, tokens, heads);
    Tensor v = split_heads(linear(h, blk.wv, blk.bv), batch, tokens, heads);
    Tensor scores = scale(bmm_nt(q, k), 1.0f / std::sqrt(static_cast<float>(dh)));
    Tensor ctx = merge_heads(bmm(softmax_lastdim(scores), v), batch, tokens, heads);
    Tensor attn = add(x, linear(ctx, blk.wo, blk.bo));
    Tensor h2 = layer_norm(attn, blk.ln2_g, blk.ln2_b);
    Tensor m = linear(gelu(linear(h2, blk.w1, blk.b1)), blk.w2, blk.b2);
    return add(attn, m);
}

} // namespace detail

// Image encoder f plus toy text encoder g, pretrained in-repo and then
// frozen. After freeze() no weight ever requires grad again; forward passes
// record graph only through externally supplied trainables (prompts,
// session classifiers).
class Backbone {
public:
    Backbone(EncoderConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(init_seed, "backbone-init"));
        auto w = [&](Shape shape, const std::string& name) {
            Tensor t = Tensor::randn(shape, rng, 0.02f, true, name);
            params_.emplace_back(name, t);
            return t;
        };
        // Xavier scaling for the trunk's linear maps; fixed small std would
        // attenuate the residual pathways and stall pretraining.
        auto xavier = [&](Shape shape, const std::string& name) {
            const float std =
                std::sqrt(2.0f / static_cast<float>(shape.at(0) + shape.at(1)));
            Tensor t = Tensor::randn(shape, rng, std, true, name);
            params_.emplace_back(name, t);
            return t;
        };
        auto zeros = [&](Shape shape, const std::string& name) {
            Tensor t = Tensor::zeros(shape, true, name);
            params_.emplace_back(name, t);
            return t;
        };
        auto ones = [&](Shape shape, const std::string& name) {
            Tensor t = Tensor::full(shape, 1.0f, true, name);
            params_.emplace_back(name, t);
            return t;
        };
        const std::int64_t d = cfg_.embed_dim, dl = cfg_.text_embed_dim;
        const std::int64_t pd = cfg_.patch_dim(), np = cfg_.n_patches();
        patch_w_ = xavier({pd, d}, "patch.w");
        patch_b_ = zeros({d}, "patch.b");
        pos_emb_ = w({np, d}, "pos_emb");
        cls_token_ = w({1, d}, "cls_token");
        auto make_blocks = [&](int count, std::int64_t dim, const std::string& prefix,
                               std::vector<detail::BlockWeights>& out) {
            const std::int64_t hidden =
                static_cast<std::int64_t>(std::lround(dim * cfg_.mlp_ratio));
            for (int i = 0; i < count; ++i) {
                const std::string p = prefix + std::to_string(i) + ".";
                detail::BlockWeights blk;
                blk.ln1_g = ones({dim}, p + "ln1.g");
                blk.ln1_b = zeros({dim}, p + "ln1.b");
                blk.wq = xavier({dim, dim}, p + "wq");
                blk.bq = zeros({dim}, p + "bq");
                blk.wk = xavier({dim, dim}, p + "wk");
                blk.bk = zeros({dim}, p + "bk");
                blk.wv = xavier({dim, dim}, p + "wv");
                blk.bv = zeros({dim}, p + "bv");
                blk.wo = xavier({dim, dim}, p + "wo");
                blk.bo = zeros({dim}, p + "bo");
                blk.ln2_g = ones({dim}, p + "ln2.g");
                blk.ln2_b = zeros({dim}, p + "ln2.b");
                blk.w1 = xavier({dim, hidden}, p + "w1");
                blk.b1 = zeros({hidden}, p + "b1");
                blk.w2 = xavier({hidden, dim}, p + "w2");
                blk.b2 = zeros({dim}, p + "b2");
                out.push_back(blk);
            }
        };
        make_blocks(cfg_.num_layers, d, "img.", blocks_);
        final_ln_g_ = ones({d}, "final_ln.g");
        final_ln_b_ = zeros({d}, "final_ln.b");
        img_proj_ = xavier({d, dl}, "img_proj");
        make_blocks(cfg_.text_layers, dl, "txt.", text_blocks_);
        text_proj_ = xavier({dl, dl}, "text_proj");
        class_emb_ = w({cfg_.num_classes(), dl}, "class_emb");
    }

    const EncoderConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }

    // Patch tokens with positional embeddings for a batch: [B * n_patches, D_i].
    Tensor patch_embed_batch(const std::vector<const data::Image*>& images) const {
        using namespace gradcore;
        const std::int64_t b = static_cast<std::int64_t>(images.size());
        const std::int64_t np = cfg_.n_patches(), pd = cfg_.patch_dim();
        const int side = cfg_.image_size / cfg_.patch_size, ps = cfg_.patch_size;
        std::vector<float> rows(static_cast<std::size_t>(b * np * pd));
        for (std::int64_t i = 0; i < b; ++i) {
            const data::Image& img = *images[i];
            if (img.height != cfg_.image_size || img.width != cfg_.image_size ||
                img.channels != 3)
                throw EncoderError("patch_embed: image " + std::to_string(img.height) +
                                   "x" + std::to_string(img.width) + " does not match config " +
                                   std::to_string(cfg_.image_size));
            float* dst = rows.data() + i * np * pd;
            for (int py = 0; py < side; ++py)
                for (int px = 0; px < side; ++px) {
                    float* patch = dst + (py * side + px) * pd;
                    for (int y = 0; y < ps; ++y)
                        for (int x = 0; x < ps; ++x)
                            for (int c = 0; c < 3; ++c)
                                *patch++ = img.at(py * ps + y, px * ps + x, c);
                }
        }
        Tensor flat = Tensor::leaf({b * np, pd}, std::move(rows));
        Tensor tokens = linear(flat, patch_w_, patch_b_);
        return add_tiled_rows(tokens, pos_emb_, b);
    }

    // Single-image variant of the patch embedding: [n_patches, D_i].
    Tensor patch_embed(const data::Image& img) const { return patch_embed_batch({&img}); }

    // Runs the image trunk over pre-embedded tokens. Sequence per sample is
    // [x_img, prompt, cls] (prompt omitted when undefined or empty); the
    // returned feature is the normalized cls-position output, [B, D_i].
    Tensor encode_tokens_batch(const Tensor& tokens, const Tensor& prompt,
                               std::int64_t batch) const {
        using namespace gradcore;
        const std::int64_t np = cfg_.n_patches();
        std::int64_t lp = 0;
        std::vector<TokenPart> parts{{tokens, false}};
        if (prompt.defined() && prompt.dim(0) > 0) {
            if (prompt.shape().size() != 2 || prompt.dim(1) != cfg_.embed_dim)
                throw EncoderError("encode_image: prompt width " +
                                   (prompt.shape().size() == 2
                                        ? std::to_string(prompt.dim(1))
                                        : std::string("(rank != 2)")) +
                                   " does not match embed_dim " +
                                   std::to_string(cfg_.embed_dim));
            lp = prompt.dim(0);
            parts.push_back({prompt, true});
        }
        parts.push_back({cls_token_, true});
        Tensor x = concat_token_batch(parts, batch);
        const std::int64_t t = np + lp + 1;
        for (const auto& blk : blocks_) x = detail::run_block(blk, x, batch, t, cfg_.num_heads);
        std::vector<std::int64_t> cls_idx(batch);
        for (std::int64_t i = 0; i < batch; ++i) cls_idx[i] = i * t + (t - 1);
        return layer_norm(take_rows(x, cls_idx), final_ln_g_, final_ln_b_);
    }

    Tensor encode_image_batch(const std::vector<const data::Image*>& images,
                              const Tensor& prompt) const {
        return encode_tokens_batch(patch_embed_batch(images), prompt,
                                   static_cast<std::int64_t>(images.size()));
    }

    // Spec-shaped single-sequence entry point: tokens from patch_embed.
    Tensor encode_image(const Tensor& x_img, const Tensor& prompt) const {
        return encode_tokens_batch(x_img, prompt, 1);
    }

    // Projection of image features into the joint similarity space, [B, D_l].
    Tensor image_joint(const Tensor& f_vit) const {
        return gradcore::matmul(f_vit, img_proj_);
    }

    // Text features g for every class under one context prompt: [C, D_l].
    // Sequence per class is the L_l context vectors followed by c_j; the
    // output is the projected c_j-position representation.
    Tensor encode_text_all(const Tensor& lang_prompt) const {
        using namespace gradcore;
        const std::int64_t c = cfg_.num_classes();
        std::int64_t lp = 0;
        std::vector<TokenPart> parts;
        if (lang_prompt.defined() && lang_prompt.dim(0) > 0) {
            if (lang_prompt.shape().size() != 2 || lang_prompt.dim(1) != cfg_.text_embed_dim)
                throw EncoderError("encode_text: prompt width does not match text_embed_dim " +
                                   std::to_string(cfg_.text_embed_dim));
            lp = lang_prompt.dim(0);
            parts.push_back({lang_prompt, true});
        }
        parts.push_back({class_emb_, false}); // one row per class
        Tensor x = concat_token_batch(parts, c);
        const std::int64_t t = lp + 1;
        for (const auto& blk : text_blocks_)
            x = detail::run_block(blk, x, c, t, cfg_.text_heads);
        std::vector<std::int64_t> last(c);
        for (std::int64_t i = 0; i < c; ++i) last[i] = i * t + (t - 1);
        return matmul(take_rows(x, last), text_proj_);
    }

    // Text feature for a single class index, [1, D_l].
    Tensor encode_text(const Tensor& lang_prompt, int class_index) const {
        if (class_index < 0 || class_index >= cfg_.num_classes())
            throw EncoderError("encode_text: unknown class index " +
                               std::to_string(class_index));
        return gradcore::take_rows(encode_text_all(lang_prompt), {class_index});
    }

    void freeze() {
        for (auto& [name, t] : params_) t.set_requires_grad(false);
        frozen_ = true;
        fingerprint_ = compute_fingerprint();
    }

    std::uint64_t fingerprint() const { return frozen_ ? fingerprint_ : compute_fingerprint(); }

    std::uint64_t compute_fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](const void* p, std::size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 0x100000001b3ULL;
            }
        };
        for (const auto& [name, t] : params_) {
            mix(name.data(), name.size());
            mix(t.values().data(), t.values().size() * sizeof(float));
        }
        return h;
    }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    const std::vector<std::pair<std::string, Tensor>>& named_params() const {
        return params_;
    }

    void load_values(const std::string& name, const std::vector<float>& values) {
        for (auto& [n, t] : params_)
            if (n == name) {
                if (t.values().size() != values.size())
                    throw EncoderError("load_values: size mismatch for '" + name + "'");
                t.values_mut() = values;
                return;
            }
        throw EncoderError("load_values: unknown parameter '" + name + "'");
    }

    // Joint pretraining of the classification head path (used by the
    // image-only variant) and the cosine-alignment path (used by the
    // language-image variant). Stops at the first epoch whose held-out
    // accuracy clears the threshold on both paths, then the caller freezes.
    PretrainStats pretrain(const data::PretrainCorpus& corpus, const PretrainConfig& pc) {
        using namespace gradcore;
        if (frozen_) throw EncoderError("pretrain: backbone already frozen");
        if (corpus.train.size() == 0 || corpus.holdout.size() == 0)
            throw EncoderError("pretrain: empty corpus");
        if (pc.image_context_rows < 0 || pc.text_context_rows < 0)
            throw EncoderError("pretrain: context rows must be non-negative");
        Rng head_rng(derive_seed(pc.seed, "pretrain-head"));
        Tensor head_w = Tensor::randn({cfg_.embed_dim, cfg_.num_classes()}, head_rng,
                                      0.02f, true, "pretrain.head.w");
        Tensor head_b = Tensor::zeros({cfg_.num_classes()}, true, "pretrain.head.b");
        Rng ctx_rng(derive_seed(pc.seed, "pretrain-context"));
        Tensor img_ctx, txt_ctx;
        if (pc.image_context_rows > 0)
            img_ctx = Tensor::randn({pc.image_context_rows, cfg_.embed_dim}, ctx_rng,
                                    0.02f, true, "pretrain.img_ctx");
        if (pc.text_context_rows > 0)
            txt_ctx = Tensor::randn({pc.text_context_rows, cfg_.text_embed_dim}, ctx_rng,
                                    0.02f, true, "pretrain.txt_ctx");

        SgdMomentum opt(pc.momentum);
        for (auto& [name, t] : params_) opt.add_param(t);
        opt.add_param(head_w);
        opt.add_param(head_b);
        if (img_ctx.defined()) opt.add_param(img_ctx);
        if (txt_ctx.defined()) opt.add_param(txt_ctx);

        const std::int64_t n = static_cast<std::int64_t>(corpus.train.size());
        const std::int64_t steps_per_epoch = (n + pc.batch - 1) / pc.batch;
        const std::int64_t total_steps = std::max<std::int64_t>(1, steps_per_epoch * pc.epochs);
        CosineLr sched(pc.lr, total_steps);
        const std::int64_t warm_steps = std::max<std::int64_t>(
            1, static_cast<std::int64_t>(total_steps * pc.warmup_fraction));

        PretrainStats stats;
        std::int64_t step = 0;
        for (int epoch = 0; epoch < pc.epochs; ++epoch) {
            std::vector<std::int64_t> order(n);
            for (std::int64_t i = 0; i < n; ++i) order[i] = i;
            Rng shuffle_rng(derive_seed(pc.seed, "pretrain-shuffle", epoch));
            for (std::int64_t i = n - 1; i > 0; --i)
                std::swap(order[i], order[shuffle_rng.next_below(i + 1)]);

            for (std::int64_t at = 0; at < n; at += pc.batch) {
                const std::int64_t bs = std::min<std::int64_t>(pc.batch, n - at);
                std::vector<const data::Image*> images(bs);
                std::vector<std::int64_t> labels(bs);
                for (std::int64_t i = 0; i < bs; ++i) {
                    images[i] = &corpus.train.images[order[at + i]];
                    labels[i] = corpus.train.labels[order[at + i]];
                }
                Tensor f = encode_image_batch(images, img_ctx);
                Tensor fc_loss = cross_entropy_mean(linear(f, head_w, head_b), labels);
                Tensor g = encode_text_all(txt_ctx);
                Tensor sim = scale(cosine_rows(image_joint(f), g), pc.clip_scale);
                Tensor loss = add(fc_loss, cross_entropy_mean(sim, labels));
                if (!std::isfinite(loss.item()))
                    throw EncoderError("pretrain: non-finite loss at step " +
                                       std::to_string(step));
                backward(loss);
                const float warm_mul =
                    step < warm_steps
                        ? static_cast<float>(step + 1) / static_cast<float>(warm_steps)
                        : 1.0f;
                opt.step(sched.at(step) * warm_mul);
                ++step;
            }
            stats.epochs_run = epoch + 1;
            auto [fc_acc, clip_acc] =
                evaluate_pretrain(corpus.holdout, head_w, head_b, img_ctx, txt_ctx);
            stats.fc_accuracy = fc_acc;
            stats.clip_accuracy = clip_acc;
            if (fc_acc >= pc.threshold && clip_acc >= pc.threshold) {
                stats.reached_gate = true;
                break;
            }
        }
        if (!stats.reached_gate) {
            if (pc.epochs > 0) {
                auto [fc_acc, clip_acc] =
                    evaluate_pretrain(corpus.holdout, head_w, head_b, img_ctx, txt_ctx);
                stats.fc_accuracy = fc_acc;
                stats.clip_accuracy = clip_acc;
            }
            throw GateError("pretrain gate not reached after " +
                            std::to_string(stats.epochs_run) + " epochs: fc_accuracy=" +
                            std::to_string(stats.fc_accuracy) + " clip_accuracy=" +
                            std::to_string(stats.clip_accuracy) + " threshold=" +
                            std::to_string(pc.threshold));
        }
        return stats;
    }

private:
    std::pair<double, double> evaluate_pretrain(const data::LabeledDataset& holdout,
                                                const Tensor& head_w, const Tensor& head_b,
                                                const Tensor& img_ctx,
                                                const Tensor& txt_ctx) const {
        using namespace gradcore;
        const std::int64_t n = static_cast<std::int64_t>(holdout.size());
        std::int64_t fc_hits = 0, clip_hits = 0;
        for (std::int64_t at = 0; at < n; at += 256) {
            const std::int64_t bs = std::min<std::int64_t>(256, n - at);
            std::vector<const data::Image*> images(bs);
            for (std::int64_t i = 0; i < bs; ++i) images[i] = &holdout.images[at + i];
            Tensor f = encode_image_batch(images, img_ctx);
            Tensor fc = linear(f, head_w, head_b);
            Tensor sim = cosine_rows(image_joint(f), encode_text_all(txt_ctx));
            const std::int64_t c = cfg_.num_classes();
            for (std::int64_t i = 0; i < bs; ++i) {
                auto argmax = [c, i](const Tensor& t) {
                    std::int64_t best = 0;
                    for (std::int64_t j = 1; j < c; ++j)
                        if (t.values()[i * c + j] > t.values()[i * c + best]) best = j;
                    return best;
                };
                if (argmax(fc) == holdout.labels[at + i]) ++fc_hits;
                if (argmax(sim) == holdout.labels[at + i]) ++clip_hits;
            }
        }
        return {static_cast<double>(fc_hits) / n, static_cast<double>(clip_hits) / n};
    }

    EncoderConfig cfg_;
    Tensor patch_w_, patch_b_, pos_emb_, cls_token_;
    std::vector<detail::BlockWeights> blocks_;
    Tensor final_ln_g_, final_ln_b_, img_proj_;
    std::vector<detail::BlockWeights> text_blocks_;
    Tensor text_proj_, class_emb_;
    std::vector<std::pair<std::string, Tensor>> params_;
    bool frozen_ = false;
    std::uint64_t fingerprint_ = 0;
};

} // namespace sprompts::encoder
