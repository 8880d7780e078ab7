#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "sprompts/png_io.hpp"
#include "sprompts/rng.hpp"

namespace sprompts::data {

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct LabeledDataset {
    std::vector<Image> images;
    std::vector<std::int64_t> labels;
    std::string split; // "train" or "test"

    std::size_t size() const { return images.size(); }
};

struct StreamSpec {
    int image_size = 32;
    std::vector<std::string> classes{"disk", "square", "triangle", "cross"};
    std::vector<std::string> domains{"identity", "rotate_hue", "noise", "texture"};
    std::vector<std::string> ood{"invert", "flip_swap", "stripes"};
    int train_per_class = 50;
    int test_per_class = 25;
    std::uint64_t seed = 0;
};

struct DomainSet {
    std::string name;
    LabeledDataset train;
    LabeledDataset test;
};

struct Stream {
    std::vector<DomainSet> domains;
    std::vector<DomainSet> ood; // test split only
};

namespace detail {

// Coverage mask in [0,1] for one jittered class instance on a square canvas.
struct ShapeParams {
    float cx, cy, r;
};

inline ShapeParams sample_shape(Rng& rng, int size) {
    const float s = static_cast<float>(size) / 32.0f;
    ShapeParams p;
    p.cx = size / 2.0f + static_cast<float>(rng.uniform(-3.0, 3.0)) * s;
    p.cy = size / 2.0f + static_cast<float>(rng.uniform(-3.0, 3.0)) * s;
    p.r = static_cast<float>(rng.uniform(8.0, 11.0)) * s;
    return p;
}

inline float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

inline std::vector<float> render_mask(const std::string& cls, const ShapeParams& p,
                                      int size) {
    std::vector<float> mask(static_cast<std::size_t>(size) * size, 0.0f);
    auto edge_dist = [](float x1, float y1, float x2, float y2, float qx, float qy) {
        const float ex = x2 - x1, ey = y2 - y1;
        const float len = std::sqrt(ex * ex + ey * ey);
        return (ex * (qy - y1) - ey * (qx - x1)) / len;
    };
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const float qx = x + 0.5f, qy = y + 0.5f;
            const float dx = qx - p.cx, dy = qy - p.cy;
            float cov = 0.0f;
            if (cls == "disk") {
                cov = clamp01(p.r - std::sqrt(dx * dx + dy * dy) + 0.5f);
            } else if (cls == "square") {
                const float a = p.r * 0.82f;
                cov = clamp01(a - std::max(std::abs(dx), std::abs(dy)) + 0.5f);
            } else if (cls == "triangle") {
                const float ax = p.cx, ay = p.cy - p.r;
                const float bx = p.cx - 0.9f * p.r, by = p.cy + 0.75f * p.r;
                const float ccx = p.cx + 0.9f * p.r, ccy = p.cy + 0.75f * p.r;
                const float d1 = edge_dist(ax, ay, ccx, ccy, qx, qy);
                const float d2 = edge_dist(ccx, ccy, bx, by, qx, qy);
                const float d3 = edge_dist(bx, by, ax, ay, qx, qy);
                cov = clamp01(std::min({d1, d2, d3}) + 0.5f);
            } else if (cls == "cross") {
                const float bar = 0.35f * p.r;
                const float h = clamp01(bar - std::abs(dy) + 0.5f) *
                                clamp01(p.r - std::abs(dx) + 0.5f);
                const float v = clamp01(bar - std::abs(dx) + 0.5f) *
                                clamp01(p.r - std::abs(dy) + 0.5f);
                cov = std::max(h, v);
            } else {
                throw DataError("render_mask: unknown class generator '" + cls + "'");
            }
            mask[y * size + x] = cov;
        }
    return mask;
}

inline std::vector<float> rotate90(const std::vector<float>& m, int size) {
    std::vector<float> out(m.size());
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) out[x * size + (size - 1 - y)] = m[y * size + x];
    return out;
}

inline std::vector<float> hflip(const std::vector<float>& m, int size) {
    std::vector<float> out(m.size());
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) out[y * size + (size - 1 - x)] = m[y * size + x];
    return out;
}

inline Image gray_to_rgb(const std::vector<float>& g, int size, float tr = 1.0f,
                         float tg = 1.0f, float tb = 1.0f) {
    Image img = Image::blank(size, size);
    for (int i = 0; i < size * size; ++i) {
        img.pixels[i * 3 + 0] = clamp01(g[i] * tr);
        img.pixels[i * 3 + 1] = clamp01(g[i] * tg);
        img.pixels[i * 3 + 2] = clamp01(g[i] * tb);
    }
    return img;
}

inline std::vector<float> compose(const std::vector<float>& mask, float fg, float bg) {
    std::vector<float> g(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) g[i] = bg + mask[i] * (fg - bg);
    return g;
}

// Registry of domain-shift transforms. Each renders a jittered class mask
// into an RGB image; the transform itself is the domain identity.
inline Image apply_transform(const std::string& name, const std::string& cls,
                             Rng& rng, int size) {
    const ShapeParams p = sample_shape(rng, size);
    std::vector<float> mask = render_mask(cls, p, size);
    const float fg = 0.85f + static_cast<float>(rng.uniform(0.0, 0.1));
    const float bg = 0.06f + static_cast<float>(rng.uniform(0.0, 0.04));
    if (name == "identity") {
        return gray_to_rgb(compose(mask, fg, bg), size);
    }
    if (name == "rotate_hue") {
        return gray_to_rgb(compose(rotate90(mask, size), fg, bg), size, 1.0f, 0.35f, 0.2f);
    }
    if (name == "noise") {
        // Heavy pixel noise: the shift must be large enough that prompt-free
        // features separate this domain from identity.
        std::vector<float> g = compose(mask, fg, bg);
        for (auto& v : g) v = clamp01(v + rng.normal(0.0f, 0.5f));
        return gray_to_rgb(g, size);
    }
    if (name == "texture") {
        const int phase = static_cast<int>(rng.next_below(4));
        std::vector<float> g(mask.size());
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const float tex =
                    (((x + phase) / 4 + (y + phase) / 4) % 2 == 0) ? 0.55f : 0.2f;
                const float cov = mask[y * size + x];
                g[y * size + x] = tex + cov * (fg - tex);
            }
        return gray_to_rgb(g, size);
    }
    if (name == "invert") {
        std::vector<float> g = compose(mask, fg, bg);
        for (auto& v : g) v = 1.0f - v;
        return gray_to_rgb(g, size);
    }
    if (name == "flip_swap") {
        return gray_to_rgb(compose(hflip(mask, size), fg, bg), size, 0.2f, 0.35f, 1.0f);
    }
    if (name == "stripes") {
        std::vector<float> g = compose(mask, fg, bg);
        for (int y = 0; y < size; ++y)
            if (y % 4 >= 2)
                for (int x = 0; x < size; ++x) g[y * size + x] *= 0.45f;
        return gray_to_rgb(g, size);
    }
    if (name == "brightness_blur") {
        // Pretrain-only family: brightness jitter plus box blur, disjoint
        // from every stream transform above.
        std::vector<float> g = compose(mask, fg, bg);
        const float gain = 0.7f + static_cast<float>(rng.uniform(0.0, 0.6));
        const float alpha = 0.3f + static_cast<float>(rng.uniform(0.0, 0.7));
        std::vector<float> blur(g.size());
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                float acc = 0.0f;
                int cnt = 0;
                for (int yy = std::max(0, y - 1); yy <= std::min(size - 1, y + 1); ++yy)
                    for (int xx = std::max(0, x - 1); xx <= std::min(size - 1, x + 1); ++xx) {
                        acc += g[yy * size + xx];
                        ++cnt;
                    }
                blur[y * size + x] = acc / cnt;
            }
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = clamp01((g[i] * (1 - alpha) + blur[i] * alpha) * gain);
        return gray_to_rgb(g, size);
    }
    throw DataError("apply_transform: unknown transform '" + name + "'");
}

} // namespace detail

inline LabeledDataset make_dataset(const StreamSpec& spec, const std::string& transform,
                                   const std::string& stream_label, std::uint64_t domain_idx,
                                   int per_class, const std::string& split) {
    if (per_class <= 0) throw DataError("make_dataset: zero samples requested");
    LabeledDataset ds;
    ds.split = split;
    for (std::size_t c = 0; c < spec.classes.size(); ++c)
        for (int i = 0; i < per_class; ++i) {
            Rng rng(derive_seed(spec.seed, stream_label, domain_idx, c,
                                static_cast<std::uint64_t>(i)));
            ds.images.push_back(
                detail::apply_transform(transform, spec.classes[c], rng, spec.image_size));
            ds.labels.push_back(static_cast<std::int64_t>(c));
        }
    return ds;
}

// Ordered multi-domain stream: same classes in every domain, fresh samples
// per domain (no image reuse), deterministic under spec.seed.
inline Stream generate_stream(const StreamSpec& spec) {
    if (spec.classes.empty() || spec.domains.empty())
        throw DataError("generate_stream: empty class or domain list");
    Stream stream;
    for (std::size_t d = 0; d < spec.domains.size(); ++d) {
        DomainSet set;
        set.name = spec.domains[d];
        set.train = make_dataset(spec, spec.domains[d], "stream-train", d,
                                 spec.train_per_class, "train");
        set.test = make_dataset(spec, spec.domains[d], "stream-test", d,
                                spec.test_per_class, "test");
        stream.domains.push_back(std::move(set));
    }
    for (std::size_t d = 0; d < spec.ood.size(); ++d) {
        DomainSet set;
        set.name = spec.ood[d];
        set.test = make_dataset(spec, spec.ood[d], "stream-ood", d,
                                spec.test_per_class, "test");
        stream.ood.push_back(std::move(set));
    }
    return stream;
}

struct PretrainCorpus {
    LabeledDataset train;
    LabeledDataset holdout;
    std::vector<std::string> warnings; // transform-overlap provenance
};

// Backbone pretraining data: same label space as the stream, transform
// family disjoint from every stream domain under the default spec.
inline PretrainCorpus pretrain_corpus(const StreamSpec& spec, int samples,
                                      double holdout_fraction, std::uint64_t seed) {
    if (samples <= 0) throw DataError("pretrain_corpus: zero samples requested");
    const std::string transform = "brightness_blur";
    PretrainCorpus corpus;
    for (const auto& d : spec.domains)
        if (d == transform)
            corpus.warnings.push_back("pretrain transform '" + transform +
                                      "' overlaps stream domain list");
    const int hold = std::max(1, static_cast<int>(samples * holdout_fraction));
    corpus.train.split = "train";
    corpus.holdout.split = "test";
    for (int i = 0; i < samples; ++i) {
        const std::size_t c = static_cast<std::size_t>(i) % spec.classes.size();
        Rng rng(derive_seed(seed, "pretrain", c, static_cast<std::uint64_t>(i)));
        Image img = detail::apply_transform(transform, spec.classes[c], rng,
                                            spec.image_size);
        LabeledDataset& dst = (i < hold) ? corpus.holdout : corpus.train;
        dst.images.push_back(std::move(img));
        dst.labels.push_back(static_cast<std::int64_t>(c));
    }
    return corpus;
}

// Training-time augmentation: horizontal flip and random crop with edge
// padding. Evaluation and feature buffering always use the raw image.
inline Image augment_flip_crop(const Image& img, Rng& rng, int pad = 4) {
    Image out = img;
    if (rng.next_below(2) == 1) {
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c)
                    out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    }
    const int oy = static_cast<int>(rng.next_below(2 * pad + 1)) - pad;
    const int ox = static_cast<int>(rng.next_below(2 * pad + 1)) - pad;
    Image shifted = Image::blank(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const int sy = std::clamp(y + oy, 0, img.height - 1);
            const int sx = std::clamp(x + ox, 0, img.width - 1);
            for (int c = 0; c < 3; ++c) shifted.at(y, x, c) = out.at(sy, sx, c);
        }
    return shifted;
}

inline std::uint64_t dataset_hash(const LabeledDataset& ds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix_bytes = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (std::size_t i = 0; i < ds.size(); ++i) {
        mix_bytes(&ds.labels[i], sizeof(ds.labels[i]));
        mix_bytes(ds.images[i].pixels.data(), ds.images[i].pixels.size() * sizeof(float));
    }
    return h;
}

// ---- on-disk datasets ----

// Loads `<dir>/<class>/<image files>` with lexicographic ordering of class
// directories and files. Undecodable files are reported together, per file.
inline LabeledDataset load_directory_dataset(const std::string& dir, int image_size) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("load_directory_dataset: no directory " + dir);
    std::vector<std::string> class_dirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty())
        throw IoError("load_directory_dataset: no class directories under " + dir);
    LabeledDataset ds;
    ds.split = "test";
    std::vector<std::string> errors;
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(fs::path(dir) / class_dirs[c]))
            if (e.is_regular_file()) files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            try {
                ds.images.push_back(resize_bilinear(read_png(f), image_size, image_size));
                ds.labels.push_back(static_cast<std::int64_t>(c));
            } catch (const IoError& err) {
                errors.push_back(err.what());
            }
        }
    }
    if (!errors.empty()) {
        std::string msg = "load_directory_dataset: " + std::to_string(errors.size()) +
                          " file(s) failed:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw IoError(msg);
    }
    if (ds.images.empty())
        throw IoError("load_directory_dataset: no decodable images under " + dir);
    return ds;
}

// Loads `<root>/<domain>/<class>/<files>`, one DomainSet per domain directory
// in lexicographic order. Each domain's images split 80/20 train/test by
// position within its class file list.
inline std::vector<DomainSet> load_directory_stream(const std::string& root,
                                                    int image_size) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("load_directory_stream: no directory " + root);
    std::vector<std::string> domain_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) domain_dirs.push_back(e.path().filename().string());
    std::sort(domain_dirs.begin(), domain_dirs.end());
    if (domain_dirs.empty())
        throw IoError("load_directory_stream: no domain directories under " + root);
    std::vector<DomainSet> out;
    for (const auto& d : domain_dirs) {
        LabeledDataset all =
            load_directory_dataset((fs::path(root) / d).string(), image_size);
        DomainSet set;
        set.name = d;
        set.train.split = "train";
        set.test.split = "test";
        for (std::size_t i = 0; i < all.size(); ++i) {
            LabeledDataset& dst = (i % 5 == 4) ? set.test : set.train;
            dst.images.push_back(std::move(all.images[i]));
            dst.labels.push_back(all.labels[i]);
        }
        out.push_back(std::move(set));
    }
    return out;
}

// Writes a stream back out as `<root>/<domain>/<class>/<split>_<idx>.png`.
inline void export_png_tree(const Stream& stream, const StreamSpec& spec,
                            const std::string& root) {
    namespace fs = std::filesystem;
    auto dump = [&](const LabeledDataset& ds, const std::string& domain,
                    const std::string& prefix) {
        std::vector<int> counter(spec.classes.size(), 0);
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto& cls = spec.classes[static_cast<std::size_t>(ds.labels[i])];
            fs::path dir = fs::path(root) / domain / cls;
            fs::create_directories(dir);
            char name[32];
            std::snprintf(name, sizeof(name), "%s_%04d.png", prefix.c_str(),
                          counter[static_cast<std::size_t>(ds.labels[i])]++);
            write_png((dir / name).string(), ds.images[i]);
        }
    };
    for (const auto& d : stream.domains) {
        dump(d.train, d.name, "train");
        dump(d.test, d.name, "test");
    }
    for (const auto& d : stream.ood) dump(d.test, d.name, "test");
}

} // namespace sprompts::data
