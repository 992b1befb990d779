#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ginv/archive.hpp"
#include "ginv/nn.hpp"
#include "ginv/rng.hpp"

namespace ginv {

/// Ground-truth images (K x C x H x W, values in [0, 1]) and their labels.
struct Batch {
    Tensor images;
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

/// A labelled image collection.
struct Dataset {
    Tensor images;  // n x C x H x W in [0, 1]
    std::vector<std::size_t> labels;
    std::size_t classes = 10;

    std::size_t size() const { return labels.size(); }

    Batch subset(std::span<const std::size_t> ids) const {
        const std::size_t per = images.numel() / images.size(0);
        std::vector<double> v(ids.size() * per);
        std::vector<std::size_t> y;
        auto src = images.data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::copy_n(&src[ids[i] * per], per, &v[i * per]);
            y.push_back(labels.at(ids[i]));
        }
        Shape s = images.shape();
        s[0] = ids.size();
        return {Tensor(s, std::move(v)), std::move(y)};
    }
};

// ---------------------------------------------------------------------------
// Procedural class-conditioned shapes

struct SyntheticSource {
    std::size_t channels = 1, height = 16, width = 16, classes = 10;
    double noise = 0.05;
    /// Largest random translation in pixels; 0 selects height / 8.
    std::size_t max_shift = 0;
};

namespace detail {

/// Indicator of class `cls` at centred unit coordinates (u right, v down).
inline bool shape_mask(std::size_t cls, double u, double v) {
    const double au = std::abs(u), av = std::abs(v), r = std::hypot(u, v);
    switch (cls) {
        case 0: return au < 0.22 && av < 0.22;                                   // filled square
        case 1: return av < 0.09 && au < 0.34;                                   // horizontal bar
        case 2: return au < 0.09 && av < 0.34;                                   // vertical bar
        case 3: return (av < 0.07 && au < 0.3) || (au < 0.07 && av < 0.3);       // plus
        case 4: return r > 0.17 && r < 0.3;                                      // ring
        case 5: return r < 0.2;                                                  // disk
        case 6: return (std::abs(u - v) < 0.1 || std::abs(u + v) < 0.1) && au < 0.3 && av < 0.3;  // cross
        case 7: return (std::abs(u + 0.2) < 0.08 && av < 0.3) || (std::abs(v - 0.22) < 0.08 && au < 0.3);  // L
        case 8: return (std::abs(v + 0.22) < 0.08 && au < 0.3) || (au < 0.08 && av < 0.3);  // T
        case 9: return std::max(au, av) > 0.17 && std::max(au, av) < 0.3;       // hollow square
        default: return false;
    }
}

inline double class_tint(std::size_t cls, std::size_t channel) {
    return 0.35 + 0.65 * static_cast<double>((cls * 7 + channel * 3) % 5) / 4.0;
}

}  // namespace detail

/// Renders one sample of class `cls` with a random translation and pixel noise.
inline std::vector<double> render_synthetic(const SyntheticSource& src, std::size_t cls, Rng& rng) {
    if (cls >= 10) throw std::invalid_argument("synthetic source supports at most 10 classes");
    const long shift = static_cast<long>(src.max_shift ? src.max_shift : std::max<std::size_t>(1, src.height / 8));
    std::uniform_int_distribution<long> d(-shift, shift);
    const long dy = d(rng), dx = d(rng);
    std::normal_distribution<double> noise(0.0, src.noise);
    const std::size_t h = src.height, w = src.width;
    std::vector<double> img(src.channels * h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double u = (static_cast<double>(x) + 0.5 - static_cast<double>(dx)) / static_cast<double>(w) - 0.5;
            const double v = (static_cast<double>(y) + 0.5 - static_cast<double>(dy)) / static_cast<double>(h) - 0.5;
            const double on = detail::shape_mask(cls, u, v) ? 1.0 : 0.0;
            for (std::size_t c = 0; c < src.channels; ++c) {
                const double base = src.channels == 1 ? on : on * detail::class_tint(cls, c);
                const double px = base + (src.noise > 0 ? noise(rng) : 0.0);
                img[(c * h + y) * w + x] = std::clamp(px, 0.0, 1.0);
            }
        }
    return img;
}

/// `n` synthetic samples with uniformly drawn labels.
inline Dataset synthetic_dataset(const SyntheticSource& src, std::size_t n, std::uint64_t seed) {
    if (src.classes > 10) throw std::invalid_argument("synthetic source supports at most 10 classes");
    Rng rng = make_rng(seed, stream::dataset);
    std::uniform_int_distribution<std::size_t> cls(0, src.classes - 1);
    Dataset ds;
    ds.classes = src.classes;
    std::vector<double> all;
    all.reserve(n * src.channels * src.height * src.width);
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels.push_back(cls(rng));
        auto img = render_synthetic(src, ds.labels.back(), rng);
        all.insert(all.end(), img.begin(), img.end());
    }
    ds.images = Tensor({n, src.channels, src.height, src.width}, std::move(all));
    return ds;
}

namespace detail {
inline std::vector<std::size_t> draw_labels(std::size_t classes, std::size_t k, bool distinct, Rng& rng) {
    if (k == 0) throw std::invalid_argument("make_batch: batch size must be at least 1");
    if (distinct && k > classes)
        throw std::invalid_argument("make_batch: " + std::to_string(k) + " distinct labels requested from " +
                                    std::to_string(classes) + " classes");
    std::vector<std::size_t> labels;
    if (distinct) {
        std::vector<std::size_t> all(classes);
        std::iota(all.begin(), all.end(), std::size_t{0});
        std::shuffle(all.begin(), all.end(), rng);
        labels.assign(all.begin(), all.begin() + static_cast<long>(k));
    } else {
        std::uniform_int_distribution<std::size_t> d(0, classes - 1);
        for (std::size_t i = 0; i < k; ++i) labels.push_back(d(rng));
    }
    return labels;
}
}  // namespace detail

inline Batch make_batch(const SyntheticSource& src, std::size_t k, bool distinct, std::uint64_t seed) {
    Rng rng = make_rng(seed, stream::batch);
    Batch b;
    b.labels = detail::draw_labels(src.classes, k, distinct, rng);
    std::vector<double> all;
    for (auto y : b.labels) {
        auto img = render_synthetic(src, y, rng);
        all.insert(all.end(), img.begin(), img.end());
    }
    b.images = Tensor({k, src.channels, src.height, src.width}, std::move(all));
    return b;
}

/// Samples a batch from a loaded dataset; with `distinct`, one sample from each of k distinct classes.
inline Batch make_batch(const Dataset& ds, std::size_t k, bool distinct, std::uint64_t seed) {
    Rng rng = make_rng(seed, stream::batch);
    std::vector<std::size_t> ids;
    if (distinct) {
        std::vector<std::vector<std::size_t>> by_class(ds.classes);
        for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(ds.labels[i]).push_back(i);
        std::vector<std::size_t> present;
        for (std::size_t c = 0; c < ds.classes; ++c)
            if (!by_class[c].empty()) present.push_back(c);
        if (k > present.size())
            throw std::invalid_argument("make_batch: " + std::to_string(k) + " distinct labels requested, dataset has " +
                                        std::to_string(present.size()) + " classes");
        std::shuffle(present.begin(), present.end(), rng);
        for (std::size_t i = 0; i < k; ++i) {
            const auto& pool = by_class[present[i]];
            ids.push_back(pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]);
        }
    } else {
        if (k == 0) throw std::invalid_argument("make_batch: batch size must be at least 1");
        std::uniform_int_distribution<std::size_t> d(0, ds.size() - 1);
        for (std::size_t i = 0; i < k; ++i) ids.push_back(d(rng));
    }
    return ds.subset(ids);
}

// ---------------------------------------------------------------------------
// IDX files (big-endian; 0x00000803 images, 0x00000801 labels)

namespace detail {
inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const std::string& path) {
    if (at + 4 > b.size()) throw FormatError(path + ": truncated header at offset " + std::to_string(at));
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}
inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}
}  // namespace detail

/// Loads an IDX image/label pair; pixels are scaled by 1/255.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);
    if (auto m = detail::be32(img, 0, images_path); m != 0x00000803)
        throw FormatError(images_path + ": bad magic at offset 0 (expected 0x00000803)");
    if (auto m = detail::be32(lab, 0, labels_path); m != 0x00000801)
        throw FormatError(labels_path + ": bad magic at offset 0 (expected 0x00000801)");
    const std::size_t n = detail::be32(img, 4, images_path), rows = detail::be32(img, 8, images_path),
                      cols = detail::be32(img, 12, images_path);
    const std::size_t nl = detail::be32(lab, 4, labels_path);
    if (n != nl)
        throw FormatError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
    if (n == 0 || rows == 0 || cols == 0) throw FormatError(images_path + ": empty dataset");
    if (img.size() < 16 + n * rows * cols) throw FormatError(images_path + ": truncated pixel data at offset " + std::to_string(img.size()));
    if (lab.size() < 8 + n) throw FormatError(labels_path + ": truncated label data at offset " + std::to_string(lab.size()));
    Dataset ds;
    std::vector<double> px(n * rows * cols);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(img[16 + i]) / 255.0;
    ds.images = Tensor({n, 1, rows, cols}, std::move(px));
    std::size_t max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels.push_back(lab[8 + i]);
        max_label = std::max(max_label, ds.labels.back());
    }
    ds.classes = max_label + 1;
    return ds;
}

/// Writes a single-channel dataset as an IDX pair (pixels rounded to u8).
inline void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
    const std::size_t n = ds.size(), rows = ds.images.size(2), cols = ds.images.size(3);
    std::vector<std::uint8_t> img, lab;
    detail::put_be32(img, 0x00000803);
    detail::put_be32(img, static_cast<std::uint32_t>(n));
    detail::put_be32(img, static_cast<std::uint32_t>(rows));
    detail::put_be32(img, static_cast<std::uint32_t>(cols));
    for (std::size_t i = 0; i < n * rows * cols; ++i)
        img.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(ds.images[i], 0.0, 1.0) * 255.0)));
    detail::put_be32(lab, 0x00000801);
    detail::put_be32(lab, static_cast<std::uint32_t>(n));
    for (auto y : ds.labels) lab.push_back(static_cast<std::uint8_t>(y));
    write_file(images_path, img);
    write_file(labels_path, lab);
}

// ---------------------------------------------------------------------------
// Gradient bundle: everything the attacker observes

/// Batch-averaged parameter gradients of one client step, plus the model they
/// were taken on. Optionally carries the batch's BN statistics. Holds no images or labels.
struct GradientBundle {
    Model model;
    std::vector<NamedTensor> gradients;  // same names and order as model.params
    std::optional<std::vector<BnStats>> bn_stats;
    std::size_t batch_size = 0;

    std::vector<Tensor> gradient_values() const {
        std::vector<Tensor> v;
        for (const auto& g : gradients) v.push_back(g.value);
        return v;
    }

    const Tensor& gradient(std::string_view name) const {
        for (const auto& g : gradients)
            if (g.name == name) return g.value;
        throw std::out_of_range("bundle has no gradient for '" + std::string(name) + "'");
    }

    /// Gradient of the final Linear weight, M x N.
    const Tensor& fc_gradient() const { return gradient(model.fc_weight_name()); }
};

inline constexpr std::uint32_t kBundleVersion = 1;
inline constexpr std::uint32_t kBundleHasBnStats = 1;

/// Averaged cross-entropy gradient over the batch, with batch-mode BN
/// (gradients flow through the batch mean and variance).
inline GradientBundle compute_bundle(const Model& model, const Batch& batch, bool include_bn_stats) {
    GraphScope scope;
    std::vector<Tensor> leaves;
    for (const auto& p : model.params) leaves.push_back(scope->leaf(p.value));
    auto trace = model_forward(model, batch.images, BnMode::Batch, leaves);
    auto grads = grad(cross_entropy(trace.logits, batch.labels), leaves);
    GradientBundle b{model, {}, std::nullopt, batch.size()};
    for (std::size_t i = 0; i < grads.size(); ++i) b.gradients.push_back({model.params[i].name, grads[i].detach()});
    if (include_bn_stats) {
        std::vector<BnStats> stats;
        for (const auto& s : trace.bn_batch) stats.push_back({s.mean.detach(), s.var.detach()});
        b.bn_stats = std::move(stats);
    }
    return b;
}

inline Archive bundle_to_archive(const GradientBundle& b) {
    Archive a;
    a.magic = "GINV";
    a.version = kBundleVersion;
    a.batch_size = static_cast<std::uint32_t>(b.batch_size);
    a.flags = b.bn_stats ? kBundleHasBnStats : 0;
    a.spec_text = b.model.spec.to_text();
    for (const auto& p : b.model.params) a.tensors.push_back({"param/" + p.name, p.value});
    for (std::size_t i = 0; i < b.model.bn_running.size(); ++i) {
        a.tensors.push_back({"running/" + std::to_string(i) + "/mean", b.model.bn_running[i].mean});
        a.tensors.push_back({"running/" + std::to_string(i) + "/var", b.model.bn_running[i].var});
    }
    for (const auto& g : b.gradients) a.tensors.push_back({"grad/" + g.name, g.value});
    if (b.bn_stats)
        for (std::size_t i = 0; i < b.bn_stats->size(); ++i) {
            a.tensors.push_back({"bn/" + std::to_string(i) + "/mean", (*b.bn_stats)[i].mean});
            a.tensors.push_back({"bn/" + std::to_string(i) + "/var", (*b.bn_stats)[i].var});
        }
    return a;
}

inline GradientBundle bundle_from_archive(const Archive& a) {
    GradientBundle b;
    b.batch_size = a.batch_size;
    ModelSpec spec;
    try {
        spec = ModelSpec::from_text(a.spec_text);
    } catch (const SpecError& e) {
        throw FormatError(std::string("bundle model spec: ") + e.what());
    }
    Model shape_ref = model_init(spec, 0);
    b.model.spec = spec;
    for (const auto& p : shape_ref.params) {
        const Tensor& w = a.get("param/" + p.name);
        const Tensor& g = a.get("grad/" + p.name);
        if (w.shape() != p.value.shape() || g.shape() != p.value.shape())
            throw FormatError("bundle tensor '" + p.name + "' has shape " + shape_str(w.shape()) + ", expected " +
                              shape_str(p.value.shape()));
        b.model.params.push_back({p.name, w});
        b.gradients.push_back({p.name, g});
    }
    for (std::size_t i = 0; i < shape_ref.bn_running.size(); ++i)
        b.model.bn_running.push_back({a.get("running/" + std::to_string(i) + "/mean"), a.get("running/" + std::to_string(i) + "/var")});
    if (a.flags & kBundleHasBnStats) {
        std::vector<BnStats> stats;
        for (std::size_t i = 0; i < shape_ref.bn_running.size(); ++i)
            stats.push_back({a.get("bn/" + std::to_string(i) + "/mean"), a.get("bn/" + std::to_string(i) + "/var")});
        b.bn_stats = std::move(stats);
    }
    return b;
}

inline void save_bundle(const GradientBundle& b, const std::string& path) { save_archive(bundle_to_archive(b), path); }

inline GradientBundle load_bundle(const std::string& path) {
    return bundle_from_archive(load_archive(path, "GINV", kBundleVersion));
}

/// Ground truth lives in its own file ("GTRU") so the attack never reads it.
/// An optional gallery (the pool the batch was drawn from) is kept alongside
/// for identifiability scoring.
inline void save_ground_truth(const Batch& b, const std::string& path, const Tensor* gallery = nullptr) {
    Archive a;
    a.magic = "GTRU";
    a.batch_size = static_cast<std::uint32_t>(b.size());
    std::vector<double> labels(b.labels.begin(), b.labels.end());
    a.tensors.push_back({"images", b.images});
    a.tensors.push_back({"labels", Tensor({b.size()}, std::move(labels))});
    if (gallery) a.tensors.push_back({"gallery", *gallery});
    save_archive(a, path);
}

inline std::optional<Tensor> load_gallery(const std::string& path) {
    auto a = load_archive(path, "GTRU");
    if (const Tensor* g = a.find("gallery")) return *g;
    return std::nullopt;
}

inline Batch load_ground_truth(const std::string& path) {
    auto a = load_archive(path, "GTRU");
    Batch b;
    b.images = a.get("images");
    for (double y : a.get("labels").data()) b.labels.push_back(static_cast<std::size_t>(y));
    if (b.images.dim() != 4 || b.images.size(0) != b.labels.size())
        throw FormatError(path + ": image and label counts differ");
    return b;
}

}  // namespace ginv
