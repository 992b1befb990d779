#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ginv/archive.hpp"
#include "ginv/registration.hpp"
#include "ginv/victim.hpp"

namespace ginv {

inline constexpr double kPsnrCapDb = 99.0;

/// Affinely maps each image of a batch to [0, 1] (constant images map to 0).
inline Tensor normalize_unit(const Tensor& batch) {
    std::vector<double> out = batch.to_vector();
    const std::size_t per = batch.numel() / batch.size(0);
    for (std::size_t k = 0; k < batch.size(0); ++k) {
        auto first = out.begin() + static_cast<long>(k * per), last = first + static_cast<long>(per);
        const auto [lo, hi] = std::minmax_element(first, last);
        const double a = *lo, span = *hi - *lo;
        for (auto it = first; it != last; ++it) *it = span > 0 ? (*it - a) / span : 0.0;
    }
    return Tensor(batch.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// PSNR after registration

/// PSNR of one image after aligning it to the original; MSE over the overlap,
/// capped at 99 dB.
inline double psnr_post_registration(const ImageView& reconstruction, const ImageView& original, int radius) {
    const auto reg = register_translation(reconstruction, original, radius);
    double se = 0, n = 0;
    detail::visit_overlap(reconstruction, original, reg.dy, reg.dx, [&](double a, double b) {
        se += (a - b) * (a - b);
        n += 1;
    });
    const double mse = se / n;
    if (mse <= std::pow(10.0, -kPsnrCapDb / 10.0)) return kPsnrCapDb;
    return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / mse));
}

/// Per-image post-registration PSNR of a batch.
inline std::vector<double> psnr_batch(const Tensor& reconstruction, const Tensor& original, int radius) {
    if (reconstruction.shape() != original.shape())
        throw ShapeError("psnr: shapes " + shape_str(reconstruction.shape()) + " and " + shape_str(original.shape()) + " differ");
    std::vector<double> out;
    for (std::size_t k = 0; k < original.size(0); ++k)
        out.push_back(psnr_post_registration(image_view(reconstruction, k), image_view(original, k), radius));
    return out;
}

// ---------------------------------------------------------------------------
// FFT

using Complex = std::complex<double>;

inline std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

/// In-place iterative radix-2 FFT; `inverse` applies the 1/n scaling.
inline void fft_inplace(std::vector<Complex>& a, bool inverse = false) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft: length must be a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1 : -1);
        for (std::size_t i = 0; i < n; i += len)
            for (std::size_t k = 0; k < len / 2; ++k) {
                const Complex w = std::polar(1.0, ang * static_cast<double>(k));
                const Complex u = a[i + k], v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
            }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

/// 2-D FFT of an h x w row-major grid (both powers of two).
inline void fft2d_inplace(std::vector<Complex>& grid, std::size_t h, std::size_t w, bool inverse = false) {
    std::vector<Complex> line;
    for (std::size_t y = 0; y < h; ++y) {
        line.assign(grid.begin() + static_cast<long>(y * w), grid.begin() + static_cast<long>((y + 1) * w));
        fft_inplace(line, inverse);
        std::copy(line.begin(), line.end(), grid.begin() + static_cast<long>(y * w));
    }
    line.resize(h);
    for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t y = 0; y < h; ++y) line[y] = grid[y * w + x];
        fft_inplace(line, inverse);
        for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = line[y];
    }
}

/// Magnitude spectrum of one channel, zero-padded to powers of two.
inline std::vector<double> magnitude_spectrum(const ImageView& img, std::size_t channel) {
    const std::size_t ph = next_pow2(img.h), pw = next_pow2(img.w);
    std::vector<Complex> grid(ph * pw);
    for (std::size_t y = 0; y < img.h; ++y)
        for (std::size_t x = 0; x < img.w; ++x)
            grid[y * pw + x] = img.at(channel, static_cast<long>(y), static_cast<long>(x));
    fft2d_inplace(grid, ph, pw);
    std::vector<double> mag(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) mag[i] = std::abs(grid[i]);
    return mag;
}

/// 1 - cosine similarity of per-channel magnitude spectra, averaged over images
/// and channels. Two all-zero spectra count as identical, one all-zero as orthogonal.
inline double fft2d_distance(const Tensor& reconstruction, const Tensor& original) {
    if (reconstruction.shape() != original.shape())
        throw ShapeError("fft2d_distance: shapes " + shape_str(reconstruction.shape()) + " and " +
                         shape_str(original.shape()) + " differ");
    double total = 0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < original.size(0); ++k) {
        const auto a = image_view(reconstruction, k), b = image_view(original, k);
        for (std::size_t c = 0; c < a.c; ++c) {
            const auto ma = magnitude_spectrum(a, c), mb = magnitude_spectrum(b, c);
            double ab = 0, aa = 0, bb = 0;
            for (std::size_t i = 0; i < ma.size(); ++i) {
                ab += ma[i] * mb[i];
                aa += ma[i] * ma[i];
                bb += mb[i] * mb[i];
            }
            double d;
            if (aa == 0 && bb == 0)
                d = 0.0;
            else if (aa == 0 || bb == 0)
                d = 1.0;
            else
                d = 1.0 - std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
            total += d;
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Gradient diagnostics

struct GradientDiagnostics {
    double l2 = 0;          // ||g - target||
    double sign_match = 0;  // percentage of coordinates with equal sign (0 matches only 0)
    double cosine = 0;      // 1 - cos(g, target)
};

inline GradientDiagnostics compare_gradients(const std::vector<Tensor>& g, const std::vector<Tensor>& target) {
    if (g.size() != target.size()) throw ShapeError("compare_gradients: parameter counts differ");
    double diff = 0, dot = 0, gg = 0, tt = 0, same = 0, n = 0;
    auto sign = [](double v) { return (v > 0) - (v < 0); };
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (g[i].shape() != target[i].shape()) throw ShapeError("compare_gradients: parameter shapes differ");
        for (std::size_t t = 0; t < g[i].numel(); ++t) {
            const double a = g[i][t], b = target[i][t];
            diff += (a - b) * (a - b);
            dot += a * b;
            gg += a * a;
            tt += b * b;
            same += sign(a) == sign(b);
            n += 1;
        }
    }
    const double denom = std::sqrt(gg * tt);
    return {std::sqrt(diff), 100.0 * same / n, denom > 0 ? 1.0 - dot / denom : 1.0};
}

/// Averaged parameter gradient of the task loss at (x, labels), batch-mode BN.
inline std::vector<Tensor> parameter_gradient(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                                              double loss_scale = 1.0) {
    GraphScope scope;
    std::vector<Tensor> leaves;
    for (const auto& p : model.params) leaves.push_back(scope->leaf(p.value));
    auto trace = model_forward(model, x, BnMode::Batch, leaves);
    auto g = grad(mul_scalar(cross_entropy(trace.logits, labels), loss_scale), leaves);
    for (auto& t : g) t = t.detach();
    return g;
}

inline GradientDiagnostics gradient_diagnostics(const Tensor& x, std::span<const std::size_t> labels,
                                                const GradientBundle& bundle) {
    return compare_gradients(parameter_gradient(bundle.model, x, labels), bundle.gradient_values());
}

// ---------------------------------------------------------------------------
// Image identifiability precision

/// Running-mode penultimate features, one row per image.
inline Tensor embed(const Model& model, const Tensor& images) {
    return model_forward(model, images, BnMode::Running).features.detach();
}

namespace detail {
inline double row_cosine(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    const std::size_t m = a.size(1);
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t t = 0; t < m; ++t) {
        const double x = a[i * m + t], y = b[j * m + t];
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    return aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0;
}
}  // namespace detail

/// Fraction of reconstructions whose nearest gallery neighbour (cosine
/// similarity of embeddings, first index on ties) is pixel-identical to their
/// own original. A duplicated original therefore matches through either copy.
inline double iip_score(const Tensor& reconstructions, const Tensor& originals, const Tensor& gallery, const Model& model) {
    const std::size_t k = originals.size(0), n = gallery.size(0);
    if (n < k) throw std::invalid_argument("iip_score: gallery of " + std::to_string(n) + " is smaller than batch of " + std::to_string(k));
    if (reconstructions.shape() != originals.shape()) throw ShapeError("iip_score: reconstruction and original shapes differ");
    const Tensor er = embed(model, reconstructions), eg = embed(model, gallery);
    const std::size_t per = originals.numel() / k;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t best = 0;
        double best_sim = -2;
        for (std::size_t j = 0; j < n; ++j) {
            const double s = detail::row_cosine(er, i, eg, j);
            if (s > best_sim) {
                best_sim = s;
                best = j;
            }
        }
        const double* g = gallery.data().data() + best * per;
        const double* o = originals.data().data() + i * per;
        hits += std::equal(g, g + per, o);
    }
    return static_cast<double>(hits) / static_cast<double>(k);
}

// ---------------------------------------------------------------------------
// Vulnerability ranking

struct RankedSample {
    std::size_t id;
    double grad_norm;
};

/// Per-sample (K = 1) gradient norm of every dataset sample, ranked descending
/// with ties kept in id order. With `per_class`, only each class's largest-norm
/// sample is returned, still in descending norm order. `loss_scale` multiplies
/// the task loss before differentiation.
inline std::vector<RankedSample> vulnerability_rank(const Model& model, const Dataset& data, bool per_class,
                                                    double loss_scale = 1.0) {
    std::vector<RankedSample> all;
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::vector<std::size_t> id{i};
        auto g = parameter_gradient(model, data.subset(id).images, std::span(&data.labels[i], 1), loss_scale);
        double sq = 0;
        for (const auto& t : g)
            for (double v : t.data()) sq += v * v;
        all.push_back({i, std::sqrt(sq)});
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.grad_norm > b.grad_norm; });
    if (!per_class) return all;
    std::vector<RankedSample> best;
    std::vector<bool> seen(data.classes, false);
    for (const auto& r : all)
        if (!seen.at(data.labels[r.id])) {
            seen[data.labels[r.id]] = true;
            best.push_back(r);
        }
    return best;
}

/// Reorders a ground-truth batch to match reconstruction slots: each slot takes
/// the first unused original carrying its label; slots whose label is absent
/// take the remaining originals in order.
inline Tensor align_ground_truth(std::span<const std::size_t> slot_labels, const Batch& truth) {
    const std::size_t k = truth.size();
    if (slot_labels.size() != k) throw ShapeError("align_ground_truth: slot and batch sizes differ");
    std::vector<std::size_t> pick(k, k);
    std::vector<bool> used(k, false);
    for (std::size_t s = 0; s < k; ++s)
        for (std::size_t i = 0; i < k; ++i)
            if (!used[i] && truth.labels[i] == slot_labels[s]) {
                pick[s] = i;
                used[i] = true;
                break;
            }
    for (std::size_t s = 0, i = 0; s < k; ++s) {
        if (pick[s] != k) continue;
        while (used[i]) ++i;
        pick[s] = i;
        used[i] = true;
    }
    return Dataset{truth.images, truth.labels, 0}.subset(pick).images;
}

// ---------------------------------------------------------------------------
// Report

/// Key = value metrics file with fixed key names.
struct MetricsReport {
    std::vector<double> psnr_db;  // per image
    std::vector<double> fft2d;    // per image
    double psnr_mean_db = 0, fft2d_mean = 0;
    std::optional<double> iip;
    std::optional<GradientDiagnostics> gradient;
    std::optional<double> lpips;  // reserved, never computed

    std::string to_text() const {
        std::ostringstream os;
        os << std::setprecision(10);
        os << "psnr_mean_db = " << psnr_mean_db << '\n';
        os << "fft2d_mean = " << fft2d_mean << '\n';
        if (iip) os << "iip = " << *iip << '\n';
        if (gradient) {
            os << "sign_match_pct = " << gradient->sign_match << '\n';
            os << "grad_l2 = " << gradient->l2 << '\n';
            os << "grad_cos = " << gradient->cosine << '\n';
        }
        for (std::size_t k = 0; k < psnr_db.size(); ++k) os << "psnr_db." << k << " = " << psnr_db[k] << '\n';
        for (std::size_t k = 0; k < fft2d.size(); ++k) os << "fft2d." << k << " = " << fft2d[k] << '\n';
        return os.str();
    }
};

/// Image-quality part of a report: both batches are min-max normalized per image first.
inline MetricsReport image_metrics(const Tensor& reconstruction, const Tensor& original, int radius) {
    MetricsReport r;
    const Tensor a = normalize_unit(reconstruction), b = normalize_unit(original);
    r.psnr_db = psnr_batch(a, b, radius);
    for (std::size_t k = 0; k < b.size(0); ++k) {
        r.fft2d.push_back(fft2d_distance(slice(a, 0, k, 1), slice(b, 0, k, 1)));
    }
    for (double v : r.psnr_db) r.psnr_mean_db += v / static_cast<double>(r.psnr_db.size());
    for (double v : r.fft2d) r.fft2d_mean += v / static_cast<double>(r.fft2d.size());
    return r;
}

/// Parses a key = value metrics file.
inline std::map<std::string, double> parse_metrics(const std::string& text) {
    std::map<std::string, double> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t"));
            s.erase(s.find_last_not_of(" \t\r") + 1);
            return s;
        };
        out[trim(line.substr(0, eq))] = std::stod(trim(line.substr(eq + 1)));
    }
    return out;
}

}  // namespace ginv
