#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ginv/tensor.hpp"

namespace ginv {

/// Integer translation aligning a moving image to a fixed one, so that
/// moving(y, x) matches fixed(y - dy, x - dx) on their overlap.
struct Registration {
    int dy = 0, dx = 0;
    double score = 0.0;  // normalized cross-correlation over the overlap
};

/// Read-only C x H x W view into a tensor buffer.
struct ImageView {
    const double* data;
    std::size_t c, h, w;

    double at(std::size_t ch, long y, long x) const {
        return data[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
    }
};

/// View of image `k` of a K x C x H x W batch.
inline ImageView image_view(const Tensor& batch, std::size_t k) {
    if (batch.dim() != 4) throw ShapeError("image_view: expected K x C x H x W, got " + shape_str(batch.shape()));
    const std::size_t c = batch.size(1), h = batch.size(2), w = batch.size(3);
    return {batch.data().data() + k * c * h * w, c, h, w};
}

/// Default search radius: ceil(H / 8).
inline int default_radius(std::size_t height) { return static_cast<int>((height + 7) / 8); }

namespace detail {

/// Visits the overlap of `moving` and `fixed` under shift (dy, dx) as (moving value, fixed value) pairs.
template <class F>
void visit_overlap(const ImageView& moving, const ImageView& fixed, int dy, int dx, F&& f) {
    const long h = static_cast<long>(moving.h), w = static_cast<long>(moving.w);
    const long y0 = std::max(0L, static_cast<long>(dy)), y1 = std::min(h, h + dy);
    const long x0 = std::max(0L, static_cast<long>(dx)), x1 = std::min(w, w + dx);
    for (std::size_t c = 0; c < moving.c; ++c)
        for (long y = y0; y < y1; ++y)
            for (long x = x0; x < x1; ++x) f(moving.at(c, y, x), fixed.at(c, y - dy, x - dx));
}

inline double overlap_ncc(const ImageView& moving, const ImageView& fixed, int dy, int dx) {
    double n = 0, sa = 0, sb = 0;
    visit_overlap(moving, fixed, dy, dx, [&](double a, double b) {
        n += 1;
        sa += a;
        sb += b;
    });
    if (n == 0) return 0.0;
    const double ma = sa / n, mb = sb / n;
    double ab = 0, aa = 0, bb = 0;
    visit_overlap(moving, fixed, dy, dx, [&](double a, double b) {
        ab += (a - ma) * (b - mb);
        aa += (a - ma) * (a - ma);
        bb += (b - mb) * (b - mb);
    });
    const double denom = std::sqrt(aa * bb);
    if (!(denom > 1e-300) || aa < 1e-24 * n || bb < 1e-24 * n) return 0.0;
    return std::clamp(ab / denom, -1.0, 1.0);
}

}  // namespace detail

/// Exhaustive integer-shift search maximizing overlap NCC. Ties (within 1e-12)
/// go to the smaller |dy| + |dx|, then to the lexicographically smaller (dy, dx).
/// Zero-variance overlaps score 0.
inline Registration register_translation(const ImageView& moving, const ImageView& fixed, int radius) {
    if (moving.c != fixed.c || moving.h != fixed.h || moving.w != fixed.w)
        throw ShapeError("register_translation: image shapes differ");
    if (radius < 0 || 2 * static_cast<std::size_t>(radius) >= std::min(moving.h, moving.w))
        throw std::invalid_argument("register_translation: radius " + std::to_string(radius) +
                                    " must be below half the image size");
    Registration best{0, 0, detail::overlap_ncc(moving, fixed, 0, 0)};
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
            const double s = detail::overlap_ncc(moving, fixed, dy, dx);
            const int l1 = std::abs(dy) + std::abs(dx), best_l1 = std::abs(best.dy) + std::abs(best.dx);
            bool better = s > best.score + 1e-12;
            if (!better && std::abs(s - best.score) <= 1e-12)
                better = l1 < best_l1 || (l1 == best_l1 && std::make_pair(dy, dx) < std::make_pair(best.dy, best.dx));
            if (better) best = {dy, dx, s};
        }
    return best;
}

/// Translates one C x H x W image: out(y, x) = img(y - dy, x - dx). Pixels with
/// no source are set to `fill` and marked 0 in `mask` when given.
inline std::vector<double> shift_image(const ImageView& img, int dy, int dx, double fill = 0.0,
                                       std::vector<double>* mask = nullptr) {
    std::vector<double> out(img.c * img.h * img.w, fill);
    if (mask) mask->assign(out.size(), 0.0);
    const long h = static_cast<long>(img.h), w = static_cast<long>(img.w);
    for (std::size_t c = 0; c < img.c; ++c)
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                const long sy = y - dy, sx = x - dx;
                if (sy < 0 || sx < 0 || sy >= h || sx >= w) continue;
                const std::size_t i = (c * img.h + static_cast<std::size_t>(y)) * img.w + static_cast<std::size_t>(x);
                out[i] = img.at(c, sy, sx);
                if (mask) (*mask)[i] = 1.0;
            }
    return out;
}

/// Shifts every image of a batch by the same (dy, dx) with zero fill.
inline Tensor shift_batch(const Tensor& batch, int dy, int dx) {
    std::vector<double> out;
    for (std::size_t k = 0; k < batch.size(0); ++k) {
        auto s = shift_image(image_view(batch, k), dy, dx);
        out.insert(out.end(), s.begin(), s.end());
    }
    return Tensor(batch.shape(), std::move(out));
}

}  // namespace ginv
