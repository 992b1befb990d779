#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ginv/archive.hpp"
#include "ginv/tensor.hpp"

namespace ginv {

/// 8-bit raster as stored in a binary PGM (1 channel) or PPM (3 channels).
struct Raster {
    std::size_t width = 0, height = 0, channels = 1;
    std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

inline constexpr std::uint8_t kSeparatorValue = 255;

/// Lays the batch out `per_row` images per row (0 = all in one row) with 1 px
/// separators. Each image is affinely stretched to [0, 255] on its own.
inline Raster image_grid(const Tensor& batch, std::size_t per_row = 0) {
    if (batch.dim() != 4) throw ShapeError("image_grid: expected K x C x H x W, got " + shape_str(batch.shape()));
    const std::size_t k = batch.size(0), c = batch.size(1), h = batch.size(2), w = batch.size(3);
    if (c != 1 && c != 3) throw ShapeError("image_grid: only 1 or 3 channels can be written, got " + std::to_string(c));
    const std::size_t cols = per_row == 0 ? k : std::min(per_row, k);
    const std::size_t rows = (k + cols - 1) / cols;
    Raster r{cols * w + (cols - 1), rows * h + (rows - 1), c, {}};
    r.pixels.assign(r.width * r.height * c, kSeparatorValue);
    const std::size_t per = c * h * w;
    for (std::size_t i = 0; i < k; ++i) {
        auto img = batch.data().subspan(i * per, per);
        const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
        const double span = *hi - *lo;
        const std::size_t oy = (i / cols) * (h + 1), ox = (i % cols) * (w + 1);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double v = span > 0 ? (img[(ch * h + y) * w + x] - *lo) / span : 0.0;
                    r.pixels[((oy + y) * r.width + ox + x) * c + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
                }
    }
    return r;
}

inline std::vector<std::uint8_t> encode_pnm(const Raster& r) {
    const std::string header = std::string(r.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(r.width) + " " +
                               std::to_string(r.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), r.pixels.begin(), r.pixels.end());
    return out;
}

inline Raster decode_pnm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto token = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#')
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            else if (std::isspace(bytes[pos]))
                ++pos;
            else
                break;
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
        return t;
    };
    Raster r;
    const std::string magic = token();
    if (magic != "P5" && magic != "P6") throw FormatError("not a binary PGM/PPM file");
    r.channels = magic == "P5" ? 1 : 3;
    try {
        r.width = std::stoul(token());
        r.height = std::stoul(token());
        if (std::stoul(token()) != 255) throw FormatError("only 8-bit PGM/PPM is supported");
    } catch (const std::logic_error&) {
        throw FormatError("malformed PGM/PPM header");
    }
    ++pos;  // single whitespace after maxval
    const std::size_t n = r.width * r.height * r.channels;
    if (bytes.size() < pos + n) throw FormatError("PGM/PPM pixel data truncated");
    r.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
    return r;
}

inline void write_image_grid(const Tensor& batch, const std::string& path, std::size_t per_row = 0) {
    write_file(path, encode_pnm(image_grid(batch, per_row)));
}

inline Raster read_pnm(const std::string& path) { return decode_pnm(read_file(path)); }

}  // namespace ginv
