#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ginv/tensor.hpp"

namespace ginv::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

inline Tensor normal_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    std::normal_distribution<double> n(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = n(rng);
    return Tensor(std::move(shape), std::move(v));
}

/// max_i |a_i - b_i| / max_i |b_i|: error relative to the reference's scale.
inline double max_relative_error(const Tensor& a, const Tensor& b) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        diff = std::max(diff, std::abs(a[i] - b[i]));
        scale = std::max(scale, std::abs(b[i]));
    }
    return scale > 0 ? diff / scale : diff;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

}  // namespace ginv::testing
