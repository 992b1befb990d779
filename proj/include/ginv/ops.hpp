#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ginv/tensor.hpp"

namespace ginv {

namespace detail {

/// The graph an op result should be recorded on, or nullptr for a constant.
inline Graph* recording_graph(std::initializer_list<const Tensor*> inputs) {
    Graph* g = ginv::active_graph();
    bool any = false;
    for (const Tensor* t : inputs) {
        if (!t->tracked()) continue;
        if (t->graph() != g) throw std::logic_error("tensor is tracked on a graph that is not active on this thread");
        any = true;
    }
    return (any && g->recording()) ? g : nullptr;
}

inline Graph* recording_graph(const std::vector<Tensor>& inputs) {
    Graph* g = ginv::active_graph();
    bool any = false;
    for (const Tensor& t : inputs) {
        if (!t.tracked()) continue;
        if (t.graph() != g) throw std::logic_error("tensor is tracked on a graph that is not active on this thread");
        any = true;
    }
    return (any && g->recording()) ? g : nullptr;
}

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank(const char* op, const Tensor& a, std::size_t rank) {
    if (a.dim() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t d = shape.size(); d-- > 1;) s[d - 1] = s[d] * shape[d];
    return s;
}

/// Calls f(i, j) for every row-major index i of `shape`, with j the offset
/// obtained by dotting the multi-index with `mapped` strides.
template <class F>
void walk(const Shape& shape, const std::vector<std::size_t>& mapped, F&& f) {
    const std::size_t rank = shape.size();
    if (rank == 0) {
        f(std::size_t{0}, std::size_t{0});
        return;
    }
    const std::size_t n = shape_numel(shape);
    const std::size_t inner = shape.back();
    const std::size_t inner_stride = mapped.back();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; i += inner) {
        for (std::size_t t = 0; t < inner; ++t) f(i + t, j + t * inner_stride);
        for (std::size_t d = rank - 1; d-- > 0;) {
            ++idx[d];
            j += mapped[d];
            if (idx[d] < shape[d]) break;
            j -= mapped[d] * shape[d];
            idx[d] = 0;
        }
    }
}

template <class F>
Tensor map_unary(const Tensor& a, F&& f) {
    std::vector<double> out(a.numel());
    auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return Tensor(a.shape(), std::move(out));
}

template <class F>
Tensor map_binary(const char* op, const Tensor& a, const Tensor& b, F&& f) {
    require_same(op, a, b);
    std::vector<double> out(a.numel());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
    return Tensor(a.shape(), std::move(out));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor mul_scalar(const Tensor& a, double c);
Tensor recip_safe(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor expand(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor slice_adjoint(const Tensor& g, std::size_t axis, std::size_t start, const Shape& full);

inline Tensor add(const Tensor& a, const Tensor& b) {
    Tensor r = detail::map_binary("add", a, b, [](double x, double y) { return x + y; });
    if (Graph* g = detail::recording_graph({&a, &b}))
        return g->record(OpKind::Add, std::move(r), {a, b},
                         [](const Tensor& go, const Tensor&, NeedMask) { return std::vector<Tensor>{go, go}; });
    return r;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    Tensor r = detail::map_binary("sub", a, b, [](double x, double y) { return x - y; });
    if (Graph* g = detail::recording_graph({&a, &b}))
        return g->record(OpKind::Sub, std::move(r), {a, b}, [](const Tensor& go, const Tensor&, NeedMask need) {
            return std::vector<Tensor>{go, needs(need, 1) ? neg(go) : Tensor()};
        });
    return r;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    Tensor r = detail::map_binary("mul", a, b, [](double x, double y) { return x * y; });
    if (Graph* g = detail::recording_graph({&a, &b}))
        return g->record(OpKind::Mul, std::move(r), {a, b}, [a, b](const Tensor& go, const Tensor&, NeedMask need) {
            return std::vector<Tensor>{needs(need, 0) ? mul(go, b) : Tensor(), needs(need, 1) ? mul(go, a) : Tensor()};
        });
    return r;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    Tensor r = detail::map_binary("div", a, b, [](double x, double y) { return x / y; });
    if (Graph* g = detail::recording_graph({&a, &b}))
        return g->record(OpKind::Div, std::move(r), {a, b}, [a, b](const Tensor& go, const Tensor&, NeedMask need) {
            Tensor ga = needs(need, 0) ? div(go, b) : Tensor();
            Tensor gb = needs(need, 1) ? neg(div(mul(go, a), square(b))) : Tensor();
            return std::vector<Tensor>{ga, gb};
        });
    return r;
}

inline Tensor neg(const Tensor& a) {
    Tensor r = detail::map_unary(a, [](double x) { return -x; });
    if (Graph* g = detail::recording_graph({&a}))
        return g->record(OpKind::Neg, std::move(r), {a},
                         [](const Tensor& go, const Tensor&, NeedMask) { return std::vector<Tensor>{neg(go)}; });
    return r;
}

inline Tensor abs(const Tensor& a) {
    Tensor r = detail::map_unary(a, [](double x) { return std::abs(x); });
    if (Graph* g = detail::recording_graph({&a})) {
        Tensor sign = detail::map_unary(a, [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
        return g->record(OpKind::Abs, std::move(r), {a}, [sign](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{mul(go, sign)};
        });
    }
    return r;
}

/// Square root; the derivative at exactly 0 is taken as 0.
inline Tensor sqrt(const Tensor& a) {
    Tensor r = detail::map_unary(a, [](double x) { return std::sqrt(x); });
    if (Graph* g = detail::recording_graph({&a}))
        return g->record(OpKind::Sqrt, std::move(r), {a}, [](const Tensor& go, const Tensor& out, NeedMask) {
            return std::vector<Tensor>{mul(go, mul_scalar(recip_safe(out), 0.5))};
        });
    return r;
}

inline Tensor square(const Tensor& a) {
    Tensor r = detail::map_unary(a, [](double x) { return x * x; });
    if (Graph* g = detail::recording_graph({&a}))
        return g->record(OpKind::Square, std::move(r), {a}, [a](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{mul(go, mul_scalar(a, 2.0))};
        });
    return r;
}

inline Tensor exp(const Tensor& a) {
    Tensor r = detail::map_unary(a, [](double x) { return std::exp(x); });
    if (Graph* g = detail::recording_graph({&a}))
        return g->record(OpKind::Exp, std::move(r), {a},
                         [](const Tensor& go, const Tensor& out, NeedMask) { return std::vector<Tensor>{mul(go, out)}; });
    return r;
}

/// Natural log; log(0) is -inf.
inline Tensor log(const Tensor& a) {
    Tensor r = detail::map_unary(a, [](double x) { return std::log(x); });
    if (Graph* g = detail::recording_graph({&a}))
        return g->record(OpKind::Log, std::move(r), {a},
                         [a](const Tensor& go, const Tensor&, NeedMask) { return std::vector<Tensor>{div(go, a)}; });
    return r;
}

/// max(a, c) elementwise. At a == c the gradient goes to the constant.
inline Tensor max_scalar(const Tensor& a, double c) {
    Tensor r = detail::map_unary(a, [c](double x) { return x > c ? x : c; });
    if (Graph* g = detail::recording_graph({&a})) {
        Tensor mask = detail::map_unary(a, [c](double x) { return x > c ? 1.0 : 0.0; });
        return g->record(OpKind::MaxScalar, std::move(r), {a}, [mask](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{mul(go, mask)};
        });
    }
    return r;
}

inline Tensor relu(const Tensor& a) { return max_scalar(a, 0.0); }

inline Tensor add_scalar(const Tensor& a, double c) {
    Tensor r = detail::map_unary(a, [c](double x) { return x + c; });
    if (Graph* g = detail::recording_graph({&a}))
        return g->record(OpKind::AddScalar, std::move(r), {a},
                         [](const Tensor& go, const Tensor&, NeedMask) { return std::vector<Tensor>{go}; });
    return r;
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    Tensor r = detail::map_unary(a, [c](double x) { return x * c; });
    if (Graph* g = detail::recording_graph({&a}))
        return g->record(OpKind::MulScalar, std::move(r), {a}, [c](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{mul_scalar(go, c)};
        });
    return r;
}

/// 1/a where a != 0, else 0.
inline Tensor recip_safe(const Tensor& a) {
    Tensor r = detail::map_unary(a, [](double x) { return x != 0.0 ? 1.0 / x : 0.0; });
    if (Graph* g = detail::recording_graph({&a}))
        return g->record(OpKind::RecipSafe, std::move(r), {a}, [](const Tensor& go, const Tensor& out, NeedMask) {
            return std::vector<Tensor>{neg(mul(go, square(out)))};
        });
    return r;
}

// ---------------------------------------------------------------------------
// Reductions and broadcasting

/// Sums over `axes`, keeping them as size-1 dimensions.
inline Tensor sum(const Tensor& a, const std::vector<std::size_t>& axes) {
    Shape out_shape = a.shape();
    for (auto ax : axes) {
        if (ax >= a.dim())
            throw ShapeError("sum: axis " + std::to_string(ax) + " out of range for " + shape_str(a.shape()));
        out_shape[ax] = 1;
    }
    auto strides = detail::strides_of(out_shape);
    for (std::size_t d = 0; d < out_shape.size(); ++d)
        if (out_shape[d] == 1) strides[d] = 0;
    std::vector<double> out(shape_numel(out_shape), 0.0);
    auto in = a.data();
    detail::walk(a.shape(), strides, [&](std::size_t i, std::size_t j) { out[j] += in[i]; });
    Tensor r(out_shape, std::move(out));
    if (Graph* g = detail::recording_graph({&a})) {
        Shape full = a.shape();
        return g->record(OpKind::Sum, std::move(r), {a}, [full](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{expand(go, full)};
        });
    }
    return r;
}

/// Broadcasts size-1 dimensions of `a` up to `shape` (same rank required).
inline Tensor expand(const Tensor& a, const Shape& shape) {
    if (a.dim() != shape.size())
        throw ShapeError("expand: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(shape));
    std::vector<std::size_t> reduced;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (a.size(d) == shape[d]) continue;
        if (a.size(d) != 1) throw ShapeError("expand: cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
        reduced.push_back(d);
    }
    auto strides = detail::strides_of(a.shape());
    for (auto d : reduced) strides[d] = 0;
    std::vector<double> out(shape_numel(shape));
    auto in = a.data();
    detail::walk(shape, strides, [&](std::size_t i, std::size_t j) { out[i] = in[j]; });
    Tensor r(shape, std::move(out));
    if (Graph* g = detail::recording_graph({&a}))
        return g->record(OpKind::Expand, std::move(r), {a}, [reduced](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{reduced.empty() ? go : sum(go, reduced)};
        });
    return r;
}

/// Sum of all elements as a scalar.
inline Tensor sum_all(const Tensor& a) {
    std::vector<std::size_t> axes(a.dim());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    return reshape(sum(a, axes), {});
}

inline Tensor mean_all(const Tensor& a) { return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

/// Mean over `axes`, keeping them as size-1 dimensions.
inline Tensor mean(const Tensor& a, const std::vector<std::size_t>& axes) {
    double count = 1;
    for (auto ax : axes) count *= static_cast<double>(a.shape().at(ax));
    return mul_scalar(sum(a, axes), 1.0 / count);
}

/// Euclidean norm of the flattened tensor (derivative 0 at the origin).
inline Tensor l2_norm(const Tensor& a) { return sqrt(sum_all(square(a))); }

/// Adds `v` of shape [C] along axis 1 of `a` ([K, C, ...]).
inline Tensor add_channel(const Tensor& a, const Tensor& v) {
    if (a.dim() < 2 || v.dim() != 1 || v.size(0) != a.size(1))
        throw ShapeError("add_channel: cannot broadcast " + shape_str(v.shape()) + " over axis 1 of " + shape_str(a.shape()));
    Shape s(a.dim(), 1);
    s[1] = v.size(0);
    return add(a, expand(reshape(v, s), a.shape()));
}

/// Per-channel affine map a * scale[c] + shift[c] along axis 1.
inline Tensor channel_affine(const Tensor& a, const Tensor& scale, const Tensor& shift) {
    if (a.dim() < 2 || scale.dim() != 1 || scale.size(0) != a.size(1))
        throw ShapeError("channel_affine: cannot broadcast " + shape_str(scale.shape()) + " over axis 1 of " +
                         shape_str(a.shape()));
    Shape s(a.dim(), 1);
    s[1] = scale.size(0);
    return add_channel(mul(a, expand(reshape(scale, s), a.shape())), shift);
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor transpose(const Tensor& a) {
    detail::require_rank("transpose", a, 2);
    const std::size_t m = a.size(0), n = a.size(1);
    std::vector<double> out(a.numel());
    auto in = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
    Tensor r({n, m}, std::move(out));
    if (Graph* g = detail::recording_graph({&a}))
        return g->record(OpKind::Transpose, std::move(r), {a},
                         [](const Tensor& go, const Tensor&, NeedMask) { return std::vector<Tensor>{transpose(go)}; });
    return r;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    if (a.size(1) != b.size(0))
        throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
    std::vector<double> out(m * n, 0.0);
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double v = x[i * k + p];
            if (v == 0.0) continue;
            double* row = &out[i * n];
            const double* yrow = &y[p * n];
            for (std::size_t j = 0; j < n; ++j) row[j] += v * yrow[j];
        }
    Tensor r({m, n}, std::move(out));
    if (Graph* g = detail::recording_graph({&a, &b}))
        return g->record(OpKind::MatMul, std::move(r), {a, b}, [a, b](const Tensor& go, const Tensor&, NeedMask need) {
            return std::vector<Tensor>{needs(need, 0) ? matmul(go, transpose(b)) : Tensor(),
                                       needs(need, 1) ? matmul(transpose(a), go) : Tensor()};
        });
    return r;
}

// ---------------------------------------------------------------------------
// 2-D cross-correlation over [N, C, H, W] inputs and [O, C, kH, kW] kernels.
//
// conv2d, conv2d_input_grad and conv2d_weight_grad are mutually adjoint, so
// each one's backward is written with the other two and the set is closed
// under differentiation.

struct Conv2dParams {
    std::size_t stride = 1;
    std::size_t pad = 0;
};

namespace detail {

struct ConvGeometry {
    std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
};

inline ConvGeometry conv_geometry(const char* op, const Shape& x, const Shape& k, Conv2dParams p) {
    if (x.size() != 4 || k.size() != 4)
        throw ShapeError(std::string(op) + ": expected rank-4 input and kernel, got " + shape_str(x) + " and " + shape_str(k));
    if (x[1] != k[1])
        throw ShapeError(std::string(op) + ": channel mismatch " + shape_str(x) + " vs " + shape_str(k));
    if (p.stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
    if (x[2] + 2 * p.pad < k[2] || x[3] + 2 * p.pad < k[3])
        throw ShapeError(std::string(op) + ": kernel " + shape_str(k) + " larger than padded input " + shape_str(x));
    ConvGeometry gm{x[0], x[1], x[2], x[3], k[0], k[2], k[3], 0, 0, p.stride, p.pad};
    gm.oh = (gm.h + 2 * gm.pad - gm.kh) / gm.stride + 1;
    gm.ow = (gm.w + 2 * gm.pad - gm.kw) / gm.stride + 1;
    return gm;
}

/// Output index range [lo, hi) whose input coordinate o*stride + k - pad lies in [0, size).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t pad, std::size_t stride, std::size_t size,
                                                       std::size_t out) {
    const long kk = static_cast<long>(k), pp = static_cast<long>(pad), ss = static_cast<long>(stride);
    long lo = 0;
    if (pp > kk) lo = (pp - kk + ss - 1) / ss;
    long hi = (static_cast<long>(size) + pp - kk - 1);
    hi = hi < 0 ? 0 : hi / ss + 1;
    hi = std::min<long>(hi, static_cast<long>(out));
    if (lo > hi) lo = hi;
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// Visits every (input offset, output offset, kernel offset) triple of a cross-correlation.
template <class F>
void conv_visit(const ConvGeometry& g, F&& f) {
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t o = 0; o < g.o; ++o)
            for (std::size_t c = 0; c < g.c; ++c)
                for (std::size_t ki = 0; ki < g.kh; ++ki) {
                    auto [ylo, yhi] = valid_range(ki, g.pad, g.stride, g.h, g.oh);
                    for (std::size_t kj = 0; kj < g.kw; ++kj) {
                        auto [xlo, xhi] = valid_range(kj, g.pad, g.stride, g.w, g.ow);
                        const std::size_t widx = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
                        for (std::size_t oy = ylo; oy < yhi; ++oy) {
                            const std::size_t iy = oy * g.stride + ki - g.pad;
                            const std::size_t xrow = ((n * g.c + c) * g.h + iy) * g.w;
                            const std::size_t yrow = ((n * g.o + o) * g.oh + oy) * g.ow;
                            f(widx, xrow + xlo * g.stride + kj - g.pad, yrow + xlo, xhi - xlo);
                        }
                    }
                }
}

}  // namespace detail

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dParams p = {});
Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& input_shape, Conv2dParams p);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& kernel_shape, Conv2dParams p);

inline Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dParams p) {
    const auto g = detail::conv_geometry("conv2d", x.shape(), w.shape(), p);
    std::vector<double> out(g.n * g.o * g.oh * g.ow, 0.0);
    auto xd = x.data();
    auto wd = w.data();
    const std::size_t s = g.stride;
    detail::conv_visit(g, [&](std::size_t wi, std::size_t xo, std::size_t yo, std::size_t len) {
        const double wv = wd[wi];
        for (std::size_t t = 0; t < len; ++t) out[yo + t] += wv * xd[xo + t * s];
    });
    Tensor r({g.n, g.o, g.oh, g.ow}, std::move(out));
    if (Graph* gr = detail::recording_graph({&x, &w}))
        return gr->record(OpKind::Conv2d, std::move(r), {x, w}, [x, w, p](const Tensor& go, const Tensor&, NeedMask need) {
            return std::vector<Tensor>{needs(need, 0) ? conv2d_input_grad(go, w, x.shape(), p) : Tensor(),
                                       needs(need, 1) ? conv2d_weight_grad(x, go, w.shape(), p) : Tensor()};
        });
    return r;
}

/// Adjoint of conv2d with respect to its input.
inline Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& input_shape, Conv2dParams p) {
    const auto g = detail::conv_geometry("conv2d_input_grad", input_shape, w.shape(), p);
    if (gy.shape() != Shape{g.n, g.o, g.oh, g.ow})
        throw ShapeError("conv2d_input_grad: output gradient " + shape_str(gy.shape()) + " does not match " +
                         shape_str({g.n, g.o, g.oh, g.ow}));
    std::vector<double> out(shape_numel(input_shape), 0.0);
    auto gd = gy.data();
    auto wd = w.data();
    const std::size_t s = g.stride;
    detail::conv_visit(g, [&](std::size_t wi, std::size_t xo, std::size_t yo, std::size_t len) {
        const double wv = wd[wi];
        for (std::size_t t = 0; t < len; ++t) out[xo + t * s] += wv * gd[yo + t];
    });
    Tensor r(input_shape, std::move(out));
    if (Graph* gr = detail::recording_graph({&gy, &w}))
        return gr->record(OpKind::Conv2dInputGrad, std::move(r), {gy, w},
                          [gy, w, p](const Tensor& go, const Tensor&, NeedMask need) {
                              return std::vector<Tensor>{needs(need, 0) ? conv2d(go, w, p) : Tensor(),
                                                         needs(need, 1) ? conv2d_weight_grad(go, gy, w.shape(), p) : Tensor()};
                          });
    return r;
}

/// Adjoint of conv2d with respect to its kernel.
inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& kernel_shape, Conv2dParams p) {
    const auto g = detail::conv_geometry("conv2d_weight_grad", x.shape(), kernel_shape, p);
    if (gy.shape() != Shape{g.n, g.o, g.oh, g.ow})
        throw ShapeError("conv2d_weight_grad: output gradient " + shape_str(gy.shape()) + " does not match " +
                         shape_str({g.n, g.o, g.oh, g.ow}));
    std::vector<double> out(shape_numel(kernel_shape), 0.0);
    auto xd = x.data();
    auto gd = gy.data();
    const std::size_t s = g.stride;
    detail::conv_visit(g, [&](std::size_t wi, std::size_t xo, std::size_t yo, std::size_t len) {
        double acc = 0.0;
        for (std::size_t t = 0; t < len; ++t) acc += gd[yo + t] * xd[xo + t * s];
        out[wi] += acc;
    });
    Tensor r(kernel_shape, std::move(out));
    if (Graph* gr = detail::recording_graph({&x, &gy}))
        return gr->record(OpKind::Conv2dWeightGrad, std::move(r), {x, gy},
                          [x, gy, p](const Tensor& go, const Tensor&, NeedMask need) {
                              return std::vector<Tensor>{needs(need, 0) ? conv2d_input_grad(gy, go, x.shape(), p) : Tensor(),
                                                         needs(need, 1) ? conv2d(x, go, p) : Tensor()};
                          });
    return r;
}

// ---------------------------------------------------------------------------
// Pooling (window k, stride k; trailing rows/columns that do not fill a window are dropped)

Tensor avg_pool2d_adjoint(const Tensor& g, std::size_t k, const Shape& input_shape);

inline Tensor avg_pool2d(const Tensor& x, std::size_t k) {
    detail::require_rank("avg_pool2d", x, 4);
    if (k == 0 || x.size(2) < k || x.size(3) < k)
        throw ShapeError("avg_pool2d: window " + std::to_string(k) + " does not fit " + shape_str(x.shape()));
    const std::size_t nc = x.size(0) * x.size(1), h = x.size(2), w = x.size(3), oh = h / k, ow = w / k;
    std::vector<double> out(nc * oh * ow, 0.0);
    auto in = x.data();
    const double scale = 1.0 / static_cast<double>(k * k);
    for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t iy = 0; iy < oh * k; ++iy)
            for (std::size_t ix = 0; ix < ow * k; ++ix)
                out[(p * oh + iy / k) * ow + ix / k] += in[(p * h + iy) * w + ix] * scale;
    Tensor r({x.size(0), x.size(1), oh, ow}, std::move(out));
    if (Graph* g = detail::recording_graph({&x})) {
        Shape in_shape = x.shape();
        return g->record(OpKind::AvgPool, std::move(r), {x}, [k, in_shape](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{avg_pool2d_adjoint(go, k, in_shape)};
        });
    }
    return r;
}

inline Tensor avg_pool2d_adjoint(const Tensor& gy, std::size_t k, const Shape& input_shape) {
    const std::size_t nc = input_shape[0] * input_shape[1], h = input_shape[2], w = input_shape[3], oh = h / k, ow = w / k;
    if (gy.shape() != Shape{input_shape[0], input_shape[1], oh, ow})
        throw ShapeError("avg_pool2d_adjoint: gradient " + shape_str(gy.shape()) + " does not match input " +
                         shape_str(input_shape));
    std::vector<double> out(shape_numel(input_shape), 0.0);
    auto in = gy.data();
    const double scale = 1.0 / static_cast<double>(k * k);
    for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t iy = 0; iy < oh * k; ++iy)
            for (std::size_t ix = 0; ix < ow * k; ++ix)
                out[(p * h + iy) * w + ix] = in[(p * oh + iy / k) * ow + ix / k] * scale;
    Tensor r(input_shape, std::move(out));
    if (Graph* g = detail::recording_graph({&gy}))
        return g->record(OpKind::AvgPoolAdjoint, std::move(r), {gy}, [k](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{avg_pool2d(go, k)};
        });
    return r;
}

using IndexMap = std::shared_ptr<const std::vector<std::size_t>>;

Tensor scatter_add(const Tensor& src, const IndexMap& index, const Shape& shape);

/// out[i] = src[index[i]].
inline Tensor gather(const Tensor& src, const IndexMap& index, const Shape& shape) {
    if (shape_numel(shape) != index->size())
        throw ShapeError("gather: index map of size " + std::to_string(index->size()) + " does not fill " + shape_str(shape));
    std::vector<double> out(index->size());
    auto in = src.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*index)[i]];
    Tensor r(shape, std::move(out));
    if (Graph* g = detail::recording_graph({&src})) {
        Shape src_shape = src.shape();
        return g->record(OpKind::Gather, std::move(r), {src}, [index, src_shape](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{scatter_add(go, index, src_shape)};
        });
    }
    return r;
}

/// out[index[i]] += src[i].
inline Tensor scatter_add(const Tensor& src, const IndexMap& index, const Shape& shape) {
    if (src.numel() != index->size())
        throw ShapeError("scatter_add: source " + shape_str(src.shape()) + " does not match index map of size " +
                         std::to_string(index->size()));
    std::vector<double> out(shape_numel(shape), 0.0);
    auto in = src.data();
    for (std::size_t i = 0; i < in.size(); ++i) out[(*index)[i]] += in[i];
    Tensor r(shape, std::move(out));
    if (Graph* g = detail::recording_graph({&src})) {
        Shape src_shape = src.shape();
        return g->record(OpKind::ScatterAdd, std::move(r), {src}, [index, src_shape](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{gather(go, index, src_shape)};
        });
    }
    return r;
}

/// Max over k x k windows. Ties route the gradient to the first maximal element in row-major window order.
inline Tensor max_pool2d(const Tensor& x, std::size_t k) {
    detail::require_rank("max_pool2d", x, 4);
    if (k == 0 || x.size(2) < k || x.size(3) < k)
        throw ShapeError("max_pool2d: window " + std::to_string(k) + " does not fit " + shape_str(x.shape()));
    const std::size_t nc = x.size(0) * x.size(1), h = x.size(2), w = x.size(3), oh = h / k, ow = w / k;
    auto index = std::make_shared<std::vector<std::size_t>>(nc * oh * ow);
    std::vector<double> out(nc * oh * ow);
    auto in = x.data();
    for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (p * h + oy * k) * w + ox * k;
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t at = (p * h + oy * k + dy) * w + ox * k + dx;
                        if (in[at] > in[best]) best = at;
                    }
                const std::size_t o = (p * oh + oy) * ow + ox;
                (*index)[o] = best;
                out[o] = in[best];
            }
    Tensor r({x.size(0), x.size(1), oh, ow}, std::move(out));
    if (Graph* g = detail::recording_graph({&x})) {
        IndexMap map = index;
        Shape in_shape = x.shape();
        return g->record(OpKind::MaxPool, std::move(r), {x}, [map, in_shape](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{scatter_add(go, map, in_shape)};
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor r(shape, a.to_vector());
    if (Graph* g = detail::recording_graph({&a})) {
        Shape from = a.shape();
        return g->record(OpKind::Reshape, std::move(r), {a}, [from](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{reshape(go, from)};
        });
    }
    return r;
}

namespace detail {
inline std::pair<std::size_t, std::size_t> outer_inner(const Shape& s, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    return {outer, inner};
}
}  // namespace detail

/// Elements [start, start + length) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    if (axis >= a.dim() || length == 0 || start + length > a.size(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") on axis " +
                         std::to_string(axis) + " out of bounds for " + shape_str(a.shape()));
    auto [outer, inner] = detail::outer_inner(a.shape(), axis);
    const std::size_t n = a.size(axis);
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    std::vector<double> out(outer * length * inner);
    auto in = a.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(&in[(o * n + start) * inner], length * inner, &out[o * length * inner]);
    Tensor r(out_shape, std::move(out));
    if (Graph* g = detail::recording_graph({&a})) {
        Shape full = a.shape();
        return g->record(OpKind::Slice, std::move(r), {a}, [axis, start, full](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{slice_adjoint(go, axis, start, full)};
        });
    }
    return r;
}

/// Embeds `g` at offset `start` along `axis` of a zero tensor of shape `full`.
inline Tensor slice_adjoint(const Tensor& gs, std::size_t axis, std::size_t start, const Shape& full) {
    if (gs.dim() != full.size() || axis >= full.size() || start + gs.size(axis) > full[axis])
        throw ShapeError("slice_adjoint: cannot embed " + shape_str(gs.shape()) + " into " + shape_str(full));
    auto [outer, inner] = detail::outer_inner(full, axis);
    const std::size_t n = full[axis], length = gs.size(axis);
    std::vector<double> out(shape_numel(full), 0.0);
    auto in = gs.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(&in[o * length * inner], length * inner, &out[(o * n + start) * inner]);
    Tensor r(full, std::move(out));
    if (Graph* g = detail::recording_graph({&gs}))
        return g->record(OpKind::SliceAdjoint, std::move(r), {gs}, [axis, start, length](const Tensor& go, const Tensor&, NeedMask) {
            return std::vector<Tensor>{slice(go, axis, start, length)};
        });
    return r;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    if (parts.size() > 32) throw ShapeError("concat: at most 32 inputs");
    Shape out_shape = parts[0].shape();
    if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range for " + shape_str(out_shape));
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = parts[0].shape();
        if (a.size() != b.size()) throw ShapeError("concat: shape mismatch " + shape_str(b) + " vs " + shape_str(a));
        a[axis] = b[axis] = 0;
        if (a != b) throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        out_shape[axis] += p.size(axis);
    }
    auto [outer, inner] = detail::outer_inner(out_shape, axis);
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    std::vector<std::size_t> starts;
    for (const auto& p : parts) {
        starts.push_back(offset);
        const std::size_t len = p.size(axis);
        auto in = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(&in[o * len * inner], len * inner, &out[(o * out_shape[axis] + offset) * inner]);
        offset += len;
    }
    Tensor r(out_shape, std::move(out));
    if (Graph* g = detail::recording_graph(parts)) {
        std::vector<std::size_t> lengths;
        for (const auto& p : parts) lengths.push_back(p.size(axis));
        return g->record(OpKind::Concat, std::move(r), parts, [axis, starts, lengths](const Tensor& go, const Tensor&, NeedMask need) {
            std::vector<Tensor> grads(starts.size());
            for (std::size_t i = 0; i < starts.size(); ++i)
                if (needs(need, i)) grads[i] = slice(go, axis, starts[i], lengths[i]);
            return grads;
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// Operators

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }

}  // namespace ginv
