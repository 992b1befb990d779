#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ginv/autodiff.hpp"
#include "ginv/rng.hpp"

namespace ginv {

/// Invalid model description or layer chain.
class SpecError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace layer {
struct Conv {
    std::size_t in_ch, out_ch, kernel, stride = 1, pad = 0;
};
struct BatchNorm {
    std::size_t channels;
    double eps = 1e-5;
};
struct ReLU {};
struct AvgPool {
    std::size_t k;
};
struct MaxPool {
    std::size_t k;
};
struct Flatten {};
struct Linear {
    std::size_t in_features, out_features;
};
}  // namespace layer

using Layer = std::variant<layer::Conv, layer::BatchNorm, layer::ReLU, layer::AvgPool, layer::MaxPool, layer::Flatten,
                           layer::Linear>;

/// Declarative network: input geometry, class count and an ordered layer list.
struct ModelSpec {
    std::size_t channels = 1, height = 16, width = 16;
    std::size_t classes = 10;
    std::vector<Layer> layers;

    Shape input_shape(std::size_t batch) const { return {batch, channels, height, width}; }

    /// Checks that shapes chain, the last layer is Linear producing `classes`
    /// logits and that its input passes through a ReLU (possibly followed by
    /// pooling/flatten), so the features feeding it are non-negative.
    void validate() const;

    /// Number of features entering the final Linear layer.
    std::size_t feature_count() const;

    /// Whether the Conv at `index` carries a bias (it does unless BatchNorm follows).
    bool conv_has_bias(std::size_t index) const {
        return !(index + 1 < layers.size() && std::holds_alternative<layer::BatchNorm>(layers[index + 1]));
    }

    std::string to_text() const;
    static ModelSpec from_text(std::string_view text);

    bool operator==(const ModelSpec& other) const { return to_text() == other.to_text(); }
};

namespace detail {
struct ChainState {
    bool flat = false;
    std::size_t c = 0, h = 0, w = 0, features = 0;
};
}  // namespace detail

inline void ModelSpec::validate() const {
    if (channels == 0 || height == 0 || width == 0) throw SpecError("model spec: empty input shape");
    if (classes < 2) throw SpecError("model spec: need at least two classes");
    if (layers.empty()) throw SpecError("model spec: no layers");
    detail::ChainState st{false, channels, height, width, 0};
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string where = "model spec: layer " + std::to_string(i) + ": ";
        std::visit(
            [&](const auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, layer::Conv>) {
                    if (st.flat) throw SpecError(where + "conv after flatten");
                    if (l.in_ch != st.c)
                        throw SpecError(where + "conv expects " + std::to_string(l.in_ch) + " channels, got " + std::to_string(st.c));
                    if (l.kernel == 0 || l.stride == 0 || l.out_ch == 0) throw SpecError(where + "conv has a zero size");
                    if (st.h + 2 * l.pad < l.kernel || st.w + 2 * l.pad < l.kernel) throw SpecError(where + "kernel larger than input");
                    st.h = (st.h + 2 * l.pad - l.kernel) / l.stride + 1;
                    st.w = (st.w + 2 * l.pad - l.kernel) / l.stride + 1;
                    st.c = l.out_ch;
                } else if constexpr (std::is_same_v<T, layer::BatchNorm>) {
                    const std::size_t have = st.flat ? st.features : st.c;
                    if (l.channels != have)
                        throw SpecError(where + "batch norm over " + std::to_string(l.channels) + " channels, got " + std::to_string(have));
                    if (!(l.eps > 0)) throw SpecError(where + "batch norm eps must be positive");
                } else if constexpr (std::is_same_v<T, layer::AvgPool> || std::is_same_v<T, layer::MaxPool>) {
                    if (st.flat) throw SpecError(where + "pooling after flatten");
                    if (l.k == 0 || l.k > st.h || l.k > st.w) throw SpecError(where + "pool window does not fit");
                    st.h /= l.k;
                    st.w /= l.k;
                } else if constexpr (std::is_same_v<T, layer::Flatten>) {
                    if (!st.flat) {
                        st.features = st.c * st.h * st.w;
                        st.flat = true;
                    }
                } else if constexpr (std::is_same_v<T, layer::Linear>) {
                    if (!st.flat) throw SpecError(where + "linear before flatten");
                    if (l.in_features != st.features)
                        throw SpecError(where + "linear expects " + std::to_string(l.in_features) + " features, got " +
                                        std::to_string(st.features));
                    if (l.out_features == 0) throw SpecError(where + "linear has no outputs");
                    st.features = l.out_features;
                }
            },
            layers[i]);
    }
    const auto* last = std::get_if<layer::Linear>(&layers.back());
    if (!last) throw SpecError("model spec: final layer must be linear");
    if (last->out_features != classes)
        throw SpecError("model spec: final layer produces " + std::to_string(last->out_features) + " logits for " +
                        std::to_string(classes) + " classes");
    std::size_t j = layers.size() - 1;
    while (j > 0) {
        --j;
        const auto& l = layers[j];
        if (std::holds_alternative<layer::Flatten>(l) || std::holds_alternative<layer::AvgPool>(l) ||
            std::holds_alternative<layer::MaxPool>(l))
            continue;
        if (std::holds_alternative<layer::ReLU>(l)) return;
        break;
    }
    throw SpecError("model spec: features feeding the final linear layer must pass through a ReLU");
}

inline std::size_t ModelSpec::feature_count() const {
    return std::get<layer::Linear>(layers.back()).in_features;
}

inline std::string ModelSpec::to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "input " << channels << ' ' << height << ' ' << width << '\n';
    os << "classes " << classes << '\n';
    for (const auto& l : layers) {
        std::visit(
            [&](const auto& v) {
                using T = std::decay_t<decltype(v)>;
                if constexpr (std::is_same_v<T, layer::Conv>)
                    os << "conv " << v.in_ch << ' ' << v.out_ch << ' ' << v.kernel << ' ' << v.stride << ' ' << v.pad;
                else if constexpr (std::is_same_v<T, layer::BatchNorm>)
                    os << "batchnorm " << v.channels << ' ' << v.eps;
                else if constexpr (std::is_same_v<T, layer::ReLU>)
                    os << "relu";
                else if constexpr (std::is_same_v<T, layer::AvgPool>)
                    os << "avgpool " << v.k;
                else if constexpr (std::is_same_v<T, layer::MaxPool>)
                    os << "maxpool " << v.k;
                else if constexpr (std::is_same_v<T, layer::Flatten>)
                    os << "flatten";
                else if constexpr (std::is_same_v<T, layer::Linear>)
                    os << "linear " << v.in_features << ' ' << v.out_features;
            },
            l);
        os << '\n';
    }
    return os.str();
}

inline ModelSpec ModelSpec::from_text(std::string_view text) {
    ModelSpec spec;
    spec.layers.clear();
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    bool have_input = false;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string kind;
        if (!(ls >> kind)) continue;
        auto fail = [&] { return SpecError("model spec line " + std::to_string(lineno) + ": cannot parse '" + line + "'"); };
        bool ok = true;
        if (kind == "input") {
            ok = static_cast<bool>(ls >> spec.channels >> spec.height >> spec.width);
            have_input = true;
        } else if (kind == "classes") {
            ok = static_cast<bool>(ls >> spec.classes);
        } else if (kind == "conv") {
            layer::Conv c{};
            ok = static_cast<bool>(ls >> c.in_ch >> c.out_ch >> c.kernel >> c.stride >> c.pad);
            spec.layers.push_back(c);
        } else if (kind == "batchnorm") {
            layer::BatchNorm b{};
            ok = static_cast<bool>(ls >> b.channels >> b.eps);
            spec.layers.push_back(b);
        } else if (kind == "relu") {
            spec.layers.push_back(layer::ReLU{});
        } else if (kind == "avgpool") {
            layer::AvgPool p{};
            ok = static_cast<bool>(ls >> p.k);
            spec.layers.push_back(p);
        } else if (kind == "maxpool") {
            layer::MaxPool p{};
            ok = static_cast<bool>(ls >> p.k);
            spec.layers.push_back(p);
        } else if (kind == "flatten") {
            spec.layers.push_back(layer::Flatten{});
        } else if (kind == "linear") {
            layer::Linear l{};
            ok = static_cast<bool>(ls >> l.in_features >> l.out_features);
            spec.layers.push_back(l);
        } else {
            throw SpecError("model spec line " + std::to_string(lineno) + ": unknown layer '" + kind + "'");
        }
        if (!ok) throw fail();
    }
    if (!have_input) throw SpecError("model spec: missing input line");
    spec.validate();
    return spec;
}

/// Conv(3x3) -> BN -> ReLU -> AvgPool(2) -> Flatten -> Linear.
inline ModelSpec preset_tinier(std::size_t channels = 1, std::size_t height = 16, std::size_t width = 16,
                               std::size_t classes = 10, std::size_t filters = 8) {
    ModelSpec s{channels, height, width, classes, {}};
    s.layers = {layer::Conv{channels, filters, 3, 1, 1},
                layer::BatchNorm{filters},
                layer::ReLU{},
                layer::AvgPool{2},
                layer::Flatten{},
                layer::Linear{filters * (height / 2) * (width / 2), classes}};
    s.validate();
    return s;
}

/// Two Conv(3x3) -> BN -> ReLU -> AvgPool(2) blocks, then Flatten -> Linear.
inline ModelSpec preset_tiny(std::size_t channels = 1, std::size_t height = 16, std::size_t width = 16,
                             std::size_t classes = 10, std::size_t filters = 8) {
    ModelSpec s{channels, height, width, classes, {}};
    s.layers = {layer::Conv{channels, filters, 3, 1, 1},
                layer::BatchNorm{filters},
                layer::ReLU{},
                layer::AvgPool{2},
                layer::Conv{filters, 2 * filters, 3, 1, 1},
                layer::BatchNorm{2 * filters},
                layer::ReLU{},
                layer::AvgPool{2},
                layer::Flatten{},
                layer::Linear{2 * filters * (height / 4) * (width / 4), classes}};
    s.validate();
    return s;
}

inline ModelSpec preset(std::string_view name, std::size_t channels = 1, std::size_t height = 16, std::size_t width = 16,
                        std::size_t classes = 10) {
    if (name == "tiny") return preset_tiny(channels, height, width, classes);
    if (name == "tinier") return preset_tinier(channels, height, width, classes);
    throw SpecError("unknown model preset '" + std::string(name) + "' (expected tiny or tinier)");
}

/// Per-channel mean and variance of a BatchNorm layer's input.
struct BnStats {
    Tensor mean;
    Tensor var;
};

/// Instantiated network. Parameters are named "layer<i>.<role>" where role is
/// weight/bias for Conv and Linear and gamma/beta for BatchNorm. Linear
/// weights are stored features x outputs (M x N).
struct Model {
    ModelSpec spec;
    std::vector<NamedTensor> params;
    std::vector<BnStats> bn_running;

    std::vector<Tensor> param_values() const {
        std::vector<Tensor> v;
        v.reserve(params.size());
        for (const auto& p : params) v.push_back(p.value);
        return v;
    }

    std::size_t param_index(std::string_view name) const {
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].name == name) return i;
        throw std::out_of_range("model has no parameter '" + std::string(name) + "'");
    }

    const Tensor& param(std::string_view name) const { return params[param_index(name)].value; }

    /// Name of the final Linear layer's weight.
    std::string fc_weight_name() const { return "layer" + std::to_string(spec.layers.size() - 1) + ".weight"; }
    std::string fc_bias_name() const { return "layer" + std::to_string(spec.layers.size() - 1) + ".bias"; }
};

/// Kaiming fan-in Gaussian weights, zero biases, BN gamma 1 / beta 0, running stats (0, 1).
inline Model model_init(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m{spec, {}, {}};
    Rng rng = make_rng(seed, stream::model_init);
    auto gaussian = [&](Shape shape, double stddev) {
        std::normal_distribution<double> n(0.0, stddev);
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = n(rng);
        return Tensor(std::move(shape), std::move(v));
    };
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const std::string prefix = "layer" + std::to_string(i) + ".";
        if (const auto* c = std::get_if<layer::Conv>(&spec.layers[i])) {
            const double fan_in = static_cast<double>(c->in_ch * c->kernel * c->kernel);
            m.params.push_back({prefix + "weight", gaussian({c->out_ch, c->in_ch, c->kernel, c->kernel}, std::sqrt(2.0 / fan_in))});
            if (spec.conv_has_bias(i)) m.params.push_back({prefix + "bias", Tensor::zeros({c->out_ch})});
        } else if (const auto* b = std::get_if<layer::BatchNorm>(&spec.layers[i])) {
            m.params.push_back({prefix + "gamma", Tensor::filled({b->channels}, 1.0)});
            m.params.push_back({prefix + "beta", Tensor::zeros({b->channels})});
            m.bn_running.push_back({Tensor::zeros({b->channels}), Tensor::filled({b->channels}, 1.0)});
        } else if (const auto* l = std::get_if<layer::Linear>(&spec.layers[i])) {
            m.params.push_back({prefix + "weight", gaussian({l->in_features, l->out_features},
                                                            std::sqrt(2.0 / static_cast<double>(l->in_features)))});
            m.params.push_back({prefix + "bias", Tensor::zeros({l->out_features})});
        }
    }
    return m;
}

enum class BnMode { Batch, Running };

/// Per-channel batch normalization over axes {0,2,3} (or {0} for K x F input).
/// Normalizes by the batch statistics, or by `running` when given. The batch
/// mean and population variance are appended to `stats` either way.
inline Tensor batch_norm(const Tensor& h, const Tensor& gamma, const Tensor& beta, double eps, const BnStats* running,
                         std::vector<BnStats>* stats) {
    const std::size_t ch = h.size(1);
    std::vector<std::size_t> axes = h.dim() == 4 ? std::vector<std::size_t>{0, 2, 3} : std::vector<std::size_t>{0};
    Tensor mu = mean(h, axes);
    Tensor centered = sub(h, expand(mu, h.shape()));
    Tensor var = mean(square(centered), axes);
    if (stats) stats->push_back({reshape(mu, {ch}), reshape(var, {ch})});
    Tensor normalized;
    if (!running) {
        normalized = div(centered, expand(sqrt(add_scalar(var, eps)), h.shape()));
    } else {
        Shape s(h.dim(), 1);
        s[1] = ch;
        Tensor rm = expand(reshape(running->mean, s), h.shape());
        Tensor rs = expand(reshape(sqrt(add_scalar(running->var, eps)), s), h.shape());
        normalized = div(sub(h, rm), rs);
    }
    return channel_affine(normalized, gamma, beta);
}

struct ForwardTrace {
    Tensor logits;                // K x N
    Tensor features;              // K x M, input of the final Linear layer
    std::vector<BnStats> bn_batch;  // batch statistics of every BN layer's input (population variance)
};

/// Forward pass with explicit parameter tensors (which may be graph leaves).
inline ForwardTrace model_forward(const Model& model, const Tensor& x, BnMode mode, std::span<const Tensor> params) {
    const auto& spec = model.spec;
    if (x.dim() != 4 || x.size(1) != spec.channels || x.size(2) != spec.height || x.size(3) != spec.width)
        throw ShapeError("model_forward: input " + shape_str(x.shape()) + " does not match " + shape_str(spec.input_shape(0)));
    if (params.size() != model.params.size())
        throw ShapeError("model_forward: expected " + std::to_string(model.params.size()) + " parameter tensors, got " +
                         std::to_string(params.size()));
    ForwardTrace trace;
    Tensor h = x;
    std::size_t pi = 0, bn = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const bool last = i + 1 == spec.layers.size();
        std::visit(
            [&](const auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, layer::Conv>) {
                    h = conv2d(h, params[pi++], {l.stride, l.pad});
                    if (spec.conv_has_bias(i)) h = add_channel(h, params[pi++]);
                } else if constexpr (std::is_same_v<T, layer::BatchNorm>) {
                    const BnStats* running = mode == BnMode::Running ? &model.bn_running.at(bn) : nullptr;
                    h = batch_norm(h, params[pi], params[pi + 1], l.eps, running, &trace.bn_batch);
                    pi += 2;
                    ++bn;
                } else if constexpr (std::is_same_v<T, layer::ReLU>) {
                    h = relu(h);
                } else if constexpr (std::is_same_v<T, layer::AvgPool>) {
                    h = avg_pool2d(h, l.k);
                } else if constexpr (std::is_same_v<T, layer::MaxPool>) {
                    h = max_pool2d(h, l.k);
                } else if constexpr (std::is_same_v<T, layer::Flatten>) {
                    if (h.dim() != 2) h = reshape(h, {h.size(0), h.numel() / h.size(0)});
                } else if constexpr (std::is_same_v<T, layer::Linear>) {
                    if (last) trace.features = h;
                    h = add_channel(matmul(h, params[pi]), params[pi + 1]);
                    pi += 2;
                }
            },
            spec.layers[i]);
    }
    trace.logits = h;
    return trace;
}

inline ForwardTrace model_forward(const Model& model, const Tensor& x, BnMode mode) {
    auto params = model.param_values();
    return model_forward(model, x, mode, params);
}

/// Mean over the batch of -log softmax(z)[y], stabilized by subtracting the row max.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    detail::require_rank("cross_entropy", logits, 2);
    const std::size_t k = logits.size(0), n = logits.size(1);
    if (labels.size() != k)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(k) + " rows");
    std::vector<double> row_max(k), onehot(k * n, 0.0);
    auto z = logits.data();
    for (std::size_t i = 0; i < k; ++i) {
        if (labels[i] >= n)
            throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0, " +
                                    std::to_string(n) + ")");
        row_max[i] = *std::max_element(&z[i * n], &z[i * n] + n);
        onehot[i * n + labels[i]] = 1.0;
    }
    Tensor shifted = sub(logits, expand(Tensor({k, 1}, std::move(row_max)), logits.shape()));
    Tensor lse = log(sum(exp(shifted), {1}));
    Tensor picked = sum(mul(shifted, Tensor({k, n}, std::move(onehot))), {1});
    return mean_all(sub(lse, picked));
}

/// Row-wise softmax (no graph recording needed by callers).
inline Tensor softmax(const Tensor& logits) {
    const std::size_t k = logits.size(0), n = logits.size(1);
    std::vector<double> p(k * n);
    auto z = logits.data();
    for (std::size_t i = 0; i < k; ++i) {
        const double m = *std::max_element(&z[i * n], &z[i * n] + n);
        double total = 0;
        for (std::size_t j = 0; j < n; ++j) total += p[i * n + j] = std::exp(z[i * n + j] - m);
        for (std::size_t j = 0; j < n; ++j) p[i * n + j] /= total;
    }
    return Tensor(logits.shape(), std::move(p));
}

struct TrainOptions {
    std::size_t steps = 200;
    std::size_t batch = 32;
    double lr = 0.05;
    double momentum = 0.9;
    double bn_momentum = 0.1;
    std::uint64_t seed = 0;
};

/// Mini-batch SGD with momentum on cross-entropy; BN running stats are
/// updated from batch statistics with exponential averaging.
inline void sgd_train(Model& model, const Tensor& images, std::span<const std::size_t> labels, const TrainOptions& opt) {
    const std::size_t n = images.size(0);
    if (labels.size() != n) throw ShapeError("sgd_train: image and label counts differ");
    Rng rng = make_rng(opt.seed, stream::training);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    const std::size_t per = images.numel() / n;
    std::vector<std::vector<double>> velocity;
    for (const auto& p : model.params) velocity.emplace_back(p.value.numel(), 0.0);
    auto src = images.data();
    for (std::size_t step = 0; step < opt.steps; ++step) {
        const std::size_t b = std::min(opt.batch, n);
        std::vector<double> xb(b * per);
        std::vector<std::size_t> yb(b);
        for (std::size_t i = 0; i < b; ++i) {
            const std::size_t j = pick(rng);
            std::copy_n(&src[j * per], per, &xb[i * per]);
            yb[i] = labels[j];
        }
        Shape xs = images.shape();
        xs[0] = b;
        GraphScope scope;
        std::vector<Tensor> leaves;
        for (const auto& p : model.params) leaves.push_back(scope->leaf(p.value));
        auto trace = model_forward(model, Tensor(xs, std::move(xb)), BnMode::Batch, leaves);
        auto grads = grad(cross_entropy(trace.logits, yb), leaves);
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            auto w = model.params[i].value.to_vector();
            auto g = grads[i].data();
            for (std::size_t t = 0; t < w.size(); ++t) {
                velocity[i][t] = opt.momentum * velocity[i][t] + g[t];
                w[t] -= opt.lr * velocity[i][t];
            }
            model.params[i].value = Tensor(model.params[i].value.shape(), std::move(w));
        }
        for (std::size_t l = 0; l < model.bn_running.size(); ++l) {
            auto& run = model.bn_running[l];
            auto blend = [&](const Tensor& old, const Tensor& now) {
                std::vector<double> v(old.numel());
                for (std::size_t t = 0; t < v.size(); ++t) v[t] = (1 - opt.bn_momentum) * old[t] + opt.bn_momentum * now[t];
                return Tensor(old.shape(), std::move(v));
            };
            run.mean = blend(run.mean, trace.bn_batch[l].mean.detach());
            run.var = blend(run.var, trace.bn_batch[l].var.detach());
        }
    }
}

/// Fraction of correctly classified images (running-mode BN).
inline double accuracy(const Model& model, const Tensor& images, std::span<const std::size_t> labels) {
    auto logits = model_forward(model, images, BnMode::Running).logits;
    const std::size_t n = logits.size(0), c = logits.size(1);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        auto row = logits.data().subspan(i * c, c);
        hits += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace ginv
