#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ginv/labels.hpp"
#include "ginv/metrics.hpp"
#include "ginv/registration.hpp"
#include "ginv/victim.hpp"

namespace ginv {

enum class BnRegime { Exact, Approx };
enum class GradLoss { L2, Cosine };
enum class ConsensusMode { Registered, Lazy };

/// A loss term became NaN or infinite.
class NumericalError : public std::runtime_error {
public:
    NumericalError(std::string term, const std::string& what) : std::runtime_error(what), term_(std::move(term)) {}
    const std::string& term() const { return term_; }

private:
    std::string term_;
};

struct AttackConfig {
    double alpha_grad = 0.001;
    double alpha_tv = 1e-4;
    double alpha_l2 = 1e-6;
    double alpha_bn = 0.1;
    double alpha_group = 0.01;
    double alpha_noise = 0.2;
    double lr = 0.1;
    std::size_t iterations = 2000;
    std::size_t warmup = 50;
    std::size_t group_size = 1;
    /// First consensus iteration; unset means a quarter of `iterations`.
    std::optional<std::size_t> consensus_start;
    std::size_t consensus_interval = 100;
    ConsensusMode consensus = ConsensusMode::Registered;
    BnRegime bn_regime = BnRegime::Exact;
    GradLoss grad_loss = GradLoss::L2;
    /// Use squared per-parameter norms in the matching loss.
    bool squared_norm = false;
    /// Registration search radius; 0 means ceil(H / 8).
    int registration_radius = 0;
    std::uint64_t seed = 0;

    std::size_t consensus_begin() const { return consensus_start.value_or(iterations / 4); }

    void validate() const {
        for (double a : {alpha_grad, alpha_tv, alpha_l2, alpha_bn, alpha_group, alpha_noise, lr})
            if (!(a >= 0) || !std::isfinite(a)) throw std::invalid_argument("attack config: weights and lr must be finite and >= 0");
        if (iterations == 0) throw std::invalid_argument("attack config: iterations must be positive");
        if (warmup >= iterations) throw std::invalid_argument("attack config: warmup must be smaller than iterations");
        if (group_size == 0) throw std::invalid_argument("attack config: group_size must be at least 1");
        if (consensus_interval == 0) throw std::invalid_argument("attack config: consensus_interval must be positive");
        if (registration_radius < 0) throw std::invalid_argument("attack config: registration_radius must be >= 0");
    }
};

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at `iterations`.
inline double lr_schedule(std::size_t t, const AttackConfig& cfg) {
    const double base = cfg.lr;
    if (t <= cfg.warmup) return cfg.warmup == 0 ? base : base * static_cast<double>(t) / static_cast<double>(cfg.warmup);
    if (t >= cfg.iterations) return 0.0;
    const double p = static_cast<double>(t - cfg.warmup) / static_cast<double>(cfg.iterations - cfg.warmup);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

/// Adam moments over a flat parameter vector.
struct AdamState {
    std::vector<double> m, v;
    std::size_t step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}

    /// Applies x -= lr * m_hat / (sqrt(v_hat) + eps) in place.
    void apply(std::vector<double>& x, std::span<const double> g, double lr) {
        if (g.size() != x.size() || m.size() != x.size()) throw ShapeError("adam: size mismatch");
        ++step;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = beta1 * m[i] + (1 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1 - beta2) * g[i] * g[i];
            x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

// ---------------------------------------------------------------------------
// Loss terms (all recorded on the active graph)

/// Sum over the (H-1) x (W-1) grid of sqrt(dh^2 + dw^2 + eps^2), forward differences.
inline Tensor tv_prior(const Tensor& x, double eps = 1e-8) {
    if (x.dim() != 4 || x.size(2) < 2 || x.size(3) < 2) throw ShapeError("tv_prior: need K x C x H x W with H, W >= 2");
    const std::size_t h = x.size(2), w = x.size(3);
    Tensor base = slice(slice(x, 2, 0, h - 1), 3, 0, w - 1);
    Tensor down = slice(slice(x, 2, 1, h - 1), 3, 0, w - 1);
    Tensor right = slice(slice(x, 2, 0, h - 1), 3, 1, w - 1);
    Tensor dh = sub(down, base), dw = sub(right, base);
    return sum_all(sqrt(add_scalar(add(square(dh), square(dw)), eps * eps)));
}

inline Tensor l2_prior(const Tensor& x) { return l2_norm(x); }

/// Sum over BN layers of ||mu - mu*|| + ||var - var*||.
inline Tensor bn_prior(const std::vector<BnStats>& stats, const std::vector<BnStats>& target) {
    if (stats.size() != target.size())
        throw ShapeError("bn_prior: " + std::to_string(stats.size()) + " BN layers vs " + std::to_string(target.size()) + " targets");
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t l = 0; l < stats.size(); ++l)
        total = add(total, add(l2_norm(sub(stats[l].mean, target[l].mean)), l2_norm(sub(stats[l].var, target[l].var))));
    return total;
}

/// ||x - consensus||; the consensus is a constant.
inline Tensor group_consistency_loss(const Tensor& x, const Tensor& consensus) { return l2_norm(sub(x, consensus.detach())); }

struct MatchResult {
    Tensor loss;  // unweighted
    ForwardTrace trace;
};

/// Distance between the model's parameter gradient at (x, labels) and the bundle
/// gradient. The inner gradient is taken in differentiable mode so the result
/// can be differentiated with respect to x.
inline MatchResult grad_matching_loss(const Tensor& x, std::span<const std::size_t> labels, const GradientBundle& bundle,
                                      GradLoss kind, bool squared = false) {
    const Model& model = bundle.model;
    if (labels.size() != x.size(0))
        throw std::invalid_argument("grad_matching_loss: " + std::to_string(labels.size()) + " labels for a batch of " +
                                    std::to_string(x.size(0)));
    Graph* g = active_graph();
    if (!g) throw std::logic_error("grad_matching_loss: no active graph");
    std::vector<Tensor> leaves;
    for (const auto& p : model.params) leaves.push_back(g->leaf(p.value));
    auto trace = model_forward(model, x, BnMode::Batch, leaves);
    auto grads = grad(cross_entropy(trace.logits, labels), leaves, true);
    Tensor loss = Tensor::scalar(0.0);
    if (kind == GradLoss::L2) {
        for (std::size_t i = 0; i < grads.size(); ++i) {
            Tensor d = sub(grads[i], bundle.gradients[i].value);
            loss = add(loss, squared ? sum_all(square(d)) : l2_norm(d));
        }
    } else {
        Tensor dot = Tensor::scalar(0.0), gg = Tensor::scalar(0.0);
        double tt = 0;
        for (std::size_t i = 0; i < grads.size(); ++i) {
            const Tensor& t = bundle.gradients[i].value;
            dot = add(dot, sum_all(mul(grads[i], t)));
            gg = add(gg, sum_all(square(grads[i])));
            for (double v : t.data()) tt += v * v;
        }
        Tensor denom = mul_scalar(sqrt(gg), std::sqrt(tt));
        loss = add_scalar(neg(mul(dot, recip_safe(denom))), 1.0);
    }
    return {loss, trace};
}

/// Per-term weighted contributions to the objective.
struct LossTerms {
    double grad = 0, tv = 0, l2 = 0, bn = 0, group = 0, total = 0;
};

struct ObjectiveInput {
    const GradientBundle* bundle;
    std::span<const std::size_t> labels;
    const AttackConfig* config;
    const Tensor* consensus = nullptr;  // group term is off when null
};

/// BN targets for a regime: the leaked batch statistics or the model's running statistics.
inline const std::vector<BnStats>& bn_targets(const GradientBundle& bundle, BnRegime regime) {
    if (regime == BnRegime::Exact) {
        if (!bundle.bn_stats) throw std::invalid_argument("BN exact regime needs a bundle carrying batch BN statistics");
        return *bundle.bn_stats;
    }
    return bundle.model.bn_running;
}

/// Full objective at x (a graph node or leaf). Writes weighted terms to `terms`.
inline Tensor objective(const Tensor& x, const ObjectiveInput& in, LossTerms* terms = nullptr) {
    const AttackConfig& cfg = *in.config;
    auto match = grad_matching_loss(x, in.labels, *in.bundle, cfg.grad_loss, cfg.squared_norm);
    Tensor grad_term = mul_scalar(match.loss, cfg.alpha_grad);
    Tensor total = grad_term;
    LossTerms t;
    t.grad = grad_term.item();
    if (cfg.alpha_tv > 0) {
        Tensor v = mul_scalar(tv_prior(x), cfg.alpha_tv);
        t.tv = v.item();
        total = add(total, v);
    }
    if (cfg.alpha_l2 > 0) {
        Tensor v = mul_scalar(l2_prior(x), cfg.alpha_l2);
        t.l2 = v.item();
        total = add(total, v);
    }
    if (cfg.alpha_bn > 0 && !match.trace.bn_batch.empty()) {
        Tensor v = mul_scalar(bn_prior(match.trace.bn_batch, bn_targets(*in.bundle, cfg.bn_regime)), cfg.alpha_bn);
        t.bn = v.item();
        total = add(total, v);
    }
    if (in.consensus && cfg.alpha_group > 0) {
        Tensor v = mul_scalar(group_consistency_loss(x, *in.consensus), cfg.alpha_group);
        t.group = v.item();
        total = add(total, v);
    }
    t.total = total.item();
    if (terms) *terms = t;
    return total;
}

namespace detail {
inline void check_finite(const LossTerms& t, std::size_t iteration, std::size_t seed) {
    const std::pair<const char*, double> named[] = {
        {"L_grad", t.grad}, {"TV", t.tv}, {"l2", t.l2}, {"BN", t.bn}, {"group", t.group}, {"total", t.total}};
    for (const auto& [name, v] : named)
        if (!std::isfinite(v))
            throw NumericalError(name, std::string("non-finite ") + name + " loss at iteration " + std::to_string(iteration) +
                                           " (seed " + std::to_string(seed) + ")");
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Consensus

/// Registered (or lazy) mean of the group's candidates, image by image.
/// Per batch slot, the reference is the candidate whose summed best-shift NCC
/// against all others is highest (lowest index on ties). Every candidate is
/// aligned to it and averaged over the pixels it still covers; pixels that no
/// aligned candidate covers keep the plain pixel mean.
inline Tensor consensus_image(const std::vector<Tensor>& candidates, ConsensusMode mode, int radius = 0) {
    if (candidates.empty()) throw std::invalid_argument("consensus_image: empty group");
    const Shape shape = candidates.front().shape();
    for (const auto& c : candidates)
        if (c.shape() != shape) throw ShapeError("consensus_image: candidate shapes differ");
    const std::size_t n = candidates.front().numel();
    const double g = static_cast<double>(candidates.size());
    std::vector<double> coarse(n, 0.0);
    for (const auto& c : candidates)
        for (std::size_t i = 0; i < n; ++i) coarse[i] += c[i] / g;
    Tensor coarse_t(shape, coarse);
    if (mode == ConsensusMode::Lazy || candidates.size() == 1) return candidates.size() == 1 ? candidates.front().detach() : coarse_t;
    if (radius == 0) radius = default_radius(shape[2]);
    const std::size_t per = n / shape[0];
    std::vector<double> sum(n, 0.0), cover(n, 0.0), mask;
    for (std::size_t k = 0; k < shape[0]; ++k) {
        std::size_t ref = 0;
        double best = -2.0;
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            double s = 0;
            for (std::size_t o = 0; o < candidates.size(); ++o)
                if (o != j) s += register_translation(image_view(candidates[o], k), image_view(candidates[j], k), radius).score;
            if (s > best + 1e-12) {
                best = s;
                ref = j;
            }
        }
        for (const auto& c : candidates) {
            const auto reg = register_translation(image_view(c, k), image_view(candidates[ref], k), radius);
            auto aligned = shift_image(image_view(c, k), -reg.dy, -reg.dx, 0.0, &mask);
            for (std::size_t i = 0; i < per; ++i) {
                sum[k * per + i] += aligned[i];
                cover[k * per + i] += mask[i];
            }
        }
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = cover[i] > 0 ? sum[i] / cover[i] : coarse[i];
    return Tensor(shape, std::move(out));
}

// ---------------------------------------------------------------------------
// Driver

struct LossRecord {
    std::size_t t;
    double lr;
    LossTerms terms;
};

struct AttackResult {
    std::vector<Tensor> candidates;  // final x_g per seed
    Tensor consensus;
    std::vector<std::size_t> labels;
    std::vector<std::vector<LossRecord>> traces;  // per seed
    /// Mean ||x_g - E|| at the first consensus iteration and at the end (NaN if no consensus ran).
    double deviation_at_start = std::numeric_limits<double>::quiet_NaN();
    double deviation_at_end = std::numeric_limits<double>::quiet_NaN();
    double seconds = 0;
    AttackConfig config;
};

namespace detail {

struct Candidate {
    std::vector<double> x;
    AdamState adam;
    Rng noise;
    std::vector<LossRecord> trace;
};

inline double mean_deviation(const std::vector<Candidate>& group, const Tensor& e) {
    double total = 0;
    for (const auto& c : group) {
        double sq = 0;
        for (std::size_t i = 0; i < c.x.size(); ++i) sq += (c.x[i] - e[i]) * (c.x[i] - e[i]);
        total += std::sqrt(sq);
    }
    return total / static_cast<double>(group.size());
}

}  // namespace detail

/// One optimizer step on a candidate: loss, backward to x, Adam, then exploration noise.
inline void inversion_step(detail::Candidate& c, const Shape& shape, std::size_t t, std::size_t seed_index,
                           const ObjectiveInput& in) {
    const AttackConfig& cfg = *in.config;
    const double lr = lr_schedule(t + 1, cfg);
    LossTerms terms;
    std::vector<double> g;
    {
        GraphScope scope;
        Tensor x = scope->leaf(Tensor(shape, c.x));
        Tensor loss = objective(x, in, &terms);
        detail::check_finite(terms, t, seed_index);
        g = grad(loss, x).to_vector();
    }
    c.trace.push_back({t, lr, terms});
    c.adam.apply(c.x, g, lr);
    if (cfg.alpha_noise > 0) {
        std::normal_distribution<double> eta(0.0, 1.0);
        for (auto& v : c.x) v += lr * cfg.alpha_noise * eta(c.noise);
    }
}

/// Starting point of seed g: i.i.d. N(0, 1) pixels.
inline Tensor initial_candidate(const AttackConfig& cfg, const Shape& shape, std::size_t g) {
    Rng init = make_rng(cfg.seed, stream::seed_init + g);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> x(shape_numel(shape));
    for (auto& v : x) v = n01(init);
    return Tensor(shape, std::move(x));
}

/// Multi-seed gradient inversion. Seeds run on their own threads between
/// consensus barriers. `labels` overrides min-rule restoration when given.
inline AttackResult run_inversion(const AttackConfig& cfg, const GradientBundle& bundle,
                                  std::optional<std::vector<std::size_t>> labels = std::nullopt) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t K = bundle.batch_size;
    if (K == 0) throw std::invalid_argument("run_inversion: bundle batch size is 0");
    AttackResult result;
    result.config = cfg;
    result.labels = labels ? *labels : restore_labels_min(bundle, K);
    if (result.labels.size() != K)
        throw std::invalid_argument("run_inversion: " + std::to_string(result.labels.size()) + " labels for batch size " +
                                    std::to_string(K));
    if (cfg.bn_regime == BnRegime::Exact && cfg.alpha_bn > 0) (void)bn_targets(bundle, cfg.bn_regime);
    const Shape shape = bundle.model.spec.input_shape(K);
    const int radius = cfg.registration_radius ? cfg.registration_radius : default_radius(shape[2]);

    std::vector<detail::Candidate> group;
    for (std::size_t g = 0; g < cfg.group_size; ++g)
        group.push_back({initial_candidate(cfg, shape, g).to_vector(), AdamState(shape_numel(shape)),
                         make_rng(cfg.seed, stream::seed_noise + g), {}});

    // Barriers: iterations at which the consensus is recomputed.
    std::vector<std::size_t> barriers;
    for (std::size_t t = cfg.consensus_begin(); t < cfg.iterations; t += cfg.consensus_interval) barriers.push_back(t);
    barriers.push_back(cfg.iterations);

    std::optional<Tensor> consensus;
    auto snapshot = [&] {
        std::vector<Tensor> xs;
        for (const auto& c : group) xs.emplace_back(shape, c.x);
        return xs;
    };
    std::size_t t = 0;
    for (std::size_t b : barriers) {
        const ObjectiveInput in{&bundle, result.labels, &cfg, consensus ? &*consensus : nullptr};
        auto run_segment = [&, t, b](std::size_t g) {
            for (std::size_t i = t; i < b; ++i) inversion_step(group[g], shape, i, g, in);
        };
        if (group.size() == 1) {
            run_segment(0);
        } else {
            std::vector<std::thread> workers;
            std::vector<std::exception_ptr> errors(group.size());
            for (std::size_t g = 0; g < group.size(); ++g)
                workers.emplace_back([&, g] {
                    try {
                        run_segment(g);
                    } catch (...) {
                        errors[g] = std::current_exception();
                    }
                });
            for (auto& w : workers) w.join();
            for (auto& e : errors)
                if (e) std::rethrow_exception(e);
        }
        t = b;
        if (t < cfg.iterations) {
            consensus = consensus_image(snapshot(), cfg.consensus, radius);
            if (std::isnan(result.deviation_at_start)) result.deviation_at_start = detail::mean_deviation(group, *consensus);
        }
    }

    result.candidates = snapshot();
    result.consensus = consensus_image(result.candidates, cfg.consensus, radius);
    if (consensus) result.deviation_at_end = detail::mean_deviation(group, result.consensus);
    for (auto& c : group) result.traces.push_back(std::move(c.trace));
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace ginv
