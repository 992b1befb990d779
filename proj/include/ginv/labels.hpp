#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ginv/victim.hpp"

namespace ginv {

enum class LabelRule { Min, Sum };

namespace detail {

/// Indices of the k smallest entries of v, ascending by value; ties favour the lower index.
inline std::vector<std::size_t> k_smallest(const std::vector<double>& v, std::size_t k) {
    if (k > v.size())
        throw std::invalid_argument("label restoration: K = " + std::to_string(k) + " exceeds class count " +
                                    std::to_string(v.size()));
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    idx.resize(k);
    return idx;
}

}  // namespace detail

/// Per-class score v_n from an M x N final-layer gradient: the column minimum
/// over features (min rule) or the column sum (sum rule).
inline std::vector<double> label_scores(const Tensor& fc_grad, LabelRule rule) {
    if (fc_grad.dim() != 2) throw ShapeError("label_scores: expected an M x N gradient, got " + shape_str(fc_grad.shape()));
    const std::size_t m = fc_grad.size(0), n = fc_grad.size(1);
    std::vector<double> v(n, rule == LabelRule::Min ? std::numeric_limits<double>::infinity() : 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double g = fc_grad[i * n + j];
            v[j] = rule == LabelRule::Min ? std::min(v[j], g) : v[j] + g;
        }
    return v;
}

inline std::vector<std::size_t> restore_labels(const Tensor& fc_grad, std::size_t k, LabelRule rule) {
    return detail::k_smallest(label_scores(fc_grad, rule), k);
}

inline std::vector<std::size_t> restore_labels_min(const GradientBundle& bundle, std::size_t k) {
    return restore_labels(bundle.fc_gradient(), k, LabelRule::Min);
}

inline std::vector<std::size_t> restore_labels_sum(const GradientBundle& bundle, std::size_t k) {
    return restore_labels(bundle.fc_gradient(), k, LabelRule::Sum);
}

/// Fraction of `truth` recovered by `restored`, compared as multisets.
inline double label_set_accuracy(std::vector<std::size_t> restored, std::vector<std::size_t> truth) {
    if (truth.empty()) return 1.0;
    std::sort(restored.begin(), restored.end());
    std::sort(truth.begin(), truth.end());
    std::vector<std::size_t> common;
    std::set_intersection(restored.begin(), restored.end(), truth.begin(), truth.end(), std::back_inserter(common));
    return static_cast<double>(common.size()) / static_cast<double>(truth.size());
}

/// S_{n,k}: per-sample final-layer gradient of sample k, summed over features.
/// Needs the ground-truth batch, so it serves only as a test oracle.
struct SMatrix {
    std::size_t classes = 0, batch = 0;
    std::vector<double> values;     // classes x batch, row-major
    std::vector<bool> dead_feature;  // sample k has an all-zero penultimate feature vector

    double at(std::size_t n, std::size_t k) const { return values[n * batch + k]; }
};

/// Per-sample gradients are taken on the joint batch graph (shared batch-mode
/// BN statistics), so their mean is exactly the bundle gradient.
inline SMatrix s_matrix_oracle(const Model& model, const Batch& batch) {
    const std::size_t K = batch.size(), N = model.spec.classes;
    SMatrix s{N, K, std::vector<double>(N * K, 0.0), std::vector<bool>(K, false)};
    const std::size_t fc = model.param_index(model.fc_weight_name());
    for (std::size_t k = 0; k < K; ++k) {
        GraphScope scope;
        std::vector<Tensor> leaves;
        for (const auto& p : model.params) leaves.push_back(scope->leaf(p.value));
        auto trace = model_forward(model, batch.images, BnMode::Batch, leaves);
        std::vector<std::size_t> y{batch.labels[k]};
        Tensor g = grad(cross_entropy(slice(trace.logits, 0, k, 1), y), leaves[fc]);
        const std::size_t M = g.size(0);
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t n = 0; n < N; ++n) s.values[n * K + k] += g[m * N + n];
        const auto o = trace.features.data().subspan(k * M, M);
        s.dead_feature[k] = std::all_of(o.begin(), o.end(), [](double v) { return v == 0.0; });
    }
    return s;
}

}  // namespace ginv
