#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ginv/ops.hpp"
#include "ginv/tensor.hpp"

namespace ginv {

inline std::vector<Tensor> Graph::backward(const Tensor& output, std::span<const Tensor> wrt, bool differentiable) {
    if (output.numel() != 1)
        throw ShapeError("backward: output must be a scalar, got shape " + shape_str(output.shape()));
    if (active_graph() != this) throw std::logic_error("backward: graph is not active on this thread");

    std::vector<Tensor> result;
    result.reserve(wrt.size());
    if (output.graph() != this) {
        for (const auto& w : wrt) result.push_back(Tensor::zeros(w.shape()));
        return result;
    }

    const std::size_t root = output.node();
    std::vector<char> needed(root + 1, 0);
    std::vector<char> target(root + 1, 0);
    for (const auto& w : wrt) {
        if (w.tracked() && w.graph() != this) throw std::logic_error("backward: wrt tensor belongs to another graph");
        if (w.graph() == this && w.node() <= root) needed[w.node()] = target[w.node()] = 1;
    }
    for (std::size_t i = 0; i <= root; ++i) {
        if (needed[i]) continue;
        for (auto in : nodes_[i].inputs)
            if (in != npos && needed[in]) {
                needed[i] = 1;
                break;
            }
    }

    std::vector<Tensor> grads(root + 1);
    grads[root] = Tensor::filled(output.shape(), 1.0);
    RecordingPause pause(*this, !differentiable);

    for (std::size_t i = root + 1; i-- > 0;) {
        if (!needed[i] || !grads[i].defined()) continue;
        const Node& node = nodes_[i];
        if (node.op == OpKind::Leaf) continue;
        NeedMask mask = 0;
        for (std::size_t j = 0; j < node.inputs.size(); ++j)
            if (node.inputs[j] != npos && needed[node.inputs[j]]) mask |= NeedMask{1} << j;
        if (!mask) continue;

        const Tensor out = attach(node.value, i);
        std::vector<Tensor> in_grads = node.backward(grads[i], out, mask);
        for (std::size_t j = 0; j < node.inputs.size(); ++j) {
            const std::size_t src = node.inputs[j];
            if (!needs(mask, j) || !in_grads[j].defined()) continue;
            grads[src] = grads[src].defined() ? add(grads[src], in_grads[j]) : in_grads[j];
        }
        if (!target[i]) grads[i] = Tensor();
    }

    for (const auto& w : wrt) {
        if (w.graph() == this && w.node() <= root && grads[w.node()].defined())
            result.push_back(grads[w.node()]);
        else
            result.push_back(Tensor::zeros(w.shape()));
    }
    return result;
}

/// Gradients of scalar `output` with respect to `wrt` on the active graph.
inline std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, bool differentiable = false) {
    Graph* g = active_graph();
    if (!g) throw std::logic_error("grad: no active graph");
    return g->backward(output, wrt, differentiable);
}

inline Tensor grad(const Tensor& output, const Tensor& wrt, bool differentiable = false) {
    return grad(output, std::span<const Tensor>(&wrt, 1), differentiable).front();
}

/// Central-difference estimate (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
    if (!(step > 0)) throw std::invalid_argument("finite_difference_gradient: step must be positive");
    std::vector<double> base = x.detach().to_vector();
    std::vector<double> out(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        const double keep = base[i];
        base[i] = keep + step;
        const double up = f(Tensor(x.shape(), base));
        base[i] = keep - step;
        const double down = f(Tensor(x.shape(), base));
        base[i] = keep;
        out[i] = (up - down) / (2.0 * step);
    }
    return Tensor(x.shape(), std::move(out));
}

}  // namespace ginv
