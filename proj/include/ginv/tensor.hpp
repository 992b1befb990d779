#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ginv {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Thrown when operand shapes do not satisfy an op's shape rule.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class OpKind : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Abs,
    Sqrt,
    Square,
    Exp,
    Log,
    MaxScalar,
    AddScalar,
    MulScalar,
    RecipSafe,
    Sum,
    Expand,
    MatMul,
    Transpose,
    Conv2d,
    Conv2dInputGrad,
    Conv2dWeightGrad,
    AvgPool,
    AvgPoolAdjoint,
    MaxPool,
    Gather,
    ScatterAdd,
    Reshape,
    Slice,
    SliceAdjoint,
    Concat,
};

inline const char* op_name(OpKind op) {
    switch (op) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::Neg: return "neg";
        case OpKind::Abs: return "abs";
        case OpKind::Sqrt: return "sqrt";
        case OpKind::Square: return "square";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::MaxScalar: return "max_scalar";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::MulScalar: return "mul_scalar";
        case OpKind::RecipSafe: return "recip_safe";
        case OpKind::Sum: return "sum";
        case OpKind::Expand: return "expand";
        case OpKind::MatMul: return "matmul";
        case OpKind::Transpose: return "transpose";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::Conv2dInputGrad: return "conv2d_input_grad";
        case OpKind::Conv2dWeightGrad: return "conv2d_weight_grad";
        case OpKind::AvgPool: return "avg_pool2d";
        case OpKind::AvgPoolAdjoint: return "avg_pool2d_adjoint";
        case OpKind::MaxPool: return "max_pool2d";
        case OpKind::Gather: return "gather";
        case OpKind::ScatterAdd: return "scatter_add";
        case OpKind::Reshape: return "reshape";
        case OpKind::Slice: return "slice";
        case OpKind::SliceAdjoint: return "slice_adjoint";
        case OpKind::Concat: return "concat";
    }
    return "unknown";
}

class Graph;

/// Dense row-major f64 tensor.
///
/// The buffer is shared and never mutated after construction, so copies are
/// cheap and untracked tensors can be shared freely across threads. A tensor
/// produced while a Graph is active (and has a tracked operand) carries a
/// handle to its node on that graph; the graph must outlive such handles.
/// Scalars have an empty shape.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)),
          data_(std::make_shared<const std::vector<double>>(std::move(data))) {
        if (shape_numel(shape_) != data_->size())
            throw ShapeError("tensor: shape " + shape_str(shape_) + " holds " +
                             std::to_string(shape_numel(shape_)) + " values, buffer has " +
                             std::to_string(data_->size()));
        for (auto d : shape_)
            if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }

    static Tensor filled(Shape shape, double value) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value));
    }

    static Tensor scalar(double value) { return Tensor({}, {value}); }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    std::size_t dim() const { return shape_.size(); }
    std::size_t size(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const { return data_ ? data_->size() : 0; }
    std::span<const double> data() const { return data_ ? std::span<const double>(*data_) : std::span<const double>(); }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    std::vector<double> to_vector() const { return data_ ? *data_ : std::vector<double>{}; }

    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
        return (*data_)[0];
    }

    bool tracked() const { return graph_ != nullptr; }
    Graph* graph() const { return graph_; }
    std::size_t node() const { return node_; }

    /// Same values, no graph handle.
    Tensor detach() const {
        Tensor t = *this;
        t.graph_ = nullptr;
        t.node_ = 0;
        return t;
    }

private:
    friend class Graph;
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Graph* graph_ = nullptr;
    std::size_t node_ = 0;
};

struct NamedTensor {
    std::string name;
    Tensor value;
};

/// Bit i set: the backward pass needs the gradient of input i.
using NeedMask = std::uint32_t;

inline bool needs(NeedMask mask, std::size_t input) { return (mask >> input) & 1u; }

/// Produces input gradients from the output gradient and the output itself.
/// Undefined tensors in the result mean "no gradient for this input"; inputs
/// whose bit is clear in the mask may be skipped.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out, const Tensor& out, NeedMask need)>;

/// Append-only tape of primitive applications.
///
/// Node inputs always have smaller indices than the node, so the tape is a
/// topological order. While recording is paused, ops evaluate eagerly but
/// produce untracked tensors. backward() pauses recording unless asked for a
/// differentiable result, in which case the gradient computation is itself
/// appended to the tape and can be differentiated again.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Registers a value as a differentiable input.
    Tensor leaf(const Tensor& value) {
        nodes_.push_back(Node{OpKind::Leaf, {}, {}, value.detach()});
        return attach(value.detach(), nodes_.size() - 1);
    }

    Tensor record(OpKind op, Tensor value, const std::vector<Tensor>& inputs, BackwardFn fn) {
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const auto& in : inputs) ids.push_back(in.graph_ == this ? in.node_ : npos);
        nodes_.push_back(Node{op, std::move(ids), std::move(fn), value.detach()});
        return attach(std::move(value), nodes_.size() - 1);
    }

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }
    OpKind op_at(std::size_t i) const { return nodes_.at(i).op; }
    const std::vector<std::size_t>& inputs_at(std::size_t i) const { return nodes_.at(i).inputs; }

    /// Gradients of the scalar `output` with respect to each `wrt` entry.
    ///
    /// A wrt tensor that `output` does not depend on (including untracked
    /// tensors) receives a zero gradient of its own shape; this is not an
    /// error. With `differentiable` set the returned gradients are nodes on
    /// this graph. Defined in autodiff.hpp.
    std::vector<Tensor> backward(const Tensor& output, std::span<const Tensor> wrt, bool differentiable);

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

private:
    friend class RecordingPause;

    struct Node {
        OpKind op;
        std::vector<std::size_t> inputs;  // npos marks an untracked operand
        BackwardFn backward;
        Tensor value;  // untracked alias of the forward result
    };

    Tensor attach(Tensor value, std::size_t id) {
        value.graph_ = this;
        value.node_ = id;
        return value;
    }

    std::deque<Node> nodes_;  // deque: references stay valid while backward appends
    bool recording_ = true;
};

namespace detail {
inline thread_local Graph* active_graph = nullptr;
}

inline Graph* active_graph() { return detail::active_graph; }

/// Owns a graph and makes it the active graph of the calling thread.
class GraphScope {
public:
    GraphScope() : previous_(detail::active_graph) { detail::active_graph = &graph_; }
    ~GraphScope() { detail::active_graph = previous_; }
    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

    Graph& graph() { return graph_; }
    Graph* operator->() { return &graph_; }

private:
    Graph graph_;
    Graph* previous_;
};

/// Suspends recording on a graph for the guard's lifetime.
class RecordingPause {
public:
    explicit RecordingPause(Graph& g, bool pause = true) : graph_(g), saved_(g.recording_) {
        if (pause) graph_.recording_ = false;
    }
    ~RecordingPause() { graph_.recording_ = saved_; }
    RecordingPause(const RecordingPause&) = delete;
    RecordingPause& operator=(const RecordingPause&) = delete;

private:
    Graph& graph_;
    bool saved_;
};

}  // namespace ginv
