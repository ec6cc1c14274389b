// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dykenhyena/errors.hpp"

namespace dkh {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense row-major f64 array. Parameters live in Tensors; graph nodes hold
/// their own value copies.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {
        check_extents();
    }
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        check_extents();
        if (numel(shape) != data.size())
            throw ShapeMismatch("shape " + shape_str(shape) + " does not match " +
                                std::to_string(data.size()) + " values");
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> d;
        d.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeMismatch("ragged matrix literal");
            d.insert(d.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(d));
    }

    std::size_t size() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data[(i * shape[1] + j) * shape[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data[(i * shape[1] + j) * shape[2] + k];
    }

    void zero_grad() { grad.assign(data.size(), 0.0); }

    /// Checks the structural invariants and that every value is finite.
    void validate(const std::string& what = "tensor") const {
        if (numel(shape) != data.size())
            throw ShapeMismatch(what + ": shape/data length mismatch");
        if (!grad.empty() && grad.size() != data.size())
            throw ShapeMismatch(what + ": grad length mismatch");
        for (double v : data)
            if (!std::isfinite(v)) throw NonFinite(what + " holds a non-finite value");
    }

private:
    void check_extents() const {
        for (auto e : shape)
            if (e == 0) throw ShapeMismatch("zero extent in shape " + shape_str(shape));
    }
};

class Graph;

/// Handle to a node of a Graph.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    std::size_t size() const { return value().size(); }
    double item() const;
    std::span<const double> grad() const;
};

/// Append-only tape. Nodes are recorded in evaluation order, so append order
/// is a topological order and backward simply walks the tape in reverse.
class Graph {
public:
    /// Called once during backward with the node's own id. The function reads
    /// `grad(self)` and accumulates into the grads of the node's inputs.
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }

    /// Leaf bound to a persistent parameter. Its gradient is added to `p.grad`
    /// during backward. Repeated calls with the same tensor return the same node.
    Var param(Tensor& p) {
        if (auto it = param_index_.find(&p); it != param_index_.end()) return {this, it->second};
        Node n;
        n.value.shape = p.shape;
        n.value.data = p.data;
        n.needs_grad = grad_enabled_ && p.requires_grad;
        n.param = &p;
        n.op = "param";
        nodes_.push_back(std::move(n));
        param_index_.emplace(&p, nodes_.size() - 1);
        return {this, nodes_.size() - 1};
    }

    /// Leaf owned by the graph; gradient (if requested) is readable through Var::grad.
    Var input(Tensor t, bool requires_grad = true) {
        Node n;
        n.value = std::move(t);
        n.needs_grad = grad_enabled_ && requires_grad;
        n.op = "input";
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Var constant(Tensor t) { return input(std::move(t), false); }

    /// Records the result of an operation.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                      std::move(fn), op);
    }

    Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn, const char* op) {
        Node n;
        n.value = std::move(value);
        n.op = op;
        n.inputs.reserve(inputs.size());
        for (const Var& v : inputs) {
            if (v.graph != this) throw Error(std::string(op) + ": input from another graph");
            n.inputs.push_back(v.id);
            n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
        }
        if (n.needs_grad) n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    const char* op(std::size_t id) const { return nodes_[id].op; }
    std::span<const std::size_t> inputs(std::size_t id) const { return nodes_[id].inputs; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient buffer of a node, allocated on first use.
    std::vector<double>& grad(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }

    /// Gradient buffer of an input that needs a gradient, else nullptr.
    double* grad_if_needed(std::size_t id) {
        return nodes_[id].needs_grad ? grad(id).data() : nullptr;
    }

    std::span<const double> grad_view(std::size_t id) const { return nodes_[id].grad; }

    /// Reverse pass from a scalar loss. Parameter leaves accumulate into
    /// their bound Tensor's grad (additive, so gradients from several graphs sum).
    void backward(Var loss) {
        if (loss.graph != this) throw Error("backward: loss from another graph");
        if (nodes_[loss.id].value.size() != 1)
            throw NotScalar("loss has shape " + shape_str(nodes_[loss.id].value.shape));
        if (!grad_enabled_) throw Error("backward on a graph recorded without gradients");
        grad(loss.id)[0] += 1.0;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.needs_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, id);
            if (n.param) {
                if (n.param->grad.size() != n.param->data.size()) n.param->zero_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
            }
        }
    }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Tensor* param = nullptr;
        bool needs_grad = false;
        const char* op = "";
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Tensor*, std::size_t> param_index_;
    bool grad_enabled_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

inline double Var::item() const {
    const auto& v = value();
    if (v.size() != 1) throw NotScalar("item() on shape " + shape_str(v.shape));
    return v.data[0];
}

inline std::span<const double> Var::grad() const { return graph->grad_view(id); }

}  // namespace dkh
