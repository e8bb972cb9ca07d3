#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "tensor.hpp"

namespace voxcell::tc {

/// A trainable tensor with its accumulated gradient. Parameters outlive
/// graphs; a graph only refers to them.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    void zero_grad() { grad = Tensor<T>(value.shape()); }
};

template <typename T>
using ParamList = std::vector<Parameter<T>*>;

template <typename T>
class Graph;

template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

    Graph<T>& graph() const { return *graph_; }
    std::size_t id() const { return id_; }
    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t i) const { return value().dim(i); }

private:
    Graph<T>* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Tape of operations in creation order. Creation order is a topological
/// order, so backward walks the tape in reverse.
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr); }

    Var<T> param(Parameter<T>& p) {
        auto v = push(p.value, {}, nullptr);
        nodes_[v.id()].param = &p;
        return v;
    }

    Var<T> push(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn backward) {
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var<T>(this, nodes_.size() - 1);
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor<T>& grad_out(std::size_t id) const { return nodes_[id].grad; }

    /// Gradient slot of a parent, allocated on first use.
    Tensor<T>& grad(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    bool active(std::size_t id) const { return nodes_[id].active; }
    std::size_t size() const { return nodes_.size(); }

    /// Reverse-mode sweep from a scalar loss. Only parameters in `targets`
    /// (all parameters when null) receive gradients, and only nodes that lead
    /// to one of them are differentiated. Results are added into
    /// Parameter::grad.
    void backward(const Var<T>& loss, const ParamList<T>* targets = nullptr) {
        if (loss.value().size() != 1) fail(ErrorKind::ShapeMismatch, "backward needs a scalar loss");
        std::unordered_set<const Parameter<T>*> wanted;
        if (targets)
            for (auto* p : *targets) wanted.insert(p);

        for (auto& n : nodes_) {
            n.grad = Tensor<T>();
            n.active = false;
        }
        for (std::size_t i = 0; i <= loss.id(); ++i) {
            auto& n = nodes_[i];
            if (n.param) {
                n.active = !targets || wanted.count(n.param) > 0;
            } else {
                for (auto p : n.parents)
                    if (nodes_[p].active) {
                        n.active = true;
                        break;
                    }
            }
        }
        if (!nodes_[loss.id()].active) return;

        grad(loss.id())[0] = T(1);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.active || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, i);
        }
        for (auto& n : nodes_) {
            if (!n.param || !n.active || n.grad.empty()) continue;
            if (n.param->grad.empty()) n.param->zero_grad();
            n.param->grad += n.grad;
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
        bool active = false;
    };
    std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return graph_->value(id_);
}

template <typename T>
void zero_grads(const ParamList<T>& params) {
    for (auto* p : params) p->zero_grad();
}

}  // namespace voxcell::tc
