#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sarwsl/autodiff/tensor.hpp"

namespace sarwsl::ad {

/// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
    bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order and backward walks it in reverse.
template <typename T>
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

    Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }
    Var variable(Tensor<T> value) { return push(std::move(value), true, {}); }

    /// Records an op result. The backward closure is kept only if some input
    /// needs a gradient.
    Var record(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward)
    {
        bool needs = false;
        for (Var v : inputs)
            needs = needs || nodes_.at(v.id).requires_grad;
        return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
    }

    const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient accumulator for `v`, zero-initialized on first use; nullptr
    /// when `v` does not participate in differentiation.
    Tensor<T>* grad_sink(Var v)
    {
        Node& n = nodes_.at(v.id);
        if (!n.requires_grad)
            return nullptr;
        if (!n.grad)
            n.grad = std::make_unique<Tensor<T>>(n.value.shape);
        return n.grad.get();
    }

    bool has_grad(Var v) const { return static_cast<bool>(nodes_.at(v.id).grad); }

    /// Gradient of the last backward pass (zeros if none reached `v`).
    Tensor<T> grad(Var v) const
    {
        const Node& n = nodes_.at(v.id);
        return n.grad ? *n.grad : Tensor<T>(n.value.shape);
    }

    void backward(Var loss)
    {
        const Node& root = nodes_.at(loss.id);
        if (root.value.size() != 1)
            throw std::invalid_argument("backward: loss must be a scalar, got shape " + to_string(root.value.shape));
        for (Node& n : nodes_)
            n.grad.reset();
        if (!root.requires_grad)
            return;
        *grad_sink(loss) = Tensor<T>(root.value.shape, T(1));
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && n.grad)
                n.backward(*this, *n.grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        bool requires_grad = false;
        Backward backward;
        std::unique_ptr<Tensor<T>> grad;
    };

    Var push(Tensor<T> value, bool requires_grad, Backward backward)
    {
        nodes_.push_back(Node{std::move(value), requires_grad, std::move(backward), nullptr});
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

} // namespace sarwsl::ad
