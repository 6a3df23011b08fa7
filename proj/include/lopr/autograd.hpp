// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lopr/tensor.hpp"

namespace lopr {

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool& finite_check_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables tape recording in scope (inference, decoding).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad; // empty until backward touches this node
    bool requires_grad = false;
    bool is_leaf = true;
    std::string op; // producing op, for diagnostics
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor<S>& ensure_grad() {
        if (grad.empty()) {
            grad = Tensor<S>(value.shape(), S(0));
        }
        return grad;
    }
};

// Handle to a node in the computation graph. Leaves with requires_grad are
// the trainable parameters; every op call extends the tape eagerly.
template <typename S>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

    static Var leaf(Tensor<S> value, bool requires_grad = false) {
        auto n = std::make_shared<Node<S>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        n->is_leaf = true;
        return Var(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<S>& value() const { return node_->value; }
    Tensor<S>& mutable_value() { return node_->value; }
    const Tensor<S>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const Shape& shape() const { return node_->value.shape(); }
    std::int64_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    bool is_leaf() const { return node_->is_leaf; }

    void zero_grad() { node_->grad = Tensor<S>(); }

    std::shared_ptr<Node<S>> node() const { return node_; }
    Node<S>* raw() const { return node_.get(); }

private:
    std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <typename S>
void check_finite(const Tensor<S>& t, const char* op) {
    if (finite_check_flag() && !t.all_finite()) {
        throw NumericError(std::string("non-finite values in output of op '") + op + "'");
    }
}

// Shared op constructor: computes requires_grad propagation and registers
// the backward rule only when the tape is live.
template <typename S>
Var<S> make_op(const char* name, Tensor<S> value, std::vector<Var<S>> inputs,
               std::function<void(Node<S>&)> backward_fn) {
    check_finite(value, name);
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->is_leaf = false;
    n->op = name;
    bool needs = false;
    if (grad_mode_flag()) {
        for (const auto& in : inputs) {
            needs = needs || in.requires_grad();
        }
    }
    n->requires_grad = needs;
    if (needs) {
        n->parents.reserve(inputs.size());
        for (auto& in : inputs) {
            n->parents.push_back(in.node());
        }
        n->backward_fn = std::move(backward_fn);
    }
    return Var<S>(std::move(n));
}

// accumulate src into node grad
template <typename S>
void accumulate(Node<S>& node, const Tensor<S>& contribution) {
    Tensor<S>& g = node.ensure_grad();
    const S* src = contribution.data();
    S* dst = g.data();
    const std::int64_t n = g.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        dst[i] += src[i];
    }
}

} // namespace detail

// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
// once in reverse topological order; gradients accumulate additively, so
// leaves used in several places receive the sum of contributions.
template <typename S>
void backward(const Var<S>& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        return; // nothing trainable reachable
    }

    // iterative post-order DFS over grad-requiring subgraph
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> visited;
    struct Frame {
        Node<S>* node;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.raw(), 0});
    visited.insert(loss.raw());
    while (!stack.empty()) {
        Frame& top = stack.back();
        if (top.next < top.node->parents.size()) {
            Node<S>* parent = top.node->parents[top.next].get();
            ++top.next;
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.push_back({parent, 0}); // invalidates `top`
            }
        } else {
            order.push_back(top.node);
            stack.pop_back();
        }
    }

    loss.raw()->ensure_grad().fill(S(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (!n->is_leaf && n->backward_fn) {
            n->backward_fn(*n);
            if (detail::finite_check_flag() && !n->grad.empty() && !n->grad.all_finite()) {
                throw NumericError("non-finite gradient at op '" + n->op + "'");
            }
        }
    }
}

} // namespace lopr
