#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "nwlab/tensor.hpp"

namespace nwlab {

enum class Role { Parameter, Intermediate, Input };

// One node of the reverse-mode tape. Ops create nodes whose backward closure
// pulls this node's gradient into the parents' gradients.
template <typename T>
struct Node {
    TensorT<T> value;
    TensorT<T> grad; // allocated on first use, always same shape as value
    Role role = Role::Intermediate;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    TensorT<T>& ensure_grad() {
        if (grad.empty() && value.numel() > 0) grad = TensorT<T>::zeros(value.shape());
        return grad;
    }

    void zero_grad() {
        if (!grad.empty()) grad.fill(T(0));
    }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_param(TensorT<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->role = Role::Parameter;
    n->requires_grad = true;
    return n;
}

template <typename T>
Var<T> make_input(TensorT<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->role = Role::Input;
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> make_op_node(TensorT<T> value, std::vector<Var<T>> parents,
                    std::function<void(Node<T>&)> backward_fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& p : parents)
        if (p && p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

// Reverse pass from a scalar loss. Gradients accumulate, so callers zero
// parameter grads between optimization steps.
template <typename T>
void backward(const Var<T>& loss) {
    if (!loss || loss->value.numel() != 1)
        throw std::invalid_argument("backward expects a scalar loss node");
    // iterative topological order (post-order DFS)
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx].get();
            ++idx;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// Drops the tape below a node so intermediate buffers can be reclaimed while
// keeping the value (used between protocol segments).
template <typename T>
void detach(const Var<T>& v) {
    if (!v) return;
    v->parents.clear();
    v->backward_fn = nullptr;
}

} // namespace nwlab
