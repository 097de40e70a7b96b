// Dense N-dimensional tensors with tape-free reverse-mode autodiff.
//
// Every Tensor is a handle to a shared Node. Operations that consume tensors
// requiring gradients record their parents and a backward closure on the
// result node; backward() sweeps the reachable subgraph in reverse
// topological order.
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace locseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad, accumulates into parents' grads.
    std::function<void(Node&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        if (locseg::numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return Tensor(shape, std::vector<T>(locseg::numel(shape), T(0)), requires_grad);
    }
    static Tensor full(const Shape& shape, T value, bool requires_grad = false) {
        return Tensor(shape, std::vector<T>(locseg::numel(shape), value), requires_grad);
    }
    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::vector<T>& data() & { return node_->data; }
    const std::vector<T>& data() const& { return node_->data; }
    // A temporary handle may own the last reference; hand out a copy.
    std::vector<T> data() && { return node_->data; }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const& { return node_->grad; }
    std::vector<T> grad() && { return node_->grad; }
    std::vector<T>& mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    /// Copy of the values with no graph history.
    Tensor detach() const { return Tensor(shape(), data(), false); }

    const NodePtr& node() const { return node_; }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    NodePtr node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

namespace detail {

/// Builds a result tensor, attaching parents and backward closure when any
/// input participates in the graph.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward_fn) {
    Tensor<T> out(std::move(shape), std::move(data), false);
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
    if (!needs) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& t : inputs) node.parents.push_back(t.node());
    node.backward_fn = std::move(backward_fn);
    return out;
}

}  // namespace detail

/// Reverse sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and
/// accumulates into every reachable node that requires grad. Intermediate
/// grads are released afterwards; leaf grads persist until zero_grad().
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    using NodeT = detail::Node<T>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    // Iterative post-order DFS; order ends up parents-before-children.
    std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    for (NodeT* node : order)
        if (node->backward_fn) node->grad.clear();
}

}  // namespace locseg
