#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Differentiable operations
// attach a GradFn to their output that knows the input nodes and how to push
// the output gradient back into them. backward() linearises the reachable
// graph into a Tape (producers before consumers) and replays it in reverse.

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "spem/errors.hpp"

namespace spem {

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node;

template <typename T>
struct GradFn {
    std::vector<std::shared_ptr<Node<T>>> inputs;
    // Receives the output node (its grad is fully accumulated when called).
    std::function<void(Node<T>& out)> apply;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<GradFn<T>> grad_fn;

    std::span<T> grad_buffer()
    {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

inline bool& grad_mode_flag()
{
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T = double>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>())
    {
        check_dims(shape);
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>())
    {
        check_dims(shape);
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data of length " + std::to_string(data.size()) +
                             " does not fill shape " + spem::to_string(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(T value, bool requires_grad = false)
    {
        return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
    }

    static Tensor from_node(NodePtr node)
    {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T> to_vector() const { return node_->data; }

    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }

    T item() const
    {
        if (numel() != 1)
            throw ShapeError("item() on tensor of shape " + spem::to_string(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool is_leaf() const { return !node_->grad_fn; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<T> grad() { return node_->grad; }
    std::span<const T> grad() const { return node_->grad; }
    std::vector<T> grad_vector() const { return node_->grad; }

    // Allocates (or resets) the gradient buffer to zeros.
    void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }
    void clear_grad() { node_->grad.clear(); }

    // Same values, no history.
    Tensor detach() const { return Tensor(shape(), to_vector(), false); }

    Tensor clone() const { return Tensor(shape(), to_vector(), requires_grad()); }

    const NodePtr& node() const { return node_; }

private:
    static void check_dims(const Shape& shape)
    {
        if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (auto d : shape)
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + spem::to_string(shape));
    }

    NodePtr node_;
};

// True when an op over these inputs must be recorded.
template <typename T, typename... Rest>
bool needs_grad(const Tensor<T>& first, const Rest&... rest)
{
    if (!grad_enabled()) return false;
    return (first.requires_grad() || ... || rest.requires_grad());
}

// Attaches a gradient rule to `out`. The rule receives the output node and is
// responsible for accumulating into the inputs that require grad.
template <typename T>
void record(Tensor<T>& out, std::vector<Tensor<T>> inputs, std::function<void(detail::Node<T>&)> rule)
{
    auto fn = std::make_shared<detail::GradFn<T>>();
    fn->inputs.reserve(inputs.size());
    for (auto& in : inputs) fn->inputs.push_back(in.node());
    fn->apply = std::move(rule);
    out.node()->grad_fn = std::move(fn);
    out.node()->requires_grad = true;
}

// Linear ordering of the recorded operations reachable from a root.
template <typename T>
class Tape {
public:
    explicit Tape(const Tensor<T>& root)
    {
        // Iterative post-order DFS; emits a node after all of its producers.
        std::unordered_set<detail::Node<T>*> seen;
        std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
        auto* r = root.node().get();
        if (!r->grad_fn) return;
        stack.emplace_back(r, 0);
        seen.insert(r);
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            const auto& inputs = node->grad_fn->inputs;
            if (next < inputs.size()) {
                auto* child = inputs[next++].get();
                if (child->grad_fn && child->requires_grad && seen.insert(child).second)
                    stack.emplace_back(child, 0);
            } else {
                order_.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::size_t size() const { return order_.size(); }
    std::span<detail::Node<T>* const> operations() const { return order_; }

    // Assumes the root gradient is seeded. Intermediate gradients are scratch:
    // reset before replay and released after use, so replaying the same graph
    // again only accumulates into leaves.
    void replay_backward()
    {
        for (auto* node : order_) {
            if (node != order_.back()) node->grad.assign(node->data.size(), T(0));
        }
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            auto* node = *it;
            node->grad_buffer();
            node->grad_fn->apply(*node);
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }

private:
    std::vector<detail::Node<T>*> order_;
};

template <typename T>
void backward(const Tensor<T>& loss)
{
    if (loss.numel() != 1)
        throw ArgumentError("backward() needs a scalar loss, got shape " + spem::to_string(loss.shape()));
    if (!loss.requires_grad()) throw ArgumentError("backward() on a tensor that does not require grad");
    Tape<T> tape(loss);
    auto* root = loss.node().get();
    if (!root->grad_fn) {
        root->grad_buffer()[0] += T(1);
        return;
    }
    root->grad.assign(1, T(1));
    tape.replay_backward();
}

namespace detail {

// Gradient accumulation target for an input node, or empty when the input
// does not take part in differentiation.
template <typename T>
std::span<T> grad_target(const std::shared_ptr<Node<T>>& n)
{
    if (!n->requires_grad) return {};
    return n->grad_buffer();
}

}  // namespace detail

}  // namespace spem
