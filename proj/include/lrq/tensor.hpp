#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "lrq/common.hpp"

namespace lrq {

// Reverse-mode autodiff over dense row-major tensors.
//
// A TensorT<T> is a shared handle to a graph node. Ops create fresh nodes that
// keep shared ownership of their inputs plus a backward closure; GradTape
// linearizes the graph reachable from a scalar loss and replays it in reverse.
// T is float for the training path and double for gradient certification.

namespace autograd {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

// RAII scope that disables graph construction (eval / data plumbing).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

}  // namespace autograd

using autograd::NoGradGuard;
using autograd::grad_enabled;

template <typename T>
struct NodeT;

template <typename T>
using NodePtr = std::shared_ptr<NodeT<T>>;

template <typename T>
struct NodeT {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until backward touches this node
    bool requires_grad = false;
    std::vector<NodePtr<T>> parents;
    // Pulls this node's grad into its parents' grads. Null for leaves.
    std::function<void(NodeT<T>&)> backward;

    NodeT(Shape s, std::vector<T> d, bool rg)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        check_shape_valid(shape);
        if (static_cast<int64_t>(data.size()) != lrq::numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(NodePtr<T> n) : node_(std::move(n)) {}

    static TensorT zeros(const Shape& shape, bool requires_grad = false) {
        return TensorT(std::make_shared<NodeT<T>>(
            shape, std::vector<T>(static_cast<size_t>(lrq::numel(shape)), T(0)), requires_grad));
    }

    static TensorT full(const Shape& shape, T value, bool requires_grad = false) {
        return TensorT(std::make_shared<NodeT<T>>(
            shape, std::vector<T>(static_cast<size_t>(lrq::numel(shape)), value), requires_grad));
    }

    static TensorT from_data(const Shape& shape, std::vector<T> values, bool requires_grad = false) {
        return TensorT(std::make_shared<NodeT<T>>(shape, std::move(values), requires_grad));
    }

    static TensorT scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    static TensorT randn(const Shape& shape, RandomEngine& rng, double stddev = 1.0,
                         bool requires_grad = false) {
        std::vector<T> v(static_cast<size_t>(lrq::numel(shape)));
        for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
        return from_data(shape, std::move(v), requires_grad);
    }

    static TensorT rand_uniform(const Shape& shape, RandomEngine& rng, double lo, double hi,
                                bool requires_grad = false) {
        std::vector<T> v(static_cast<size_t>(lrq::numel(shape)));
        for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
        return from_data(shape, std::move(v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return checked()->shape; }
    int64_t numel() const { return checked()->numel(); }
    int64_t dim(size_t i) const { return checked()->shape.at(i); }
    size_t ndim() const { return checked()->shape.size(); }

    bool requires_grad() const { return checked()->requires_grad; }
    void set_requires_grad(bool rg) { checked()->requires_grad = rg; }

    std::vector<T>& values() { return checked()->data; }
    const std::vector<T>& values() const { return checked()->data; }

    bool has_grad() const { return defined() && !node_->grad.empty(); }
    std::vector<T>& grad() {
        checked()->ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        if (!has_grad()) throw Error("tensor has no gradient buffer");
        return node_->grad;
    }
    void zero_grad() {
        if (defined() && !node_->grad.empty())
            std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->data[0];
    }

    /// Value copy detached from any graph.
    TensorT detach() const {
        return from_data(shape(), values(), false);
    }

    bool all_finite() const {
        for (T v : values())
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    NodePtr<T> node() const { return node_; }
    NodeT<T>* raw() const { return node_.get(); }

private:
    NodePtr<T> checked() const {
        if (!node_) throw Error("use of undefined tensor");
        return node_;
    }
    NodePtr<T> node_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

namespace detail {

// Create the result node of an op. Graph edges and the backward closure are
// kept only when grad mode is on and some input needs gradients; otherwise the
// result is a plain value.
template <typename T>
TensorT<T> make_op(Shape shape, std::vector<T> data, std::vector<NodePtr<T>> parents,
                   std::function<void(NodeT<T>&)> backward) {
    bool track = autograd::grad_enabled();
    if (track) {
        bool any = false;
        for (const auto& p : parents) any = any || (p && p->requires_grad);
        track = any;
    }
    auto out = std::make_shared<NodeT<T>>(std::move(shape), std::move(data), track);
    if (track) {
        out->parents = std::move(parents);
        out->backward = std::move(backward);
    }
    return TensorT<T>(out);
}

template <typename T>
void accumulate(NodeT<T>& dst, const std::vector<T>& g) {
    if (!dst.requires_grad) return;  // constant branch: no buffer
    dst.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace detail

// Topologically ordered record of the graph reachable from a root. Parents
// come before children, so a reverse sweep propagates gradients each node
// exactly once.
template <typename T>
class GradTape {
public:
    explicit GradTape(const TensorT<T>& root) : root_(root.node()) {
        if (!root_) throw Error("GradTape on undefined tensor");
        std::unordered_set<const NodeT<T>*> visited;
        // iterative DFS; (node, next parent index)
        std::vector<std::pair<NodeT<T>*, size_t>> stack;
        if (root_->requires_grad) {
            stack.emplace_back(root_.get(), 0);
            visited.insert(root_.get());
        }
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                NodeT<T>* p = n->parents[idx].get();
                ++idx;
                if (p && p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order_.push_back(n);
                stack.pop_back();
            }
        }
    }

    /// Seed d(root)/d(root) = 1 and sweep the tape in reverse. Gradients
    /// accumulate additively into every requires_grad node reached.
    void backward() {
        if (root_->numel() != 1)
            throw ShapeError("backward requires a scalar loss, got " + shape_str(root_->shape));
        if (!root_->requires_grad)
            throw ConfigError("backward on a detached loss: no tape reaches it");
        root_->ensure_grad();
        root_->grad[0] += T(1);
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            NodeT<T>* n = *it;
            if (n->backward && !n->grad.empty()) n->backward(*n);
        }
        // closures accumulate into every parent; constants must not keep a
        // gradient buffer afterwards
        for (auto* n : order_)
            for (const auto& p : n->parents)
                if (p && !p->requires_grad && !p->grad.empty()) {
                    p->grad.clear();
                    p->grad.shrink_to_fit();
                }
    }

    const std::vector<NodeT<T>*>& nodes() const { return order_; }

    std::vector<NodeT<T>*> leaves() const {
        std::vector<NodeT<T>*> out;
        for (auto* n : order_)
            if (n->parents.empty()) out.push_back(n);
        return out;
    }

private:
    NodePtr<T> root_;
    std::vector<NodeT<T>*> order_;  // parents before children; root last
};

template <typename T>
void backward(const TensorT<T>& loss) {
    GradTape<T>(loss).backward();
}

}  // namespace lrq
