#include "cdr/tensor.hpp"

#include <bit>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <cstdint>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace cdr {

namespace {

std::atomic<bool> g_checked{true};
thread_local bool t_grad_enabled = true;

}  // namespace

void detail::check_finite(std::span<const double> values, const char* where) {
    if (!checked_mode()) {
        return;
    }
    // Branch-free exponent scan first; it vectorizes, the locating pass does not.
    constexpr std::uint64_t kExp = 0x7FF0000000000000ULL;
    bool bad = false;
    for (double v : values) {
        bad |= (std::bit_cast<std::uint64_t>(v) & kExp) == kExp;
    }
    if (!bad) {
        return;
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            std::ostringstream msg;
            msg << where << ": non-finite value at flat index " << i;
            throw NonFiniteError(msg.str());
        }
    }
}

void retain_heap_buffers() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ')';
    return out.str();
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto s : shape) {
        n *= s;
    }
    return n;
}

void set_checked_mode(bool enabled) { g_checked.store(enabled); }
bool checked_mode() { return g_checked.load(); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

std::vector<double>& detail::Node::grad_buffer() {
    if (grad.empty()) {
        grad.assign(value.size(), 0.0);
    }
    return grad;
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape.empty()) {
        throw ShapeError("tensor: empty shape; use {1} for scalars");
    }
    for (auto s : shape) {
        if (s == 0) {
            throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
        }
    }
    if (shape_size(shape) != values.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    detail::check_finite(values, "tensor construction");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
    const std::size_t n = values.size();
    return from({1, n}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) {
        throw GraphError("tensor: use of undefined tensor");
    }
    return node_->shape;
}

std::size_t Tensor::size() const { return shape_size(shape()); }

std::size_t Tensor::rows() const {
    const auto& s = shape();
    if (s.size() == 1) {
        return 1;
    }
    if (s.size() == 2) {
        return s[0];
    }
    throw ShapeError("tensor: rows() requires rank 1 or 2, got " + shape_str(s));
}

std::size_t Tensor::cols() const {
    const auto& s = shape();
    if (s.size() == 1) {
        return s[0];
    }
    if (s.size() == 2) {
        return s[1];
    }
    throw ShapeError("tensor: cols() requires rank 1 or 2, got " + shape_str(s));
}

std::span<const double> Tensor::data() const {
    shape();
    return node_->value;
}

std::span<double> Tensor::mutable_data() {
    shape();
    if (!node_->is_leaf()) {
        throw GraphError("tensor: mutable_data() on a non-leaf tensor");
    }
    return node_->value;
}

double Tensor::item() const {
    if (size() != 1) {
        throw ShapeError("tensor: item() on shape " + shape_str(shape()));
    }
    return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    shape();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) {
        node_->grad.clear();
    }
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

void Tensor::backward() {
    if (size() != 1) {
        throw GraphError("backward: root must be scalar, got shape " + shape_str(shape()));
    }
    if (node_->consumed) {
        throw GraphError("backward: graph already consumed; rebuild the forward pass first");
    }
    if (!node_->requires_grad) {
        throw GraphError("backward: root does not require grad");
    }

    // Iterative post-order DFS; input order fixes the traversal, so the
    // resulting order (and hence accumulation order) is deterministic.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->consumed) {
                throw GraphError("backward: reaches a graph already consumed by an earlier backward");
            }
            if (child->requires_grad && !child->is_leaf() && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    node_->grad_buffer().assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) {
            node->backward_fn(*node);
        }
    }
    for (detail::Node* node : order) {
        node->backward_fn = nullptr;
        node->inputs.clear();
        node->consumed = true;
        if (node != node_.get()) {
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

}  // namespace cdr
