#pragma once

// Dense row-major float64 tensors with tape-free reverse-mode autodiff.
//
// A Tensor is a cheap handle onto a shared node. Operations that receive at
// least one input with requires_grad record a backward closure on their output
// node; Tensor::backward() walks the recorded graph once in reverse
// topological order and then releases it.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdr {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
  public:
    using std::domain_error::domain_error;
};

class GraphError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

// Checked mode rejects NaN/Inf at construction and in op outputs. On by default.
void set_checked_mode(bool enabled);
bool checked_mode();

// While alive, ops on this thread do not record graph nodes.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

bool grad_enabled();

// Keeps freed tensor buffers in the heap instead of returning them to the OS
// after every step (glibc only; no-op elsewhere). Call once at startup.
void retain_heap_buffers();

namespace detail {

// Throws NonFiniteError in checked mode.
void check_finite(std::span<const double> values, const char* where);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool consumed = false;      // backward already ran through this root
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& grad_buffer();
    bool is_leaf() const { return inputs.empty(); }
};

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // 1×n row.
    static Tensor row(std::vector<double> values, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    // Rank-2 accessors; a rank-1 tensor is viewed as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const;
    // Mutable access to a leaf's values (optimizer updates, test perturbation).
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Root must be a single-element tensor. Accumulates into every reachable
    // requires_grad leaf, then releases the graph.
    void backward();

    // Copy of the values as a new leaf with no history.
    Tensor detach() const;

    const detail::Node* node() const { return node_.get(); }
    std::shared_ptr<detail::Node> node_ptr() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::Node> node);

  private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

}  // namespace cdr
