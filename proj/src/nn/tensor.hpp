#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pnptlab::nn {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// One node of the reverse-mode tape. Values are dense, row-major.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Shape shape, std::vector<T> data) {
    return make(std::move(shape), std::move(data), false);
  }
  static Var constant(Shape shape, T fill = T(0)) {
    std::vector<T> data(numel(shape), fill);
    return make(std::move(shape), std::move(data), false);
  }
  static Var parameter(Shape shape, std::vector<T> data) {
    return make(std::move(shape), std::move(data), true);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + rank() : i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() const { return node_->value; }  // handle semantics
  const std::vector<T>& data() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  // Same data, no tape history; the result never requires grad.
  Var detach() const { return constant(shape(), node_->value); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  static Var make(Shape shape, std::vector<T> data, bool rg) {
    if (numel(shape) != data.size())
      throw ShapeError("data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = rg;
    return Var(std::move(n));
  }

  std::shared_ptr<Node<T>> node_;
};

// Builds the output node for an op. Parents and the backward closure are only
// retained when at least one input requires grad.
template <class T>
Var<T> make_result(Shape shape, std::vector<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& v : inputs) n->parents.push_back(v.ptr());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

// Seeds d(root)/d(root) = 1 (root must be scalar) and propagates to every
// upstream node that requires grad. Gradients accumulate.
template <class T>
void backward(const Var<T>& root);

// Gradient buffer of a parent inside a backward closure, or empty span when
// that parent does not need one.
template <class T>
inline std::span<T> parent_grad(Node<T>& self, std::size_t i) {
  Node<T>& p = *self.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}

}  // namespace pnptlab::nn
