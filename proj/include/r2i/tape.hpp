#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "r2i/tensor.hpp"

namespace r2i {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(std::size_t i) const { return value().dim(i); }
};

template <class T>
using Gradients = std::map<std::string, BasicTensor<T>>;

/// Ordered record of executed primitive ops. Backward replays it in reverse.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  struct Node {
    const char* op = "";
    std::vector<std::uint32_t> inputs;
    BasicTensor<T> value;
    BasicTensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable = false;
    std::string name;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(BasicTensor<T> value, std::string name, bool trainable) {
    Node n;
    n.op = "leaf";
    n.value = std::move(value);
    n.requires_grad = trainable;
    n.trainable = trainable;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var<T> constant(BasicTensor<T> value) { return leaf(std::move(value), {}, false); }

  /// Appends an op result. The backward closure is dropped when no input needs a gradient.
  Var<T> record(const char* op, std::initializer_list<Var<T>> inputs, BasicTensor<T> value,
                BackwardFn backward) {
    require_finite(value, op);
    Node n;
    n.op = op;
    for (const auto& v : inputs) {
      check_owned(v);
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    n.value = std::move(value);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const BasicTensor<T>& value(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }
  const Node& node(std::uint32_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of node `id`, zero-initialised on first touch.
  BasicTensor<T>& grad_slot(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(std::uint32_t id, const BasicTensor<T>& g) {
    if (!nodes_[id].requires_grad) return;
    BasicTensor<T>& slot = grad_slot(id);
    require_same_shape(slot, g, "accumulate");
    T* s = slot.ptr();
    const T* p = g.ptr();
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += p[i];
  }

  /// dLoss/dLeaf for every trainable leaf, keyed by leaf name. Untouched leaves get zeros.
  Gradients<T> backward(Var<T> loss) {
    check_owned(loss);
    if (value(loss).size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + shape_string(value(loss).shape()));
    }
    if (nodes_[loss.id].requires_grad) {
      grad_slot(loss.id)[0] = T(1);
      for (std::int64_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        n.backward(*this, static_cast<std::uint32_t>(i));
      }
    }
    Gradients<T> out;
    for (auto& n : nodes_) {
      if (!n.trainable) continue;
      out[n.name] = n.grad.empty() ? BasicTensor<T>(n.value.shape()) : n.grad;
    }
    return out;
  }

 private:
  void check_owned(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw std::logic_error("Var does not belong to this tape");
  }

  std::vector<Node> nodes_;
};

}  // namespace r2i
