#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "fssi/tensor.hpp"

namespace fssi {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Passed to a node's backward function. Input gradients are null for inputs
// that do not require a gradient.
class BackwardContext {
 public:
  BackwardContext(const Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  const Tensor& out_grad() const;
  const Tensor& output() const;
  const Tensor& input(std::size_t i) const;
  Tensor* input_grad(std::size_t i) const;

 private:
  const Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

enum class GradMode { kEnabled, kDisabled };

// Records primitive operations in creation order so that a reverse sweep is a
// reverse topological traversal. Confined to one thread.
class Tape {
 public:
  explicit Tape(GradMode mode = GradMode::kEnabled) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A leaf whose gradient is collected by backward().
  Var leaf(Tensor value);
  // A leaf that never receives a gradient.
  Var constant(Tensor value);
  // Records an operation's output. `backward` may be empty when no input
  // requires a gradient or the tape is in no-grad mode.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  bool grad_enabled() const { return mode_ == GradMode::kEnabled; }
  bool requires_grad(Var v) const;
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(Var v) const;
  // Gradient of the last backward() loss; zeros for unreached nodes.
  Tensor grad(Var v) const;

  void backward(Var loss);

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor grad;  // empty until something flows into it
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;
  Tensor* ensure_grad(std::size_t id) const;

  GradMode mode_;
  bool consumed_ = false;
  mutable std::vector<Node> nodes_;
};

}  // namespace fssi
