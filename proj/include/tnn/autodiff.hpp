#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

#include "tnn/ops.hpp"
#include "tnn/tensor.hpp"

// Reverse-mode differentiation: closed-form vector-Jacobian products for every
// binary tensor operation, a recording tape that composes them by the chain
// rule, and a central finite-difference oracle for checking both.

namespace tnn {

// ---- per-operation gradients ----

// 1-D adjoint of the fiber convolution. grad_fiber has the forward *output*
// length; the result has the forward *input* length, and satisfies the
// bilinear adjoint identity
//   <convolve(x, kernel, mode), g> == <x, adjoint_convolve(g, kernel, mode)>
// for all x and g of the matching lengths.
Tensor adjoint_convolve(const Tensor& grad_fiber, const Tensor& kernel_fiber,
                        ConvMode mode = {});

struct VjpResult {
  std::optional<Tensor> grad_a;
  std::optional<Tensor> grad_b;
};

// Vector-Jacobian product of one binary op: gradients of a scalar loss with
// respect to the operands, given the loss gradient w.r.t. the op output.
// Returned gradients always have exactly the operand shapes.
VjpResult vjp(const OpDesc& op, const Tensor& a, const Tensor& b,
              const Tensor& grad_out, bool need_a = true, bool need_b = true);

// ---- finite-difference oracle ----

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per entry.
// eps = 1e-5 balances truncation against cancellation for 64-bit floats; the
// companion tolerance used throughout the tests is 1e-4 relative error.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                              const Tensor& x, double eps = 1e-5);

// ---- recording tape ----

using ValueId = int;

// Accumulated gradients for the gradient-requiring leaves of a tape.
class GradMap {
 public:
  bool contains(ValueId id) const { return grads_.count(id) != 0; }
  const Tensor& at(ValueId id) const;
  const std::unordered_map<ValueId, Tensor>& all() const { return grads_; }

 private:
  friend class Tape;
  std::unordered_map<ValueId, Tensor> grads_;
};

// Records executed operations as a DAG in execution order; backward() replays
// the per-op gradient rules in reverse, accumulating additively over fan-out.
// A tape is single-writer while recording and read-only during backward;
// distinct tapes may be used concurrently from distinct threads.
class Tape {
 public:
  // External input or parameter. Only leaves created with requires_grad
  // appear in the GradMap produced by backward().
  ValueId leaf(Tensor value, bool requires_grad = false);

  // Record one binary tensor op; returns the id of the output value.
  ValueId apply(const OpDesc& op, ValueId a, ValueId b);

  // Structural and elementwise nodes.
  ValueId reshape(ValueId a, const Shape& shape);
  ValueId swapaxes(ValueId a, std::vector<int> perm);
  ValueId relu(ValueId a);
  ValueId add(ValueId a, ValueId b);  // equal shapes
  // value(t) + bias broadcast along `mode`; bias is 1-D of length t.dim(mode).
  ValueId add_bias(ValueId t, ValueId bias, int mode);
  ValueId scale(ValueId a, double factor);

  const Tensor& value(ValueId id) const;
  bool requires_grad(ValueId id) const;
  // Number of recorded nodes (leaves included).
  std::size_t size() const { return nodes_.size(); }

  // Reverse accumulation from `root`, seeded with d(loss)/d(value(root)).
  // Every requires_grad leaf gets an entry (zeros if root does not depend
  // on it).
  GradMap backward(ValueId root, const Tensor& seed) const;

 private:
  enum class Kind { Leaf, Binary, Reshape, Swapaxes, Relu, Add, Bias, Scale };
  struct Node {
    Kind kind;
    OpDesc op = OpOuter{};  // Binary only
    int a = -1, b = -1;
    std::vector<int> perm;  // Swapaxes only
    int bias_mode = 0;      // Bias only
    double factor = 1.0;    // Scale only
    Tensor value;
    bool requires_grad = false;  // Leaf only
    bool needs_grad = false;     // depends on some requires_grad leaf
  };

  const Node& node(ValueId id, const char* what) const;
  ValueId push(Node n);

  std::vector<Node> nodes_;
};

}  // namespace tnn
