// Reverse-mode autodiff on a linear tape. Every op records its output
// value plus a closure that pushes gradients to its parents; backward()
// sweeps the tape in reverse creation order, which is always a valid
// topological order.
//
// All ops are deterministic: identical inputs give bitwise-identical
// outputs regardless of thread count (matmul-backed ops compute each
// output element with a fixed-order inner loop).

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "sermtl/tensor.hpp"

namespace sermtl {

struct Var {
  std::uint32_t id = 0;
};

class Tape {
 public:
  using BackFn = std::function<void(Tape&, Var)>;

  explicit Tape(std::size_t reserve = 64) { nodes_.reserve(reserve); }

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& val(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient accumulated so far; empty tensor if untouched.
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  Tensor grad_or_zeros(Var v) const;

  // Adds g into v's gradient buffer. No-op when v does not require
  // gradients, so constant inputs cost nothing in backward.
  void accum_grad(Var v, const Tensor& g);

  // Seeds d(root)/d(root) = 1 (root must be a single element) and runs
  // the reverse sweep.
  void backward(Var root);
  // Reverse sweep using gradients already seeded via accum_grad. Lets a
  // caller drive several roots (or externally supplied gradients) in
  // one pass.
  void backward_seeded();

  std::size_t size() const { return nodes_.size(); }

  // Registers a node with an externally computed value and backward
  // closure. Building block for fused ops defined outside the tape
  // (LSTM sequence, CTC, cross-entropy).
  Var make_node(Tensor value, BackFn back, bool requires_grad);

  // ---- elementwise ----
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var neg(Var a) { return scale(a, -1.0); }
  Var relu(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var pow_const(Var a, double p);
  Var mul_const(Var a, Tensor m);

  // ---- linear algebra ----
  Var matmul(Var a, Var b);
  Var affine(Var x, Var w, Var b);  // x[n,din] * w[din,dout] + b[dout]
  Var matvec(Var a, Var x);         // a[m,n] * x[n] -> [m]
  Var vecmat(Var x, Var a);         // x[n] * a[n,m] -> [m]
  Var dot(Var x, Var y);            // -> [1]

  // ---- shape ----
  Var reshape(Var a, Shape shape);
  Var concat(const std::vector<Var>& parts);  // rank-1 concat
  Var slice_row(Var x, std::size_t r);        // x[m,n] -> [n]
  Var element(Var x, std::size_t i);          // -> [1]

  // ---- normalization & reductions ----
  Var softmax(Var x, std::size_t axis);
  // Row softmax over entries where mask != 0; masked entries output 0.
  Var masked_softmax_rows(Var x, Tensor mask);
  // log(x) where mask != 0, else 0. Keeps masked zeros out of log().
  Var log_masked(Var x, Tensor mask);
  Var layer_norm(Var x, Var gain, Var bias, double eps);  // rows of x[n,d]
  Var sum(Var a);  // -> [1]
  Var scale_vec(Var v, Var s);  // v * scalar var s

  // ---- fused model ops ----
  // sum_l softmax-free weighted sum: out[t,d] = sum_l w[l] * stack[l,t,d]
  Var weighted_layer_sum(Var stack, Var w);
  Var l2_normalize_rows(Var x);
  Var gram_rows(Var x);  // x[n,e] -> x x^T [n,n]

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackFn back;
    bool requires_grad = false;
  };

  bool any_grad(std::initializer_list<Var> vs) const;

  std::vector<Node> nodes_;
};

}  // namespace sermtl
