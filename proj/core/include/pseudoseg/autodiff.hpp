#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "pseudoseg/tensor.hpp"

namespace pseudoseg::ad {

// Define-by-run reverse-mode tape over dense double tensors.
//
// A Tape owns its nodes; creation order is a topological order, so the
// backward sweep is a single reverse pass. Tapes are single-threaded by
// design: parallel training builds one tape per image and merges parameter
// gradients in a fixed order afterwards (see trainer.cpp).

class Tape;

struct Node {
  Tensor val;
  const Tensor* ext = nullptr;  // external leaf (parameter) value, not owned
  Tensor grad;
  bool requires_grad = false;
  bool grad_ready = false;
  std::function<void()> backward;
  std::vector<Tensor> saved;  // op scratch kept for the backward pass

  const Tensor& value() const { return ext ? *ext : val; }
  Tensor& grad_ref() {
    if (!grad_ready) {
      grad = Tensor(value().shape());
      grad_ready = true;
    }
    return grad;
  }
};

class Value {
 public:
  Value() = default;
  Value(Tape* t, Node* n) : tape_(t), node_(n) {}
  const Tensor& v() const { return node_->value(); }
  Node* node() const { return node_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return node_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  Node* node_ = nullptr;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf owning its value. requires_grad marks it as a differentiation target.
  Value leaf(Tensor v, bool requires_grad = false);
  // Leaf referencing external storage (model parameters). No copy; the
  // pointee must outlive the tape.
  Value external(const Tensor* v, bool requires_grad = true);
  Value constant(Tensor v) { return leaf(std::move(v), false); }

  Node* make_node(Tensor val, std::initializer_list<Node*> parents);

  // Backward from a scalar root with seed 1.
  void backward(const Value& root) { backward({{root, 1.0}}); }
  // Backward from several scalar roots with given seed weights.
  void backward(const std::vector<std::pair<Value, double>>& seeds);

  // Gradient of the given node; zero tensor if it never received one.
  Tensor grad(const Value& v) const;

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;  // stable addresses
};

// ---- primitive ops -----------------------------------------------------

Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);            // elementwise
Value scale(Value a, double s);
Value add_const(Value a, double c);
Value relu(Value x);
Value pow_const(Value x, double p);     // x must stay positive when p < 1
Value log_clamped(Value x, double floor);
Value clamp_min(Value x, double floor);

Value matmul(Value a, Value b);         // {M,K} x {K,N}
Value matmul_nt(Value a, Value b);      // {M,K} x {N,K}^T -> {M,N}
Value linear(Value x, Value w, Value b);  // rows(x) x {D,E} + bias

Value sum(Value x);                     // -> {1}
Value row_sum(Value x);                 // matrix view -> {rows,1}
Value mul_rows(Value x, Value r);       // broadcast {rows,1} over columns
Value div_rows(Value x, Value r);
Value spatial_mean(Value x);            // {H,W,C} -> {1,C}
Value softmax_rows(Value x);
Value log_softmax_rows(Value x);
Value concat_cols(Value a, Value b);
Value pick(Value x, std::int64_t row, std::int64_t col);  // -> {1}

// 3x3-style convolution over {H,W,Cin} with weight {k*k*Cin, Cout}.
Value conv2d(Value x, Value w, Value b, int ksize, int stride, int pad);
// Half-pixel-centered bilinear resize of {H,W,C}.
Value upsample_bilinear(Value x, int out_h, int out_w);

// Same data, new shape (element count preserved); gradients pass through.
Value reshape(Value x, std::vector<int> shape);

// Identity forward, no gradient flow. The stop-gradient boundary for pseudo
// labels and the SGC inputs.
Value stop_grad(Value x);

// ---- plain-tensor helpers (no tape) --------------------------------------

Tensor matmul_plain(const Tensor& a, const Tensor& b);
Tensor softmax_rows_plain(const Tensor& x);
Tensor bilinear_resize_plain(const Tensor& x, int out_h, int out_w);

}  // namespace pseudoseg::ad
