#pragma once

// Minimal reverse-mode automatic differentiation over Tensor values.
//
// A Var is a node in a dynamically recorded graph. Graph recording happens only
// while gradients are enabled (see NoGradGuard) and at least one input requires
// a gradient, so inference on frozen weights builds no graph at all.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "adabldm/rng.hpp"
#include "adabldm/tensor.hpp"

namespace adabldm::nn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward;
  Parameter* param = nullptr;

  /// Lazily allocated gradient buffer matching value's shape.
  Tensor& grad_buffer();
};

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Owned, named collection of parameters. Copying a ParamSet deep-copies weights,
/// which is how networks are cloned.
class ParamSet {
 public:
  std::size_t add(std::string name, std::vector<int> shape);
  std::size_t add_uniform(std::string name, std::vector<int> shape, double bound, Rng& rng);

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  std::size_t numel() const;

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  Parameter* find(const std::string& name);

  void set_trainable(bool trainable);
  void zero_grad();
  /// FNV-1a over every name and raw value byte.
  std::uint64_t hash() const;

 private:
  std::vector<Parameter> params_;
};

std::string hash_hex(std::uint64_t h);

Var constant(Tensor value);
/// Leaf bound to a parameter; accumulates into Parameter::grad on backward.
Var leaf(Parameter& p);
Var leaf(const Parameter& p);

/// Runs reverse accumulation from a scalar root.
void backward(const Var& root);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var silu(const Var& x);
Var sigmoid(const Var& x);

// Shape.
Var reshape(const Var& x, std::vector<int> shape);
/// Stacks equally shaped inputs along a new leading axis.
Var stack(const std::vector<Var>& xs);
/// (N,C,H,W) -> (N,H*W,C)
Var to_sequence(const Var& x);
/// (N,H*W,C) -> (N,C,H,W)
Var from_sequence(const Var& x, int height, int width);

// Layers.
/// x (N,Cin,H,W), w (Cout,Cin,k,k), b (Cout) or null. Zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample_nearest2x(const Var& x);
/// Affine map over the last axis: x (...,D), w (O,D), b (O) or null.
Var linear(const Var& x, const Var& w, const Var& b);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
/// x (N,C,H,W) plus per-sample channel offsets v (N,C).
Var add_channel(const Var& x, const Var& v);
/// Single-head scaled dot-product attention: q (N,Lq,d), k (N,Lk,d), v (N,Lk,dv).
Var attention(const Var& q, const Var& k, const Var& v);
/// Rows of table (V,D) selected by index -> (n,D).
Var gather_rows(const Var& table, const std::vector<int>& rows);

// Reductions to scalars (shape {1}).
Var mean_squared_error(const Var& x, const Tensor& target);
/// sum_i weight_i * (x_i - target_i)^2
Var weighted_squared_sum(const Var& x, const Tensor& target, const Tensor& weight);

}  // namespace adabldm::nn
