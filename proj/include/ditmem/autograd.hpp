#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ditmem/freq_filter.hpp"
#include "ditmem/tensor.hpp"

namespace ditmem {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives this node's accumulated gradient and pushes into parents.
  std::function<void(const Tensor&)> backward;
};

}  // namespace detail

// Handle to a value in a reverse-mode autodiff graph. Operations on inputs
// that do not require gradients record nothing, so frozen-only computation
// runs tape-free.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  static Var leaf(Tensor value, bool requires_grad);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  // Internal: used by op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Var from_node(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Accumulates d(loss)/d(leaf) into every leaf that requires gradients.
// loss must be a single-element tensor.
void backward(const Var& loss);

namespace ag {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

// Row broadcasting over rank-2 x [N, d] with vectors of length d.
Var add_rows(const Var& x, const Var& bias);
Var mul_rows(const Var& x, const Var& gain);
// x * (1 + scale) + shift
Var modulate(const Var& x, const Var& shift, const Var& scale);

Var matmul(const Var& a, const Var& b);
// x [N, in] * w [in, out] + b [out]
Var linear(const Var& x, const Var& w, const Var& b);

Var layer_norm(const Var& x, double eps = 1e-6);
Var relu(const Var& x);
Var gelu(const Var& x);
Var silu(const Var& x);

// Multi-head scaled dot-product attention without masking.
// q [N, d], k [M, d], v [M, d] -> [N, d].
Var attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads);

Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& x, std::size_t start, std::size_t count);
Var reshape(const Var& x, Shape shape);
// out[i] = x[index[i]]; backward scatter-adds.
Var gather(const Var& x, std::vector<std::size_t> index, Shape out_shape);

// Same-padded stride-1 3D convolution. x [B, Ci, D, H, W], w [Co, Ci, kd, kh, kw], b [Co].
Var conv3d(const Var& x, const Var& w, const Var& b);
// Non-overlapping max pooling with floor division. x [B, C, D, H, W].
Var max_pool3d(const Var& x, std::size_t pd, std::size_t ph, std::size_t pw);

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};
// Per-channel normalization of x [B, C, D, H, W]. With batch_stats the batch
// moments are used and written out; otherwise running_mean/var are used.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, bool training,
               std::span<const double> running_mean, std::span<const double> running_var,
               double eps, BatchStats* batch_stats);

// Spectral band filter over the FFT axes (see freq::apply_filter).
Var spectral_filter(const Var& x, const freq::FrequencyMask& mask, bool residual);

Var sum(const Var& x);
Var mean(const Var& x);
// Mean squared error against a constant target.
Var mse(const Var& pred, const Tensor& target);

}  // namespace ag
}  // namespace ditmem
