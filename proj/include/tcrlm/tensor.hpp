#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tcrlm/error.hpp"

namespace tcrlm::num {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

// One tape node. Creation ids are globally monotone, so sorting reachable
// nodes by descending id gives a reverse topological order (every op's
// inputs were created before it). backprop consumes this node's grad and
// accumulates into its parents' grads; it is released after one replay.
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // materialized lazily, zero-filled
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
  bool consumed = false;

  std::span<double> grad_buf();  // ensure sized to values, zeroed on first use
};

}  // namespace detail

// Shared handle to a tape node. Copies alias the same storage. Values are
// 64-bit floats; all ops check their results for NaN/Inf and throw
// NonFiniteValue instead of propagating silently.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, double v, bool requires_grad = false);
  static Tensor from(Shape s, std::vector<double> v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  int ndim() const { return int(shape().size()); }
  int dim(int i) const { return shape()[size_t(i)]; }
  std::int64_t size() const;

  bool requires_grad() const;

  std::span<const double> values() const;
  // In-place mutation (optimizer / initialization). Must not be called on a
  // tensor that still participates in a tape awaiting backward.
  std::span<double> values_mut();
  double item() const;

  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  detail::Node* node() const { return n_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return n_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;
};

// While any NoGradGuard is alive, ops record nothing on the tape (inference
// mode). Nest freely.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---------- primitive forward set ----------
// Shapes are explicit; there is no implicit broadcasting (scale/add_scalar
// are the only scalar-by-tensor forms).

Tensor matmul(const Tensor& a, const Tensor& b);        // [M,K]·[K,N]
Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor exp_elem(const Tensor& a);
Tensor min_elem(const Tensor& a, const Tensor& b);      // grad to the smaller side; ties to a
Tensor concat(const Tensor& a, const Tensor& b, int axis);  // 2-D
Tensor slice(const Tensor& a, int axis, int start, int len);  // 2-D
Tensor sum(const Tensor& a);                            // -> [1]
Tensor mean(const Tensor& a);                           // -> [1]
Tensor row_softmax(const Tensor& a);                    // [R,C], shift-invariant
Tensor add_row_bias(const Tensor& a, const Tensor& bias);  // [R,C] + [C]
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset,
                  double eps = 1e-5);                   // [R,C] normalized per row

// Row gather: out[r,:] = table[ids[r],:], with accumulation on the backward
// scatter. Serves both token embeddings and position embeddings.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// Fused multi-head causal self-attention over a [B·L, d] activation matrix.
// Head h of item b attends positions t→s≤t with scale 1/sqrt(d/heads).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int batch, int len, int n_heads);

// out[r] = log softmax(logits[r])[targets[r]] for masked rows, 0 elsewhere.
Tensor log_prob_positions(const Tensor& logits, std::span<const int> targets,
                          std::span<const std::uint8_t> mask);

// out[s] = Σ x[s·len .. (s+1)·len). Folds per-position log-probs into
// per-sequence totals.
Tensor segment_sum(const Tensor& x, int n_segments, int segment_len);

// Mean Shannon entropy (nats) of softmax(logits[r]) over masked rows.
Tensor row_entropy_mean(const Tensor& logits, std::span<const std::uint8_t> mask);

// −Σ over masked positions of log softmax(logits)[target]. Plain sum
// (divide by mask count for per-token reporting).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask);

// ---------- backward ----------

// Reverse-replays the tape below `loss`, accumulating ∂loss/∂t into every
// reachable requires_grad tensor. Off-path requires_grad tensors keep (or
// lazily materialize) zero grads. A node's closure runs once; replaying a
// consumed tape throws TapeConsumed.
void backward(const Tensor& loss);

// ---------- verification ----------

struct GradCheckReport {
  double max_rel_error = 0.0;
  double tol = 0.0;
  bool pass = false;
  std::int64_t n_checked = 0;
};

// Central finite differences of f at x against the analytic grad. f must be
// deterministic and scalar-valued. Relative error uses an absolute floor so
// near-zero gradients compare on absolute terms.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double h = 1e-3, double tol = 1e-4);

// Same, perturbing a set of named leaf parameters in place.
GradCheckReport grad_check_params(const std::function<Tensor()>& f,
                                  std::span<const Tensor> params,
                                  double h = 1e-3, double tol = 1e-4);

}  // namespace tcrlm::num
