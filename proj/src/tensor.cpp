#include "tcrlm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "tcrlm/threading.hpp"

namespace tcrlm::num {

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

std::span<double> Node::grad_buf() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

}  // namespace detail

using detail::Node;

namespace {

std::atomic<std::uint64_t> g_next_id{1};

thread_local int tl_no_grad_depth = 0;

void validate_shape(const Shape& s) {
  if (s.empty()) fail("ShapeMismatch", "rank-0 shapes are not supported");
  for (int d : s) {
    if (d <= 0) fail("ShapeMismatch", "nonpositive dimension in " + shape_str(s));
  }
}

std::shared_ptr<Node> new_node(Shape s, std::vector<double> v, bool rg) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(s);
  n->values = std::move(v);
  n->requires_grad = rg;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      fail("NonFiniteValue", std::string(op) + " produced NaN/Inf");
    }
  }
}

bool want_tape(std::initializer_list<const Tensor*> inputs) {
  if (tl_no_grad_depth > 0) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Builds the output tensor; records it on the tape (parents + closure) only
// when grad mode is on and some input requires grad.
Tensor make_op(const char* op, Shape shape, std::vector<double> values,
               std::initializer_list<const Tensor*> inputs,
               std::function<void(Node&)> backprop) {
  check_finite(values, op);
  bool tape = want_tape(inputs);
  auto n = new_node(std::move(shape), std::move(values), tape);
  if (tape) {
    n->parents.reserve(inputs.size());
    for (const Tensor* t : inputs) n->parents.push_back(t->handle());
    n->backprop = std::move(backprop);
  }
  return Tensor::wrap(std::move(n));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail("ShapeMismatch", std::string(op) + ": " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
  }
}

void require_2d(const char* op, const Tensor& t) {
  if (t.ndim() != 2) {
    fail("ShapeMismatch", std::string(op) + ": expected 2-D, got " +
                              shape_str(t.shape()));
  }
}

// ---------- matmul kernels ----------
// Per-output-element summation order is a pure function of the shapes
// (ascending k, fixed unroll), so results are bit-identical under any
// thread partition.

constexpr std::int64_t kMmGrainFlops = 1 << 16;

// C[i,j] (+)= Σ_k A[i,k]·B[k,j]
void mm_nn(const double* A, const double* B, double* C, std::int64_t M,
           std::int64_t K, std::int64_t N, bool accumulate) {
  std::int64_t grain = std::max<std::int64_t>(1, kMmGrainFlops / (2 * K * N + 1));
  parallel_for(M, grain, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      double* c = C + i * N;
      if (!accumulate) std::memset(c, 0, std::size_t(N) * sizeof(double));
      const double* a = A + i * K;
      for (std::int64_t k = 0; k < K; ++k) {
        double aik = a[k];
        const double* b = B + k * N;
        for (std::int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
      }
    }
  });
}

// C[i,j] (+)= Σ_k A[i,k]·B[j,k]   (B used transposed)
void mm_nt(const double* A, const double* B, double* C, std::int64_t M,
           std::int64_t K, std::int64_t N, bool accumulate) {
  std::int64_t grain = std::max<std::int64_t>(1, kMmGrainFlops / (2 * K * N + 1));
  parallel_for(M, grain, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      const double* a = A + i * K;
      double* c = C + i * N;
      for (std::int64_t j = 0; j < N; ++j) {
        const double* b = B + j * K;
        double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
        std::int64_t k = 0;
        for (; k + 4 <= K; k += 4) {
          s0 += a[k] * b[k];
          s1 += a[k + 1] * b[k + 1];
          s2 += a[k + 2] * b[k + 2];
          s3 += a[k + 3] * b[k + 3];
        }
        double s = (s0 + s1) + (s2 + s3);
        for (; k < K; ++k) s += a[k] * b[k];
        if (accumulate) c[j] += s; else c[j] = s;
      }
    }
  });
}

// C[i,j] (+)= Σ_k A[k,i]·B[k,j]   (A used transposed)
void mm_tn(const double* A, const double* B, double* C, std::int64_t M,
           std::int64_t K, std::int64_t N, bool accumulate) {
  std::int64_t grain = std::max<std::int64_t>(1, kMmGrainFlops / (2 * K * N + 1));
  parallel_for(M, grain, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      double* c = C + i * N;
      if (!accumulate) std::memset(c, 0, std::size_t(N) * sizeof(double));
      for (std::int64_t k = 0; k < K; ++k) {
        double aki = A[k * M + i];
        const double* b = B + k * N;
        for (std::int64_t j = 0; j < N; ++j) c[j] += aki * b[j];
      }
    }
  });
}

}  // namespace

// ---------- Tensor ----------

Tensor Tensor::zeros(Shape s, bool requires_grad) {
  validate_shape(s);
  std::int64_t n = numel(s);
  return Tensor(new_node(std::move(s), std::vector<double>(std::size_t(n), 0.0),
                         requires_grad));
}

Tensor Tensor::full(Shape s, double v, bool requires_grad) {
  validate_shape(s);
  std::int64_t n = numel(s);
  if (!std::isfinite(v)) fail("NonFiniteValue", "full: fill value is not finite");
  return Tensor(new_node(std::move(s), std::vector<double>(std::size_t(n), v),
                         requires_grad));
}

Tensor Tensor::from(Shape s, std::vector<double> v, bool requires_grad) {
  validate_shape(s);
  if (numel(s) != std::int64_t(v.size())) {
    fail("ShapeMismatch", "from: " + std::to_string(v.size()) +
                              " values for shape " + shape_str(s));
  }
  check_finite(v, "from");
  return Tensor(new_node(std::move(s), std::move(v), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!n_) fail("ShapeMismatch", "use of undefined tensor");
  return n_->shape;
}

std::int64_t Tensor::size() const { return numel(shape()); }

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

std::span<const double> Tensor::values() const {
  if (!n_) fail("ShapeMismatch", "use of undefined tensor");
  return n_->values;
}

std::span<double> Tensor::values_mut() {
  if (!n_) fail("ShapeMismatch", "use of undefined tensor");
  return n_->values;
}

double Tensor::item() const {
  if (size() != 1) {
    fail("NotScalar", "item() on tensor of shape " + shape_str(shape()));
  }
  return values()[0];
}

std::span<const double> Tensor::grad() const {
  if (!n_) fail("ShapeMismatch", "use of undefined tensor");
  if (!n_->requires_grad) {
    fail("TapeConsumed", "grad() on a tensor that does not require grad");
  }
  return n_->grad_buf();
}

std::span<double> Tensor::grad_mut() {
  if (!n_) fail("ShapeMismatch", "use of undefined tensor");
  if (!n_->requires_grad) {
    fail("TapeConsumed", "grad access on a tensor that does not require grad");
  }
  return n_->grad_buf();
}

void Tensor::zero_grad() {
  if (n_ && !n_->grad.empty()) {
    std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }
}

bool grad_enabled() { return tl_no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++tl_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --tl_no_grad_depth; }

// ---------- elementwise / structural ops ----------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  if (a.dim(1) != b.dim(0)) {
    fail("ShapeMismatch", "matmul: " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
  }
  std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> out(std::size_t(M * N));
  mm_nn(a.values().data(), b.values().data(), out.data(), M, K, N, false);
  return make_op("matmul", {int(M), int(N)}, std::move(out), {&a, &b},
                 [M, K, N](Node& n) {
                   auto& A = *n.parents[0];
                   auto& B = *n.parents[1];
                   const double* g = n.grad.data();
                   if (A.requires_grad) {
                     mm_nt(g, B.values.data(), A.grad_buf().data(), M, N, K, true);
                   }
                   if (B.requires_grad) {
                     mm_tn(A.values.data(), g, B.grad_buf().data(), K, M, N, true);
                   }
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op("add", a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      auto g = p->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_op("sub", a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    auto& A = *n.parents[0];
    auto& B = *n.parents[1];
    if (A.requires_grad) {
      auto g = A.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (B.requires_grad) {
      auto g = B.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op("mul", a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    auto& A = *n.parents[0];
    auto& B = *n.parents[1];
    if (A.requires_grad) {
      auto g = A.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * B.values[i];
    }
    if (B.requires_grad) {
      auto g = B.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * A.values[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return make_op("scale", a.shape(), std::move(out), {&a}, [c](Node& n) {
    auto& A = *n.parents[0];
    if (!A.requires_grad) return;
    auto g = A.grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  return make_op("add_scalar", a.shape(), std::move(out), {&a}, [](Node& n) {
    auto& A = *n.parents[0];
    if (!A.requires_grad) return;
    auto g = A.grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return make_op("relu", a.shape(), std::move(out), {&a}, [](Node& n) {
    auto& A = *n.parents[0];
    if (!A.requires_grad) return;
    auto g = A.grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (A.values[i] > 0.0) g[i] += n.grad[i];
    }
  });
}

Tensor exp_elem(const Tensor& a) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  return make_op("exp", a.shape(), std::move(out), {&a}, [](Node& n) {
    auto& A = *n.parents[0];
    if (!A.requires_grad) return;
    auto g = A.grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.values[i];
  });
}

Tensor min_elem(const Tensor& a, const Tensor& b) {
  require_same_shape("min_elem", a, b);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(av[i], bv[i]);
  // Subgradient at ties goes to the first argument.
  return make_op("min_elem", a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    auto& A = *n.parents[0];
    auto& B = *n.parents[1];
    for (std::size_t i = 0; i < n.values.size(); ++i) {
      bool take_a = A.values[i] <= B.values[i];
      Node& p = take_a ? A : B;
      if (p.requires_grad) p.grad_buf()[i] += n.grad[i];
    }
  });
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  require_2d("concat", a);
  require_2d("concat", b);
  if (axis != 0 && axis != 1) fail("ShapeMismatch", "concat: axis must be 0 or 1");
  int other = 1 - axis;
  if (a.dim(other) != b.dim(other)) {
    fail("ShapeMismatch", "concat: " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()) + " on axis " +
                              std::to_string(axis));
  }
  int R = axis == 0 ? a.dim(0) + b.dim(0) : a.dim(0);
  int C = axis == 1 ? a.dim(1) + b.dim(1) : a.dim(1);
  std::vector<double> out(std::size_t(R) * C);
  auto av = a.values();
  auto bv = b.values();
  if (axis == 0) {
    std::copy(av.begin(), av.end(), out.begin());
    std::copy(bv.begin(), bv.end(), out.begin() + av.size());
  } else {
    int ca = a.dim(1), cb = b.dim(1);
    for (int r = 0; r < R; ++r) {
      std::copy(av.begin() + std::size_t(r) * ca,
                av.begin() + std::size_t(r + 1) * ca,
                out.begin() + std::size_t(r) * C);
      std::copy(bv.begin() + std::size_t(r) * cb,
                bv.begin() + std::size_t(r + 1) * cb,
                out.begin() + std::size_t(r) * C + ca);
    }
  }
  int ca = a.dim(1);
  return make_op("concat", {R, C}, std::move(out), {&a, &b},
                 [axis, ca, C](Node& n) {
                   auto& A = *n.parents[0];
                   auto& B = *n.parents[1];
                   if (axis == 0) {
                     if (A.requires_grad) {
                       auto g = A.grad_buf();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                     }
                     if (B.requires_grad) {
                       auto g = B.grad_buf();
                       std::size_t off = A.values.size();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] += n.grad[off + i];
                       }
                     }
                   } else {
                     int R = n.shape[0];
                     int cb = C - ca;
                     if (A.requires_grad) {
                       auto g = A.grad_buf();
                       for (int r = 0; r < R; ++r) {
                         for (int c = 0; c < ca; ++c) {
                           g[std::size_t(r) * ca + c] +=
                               n.grad[std::size_t(r) * C + c];
                         }
                       }
                     }
                     if (B.requires_grad) {
                       auto g = B.grad_buf();
                       for (int r = 0; r < R; ++r) {
                         for (int c = 0; c < cb; ++c) {
                           g[std::size_t(r) * cb + c] +=
                               n.grad[std::size_t(r) * C + ca + c];
                         }
                       }
                     }
                   }
                 });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  require_2d("slice", a);
  if (axis != 0 && axis != 1) fail("ShapeMismatch", "slice: axis must be 0 or 1");
  if (start < 0 || len <= 0 || start + len > a.dim(axis)) {
    fail("ShapeMismatch", "slice: [" + std::to_string(start) + "," +
                              std::to_string(start + len) + ") out of " +
                              shape_str(a.shape()));
  }
  int R = axis == 0 ? len : a.dim(0);
  int C = axis == 1 ? len : a.dim(1);
  int ca = a.dim(1);
  std::vector<double> out(std::size_t(R) * C);
  auto av = a.values();
  for (int r = 0; r < R; ++r) {
    int src_r = axis == 0 ? start + r : r;
    int src_c = axis == 1 ? start : 0;
    std::copy(av.begin() + std::size_t(src_r) * ca + src_c,
              av.begin() + std::size_t(src_r) * ca + src_c + C,
              out.begin() + std::size_t(r) * C);
  }
  return make_op("slice", {R, C}, std::move(out), {&a},
                 [axis, start, ca](Node& n) {
                   auto& A = *n.parents[0];
                   if (!A.requires_grad) return;
                   auto g = A.grad_buf();
                   int R = n.shape[0], C = n.shape[1];
                   for (int r = 0; r < R; ++r) {
                     int src_r = axis == 0 ? start + r : r;
                     int src_c = axis == 1 ? start : 0;
                     for (int c = 0; c < C; ++c) {
                       g[std::size_t(src_r) * ca + src_c + c] +=
                           n.grad[std::size_t(r) * C + c];
                     }
                   }
                 });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op("sum", {1}, {s}, {&a}, [](Node& n) {
    auto& A = *n.parents[0];
    if (!A.requires_grad) return;
    auto g = A.grad_buf();
    double go = n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  double inv = 1.0 / double(a.size());
  return make_op("mean", {1}, {s * inv}, {&a}, [inv](Node& n) {
    auto& A = *n.parents[0];
    if (!A.requires_grad) return;
    auto g = A.grad_buf();
    double go = n.grad[0] * inv;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

// ---------- row-structured ops ----------

Tensor row_softmax(const Tensor& a) {
  require_2d("row_softmax", a);
  int R = a.dim(0), C = a.dim(1);
  std::vector<double> out(std::size_t(R) * C);
  auto av = a.values();
  parallel_for(R, std::max(1, 4096 / (C + 1)), [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const double* x = av.data() + r * C;
      double* y = out.data() + r * C;
      double mx = x[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, x[c]);
      double z = 0.0;
      for (int c = 0; c < C; ++c) {
        y[c] = std::exp(x[c] - mx);
        z += y[c];
      }
      double inv = 1.0 / z;
      for (int c = 0; c < C; ++c) y[c] *= inv;
    }
  });
  return make_op("row_softmax", a.shape(), std::move(out), {&a}, [C](Node& n) {
    auto& A = *n.parents[0];
    if (!A.requires_grad) return;
    auto g = A.grad_buf();
    int R = n.shape[0];
    for (int r = 0; r < R; ++r) {
      const double* y = n.values.data() + std::size_t(r) * C;
      const double* dy = n.grad.data() + std::size_t(r) * C;
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += dy[c] * y[c];
      double* gx = g.data() + std::size_t(r) * C;
      for (int c = 0; c < C; ++c) gx[c] += y[c] * (dy[c] - dot);
    }
  });
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  require_2d("add_row_bias", a);
  if (bias.ndim() != 1 || bias.dim(0) != a.dim(1)) {
    fail("ShapeMismatch", "add_row_bias: " + shape_str(a.shape()) + " + " +
                              shape_str(bias.shape()));
  }
  int R = a.dim(0), C = a.dim(1);
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = bias.values();
  for (int r = 0; r < R; ++r) {
    double* y = out.data() + std::size_t(r) * C;
    for (int c = 0; c < C; ++c) y[c] += bv[c];
  }
  return make_op("add_row_bias", a.shape(), std::move(out), {&a, &bias},
                 [C](Node& n) {
                   auto& A = *n.parents[0];
                   auto& B = *n.parents[1];
                   int R = n.shape[0];
                   if (A.requires_grad) {
                     auto g = A.grad_buf();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                   }
                   if (B.requires_grad) {
                     auto g = B.grad_buf();
                     for (int r = 0; r < R; ++r) {
                       const double* dy = n.grad.data() + std::size_t(r) * C;
                       for (int c = 0; c < C; ++c) g[c] += dy[c];
                     }
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset,
                  double eps) {
  require_2d("layer_norm", x);
  int R = x.dim(0), C = x.dim(1);
  if (gain.ndim() != 1 || gain.dim(0) != C || offset.ndim() != 1 ||
      offset.dim(0) != C) {
    fail("ShapeMismatch", "layer_norm: x " + shape_str(x.shape()) + ", gain " +
                              shape_str(gain.shape()) + ", offset " +
                              shape_str(offset.shape()));
  }
  std::vector<double> out(std::size_t(R) * C);
  auto xv = x.values();
  auto gv = gain.values();
  auto ov = offset.values();
  parallel_for(R, std::max(1, 2048 / (C + 1)), [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const double* xr = xv.data() + r * C;
      double* y = out.data() + r * C;
      double mu = 0.0;
      for (int c = 0; c < C; ++c) mu += xr[c];
      mu /= C;
      double var = 0.0;
      for (int c = 0; c < C; ++c) {
        double d = xr[c] - mu;
        var += d * d;
      }
      var /= C;
      double inv_std = 1.0 / std::sqrt(var + eps);
      for (int c = 0; c < C; ++c) {
        y[c] = (xr[c] - mu) * inv_std * gv[c] + ov[c];
      }
    }
  });
  return make_op(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &offset},
      [C, eps](Node& n) {
        auto& X = *n.parents[0];
        auto& G = *n.parents[1];
        auto& O = *n.parents[2];
        int R = n.shape[0];
        std::span<double> dx = X.requires_grad ? X.grad_buf() : std::span<double>{};
        std::span<double> dg = G.requires_grad ? G.grad_buf() : std::span<double>{};
        std::span<double> db = O.requires_grad ? O.grad_buf() : std::span<double>{};
        std::vector<double> xhat(static_cast<std::size_t>(C));
        for (int r = 0; r < R; ++r) {
          const double* xr = X.values.data() + std::size_t(r) * C;
          const double* dy = n.grad.data() + std::size_t(r) * C;
          double mu = 0.0;
          for (int c = 0; c < C; ++c) mu += xr[c];
          mu /= C;
          double var = 0.0;
          for (int c = 0; c < C; ++c) {
            double d = xr[c] - mu;
            var += d * d;
          }
          var /= C;
          double inv_std = 1.0 / std::sqrt(var + eps);
          for (int c = 0; c < C; ++c) xhat[std::size_t(c)] = (xr[c] - mu) * inv_std;
          if (!dg.empty()) {
            for (int c = 0; c < C; ++c) dg[c] += dy[c] * xhat[std::size_t(c)];
          }
          if (!db.empty()) {
            for (int c = 0; c < C; ++c) db[c] += dy[c];
          }
          if (!dx.empty()) {
            // dxhat = dy∘gain; dx = inv_std·(dxhat − mean(dxhat) − xhat·mean(dxhat∘xhat))
            double m1 = 0.0, m2 = 0.0;
            for (int c = 0; c < C; ++c) {
              double dxh = dy[c] * G.values[std::size_t(c)];
              m1 += dxh;
              m2 += dxh * xhat[std::size_t(c)];
            }
            m1 /= C;
            m2 /= C;
            double* gx = dx.data() + std::size_t(r) * C;
            for (int c = 0; c < C; ++c) {
              double dxh = dy[c] * G.values[std::size_t(c)];
              gx[c] += inv_std * (dxh - m1 - xhat[std::size_t(c)] * m2);
            }
          }
        }
      });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_2d("embedding_lookup", table);
  int V = table.dim(0), D = table.dim(1);
  std::int64_t R = std::int64_t(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= V) {
      fail("TargetOutOfRange", "embedding_lookup: row " + std::to_string(id) +
                                   " outside [0," + std::to_string(V) + ")");
    }
  }
  std::vector<double> out(std::size_t(R) * D);
  auto tv = table.values();
  for (std::int64_t r = 0; r < R; ++r) {
    std::copy(tv.begin() + std::size_t(ids[std::size_t(r)]) * D,
              tv.begin() + std::size_t(ids[std::size_t(r)] + 1) * D,
              out.begin() + std::size_t(r) * D);
  }
  std::vector<int> ids_copy(ids.begin(), ids.end());
  return make_op("embedding_lookup", {int(R), D}, std::move(out), {&table},
                 [ids = std::move(ids_copy), D](Node& n) {
                   auto& T = *n.parents[0];
                   if (!T.requires_grad) return;
                   auto g = T.grad_buf();
                   for (std::size_t r = 0; r < ids.size(); ++r) {
                     const double* dy = n.grad.data() + r * D;
                     double* gt = g.data() + std::size_t(ids[r]) * D;
                     for (int c = 0; c < D; ++c) gt[c] += dy[c];
                   }
                 });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int batch, int len, int n_heads) {
  require_2d("causal_attention", q);
  require_same_shape("causal_attention", q, k);
  require_same_shape("causal_attention", q, v);
  int d = q.dim(1);
  if (q.dim(0) != batch * len || n_heads <= 0 || d % n_heads != 0) {
    fail("ShapeMismatch",
         "causal_attention: rows " + std::to_string(q.dim(0)) + " vs batch " +
             std::to_string(batch) + " x len " + std::to_string(len) +
             ", d=" + std::to_string(d) + " heads=" + std::to_string(n_heads));
  }
  int hd = d / n_heads;
  double scl = 1.0 / std::sqrt(double(hd));
  std::int64_t units = std::int64_t(batch) * n_heads;

  bool tape = want_tape({&q, &k, &v});
  // Attention probabilities are kept only when a backward pass will need
  // them; inference uses a per-thread scratch row.
  auto probs = tape ? std::make_shared<std::vector<double>>(
                          std::size_t(units) * len * len, 0.0)
                    : nullptr;

  std::vector<double> out(std::size_t(batch) * len * d, 0.0);
  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();

  parallel_for(units, 1, [&](std::int64_t u0, std::int64_t u1) {
    std::vector<double> scratch;
    if (!tape) scratch.resize(std::size_t(len) * len);
    for (std::int64_t u = u0; u < u1; ++u) {
      int b = int(u / n_heads);
      int h = int(u % n_heads);
      std::int64_t row0 = std::int64_t(b) * len;
      int col0 = h * hd;
      double* P = tape ? probs->data() + std::size_t(u) * len * len
                       : scratch.data();
      for (int t = 0; t < len; ++t) {
        const double* qt = qv.data() + (row0 + t) * d + col0;
        double* pt = P + std::size_t(t) * len;
        double mx = -1e300;
        for (int s = 0; s <= t; ++s) {
          const double* ks = kv.data() + (row0 + s) * d + col0;
          double dot = 0.0;
          for (int x = 0; x < hd; ++x) dot += qt[x] * ks[x];
          pt[s] = dot * scl;
          mx = std::max(mx, pt[s]);
        }
        double z = 0.0;
        for (int s = 0; s <= t; ++s) {
          pt[s] = std::exp(pt[s] - mx);
          z += pt[s];
        }
        double inv = 1.0 / z;
        double* ot = out.data() + (row0 + t) * d + col0;
        for (int s = 0; s <= t; ++s) {
          pt[s] *= inv;
          const double* vs = vv.data() + (row0 + s) * d + col0;
          double p = pt[s];
          for (int x = 0; x < hd; ++x) ot[x] += p * vs[x];
        }
      }
    }
  });

  return make_op(
      "causal_attention", q.shape(), std::move(out), {&q, &k, &v},
      [probs, batch, len, n_heads, hd, d, scl](Node& n) {
        auto& Q = *n.parents[0];
        auto& K = *n.parents[1];
        auto& V = *n.parents[2];
        std::span<double> dq = Q.requires_grad ? Q.grad_buf() : std::span<double>{};
        std::span<double> dk = K.requires_grad ? K.grad_buf() : std::span<double>{};
        std::span<double> dv = V.requires_grad ? V.grad_buf() : std::span<double>{};
        std::int64_t units = std::int64_t(batch) * n_heads;
        // (b,h) slices of dq/dk/dv are disjoint, so units parallelize.
        parallel_for(units, 1, [&](std::int64_t u0, std::int64_t u1) {
          std::vector<double> ds(static_cast<std::size_t>(len));
          for (std::int64_t u = u0; u < u1; ++u) {
            int b = int(u / n_heads);
            int h = int(u % n_heads);
            std::int64_t row0 = std::int64_t(b) * len;
            int col0 = h * hd;
            const double* P = probs->data() + std::size_t(u) * len * len;
            for (int t = 0; t < len; ++t) {
              const double* pt = P + std::size_t(t) * len;
              const double* dot_ = n.grad.data() + (row0 + t) * d + col0;
              // dp[s] = dOut[t]·V[s]; then softmax backward into ds.
              double gdot = 0.0;
              for (int s = 0; s <= t; ++s) {
                const double* vs = V.values.data() + (row0 + s) * d + col0;
                double dp = 0.0;
                for (int x = 0; x < hd; ++x) dp += dot_[x] * vs[x];
                ds[std::size_t(s)] = dp;
                gdot += dp * pt[s];
              }
              for (int s = 0; s <= t; ++s) {
                ds[std::size_t(s)] = pt[s] * (ds[std::size_t(s)] - gdot) * scl;
              }
              if (!dq.empty()) {
                double* dqt = dq.data() + (row0 + t) * d + col0;
                for (int s = 0; s <= t; ++s) {
                  const double* ks = K.values.data() + (row0 + s) * d + col0;
                  double w = ds[std::size_t(s)];
                  for (int x = 0; x < hd; ++x) dqt[x] += w * ks[x];
                }
              }
              if (!dk.empty()) {
                const double* qt = Q.values.data() + (row0 + t) * d + col0;
                for (int s = 0; s <= t; ++s) {
                  double* dks = dk.data() + (row0 + s) * d + col0;
                  double w = ds[std::size_t(s)];
                  for (int x = 0; x < hd; ++x) dks[x] += w * qt[x];
                }
              }
              if (!dv.empty()) {
                for (int s = 0; s <= t; ++s) {
                  double* dvs = dv.data() + (row0 + s) * d + col0;
                  double p = pt[s];
                  for (int x = 0; x < hd; ++x) dvs[x] += p * dot_[x];
                }
              }
            }
          }
        });
      });
}

namespace {

void check_targets_mask(const char* op, const Tensor& logits,
                        std::span<const int> targets,
                        std::span<const std::uint8_t> mask) {
  require_2d(op, logits);
  int R = logits.dim(0), V = logits.dim(1);
  if (std::int64_t(targets.size()) != R || std::int64_t(mask.size()) != R) {
    fail("ShapeMismatch", std::string(op) + ": " + std::to_string(targets.size()) +
                              " targets, " + std::to_string(mask.size()) +
                              " mask flags for " + std::to_string(R) + " rows");
  }
  for (int r = 0; r < R; ++r) {
    if (mask[std::size_t(r)] && (targets[std::size_t(r)] < 0 ||
                                 targets[std::size_t(r)] >= V)) {
      fail("TargetOutOfRange", std::string(op) + ": target " +
                                   std::to_string(targets[std::size_t(r)]) +
                                   " at row " + std::to_string(r));
    }
  }
}

}  // namespace

Tensor log_prob_positions(const Tensor& logits, std::span<const int> targets,
                          std::span<const std::uint8_t> mask) {
  check_targets_mask("log_prob_positions", logits, targets, mask);
  int R = logits.dim(0), V = logits.dim(1);
  std::vector<double> out(std::size_t(R), 0.0);
  auto lv = logits.values();
  parallel_for(R, std::max(1, 2048 / (V + 1)), [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      if (!mask[std::size_t(r)]) continue;
      const double* z = lv.data() + r * V;
      double mx = z[0];
      for (int c = 1; c < V; ++c) mx = std::max(mx, z[c]);
      double s = 0.0;
      for (int c = 0; c < V; ++c) s += std::exp(z[c] - mx);
      out[std::size_t(r)] = z[targets[std::size_t(r)]] - mx - std::log(s);
    }
  });
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return make_op(
      "log_prob_positions", {R}, std::move(out), {&logits},
      [tgt = std::move(tgt), msk = std::move(msk), V](Node& n) {
        auto& L = *n.parents[0];
        if (!L.requires_grad) return;
        auto g = L.grad_buf();
        int R = n.shape[0];
        parallel_for(R, std::max(1, 2048 / (V + 1)),
                     [&](std::int64_t r0, std::int64_t r1) {
                       for (std::int64_t r = r0; r < r1; ++r) {
                         if (!msk[std::size_t(r)]) continue;
                         double go = n.grad[std::size_t(r)];
                         if (go == 0.0) continue;
                         const double* z = L.values.data() + r * V;
                         double mx = z[0];
                         for (int c = 1; c < V; ++c) mx = std::max(mx, z[c]);
                         double s = 0.0;
                         for (int c = 0; c < V; ++c) s += std::exp(z[c] - mx);
                         double inv = 1.0 / s;
                         double* gr = g.data() + r * V;
                         for (int c = 0; c < V; ++c) {
                           gr[c] -= go * std::exp(z[c] - mx) * inv;
                         }
                         gr[tgt[std::size_t(r)]] += go;
                       }
                     });
      });
}

Tensor segment_sum(const Tensor& x, int n_segments, int segment_len) {
  if (x.ndim() != 1 || x.dim(0) != n_segments * segment_len) {
    fail("ShapeMismatch", "segment_sum: " + shape_str(x.shape()) + " into " +
                              std::to_string(n_segments) + "x" +
                              std::to_string(segment_len));
  }
  std::vector<double> out(std::size_t(n_segments), 0.0);
  auto xv = x.values();
  for (int s = 0; s < n_segments; ++s) {
    const double* p = xv.data() + std::size_t(s) * segment_len;
    double acc = 0.0;
    for (int i = 0; i < segment_len; ++i) acc += p[i];
    out[std::size_t(s)] = acc;
  }
  return make_op("segment_sum", {n_segments}, std::move(out), {&x},
                 [segment_len](Node& n) {
                   auto& X = *n.parents[0];
                   if (!X.requires_grad) return;
                   auto g = X.grad_buf();
                   int S = n.shape[0];
                   for (int s = 0; s < S; ++s) {
                     double go = n.grad[std::size_t(s)];
                     double* gp = g.data() + std::size_t(s) * segment_len;
                     for (int i = 0; i < segment_len; ++i) gp[i] += go;
                   }
                 });
}

Tensor row_entropy_mean(const Tensor& logits,
                        std::span<const std::uint8_t> mask) {
  require_2d("row_entropy_mean", logits);
  int R = logits.dim(0), V = logits.dim(1);
  if (std::int64_t(mask.size()) != R) {
    fail("ShapeMismatch", "row_entropy_mean: " + std::to_string(mask.size()) +
                              " mask flags for " + std::to_string(R) + " rows");
  }
  std::int64_t n_masked = 0;
  for (auto m : mask) n_masked += m ? 1 : 0;
  if (n_masked == 0) fail("ShapeMismatch", "row_entropy_mean: empty mask");
  double inv_n = 1.0 / double(n_masked);
  auto lv = logits.values();
  double total = 0.0;
  for (int r = 0; r < R; ++r) {
    if (!mask[std::size_t(r)]) continue;
    const double* z = lv.data() + std::size_t(r) * V;
    double mx = z[0];
    for (int c = 1; c < V; ++c) mx = std::max(mx, z[c]);
    double s = 0.0;
    for (int c = 0; c < V; ++c) s += std::exp(z[c] - mx);
    double log_z = mx + std::log(s);
    double h = 0.0;
    for (int c = 0; c < V; ++c) {
      double p = std::exp(z[c] - log_z);
      if (p > 0.0) h -= p * (z[c] - log_z);
    }
    total += h;
  }
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return make_op(
      "row_entropy_mean", {1}, {total * inv_n}, {&logits},
      [msk = std::move(msk), V, inv_n](Node& n) {
        auto& L = *n.parents[0];
        if (!L.requires_grad) return;
        auto g = L.grad_buf();
        int R = int(msk.size());
        double go = n.grad[0] * inv_n;
        if (go == 0.0) return;
        for (int r = 0; r < R; ++r) {
          if (!msk[std::size_t(r)]) continue;
          const double* z = L.values.data() + std::size_t(r) * V;
          double mx = z[0];
          for (int c = 1; c < V; ++c) mx = std::max(mx, z[c]);
          double s = 0.0;
          for (int c = 0; c < V; ++c) s += std::exp(z[c] - mx);
          double log_z = mx + std::log(s);
          double h = 0.0;
          for (int c = 0; c < V; ++c) {
            double p = std::exp(z[c] - log_z);
            if (p > 0.0) h -= p * (z[c] - log_z);
          }
          // dH/dz_c = −p_c (log p_c + H); exact-zero probs contribute 0.
          double* gr = g.data() + std::size_t(r) * V;
          for (int c = 0; c < V; ++c) {
            double p = std::exp(z[c] - log_z);
            if (p > 0.0) gr[c] += go * (-p * ((z[c] - log_z) + h));
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask) {
  return scale(sum(log_prob_positions(logits, targets, mask)), -1.0);
}

// ---------- backward ----------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    fail("NotScalar", "backward target must be a scalar tensor");
  }
  Node* root = loss.node();
  if (!root->requires_grad) {
    fail("TapeConsumed",
         "backward target is not connected to a tape (no-grad or detached)");
  }
  // Gather the reachable subgraph; descending creation id is a reverse
  // topological order because an op's parents always predate it.
  std::vector<Node*> nodes;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });

  for (Node* n : nodes) {
    // a consumed node's closure is gone, so any graph reaching it (straight
    // replay or ops stacked on an already-backpropped result) must fail
    // loudly rather than yield silently wrong gradients
    if (n->consumed) {
      fail("TapeConsumed", "tape already replayed; rebuild the graph");
    }
  }

  root->grad_buf()[0] += 1.0;
  for (Node* n : nodes) {
    if (!n->backprop) continue;
    n->grad_buf();  // materialize (an op may be off every grad path yet recorded)
    n->backprop(*n);
    n->consumed = true;
    n->backprop = nullptr;  // release closure memory early
  }
}

// ---------- grad check ----------

namespace {

double rel_error(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-3});
  return std::fabs(a - b) / denom;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double h, double tol) {
  std::vector<double> base(x.values().begin(), x.values().end());
  Shape shape = x.shape();

  Tensor xc = Tensor::from(shape, base, true);
  Tensor loss = f(xc);
  backward(loss);
  std::vector<double> analytic(xc.grad().begin(), xc.grad().end());

  GradCheckReport rep;
  rep.tol = tol;
  rep.n_checked = std::int64_t(base.size());
  NoGradGuard ng;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> vp = base;
    vp[i] += h;
    double fp = f(Tensor::from(shape, std::move(vp))).item();
    std::vector<double> vm = base;
    vm[i] -= h;
    double fm = f(Tensor::from(shape, std::move(vm))).item();
    double fd = (fp - fm) / (2.0 * h);
    rep.max_rel_error = std::max(rep.max_rel_error, rel_error(analytic[i], fd));
  }
  rep.pass = rep.max_rel_error < tol;
  return rep;
}

GradCheckReport grad_check_params(const std::function<Tensor()>& f,
                                  std::span<const Tensor> params, double h,
                                  double tol) {
  for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
  Tensor loss = f();
  backward(loss);

  GradCheckReport rep;
  rep.tol = tol;
  NoGradGuard ng;
  for (const Tensor& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto vals = const_cast<Tensor&>(p).values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double saved = vals[i];
      vals[i] = saved + h;
      double fp = f().item();
      vals[i] = saved - h;
      double fm = f().item();
      vals[i] = saved;
      double fd = (fp - fm) / (2.0 * h);
      rep.max_rel_error = std::max(rep.max_rel_error, rel_error(analytic[i], fd));
      ++rep.n_checked;
    }
  }
  rep.pass = rep.max_rel_error < tol;
  return rep;
}

}  // namespace tcrlm::num
