#pragma once

// Dense double-precision tensors with reverse-mode differentiation.
//
// Every op applied to a tensor that requires grad appends a node to the
// recording graph (the tape). Nodes carry a monotonically increasing sequence
// number, so sorting by it yields a topological order. Backward rules are
// written with the same differentiable ops, which is what makes
// `grad(..., create_graph=true)` return tensors that can be differentiated
// again.
//
// Tensors are immutable handles: ops never write into an existing tensor, so
// copies behave like values and can be handed to other threads. A graph is
// only ever grown by the thread that builds it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sk {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor;

namespace detail {
struct Node;
struct Access;
}

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const double> data() const;
  double at(std::size_t flat_index) const;
  double item() const;

  // True when gradients can flow into this tensor (leaf created with
  // requires_grad, or the output of a recorded op).
  bool requires_grad() const;
  bool is_leaf() const;
  std::string op_name() const;
  std::uint64_t sequence() const;

  // Same values, cut from the graph.
  Tensor detach() const;
  std::vector<double> to_vector() const;

 private:
  friend struct detail::Access;

  std::shared_ptr<const detail::Node> node_;
};

// Disables recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Shapes broadcast with numpy rules (trailing
// alignment, size-1 dimensions stretch).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& x);
Tensor operator*(const Tensor& x, double factor);
Tensor operator*(double factor, const Tensor& x);
Tensor operator/(const Tensor& x, double divisor);
Tensor operator+(const Tensor& x, double value);
Tensor operator-(double value, const Tensor& x);

Tensor exp(const Tensor& x);
Tensor relu(const Tensor& x);
// Backward passes the upstream gradient where lo < x < hi, zero elsewhere.
Tensor clip(const Tensor& x, double lo, double hi);
// Zero backward everywhere; used for update directions only.
Tensor sign(const Tensor& x);

// ---------------------------------------------------------------------------
// Shape manipulation.

Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);  // N x (rest)
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& x);  // 2-D only
Tensor expand(const Tensor& x, const Shape& shape);
Tensor sum_to(const Tensor& x, const Shape& shape);

Tensor concat_flat(const std::vector<Tensor>& parts);
Tensor slice_flat(const Tensor& x, std::size_t offset, std::size_t length);
Tensor embed_flat(const Tensor& x, std::size_t offset, std::size_t total);

// Fixed sparse linear map: out[out_idx[k]] += weight[k] * in[in_idx[k]].
// Used for gathers, pooling windows and patch insertion.
struct SparseMap {
  Shape in_shape;
  Shape out_shape;
  std::vector<std::uint32_t> out_idx;
  std::vector<std::uint32_t> in_idx;
  std::vector<double> weight;
};
Tensor sparse_apply(const Tensor& x, std::shared_ptr<const SparseMap> map, bool adjoint = false);

// ---------------------------------------------------------------------------
// Reductions and linear algebra.

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor dot(const Tensor& a, const Tensor& b);
// Euclidean norm over all elements. Gradient at the origin is taken as zero.
Tensor l2norm(const Tensor& x);
// Row-wise log-sum-exp of an N x L matrix, returns shape {N}.
Tensor logsumexp_rows(const Tensor& x);

// ---------------------------------------------------------------------------
// Image ops. Layout is N x C x H x W.

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// im2col: returns (C*kh*kw) x (N*Ho*Wo).
Tensor unfold(const Tensor& x, std::size_t kh, std::size_t kw, Conv2dOptions options);
// col2im, the adjoint of unfold; `image_shape` is the N x C x H x W target.
Tensor fold(const Tensor& cols, const Shape& image_shape, std::size_t kh, std::size_t kw,
            Conv2dOptions options);
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions options);
// Window maximum; ties go to the first index in row-major window order.
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);
Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);

// ---------------------------------------------------------------------------
// Losses.

// Mean softmax cross-entropy of N x L logits against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
// Mean cross-entropy against per-row label weights (N x L, rows sum to 1).
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& label_weights);

inline constexpr double kAlignmentStabilizer = 1e-12;

// 1 - <g, c> / ((|g| + eps)(|c| + eps)). Differentiable in both arguments.
Tensor cosine_alignment(const Tensor& g, const Tensor& c);

// ---------------------------------------------------------------------------
// Differentiation.

// d(output)/d(wrt[i]) for a scalar `output`. Unreachable entries come back as
// zeros. With create_graph the results are recorded and can be
// differentiated again.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                         bool create_graph = false);

// Whether `target` is an ancestor of `output` in the recorded graph.
bool depends_on(const Tensor& output, const Tensor& target);

}  // namespace sk
