#include "sklab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "sklab/error.hpp"

namespace sk {

using BackwardFn = std::function<std::vector<Tensor>(
    const std::vector<Tensor>& inputs, const Tensor& grad, const std::vector<bool>& needs)>;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::string op = "leaf";
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct Access {
  static Tensor wrap(std::shared_ptr<const Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }
  static const Node* node(const Tensor& t) { return t.node_.get(); }
};

}  // namespace detail

namespace {

using detail::Access;
using detail::Node;

std::atomic<std::uint64_t> g_sequence{0};
thread_local bool g_grad_enabled = true;

const Node& node_ref(const Tensor& t, const char* op) {
  const Node* n = Access::node(t);
  if (n == nullptr) throw Error(ErrorKind::kInvalidArgument, op, "undefined tensor");
  return *n;
}

void check_finite(const std::string& op, const std::vector<double>& data) {
  for (double v : data) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kNonFinite, op, "non-finite value produced");
  }
}

Tensor make_leaf(Shape shape, std::vector<double> data, bool requires_grad, const std::string& op) {
  if (numel(shape) != data.size()) {
    throw Error(ErrorKind::kShapeMismatch, op,
                "shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                    " elements, got " + std::to_string(data.size()));
  }
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return Access::wrap(std::move(node));
}

// Wraps an op result, recording it when grad mode is on and any input needs it.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool record =
      g_grad_enabled &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (record) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return Access::wrap(std::move(node));
}

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw Error(ErrorKind::kShapeMismatch, op, to_string(a) + " vs " + to_string(b));
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` laid over `out` with zero stride on stretched axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const std::size_t offset = out.size() - in.size();
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    if (in[i] != 1) strides[i + offset] = stride;
    stride *= in[i];
  }
  return strides;
}

bool can_expand(const Shape& in, const Shape& out) {
  if (in.size() > out.size()) return false;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] != 1 && in[i] != out[i + offset]) return false;
  }
  return true;
}

// Calls fn(out_flat, in_flat) over every element of `out` where `in_strides`
// maps the multi-index into a source offset.
template <typename Fn>
void for_each_strided(const Shape& out, const std::vector<std::size_t>& in_strides, Fn&& fn) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  const std::size_t rank = out.size();
  if (rank == 0) {
    fn(std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t in_off = 0;
  const std::size_t inner = out[rank - 1];
  const std::size_t inner_stride = in_strides[rank - 1];
  for (std::size_t flat = 0; flat < total; flat += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(flat + j, in_off + j * inner_stride);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      in_off += in_strides[d];
      if (idx[d] < out[d]) break;
      in_off -= in_strides[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <typename Fn>
Tensor elementwise_unary(const char* op, const Tensor& x, Fn&& fn, BackwardFn backward) {
  const Node& n = node_ref(x, op);
  std::vector<double> out(n.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(n.data[i]);
  return make_result(op, n.shape, std::move(out), {x}, std::move(backward));
}

Tensor mask_tensor(const Tensor& x, double lo, double hi) {
  const auto data = x.data();
  std::vector<double> m(data.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = (data[i] > lo && data[i] < hi) ? 1.0 : 0.0;
  return Tensor(x.shape(), std::move(m));
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::size_t n, c, h, w, kh, kw, stride, pad, ho, wo;
};

ConvGeometry conv_geometry(const char* op, const Shape& image, std::size_t kh, std::size_t kw,
                           Conv2dOptions options) {
  if (image.size() != 4) {
    throw Error(ErrorKind::kShapeMismatch, op, "expected N x C x H x W, got " + to_string(image));
  }
  if (options.stride == 0 || kh == 0 || kw == 0) {
    throw Error(ErrorKind::kInvalidArgument, op, "kernel and stride must be positive");
  }
  ConvGeometry g{image[0], image[1], image[2], image[3], kh, kw, options.stride, options.padding,
                 0, 0};
  if (g.h + 2 * g.pad < kh || g.w + 2 * g.pad < kw) {
    throw Error(ErrorKind::kShapeMismatch, op,
                "kernel larger than padded input " + to_string(image));
  }
  g.ho = (g.h + 2 * g.pad - kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - kw) / g.stride + 1;
  return g;
}

// Visits (col_offset, image_offset) pairs of the im2col layout.
template <typename Fn>
void for_each_patch_element(const ConvGeometry& g, Fn&& fn) {
  const std::size_t cols = g.n * g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const std::size_t row = (c * g.kh + ki) * g.kw + kj;
        for (std::size_t n = 0; n < g.n; ++n) {
          const std::size_t image_base = (n * g.c + c) * g.h;
          for (std::size_t oi = 0; oi < g.ho; ++oi) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
            const std::size_t col_base = row * cols + (n * g.ho + oi) * g.wo;
            const std::size_t row_base = (image_base + static_cast<std::size_t>(ii)) * g.w;
            for (std::size_t oj = 0; oj < g.wo; ++oj) {
              const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
              fn(col_base + oj, row_base + static_cast<std::size_t>(jj));
            }
          }
        }
      }
    }
  }
}

std::shared_ptr<const SparseMap> pool_map(const char* op, const Tensor& x, std::size_t kernel,
                                          std::size_t stride, bool take_max) {
  const ConvGeometry g = conv_geometry(op, x.shape(), kernel, kernel, {stride, 0});
  auto map = std::make_shared<SparseMap>();
  map->in_shape = x.shape();
  map->out_shape = {g.n, g.c, g.ho, g.wo};
  const auto data = x.data();
  const double avg = 1.0 / static_cast<double>(kernel * kernel);
  std::uint32_t out = 0;
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.c; ++c) {
      const std::size_t plane = (n * g.c + c) * g.h * g.w;
      for (std::size_t oi = 0; oi < g.ho; ++oi) {
        for (std::size_t oj = 0; oj < g.wo; ++oj, ++out) {
          std::size_t best = 0;
          double best_value = 0.0;
          bool first = true;
          for (std::size_t ki = 0; ki < kernel; ++ki) {
            for (std::size_t kj = 0; kj < kernel; ++kj) {
              const std::size_t src = plane + (oi * stride + ki) * g.w + oj * stride + kj;
              if (take_max) {
                if (first || data[src] > best_value) {
                  best = src;
                  best_value = data[src];
                  first = false;
                }
              } else {
                map->out_idx.push_back(out);
                map->in_idx.push_back(static_cast<std::uint32_t>(src));
                map->weight.push_back(avg);
              }
            }
          }
          if (take_max) {
            map->out_idx.push_back(out);
            map->in_idx.push_back(static_cast<std::uint32_t>(best));
            map->weight.push_back(1.0);
          }
        }
      }
    }
  }
  return map;
}

}  // namespace

// ---------------------------------------------------------------------------
// Shapes and tensor accessors.

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(make_leaf(std::move(shape), std::move(data), requires_grad, "tensor").node_) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = sk::numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad, "zeros");
}

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = sk::numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, value), false, "full");
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_leaf({}, {value}, requires_grad, "scalar");
}

const Shape& Tensor::shape() const { return node_ref(*this, "shape").shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw Error(ErrorKind::kInvalidArgument, "size", "axis out of range for " + to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ref(*this, "numel").data.size(); }

std::span<const double> Tensor::data() const { return node_ref(*this, "data").data; }

double Tensor::at(std::size_t flat_index) const {
  const Node& n = node_ref(*this, "at");
  if (flat_index >= n.data.size()) throw Error(ErrorKind::kInvalidArgument, "at", "index out of range");
  return n.data[flat_index];
}

double Tensor::item() const {
  const Node& n = node_ref(*this, "item");
  if (n.data.size() != 1) {
    throw Error(ErrorKind::kShapeMismatch, "item", "tensor of shape " + to_string(n.shape) +
                                                       " is not a scalar");
  }
  return n.data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return !node_ || !node_->backward; }
std::string Tensor::op_name() const { return node_ref(*this, "op_name").op; }
std::uint64_t Tensor::sequence() const { return node_ref(*this, "sequence").seq; }

Tensor Tensor::detach() const {
  const Node& n = node_ref(*this, "detach");
  if (!n.requires_grad) return *this;
  return make_leaf(n.shape, n.data, false, "detach");
}

std::vector<double> Tensor::to_vector() const {
  const auto d = data();
  return {d.begin(), d.end()};
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Broadcasting and shape ops.

Tensor expand(const Tensor& x, const Shape& shape) {
  const Node& n = node_ref(x, "expand");
  if (n.shape == shape) return x;
  if (!can_expand(n.shape, shape)) shape_error("expand", n.shape, shape);
  std::vector<double> out(numel(shape));
  for_each_strided(shape, broadcast_strides(n.shape, shape),
                   [&](std::size_t o, std::size_t i) { out[o] = n.data[i]; });
  const Shape in_shape = n.shape;
  return make_result("expand", shape, std::move(out), {x},
                     [in_shape](const std::vector<Tensor>&, const Tensor& g,
                                const std::vector<bool>&) -> std::vector<Tensor> {
                       return {sum_to(g, in_shape)};
                     });
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  const Node& n = node_ref(x, "sum_to");
  if (n.shape == shape) return x;
  if (!can_expand(shape, n.shape)) shape_error("sum_to", n.shape, shape);
  std::vector<double> out(numel(shape), 0.0);
  for_each_strided(n.shape, broadcast_strides(shape, n.shape),
                   [&](std::size_t i, std::size_t o) { out[o] += n.data[i]; });
  const Shape in_shape = n.shape;
  return make_result("sum_to", shape, std::move(out), {x},
                     [in_shape](const std::vector<Tensor>&, const Tensor& g,
                                const std::vector<bool>&) -> std::vector<Tensor> {
                       return {expand(g, in_shape)};
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  const Node& n = node_ref(x, "reshape");
  if (numel(shape) != n.data.size()) shape_error("reshape", n.shape, shape);
  if (shape == n.shape) return x;
  const Shape in_shape = n.shape;
  return make_result("reshape", std::move(shape), n.data, {x},
                     [in_shape](const std::vector<Tensor>&, const Tensor& g,
                                const std::vector<bool>&) -> std::vector<Tensor> {
                       return {reshape(g, in_shape)};
                     });
}

Tensor flatten(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.empty()) throw Error(ErrorKind::kShapeMismatch, "flatten", "scalar has no batch axis");
  return reshape(x, {s[0], x.numel() / std::max<std::size_t>(s[0], 1)});
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Node& n = node_ref(x, "permute");
  const std::size_t rank = n.shape.size();
  std::vector<bool> seen(rank, false);
  if (axes.size() != rank) shape_error("permute", n.shape, Shape(axes.begin(), axes.end()));
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) {
      throw Error(ErrorKind::kInvalidArgument, "permute", "axes are not a permutation");
    }
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(rank);
  std::size_t stride = 1;
  for (std::size_t i = rank; i-- > 0;) {
    in_strides[i] = stride;
    stride *= n.shape[i];
  }
  Shape out_shape(rank);
  std::vector<std::size_t> strides(rank);
  std::vector<std::size_t> inverse(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = n.shape[axes[i]];
    strides[i] = in_strides[axes[i]];
    inverse[axes[i]] = i;
  }
  std::vector<double> out(n.data.size());
  for_each_strided(out_shape, strides, [&](std::size_t o, std::size_t i) { out[o] = n.data[i]; });
  return make_result("permute", out_shape, std::move(out), {x},
                     [inverse](const std::vector<Tensor>&, const Tensor& g,
                               const std::vector<bool>&) -> std::vector<Tensor> {
                       return {permute(g, inverse)};
                     });
}

Tensor transpose(const Tensor& x) {
  if (x.dim() != 2) {
    throw Error(ErrorKind::kShapeMismatch, "transpose", "expected a matrix, got " + to_string(x.shape()));
  }
  return permute(x, {1, 0});
}

Tensor concat_flat(const std::vector<Tensor>& parts) {
  std::vector<double> out;
  std::vector<Shape> shapes;
  for (const Tensor& p : parts) {
    const Node& n = node_ref(p, "concat_flat");
    out.insert(out.end(), n.data.begin(), n.data.end());
    shapes.push_back(n.shape);
  }
  const Shape shape{out.size()};
  return make_result("concat_flat", shape, std::move(out), parts,
                     [shapes](const std::vector<Tensor>&, const Tensor& g,
                              const std::vector<bool>& needs) {
                       std::vector<Tensor> grads(shapes.size());
                       std::size_t offset = 0;
                       for (std::size_t i = 0; i < shapes.size(); ++i) {
                         const std::size_t len = numel(shapes[i]);
                         if (needs[i]) grads[i] = reshape(slice_flat(g, offset, len), shapes[i]);
                         offset += len;
                       }
                       return grads;
                     });
}

Tensor slice_flat(const Tensor& x, std::size_t offset, std::size_t length) {
  const Node& n = node_ref(x, "slice_flat");
  if (offset + length > n.data.size()) {
    throw Error(ErrorKind::kShapeMismatch, "slice_flat", "slice exceeds " + to_string(n.shape));
  }
  std::vector<double> out(n.data.begin() + static_cast<std::ptrdiff_t>(offset),
                          n.data.begin() + static_cast<std::ptrdiff_t>(offset + length));
  const Shape in_shape = n.shape;
  return make_result("slice_flat", {length}, std::move(out), {x},
                     [in_shape, offset](const std::vector<Tensor>&, const Tensor& g,
                                        const std::vector<bool>&) -> std::vector<Tensor> {
                       return {reshape(embed_flat(g, offset, numel(in_shape)), in_shape)};
                     });
}

Tensor embed_flat(const Tensor& x, std::size_t offset, std::size_t total) {
  const Node& n = node_ref(x, "embed_flat");
  if (offset + n.data.size() > total) {
    throw Error(ErrorKind::kShapeMismatch, "embed_flat", "embedding exceeds target length");
  }
  std::vector<double> out(total, 0.0);
  std::copy(n.data.begin(), n.data.end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
  const Shape in_shape = n.shape;
  return make_result("embed_flat", {total}, std::move(out), {x},
                     [in_shape, offset](const std::vector<Tensor>&, const Tensor& g,
                                        const std::vector<bool>&) -> std::vector<Tensor> {
                       return {reshape(slice_flat(g, offset, numel(in_shape)), in_shape)};
                     });
}

Tensor sparse_apply(const Tensor& x, std::shared_ptr<const SparseMap> map, bool adjoint) {
  const Node& n = node_ref(x, "sparse_apply");
  const Shape& in_shape = adjoint ? map->out_shape : map->in_shape;
  const Shape& out_shape = adjoint ? map->in_shape : map->out_shape;
  if (n.shape != in_shape) shape_error("sparse_apply", n.shape, in_shape);
  const auto& src = adjoint ? map->out_idx : map->in_idx;
  const auto& dst = adjoint ? map->in_idx : map->out_idx;
  std::vector<double> out(numel(out_shape), 0.0);
  for (std::size_t k = 0; k < map->weight.size(); ++k) out[dst[k]] += map->weight[k] * n.data[src[k]];
  return make_result("sparse_apply", out_shape, std::move(out), {x},
                     [map, adjoint](const std::vector<Tensor>&, const Tensor& g,
                                    const std::vector<bool>&) -> std::vector<Tensor> {
                       return {sparse_apply(g, map, !adjoint)};
                     });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic.

namespace {

template <typename Fn>
Tensor binary_same_shape(const char* op, const Tensor& a, const Tensor& b, Fn&& fn,
                         BackwardFn backward) {
  const Node& na = node_ref(a, op);
  const Node& nb = node_ref(b, op);
  std::vector<double> out(na.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(na.data[i], nb.data[i]);
  return make_result(op, na.shape, std::move(out), {a, b}, std::move(backward));
}

// Brings both operands to their common broadcast shape.
std::pair<Tensor, Tensor> broadcast_pair(const char* op, const Tensor& a, const Tensor& b) {
  const Shape& sa = node_ref(a, op).shape;
  const Shape& sb = node_ref(b, op).shape;
  if (sa == sb) return {a, b};
  const Shape out = broadcast_shape(op, sa, sb);
  return {expand(a, out), expand(b, out)};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto [x, y] = broadcast_pair("add", a, b);
  return binary_same_shape("add", x, y, std::plus<>(),
                           [](const std::vector<Tensor>&, const Tensor& g,
                              const std::vector<bool>&) -> std::vector<Tensor> { return {g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto [x, y] = broadcast_pair("sub", a, b);
  return binary_same_shape("sub", x, y, std::minus<>(),
                           [](const std::vector<Tensor>&, const Tensor& g,
                              const std::vector<bool>& needs) -> std::vector<Tensor> {
                             return {g, needs[1] ? neg(g) : Tensor()};
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto [x, y] = broadcast_pair("mul", a, b);
  return binary_same_shape("mul", x, y, std::multiplies<>(),
                           [](const std::vector<Tensor>& in, const Tensor& g,
                              const std::vector<bool>& needs) -> std::vector<Tensor> {
                             return {needs[0] ? mul(g, in[1]) : Tensor(),
                                     needs[1] ? mul(g, in[0]) : Tensor()};
                           });
}

Tensor div(const Tensor& a, const Tensor& b) {
  auto [x, y] = broadcast_pair("div", a, b);
  for (double v : y.data()) {
    if (v == 0.0) throw Error(ErrorKind::kNonFinite, "div", "division by zero");
  }
  return binary_same_shape("div", x, y, std::divides<>(),
                           [](const std::vector<Tensor>& in, const Tensor& g,
                              const std::vector<bool>& needs) -> std::vector<Tensor> {
                             Tensor ga, gb;
                             if (needs[0]) ga = div(g, in[1]);
                             if (needs[1]) gb = neg(div(mul(g, in[0]), mul(in[1], in[1])));
                             return {ga, gb};
                           });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double factor) {
  return elementwise_unary("scale", x, [factor](double v) { return v * factor; },
                           [factor](const std::vector<Tensor>&, const Tensor& g,
                                    const std::vector<bool>&) -> std::vector<Tensor> {
                             return {scale(g, factor)};
                           });
}

Tensor add_scalar(const Tensor& x, double value) {
  return elementwise_unary("add_scalar", x, [value](double v) { return v + value; },
                           [](const std::vector<Tensor>&, const Tensor& g,
                              const std::vector<bool>&) -> std::vector<Tensor> { return {g}; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& x) { return neg(x); }
Tensor operator*(const Tensor& x, double factor) { return scale(x, factor); }
Tensor operator*(double factor, const Tensor& x) { return scale(x, factor); }
Tensor operator/(const Tensor& x, double divisor) {
  if (divisor == 0.0) throw Error(ErrorKind::kNonFinite, "div", "division by zero");
  return scale(x, 1.0 / divisor);
}
Tensor operator+(const Tensor& x, double value) { return add_scalar(x, value); }
Tensor operator-(double value, const Tensor& x) { return add_scalar(neg(x), value); }

Tensor exp(const Tensor& x) {
  return elementwise_unary("exp", x, [](double v) { return std::exp(v); },
                           [](const std::vector<Tensor>& in, const Tensor& g,
                              const std::vector<bool>&) -> std::vector<Tensor> {
                             return {mul(g, exp(in[0]))};
                           });
}

Tensor relu(const Tensor& x) {
  return elementwise_unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                           [](const std::vector<Tensor>& in, const Tensor& g,
                              const std::vector<bool>&) -> std::vector<Tensor> {
                             return {mul(g, mask_tensor(in[0], 0.0, HUGE_VAL))};
                           });
}

Tensor clip(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw Error(ErrorKind::kInvalidArgument, "clip", "lo > hi");
  return elementwise_unary("clip", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                           [lo, hi](const std::vector<Tensor>& in, const Tensor& g,
                                    const std::vector<bool>&) -> std::vector<Tensor> {
                             return {mul(g, mask_tensor(in[0], lo, hi))};
                           });
}

Tensor sign(const Tensor& x) {
  return elementwise_unary("sign", x,
                           [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); },
                           [](const std::vector<Tensor>& in, const Tensor&,
                              const std::vector<bool>&) -> std::vector<Tensor> {
                             return {Tensor::zeros(in[0].shape())};
                           });
}

// ---------------------------------------------------------------------------
// Reductions and linear algebra.

Tensor sum(const Tensor& x) {
  const Node& n = node_ref(x, "sum");
  double total = 0.0;
  for (double v : n.data) total += v;
  const Shape in_shape = n.shape;
  return make_result("sum", {}, {total}, {x},
                     [in_shape](const std::vector<Tensor>&, const Tensor& g,
                                const std::vector<bool>&) -> std::vector<Tensor> {
                       return {expand(g, in_shape)};
                     });
}

Tensor sum(const Tensor& x, std::size_t axis) {
  Shape keep = x.shape();
  if (axis >= keep.size()) throw Error(ErrorKind::kInvalidArgument, "sum", "axis out of range");
  keep[axis] = 1;
  Shape dropped = x.shape();
  dropped.erase(dropped.begin() + static_cast<std::ptrdiff_t>(axis));
  return reshape(sum_to(x, keep), dropped);
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw Error(ErrorKind::kInvalidArgument, "mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Node& na = node_ref(a, "matmul");
  const Node& nb = node_ref(b, "matmul");
  if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0]) {
    shape_error("matmul", na.shape, nb.shape);
  }
  const auto m = static_cast<Eigen::Index>(na.shape[0]);
  const auto k = static_cast<Eigen::Index>(na.shape[1]);
  const auto n = static_cast<Eigen::Index>(nb.shape[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  Eigen::Map<const RowMatrix> ma(na.data.data(), m, k);
  Eigen::Map<const RowMatrix> mb(nb.data.data(), k, n);
  Eigen::Map<RowMatrix> mc(out.data(), m, n);
  mc.noalias() = ma * mb;
  return make_result("matmul", {na.shape[0], nb.shape[1]}, std::move(out), {a, b},
                     [](const std::vector<Tensor>& in, const Tensor& g,
                        const std::vector<bool>& needs) -> std::vector<Tensor> {
                       return {needs[0] ? matmul(g, transpose(in[1])) : Tensor(),
                               needs[1] ? matmul(transpose(in[0]), g) : Tensor()};
                     });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("dot", a.shape(), b.shape());
  return sum(mul(a, b));
}

Tensor l2norm(const Tensor& x) {
  const Node& n = node_ref(x, "l2norm");
  double sq = 0.0;
  for (double v : n.data) sq += v * v;
  return make_result("l2norm", {}, {std::sqrt(sq)}, {x},
                     [](const std::vector<Tensor>& in, const Tensor& g,
                        const std::vector<bool>&) -> std::vector<Tensor> {
                       const Tensor norm = l2norm(in[0]);
                       if (norm.item() == 0.0) return {Tensor::zeros(in[0].shape())};
                       return {mul(in[0], expand(div(g, norm), in[0].shape()))};
                     });
}

Tensor logsumexp_rows(const Tensor& x) {
  const Node& n = node_ref(x, "logsumexp_rows");
  if (n.shape.size() != 2 || n.shape[1] == 0) {
    throw Error(ErrorKind::kShapeMismatch, "logsumexp_rows", "expected N x L, got " + to_string(n.shape));
  }
  const std::size_t rows = n.shape[0];
  const std::size_t cols = n.shape[1];
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = n.data.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += std::exp(row[c] - mx);
    out[r] = mx + std::log(acc);
  }
  return make_result("logsumexp_rows", {rows}, std::move(out), {x},
                     [rows, cols](const std::vector<Tensor>& in, const Tensor& g,
                                  const std::vector<bool>&) -> std::vector<Tensor> {
                       const Shape full{rows, cols};
                       const Tensor lse = reshape(logsumexp_rows(in[0]), {rows, 1});
                       const Tensor softmax = exp(sub(in[0], expand(lse, full)));
                       return {mul(expand(reshape(g, {rows, 1}), full), softmax)};
                     });
}

// ---------------------------------------------------------------------------
// Image ops.

Tensor unfold(const Tensor& x, std::size_t kh, std::size_t kw, Conv2dOptions options) {
  const Node& n = node_ref(x, "unfold");
  const ConvGeometry g = conv_geometry("unfold", n.shape, kh, kw, options);
  const Shape out_shape{g.c * kh * kw, g.n * g.ho * g.wo};
  std::vector<double> out(numel(out_shape), 0.0);
  for_each_patch_element(g, [&](std::size_t col, std::size_t img) { out[col] = n.data[img]; });
  const Shape image_shape = n.shape;
  return make_result("unfold", out_shape, std::move(out), {x},
                     [image_shape, kh, kw, options](const std::vector<Tensor>&, const Tensor& grad,
                                                    const std::vector<bool>&) -> std::vector<Tensor> {
                       return {fold(grad, image_shape, kh, kw, options)};
                     });
}

Tensor fold(const Tensor& cols, const Shape& image_shape, std::size_t kh, std::size_t kw,
            Conv2dOptions options) {
  const Node& n = node_ref(cols, "fold");
  const ConvGeometry g = conv_geometry("fold", image_shape, kh, kw, options);
  const Shape expected{g.c * kh * kw, g.n * g.ho * g.wo};
  if (n.shape != expected) shape_error("fold", n.shape, expected);
  std::vector<double> out(numel(image_shape), 0.0);
  for_each_patch_element(g, [&](std::size_t col, std::size_t img) { out[img] += n.data[col]; });
  return make_result("fold", image_shape, std::move(out), {cols},
                     [kh, kw, options](const std::vector<Tensor>&, const Tensor& grad,
                                       const std::vector<bool>&) -> std::vector<Tensor> {
                       return {unfold(grad, kh, kw, options)};
                     });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions options) {
  const Shape& ws = weight.shape();
  const Shape& xs = x.shape();
  if (ws.size() != 4 || xs.size() != 4 || ws[1] != xs[1]) shape_error("conv2d", xs, ws);
  if (bias.shape() != Shape{ws[0]}) shape_error("conv2d", bias.shape(), Shape{ws[0]});
  const ConvGeometry g = conv_geometry("conv2d", xs, ws[2], ws[3], options);
  const Tensor cols = unfold(x, ws[2], ws[3], options);
  const Tensor w2 = reshape(weight, {ws[0], ws[1] * ws[2] * ws[3]});
  Tensor y = matmul(w2, cols);
  y = add(y, reshape(bias, {ws[0], 1}));
  y = reshape(y, {ws[0], g.n, g.ho, g.wo});
  return permute(y, {1, 0, 2, 3});
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  return sparse_apply(x, pool_map("max_pool2d", x, kernel, stride, true));
}

Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  return sparse_apply(x, pool_map("avg_pool2d", x, kernel, stride, false));
}

// ---------------------------------------------------------------------------
// Losses.

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size() || s[0] == 0) {
    throw Error(ErrorKind::kShapeMismatch, "cross_entropy",
                "logits " + to_string(s) + " vs " + std::to_string(labels.size()) + " labels");
  }
  auto map = std::make_shared<SparseMap>();
  map->in_shape = s;
  map->out_shape = {s[0]};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= s[1]) {
      throw Error(ErrorKind::kInvalidArgument, "cross_entropy",
                  "label " + std::to_string(labels[i]) + " outside [0," + std::to_string(s[1]) + ")");
    }
    map->out_idx.push_back(static_cast<std::uint32_t>(i));
    map->in_idx.push_back(static_cast<std::uint32_t>(i * s[1] + static_cast<std::size_t>(labels[i])));
    map->weight.push_back(1.0);
  }
  return mean(sub(logsumexp_rows(logits), sparse_apply(logits, map)));
}

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& label_weights) {
  if (logits.shape() != label_weights.shape() || logits.dim() != 2 || logits.size(0) == 0) {
    shape_error("soft_cross_entropy", logits.shape(), label_weights.shape());
  }
  const double n = static_cast<double>(logits.size(0));
  return scale(sub(sum(logsumexp_rows(logits)), sum(mul(label_weights, logits))), 1.0 / n);
}

Tensor cosine_alignment(const Tensor& g, const Tensor& c) {
  if (g.dim() != 1 || c.dim() != 1 || g.numel() != c.numel()) {
    shape_error("cosine_alignment", g.shape(), c.shape());
  }
  const Tensor denom = mul(add_scalar(l2norm(g), kAlignmentStabilizer),
                           add_scalar(l2norm(c), kAlignmentStabilizer));
  return sub(Tensor::scalar(1.0), div(dot(g, c), denom));
}

// ---------------------------------------------------------------------------
// Differentiation.

namespace {

std::vector<const Node*> collect_graph(const Node* root) {
  std::vector<const Node*> order;
  std::unordered_set<const Node*> seen;
  std::vector<const Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const Tensor& in : n->inputs) {
      const Node* child = Access::node(in);
      if (child && child->requires_grad && seen.insert(child).second) stack.push_back(child);
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq < b->seq; });
  return order;
}

}  // namespace

bool depends_on(const Tensor& output, const Tensor& target) {
  const Node* root = Access::node(output);
  const Node* t = Access::node(target);
  if (!root || !t) return false;
  if (root == t) return true;
  if (!root->requires_grad) return false;
  for (const Node* n : collect_graph(root)) {
    if (n == t) return true;
  }
  return false;
}

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt, bool create_graph) {
  const Node& out = node_ref(output, "grad");
  if (out.data.size() != 1) {
    throw Error(ErrorKind::kShapeMismatch, "grad",
                "output must be scalar, got " + to_string(out.shape));
  }
  if (!out.requires_grad) {
    throw Error(ErrorKind::kNotOnTape, "grad", "output is not recorded on the tape");
  }

  const std::vector<const Node*> order = collect_graph(&out);
  std::unordered_set<const Node*> targets;
  for (const Tensor& w : wrt) targets.insert(&node_ref(w, "grad"));

  // A node is needed when some target is reachable through its inputs.
  std::unordered_set<const Node*> needed;
  for (const Node* n : order) {
    bool need = targets.count(n) > 0;
    for (const Tensor& in : n->inputs) need = need || needed.count(Access::node(in)) > 0;
    if (need) needed.insert(n);
  }

  std::unordered_map<const Node*, Tensor> grads;
  grads.emplace(&out, Tensor::full(out.shape, 1.0));

  const bool previous = g_grad_enabled;
  g_grad_enabled = create_graph;
  try {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const Node* n = *it;
      if (!n->backward || !needed.count(n)) continue;
      auto found = grads.find(n);
      if (found == grads.end()) continue;
      const Tensor upstream = found->second;
      std::vector<bool> needs(n->inputs.size());
      for (std::size_t i = 0; i < needs.size(); ++i) {
        const Node* in = Access::node(n->inputs[i]);
        needs[i] = in->requires_grad && needed.count(in) > 0;
      }
      std::vector<Tensor> input_grads = n->backward(n->inputs, upstream, needs);
      if (input_grads.size() != n->inputs.size()) {
        throw Error(ErrorKind::kInternal, n->op, "backward returned wrong arity");
      }
      for (std::size_t i = 0; i < needs.size(); ++i) {
        if (!needs[i] || !input_grads[i].defined()) continue;
        const Node* in = Access::node(n->inputs[i]);
        if (input_grads[i].shape() != in->shape) {
          throw Error(ErrorKind::kInternal, n->op,
                      "backward shape " + to_string(input_grads[i].shape()) + " for input " +
                          to_string(in->shape));
        }
        auto [slot, inserted] = grads.try_emplace(in, input_grads[i]);
        if (!inserted) slot->second = add(slot->second, input_grads[i]);
      }
      if (!n->inputs.empty() && !targets.count(n)) grads.erase(n);
    }
  } catch (...) {
    g_grad_enabled = previous;
    throw;
  }
  g_grad_enabled = previous;

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    auto found = grads.find(Access::node(w));
    if (found == grads.end()) {
      result.push_back(Tensor::zeros(w.shape()));
    } else {
      result.push_back(create_graph ? found->second : found->second.detach());
    }
  }
  return result;
}

}  // namespace sk
