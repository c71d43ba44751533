#include "mexfuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "mexfuse/errors.hpp"
#include "tensor_impl.hpp"

namespace mexfuse {

using detail::Buffer;
using detail::Edge;
using detail::GradSink;
using detail::Node;
using detail::TensorAccess;
using detail::TensorImpl;

std::size_t shape_numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (const std::size_t e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

Buffer::Buffer(std::size_t n) : values_(n, 0.0), ledger_(current_context().shared_ledger()) {
  ledger_->allocate(values_.size());
}

Buffer::Buffer(std::vector<double> values)
    : values_(std::move(values)), ledger_(current_context().shared_ledger()) {
  ledger_->allocate(values_.size());
}

Buffer::~Buffer() { ledger_->release(values_.size()); }

const std::shared_ptr<TensorImpl>& TensorAccess::impl(const Tensor& t) { return t.impl_; }

Tensor TensorAccess::wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

}  // namespace detail

namespace {

using BufferPtr = std::shared_ptr<Buffer>;

const TensorImpl& checked(const Tensor& t, const char* op) {
  const auto& p = TensorAccess::impl(t);
  if (!p) throw ContractError(std::string(op) + ": undefined tensor");
  return *p;
}

const BufferPtr& data_of(const Tensor& t) { return TensorAccess::impl(t)->data; }

void round_to_dtype(DType dtype, std::span<double> values) {
  if (dtype != DType::f32) return;
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

DType promote(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->dtype() == DType::f32) return DType::f32;
  }
  return DType::f64;
}

Edge edge_for(const Tensor& t) {
  const auto& impl = TensorAccess::impl(t);
  if (impl->grad_fn) return Edge{impl->grad_fn, nullptr};
  if (impl->requires_grad) return Edge{nullptr, impl};
  return Edge{};
}

/// Wraps a computed buffer as an op result and records a tape node when any
/// input participates in differentiation.
Tensor finish(Shape shape, DType dtype, BufferPtr data, const char* op,
              std::span<const Tensor* const> inputs, detail::BackwardFn backward) {
  round_to_dtype(dtype, data->span());
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  impl->data = std::move(data);
  if (current_context().grad_enabled()) {
    std::vector<Edge> edges;
    edges.reserve(inputs.size());
    bool any = false;
    for (const Tensor* t : inputs) {
      edges.push_back(edge_for(*t));
      any = any || edges.back().active();
    }
    if (any) {
      auto node = std::make_shared<Node>();
      node->op = op;
      node->out_numel = impl->data->size();
      node->edges = std::move(edges);
      node->backward = std::move(backward);
      impl->grad_fn = std::move(node);
      impl->requires_grad = true;
    }
  }
  return TensorAccess::wrap(std::move(impl));
}

Tensor finish(Shape shape, DType dtype, BufferPtr data, const char* op,
              std::initializer_list<const Tensor*> inputs, detail::BackwardFn backward) {
  const std::vector<const Tensor*> list(inputs);
  return finish(std::move(shape), dtype, std::move(data), op,
                std::span<const Tensor* const>(list), std::move(backward));
}

BufferPtr new_buffer(std::size_t n) { return std::make_shared<Buffer>(n); }

void count_flops(std::uint64_t n) { current_context().ledger().add_flops(n); }

// C[m×n] += A[m×k] · B[k×n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  count_flops(static_cast<std::uint64_t>(m) * n * k);
}

// C[m×n] += A[m×k] · B[n×k]ᵀ
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
  count_flops(static_cast<std::uint64_t>(m) * n * k);
}

// C[m×n] += A[k×m]ᵀ · B[k×n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  count_flops(static_cast<std::uint64_t>(m) * n * k);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

template <typename F, typename D>
Tensor unary(const Tensor& a, const char* op, F&& f, D&& derivative_from_input) {
  checked(a, op);
  auto out = new_buffer(a.numel());
  const auto in = a.values();
  auto o = out->span();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  BufferPtr saved = data_of(a);
  return finish(a.shape(), a.dtype(), std::move(out), op, {&a},
                [saved, derivative_from_input](std::span<const double> g, const GradSink& sink) {
                  auto dx = sink.at(0);
                  const auto x = saved->span();
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    dx[i] += g[i] * derivative_from_input(x[i]);
                  }
                });
}

struct AxisSplit {
  std::size_t outer;
  std::size_t length;
  std::size_t inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  out.reserve(shape.size() - 1);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, std::optional<DType> dtype) {
  return full(std::move(shape), 0.0, dtype);
}

Tensor Tensor::full(Shape shape, double value, std::optional<DType> dtype) {
  std::vector<double> values(shape_numel(shape), value);
  return from_values(std::move(shape), std::move(values), dtype);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, std::optional<DType> dtype) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("from_values: shape " + shape_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = dtype.value_or(default_dtype());
  impl->data = std::make_shared<Buffer>(std::move(values));
  round_to_dtype(impl->dtype, impl->data->span());
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_values({}, {value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return from_values({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(m * n);
  for (const auto& row : rows) {
    if (row.size() != n) throw DimensionError("matrix: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return from_values({m, n}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> values(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) values[i * n + i] = 1.0;
  return from_values({n, n}, std::move(values));
}

const TensorImpl& Tensor::impl() const { return checked(*this, "tensor"); }

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::extent(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data->size(); }

DType Tensor::dtype() const { return impl().dtype; }

std::span<const double> Tensor::values() const { return std::as_const(*impl().data).span(); }

std::span<double> Tensor::values_mut() {
  if (impl().grad_fn) throw ContractError("values_mut: tensor is produced by a recorded op");
  return impl_->data->span();
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + shape_string(shape()));
  return values()[0];
}

double Tensor::at(std::size_t i) const {
  require_rank(*this, 1, "at");
  if (i >= shape()[0]) throw DimensionError("at: index out of range");
  return values()[i];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  require_rank(*this, 2, "at");
  const Shape& s = shape();
  if (i >= s[0] || j >= s[1]) throw DimensionError("at: index out of range");
  return values()[i * s[1] + j];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  require_rank(*this, 3, "at");
  const Shape& s = shape();
  if (i >= s[0] || j >= s[1] || k >= s[2]) throw DimensionError("at: index out of range");
  return values()[(i * s[1] + j) * s[2] + k];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

Tensor& Tensor::set_requires_grad(bool enabled) {
  if (impl().grad_fn) throw ContractError("set_requires_grad: only leaves can be toggled");
  impl_->requires_grad = enabled;
  return *this;
}

bool Tensor::is_leaf() const { return impl().grad_fn == nullptr; }

bool Tensor::has_grad() const { return impl().grad != nullptr; }

std::span<const double> Tensor::grad() const {
  if (!impl().grad) throw ContractError("grad: no gradient accumulated");
  return std::as_const(*impl_->grad).span();
}

void Tensor::zero_grad() {
  checked(*this, "zero_grad");
  impl_->grad.reset();
}

Tensor Tensor::detach() const {
  const auto v = values();
  return from_values(shape(), std::vector<double>(v.begin(), v.end()), dtype());
}

void Tensor::backward() const {
  const TensorImpl& root = impl();
  if (root.data->size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_string(root.shape));
  }
  if (!root.grad_fn) {
    if (!root.requires_grad) return;
    if (!root.grad) impl_->grad = std::make_unique<Buffer>(1);
    impl_->grad->span()[0] += 1.0;
    return;
  }
  if (!root.grad_fn->backward) throw ContractError("backward: tape already released");

  // Post-order DFS over interior nodes, then sweep in reverse.
  // Owning pointers: clearing a node's edges below must not free children
  // that are still waiting in the sweep.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{root.grad_fn, 0}};
  seen.insert(root.grad_fn.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->edges.size()) {
      std::shared_ptr<Node> child = node->edges[next++].node;
      if (child != nullptr && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, std::unique_ptr<Buffer>> pending;
  {
    auto seed = std::make_unique<Buffer>(1);
    seed->span()[0] = 1.0;
    pending.emplace(root.grad_fn.get(), std::move(seed));
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->get();
    auto found = pending.find(node);
    if (found != pending.end()) {
      std::unique_ptr<Buffer> grad_out = std::move(found->second);
      pending.erase(found);
      std::vector<std::span<double>> targets;
      targets.reserve(node->edges.size());
      for (const Edge& e : node->edges) {
        if (e.node) {
          auto& slot = pending[e.node.get()];
          if (!slot) slot = std::make_unique<Buffer>(e.node->out_numel);
          targets.push_back(slot->span());
        } else if (e.leaf) {
          if (!e.leaf->grad) e.leaf->grad = std::make_unique<Buffer>(e.leaf->data->size());
          targets.push_back(e.leaf->grad->span());
        } else {
          targets.emplace_back();
        }
      }
      node->backward(std::as_const(*grad_out).span(), GradSink(std::move(targets)));
    }
    node->backward = nullptr;
    node->edges.clear();
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  checked(a, "matmul");
  checked(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto out = new_buffer(m * n);
  gemm_nn(m, n, k, a.values().data(), b.values().data(), out->data());
  BufferPtr sa = data_of(a), sb = data_of(b);
  return finish({m, n}, promote({&a, &b}), std::move(out), "matmul", {&a, &b},
                [sa, sb, m, n, k](std::span<const double> g, const GradSink& sink) {
                  if (sink.needs(0)) gemm_nt(m, k, n, g.data(), sb->data(), sink.at(0).data());
                  if (sink.needs(1)) gemm_tn(k, n, m, sa->data(), g.data(), sink.at(1).data());
                });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  checked(a, "matmul_nt");
  checked(b, "matmul_nt");
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
    throw DimensionError("matmul_nt: cannot multiply " + shape_string(a.shape()) +
                         " by transpose of " + shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  auto out = new_buffer(m * n);
  gemm_nt(m, n, k, a.values().data(), b.values().data(), out->data());
  BufferPtr sa = data_of(a), sb = data_of(b);
  return finish({m, n}, promote({&a, &b}), std::move(out), "matmul_nt", {&a, &b},
                [sa, sb, m, n, k](std::span<const double> g, const GradSink& sink) {
                  if (sink.needs(0)) gemm_nn(m, k, n, g.data(), sb->data(), sink.at(0).data());
                  if (sink.needs(1)) gemm_tn(n, k, m, g.data(), sa->data(), sink.at(1).data());
                });
}

Tensor transpose(const Tensor& a) {
  checked(a, "transpose");
  require_rank(a, 2, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  auto out = new_buffer(m * n);
  const auto in = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out->span()[j * m + i] = in[i * n + j];
  return finish({n, m}, a.dtype(), std::move(out), "transpose", {&a},
                [m, n](std::span<const double> g, const GradSink& sink) {
                  auto dx = sink.at(0);
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[j * m + i];
                });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  checked(x, "linear");
  checked(w, "linear");
  checked(bias, "linear");
  if (w.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != w.shape()[1] || x.rank() == 0 ||
      x.shape().back() != w.shape()[0]) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(w.shape()) + " and bias " + shape_string(bias.shape()));
  }
  const std::size_t d_in = w.shape()[0], d_out = w.shape()[1];
  const std::size_t rows = x.numel() / d_in;
  auto out = new_buffer(rows * d_out);
  {
    auto o = out->span();
    const auto bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(bv.begin(), bv.end(), o.begin() + static_cast<std::ptrdiff_t>(r * d_out));
  }
  gemm_nn(rows, d_out, d_in, x.values().data(), w.values().data(), out->data());
  Shape shape = x.shape();
  shape.back() = d_out;
  BufferPtr sx = data_of(x), sw = data_of(w);
  return finish(std::move(shape), promote({&x, &w, &bias}), std::move(out), "linear",
                {&x, &w, &bias},
                [sx, sw, rows, d_in, d_out](std::span<const double> g, const GradSink& sink) {
                  if (sink.needs(0)) gemm_nt(rows, d_in, d_out, g.data(), sw->data(), sink.at(0).data());
                  if (sink.needs(1)) gemm_tn(d_in, d_out, rows, sx->data(), g.data(), sink.at(1).data());
                  if (sink.needs(2)) {
                    auto db = sink.at(2);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d_out; ++j) db[j] += g[r * d_out + j];
                  }
                });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  checked(a, "add");
  checked(b, "add");
  require_same_shape(a, b, "add");
  auto out = new_buffer(a.numel());
  const auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) out->span()[i] = x[i] + y[i];
  return finish(a.shape(), promote({&a, &b}), std::move(out), "add", {&a, &b},
                [](std::span<const double> g, const GradSink& sink) {
                  for (std::size_t k = 0; k < 2; ++k) {
                    if (!sink.needs(k)) continue;
                    auto d = sink.at(k);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                  }
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  checked(a, "sub");
  checked(b, "sub");
  require_same_shape(a, b, "sub");
  auto out = new_buffer(a.numel());
  const auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) out->span()[i] = x[i] - y[i];
  return finish(a.shape(), promote({&a, &b}), std::move(out), "sub", {&a, &b},
                [](std::span<const double> g, const GradSink& sink) {
                  if (sink.needs(0)) {
                    auto d = sink.at(0);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                  }
                  if (sink.needs(1)) {
                    auto d = sink.at(1);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
                  }
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  checked(a, "mul");
  checked(b, "mul");
  require_same_shape(a, b, "mul");
  auto out = new_buffer(a.numel());
  const auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) out->span()[i] = x[i] * y[i];
  BufferPtr sa = data_of(a), sb = data_of(b);
  return finish(a.shape(), promote({&a, &b}), std::move(out), "mul", {&a, &b},
                [sa, sb](std::span<const double> g, const GradSink& sink) {
                  if (sink.needs(0)) {
                    auto d = sink.at(0);
                    const auto y = sb->span();
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
                  }
                  if (sink.needs(1)) {
                    auto d = sink.at(1);
                    const auto x = sa->span();
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
                  }
                });
}

Tensor affine(const Tensor& a, double alpha, double beta) {
  checked(a, "affine");
  auto out = new_buffer(a.numel());
  const auto x = a.values();
  for (std::size_t i = 0; i < x.size(); ++i) out->span()[i] = alpha * x[i] + beta;
  return finish(a.shape(), a.dtype(), std::move(out), "affine", {&a},
                [alpha](std::span<const double> g, const GradSink& sink) {
                  auto d = sink.at(0);
                  for (std::size_t i = 0; i < g.size(); ++i) d[i] += alpha * g[i];
                });
}

Tensor scale(const Tensor& a, double factor) { return affine(a, factor, 0.0); }

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary(
      a, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, "tanh", [](double v) { return std::tanh(v); },
      [](double v) {
        const double t = std::tanh(v);
        return 1.0 - t * t;
      });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  checked(a, "sum");
  auto out = new_buffer(1);
  double acc = 0.0;
  for (const double v : a.values()) acc += v;
  out->span()[0] = acc;
  return finish({}, a.dtype(), std::move(out), "sum", {&a},
                [](std::span<const double> g, const GradSink& sink) {
                  for (double& d : sink.at(0)) d += g[0];
                });
}

Tensor mean(const Tensor& a) {
  checked(a, "mean");
  if (a.numel() == 0) throw DegenerateInputError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor pool_avg(const Tensor& x, std::size_t axis) {
  checked(x, "pool_avg");
  if (axis >= x.rank()) {
    throw DimensionError("pool_avg: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.length == 0) throw DegenerateInputError("pool_avg: empty axis " + std::to_string(axis));
  auto out = new_buffer(s.outer * s.inner);
  const auto in = x.values();
  const double inv = 1.0 / static_cast<double>(s.length);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.length; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        out->span()[o * s.inner + i] += in[(o * s.length + l) * s.inner + i];
  for (double& v : out->span()) v *= inv;
  return finish(drop_axis(x.shape(), axis), x.dtype(), std::move(out), "pool_avg", {&x},
                [s, inv](std::span<const double> g, const GradSink& sink) {
                  auto d = sink.at(0);
                  for (std::size_t o = 0; o < s.outer; ++o)
                    for (std::size_t l = 0; l < s.length; ++l)
                      for (std::size_t i = 0; i < s.inner; ++i)
                        d[(o * s.length + l) * s.inner + i] += inv * g[o * s.inner + i];
                });
}

Tensor pool_max(const Tensor& x, std::size_t axis) {
  checked(x, "pool_max");
  if (axis >= x.rank()) {
    throw DimensionError("pool_max: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.length == 0) throw DegenerateInputError("pool_max: empty axis " + std::to_string(axis));
  auto out = new_buffer(s.outer * s.inner);
  std::vector<std::size_t> argmax(s.outer * s.inner, 0);
  const auto in = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      double best_v = in[o * s.length * s.inner + i];
      for (std::size_t l = 1; l < s.length; ++l) {
        const double v = in[(o * s.length + l) * s.inner + i];
        if (v > best_v) {
          best_v = v;
          best = l;
        }
      }
      out->span()[o * s.inner + i] = best_v;
      argmax[o * s.inner + i] = best;
    }
  }
  return finish(drop_axis(x.shape(), axis), x.dtype(), std::move(out), "pool_max", {&x},
                [s, argmax = std::move(argmax)](std::span<const double> g, const GradSink& sink) {
                  auto d = sink.at(0);
                  for (std::size_t o = 0; o < s.outer; ++o)
                    for (std::size_t i = 0; i < s.inner; ++i) {
                      const std::size_t l = argmax[o * s.inner + i];
                      d[(o * s.length + l) * s.inner + i] += g[o * s.inner + i];
                    }
                });
}

Tensor softmax_rows(const Tensor& a) {
  checked(a, "softmax_rows");
  if (a.rank() == 0) throw DimensionError("softmax_rows: scalar input");
  const std::size_t cols = a.shape().back();
  if (cols == 0) throw DegenerateInputError("softmax_rows: empty rows");
  const std::size_t rows = a.numel() / cols;
  auto out = new_buffer(a.numel());
  const auto in = a.values();
  auto o = out->span();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = in.subspan(r * cols, cols);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[r * cols + j] = std::exp(row[j] - mx);
      total += o[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[r * cols + j] /= total;
  }
  BufferPtr saved_out = out;
  return finish(a.shape(), a.dtype(), std::move(out), "softmax_rows", {&a},
                [saved_out, rows, cols](std::span<const double> g, const GradSink& sink) {
                  auto d = sink.at(0);
                  const auto y = saved_out->span();
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
                    for (std::size_t j = 0; j < cols; ++j)
                      d[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
                  }
                });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  checked(a, "cosine_similarity");
  checked(b, "cosine_similarity");
  if (a.rank() != 1 || a.shape() != b.shape()) {
    throw DimensionError("cosine_similarity: expected equal-length vectors, got " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const auto x = a.values(), y = b.values();
  double dot = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  if (xx == 0.0 || yy == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm input");
  const double nx = std::sqrt(xx), ny = std::sqrt(yy);
  const double raw = dot / (nx * ny);
  const double c = std::clamp(raw, -1.0, 1.0);
  const bool clamped = raw != c;
  auto out = new_buffer(1);
  out->span()[0] = c;
  BufferPtr sa = data_of(a), sb = data_of(b);
  return finish({}, promote({&a, &b}), std::move(out), "cosine_similarity", {&a, &b},
                [sa, sb, nx, ny, c, clamped](std::span<const double> g, const GradSink& sink) {
                  if (clamped) return;
                  const auto x = sa->span(), y = sb->span();
                  const double inv = 1.0 / (nx * ny);
                  if (sink.needs(0)) {
                    auto d = sink.at(0);
                    for (std::size_t i = 0; i < x.size(); ++i)
                      d[i] += g[0] * (y[i] * inv - c * x[i] / (nx * nx));
                  }
                  if (sink.needs(1)) {
                    auto d = sink.at(1);
                    for (std::size_t i = 0; i < y.size(); ++i)
                      d[i] += g[0] * (x[i] * inv - c * y[i] / (ny * ny));
                  }
                });
}

// ---------------------------------------------------------------------------
// Structural

Tensor select(const Tensor& x, std::size_t index) {
  checked(x, "select");
  if (x.rank() == 0 || index >= x.shape()[0]) {
    throw DimensionError("select: index " + std::to_string(index) + " invalid for shape " +
                         shape_string(x.shape()));
  }
  const std::size_t inner = x.numel() / x.shape()[0];
  auto out = new_buffer(inner);
  const auto in = x.values().subspan(index * inner, inner);
  std::copy(in.begin(), in.end(), out->span().begin());
  return finish(drop_axis(x.shape(), 0), x.dtype(), std::move(out), "select", {&x},
                [index, inner](std::span<const double> g, const GradSink& sink) {
                  auto d = sink.at(0).subspan(index * inner, inner);
                  for (std::size_t i = 0; i < inner; ++i) d[i] += g[i];
                });
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw DegenerateInputError("stack: no tensors");
  for (const Tensor& p : parts) {
    checked(p, "stack");
    require_same_shape(parts[0], p, "stack");
  }
  const std::size_t inner = parts[0].numel();
  auto out = new_buffer(inner * parts.size());
  DType dtype = DType::f64;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].values();
    std::copy(v.begin(), v.end(), out->span().begin() + static_cast<std::ptrdiff_t>(k * inner));
    if (parts[k].dtype() == DType::f32) dtype = DType::f32;
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), parts[0].shape().begin(), parts[0].shape().end());

  std::vector<const Tensor*> inputs;
  inputs.reserve(parts.size());
  for (const Tensor& p : parts) inputs.push_back(&p);
  const std::size_t count = parts.size();
  return finish(std::move(shape), dtype, std::move(out), "stack",
                std::span<const Tensor* const>(inputs),
                [inner, count](std::span<const double> g, const GradSink& sink) {
                  for (std::size_t k = 0; k < count; ++k) {
                    if (!sink.needs(k)) continue;
                    auto d = sink.at(k);
                    for (std::size_t i = 0; i < inner; ++i) d[i] += g[k * inner + i];
                  }
                });
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  checked(x, "narrow");
  if (axis >= x.rank() || start + length > x.shape()[axis]) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") on axis " + std::to_string(axis) +
                         " invalid for shape " + shape_string(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  auto out = new_buffer(s.outer * length * s.inner);
  const auto in = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < length; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        out->span()[(o * length + l) * s.inner + i] = in[(o * s.length + start + l) * s.inner + i];
  return finish(std::move(shape), x.dtype(), std::move(out), "narrow", {&x},
                [s, start, length](std::span<const double> g, const GradSink& sink) {
                  auto d = sink.at(0);
                  for (std::size_t o = 0; o < s.outer; ++o)
                    for (std::size_t l = 0; l < length; ++l)
                      for (std::size_t i = 0; i < s.inner; ++i)
                        d[(o * s.length + start + l) * s.inner + i] += g[(o * length + l) * s.inner + i];
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  checked(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  auto out = new_buffer(x.numel());
  const auto in = x.values();
  std::copy(in.begin(), in.end(), out->span().begin());
  return finish(std::move(shape), x.dtype(), std::move(out), "reshape", {&x},
                [](std::span<const double> g, const GradSink& sink) {
                  auto d = sink.at(0);
                  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                });
}

}  // namespace mexfuse
