#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mexfuse/context.hpp"

namespace mexfuse {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

namespace detail {
struct TensorImpl;
struct TensorAccess;
}  // namespace detail

/// Dense row-major tensor with an optional reverse-mode gradient tape.
///
/// Tensors are handles: copying a Tensor shares the underlying values. Values
/// are immutable except through values_mut(), which is reserved for leaves
/// (optimizer updates, finite-difference probes). Every value buffer is
/// counted by the AllocationLedger of the context that created it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, std::optional<DType> dtype = std::nullopt);
  static Tensor full(Shape shape, double value, std::optional<DType> dtype = std::nullopt);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            std::optional<DType> dtype = std::nullopt);
  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::size_t rank() const { return shape().size(); }
  [[nodiscard]] std::size_t extent(std::size_t axis) const;
  [[nodiscard]] std::size_t numel() const;
  [[nodiscard]] DType dtype() const;

  [[nodiscard]] std::span<const double> values() const;
  /// In-place access. Throws ContractError on tensors produced by a recorded op.
  [[nodiscard]] std::span<double> values_mut();

  [[nodiscard]] double item() const;
  [[nodiscard]] double at(std::size_t i) const;
  [[nodiscard]] double at(std::size_t i, std::size_t j) const;
  [[nodiscard]] double at(std::size_t i, std::size_t j, std::size_t k) const;

  [[nodiscard]] bool requires_grad() const;
  Tensor& set_requires_grad(bool enabled);
  [[nodiscard]] bool is_leaf() const;

  [[nodiscard]] bool has_grad() const;
  [[nodiscard]] std::span<const double> grad() const;
  void zero_grad();

  /// New leaf holding a copy of the values, detached from any tape.
  [[nodiscard]] Tensor detach() const;

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate; the
  /// recorded tape is released afterwards.
  void backward() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  [[nodiscard]] const detail::TensorImpl& impl() const;

  std::shared_ptr<detail::TensorImpl> impl_;
  friend struct detail::TensorAccess;
};

// Linear algebra. Matrices are rank-2.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ without materialising the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// x[..., d_in] · w[d_in, d_out] + bias[d_out], applied along the last axis.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Elementwise, same-shape operands.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// alpha * a + beta
Tensor affine(const Tensor& a, double alpha, double beta);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean along one axis; the axis is removed.
Tensor pool_avg(const Tensor& x, std::size_t axis);
/// Elementwise max along one axis; the axis is removed. Ties route the
/// gradient to the first maximal index.
Tensor pool_max(const Tensor& x, std::size_t axis);

/// Softmax over the last axis, with per-row max subtraction.
Tensor softmax_rows(const Tensor& a);

/// dot(a,b) / (|a| |b|), clamped to [-1, 1]. Rank-1 operands of equal extent.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// Structural.
/// Slice index `index` of axis 0; the axis is removed.
Tensor select(const Tensor& x, std::size_t index);
/// Stack equal-shape tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
/// Keep `length` entries of `axis` starting at `start`.
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Same values, new shape of equal element count.
Tensor reshape(const Tensor& x, Shape shape);

}  // namespace mexfuse
