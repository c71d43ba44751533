#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mexfuse/context.hpp"
#include "mexfuse/tensor.hpp"

namespace mexfuse::detail {

/// Ledger-registered value storage. Registers with the ledger of the context
/// current at construction and releases into that same ledger on destruction.
class Buffer {
 public:
  explicit Buffer(std::size_t n);
  explicit Buffer(std::vector<double> values);
  ~Buffer();

  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;

  [[nodiscard]] std::span<double> span() noexcept { return values_; }
  [[nodiscard]] std::span<const double> span() const noexcept { return values_; }
  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] double* data() noexcept { return values_.data(); }
  [[nodiscard]] const double* data() const noexcept { return values_.data(); }

 private:
  std::vector<double> values_;
  std::shared_ptr<AllocationLedger> ledger_;
};

struct Node;

/// Where a gradient flows: into an interior node or a requires_grad leaf.
struct Edge {
  std::shared_ptr<Node> node;
  std::shared_ptr<TensorImpl> leaf;

  [[nodiscard]] bool active() const noexcept { return node != nullptr || leaf != nullptr; }
};

/// Accumulation targets handed to a backward function, one per edge.
class GradSink {
 public:
  explicit GradSink(std::vector<std::span<double>> targets) : targets_(std::move(targets)) {}
  [[nodiscard]] bool needs(std::size_t i) const { return !targets_[i].empty(); }
  /// Span to add (+=) the gradient for input i into.
  [[nodiscard]] std::span<double> at(std::size_t i) const { return targets_[i]; }

 private:
  std::vector<std::span<double>> targets_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out, const GradSink& sink)>;

struct Node {
  std::string op;
  std::size_t out_numel = 0;
  std::vector<Edge> edges;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f64;
  std::shared_ptr<Buffer> data;
  bool requires_grad = false;
  std::unique_ptr<Buffer> grad;
  std::shared_ptr<Node> grad_fn;
};

struct TensorAccess {
  static const std::shared_ptr<TensorImpl>& impl(const Tensor& t);
  static Tensor wrap(std::shared_ptr<TensorImpl> impl);
};

}  // namespace mexfuse::detail
