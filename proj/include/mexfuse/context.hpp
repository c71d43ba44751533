#pragma once

#include <atomic>
#include <cstdint>
#include <memory>

namespace mexfuse {

enum class DType : std::uint8_t { f64 = 0, f32 = 1 };

/// Process-wide dtype used when a tensor factory is not given one explicitly.
DType default_dtype() noexcept;
void set_default_dtype(DType dtype) noexcept;

/// Reads MEXFUSE_PRECISION ("f32" or "f64"); unset leaves the default alone.
/// Throws ConfigError on any other value.
void apply_precision_from_env();

struct LedgerSnapshot {
  std::uint64_t live_values = 0;
  std::uint64_t peak_values = 0;
  std::uint64_t flops = 0;

  friend bool operator==(const LedgerSnapshot&, const LedgerSnapshot&) = default;
};

/// Exact count of live tensor values and accumulated multiply-adds.
///
/// Every value buffer owned by a tensor (data and gradients) registers here
/// when allocated and deregisters when freed, so peak_values is the true
/// high-water mark of resident values, not a sample.
class AllocationLedger {
 public:
  void allocate(std::uint64_t values) noexcept;
  void release(std::uint64_t values) noexcept;
  void add_flops(std::uint64_t multiply_adds) noexcept;

  /// peak := live, flops := 0. Live buffers stay counted.
  void reset() noexcept;

  [[nodiscard]] LedgerSnapshot snapshot() const noexcept;

 private:
  std::atomic<std::uint64_t> live_{0};
  std::atomic<std::uint64_t> peak_{0};
  std::atomic<std::uint64_t> flops_{0};
};

/// A ledger plus gradient-recording mode. One per logical worker.
class ExecutionContext {
 public:
  ExecutionContext();

  [[nodiscard]] AllocationLedger& ledger() noexcept { return *ledger_; }
  [[nodiscard]] const std::shared_ptr<AllocationLedger>& shared_ledger() const noexcept {
    return ledger_;
  }

  [[nodiscard]] bool grad_enabled() const noexcept { return grad_enabled_; }
  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }

 private:
  std::shared_ptr<AllocationLedger> ledger_;
  bool grad_enabled_ = true;
};

/// Context active on the calling thread (a per-thread default if none installed).
ExecutionContext& current_context() noexcept;

/// Installs a context as current for the calling thread until destroyed.
class ContextScope {
 public:
  explicit ContextScope(ExecutionContext& ctx) noexcept;
  ~ContextScope();
  ContextScope(const ContextScope&) = delete;
  ContextScope& operator=(const ContextScope&) = delete;

 private:
  ExecutionContext* previous_;
};

class NoGradGuard {
 public:
  NoGradGuard() noexcept;
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace mexfuse
