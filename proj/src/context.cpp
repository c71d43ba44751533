#include "mexfuse/context.hpp"

#include <cstdlib>
#include <string>
#include <string_view>

#include "mexfuse/errors.hpp"

namespace mexfuse {

namespace {

std::atomic<DType> g_default_dtype{DType::f64};

ExecutionContext& thread_default_context() noexcept {
  thread_local ExecutionContext ctx;
  return ctx;
}

thread_local ExecutionContext* t_current = nullptr;

}  // namespace

DType default_dtype() noexcept { return g_default_dtype.load(std::memory_order_relaxed); }

void set_default_dtype(DType dtype) noexcept {
  g_default_dtype.store(dtype, std::memory_order_relaxed);
}

void apply_precision_from_env() {
  const char* raw = std::getenv("MEXFUSE_PRECISION");
  if (raw == nullptr) return;
  const std::string_view value{raw};
  if (value == "f64") {
    set_default_dtype(DType::f64);
  } else if (value == "f32") {
    set_default_dtype(DType::f32);
  } else {
    throw ConfigError("MEXFUSE_PRECISION must be f32 or f64, got '" + std::string(value) + "'");
  }
}

void AllocationLedger::allocate(std::uint64_t values) noexcept {
  const std::uint64_t live = live_.fetch_add(values, std::memory_order_relaxed) + values;
  std::uint64_t peak = peak_.load(std::memory_order_relaxed);
  while (live > peak && !peak_.compare_exchange_weak(peak, live, std::memory_order_relaxed)) {
  }
}

void AllocationLedger::release(std::uint64_t values) noexcept {
  live_.fetch_sub(values, std::memory_order_relaxed);
}

void AllocationLedger::add_flops(std::uint64_t multiply_adds) noexcept {
  flops_.fetch_add(multiply_adds, std::memory_order_relaxed);
}

void AllocationLedger::reset() noexcept {
  peak_.store(live_.load(std::memory_order_relaxed), std::memory_order_relaxed);
  flops_.store(0, std::memory_order_relaxed);
}

LedgerSnapshot AllocationLedger::snapshot() const noexcept {
  return {live_.load(std::memory_order_relaxed), peak_.load(std::memory_order_relaxed),
          flops_.load(std::memory_order_relaxed)};
}

ExecutionContext::ExecutionContext() : ledger_(std::make_shared<AllocationLedger>()) {}

ExecutionContext& current_context() noexcept {
  return t_current != nullptr ? *t_current : thread_default_context();
}

ContextScope::ContextScope(ExecutionContext& ctx) noexcept : previous_(t_current) {
  t_current = &ctx;
}

ContextScope::~ContextScope() { t_current = previous_; }

NoGradGuard::NoGradGuard() noexcept : previous_(current_context().grad_enabled()) {
  current_context().set_grad_enabled(false);
}

NoGradGuard::~NoGradGuard() { current_context().set_grad_enabled(previous_); }

}  // namespace mexfuse
