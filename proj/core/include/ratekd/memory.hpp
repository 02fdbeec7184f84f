#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <new>

#include "ratekd/real.hpp"

RATEKD_BEGIN_NAMESPACE

// Engine-level allocation accounting. Every tensor buffer goes through
// TrackingAllocator, so the tracker observes the live bytes held by graphs,
// neuron states and statistics. Scratch buffers internal to kernels are not
// counted.
class MemoryTracker {
 public:
  static void on_allocate(std::size_t bytes) noexcept {
    const auto now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    auto peak = peak_.load(std::memory_order_relaxed);
    while (now > peak &&
           !peak_.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
    }
  }
  static void on_release(std::size_t bytes) noexcept {
    live_.fetch_sub(bytes, std::memory_order_relaxed);
  }

  static std::size_t live_bytes() noexcept { return live_.load(std::memory_order_relaxed); }
  static std::size_t peak_bytes() noexcept { return peak_.load(std::memory_order_relaxed); }

  /// Restart high-water tracking from the current live size.
  static void reset_peak() noexcept { peak_.store(live_bytes(), std::memory_order_relaxed); }

 private:
  static inline std::atomic<std::size_t> live_{0};
  static inline std::atomic<std::size_t> peak_{0};
};

/// Measures the high-water mark of allocations made while the scope is alive,
/// relative to the live size at construction.
class PeakMemoryScope {
 public:
  PeakMemoryScope() : baseline_(MemoryTracker::live_bytes()) { MemoryTracker::reset_peak(); }
  std::size_t peak_above_baseline() const noexcept {
    const auto peak = MemoryTracker::peak_bytes();
    return peak > baseline_ ? peak - baseline_ : 0;
  }

 private:
  std::size_t baseline_;
};

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto* p = static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{64}));
    MemoryTracker::on_allocate(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryTracker::on_release(n * sizeof(T));
    ::operator delete(p, std::align_val_t{64});
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

RATEKD_END_NAMESPACE
