#pragma once

#include <cstddef>
#include <memory>
#include <vector>

namespace grab {

// Counts live and peak scalar words handed out through CountingAllocator.
// Kernels that want their working set measured allocate scratch through
// TrackedVector; ordinary allocations are invisible to the counter.
class AllocCounter {
 public:
  // Per-thread, so concurrent jobs do not pollute each other's peaks.
  static AllocCounter& instance() {
    static thread_local AllocCounter counter;
    return counter;
  }

  void add(std::size_t words) {
    live_ += words;
    if (live_ > peak_) peak_ = live_;
  }
  void sub(std::size_t words) { live_ -= words; }

  std::size_t live() const { return live_; }
  std::size_t peak() const { return peak_; }
  void reset_peak() { peak_ = live_; }

 private:
  std::size_t live_ = 0;
  std::size_t peak_ = 0;
};

// Peak words allocated (relative to entry) while the scope is alive.
class AllocScope {
 public:
  AllocScope() : base_(AllocCounter::instance().live()) {
    AllocCounter::instance().reset_peak();
  }
  std::size_t peak_words() const { return AllocCounter::instance().peak() - base_; }

 private:
  std::size_t base_;
};

template <typename T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() = default;
  template <typename U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    AllocCounter::instance().add(n);
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    AllocCounter::instance().sub(n);
    std::allocator<T>{}.deallocate(p, n);
  }

  template <typename U>
  bool operator==(const CountingAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using TrackedVector = std::vector<T, CountingAllocator<T>>;

}  // namespace grab
