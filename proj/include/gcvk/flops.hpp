#pragma once

#include <array>
#include <cstdint>

namespace gcvk {

// Cost buckets. One "FLOP" here is one multiply-accumulate, the convention
// under which the windowed attention cost is 2HW(2C^2 + hwC).
enum class CostCategory : int { attention = 0, mlp, conv, mixer, head, count };

const char* to_string(CostCategory c) noexcept;

struct FlopTally {
  std::array<std::uint64_t, static_cast<int>(CostCategory::count)> macs{};

  std::uint64_t& operator[](CostCategory c) { return macs[static_cast<int>(c)]; }
  std::uint64_t operator[](CostCategory c) const { return macs[static_cast<int>(c)]; }
  std::uint64_t total() const;
};

// Instrumented counter: matmul, linear and conv kernels add their MAC counts
// to the active counter under the active category while a scope is open.
class FlopCounterScope {
 public:
  explicit FlopCounterScope(FlopTally& tally);
  ~FlopCounterScope();
  FlopCounterScope(const FlopCounterScope&) = delete;
  FlopCounterScope& operator=(const FlopCounterScope&) = delete;

 private:
  FlopTally* previous_;
};

class CostCategoryScope {
 public:
  explicit CostCategoryScope(CostCategory c);
  ~CostCategoryScope();
  CostCategoryScope(const CostCategoryScope&) = delete;
  CostCategoryScope& operator=(const CostCategoryScope&) = delete;

 private:
  CostCategory previous_;
};

// Suspends counting (backward passes run kernels that are not part of the
// forward cost).
class FlopPauseScope {
 public:
  FlopPauseScope();
  ~FlopPauseScope();
  FlopPauseScope(const FlopPauseScope&) = delete;
  FlopPauseScope& operator=(const FlopPauseScope&) = delete;

 private:
  FlopTally* previous_;
};

void count_macs(std::uint64_t macs) noexcept;

}  // namespace gcvk
