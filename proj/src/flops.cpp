#include "gcvk/flops.hpp"

namespace gcvk {
namespace {
thread_local FlopTally* g_tally = nullptr;
thread_local CostCategory g_category = CostCategory::conv;
}  // namespace

const char* to_string(CostCategory c) noexcept {
  switch (c) {
    case CostCategory::attention: return "attention";
    case CostCategory::mlp: return "mlp";
    case CostCategory::conv: return "conv";
    case CostCategory::mixer: return "mixer";
    case CostCategory::head: return "head";
    case CostCategory::count: break;
  }
  return "?";
}

std::uint64_t FlopTally::total() const {
  std::uint64_t t = 0;
  for (auto m : macs) t += m;
  return t;
}

FlopCounterScope::FlopCounterScope(FlopTally& tally) : previous_(g_tally) { g_tally = &tally; }
FlopCounterScope::~FlopCounterScope() { g_tally = previous_; }

CostCategoryScope::CostCategoryScope(CostCategory c) : previous_(g_category) { g_category = c; }
CostCategoryScope::~CostCategoryScope() { g_category = previous_; }

FlopPauseScope::FlopPauseScope() : previous_(g_tally) { g_tally = nullptr; }
FlopPauseScope::~FlopPauseScope() { g_tally = previous_; }

void count_macs(std::uint64_t macs) noexcept {
  if (g_tally != nullptr) (*g_tally)[g_category] += macs;
}

}  // namespace gcvk
