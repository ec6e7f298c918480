#pragma once

#include <cstdint>

namespace stsopt {

// SplitMix64 finalizer; used to derive independent per-iteration / per-trial seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream,
                                    std::uint64_t index) noexcept {
  return mix_seed(mix_seed(mix_seed(base) ^ stream) ^ index);
}

// Stream tags keep seeds for different purposes apart even when indices coincide.
inline constexpr std::uint64_t kPermutationStream = 0x7065726dULL;  // "perm"
inline constexpr std::uint64_t kSamplingStream = 0x73616d70ULL;     // "samp"
inline constexpr std::uint64_t kCandidateStream = 0x63616e64ULL;    // "cand"

}  // namespace stsopt
