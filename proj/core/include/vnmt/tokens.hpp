#pragma once

#include <vector>

namespace vnmt {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
/// Ids below this value are reserved and never produced by a task generator.
inline constexpr int kFirstContentId = 4;

inline constexpr bool is_special(int id) { return id < kFirstContentId; }

/// Token ids of one translation pair; both sides end with EOS.
struct SentencePair {
  std::vector<int> src;
  std::vector<int> tgt;

  bool operator==(const SentencePair&) const = default;
};

}  // namespace vnmt
