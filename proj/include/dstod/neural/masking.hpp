#pragma once

#include <vector>

#include "dstod/neural/vocab.hpp"
#include "dstod/rng.hpp"

namespace dstod::nn {

inline constexpr int kIgnoreLabel = -100;

struct MaskedSequence {
  EncodedSequence seq;
  std::vector<int> labels;  // original id at selected positions, kIgnoreLabel elsewhere

  int selected() const;
};

/// Selects each non-special, unpadded position with probability `prob`;
/// selected positions become MASK (80%), a random non-special token (10%) or
/// stay unchanged (10%).
MaskedSequence mask_tokens(const EncodedSequence& seq, int vocab_size, Rng& rng, double prob = 0.15);

std::vector<MaskedSequence> mask_tokens(const std::vector<EncodedSequence>& batch, int vocab_size,
                                        std::uint64_t seed, double prob = 0.15);

}  // namespace dstod::nn
