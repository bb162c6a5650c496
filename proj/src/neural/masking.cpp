#include "dstod/neural/masking.hpp"

#include "dstod/error.hpp"

namespace dstod::nn {

int MaskedSequence::selected() const {
  int n = 0;
  for (int l : labels) n += l != kIgnoreLabel;
  return n;
}

MaskedSequence mask_tokens(const EncodedSequence& seq, int vocab_size, Rng& rng, double prob) {
  if (!(prob >= 0.0 && prob <= 1.0)) throw Error("mask_tokens: probability must be in [0,1]");
  if (vocab_size <= Vocab::kNumSpecial) throw Error("mask_tokens: vocab has no regular tokens");
  MaskedSequence out{seq, std::vector<int>(seq.ids.size(), kIgnoreLabel)};
  if (prob == 0.0) return out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const int id = seq.ids[i];
    if (seq.mask[i] == 0 || Vocab::is_special(id)) continue;
    if (uniform01(rng) >= prob) continue;
    out.labels[i] = id;
    const double u = uniform01(rng);
    if (u < 0.8) {
      out.seq.ids[i] = Vocab::kMask;
    } else if (u < 0.9) {
      out.seq.ids[i] =
          Vocab::kNumSpecial + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(vocab_size - Vocab::kNumSpecial)));
    }
  }
  return out;
}

std::vector<MaskedSequence> mask_tokens(const std::vector<EncodedSequence>& batch, int vocab_size,
                                        std::uint64_t seed, double prob) {
  Rng rng(seed);
  std::vector<MaskedSequence> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(mask_tokens(s, vocab_size, rng, prob));
  return out;
}

}  // namespace dstod::nn
