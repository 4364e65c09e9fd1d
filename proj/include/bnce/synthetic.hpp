#pragma once

// Synthetic corpora for benchmarks and desk-scale training runs.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "bnce/corpus.hpp"
#include "bnce/rng.hpp"

namespace bnce {

inline UnigramNoise zipf_distribution(std::size_t size, double exponent) {
  std::vector<double> w(size);
  for (std::size_t r = 0; r < size; ++r) w[r] = 1.0 / std::pow(static_cast<double>(r + 1), exponent);
  return UnigramNoise::from_weights(w);
}

/// iid Zipf token ids in [0, vocab). Used by the throughput benchmark.
inline std::vector<TokenId> zipf_corpus(std::size_t vocab, std::size_t tokens, double exponent,
                                        std::uint64_t seed) {
  const UnigramNoise zipf = zipf_distribution(vocab, exponent);
  Rng rng(derive_seed(seed, seed_stream::kSynthetic));
  return zipf.sample(tokens, rng);
}

struct MarkovTextOptions {
  std::size_t word_types = 10000;  // distinct words, excluding </s>
  std::size_t tokens = 1000000;    // approximate, including </s>
  double exponent = 1.0;
  std::size_t successors = 8;      // preferred next words per word
  double follow_prob = 0.6;        // chance the next word comes from the preferred list
  double mean_sentence_length = 20.0;
  std::uint64_t seed = 1;
};

/// Writes sentences from a sparse first-order Markov source with a Zipf
/// marginal: each word prefers a few successors (geometric weights), falling
/// back to the global Zipf draw. Tokens are spelled "w<rank>".
inline std::size_t write_markov_text(std::ostream& out, const MarkovTextOptions& opt) {
  Rng rng(derive_seed(opt.seed, seed_stream::kSynthetic));
  const UnigramNoise zipf = zipf_distribution(opt.word_types, opt.exponent);
  std::vector<TokenId> succ(opt.word_types * opt.successors);
  for (auto& s : succ) s = zipf.draw(rng);
  std::vector<double> geo(opt.successors);
  for (std::size_t k = 0; k < geo.size(); ++k) geo[k] = std::pow(0.5, static_cast<double>(k));
  const UnigramNoise pick = UnigramNoise::from_weights(geo);
  const double stop = 1.0 / opt.mean_sentence_length;

  std::size_t emitted = 0;
  while (emitted < opt.tokens) {
    TokenId prev = -1;
    bool first = true;
    do {
      TokenId w;
      if (prev >= 0 && uniform01(rng) < opt.follow_prob)
        w = succ[static_cast<std::size_t>(prev) * opt.successors + static_cast<std::size_t>(pick.draw(rng))];
      else
        w = zipf.draw(rng);
      if (!first) out << ' ';
      out << 'w' << w;
      first = false;
      prev = w;
      ++emitted;
    } while (uniform01(rng) >= stop);
    out << '\n';
    ++emitted;  // </s>
  }
  return emitted;
}

}  // namespace bnce
