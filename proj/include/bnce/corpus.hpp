#pragma once

// Corpus ingestion: vocabulary construction, unigram noise, token-id files
// and the batch streams consumed by the trainer.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bnce/io.hpp"
#include "bnce/rng.hpp"
#include "bnce/tensor.hpp"

namespace bnce {

inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kEosToken = "</s>";

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Splits pre-tokenized text into whitespace-separated tokens and appends
/// one end-of-sentence token per non-blank line. No begin tag is used.
inline std::vector<std::string> read_tokens(std::istream& in) {
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream words(line);
    std::string w;
    bool any = false;
    while (words >> w) {
      tokens.push_back(w);
      any = true;
    }
    if (any) tokens.emplace_back(kEosToken);
  }
  return tokens;
}

inline std::vector<std::string> read_token_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open " + path);
  return read_tokens(in);
}

class Vocabulary {
 public:
  Vocabulary() = default;

  /// Keeps the max_size most frequent tokens. Ties rank by first occurrence.
  /// The end-of-sentence token is always kept. <unk> is present whenever
  /// truncation folds tokens into it or when there is room left for it.
  static Vocabulary build(std::span<const std::string> stream, std::size_t max_size) {
    if (max_size < 2) throw std::invalid_argument("build_vocab: max_size must be >= 2");
    if (stream.empty()) throw CorpusError("build_vocab: empty token stream");

    struct Entry {
      std::string token;
      std::uint64_t count = 0;
      std::size_t first = 0;
    };
    std::unordered_map<std::string_view, std::size_t> slot;
    std::vector<Entry> entries;
    for (std::size_t pos = 0; pos < stream.size(); ++pos) {
      const std::string& tok = stream[pos];
      auto [it, inserted] = slot.try_emplace(tok, entries.size());
      if (inserted) entries.push_back({tok, 0, pos});
      ++entries[it->second].count;
    }
    if (!slot.contains(kEosToken)) {
      slot.emplace(kEosToken, entries.size());
      entries.push_back({std::string(kEosToken), 0, stream.size()});
    }

    auto rank = [](const Entry& a, const Entry& b) {
      if (a.count != b.count) return a.count > b.count;
      return a.first < b.first;
    };

    std::vector<Entry> kept;
    std::uint64_t folded = 0;
    if (entries.size() <= max_size) {
      kept = entries;
      if (!slot.contains(kUnkToken) && kept.size() < max_size)
        kept.push_back({std::string(kUnkToken), 0, stream.size() + 1});
    } else {
      std::vector<Entry> regular;
      Entry eos, unk{std::string(kUnkToken), 0, stream.size() + 1};
      for (auto& e : entries) {
        if (e.token == kEosToken) eos = e;
        else if (e.token == kUnkToken) unk = e;
        else regular.push_back(e);
      }
      std::stable_sort(regular.begin(), regular.end(), rank);
      const std::size_t room = max_size - 2;
      for (std::size_t i = 0; i < regular.size(); ++i) {
        if (i < room) {
          kept.push_back(regular[i]);
        } else {
          folded += regular[i].count;
          unk.count += regular[i].count;
          unk.first = std::min(unk.first, regular[i].first);
        }
      }
      kept.push_back(eos);
      kept.push_back(unk);
    }
    std::stable_sort(kept.begin(), kept.end(), rank);

    Vocabulary v;
    for (auto& e : kept) v.add(e.token, e.count);
    v.folded_count_ = folded;
    v.total_count_ = stream.size();
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view tok) const { return ids_.contains(std::string(tok)); }

  TokenId eos_id() const { return eos_; }
  std::optional<TokenId> unk_id() const {
    if (unk_ < 0) return std::nullopt;
    return unk_;
  }

  /// Maps out-of-vocabulary tokens to <unk>; throws if there is none.
  TokenId id(std::string_view tok) const {
    if (auto it = ids_.find(std::string(tok)); it != ids_.end()) return it->second;
    if (unk_ < 0) throw CorpusError("token '" + std::string(tok) + "' not in vocabulary (no <unk>)");
    return unk_;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw IndexError("vocabulary id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  std::uint64_t count(TokenId id) const { return counts_.at(id); }
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  std::uint64_t total_count() const { return total_count_; }

  /// Training tokens folded into <unk> by truncation.
  std::uint64_t folded_count() const { return folded_count_; }
  double replacement_rate() const {
    return total_count_ == 0 ? 0.0 : static_cast<double>(folded_count_) / total_count_;
  }

  std::vector<TokenId> encode(std::span<const std::string> tokens) const {
    std::vector<TokenId> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  /// One "token<TAB>count" line per id, in id order.
  void write(std::ostream& out) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << counts_[i] << '\n';
  }

  static Vocabulary read(std::istream& in) {
    Vocabulary v;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos || tab == 0)
        throw CorpusError("vocabulary line " + std::to_string(lineno) + ": expected token<TAB>count");
      const std::string tok = line.substr(0, tab);
      std::uint64_t c = 0;
      try {
        c = std::stoull(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw CorpusError("vocabulary line " + std::to_string(lineno) + ": bad count");
      }
      if (v.ids_.contains(tok)) throw CorpusError("vocabulary line " + std::to_string(lineno) + ": duplicate token");
      v.add(tok, c);
      v.total_count_ += c;
    }
    if (v.eos_ < 0) throw CorpusError("vocabulary has no " + std::string(kEosToken));
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorpusError("cannot write " + path);
    write(out);
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorpusError("cannot open " + path);
    return read(in);
  }

 private:
  void add(const std::string& tok, std::uint64_t c) {
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(tok);
    counts_.push_back(c);
    ids_.emplace(tok, id);
    if (tok == kEosToken) eos_ = id;
    if (tok == kUnkToken) unk_ = id;
  }

  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, TokenId> ids_;
  TokenId eos_ = -1;
  TokenId unk_ = -1;
  std::uint64_t total_count_ = 0;
  std::uint64_t folded_count_ = 0;
};

inline Vocabulary build_vocab(std::span<const std::string> stream, std::size_t max_size) {
  return Vocabulary::build(stream, max_size);
}

/// Unigram noise distribution with a Walker alias table for O(1) draws.
class UnigramNoise {
 public:
  UnigramNoise() = default;

  explicit UnigramNoise(std::span<const std::uint64_t> counts) {
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0,
                                         [](double a, std::uint64_t c) { return a + static_cast<double>(c); });
    if (!(total > 0.0)) throw CorpusError("unigram_distribution: total count is zero");
    p_.resize(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) p_[i] = static_cast<double>(counts[i]) / total;
    build_alias();
  }

  /// Distribution proportional to arbitrary non-negative weights.
  static UnigramNoise from_weights(std::span<const double> w) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0.0)) throw CorpusError("unigram_distribution: total weight is zero");
    UnigramNoise n;
    n.p_.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) n.p_[i] = w[i] / total;
    n.build_alias();
    return n;
  }

  std::size_t size() const { return p_.size(); }
  double probability(TokenId id) const { return p_[static_cast<std::size_t>(id)]; }
  const std::vector<double>& probabilities() const { return p_; }

  TokenId draw(Rng& rng) const {
    const double u = uniform01(rng) * static_cast<double>(p_.size());
    auto col = static_cast<std::size_t>(u);
    if (col >= p_.size()) col = p_.size() - 1;
    return uniform01(rng) < accept_[col] ? static_cast<TokenId>(col) : alias_[col];
  }

  std::vector<TokenId> sample(std::size_t k, Rng& rng) const {
    std::vector<TokenId> out(k);
    for (auto& x : out) x = draw(rng);
    return out;
  }

 private:
  void build_alias() {
    const std::size_t n = p_.size();
    accept_.assign(n, 1.0);
    alias_.resize(n);
    std::vector<double> scaled(n);
    std::vector<std::size_t> small, large;
    for (std::size_t i = 0; i < n; ++i) {
      alias_[i] = static_cast<TokenId>(i);
      scaled[i] = p_[i] * static_cast<double>(n);
      (scaled[i] < 1.0 ? small : large).push_back(i);
    }
    while (!small.empty() && !large.empty()) {
      const std::size_t s = small.back();
      small.pop_back();
      const std::size_t l = large.back();
      accept_[s] = scaled[s];
      alias_[s] = static_cast<TokenId>(l);
      scaled[l] = (scaled[l] + scaled[s]) - 1.0;
      if (scaled[l] < 1.0) {
        large.pop_back();
        small.push_back(l);
      }
    }
    // Leftovers differ from 1 only by rounding.
    for (std::size_t i : small) accept_[i] = 1.0;
    for (std::size_t i : large) accept_[i] = 1.0;
  }

  std::vector<double> p_;
  std::vector<double> accept_;
  std::vector<TokenId> alias_;
};

inline UnigramNoise unigram_distribution(const Vocabulary& v) { return UnigramNoise(v.counts()); }

inline std::vector<TokenId> sample_noise(const UnigramNoise& n, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  return n.sample(k, rng);
}

// Binary id stream: "BNCEIDS1", u64 count, then u32 little-endian ids.
inline void write_ids(std::ostream& out, std::span<const TokenId> ids) {
  out.write("BNCEIDS1", 8);
  io::write_u64(out, ids.size());
  for (TokenId id : ids) io::write_u32(out, static_cast<std::uint32_t>(id));
  if (!out) throw CorpusError("write_ids: stream failure");
}

inline std::vector<TokenId> read_ids(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::string_view(magic, 8) != "BNCEIDS1")
    throw CorpusError("read_ids: not a token-id stream");
  const std::uint64_t n = io::read_u64(in);
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(io::read_u32(in));
  return ids;
}

inline void save_ids(const std::string& path, std::span<const TokenId> ids) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write " + path);
  write_ids(out, ids);
}

inline std::vector<TokenId> load_ids(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open " + path);
  return read_ids(in);
}

enum class BatchMode { ngram, sequential };

/// One training unit.
///  ngram:      inputs is B x context (row-major), targets has B entries.
///  sequential: inputs is steps x B (inputs[t*B + b]); targets likewise.
/// reset_state marks the first batch of a stream, where recurrent state
/// must start from zero.
struct Batch {
  BatchMode mode = BatchMode::ngram;
  Index batch_size = 0;
  Index width = 0;  // context length (ngram) or number of steps (sequential)
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  bool reset_state = false;

  Index steps() const { return mode == BatchMode::ngram ? 1 : width; }
  std::span<const TokenId> step_targets(Index t) const {
    return std::span<const TokenId>(targets).subspan(static_cast<std::size_t>(t * batch_size),
                                                     static_cast<std::size_t>(batch_size));
  }
};

struct BatchStreamOptions {
  BatchMode mode = BatchMode::ngram;
  Index batch_size = 1;
  Index width = 1;               // context length or BPTT steps
  bool drop_remainder = true;    // ngram only; sequential always drops
  std::optional<std::uint64_t> shuffle_seed;  // ngram only
};

/// Streams fixed-shape batches over a token-id corpus.
///
/// ngram mode predicts every position once (trailing remainder < B dropped
/// unless drop_remainder is false); context before the corpus start is
/// padded with eos. sequential mode cuts the corpus into B contiguous
/// shards of floor(N/B) tokens and walks them in lockstep, so each shard
/// contributes floor(N/B) - 1 targets.
class BatchStream {
 public:
  BatchStream(std::span<const TokenId> corpus, TokenId eos, BatchStreamOptions opt)
      : corpus_(corpus), eos_(eos), opt_(opt) {
    if (opt_.batch_size < 1) throw std::invalid_argument("batch_stream: batch size must be >= 1");
    if (opt_.width < 1)
      throw std::invalid_argument("batch_stream: width must be >= 1");
    const auto n = static_cast<Index>(corpus_.size());
    if (opt_.mode == BatchMode::sequential) {
      shard_len_ = n / opt_.batch_size;
      if (shard_len_ < 2)
        throw CorpusError("batch_stream: corpus of " + std::to_string(n) + " tokens too small for " +
                          std::to_string(opt_.batch_size) + " shards");
      dropped_ = n - shard_len_ * opt_.batch_size;
    } else {
      if (n < opt_.batch_size && opt_.drop_remainder)
        throw CorpusError("batch_stream: corpus smaller than one batch");
      const Index usable = opt_.drop_remainder ? (n / opt_.batch_size) * opt_.batch_size : n;
      dropped_ = n - usable;
      order_.resize(static_cast<std::size_t>(usable));
    }
    reset();
  }

  /// Restarts the stream. With a shuffle seed, the n-gram order of each
  /// epoch is a fixed function of (seed, epoch).
  void reset(std::uint64_t epoch = 0) {
    cursor_ = 0;
    if (opt_.mode == BatchMode::ngram) {
      std::iota(order_.begin(), order_.end(), Index{0});
      if (opt_.shuffle_seed) {
        Rng rng(derive_seed(*opt_.shuffle_seed, epoch));
        shuffle_in_place(order_, rng);
      }
    }
  }

  std::optional<Batch> next() {
    return opt_.mode == BatchMode::ngram ? next_ngram() : next_sequential();
  }

  Index dropped_tokens() const { return dropped_; }

  /// Targets one full pass emits.
  Index targets_per_epoch() const {
    if (opt_.mode == BatchMode::ngram) return static_cast<Index>(order_.size());
    return opt_.batch_size * (shard_len_ - 1);
  }

  Index batches_per_epoch() const {
    if (opt_.mode == BatchMode::ngram)
      return (static_cast<Index>(order_.size()) + opt_.batch_size - 1) / opt_.batch_size;
    return (shard_len_ - 1 + opt_.width - 1) / opt_.width;
  }

  const BatchStreamOptions& options() const { return opt_; }

 private:
  static void shuffle_in_place(std::vector<Index>& v, Rng& rng) {
    // Fisher-Yates with the portable uniform draw.
    for (std::size_t i = v.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
      if (j >= i) j = i - 1;
      std::swap(v[i - 1], v[j]);
    }
  }

  std::optional<Batch> next_ngram() {
    const auto total = static_cast<Index>(order_.size());
    if (cursor_ >= total) return std::nullopt;
    const Index b = std::min(opt_.batch_size, total - cursor_);
    Batch out;
    out.mode = BatchMode::ngram;
    out.batch_size = b;
    out.width = opt_.width;
    out.reset_state = cursor_ == 0;
    out.inputs.resize(static_cast<std::size_t>(b * opt_.width));
    out.targets.resize(static_cast<std::size_t>(b));
    for (Index r = 0; r < b; ++r) {
      const Index pos = order_[static_cast<std::size_t>(cursor_ + r)];
      out.targets[r] = corpus_[pos];
      for (Index k = 0; k < opt_.width; ++k) {
        // context slot k holds the token at pos - width + k.
        const Index src = pos - opt_.width + k;
        out.inputs[r * opt_.width + k] = src < 0 ? eos_ : corpus_[src];
      }
    }
    cursor_ += b;
    return out;
  }

  std::optional<Batch> next_sequential() {
    const Index predictions = shard_len_ - 1;
    if (cursor_ >= predictions) return std::nullopt;
    const Index steps = std::min(opt_.width, predictions - cursor_);
    const Index bsz = opt_.batch_size;
    Batch out;
    out.mode = BatchMode::sequential;
    out.batch_size = bsz;
    out.width = steps;
    out.reset_state = cursor_ == 0;
    out.inputs.resize(static_cast<std::size_t>(steps * bsz));
    out.targets.resize(static_cast<std::size_t>(steps * bsz));
    for (Index t = 0; t < steps; ++t) {
      for (Index b = 0; b < bsz; ++b) {
        const Index pos = b * shard_len_ + cursor_ + t;
        out.inputs[t * bsz + b] = corpus_[pos];
        out.targets[t * bsz + b] = corpus_[pos + 1];
      }
    }
    cursor_ += steps;
    return out;
  }

  std::span<const TokenId> corpus_;
  TokenId eos_;
  BatchStreamOptions opt_;
  Index shard_len_ = 0;
  Index dropped_ = 0;
  Index cursor_ = 0;
  std::vector<Index> order_;
};

}  // namespace bnce
