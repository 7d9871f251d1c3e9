#pragma once

// Masked-LM backend interface and the value types that cross it.

#include <cctype>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cbscore/error.hpp"
#include "cbscore/lexicon.hpp"

namespace cbscore {

/// Index into a backend-owned vocabulary.
struct TokenId {
  std::int64_t value = 0;
  auto operator<=>(const TokenId&) const = default;
};

/// Half-open token index range [begin, end).
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t pos) const { return pos >= begin && pos < end; }
  bool operator==(const TokenSpan&) const = default;
};

struct WordSpan {
  std::string word;
  TokenSpan tokens;
  bool operator==(const WordSpan&) const = default;
};

struct Tokenization {
  std::vector<TokenId> ids;
  /// One entry per surface word, in order, covering `ids` exactly once.
  std::vector<WordSpan> words;
};

struct CandidateList {
  std::size_t position = 0;
  std::vector<TokenId> token_ids;
};

/// A token sequence with masked positions (nullopt) grouped into role spans,
/// plus the candidate ids whose probabilities are wanted at each mask.
struct MaskQuery {
  std::vector<std::optional<TokenId>> tokens;
  std::map<SlotRole, TokenSpan> mask_spans;
  std::vector<CandidateList> candidates;

  bool is_mask(std::size_t pos) const { return pos < tokens.size() && !tokens[pos].has_value(); }

  /// Throws PreconditionError if the span/candidate invariants do not hold.
  void validate() const {
    std::vector<int> cover(tokens.size(), 0);
    for (const auto& [role, span] : mask_spans) {
      if (span.begin >= span.end || span.end > tokens.size()) {
        throw PreconditionError(std::string("mask span for ") + std::string(to_string(role)) + " is out of bounds");
      }
      for (auto i = span.begin; i < span.end; ++i) {
        if (!is_mask(i)) throw PreconditionError("mask span covers an unmasked position " + std::to_string(i));
        ++cover[i];
      }
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (is_mask(i) && cover[i] != 1) {
        throw PreconditionError("mask at position " + std::to_string(i) +
                                (cover[i] == 0 ? " is not covered by a span" : " is covered by overlapping spans"));
      }
    }
    if (candidates.empty()) throw PreconditionError("mask query requests no candidates");
    for (const auto& c : candidates) {
      if (!is_mask(c.position)) {
        throw PreconditionError("candidate requested at non-mask position " + std::to_string(c.position));
      }
      if (c.token_ids.empty()) {
        throw PreconditionError("empty candidate list at position " + std::to_string(c.position));
      }
    }
  }
};

inline constexpr double kCandidateSumSlack = 1e-6;

/// Probabilities keyed by (mask position, candidate id).
class MaskProbs {
 public:
  using Key = std::pair<std::size_t, TokenId>;

  void set(std::size_t position, TokenId id, double p) { probs_[{position, id}] = p; }

  bool contains(std::size_t position, TokenId id) const { return probs_.count({position, id}) != 0; }

  double at(std::size_t position, TokenId id) const {
    const auto it = probs_.find({position, id});
    if (it == probs_.end()) {
      throw BackendError("no probability for token " + std::to_string(id.value) + " at position " +
                         std::to_string(position));
    }
    return it->second;
  }

  const std::map<Key, double>& entries() const { return probs_; }
  std::size_t size() const { return probs_.size(); }

  /// Throws ProtocolError when a value leaves [0,1] or a position's mass
  /// exceeds 1 + kCandidateSumSlack.
  void validate() const {
    std::map<std::size_t, double> mass;
    for (const auto& [key, p] : probs_) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw ProtocolError("probability " + std::to_string(p) + " at position " + std::to_string(key.first) +
                            " is outside [0,1]");
      }
      mass[key.first] += p;
    }
    for (const auto& [pos, m] : mass) {
      if (m > 1.0 + kCandidateSumSlack) {
        throw ProtocolError("candidate probabilities at position " + std::to_string(pos) + " sum to " +
                            std::to_string(m));
      }
    }
  }

 private:
  std::map<Key, double> probs_;
};

/// Per-token contextual vectors, one column per token (d x tokens).
struct HiddenStates {
  int layer = -1;
  Eigen::MatrixXd vectors;

  Eigen::Index dim() const { return vectors.rows(); }
  Eigen::Index count() const { return vectors.cols(); }
};

struct BackendInfo {
  std::string model_id;
  std::int64_t vocab_size = 0;
  std::int64_t hidden_dim = 0;
  TokenId mask_token_id;
  /// Encoder layer reported by hidden_states; -1 is the final layer.
  int layer = -1;
  /// Token the tokenizer emits for out-of-vocabulary input, if any.
  std::optional<TokenId> unk_token_id;
};

/// A masked language model. Implementations must be safe for concurrent
/// const use.
class MaskedLanguageModel {
 public:
  virtual ~MaskedLanguageModel() = default;

  virtual const BackendInfo& info() const = 0;
  virtual Tokenization tokenize(std::string_view text) const = 0;
  /// All masks in `query` are present in a single evaluation.
  virtual MaskProbs mask_probs(const MaskQuery& query) const = 0;
  virtual HiddenStates hidden_states(std::span<const TokenId> tokens) const = 0;
};

namespace detail {

struct RawWord {
  std::string text;
  std::size_t offset;
};

inline bool is_split_punct(unsigned char c) {
  return c < 0x80 && std::ispunct(c) && c != '#' && c != '[' && c != ']';
}

/// Whitespace-separated words with ASCII punctuation split off as words of
/// their own. Bytes >= 0x80 are word characters, so UTF-8 stays intact.
inline std::vector<RawWord> split_words(std::string_view text) {
  std::vector<RawWord> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c < 0x80 && std::isspace(c)) {
      ++i;
    } else if (is_split_punct(c)) {
      out.push_back({std::string(1, text[i]), i});
      ++i;
    } else {
      const auto start = i;
      while (i < text.size()) {
        const auto d = static_cast<unsigned char>(text[i]);
        if ((d < 0x80 && std::isspace(d)) || is_split_punct(d)) break;
        ++i;
      }
      out.push_back({std::string(text.substr(start, i - start)), start});
    }
  }
  return out;
}

/// Splits UTF-8 into code points (lead byte plus continuation bytes).
inline std::vector<std::string_view> code_points(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t j = i + 1;
    while (j < s.size() && (static_cast<unsigned char>(s[j]) & 0xC0) == 0x80) ++j;
    out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline void require_text(std::string_view text) {
  if (detail::trim(text).empty()) throw PreconditionError("cannot tokenize empty text");
}

}  // namespace detail

}  // namespace cbscore
