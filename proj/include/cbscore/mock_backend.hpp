#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>

#include "cbscore/backend.hpp"
#include "cbscore/hashing.hpp"

namespace cbscore {

struct MockConfig {
  std::uint64_t seed = 0;
  std::int64_t vocab_size = 30522;
  std::int64_t hidden_dim = 8;
  /// Number of subword pieces each word is cut into (capped at its length).
  std::size_t split_size = 1;
  std::string model_id = "mock";
};

/// Deterministic pseudo language model driven by a keyed hash. Output depends
/// only on the config and the inputs, never on platform or call order.
class MockBackend final : public MaskedLanguageModel {
 public:
  static constexpr TokenId kPad{0};
  static constexpr TokenId kUnk{1};
  static constexpr TokenId kMask{2};
  static constexpr std::int64_t kReserved = 3;

  explicit MockBackend(MockConfig config = {}) : config_(std::move(config)) {
    if (config_.vocab_size <= kReserved) throw PreconditionError("mock vocab_size too small");
    if (config_.hidden_dim < 1) throw PreconditionError("mock hidden_dim must be positive");
    if (config_.split_size < 1) throw PreconditionError("mock split_size must be positive");
    info_.model_id = config_.model_id + "-seed" + std::to_string(config_.seed);
    info_.vocab_size = config_.vocab_size;
    info_.hidden_dim = config_.hidden_dim;
    info_.mask_token_id = kMask;
    info_.layer = -1;
    info_.unk_token_id = kUnk;
  }

  const BackendInfo& info() const override { return info_; }

  Tokenization tokenize(std::string_view text) const override {
    detail::require_text(text);
    Tokenization out;
    for (const auto& w : detail::split_words(text)) {
      const auto cps = detail::code_points(w.text);
      const auto pieces = std::min(config_.split_size, cps.size());
      const auto begin = out.ids.size();
      for (std::size_t k = 0; k < pieces; ++k) {
        // Near-equal chunks of code points.
        const auto lo = k * cps.size() / pieces;
        const auto hi = (k + 1) * cps.size() / pieces;
        std::string piece;
        for (auto i = lo; i < hi; ++i) piece += cps[i];
        out.ids.push_back(piece_id(piece, k));
      }
      out.words.push_back({w.text, {begin, out.ids.size()}});
    }
    return out;
  }

  MaskProbs mask_probs(const MaskQuery& query) const override {
    query.validate();
    const auto ctx = context_hash(query.tokens);
    std::map<std::size_t, std::set<TokenId>> wanted;
    for (const auto& c : query.candidates) wanted[c.position].insert(c.token_ids.begin(), c.token_ids.end());

    MaskProbs out;
    for (const auto& [pos, ids] : wanted) {
      const auto pos_key = hashing::combine(ctx, pos);
      double total = 0.0;
      std::vector<std::pair<TokenId, double>> raw;
      for (const auto id : ids) {
        check_id(id);
        const double u = hashing::to_unit_open(hashing::combine(pos_key, static_cast<std::uint64_t>(id.value)));
        raw.emplace_back(id, u);
        total += u;
      }
      const double scale = 0.05 + 0.9 * hashing::to_unit_open(hashing::combine(pos_key, 0x5ca1eULL));
      const double denom = std::max(1.0, total);
      for (const auto& [id, u] : raw) out.set(pos, id, scale * u / denom);
    }
    return out;
  }

  HiddenStates hidden_states(std::span<const TokenId> tokens) const override {
    if (tokens.empty()) throw PreconditionError("hidden_states needs at least one token");
    std::vector<std::optional<TokenId>> seq(tokens.begin(), tokens.end());
    const auto ctx = context_hash(seq);
    HiddenStates out;
    out.layer = info_.layer;
    out.vectors.resize(config_.hidden_dim, static_cast<Eigen::Index>(tokens.size()));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      check_id(tokens[i]);
      const auto tok_key = hashing::combine(hashing::combine(ctx, i), static_cast<std::uint64_t>(tokens[i].value));
      for (std::int64_t j = 0; j < config_.hidden_dim; ++j) {
        out.vectors(j, static_cast<Eigen::Index>(i)) =
            2.0 * hashing::to_unit_open(hashing::combine(tok_key, static_cast<std::uint64_t>(j))) - 1.0;
      }
    }
    return out;
  }

 private:
  TokenId piece_id(const std::string& piece, std::size_t index) const {
    const auto h = hashing::combine(hashing::fnv1a(piece), index);
    return TokenId{kReserved + static_cast<std::int64_t>(h % static_cast<std::uint64_t>(config_.vocab_size - kReserved))};
  }

  std::uint64_t context_hash(const std::vector<std::optional<TokenId>>& tokens) const {
    auto h = hashing::splitmix64(config_.seed);
    for (const auto& t : tokens) {
      h = hashing::combine(h, t ? static_cast<std::uint64_t>(t->value) : ~0ULL);
    }
    return h;
  }

  void check_id(TokenId id) const {
    if (id.value < 0 || id.value >= config_.vocab_size) {
      throw PreconditionError("token id " + std::to_string(id.value) + " outside mock vocabulary");
    }
  }

  MockConfig config_;
  BackendInfo info_;
};

}  // namespace cbscore
