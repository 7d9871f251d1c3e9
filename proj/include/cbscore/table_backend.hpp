#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>

#include <json.hpp>

#include "cbscore/backend.hpp"
#include "cbscore/lexicon.hpp"

namespace cbscore {

/// Backend defined entirely by a fixture document.
///
/// Fixture layout:
///
///     {
///       "model_id": "...",
///       "vocab": ["[PAD]", "[UNK]", "[MASK]", "People", ...],   // id = index
///       "mask_token": "[MASK]",
///       "unk_token": "[UNK]",                                    // optional
///       "splits": {"Somalia": ["Som", "##alia"]},                // optional
///       "queries": [
///         {"text": "People from [MASK] are nurse .",
///          "probs": [{"position": 2, "candidates": {"Korea": 0.1}}]}
///       ],
///       "embeddings": {"People": [0.1, ...]}                     // optional
///     }
///
/// A query is matched by its tokens joined with single spaces, masks written
/// as the mask token. Anything outside the fixture is an UnmodeledQueryError.
class TableBackend final : public MaskedLanguageModel {
 public:
  static TableBackend from_file(const std::filesystem::path& path) {
    return TableBackend(detail::read_file(path));
  }

  explicit TableBackend(std::string_view fixture_text) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(fixture_text);
      load(doc);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(0, std::string("table fixture: ") + e.what());
    }
  }

  const BackendInfo& info() const override { return info_; }

  Tokenization tokenize(std::string_view text) const override {
    detail::require_text(text);
    Tokenization out;
    for (const auto& w : detail::split_words(text)) {
      const auto begin = out.ids.size();
      if (const auto it = splits_.find(w.text); it != splits_.end()) {
        for (const auto& piece : it->second) out.ids.push_back(ids_.at(piece));
      } else if (const auto id = ids_.find(w.text); id != ids_.end()) {
        out.ids.push_back(id->second);
      } else if (info_.unk_token_id) {
        out.ids.push_back(*info_.unk_token_id);
      } else {
        throw UnmodeledQueryError("word '" + w.text + "' is not in the table vocabulary");
      }
      out.words.push_back({w.text, {begin, out.ids.size()}});
    }
    return out;
  }

  MaskProbs mask_probs(const MaskQuery& query) const override {
    query.validate();
    const auto key = render(query.tokens);
    const auto entry = queries_.find(key);
    if (entry == queries_.end()) throw UnmodeledQueryError("unmodeled query: \"" + key + "\"");
    MaskProbs out;
    for (const auto& c : query.candidates) {
      const auto pos = entry->second.find(c.position);
      for (const auto id : c.token_ids) {
        const auto& tok = token(id);
        if (pos == entry->second.end() || !pos->second.count(tok)) {
          throw UnmodeledQueryError("unmodeled candidate '" + tok + "' at position " + std::to_string(c.position) +
                                    " of \"" + key + "\"");
        }
        out.set(c.position, id, pos->second.at(tok));
      }
    }
    return out;
  }

  HiddenStates hidden_states(std::span<const TokenId> tokens) const override {
    if (tokens.empty()) throw PreconditionError("hidden_states needs at least one token");
    if (embeddings_.empty()) throw UnmodeledQueryError("table fixture has no embeddings");
    HiddenStates out;
    out.layer = info_.layer;
    out.vectors.resize(info_.hidden_dim, static_cast<Eigen::Index>(tokens.size()));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto it = embeddings_.find(token(tokens[i]));
      if (it == embeddings_.end()) throw UnmodeledQueryError("no embedding for '" + token(tokens[i]) + "'");
      out.vectors.col(static_cast<Eigen::Index>(i)) = it->second;
    }
    return out;
  }

  /// Tokens joined by spaces with masks rendered as the mask token.
  std::string render(const std::vector<std::optional<TokenId>>& tokens) const {
    std::string out;
    for (const auto& t : tokens) {
      if (!out.empty()) out += ' ';
      out += t ? token(*t) : vocab_[static_cast<std::size_t>(info_.mask_token_id.value)];
    }
    return out;
  }

 private:
  const std::string& token(TokenId id) const {
    if (id.value < 0 || static_cast<std::size_t>(id.value) >= vocab_.size()) {
      throw PreconditionError("token id " + std::to_string(id.value) + " outside table vocabulary");
    }
    return vocab_[static_cast<std::size_t>(id.value)];
  }

  TokenId lookup(const std::string& tok, const char* where) const {
    const auto it = ids_.find(tok);
    if (it == ids_.end()) throw ValidationError(std::string(where) + " token '" + tok + "' is not in the vocab");
    return it->second;
  }

  void load(const nlohmann::json& doc) {
    info_.model_id = doc.at("model_id").get<std::string>();
    vocab_ = doc.at("vocab").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
      if (!ids_.emplace(vocab_[i], TokenId{static_cast<std::int64_t>(i)}).second) {
        throw ValidationError("duplicate vocab entry '" + vocab_[i] + "'");
      }
    }
    info_.vocab_size = static_cast<std::int64_t>(vocab_.size());
    info_.mask_token_id = lookup(doc.at("mask_token").get<std::string>(), "mask");
    if (doc.contains("unk_token")) info_.unk_token_id = lookup(doc.at("unk_token").get<std::string>(), "unk");
    if (doc.contains("splits")) {
      for (const auto& [word, pieces] : doc.at("splits").items()) {
        auto list = pieces.get<std::vector<std::string>>();
        if (list.empty()) throw ValidationError("empty split for '" + word + "'");
        for (const auto& p : list) lookup(p, "split");
        splits_.emplace(word, std::move(list));
      }
    }
    for (const auto& q : doc.at("queries")) {
      auto& entry = queries_[q.at("text").get<std::string>()];
      for (const auto& pos : q.at("probs")) {
        auto& cands = entry[pos.at("position").get<std::size_t>()];
        for (const auto& [tok, p] : pos.at("candidates").items()) {
          lookup(tok, "candidate");
          cands[tok] = p.get<double>();
        }
      }
    }
    if (doc.contains("embeddings")) {
      for (const auto& [tok, vec] : doc.at("embeddings").items()) {
        lookup(tok, "embedding");
        const auto v = vec.get<std::vector<double>>();
        if (info_.hidden_dim == 0) info_.hidden_dim = static_cast<std::int64_t>(v.size());
        if (static_cast<std::int64_t>(v.size()) != info_.hidden_dim || v.empty()) {
          throw ValidationError("embedding for '" + tok + "' has the wrong width");
        }
        embeddings_.emplace(tok, Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
      }
    }
  }

  BackendInfo info_;
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> ids_;
  std::unordered_map<std::string, std::vector<std::string>> splits_;
  std::unordered_map<std::string, std::map<std::size_t, std::map<std::string, double>>> queries_;
  std::unordered_map<std::string, Eigen::VectorXd> embeddings_;
};

}  // namespace cbscore
