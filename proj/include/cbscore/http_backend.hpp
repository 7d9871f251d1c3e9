#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <optional>
#include <semaphore>
#include <set>
#include <string>
#include <thread>

#include <json.hpp>

#include "cbscore/backend.hpp"

// httplib pulls in <resolv.h>, whose _res macro breaks any Eigen header
// included afterwards.
#include <httplib.h>
#undef _res

namespace cbscore {

inline constexpr const char* kServerUrlEnv = "CBSCORE_SERVER_URL";

struct HttpBackendConfig {
  /// e.g. "http://127.0.0.1:8080"; an optional path prefix is kept.
  std::string base_url;
  int parallelism = 8;
  /// Extra attempts after a transport failure or a 5xx reply.
  int retries = 2;
  std::chrono::milliseconds timeout{30000};
  std::chrono::milliseconds retry_backoff{50};
};

/// Client for the model-server wire protocol:
///
///     GET  /v1/info          -> {model_id, vocab_size, hidden_dim, mask_token_id, layer[, unk_token_id]}
///     POST /v1/tokenize      {text} -> {token_ids, word_spans: [{word, start, end}]}
///     POST /v1/mask_probs    {token_ids: [int|null], candidates: [{position, token_ids}]}
///                            -> {probs: [{position, token_id, p}]}
///     POST /v1/hidden_states {token_ids} -> {layer, vectors: [[float]]}
///
/// Token ids never include special tokens; positions index `token_ids` as
/// sent. Every reply is checked against the contract and violations raise
/// ProtocolError. At most `parallelism` requests are in flight at once.
class HttpBackend final : public MaskedLanguageModel {
 public:
  explicit HttpBackend(HttpBackendConfig config)
      : config_(std::move(config)),
        slots_(std::make_unique<std::counting_semaphore<>>(std::max(1, config_.parallelism))) {
    if (config_.parallelism < 1) throw PreconditionError("parallelism must be >= 1");
    if (config_.retries < 0) throw PreconditionError("retries must be >= 0");
    split_url();
    fetch_info();
  }

  /// Reads the base URL from CBSCORE_SERVER_URL.
  static HttpBackendConfig config_from_env() {
    const char* url = std::getenv(kServerUrlEnv);
    if (url == nullptr || *url == '\0') {
      throw PreconditionError(std::string(kServerUrlEnv) + " is not set and no server URL was given");
    }
    HttpBackendConfig cfg;
    cfg.base_url = url;
    return cfg;
  }

  const BackendInfo& info() const override { return info_; }

  Tokenization tokenize(std::string_view text) const override {
    detail::require_text(text);
    const auto reply = request("/v1/tokenize", nlohmann::json{{"text", std::string(text)}});
    Tokenization out;
    try {
      for (const auto& id : reply.at("token_ids")) out.ids.push_back(checked_id(id.get<std::int64_t>()));
      std::size_t cursor = 0;
      for (const auto& w : reply.at("word_spans")) {
        WordSpan span{w.at("word").get<std::string>(), {w.at("start").get<std::size_t>(), w.at("end").get<std::size_t>()}};
        if (span.tokens.begin != cursor || span.tokens.end <= span.tokens.begin || span.tokens.end > out.ids.size()) {
          throw ProtocolError("word_spans do not tile token_ids");
        }
        cursor = span.tokens.end;
        out.words.push_back(std::move(span));
      }
      if (cursor != out.ids.size()) throw ProtocolError("word_spans do not cover every token");
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("bad /v1/tokenize reply: ") + e.what());
    }
    return out;
  }

  MaskProbs mask_probs(const MaskQuery& query) const override {
    query.validate();
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& t : query.tokens) ids.push_back(t ? nlohmann::json(t->value) : nlohmann::json(nullptr));
    nlohmann::json cands = nlohmann::json::array();
    std::set<MaskProbs::Key> wanted;
    for (const auto& c : query.candidates) {
      nlohmann::json list = nlohmann::json::array();
      for (const auto id : c.token_ids) {
        list.push_back(id.value);
        wanted.insert({c.position, id});
      }
      cands.push_back({{"position", c.position}, {"token_ids", list}});
    }
    const auto reply = request("/v1/mask_probs", nlohmann::json{{"token_ids", ids}, {"candidates", cands}});

    MaskProbs out;
    try {
      for (const auto& e : reply.at("probs")) {
        const auto pos = e.at("position").get<std::size_t>();
        const TokenId id{e.at("token_id").get<std::int64_t>()};
        if (!wanted.count({pos, id})) {
          throw ProtocolError("server returned unrequested pair (" + std::to_string(pos) + ", " +
                              std::to_string(id.value) + ")");
        }
        out.set(pos, id, e.at("p").get<double>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("bad /v1/mask_probs reply: ") + e.what());
    }
    if (out.size() != wanted.size()) throw ProtocolError("server omitted requested probabilities");
    out.validate();
    return out;
  }

  HiddenStates hidden_states(std::span<const TokenId> tokens) const override {
    if (tokens.empty()) throw PreconditionError("hidden_states needs at least one token");
    nlohmann::json ids = nlohmann::json::array();
    for (const auto t : tokens) ids.push_back(t.value);
    const auto reply = request("/v1/hidden_states", nlohmann::json{{"token_ids", ids}});
    HiddenStates out;
    try {
      out.layer = reply.at("layer").get<int>();
      const auto& rows = reply.at("vectors");
      if (rows.size() != tokens.size()) {
        throw ProtocolError("hidden_states returned " + std::to_string(rows.size()) + " vectors for " +
                            std::to_string(tokens.size()) + " tokens");
      }
      out.vectors.resize(info_.hidden_dim, static_cast<Eigen::Index>(rows.size()));
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto row = rows[i].get<std::vector<double>>();
        if (static_cast<std::int64_t>(row.size()) != info_.hidden_dim) {
          throw ProtocolError("server declared hidden_dim " + std::to_string(info_.hidden_dim) + " but returned a " +
                              std::to_string(row.size()) + "-wide vector");
        }
        for (std::size_t j = 0; j < row.size(); ++j) {
          if (!std::isfinite(row[j])) throw ProtocolError("non-finite hidden state entry");
          out.vectors(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = row[j];
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("bad /v1/hidden_states reply: ") + e.what());
    }
    return out;
  }

 private:
  void split_url() {
    const auto scheme = config_.base_url.find("://");
    if (scheme == std::string::npos) throw PreconditionError("server URL needs a scheme: " + config_.base_url);
    const auto path = config_.base_url.find('/', scheme + 3);
    origin_ = config_.base_url.substr(0, path);
    if (path != std::string::npos) {
      prefix_ = config_.base_url.substr(path);
      while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    }
  }

  void fetch_info() {
    const auto reply = request("/v1/info", std::nullopt);
    try {
      info_.model_id = reply.at("model_id").get<std::string>();
      info_.vocab_size = reply.at("vocab_size").get<std::int64_t>();
      info_.hidden_dim = reply.at("hidden_dim").get<std::int64_t>();
      info_.mask_token_id = TokenId{reply.at("mask_token_id").get<std::int64_t>()};
      info_.layer = reply.at("layer").get<int>();
      if (reply.contains("unk_token_id") && !reply.at("unk_token_id").is_null()) {
        info_.unk_token_id = TokenId{reply.at("unk_token_id").get<std::int64_t>()};
      }
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("bad /v1/info reply: ") + e.what());
    }
    if (info_.vocab_size <= 0 || info_.hidden_dim <= 0) throw ProtocolError("/v1/info reports non-positive sizes");
  }

  TokenId checked_id(std::int64_t v) const {
    if (v < 0 || v >= info_.vocab_size) throw ProtocolError("token id " + std::to_string(v) + " outside vocabulary");
    return TokenId{v};
  }

  nlohmann::json request(const std::string& path, const std::optional<nlohmann::json>& body) const {
    slots_->acquire();
    struct Release {
      std::counting_semaphore<>* s;
      ~Release() { s->release(); }
    } release{slots_.get()};

    std::string last_error;
    for (int attempt = 0; attempt <= config_.retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(config_.retry_backoff * attempt);
      httplib::Client client(origin_);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
      const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
      client.set_connection_timeout(secs.count(), usecs.count());
      client.set_read_timeout(secs.count(), usecs.count());
      client.set_write_timeout(secs.count(), usecs.count());
      auto res = body ? client.Post(prefix_ + path, body->dump(), "application/json") : client.Get(prefix_ + path);
      if (!res) {
        last_error = path + ": " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 200 && res->status < 300) {
        try {
          return nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::parse_error& e) {
          throw ProtocolError(path + ": reply is not JSON: " + e.what());
        }
      }
      const auto message = error_message(*res);
      if (res->status >= 500) {
        last_error = path + ": HTTP " + std::to_string(res->status) + ": " + message;
        continue;
      }
      throw ProtocolError(path + ": HTTP " + std::to_string(res->status) + ": " + message);
    }
    throw TransportError(last_error + " (after " + std::to_string(config_.retries + 1) + " attempts)");
  }

  static std::string error_message(const httplib::Response& res) {
    try {
      const auto doc = nlohmann::json::parse(res.body);
      if (doc.contains("error")) return doc.at("error").get<std::string>();
    } catch (const nlohmann::json::exception&) {
    }
    return res.body;
  }

  HttpBackendConfig config_;
  std::unique_ptr<std::counting_semaphore<>> slots_;
  std::string origin_;
  std::string prefix_;
  BackendInfo info_;
};

}  // namespace cbscore
