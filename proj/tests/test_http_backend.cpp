#include <atomic>
#include <cstdlib>
#include <future>
#include <string>
#include <thread>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cbscore/http_backend.hpp"
#include "cbscore/lexicon.hpp"
#include "cbscore/mock_backend.hpp"
#include "cbscore/prob.hpp"

using namespace cbscore;
using nlohmann::json;

namespace {

/// In-process model server speaking the wire protocol, answering from a
/// MockBackend. Knobs inject the failure modes the client must handle.
class FakeServer {
 public:
  explicit FakeServer(MockConfig cfg = {}) : lm_(cfg) {
    server_.Get("/v1/info", [this](const httplib::Request&, httplib::Response& res) {
      if (fail(res)) return;
      const auto& i = lm_.info();
      reply(res, {{"model_id", i.model_id},
                  {"vocab_size", i.vocab_size},
                  {"hidden_dim", declared_dim.load() > 0 ? declared_dim.load() : i.hidden_dim},
                  {"mask_token_id", i.mask_token_id.value},
                  {"layer", i.layer},
                  {"unk_token_id", i.unk_token_id->value}});
    });
    server_.Post("/v1/tokenize", [this](const httplib::Request& req, httplib::Response& res) {
      if (fail(res)) return;
      const auto body = json::parse(req.body);
      const auto t = lm_.tokenize(body.at("text").get<std::string>());
      json ids = json::array();
      for (auto id : t.ids) ids.push_back(id.value);
      json spans = json::array();
      for (const auto& w : t.words) spans.push_back({{"word", w.word}, {"start", w.tokens.begin}, {"end", w.tokens.end}});
      reply(res, {{"token_ids", ids}, {"word_spans", spans}});
    });
    server_.Post("/v1/mask_probs", [this](const httplib::Request& req, httplib::Response& res) {
      if (fail(res)) return;
      const auto now = ++in_flight;
      for (auto seen = max_in_flight.load(); now > seen && !max_in_flight.compare_exchange_weak(seen, now);) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(handler_delay_ms.load()));
      --in_flight;
      const auto body = json::parse(req.body);
      MaskQuery q;
      std::size_t pos = 0;
      std::optional<std::size_t> run_start;
      for (const auto& t : body.at("token_ids")) {
        if (t.is_null()) {
          q.tokens.push_back(std::nullopt);
          if (!run_start) run_start = pos;
        } else {
          q.tokens.push_back(TokenId{t.get<std::int64_t>()});
          if (run_start) q.mask_spans[q.mask_spans.empty() ? SlotRole::Target : SlotRole::Attribute] = {*run_start, pos};
          run_start.reset();
        }
        ++pos;
      }
      if (run_start) q.mask_spans[q.mask_spans.empty() ? SlotRole::Target : SlotRole::Attribute] = {*run_start, pos};
      for (const auto& c : body.at("candidates")) {
        CandidateList cl{c.at("position").get<std::size_t>(), {}};
        for (const auto& id : c.at("token_ids")) cl.token_ids.push_back(TokenId{id.get<std::int64_t>()});
        q.candidates.push_back(cl);
      }
      MaskProbs p;
      try {
        p = lm_.mask_probs(q);
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", e.what()}}.dump(), "application/json");
        return;
      }
      json probs = json::array();
      for (const auto& [key, v] : p.entries()) {
        probs.push_back({{"position", key.first}, {"token_id", key.second.value}, {"p", v * prob_scale.load()}});
      }
      if (drop_one_prob.load() && !probs.empty()) probs.erase(probs.begin());
      reply(res, {{"probs", probs}});
    });
    server_.Post("/v1/hidden_states", [this](const httplib::Request& req, httplib::Response& res) {
      if (fail(res)) return;
      std::vector<TokenId> toks;
      const auto body = json::parse(req.body);
      for (const auto& t : body.at("token_ids")) toks.push_back(TokenId{t.get<std::int64_t>()});
      const auto hs = lm_.hidden_states(toks);
      json rows = json::array();
      for (Eigen::Index c = 0; c < hs.count(); ++c) {
        json row = json::array();
        for (Eigen::Index r = 0; r < hs.dim(); ++r) row.push_back(hs.vectors(r, c));
        rows.push_back(row);
      }
      reply(res, {{"layer", hs.layer}, {"vectors", rows}});
    });
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "unknown";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      }
      res.status = 500;
      res.set_content(json{{"error", what}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  const MockBackend& model() const { return lm_; }

  std::atomic<int> fail_next{0};
  std::atomic<int> fail_status{503};
  std::atomic<int> requests{0};
  std::atomic<std::int64_t> declared_dim{0};
  std::atomic<double> prob_scale{1.0};
  std::atomic<bool> drop_one_prob{false};
  std::atomic<int> handler_delay_ms{0};
  std::atomic<int> in_flight{0};
  std::atomic<int> max_in_flight{0};

 private:
  bool fail(httplib::Response& res) {
    ++requests;
    if (fail_next.load() > 0) {
      --fail_next;
      res.status = fail_status.load();
      res.set_content(R"({"error": "injected failure"})", "application/json");
      return true;
    }
    return false;
  }

  static void reply(httplib::Response& res, const json& body) { res.set_content(body.dump(), "application/json"); }

  MockBackend lm_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

HttpBackendConfig config_for(const FakeServer& s, int retries = 2) {
  HttpBackendConfig c;
  c.base_url = s.url();
  c.retries = retries;
  c.retry_backoff = std::chrono::milliseconds(1);
  c.timeout = std::chrono::milliseconds(5000);
  return c;
}

MaskQuery simple_query(const MaskedLanguageModel& lm) {
  MaskQuery q;
  for (auto id : lm.tokenize("People from").ids) q.tokens.push_back(id);
  const auto m = q.tokens.size();
  q.tokens.insert(q.tokens.end(), {std::nullopt, std::nullopt});
  for (auto id : lm.tokenize("are nurses .").ids) q.tokens.push_back(id);
  q.mask_spans[SlotRole::Target] = {m, m + 2};
  q.candidates = {{m, {TokenId{100}, TokenId{200}}}, {m + 1, {TokenId{300}}}};
  return q;
}

}  // namespace

TEST(HttpBackend, InfoTokenizeAndProbsMatchTheModel) {
  FakeServer server(MockConfig{.seed = 3, .split_size = 2});
  const HttpBackend client(config_for(server));
  EXPECT_EQ(client.info().model_id, server.model().info().model_id);
  EXPECT_EQ(client.info().hidden_dim, server.model().info().hidden_dim);
  EXPECT_EQ(client.info().unk_token_id, server.model().info().unk_token_id);

  const auto t = client.tokenize("People from Korea");
  EXPECT_EQ(t.ids, server.model().tokenize("People from Korea").ids);
  EXPECT_EQ(t.words, server.model().tokenize("People from Korea").words);

  const auto q = simple_query(client);
  EXPECT_EQ(client.mask_probs(q).entries(), server.model().mask_probs(q).entries());

  const std::vector<TokenId> toks{TokenId{10}, TokenId{11}, TokenId{12}};
  const auto hs = client.hidden_states(toks);
  EXPECT_TRUE(hs.vectors == server.model().hidden_states(toks).vectors);
}

TEST(HttpBackend, DimensionMismatchIsProtocolError) {
  FakeServer server(MockConfig{.hidden_dim = 512});
  server.declared_dim = 768;
  const HttpBackend client(config_for(server));
  EXPECT_THROW(client.hidden_states(std::vector<TokenId>{TokenId{5}}), ProtocolError);
}

TEST(HttpBackend, RetriesTransientServerErrors) {
  FakeServer server;
  const HttpBackend client(config_for(server, 2));
  server.fail_next = 2;
  server.requests = 0;
  EXPECT_NO_THROW(client.tokenize("hello"));
  EXPECT_EQ(server.requests.load(), 3);

  server.fail_next = 3;
  EXPECT_THROW(client.tokenize("hello"), TransportError);
}

TEST(HttpBackend, ClientErrorsAreNotRetried) {
  FakeServer server;
  const HttpBackend client(config_for(server, 2));
  server.fail_status = 400;
  server.fail_next = 1;
  server.requests = 0;
  try {
    client.tokenize("hello");
    FAIL();
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("injected failure"), std::string::npos);
  }
  EXPECT_EQ(server.requests.load(), 1);
}

TEST(HttpBackend, UnreachableServerIsTransportError) {
  HttpBackendConfig c;
  c.base_url = "http://127.0.0.1:1";
  c.retries = 1;
  c.retry_backoff = std::chrono::milliseconds(1);
  c.timeout = std::chrono::milliseconds(500);
  EXPECT_THROW(HttpBackend{c}, TransportError);
}

TEST(HttpBackend, ContractViolationsInRepliesAreProtocolErrors) {
  FakeServer server;
  const HttpBackend client(config_for(server));
  const auto q = simple_query(client);
  server.prob_scale = 50.0;
  EXPECT_THROW(client.mask_probs(q), ProtocolError);
  server.prob_scale = 1.0;
  server.drop_one_prob = true;
  EXPECT_THROW(client.mask_probs(q), ProtocolError);
}

TEST(HttpBackend, InFlightRequestsAreBounded) {
  FakeServer server;
  auto cfg = config_for(server);
  cfg.parallelism = 3;
  const HttpBackend client(cfg);
  const auto q = simple_query(client);
  server.handler_delay_ms = 30;
  std::vector<std::future<MaskProbs>> futures;
  for (int i = 0; i < 12; ++i) futures.push_back(std::async(std::launch::async, [&] { return client.mask_probs(q); }));
  for (auto& f : futures) EXPECT_EQ(f.get().size(), 3u);
  EXPECT_LE(server.max_in_flight.load(), 3);
  EXPECT_GE(server.max_in_flight.load(), 2);
}

TEST(HttpBackend, ServerUrlFromEnvironment) {
  FakeServer server;
  ::setenv(kServerUrlEnv, server.url().c_str(), 1);
  const auto cfg = HttpBackend::config_from_env();
  EXPECT_EQ(cfg.base_url, server.url());
  ::unsetenv(kServerUrlEnv);
  EXPECT_THROW(HttpBackend::config_from_env(), PreconditionError);
}

TEST(HttpBackend, SweepOverTheWireMatchesInProcessSweep) {
  MockConfig mc{.seed = 5, .split_size = 2};
  FakeServer server(mc);
  auto cfg = config_for(server);
  cfg.parallelism = 4;
  const HttpBackend client(cfg);
  const auto pack = make_pack(parse_template_file("People from [TGT] are [ATTR].\n[ATTR] are from [TGT].", "en"),
                              Lexicon{"en", {"Korea", "Japan", "Brazil"}, {"nurse", "bus driver"}});
  const auto remote = sweep(pack, client, {.parallelism = 4});
  const auto local = sweep(pack, MockBackend(mc));
  ASSERT_EQ(remote.cells.size(), local.cells.size());
  for (std::size_t i = 0; i < local.cells.size(); ++i) {
    EXPECT_EQ(remote.cells[i].log_normalized, local.cells[i].log_normalized);
  }
}
