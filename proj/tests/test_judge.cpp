#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "xrec/eval.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <string>
#include <thread>

using namespace xrec;
using nlohmann::json;

namespace {

/// In-process chat-completion endpoint bound to a free localhost port.
struct TestServer {
  httplib::Server svr;
  int port = 0;
  std::thread thread;

  void start() {
    port = svr.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thread = std::thread([this] { svr.listen_after_bind(); });
    svr.wait_until_ready();
  }

  ~TestServer() {
    svr.stop();
    if (thread.joinable()) thread.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port); }
};

std::string chat_reply(const std::string& content) {
  json reply = {{"choices", json::array({{{"message", {{"content", content}}}}})}};
  return reply.dump();
}

JudgeConfig live_config(const std::string& endpoint, int max_retries = 3) {
  JudgeConfig cfg;
  cfg.stub_mode = false;
  cfg.endpoint = endpoint;
  cfg.timeout_seconds = 5.0;
  cfg.max_retries = max_retries;
  return cfg;
}

}  // namespace

TEST_CASE("a live judge call carries the prompts and parses the score") {
  TestServer server;
  std::string seen_body;
  server.svr.Post("/chat/completions",
                  [&](const httplib::Request& req, httplib::Response& res) {
                    seen_body = req.body;
                    res.set_content(chat_reply("Score: 87 (well aligned)"), "application/json");
                  });
  server.start();

  JudgeConfig cfg = live_config(server.endpoint());
  cfg.model = "scoring-model";
  int score = judge_score("a tidy explanation", "the ground truth text", cfg);
  CHECK(score == 87);

  json body = json::parse(seen_body);
  CHECK(body["model"] == "scoring-model");
  REQUIRE(body["messages"].size() == 2);
  CHECK(body["messages"][0]["role"] == "system");
  CHECK(body["messages"][0]["content"] == kJudgeSystemPrompt);
  CHECK(body["messages"][1]["role"] == "user");
  std::string user = body["messages"][1]["content"].get<std::string>();
  CHECK(user == "Ground truth: the ground truth text\nExplanation: a tidy explanation");
}

TEST_CASE("the system prompt asks for a bare 0-100 score") {
  std::string prompt(kJudgeSystemPrompt);
  CHECK(prompt.find("0 to 100") != std::string::npos);
  CHECK(prompt.find("alignment of meanings") != std::string::npos);
  CHECK(prompt.find("do not provide any other text") != std::string::npos);
}

TEST_CASE("endpoint paths may carry a prefix or a trailing slash") {
  TestServer server;
  server.svr.Post("/v1/chat/completions",
                  [](const httplib::Request&, httplib::Response& res) {
                    res.set_content(chat_reply("55"), "application/json");
                  });
  server.svr.Post("/chat/completions",
                  [](const httplib::Request&, httplib::Response& res) {
                    res.set_content(chat_reply("66"), "application/json");
                  });
  server.start();

  CHECK(judge_score("c", "r", live_config(server.endpoint() + "/v1")) == 55);
  CHECK(judge_score("c", "r", live_config(server.endpoint() + "/v1/")) == 55);
  CHECK(judge_score("c", "r", live_config(server.endpoint() + "/")) == 66);
}

TEST_CASE("transient 5xx responses are retried until the endpoint recovers") {
  TestServer server;
  std::atomic<int> calls{0};
  server.svr.Post("/chat/completions",
                  [&](const httplib::Request&, httplib::Response& res) {
                    if (calls.fetch_add(1) < 2) {
                      res.status = 503;
                      res.set_content("overloaded", "text/plain");
                    } else {
                      res.set_content(chat_reply("42"), "application/json");
                    }
                  });
  server.start();

  CHECK(judge_score("c", "r", live_config(server.endpoint(), 3)) == 42);
  CHECK(calls.load() == 3);

  // With no retry budget the same failure pattern surfaces as unavailability.
  calls.store(0);
  CHECK_THROWS_AS(judge_score("c", "r", live_config(server.endpoint(), 0)),
                  JudgeUnavailable);
}

TEST_CASE("a client error is fatal immediately, without retries") {
  TestServer server;
  std::atomic<int> calls{0};
  server.svr.Post("/chat/completions",
                  [&](const httplib::Request&, httplib::Response& res) {
                    calls.fetch_add(1);
                    res.status = 403;
                    res.set_content("forbidden", "text/plain");
                  });
  server.start();

  CHECK_THROWS_WITH_AS(judge_score("c", "r", live_config(server.endpoint(), 3)),
                       doctest::Contains("403"), JudgeUnavailable);
  CHECK(calls.load() == 1);
}

TEST_CASE("replies without a parseable score raise errors carrying the raw text") {
  TestServer server;
  std::string next_reply;
  server.svr.Post("/chat/completions",
                  [&](const httplib::Request&, httplib::Response& res) {
                    res.set_content(next_reply, "application/json");
                  });
  server.start();
  JudgeConfig cfg = live_config(server.endpoint());

  next_reply = chat_reply("utterly scoreless words");
  try {
    judge_score("c", "r", cfg);
    FAIL("expected JudgeUnparseable");
  } catch (const JudgeUnparseable& e) {
    CHECK(e.raw_reply == "utterly scoreless words");
    CHECK(std::string(e.what()).find("utterly scoreless words") != std::string::npos);
  }

  next_reply = "this is not json {{{";
  CHECK_THROWS_AS(judge_score("c", "r", cfg), JudgeUnparseable);

  next_reply = R"({"choices":[]})";
  CHECK_THROWS_WITH_AS(judge_score("c", "r", cfg), doctest::Contains("choices"),
                       JudgeUnparseable);

  next_reply = R"({"choices":[{"message":{}}]})";
  CHECK_THROWS_WITH_AS(judge_score("c", "r", cfg), doctest::Contains("content"),
                       JudgeUnparseable);
}

TEST_CASE("scores are read as the first integer and clamped to [0, 100]") {
  TestServer server;
  std::string next_reply;
  server.svr.Post("/chat/completions",
                  [&](const httplib::Request&, httplib::Response& res) {
                    res.set_content(chat_reply(next_reply), "application/json");
                  });
  server.start();
  JudgeConfig cfg = live_config(server.endpoint());

  next_reply = "93";
  CHECK(judge_score("c", "r", cfg) == 93);
  next_reply = "I would rate this 71 out of 100.";
  CHECK(judge_score("c", "r", cfg) == 71);
  next_reply = "score: 007";
  CHECK(judge_score("c", "r", cfg) == 7);
  next_reply = "150";
  CHECK(judge_score("c", "r", cfg) == 100);  // clamped from above
  next_reply = "999999999999999999999999";  // would overflow a naive parse
  CHECK(judge_score("c", "r", cfg) == 100);
  next_reply = "0";
  CHECK(judge_score("c", "r", cfg) == 0);
}

TEST_CASE("an unreachable endpoint raises unavailability after all attempts") {
  // Bind-then-close guarantees a port with no listener.
  int dead_port = 0;
  {
    TestServer probe;
    probe.start();
    dead_port = probe.port;
  }
  JudgeConfig cfg = live_config("http://127.0.0.1:" + std::to_string(dead_port), 1);
  cfg.timeout_seconds = 1.0;
  CHECK_THROWS_WITH_AS(judge_score("c", "r", cfg), doctest::Contains("2 attempt(s)"),
                       JudgeUnavailable);
}

TEST_CASE("unsupported endpoint schemes are rejected up front") {
  JudgeConfig cfg = live_config("https://example.invalid");
  CHECK_THROWS_WITH_AS(judge_score("c", "r", cfg), doctest::Contains("https"),
                       JudgeUnavailable);
  cfg.endpoint = "ftp://example.invalid";
  CHECK_THROWS_WITH_AS(judge_score("c", "r", cfg), doctest::Contains("http://"),
                       JudgeUnavailable);
}
