#include "xrec/eval.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <thread>

namespace xrec {

namespace {

using nlohmann::json;

struct Endpoint {
  std::string base;    // scheme://host:port
  std::string prefix;  // optional path prefix, "" or "/v1"
};

Endpoint parse_endpoint(const std::string& url) {
  if (url.rfind("https://", 0) == 0)
    throw JudgeUnavailable("https judge endpoints are not supported by this build: " + url);
  if (url.rfind("http://", 0) != 0)
    throw JudgeUnavailable("judge endpoint must start with http://, got: " + url);
  std::size_t host_start = std::string("http://").size();
  std::size_t slash = url.find('/', host_start);
  Endpoint e;
  if (slash == std::string::npos) {
    e.base = url;
  } else {
    e.base = url.substr(0, slash);
    e.prefix = url.substr(slash);
    while (!e.prefix.empty() && e.prefix.back() == '/') e.prefix.pop_back();
  }
  return e;
}

/// First run of digits in the text, clamped to [0, 100].
int parse_first_integer(const std::string& text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(text[i]))) continue;
    std::size_t j = i;
    long value = 0;
    while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j])) && value < 1000)
      value = value * 10 + (text[j++] - '0');
    return static_cast<int>(std::clamp(value, 0l, 100l));
  }
  throw JudgeUnparseable("no integer found in judge reply", text);
}

int judge_score_live(const std::string& candidate, const std::string& reference,
                     const JudgeConfig& config) {
  Endpoint ep = parse_endpoint(config.endpoint);
  httplib::Client client(ep.base);
  auto whole = static_cast<time_t>(config.timeout_seconds);
  auto frac = static_cast<time_t>((config.timeout_seconds - static_cast<double>(whole)) * 1e6);
  client.set_connection_timeout(whole, frac);
  client.set_read_timeout(whole, frac);
  client.set_write_timeout(whole, frac);

  json body = {{"model", config.model},
               {"messages",
                json::array({{{"role", "system"}, {"content", config.system_prompt}},
                             {{"role", "user"},
                              {"content", "Ground truth: " + reference +
                                              "\nExplanation: " + candidate}}})}};
  std::string payload = body.dump();
  std::string path = ep.prefix + "/chat/completions";

  std::string last_error;
  int attempts = std::max(0, config.max_retries) + 1;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(50 * attempt));
    httplib::Result res = client.Post(path, payload, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;  // transport failure: retry
    }
    if (res->status >= 500) {
      last_error = "server status " + std::to_string(res->status);
      continue;  // server-side failure: retry
    }
    if (res->status != 200)
      throw JudgeUnavailable("judge endpoint rejected the request with status " +
                             std::to_string(res->status));
    json reply;
    try {
      reply = json::parse(res->body);
    } catch (const json::exception&) {
      throw JudgeUnparseable("judge reply is not valid JSON", res->body);
    }
    if (!reply.contains("choices") || !reply["choices"].is_array() || reply["choices"].empty())
      throw JudgeUnparseable("judge reply lacks choices", res->body);
    const json& first = reply["choices"][0];
    if (!first.contains("message") || !first["message"].contains("content") ||
        !first["message"]["content"].is_string())
      throw JudgeUnparseable("judge reply lacks message content", res->body);
    return parse_first_integer(first["message"]["content"].get<std::string>());
  }
  throw JudgeUnavailable("judge endpoint unreachable after " + std::to_string(attempts) +
                         " attempt(s): " + last_error);
}

}  // namespace

int judge_score(const std::string& candidate, const std::string& reference,
                const JudgeConfig& config) {
  if (config.stub_mode) return judge_score_stub(candidate, reference);
  return judge_score_live(candidate, reference, config);
}

}  // namespace xrec
