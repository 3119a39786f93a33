#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "accpp/core/error.hpp"
#include "accpp/core/sha256.hpp"

namespace accpp {

struct ChatMessage {
  std::string role;  // "system" | "user" | "assistant"
  std::string content;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 1024;
};

inline nlohmann::json request_to_json(const ChatRequest& r) {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : r.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  return {{"model", r.model}, {"messages", msgs}, {"temperature", r.temperature}, {"max_tokens", r.max_tokens}};
}

/// Stable key for record/replay.
inline std::string request_key(const ChatRequest& r) { return sha256_hex(request_to_json(r).dump()); }

/// Chat-completion endpoint. Implementations throw Error(transport) on failure.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string complete(const ChatRequest& req) = 0;
};

class MockChatClient : public ChatClient {
 public:
  using Fn = std::function<std::string(const ChatRequest&)>;
  explicit MockChatClient(Fn fn) : fn_(std::move(fn)) {}
  std::string complete(const ChatRequest& req) override {
    std::lock_guard lk(mu_);
    ++calls_;
    return fn_(req);
  }
  int calls() const { return calls_; }

 private:
  Fn fn_;
  std::mutex mu_;
  int calls_ = 0;
};

/// Forwards to another client and appends each exchange to a JSONL log.
class RecordingChatClient : public ChatClient {
 public:
  RecordingChatClient(ChatClient& inner, std::filesystem::path log) : inner_(inner), log_(std::move(log)) {}
  std::string complete(const ChatRequest& req) override {
    auto resp = inner_.complete(req);
    std::lock_guard lk(mu_);
    std::ofstream out(log_, std::ios::app);
    ACCPP_REQUIRE(out, ErrorCode::io, "cannot append to " + log_.string());
    out << nlohmann::json{{"key", request_key(req)}, {"request", request_to_json(req)}, {"response", resp}}.dump()
        << "\n";
    return resp;
  }

 private:
  ChatClient& inner_;
  std::filesystem::path log_;
  std::mutex mu_;
};

/// Serves responses from a recorded log; identical requests replay in order.
class ReplayChatClient : public ChatClient {
 public:
  explicit ReplayChatClient(const std::filesystem::path& log) {
    std::ifstream in(log);
    ACCPP_REQUIRE(in, ErrorCode::io, "cannot open replay log " + log.string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        auto j = nlohmann::json::parse(line);
        answers_[j.at("key").get<std::string>()].push_back(j.at("response").get<std::string>());
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::parse, "replay log: " + std::string(e.what()));
      }
    }
  }
  std::string complete(const ChatRequest& req) override {
    std::lock_guard lk(mu_);
    const auto key = request_key(req);
    auto it = answers_.find(key);
    auto& used = used_[key];
    ACCPP_REQUIRE(it != answers_.end() && used < it->second.size(), ErrorCode::transport,
                  "replay log has no response for request " + key.substr(0, 12));
    return it->second[used++];
  }

 private:
  std::map<std::string, std::vector<std::string>> answers_;
  std::map<std::string, std::size_t> used_;
  std::mutex mu_;
};

struct RetryPolicy {
  int retries = 2;  // attempts = retries + 1
  std::chrono::milliseconds base_delay{500};
};

/// Calls fn until it returns, retrying transport and parse errors with
/// exponential backoff. The last error is rethrown.
template <class Fn>
auto with_retries(const RetryPolicy& policy, Fn&& fn) -> decltype(fn()) {
  for (int attempt = 0;; ++attempt) {
    try {
      return fn();
    } catch (const Error& e) {
      const bool retryable = e.code() == ErrorCode::transport || e.code() == ErrorCode::parse;
      if (!retryable || attempt >= policy.retries) throw;
      std::this_thread::sleep_for(policy.base_delay * (1 << attempt));
    }
  }
}

}  // namespace accpp
