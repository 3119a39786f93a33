#pragma once

// Pulls in httplib, so it lives apart from client.hpp. Define
// CPPHTTPLIB_OPENSSL_SUPPORT (and link OpenSSL::SSL) for https endpoints.

#include <cstdlib>
#include <string>

#include "httplib.h"
#include "json.hpp"

#include "accpp/autointerp/client.hpp"

namespace accpp {

struct EndpointConfig {
  std::string url = "http://localhost:8000/v1";  // base; /chat/completions is appended
  std::string api_key_env = "ACCPP_API_KEY";     // bearer token, read at call time; unset = no auth
  int timeout_s = 120;
};

/// OpenAI-compatible chat-completion endpoint.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(EndpointConfig cfg) : cfg_(std::move(cfg)) {
    const auto scheme = cfg_.url.find("://");
    ACCPP_REQUIRE(scheme != std::string::npos, ErrorCode::config, "endpoint url needs a scheme: " + cfg_.url);
    const auto path = cfg_.url.find('/', scheme + 3);
    host_ = cfg_.url.substr(0, path);
    prefix_ = path == std::string::npos ? "" : cfg_.url.substr(path);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  std::string complete(const ChatRequest& req) override {
    httplib::Client cli(host_);
    cli.set_connection_timeout(cfg_.timeout_s);
    cli.set_read_timeout(cfg_.timeout_s);
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
      headers.emplace("Authorization", std::string("Bearer ") + key);
    auto res = cli.Post(prefix_ + "/chat/completions", headers, request_to_json(req).dump(), "application/json");
    ACCPP_REQUIRE(res, ErrorCode::transport, "request to " + cfg_.url + " failed: " + httplib::to_string(res.error()));
    ACCPP_REQUIRE(res->status == 200, ErrorCode::transport,
                  "endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    try {
      auto j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::transport, "malformed completion payload: " + std::string(e.what()));
    }
  }

 private:
  EndpointConfig cfg_;
  std::string host_, prefix_;
};

}  // namespace accpp
