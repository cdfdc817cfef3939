#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rwkv_clip/data.hpp"

namespace rwkv_clip {

struct LlmRequest {
  std::string prompt;
  std::string model = "llama3-8b-fusion";
  std::size_t max_tokens = 256;
  double temperature = 0.2;

  void validate() const;
};

struct LlmResponse {
  std::string text;
  std::string finish_reason;
  std::chrono::milliseconds latency{0};
};

/// Raised by clients for transport or protocol failures; fuse_descriptions retries on it.
class LlmError : public Error {
 public:
  using Error::Error;
};

/// A chat-completion endpoint. Implementations must be callable from several threads.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual LlmResponse complete(const LlmRequest& request) = 0;
};

/// Offline client: answers "fused: " + the raw caption found in the prompt.
class MockChatClient : public ChatClient {
 public:
  LlmResponse complete(const LlmRequest& request) override;
};

/// {model, messages:[{role:"user", content}], temperature, max_tokens}
nlohmann::json chat_request_body(const LlmRequest& request);
/// Reads choices[0].message.content and choices[0].finish_reason.
LlmResponse parse_chat_response(const nlohmann::json& body);

struct HttpClientOptions {
  /// Full endpoint, e.g. "https://host/v1/chat/completions".
  std::string url;
  std::optional<std::string> api_key;  // sent as a Bearer token
  std::chrono::seconds timeout{60};

  /// Takes the key from RWKV_CLIP_LLM_KEY when set.
  static HttpClientOptions from_env(std::string url);
};

class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(HttpClientOptions options);
  LlmResponse complete(const LlmRequest& request) override;

 private:
  HttpClientOptions options_;
  std::string scheme_host_port_;
  std::string path_;
};

struct FuseOptions {
  std::size_t concurrency = 4;
  std::size_t retries = 3;  // attempts after the first
  std::chrono::milliseconds backoff{200};  // doubled after every failure
  LlmRequest request_template;  // prompt is replaced per record
  /// Replaces the real sleep between attempts (tests).
  std::function<void(std::chrono::milliseconds)> sleep;
};

struct FuseOutcome {
  std::string id;
  std::size_t retries = 0;  // failed attempts before success or giving up
  bool ok = false;
  std::string error;
};

struct FuseReport {
  std::vector<FuseOutcome> outcomes;  // one per record, input order
  std::size_t requests = 0;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
};

/// Fills generated_description for every record through the client, with up to
/// `concurrency` requests in flight. Failed records keep generated_description
/// empty. raw_text, synthetic_caption and tags are never modified.
FuseReport fuse_descriptions(std::vector<PairedRecord>& records, ChatClient& client, const FuseOptions& options = {});

}  // namespace rwkv_clip
