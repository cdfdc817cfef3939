#include "rwkv_clip/llm.hpp"

#include <atomic>
#include <cstdlib>
#include <mutex>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

namespace rwkv_clip {

void LlmRequest::validate() const { RWKV_CHECK(!prompt.empty(), "LLM request: prompt must be non-empty"); }

LlmResponse MockChatClient::complete(const LlmRequest& request) {
  request.validate();
  static constexpr std::string_view kRawMarker = "Raw caption:";
  static constexpr std::string_view kSyntheticMarker = ", synthetic caption:";
  std::string raw = request.prompt;
  if (auto begin = request.prompt.find(kRawMarker); begin != std::string::npos) {
    begin += kRawMarker.size();
    auto end = request.prompt.rfind(kSyntheticMarker);
    raw = request.prompt.substr(begin, end == std::string::npos || end < begin ? std::string::npos : end - begin);
  }
  return {"fused: " + raw, "stop", std::chrono::milliseconds{0}};
}

nlohmann::json chat_request_body(const LlmRequest& request) {
  request.validate();
  return {{"model", request.model},
          {"messages", nlohmann::json::array({{{"role", "user"}, {"content", request.prompt}}})},
          {"temperature", request.temperature},
          {"max_tokens", request.max_tokens}};
}

LlmResponse parse_chat_response(const nlohmann::json& body) {
  try {
    const auto& choice = body.at("choices").at(0);
    LlmResponse out;
    out.text = choice.at("message").at("content").get<std::string>();
    if (choice.contains("finish_reason") && choice.at("finish_reason").is_string())
      out.finish_reason = choice.at("finish_reason").get<std::string>();
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw LlmError(std::string("malformed chat completion response: ") + e.what());
  }
}

HttpClientOptions HttpClientOptions::from_env(std::string url) {
  HttpClientOptions options;
  options.url = std::move(url);
  if (const char* key = std::getenv("RWKV_CLIP_LLM_KEY"); key && *key) options.api_key = key;
  return options;
}

HttpChatClient::HttpChatClient(HttpClientOptions options) : options_(std::move(options)) {
  const auto scheme_end = options_.url.find("://");
  RWKV_CHECK(scheme_end != std::string::npos, "LLM url must include a scheme: " + options_.url);
  const auto path_begin = options_.url.find('/', scheme_end + 3);
  scheme_host_port_ = options_.url.substr(0, path_begin);
  path_ = path_begin == std::string::npos ? "/" : options_.url.substr(path_begin);
}

LlmResponse HttpChatClient::complete(const LlmRequest& request) {
  const auto start = std::chrono::steady_clock::now();
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(options_.timeout);
  client.set_read_timeout(options_.timeout);
  httplib::Headers headers;
  if (options_.api_key) headers.emplace("Authorization", "Bearer " + *options_.api_key);
  auto result = client.Post(path_, headers, chat_request_body(request).dump(), "application/json");
  if (!result) throw LlmError("LLM request failed: " + httplib::to_string(result.error()));
  if (result->status != 200)
    throw LlmError("LLM endpoint returned HTTP " + std::to_string(result->status) + ": " + result->body.substr(0, 200));
  nlohmann::json body;
  try {
    body = nlohmann::json::parse(result->body);
  } catch (const nlohmann::json::exception& e) {
    throw LlmError(std::string("LLM response is not JSON: ") + e.what());
  }
  auto response = parse_chat_response(body);
  response.latency =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
  return response;
}

FuseReport fuse_descriptions(std::vector<PairedRecord>& records, ChatClient& client, const FuseOptions& options) {
  FuseReport report;
  report.outcomes.resize(records.size());
  if (records.empty()) return report;

  auto sleep = options.sleep ? options.sleep : [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  std::vector<std::optional<std::string>> results(records.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> requests{0};

  // Workers only read records and write their own result slot.
  auto worker = [&] {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      const auto& rec = records[i];
      FuseOutcome& outcome = report.outcomes[i];
      outcome.id = rec.id;
      LlmRequest request = options.request_template;
      request.prompt = build_fusion_prompt(rec.raw_text, rec.synthetic_caption.value_or(""), rec.tags);
      auto backoff = options.backoff;
      for (std::size_t attempt = 0; attempt <= options.retries; ++attempt) {
        ++requests;
        try {
          results[i] = client.complete(request).text;
          outcome.ok = true;
          break;
        } catch (const std::exception& e) {
          outcome.error = e.what();
          if (attempt == options.retries) break;
          ++outcome.retries;
          sleep(backoff);
          backoff *= 2;
        }
      }
      if (outcome.ok) outcome.error.clear();
    }
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(options.concurrency, records.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (std::size_t i = 0; i < records.size(); ++i) {
    if (results[i]) {
      records[i].generated_description = std::move(*results[i]);
      ++report.succeeded;
    } else {
      ++report.failed;
    }
  }
  report.requests = requests;
  return report;
}

}  // namespace rwkv_clip
