#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <string_view>

#include "explore/config.hpp"
#include "explore/curation.hpp"
#include "explore/genpolicy.hpp"

namespace explore {

// Plain-HTTP text generation endpoint.
struct RemoteEndpoint {
  std::string url;  // http://host[:port]/path
  std::string token;
  std::chrono::milliseconds timeout{10000};
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
  double backoff_multiplier = 2.0;
  int max_tokens = 32;
  int max_in_flight = 8;

  // Keys under [generator]: url, token, timeout_ms, max_attempts,
  // initial_backoff_ms, max_tokens, max_in_flight.
  static RemoteEndpoint from_config(const ConfigMap& config, RemoteEndpoint base);
  // EXPLORE_GENERATOR_URL, _TOKEN, _TIMEOUT_MS and _MAX_ATTEMPTS override `base`.
  static RemoteEndpoint from_env(RemoteEndpoint base);
};

// POSTs {prompt, max_tokens} and returns candidates[0].text. Retries 5xx,
// 429 and connection failures with exponential backoff; other statuses fail
// at once. Throws TransportError when attempts run out or on a non-retryable
// status, ProtocolError on a malformed body, ConfigError on a bad URL.
std::string remote_generate(const RemoteEndpoint& endpoint, std::string_view prompt);

class RemoteGenerator : public InterestGenerator {
 public:
  RemoteGenerator(RemoteEndpoint endpoint, PromptTemplate prompt_template);
  std::string id() const override { return "remote:" + endpoint_.url; }
  std::string generate(std::span<const std::string> context) const override;
  const RemoteEndpoint& endpoint() const { return endpoint_; }

 private:
  RemoteEndpoint endpoint_;
  PromptTemplate template_;
};

}  // namespace explore
