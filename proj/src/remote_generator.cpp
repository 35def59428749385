#include "explore/remote_generator.hpp"

#include <cstdlib>
#include <thread>

#include "explore/errors.hpp"
#include "httplib.h"
#include "json.hpp"

namespace explore {

using nlohmann::json;

namespace {

struct ParsedUrl {
  std::string origin;  // scheme://host:port
  std::string path;
};

ParsedUrl parse_url(const std::string& url) {
  constexpr std::string_view kScheme = "http://";
  if (url.rfind(kScheme, 0) != 0) {
    throw ConfigError("generator url must start with http://, got '" + url + "'");
  }
  const auto slash = url.find('/', kScheme.size());
  ParsedUrl out;
  out.origin = url.substr(0, slash);
  out.path = slash == std::string::npos ? "/" : url.substr(slash);
  if (out.origin.size() == kScheme.size()) throw ConfigError("generator url has no host");
  return out;
}

bool retryable(int status) { return status == 429 || status >= 500; }

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

std::int64_t env_int(const char* name, const std::string& value) {
  try {
    std::size_t used = 0;
    const auto v = std::stoll(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(std::string(name) + " is not an integer: '" + value + "'");
}

}  // namespace

RemoteEndpoint RemoteEndpoint::from_config(const ConfigMap& config, RemoteEndpoint base) {
  if (auto v = config_string(config, "generator.url")) base.url = *v;
  if (auto v = config_string(config, "generator.token")) base.token = *v;
  if (auto v = config_int(config, "generator.timeout_ms")) base.timeout = std::chrono::milliseconds(*v);
  if (auto v = config_int(config, "generator.max_attempts")) base.max_attempts = static_cast<int>(*v);
  if (auto v = config_int(config, "generator.initial_backoff_ms")) {
    base.initial_backoff = std::chrono::milliseconds(*v);
  }
  if (auto v = config_int(config, "generator.max_tokens")) base.max_tokens = static_cast<int>(*v);
  if (auto v = config_int(config, "generator.max_in_flight")) base.max_in_flight = static_cast<int>(*v);
  return base;
}

RemoteEndpoint RemoteEndpoint::from_env(RemoteEndpoint base) {
  if (auto v = env("EXPLORE_GENERATOR_URL")) base.url = *v;
  if (auto v = env("EXPLORE_GENERATOR_TOKEN")) base.token = *v;
  if (auto v = env("EXPLORE_GENERATOR_TIMEOUT_MS")) {
    base.timeout = std::chrono::milliseconds(env_int("EXPLORE_GENERATOR_TIMEOUT_MS", *v));
  }
  if (auto v = env("EXPLORE_GENERATOR_MAX_ATTEMPTS")) {
    base.max_attempts = static_cast<int>(env_int("EXPLORE_GENERATOR_MAX_ATTEMPTS", *v));
  }
  return base;
}

std::string remote_generate(const RemoteEndpoint& endpoint, std::string_view prompt) {
  const ParsedUrl url = parse_url(endpoint.url);
  if (endpoint.max_attempts < 1) throw ConfigError("max_attempts must be at least 1");

  json request;
  request["prompt"] = std::string(prompt);
  request["max_tokens"] = endpoint.max_tokens;
  const std::string body = request.dump();
  httplib::Headers headers;
  if (!endpoint.token.empty()) headers.emplace("Authorization", "Bearer " + endpoint.token);

  const auto timeout_us =
      std::chrono::duration_cast<std::chrono::microseconds>(endpoint.timeout).count();
  auto backoff = endpoint.initial_backoff;
  std::string last_error;
  for (int attempt = 1; attempt <= endpoint.max_attempts; ++attempt) {
    httplib::Client client(url.origin);
    client.set_connection_timeout(0, timeout_us);
    client.set_read_timeout(0, timeout_us);
    client.set_write_timeout(0, timeout_us);
    auto res = client.Post(url.path, headers, body, "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
    } else if (res->status == 200) {
      try {
        const json j = json::parse(res->body);
        return j.at("candidates").at(0).at("text").get<std::string>();
      } catch (const json::exception& e) {
        throw ProtocolError(std::string("malformed generator response: ") + e.what());
      }
    } else if (retryable(res->status)) {
      last_error = "HTTP " + std::to_string(res->status);
    } else {
      throw TransportError("generator returned HTTP " + std::to_string(res->status));
    }
    if (attempt < endpoint.max_attempts) {
      std::this_thread::sleep_for(backoff);
      backoff = std::chrono::milliseconds(static_cast<std::int64_t>(
          static_cast<double>(backoff.count()) * endpoint.backoff_multiplier));
    }
  }
  throw TransportError("generator unavailable after " + std::to_string(endpoint.max_attempts) +
                       " attempt(s): " + last_error);
}

RemoteGenerator::RemoteGenerator(RemoteEndpoint endpoint, PromptTemplate prompt_template)
    : endpoint_(std::move(endpoint)), template_(std::move(prompt_template)) {
  parse_url(endpoint_.url);
}

std::string RemoteGenerator::generate(std::span<const std::string> context) const {
  if (context.size() != 2) throw ArgumentError("remote generator expects a context pair");
  return remote_generate(endpoint_, template_.render(context[0], context[1]));
}

}  // namespace explore
