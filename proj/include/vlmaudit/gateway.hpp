#pragma once

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmaudit/core.hpp"
#include "vlmaudit/hashing.hpp"
#include "vlmaudit/journal.hpp"

namespace vlmaudit {

// ---------------------------------------------------------------------------
// Request / response model
// ---------------------------------------------------------------------------

enum class Role { System, User };

inline std::string to_string(Role r) { return r == Role::System ? "system" : "user"; }

enum class PartKind { Text, Image, Tag };

/// A message part. `Tag` parts carry correlation metadata for the offline
/// simulator; they are sent as text only to endpoints configured to accept
/// them and dropped for everything else.
struct ContentPart {
  PartKind kind = PartKind::Text;
  std::string text;       // Text / Tag
  std::string data_url;   // Image: data:<mime>;base64,...

  static ContentPart make_text(std::string t) { return {PartKind::Text, std::move(t), {}}; }
  static ContentPart make_tag(std::string t) { return {PartKind::Tag, std::move(t), {}}; }
  static ContentPart make_image(const std::string& bytes, const std::string& mime) {
    return {PartKind::Image, {}, "data:" + mime + ";base64," + base64_encode(bytes)};
  }
};

struct ChatMessage {
  Role role = Role::User;
  std::vector<ContentPart> parts;
};

struct ChatRequest {
  std::string endpoint;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 256;
  bool want_logprobs = false;
  std::string request_tag;

  /// Concatenation of all text parts (tags excluded), in order.
  std::string text() const {
    std::string out;
    for (const auto& m : messages)
      for (const auto& p : m.parts)
        if (p.kind == PartKind::Text) {
          if (!out.empty()) out += "\n";
          out += p.text;
        }
    return out;
  }
};

inline void validate(const ChatRequest& req) {
  bool has_user = false;
  for (const auto& m : req.messages) {
    if (m.role == Role::User) has_user = true;
    for (const auto& p : m.parts)
      if (p.kind == PartKind::Image && m.role != Role::User)
        throw Error(ErrorKind::InvalidArgument, "image parts are only allowed in user messages");
  }
  if (!has_user) throw Error(ErrorKind::InvalidArgument, "chat request needs a user message");
  if (req.temperature < 0.0) throw Error(ErrorKind::InvalidArgument, "temperature must be >= 0");
  if (req.max_tokens <= 0) throw Error(ErrorKind::InvalidArgument, "max_tokens must be positive");
}

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
  bool operator==(const TokenLogprob&) const = default;
};

struct ChatResponse {
  std::string text;
  std::optional<std::vector<TokenLogprob>> token_logprobs;
  int prompt_tokens = 0;
  int completion_tokens = 0;
  std::chrono::milliseconds latency{0};
  int attempts = 1;
};

/// Sum of token logprobs over [begin, end).
inline double sequence_logprob(const std::vector<TokenLogprob>& tokens, std::size_t begin, std::size_t end) {
  if (begin > end || end > tokens.size())
    throw Error(ErrorKind::SpanOutOfRange,
                "[" + std::to_string(begin) + "," + std::to_string(end) + ") of " + std::to_string(tokens.size()));
  double sum = 0.0;
  for (std::size_t i = begin; i < end; ++i) sum += tokens[i].logprob;
  return sum;
}

inline double sequence_logprob(const ChatResponse& resp, std::size_t begin, std::size_t end) {
  if (!resp.token_logprobs) throw Error(ErrorKind::MissingLogprobs, "response has no token logprobs");
  return sequence_logprob(*resp.token_logprobs, begin, end);
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds base_backoff{200};
  double jitter = 0.2;
  std::set<int> retryable{0, 429, 500, 502, 503, 504};  // 0 = transport failure / timeout

  bool retryable_status(int status) const { return retryable.count(status) > 0; }
};

struct EndpointConfig {
  std::string name;
  std::string base_url;
  std::string model;
  std::string key_env;  // name of the env var holding the credential, never the value
  int pool_size = 4;
  double rps = 0.0;  // 0 = unlimited
  RetryPolicy retry;
  bool accepts_tags = false;
  int timeout_seconds = 120;
};

inline EndpointConfig endpoint_from_json(const nlohmann::json& j) {
  EndpointConfig e;
  e.name = j.at("name").get<std::string>();
  e.base_url = j.at("base_url").get<std::string>();
  e.model = j.value("model", e.name);
  e.key_env = j.value("key_env", std::string{});
  e.pool_size = j.value("pool_size", e.pool_size);
  e.rps = j.value("rps", e.rps);
  e.accepts_tags = j.value("accepts_tags", false);
  e.timeout_seconds = j.value("timeout_seconds", e.timeout_seconds);
  if (j.contains("retry")) {
    const auto& r = j.at("retry");
    e.retry.max_attempts = r.value("max_attempts", e.retry.max_attempts);
    e.retry.base_backoff = std::chrono::milliseconds(r.value("base_backoff_ms", static_cast<int>(e.retry.base_backoff.count())));
    e.retry.jitter = r.value("jitter", e.retry.jitter);
  }
  if (e.pool_size < 1) throw Error(ErrorKind::Config, e.name + ": pool_size must be >= 1");
  if (e.retry.max_attempts < 1) throw Error(ErrorKind::Config, e.name + ": max_attempts must be >= 1");
  return e;
}

inline nlohmann::json to_json(const EndpointConfig& e) {
  return {{"name", e.name},
          {"base_url", e.base_url},
          {"model", e.model},
          {"key_env", e.key_env},
          {"pool_size", e.pool_size},
          {"rps", e.rps},
          {"accepts_tags", e.accepts_tags},
          {"timeout_seconds", e.timeout_seconds},
          {"retry",
           {{"max_attempts", e.retry.max_attempts},
            {"base_backoff_ms", e.retry.base_backoff.count()},
            {"jitter", e.retry.jitter}}}};
}

struct GatewayConfig {
  std::vector<EndpointConfig> endpoints;

  const EndpointConfig& find(const std::string& name) const {
    for (const auto& e : endpoints)
      if (e.name == name) return e;
    throw Error(ErrorKind::Config, "unknown endpoint '" + name + "'");
  }
};

inline GatewayConfig gateway_config_from_json(const nlohmann::json& j) {
  GatewayConfig c;
  try {
    for (const auto& e : j.at("endpoints")) c.endpoints.push_back(endpoint_from_json(e));
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::Config, ex.what());
  }
  return c;
}

inline GatewayConfig load_gateway_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  try {
    return gateway_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::Config, path.string() + ": " + ex.what());
  }
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

struct HttpResult {
  int status = 0;  // 0 = no response (connection failure, timeout)
  std::string body;
};

using Headers = std::vector<std::pair<std::string, std::string>>;

class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResult post(const EndpointConfig& endpoint, const std::string& path, const std::string& body,
                          const Headers& headers) = 0;
};

/// In-process transport: routes requests to a callable. Used for the offline
/// simulator and for scripted mocks.
class FunctionTransport : public Transport {
 public:
  using Handler = std::function<HttpResult(const EndpointConfig&, const std::string& path, const std::string& body,
                                           const Headers& headers)>;
  explicit FunctionTransport(Handler h) : handler_(std::move(h)) {}
  HttpResult post(const EndpointConfig& endpoint, const std::string& path, const std::string& body,
                  const Headers& headers) override {
    return handler_(endpoint, path, body, headers);
  }

 private:
  Handler handler_;
};

// ---------------------------------------------------------------------------
// Concurrency primitives
// ---------------------------------------------------------------------------

class Semaphore {
 public:
  explicit Semaphore(int count) : count_(count) {}
  void acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return count_ > 0; });
    --count_;
  }
  void release() {
    {
      std::lock_guard lock(mu_);
      ++count_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int count_;
};

/// Sliding-window limiter: admits a request only when fewer than `rps`
/// requests were admitted in the preceding second, so no 1-second window ever
/// holds more than floor(rps) starts.
class RateLimiter {
 public:
  using Clock = std::chrono::steady_clock;
  explicit RateLimiter(double rps) : limit_(rps > 0 ? static_cast<std::size_t>(std::max(1.0, std::floor(rps))) : 0) {}

  void acquire() {
    if (limit_ == 0) return;
    std::unique_lock lock(mu_);
    for (;;) {
      auto now = Clock::now();
      while (!starts_.empty() && now - starts_.front() >= std::chrono::seconds(1)) starts_.pop_front();
      if (starts_.size() < limit_) {
        starts_.push_back(now);
        return;
      }
      auto wake = starts_.front() + std::chrono::seconds(1);
      lock.unlock();
      std::this_thread::sleep_until(wake);
      lock.lock();
    }
  }

 private:
  std::size_t limit_;
  std::mutex mu_;
  std::deque<Clock::time_point> starts_;
};

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

inline nlohmann::json build_chat_body(const EndpointConfig& ep, const ChatRequest& req) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : req.messages) {
    nlohmann::json content = nlohmann::json::array();
    for (const auto& p : m.parts) {
      switch (p.kind) {
        case PartKind::Text: content.push_back({{"type", "text"}, {"text", p.text}}); break;
        case PartKind::Tag:
          if (ep.accepts_tags) content.push_back({{"type", "text"}, {"text", p.text}});
          break;
        case PartKind::Image:
          content.push_back({{"type", "image_url"}, {"image_url", {{"url", p.data_url}}}});
          break;
      }
    }
    messages.push_back({{"role", to_string(m.role)}, {"content", content}});
  }
  return {{"model", ep.model},
          {"messages", messages},
          {"temperature", req.temperature},
          {"max_tokens", req.max_tokens},
          {"logprobs", req.want_logprobs}};
}

inline ChatResponse parse_chat_body(const std::string& body) {
  ChatResponse r;
  auto j = nlohmann::json::parse(body);
  const auto& choice = j.at("choices").at(0);
  const auto& content = choice.at("message").at("content");
  r.text = content.is_null() ? std::string{} : content.get<std::string>();
  if (choice.contains("logprobs") && choice["logprobs"].is_object() && choice["logprobs"].contains("content") &&
      choice["logprobs"]["content"].is_array()) {
    std::vector<TokenLogprob> toks;
    for (const auto& t : choice["logprobs"]["content"])
      toks.push_back({t.at("token").get<std::string>(), t.at("logprob").get<double>()});
    r.token_logprobs = std::move(toks);
  }
  if (j.contains("usage") && j["usage"].is_object()) {
    r.prompt_tokens = j["usage"].value("prompt_tokens", 0);
    r.completion_tokens = j["usage"].value("completion_tokens", 0);
  }
  return r;
}

/// Single client for every chat-completions endpoint. Thread-safe; per
/// endpoint it bounds in-flight calls to pool_size and starts to rps.
class ModelGateway {
 public:
  using SleepFn = std::function<void(std::chrono::milliseconds)>;

  ModelGateway(GatewayConfig config, std::shared_ptr<Transport> transport, Journal* journal = nullptr,
               SleepFn sleep = {})
      : config_(std::move(config)), transport_(std::move(transport)), journal_(journal), sleep_(std::move(sleep)) {
    if (!sleep_) sleep_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    for (const auto& e : config_.endpoints) {
      slots_.emplace(e.name, std::make_unique<Semaphore>(e.pool_size));
      limiters_.emplace(e.name, std::make_unique<RateLimiter>(e.rps));
    }
  }

  const GatewayConfig& config() const { return config_; }
  bool has_endpoint(const std::string& name) const {
    for (const auto& e : config_.endpoints)
      if (e.name == name) return true;
    return false;
  }
  const EndpointConfig& endpoint(const std::string& name) const { return config_.find(name); }

  ChatResponse chat_complete(const ChatRequest& req) {
    validate(req);
    const auto& ep = config_.find(req.endpoint);
    const std::string body = build_chat_body(ep, req).dump();
    Headers headers{{"Content-Type", "application/json"}};
    std::string secret;
    if (!ep.key_env.empty()) {
      if (const char* v = std::getenv(ep.key_env.c_str()); v && *v) {
        secret = v;
        headers.emplace_back("Authorization", "Bearer " + secret);
      }
    }

    auto& slot = *slots_.at(ep.name);
    slot.acquire();
    struct Release {
      Semaphore& s;
      ~Release() { s.release(); }
    } release{slot};

    std::vector<int> statuses;
    auto started = std::chrono::steady_clock::now();
    for (int attempt = 1; attempt <= ep.retry.max_attempts; ++attempt) {
      limiters_.at(ep.name)->acquire();
      HttpResult res = transport_->post(ep, "/v1/chat/completions", body, headers);
      statuses.push_back(res.status);
      if (res.status == 200) {
        ChatResponse resp;
        try {
          resp = parse_chat_body(res.body);
        } catch (const nlohmann::json::exception& e) {
          log(req, ep, statuses, body, res.body, secret, "malformed_response");
          throw Error(ErrorKind::EndpointError, ep.name + ": malformed response: " + e.what());
        }
        resp.attempts = attempt;
        resp.latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);
        if (req.want_logprobs && !resp.token_logprobs) {
          log(req, ep, statuses, body, res.body, secret, "missing_logprobs");
          throw Error(ErrorKind::MissingLogprobs, ep.name);
        }
        log(req, ep, statuses, body, res.body, secret, "ok");
        return resp;
      }
      if (!ep.retry.retryable_status(res.status)) {
        log(req, ep, statuses, body, res.body, secret, "non_retryable");
        throw Error(ErrorKind::NonRetryableStatus, ep.name + ": HTTP " + std::to_string(res.status));
      }
      if (attempt < ep.retry.max_attempts) sleep_(backoff(ep.retry, attempt));
    }
    log(req, ep, statuses, body, "", secret, "exhausted");
    throw Error(ErrorKind::EndpointExhausted,
                ep.name + ": " + std::to_string(ep.retry.max_attempts) + " attempts, last HTTP " +
                    std::to_string(statuses.back()));
  }

  /// Sum of logprobs over [begin, end) of a logprob-enabled call.
  double sequence_logprob(ChatRequest req, std::size_t begin, std::size_t end) {
    req.want_logprobs = true;
    return vlmaudit::sequence_logprob(chat_complete(req), begin, end);
  }

  std::chrono::milliseconds backoff(const RetryPolicy& p, int attempt) {
    double base = static_cast<double>(p.base_backoff.count()) * std::pow(2.0, attempt - 1);
    double u;
    {
      std::lock_guard lock(rng_mu_);
      u = std::uniform_real_distribution<double>(-1.0, 1.0)(rng_);
    }
    return std::chrono::milliseconds(static_cast<long long>(std::max(0.0, base * (1.0 + p.jitter * u))));
  }

 private:
  static std::string excerpt(std::string s, const std::string& secret) {
    if (!secret.empty())
      for (auto pos = s.find(secret); pos != std::string::npos; pos = s.find(secret, pos)) s.replace(pos, secret.size(), "***");
    constexpr std::size_t kMax = 512;
    if (s.size() > kMax) s = s.substr(0, kMax) + "...";
    return s;
  }

  void log(const ChatRequest& req, const EndpointConfig& ep, const std::vector<int>& statuses,
           const std::string& body, const std::string& response, const std::string& secret, const char* outcome) {
    if (!journal_) return;
    journal_->append({{"event", "chat"},
                      {"tag", req.request_tag},
                      {"endpoint", ep.name},
                      {"model", ep.model},
                      {"outcome", outcome},
                      {"attempts", statuses.size()},
                      {"statuses", statuses},
                      {"request_digest", sha256_hex(body)},
                      {"response_digest", sha256_hex(response)},
                      {"request_excerpt", excerpt(body, secret)},
                      {"response_excerpt", excerpt(response, secret)}});
  }

  GatewayConfig config_;
  std::shared_ptr<Transport> transport_;
  Journal* journal_;
  SleepFn sleep_;
  std::map<std::string, std::unique_ptr<Semaphore>> slots_;
  std::map<std::string, std::unique_ptr<RateLimiter>> limiters_;
  std::mutex rng_mu_;
  std::mt19937_64 rng_{0x5eed};
};

/// Builds a single-endpoint config, mostly for tests and tools.
inline EndpointConfig make_endpoint(std::string name, std::string base_url = "inproc://", bool accepts_tags = true) {
  EndpointConfig e;
  e.name = name;
  e.model = std::move(name);
  e.base_url = std::move(base_url);
  e.accepts_tags = accepts_tags;
  e.retry.base_backoff = std::chrono::milliseconds(0);
  return e;
}

}  // namespace vlmaudit
