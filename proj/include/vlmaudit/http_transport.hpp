#pragma once

#include <string>
#include <utility>

#include <httplib.h>

#include "vlmaudit/gateway.hpp"

namespace vlmaudit {

/// Splits "http://host:port/prefix" into ("http://host:port", "/prefix").
inline std::pair<std::string, std::string> split_base_url(const std::string& url) {
  auto scheme = url.find("://");
  auto start = scheme == std::string::npos ? 0 : scheme + 3;
  auto slash = url.find('/', start);
  if (slash == std::string::npos) return {url, ""};
  std::string prefix = url.substr(slash);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, slash), prefix};
}

/// POSTs JSON over HTTP(S) with cpp-httplib. A fresh client per call keeps the
/// transport stateless and safe to share between threads.
class HttpTransport : public Transport {
 public:
  HttpResult post(const EndpointConfig& endpoint, const std::string& path, const std::string& body,
                  const Headers& headers) override {
    auto [host, prefix] = split_base_url(endpoint.base_url);
    httplib::Client cli(host);
    cli.set_connection_timeout(std::chrono::seconds(std::min(endpoint.timeout_seconds, 30)));
    cli.set_read_timeout(std::chrono::seconds(endpoint.timeout_seconds));
    cli.set_write_timeout(std::chrono::seconds(endpoint.timeout_seconds));
    httplib::Headers h;
    std::string content_type = "application/json";
    for (const auto& [k, v] : headers) {
      if (k == "Content-Type")
        content_type = v;
      else
        h.emplace(k, v);
    }
    auto res = cli.Post(prefix + path, h, body, content_type);
    if (!res) return {0, {}};
    return {res->status, res->body};
  }
};

}  // namespace vlmaudit
