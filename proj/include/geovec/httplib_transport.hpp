#pragma once

#include <map>
#include <optional>
#include <string>

#include <httplib.h>

#include "geovec/transport.hpp"

namespace geovec {

/// HttpTransport backed by cpp-httplib. HTTPS origins need the library built
/// with CPPHTTPLIB_OPENSSL_SUPPORT.
class HttplibTransport final : public HttpTransport {
 public:
  explicit HttplibTransport(int timeout_seconds = 30, std::string user_agent = "geovec/0.1")
      : timeout_seconds_(timeout_seconds), user_agent_(std::move(user_agent)) {}

  std::optional<HttpResponse> get(const std::string& base_url, const std::string& path,
                                  const std::map<std::string, std::string>& params) override {
    auto cli = client(base_url);
    httplib::Params p(params.begin(), params.end());
    auto res = cli.Get(path, p, headers());
    if (!res) return std::nullopt;
    return HttpResponse{res->status, res->body};
  }

  std::optional<HttpResponse> post(const std::string& base_url, const std::string& path, const std::string& body,
                                   const std::string& content_type) override {
    auto cli = client(base_url);
    auto res = cli.Post(path, headers(), body, content_type);
    if (!res) return std::nullopt;
    return HttpResponse{res->status, res->body};
  }

 private:
  httplib::Client client(const std::string& base_url) const {
    httplib::Client cli(base_url);
    cli.set_connection_timeout(timeout_seconds_, 0);
    cli.set_read_timeout(timeout_seconds_, 0);
    cli.set_follow_location(true);
    return cli;
  }

  httplib::Headers headers() const { return {{"User-Agent", user_agent_}}; }

  int timeout_seconds_;
  std::string user_agent_;
};

}  // namespace geovec
