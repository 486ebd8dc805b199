#pragma once

#include <map>
#include <optional>
#include <string>

#include "geovec/error.hpp"

namespace geovec {

struct HttpResponse {
  int status = 0;
  std::string body;
};

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  // Both return std::nullopt when the connection itself fails.
  virtual std::optional<HttpResponse> get(const std::string& base_url, const std::string& path,
                                          const std::map<std::string, std::string>& params) = 0;
  virtual std::optional<HttpResponse> post(const std::string& base_url, const std::string& path,
                                           const std::string& body, const std::string& content_type) = 0;
};

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string host;
  std::string path;    // always starts with '/'
};

inline SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) fail(Errc::InvalidArgument, "URL lacks a scheme: " + url);
  const auto path_begin = url.find('/', scheme_end + 3);
  SplitUrl s;
  s.origin = url.substr(0, path_begin);
  s.host = s.origin.substr(scheme_end + 3);
  s.path = path_begin == std::string::npos ? "/" : url.substr(path_begin);
  return s;
}

}  // namespace geovec
