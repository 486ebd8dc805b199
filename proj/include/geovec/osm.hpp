#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "geovec/error.hpp"
#include "geovec/geo_core.hpp"
#include "geovec/hash.hpp"
#include "geovec/transport.hpp"

namespace geovec::osm {

using geovec::HttpResponse;
using geovec::HttpTransport;
using geovec::split_url;

struct GeocodeResult {
  // (level name, value), most local first.
  std::vector<std::pair<std::string, std::string>> components;
  std::string display;

  static GeocodeResult from_components(std::vector<std::pair<std::string, std::string>> components) {
    if (components.empty()) fail(Errc::NoAddressFound, "geocode result has no address components");
    GeocodeResult r;
    r.components = std::move(components);
    for (std::size_t i = 0; i < r.components.size(); ++i) {
      if (i) r.display += ", ";
      r.display += r.components[i].second;
    }
    return r;
  }

  friend bool operator==(const GeocodeResult&, const GeocodeResult&) = default;
};

enum class PlaceKind { Poi, Street };

struct PlaceOfInterest {
  std::string name;
  Coordinate coord;
  double distance_km = 0.0;
  double bearing_deg = 0.0;
  Direction direction = Direction::North;
  PlaceKind kind = PlaceKind::Poi;

  friend bool operator==(const PlaceOfInterest&, const PlaceOfInterest&) = default;
};

// Derived fields always come from geo-core applied to (query, coord). A place
// sitting exactly on the query point has no bearing; it is reported as due north.
inline PlaceOfInterest make_place(const Coordinate& query, std::string name, const Coordinate& coord, PlaceKind kind) {
  if (name.empty()) fail(Errc::InvalidArgument, "place name must not be empty");
  PlaceOfInterest p{std::move(name), coord};
  p.kind = kind;
  p.distance_km = haversine_km(query, coord);
  p.bearing_deg = query == coord ? 0.0 : initial_bearing_deg(query, coord);
  p.direction = cardinal_direction(p.bearing_deg);
  return p;
}

// ---------------------------------------------------------------------------
// Upstream schemas

// Keys in a Nominatim address object that are codes rather than place names.
inline bool is_address_code_key(const std::string& key) {
  return key == "country_code" || key == "postcode" || key == "house_number" || key.rfind("ISO3166", 0) == 0;
}

inline GeocodeResult parse_nominatim_reverse(const std::string& body) {
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ParseError, std::string("reverse geocode body is not JSON: ") + e.what());
  }
  if (!doc.is_object() || doc.contains("error") || !doc.contains("address") || !doc["address"].is_object())
    fail(Errc::NoAddressFound, "no address returned by the geocoder");
  std::vector<std::pair<std::string, std::string>> comps;
  for (const auto& [key, value] : doc["address"].items()) {
    if (is_address_code_key(key) || !value.is_string()) continue;
    const auto s = value.get<std::string>();
    if (!s.empty()) comps.emplace_back(key, s);
  }
  if (comps.empty()) fail(Errc::NoAddressFound, "address object has no named components");
  return GeocodeResult::from_components(std::move(comps));
}

struct RawElement {
  std::string name;
  Coordinate coord;
  PlaceKind kind;
};

inline constexpr std::array<const char*, 4> kPoiTagKeys = {"amenity", "shop", "tourism", "leisure"};

// Named nodes with an amenity/shop/tourism/leisure tag are POIs; named ways
// with a highway tag are streets. Everything else is ignored.
inline std::vector<RawElement> parse_overpass(const std::string& body) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ParseError, std::string("overpass body is not JSON: ") + e.what());
  }
  std::vector<RawElement> out;
  if (!doc.is_object() || !doc.contains("elements")) return out;
  for (const auto& el : doc["elements"]) {
    if (!el.is_object() || !el.contains("tags")) continue;
    const auto& tags = el["tags"];
    if (!tags.contains("name") || !tags["name"].is_string()) continue;
    const auto name = tags["name"].get<std::string>();
    if (name.empty()) continue;
    const auto type = el.value("type", std::string{});
    std::optional<PlaceKind> kind;
    if (type == "node") {
      for (const char* k : kPoiTagKeys)
        if (tags.contains(k)) kind = PlaceKind::Poi;
    } else if (type == "way" && tags.contains("highway")) {
      kind = PlaceKind::Street;
    }
    if (!kind) continue;
    const nlohmann::json* pos = &el;
    if (!el.contains("lat") && el.contains("center")) pos = &el["center"];
    if (!pos->contains("lat") || !pos->contains("lon")) continue;
    out.push_back({name, Coordinate((*pos)["lon"].get<double>(), (*pos)["lat"].get<double>()), *kind});
  }
  return out;
}

inline bool place_less(const PlaceOfInterest& a, const PlaceOfInterest& b) {
  if (a.distance_km != b.distance_km) return a.distance_km < b.distance_km;
  return a.name < b.name;
}

// Ranks POIs within the radius; when none qualify, named streets (one entry per
// name, nearest segment) stand in. Output is ascending by (distance, name).
inline std::vector<PlaceOfInterest> rank_places(const Coordinate& query, const std::vector<RawElement>& elements,
                                                double radius_km, std::size_t k) {
  if (!(radius_km > 0.0)) fail(Errc::InvalidArgument, "radius_km must be positive");
  if (k == 0) fail(Errc::InvalidArgument, "k must be at least 1");
  std::vector<PlaceOfInterest> pois;
  std::map<std::string, PlaceOfInterest> streets;
  for (const auto& e : elements) {
    auto p = make_place(query, e.name, e.coord, e.kind);
    if (p.distance_km > radius_km) continue;
    if (e.kind == PlaceKind::Poi) {
      pois.push_back(std::move(p));
    } else {
      auto it = streets.find(p.name);
      if (it == streets.end() || place_less(p, it->second)) streets.insert_or_assign(p.name, p);
    }
  }
  std::vector<PlaceOfInterest> out = std::move(pois);
  if (out.empty())
    for (auto& [_, s] : streets) out.push_back(std::move(s));
  std::stable_sort(out.begin(), out.end(), place_less);
  if (out.size() > k) out.erase(out.begin() + static_cast<std::ptrdiff_t>(k), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Request identity

struct CacheKey {
  std::uint64_t value = 0;
  std::string hex() const { return to_hex(value); }
  friend bool operator==(const CacheKey&, const CacheKey&) = default;
  friend auto operator<=>(const CacheKey&, const CacheKey&) = default;
};

// Stable hash of the endpoint and its parameters sorted by name.
inline CacheKey make_cache_key(const std::string& endpoint, const std::map<std::string, std::string>& params) {
  std::string canon = endpoint;
  canon += '?';
  bool first = true;
  for (const auto& [k, v] : params) {
    if (!first) canon += '&';
    first = false;
    canon += k;
    canon += '=';
    canon += v;
  }
  return CacheKey{fnv1a64(canon)};
}

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Time and rate limiting

class Clock {
 public:
  using time_point = std::chrono::steady_clock::time_point;
  using duration = std::chrono::steady_clock::duration;
  virtual ~Clock() = default;
  virtual time_point now() = 0;
  virtual void sleep_until(time_point t) = 0;
};

class SteadyClock final : public Clock {
 public:
  time_point now() override { return std::chrono::steady_clock::now(); }
  void sleep_until(time_point t) override { std::this_thread::sleep_until(t); }
};

/// Spaces successive acquisitions for the same host by at least `interval`.
class RateLimiter {
 public:
  explicit RateLimiter(Clock& clock, std::chrono::milliseconds interval = std::chrono::milliseconds(1000))
      : clock_(clock), interval_(interval) {}

  void acquire(const std::string& host) {
    std::mutex* host_mutex;
    {
      std::lock_guard lock(table_mutex_);
      host_mutex = &host_mutexes_[host];
    }
    std::lock_guard host_lock(*host_mutex);
    std::optional<Clock::time_point> last;
    {
      std::lock_guard lock(table_mutex_);
      if (auto it = last_.find(host); it != last_.end()) last = it->second;
    }
    if (last) {
      const auto next = *last + interval_;
      if (clock_.now() < next) clock_.sleep_until(next);
    }
    std::lock_guard lock(table_mutex_);
    last_[host] = clock_.now();
  }

 private:
  Clock& clock_;
  std::chrono::milliseconds interval_;
  std::mutex table_mutex_;
  std::map<std::string, std::mutex> host_mutexes_;
  std::map<std::string, Clock::time_point> last_;
};

// ---------------------------------------------------------------------------
// Persistent response cache

/// Append-only directory cache, one file per key named by the key's hex.
/// Concurrent lookups for the same missing key share a single fetch.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) fail(Errc::Io, "cannot create cache directory " + dir_.string() + ": " + ec.message());
  }

  const std::filesystem::path& dir() const noexcept { return dir_; }

  std::filesystem::path path_for(const CacheKey& key) const { return dir_ / key.hex(); }

  std::optional<std::string> read(const CacheKey& key) const {
    const auto p = path_for(key);
    std::error_code ec;
    if (!std::filesystem::exists(p, ec)) return std::nullopt;
    if (!std::filesystem::is_regular_file(p, ec)) fail(Errc::CacheCorrupt, "cache entry is not a file: " + p.string());
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(Errc::CacheCorrupt, "cannot open cache entry " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) fail(Errc::CacheCorrupt, "cannot read cache entry " + p.string());
    return ss.str();
  }

  void write(const CacheKey& key, const std::string& body) const {
    const auto final_path = path_for(key);
    std::ostringstream tid;
    tid << std::this_thread::get_id();
    const auto tmp = dir_ / (key.hex() + ".tmp." + tid.str());
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out.write(body.data(), static_cast<std::streamsize>(body.size()));
      if (!out) fail(Errc::Io, "cannot write cache entry " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, final_path, ec);
    if (ec) fail(Errc::Io, "cannot commit cache entry " + final_path.string() + ": " + ec.message());
  }

  std::string lookup_or_fetch(const CacheKey& key, const std::function<std::string()>& fetcher) {
    if (auto hit = read(key)) return *hit;

    std::promise<std::string> promise;
    std::shared_future<std::string> shared;
    bool leader = false;
    {
      std::lock_guard lock(mutex_);
      if (auto it = inflight_.find(key); it != inflight_.end()) {
        shared = it->second;
      } else {
        shared = promise.get_future().share();
        inflight_.emplace(key, shared);
        leader = true;
      }
    }
    if (!leader) return shared.get();

    try {
      std::string body;
      if (auto hit = read(key)) {
        body = std::move(*hit);
      } else {
        body = fetcher();
        write(key, body);
      }
      promise.set_value(body);
      finish(key);
      return body;
    } catch (...) {
      promise.set_exception(std::current_exception());
      finish(key);
      throw;
    }
  }

 private:
  void finish(const CacheKey& key) {
    std::lock_guard lock(mutex_);
    inflight_.erase(key);
  }

  std::filesystem::path dir_;
  std::mutex mutex_;
  std::map<CacheKey, std::shared_future<std::string>> inflight_;
};

// ---------------------------------------------------------------------------
// Fixtures

/// Committed offline responses: a JSON array of {"query_key", "body"} records.
class FixtureStore {
 public:
  FixtureStore() = default;

  static FixtureStore load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::Io, "cannot open fixture file " + path.string());
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::ParseError, "fixture file " + path.string() + ": " + e.what());
    }
    FixtureStore store;
    store.merge(doc);
    return store;
  }

  void merge(const nlohmann::json& records) {
    if (!records.is_array()) fail(Errc::ParseError, "fixture document must be a JSON array");
    for (const auto& r : records) add(r.at("query_key").get<std::string>(), r.at("body").get<std::string>());
  }

  void add(std::string query_key, std::string body) { bodies_.insert_or_assign(std::move(query_key), std::move(body)); }

  std::optional<std::string> find(const CacheKey& key) const {
    if (auto it = bodies_.find(key.hex()); it != bodies_.end()) return it->second;
    return std::nullopt;
  }

  nlohmann::json to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& [k, b] : bodies_) arr.push_back({{"query_key", k}, {"body", b}});
    return arr;
  }

  std::size_t size() const noexcept { return bodies_.size(); }

 private:
  std::map<std::string, std::string> bodies_;
};

enum class Source { Live, Fixture };

struct ClientConfig {
  std::string geocode_url = "https://nominatim.openstreetmap.org/reverse";
  std::string overpass_url = "https://overpass-api.de/api/interpreter";
  Source source = Source::Fixture;

  // GEOVEC_GEOCODE_URL / GEOVEC_OVERPASS_URL override the endpoints.
  void apply_env() {
    if (const char* g = std::getenv("GEOVEC_GEOCODE_URL"); g && *g) geocode_url = g;
    if (const char* o = std::getenv("GEOVEC_OVERPASS_URL"); o && *o) overpass_url = o;
  }
};

inline std::map<std::string, std::string> reverse_params(const Coordinate& c) {
  return {{"format", "json"}, {"lat", format_fixed(c.lat(), 6)}, {"lon", format_fixed(c.lon(), 6)}};
}

inline std::string overpass_poi_query(const Coordinate& c, double radius_km) {
  const auto around = "(around:" + format_fixed(radius_km * 1000.0, 0) + "," + format_fixed(c.lat(), 6) + "," +
                      format_fixed(c.lon(), 6) + ")";
  std::string q = "[out:json][timeout:60];\n(\n";
  for (const char* k : kPoiTagKeys) q += "  node" + around + "[name][" + k + "];\n";
  q += ");\nout body;\n";
  return q;
}

inline std::string overpass_street_query(const Coordinate& c, double radius_km) {
  const auto around = "(around:" + format_fixed(radius_km * 1000.0, 0) + "," + format_fixed(c.lat(), 6) + "," +
                      format_fixed(c.lon(), 6) + ")";
  return "[out:json][timeout:60];\n(\n  way" + around + "[highway][name];\n);\nout center;\n";
}

inline std::string url_encode(const std::string& s) {
  static constexpr char hex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char ch : s) {
    if (std::isalnum(ch) || ch == '-' || ch == '_' || ch == '.' || ch == '~') {
      out += static_cast<char>(ch);
    } else {
      out += '%';
      out += hex[ch >> 4];
      out += hex[ch & 0xf];
    }
  }
  return out;
}

/// Reverse geocoding and nearby-place search, cache-first, with an offline
/// fixture mode. Live requests pass through the per-host rate limiter.
class OsmClient {
 public:
  OsmClient(ClientConfig config, std::shared_ptr<ResponseCache> cache, std::shared_ptr<FixtureStore> fixtures,
            std::shared_ptr<HttpTransport> transport = nullptr, std::shared_ptr<Clock> clock = nullptr)
      : config_(std::move(config)),
        cache_(std::move(cache)),
        fixtures_(fixtures ? std::move(fixtures) : std::make_shared<FixtureStore>()),
        transport_(std::move(transport)),
        clock_(clock ? std::move(clock) : std::make_shared<SteadyClock>()),
        limiter_(*clock_) {}

  const ClientConfig& config() const noexcept { return config_; }

  GeocodeResult reverse_geocode(const Coordinate& coord) {
    const auto params = reverse_params(coord);
    const auto key = make_cache_key(config_.geocode_url, params);
    const auto body = resolve(key, [&] {
      const auto url = split_url(config_.geocode_url);
      limiter_.acquire(url.host);
      return checked(transport_->get(url.origin, url.path, params), config_.geocode_url);
    });
    return parse_nominatim_reverse(body);
  }

  std::vector<PlaceOfInterest> nearby_places(const Coordinate& coord, double radius_km = 100.0, std::size_t k = 10) {
    if (!(radius_km > 0.0)) fail(Errc::InvalidArgument, "radius_km must be positive");
    if (k == 0) fail(Errc::InvalidArgument, "k must be at least 1");
    auto elements = parse_overpass(overpass(overpass_poi_query(coord, radius_km)));
    auto ranked = rank_places(coord, elements, radius_km, k);
    const bool has_poi = std::any_of(ranked.begin(), ranked.end(),
                                     [](const PlaceOfInterest& p) { return p.kind == PlaceKind::Poi; });
    if (has_poi) return ranked;
    auto streets = parse_overpass(overpass(overpass_street_query(coord, radius_km)));
    elements.insert(elements.end(), streets.begin(), streets.end());
    return rank_places(coord, elements, radius_km, k);
  }

  // Key under which a reverse-geocode or Overpass query is cached / stored in fixtures.
  CacheKey reverse_key(const Coordinate& c) const { return make_cache_key(config_.geocode_url, reverse_params(c)); }
  CacheKey overpass_key(const std::string& query) const {
    return make_cache_key(config_.overpass_url, {{"data", query}});
  }

 private:
  std::string overpass(const std::string& query) {
    const auto key = overpass_key(query);
    return resolve(key, [&] {
      const auto url = split_url(config_.overpass_url);
      limiter_.acquire(url.host);
      return checked(transport_->post(url.origin, url.path, "data=" + url_encode(query),
                                      "application/x-www-form-urlencoded"),
                     config_.overpass_url);
    });
  }

  std::string resolve(const CacheKey& key, const std::function<std::string()>& fetch_live) {
    if (config_.source == Source::Fixture) {
      if (cache_)
        if (auto hit = cache_->read(key)) return *hit;
      if (auto f = fixtures_->find(key)) return *f;
      fail(Errc::FixtureMiss, "no fixture for query key " + key.hex());
    }
    if (!transport_) fail(Errc::UpstreamUnavailable, "live mode without an HTTP transport");
    if (cache_) return cache_->lookup_or_fetch(key, fetch_live);
    return fetch_live();
  }

  static std::string checked(std::optional<HttpResponse> r, const std::string& url) {
    if (!r) fail(Errc::UpstreamUnavailable, "connection to " + url + " failed");
    if (r->status >= 500 || r->status == 429)
      fail(Errc::UpstreamUnavailable, url + " returned HTTP " + std::to_string(r->status));
    if (r->status >= 400) fail(Errc::NoAddressFound, url + " returned HTTP " + std::to_string(r->status));
    return std::move(r->body);
  }

  ClientConfig config_;
  std::shared_ptr<ResponseCache> cache_;
  std::shared_ptr<FixtureStore> fixtures_;
  std::shared_ptr<HttpTransport> transport_;
  std::shared_ptr<Clock> clock_;
  RateLimiter limiter_;
};

}  // namespace geovec::osm
