#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "geovec/error.hpp"

namespace geovec {

inline constexpr double kPi = 3.14159265358979323846;
// IUGG mean Earth radius.
inline constexpr double kEarthRadiusKm = 6371.0088;

inline constexpr double deg2rad(double d) { return d * kPi / 180.0; }
inline constexpr double rad2deg(double r) { return r * 180.0 / kPi; }

/// A validated WGS84 position in degrees.
class Coordinate {
 public:
  Coordinate(double lon, double lat) : lon_(lon), lat_(lat) {
    if (!std::isfinite(lon) || lon < -180.0 || lon > 180.0)
      fail(Errc::RangeError, "longitude out of range: " + std::to_string(lon));
    if (!std::isfinite(lat) || lat < -90.0 || lat > 90.0)
      fail(Errc::RangeError, "latitude out of range: " + std::to_string(lat));
  }

  static Coordinate from_lat_lon(double lat, double lon) { return Coordinate(lon, lat); }

  double lon() const noexcept { return lon_; }
  double lat() const noexcept { return lat_; }

  friend bool operator==(const Coordinate&, const Coordinate&) = default;

 private:
  double lon_;
  double lat_;
};

/// Ordered set of uniquely identified nodes.
class NodeSet {
 public:
  NodeSet(std::vector<std::string> ids, std::vector<Coordinate> coords)
      : ids_(std::move(ids)), coords_(std::move(coords)) {
    if (ids_.empty()) fail(Errc::InvalidArgument, "node set must not be empty");
    if (ids_.size() != coords_.size()) fail(Errc::InvalidArgument, "ids and coords differ in length");
    index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!index_.emplace(ids_[i], i).second) fail(Errc::DuplicateId, "duplicate node id '" + ids_[i] + "'");
    }
  }

  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<Coordinate>& coords() const noexcept { return coords_; }
  const std::string& id(std::size_t i) const { return ids_.at(i); }
  const Coordinate& coord(std::size_t i) const { return coords_.at(i); }

  std::optional<std::size_t> index_of(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::vector<std::string> ids_;
  std::vector<Coordinate> coords_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Dense symmetric inverse-distance weights (1/km), row-major.
struct AdjacencyMatrix {
  std::size_t n = 0;
  std::vector<double> weights;

  double operator()(std::size_t i, std::size_t j) const { return weights[i * n + j]; }
};

inline double haversine_km(const Coordinate& a, const Coordinate& b) {
  if (a == b) return 0.0;
  const double phi1 = deg2rad(a.lat());
  const double phi2 = deg2rad(b.lat());
  const double dphi = phi2 - phi1;
  const double dlambda = deg2rad(b.lon() - a.lon());
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlambda / 2.0);
  double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  h = std::min(1.0, std::max(0.0, h));
  return 2.0 * kEarthRadiusKm * std::atan2(std::sqrt(h), std::sqrt(1.0 - h));
}

// Initial great-circle bearing, clockwise from true north, in [0, 360).
inline double initial_bearing_deg(const Coordinate& a, const Coordinate& b) {
  if (a == b) fail(Errc::DegenerateBearing, "bearing undefined between identical coordinates");
  const double phi1 = deg2rad(a.lat());
  const double phi2 = deg2rad(b.lat());
  const double dlambda = deg2rad(b.lon() - a.lon());
  const double y = std::sin(dlambda) * std::cos(phi2);
  const double x = std::cos(phi1) * std::sin(phi2) - std::sin(phi1) * std::cos(phi2) * std::cos(dlambda);
  double deg = std::fmod(rad2deg(std::atan2(y, x)) + 360.0, 360.0);
  if (deg >= 360.0) deg = 0.0;
  return deg;
}

enum class Direction { North, Northeast, East, Southeast, South, Southwest, West, Northwest };

inline constexpr std::array<std::string_view, 8> kDirectionNames = {
    "North", "Northeast", "East", "Southeast", "South", "Southwest", "West", "Northwest"};

inline std::string_view to_string(Direction d) { return kDirectionNames[static_cast<std::size_t>(d)]; }

inline std::optional<Direction> parse_direction(std::string_view s) {
  for (std::size_t i = 0; i < kDirectionNames.size(); ++i)
    if (kDirectionNames[i] == s) return static_cast<Direction>(i);
  return std::nullopt;
}

// Bin k covers [45k - 22.5, 45k + 22.5) modulo 360.
inline Direction cardinal_direction(double bearing_deg) {
  if (!std::isfinite(bearing_deg) || bearing_deg < 0.0 || bearing_deg >= 360.0)
    fail(Errc::RangeError, "bearing must lie in [0, 360)");
  const auto bin = static_cast<long>(std::floor((bearing_deg + 22.5) / 45.0)) % 8;
  return static_cast<Direction>(bin);
}

inline constexpr double kDefaultMinDistKm = 0.1;

inline AdjacencyMatrix build_adjacency(const NodeSet& nodes, double min_dist_km = kDefaultMinDistKm) {
  if (nodes.size() < 2) fail(Errc::InvalidArgument, "adjacency needs at least two nodes");
  if (!(min_dist_km > 0.0)) fail(Errc::InvalidArgument, "min_dist_km must be positive");
  const std::size_t n = nodes.size();
  AdjacencyMatrix adj{n, std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = std::max(haversine_km(nodes.coord(i), nodes.coord(j)), min_dist_km);
      const double w = 1.0 / d;
      adj.weights[i * n + j] = w;
      adj.weights[j * n + i] = w;
    }
  }
  return adj;
}

}  // namespace geovec
