#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "geovec/error.hpp"
#include "geovec/geo_core.hpp"
#include "geovec/geo_predict.hpp"

namespace geovec::io {

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::ifstream open(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::Io, "cannot open " + path.string());
  return in;
}

inline std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.filename().string() + " line " + std::to_string(line);
}

inline void expect_header(const std::filesystem::path& path, std::istream& in,
                          std::initializer_list<std::string_view> expected) {
  std::string header;
  if (!std::getline(in, header)) fail(Errc::ParseError, where(path, 1) + ": missing header");
  const auto cols = split_csv(header);
  if (cols.size() != expected.size() || !std::equal(cols.begin(), cols.end(), expected.begin()))
    fail(Errc::ParseError, where(path, 1) + ": unexpected header '" + header + "'");
}

}  // namespace detail

/// Reads `id,lon,lat`.
inline NodeSet load_nodes_csv(const std::filesystem::path& path) {
  auto in = detail::open(path);
  detail::expect_header(path, in, {"id", "lon", "lat"});
  std::vector<std::string> ids;
  std::vector<Coordinate> coords;
  std::unordered_set<std::string> seen;
  std::string line;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 3 || f[0].empty()) fail(Errc::ParseError, detail::where(path, lineno) + ": expected id,lon,lat");
    const auto lon = detail::parse_double(f[1]);
    const auto lat = detail::parse_double(f[2]);
    if (!lon || !lat) fail(Errc::ParseError, detail::where(path, lineno) + ": non-numeric coordinate");
    if (!std::isfinite(*lon) || *lon < -180.0 || *lon > 180.0 || !std::isfinite(*lat) || *lat < -90.0 || *lat > 90.0)
      fail(Errc::RangeError, detail::where(path, lineno) + ": coordinate out of range");
    std::string id(f[0]);
    if (!seen.insert(id).second) fail(Errc::DuplicateId, detail::where(path, lineno) + ": duplicate id '" + id + "'");
    ids.push_back(std::move(id));
    coords.emplace_back(*lon, *lat);
  }
  if (ids.empty()) fail(Errc::ParseError, path.filename().string() + ": no nodes");
  return NodeSet(std::move(ids), std::move(coords));
}

/// Reads `id,value`.
inline AttributeVector load_attributes_csv(const std::filesystem::path& path, std::string name = {}) {
  auto in = detail::open(path);
  detail::expect_header(path, in, {"id", "value"});
  AttributeVector attr;
  attr.name = name.empty() ? path.stem().string() : std::move(name);
  std::unordered_set<std::string> seen;
  std::string line;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 2 || f[0].empty()) fail(Errc::ParseError, detail::where(path, lineno) + ": expected id,value");
    const auto v = detail::parse_double(f[1]);
    if (!v || !std::isfinite(*v)) fail(Errc::ParseError, detail::where(path, lineno) + ": bad value");
    std::string id(f[0]);
    if (!seen.insert(id).second) fail(Errc::DuplicateId, detail::where(path, lineno) + ": duplicate id '" + id + "'");
    attr.node_ids.push_back(std::move(id));
    attr.values.push_back(*v);
  }
  return attr;
}

inline void write_attributes_csv(const std::filesystem::path& path, const AttributeVector& attr) {
  std::ofstream out(path);
  if (!out) fail(Errc::Io, "cannot write " + path.string());
  out << "id,value\n" << std::setprecision(17);
  for (std::size_t i = 0; i < attr.node_ids.size(); ++i) out << attr.node_ids[i] << ',' << attr.values[i] << '\n';
}

inline void write_nodes_csv(const std::filesystem::path& path, const NodeSet& nodes) {
  std::ofstream out(path);
  if (!out) fail(Errc::Io, "cannot write " + path.string());
  out << "id,lon,lat\n" << std::setprecision(17);
  for (std::size_t i = 0; i < nodes.size(); ++i)
    out << nodes.id(i) << ',' << nodes.coord(i).lon() << ',' << nodes.coord(i).lat() << '\n';
}

// ---------------------------------------------------------------------------
// Timestamps

namespace detail {

inline std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline bool digits(std::string_view s, std::size_t pos, std::size_t n, int& out) {
  if (pos + n > s.size()) return false;
  out = 0;
  for (std::size_t i = pos; i < pos + n; ++i) {
    if (s[i] < '0' || s[i] > '9') return false;
    out = out * 10 + (s[i] - '0');
  }
  return true;
}

}  // namespace detail

/// Parses an RFC-3339 date-time to seconds since the Unix epoch (UTC).
inline std::optional<double> parse_rfc3339(std::string_view s) {
  int y, mo, d, h, mi, sec;
  if (!detail::digits(s, 0, 4, y) || s.size() < 19 || s[4] != '-' || !detail::digits(s, 5, 2, mo) || s[7] != '-' ||
      !detail::digits(s, 8, 2, d) || (s[10] != 'T' && s[10] != 't' && s[10] != ' ') || !detail::digits(s, 11, 2, h) ||
      s[13] != ':' || !detail::digits(s, 14, 2, mi) || s[16] != ':' || !detail::digits(s, 17, 2, sec))
    return std::nullopt;
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || sec > 60) return std::nullopt;
  std::size_t pos = 19;
  double frac = 0.0;
  if (pos < s.size() && s[pos] == '.') {
    double scale = 0.1;
    ++pos;
    const auto start = pos;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
      frac += (s[pos] - '0') * scale;
      scale /= 10.0;
      ++pos;
    }
    if (pos == start) return std::nullopt;
  }
  if (pos >= s.size()) return std::nullopt;
  int offset_min = 0;
  if (s[pos] == 'Z' || s[pos] == 'z') {
    ++pos;
  } else if (s[pos] == '+' || s[pos] == '-') {
    int oh, om;
    if (!detail::digits(s, pos + 1, 2, oh) || pos + 3 >= s.size() || s[pos + 3] != ':' ||
        !detail::digits(s, pos + 4, 2, om))
      return std::nullopt;
    offset_min = (oh * 60 + om) * (s[pos] == '-' ? -1 : 1);
    pos += 6;
  } else {
    return std::nullopt;
  }
  if (pos != s.size()) return std::nullopt;
  const auto days = detail::days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d));
  return static_cast<double>(days * 86400 + h * 3600 + mi * 60 + sec - offset_min * 60) + frac;
}

// ---------------------------------------------------------------------------
// Time series

/// Row t of `values` is the observation of every node at timestamps[t].
struct TimeSeriesDataset {
  std::vector<std::string> node_ids;
  std::vector<std::string> timestamps;
  std::vector<double> epoch_seconds;
  Eigen::MatrixXd values;  // T x N

  Eigen::Index length() const noexcept { return values.rows(); }
  Eigen::Index nodes() const noexcept { return values.cols(); }

  TimeSeriesDataset slice(Eigen::Index begin, Eigen::Index end) const {
    TimeSeriesDataset out;
    out.node_ids = node_ids;
    out.timestamps.assign(timestamps.begin() + begin, timestamps.begin() + end);
    out.epoch_seconds.assign(epoch_seconds.begin() + begin, epoch_seconds.begin() + end);
    out.values = values.middleRows(begin, end - begin);
    return out;
  }
};

inline TimeSeriesDataset load_timeseries_csv(const std::filesystem::path& path) {
  auto in = detail::open(path);
  std::string line;
  if (!std::getline(in, line)) fail(Errc::ParseError, detail::where(path, 1) + ": missing header");
  const auto header = detail::split_csv(line);
  if (header.size() < 2 || header[0] != "timestamp")
    fail(Errc::ParseError, detail::where(path, 1) + ": header must be timestamp,<id>,...");
  TimeSeriesDataset ds;
  std::unordered_set<std::string> seen;
  for (std::size_t c = 1; c < header.size(); ++c) {
    std::string id(header[c]);
    if (id.empty()) fail(Errc::ParseError, detail::where(path, 1) + ": empty node id in header");
    if (!seen.insert(id).second) fail(Errc::DuplicateId, detail::where(path, 1) + ": duplicate node id '" + id + "'");
    ds.node_ids.push_back(std::move(id));
  }
  const auto n = ds.node_ids.size();
  std::vector<double> flat;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != n + 1) fail(Errc::ParseError, detail::where(path, lineno) + ": wrong number of fields");
    const auto ts = parse_rfc3339(f[0]);
    if (!ts) fail(Errc::ParseError, detail::where(path, lineno) + ": bad RFC-3339 timestamp '" + std::string(f[0]) + "'");
    if (!ds.epoch_seconds.empty() && !(*ts > ds.epoch_seconds.back()))
      fail(Errc::NonMonotonicTimestamps, detail::where(path, lineno) + ": timestamp not after previous row");
    for (std::size_t c = 1; c <= n; ++c) {
      if (f[c].empty())
        fail(Errc::MissingValue, detail::where(path, lineno) + ", column '" + ds.node_ids[c - 1] + "': empty cell");
      const auto v = detail::parse_double(f[c]);
      if (!v || !std::isfinite(*v))
        fail(Errc::ParseError, detail::where(path, lineno) + ", column '" + ds.node_ids[c - 1] + "': bad number");
      flat.push_back(*v);
    }
    ds.timestamps.emplace_back(f[0]);
    ds.epoch_seconds.push_back(*ts);
  }
  const auto t = static_cast<Eigen::Index>(ds.timestamps.size());
  ds.values = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      flat.data(), t, static_cast<Eigen::Index>(n));
  return ds;
}

inline void write_timeseries_csv(const std::filesystem::path& path, const TimeSeriesDataset& ds) {
  std::ofstream out(path);
  if (!out) fail(Errc::Io, "cannot write " + path.string());
  out << "timestamp";
  for (const auto& id : ds.node_ids) out << ',' << id;
  out << '\n' << std::setprecision(17);
  for (Eigen::Index t = 0; t < ds.length(); ++t) {
    out << ds.timestamps[static_cast<std::size_t>(t)];
    for (Eigen::Index i = 0; i < ds.nodes(); ++i) out << ',' << ds.values(t, i);
    out << '\n';
  }
}

inline std::string format_rfc3339(std::int64_t epoch_seconds) {
  std::int64_t days = epoch_seconds / 86400;
  std::int64_t rem = epoch_seconds % 86400;
  if (rem < 0) {
    rem += 86400;
    --days;
  }
  // civil_from_days
  days += 719468;
  const std::int64_t era = (days >= 0 ? days : days - 146096) / 146097;
  const auto doe = static_cast<unsigned>(days - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp < 10 ? mp + 3 : mp - 9;
  const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400 + (m <= 2);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02lld:%02lld:%02lldZ", static_cast<long long>(y), m, d,
                static_cast<long long>(rem / 3600), static_cast<long long>(rem % 3600 / 60),
                static_cast<long long>(rem % 60));
  return buf;
}

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct SplitBounds {
  Eigen::Index train_end = 0;
  Eigen::Index val_end = 0;
  Eigen::Index total = 0;
};

// Boundaries sit at floor(T * cumulative ratio). `min_len` (H + F) is the
// shortest split that still yields one window.
inline SplitBounds split_bounds(Eigen::Index t, const SplitRatios& r = {}, Eigen::Index min_len = 0) {
  if (!(r.train > 0 && r.val > 0 && r.test > 0) || std::abs(r.train + r.val + r.test - 1.0) > 1e-9)
    fail(Errc::InvalidArgument, "split ratios must be positive and sum to 1");
  // The small nudge keeps e.g. 100 * (0.7 + 0.1) from flooring to 79.
  const auto cut = [&](double cum) {
    return static_cast<Eigen::Index>(std::floor(static_cast<double>(t) * cum + 1e-9));
  };
  SplitBounds b{cut(r.train), cut(r.train + r.val), t};
  b.val_end = std::min(b.val_end, t);
  const Eigen::Index lens[3] = {b.train_end, b.val_end - b.train_end, t - b.val_end};
  for (auto len : lens)
    if (len < std::max<Eigen::Index>(min_len, 1))
      fail(Errc::TooShort, "series of length " + std::to_string(t) + " gives a split of " + std::to_string(len) +
                               " steps, need at least " + std::to_string(std::max<Eigen::Index>(min_len, 1)));
  return b;
}

struct Splits {
  TimeSeriesDataset train, val, test;
};

inline Splits chronological_split(const TimeSeriesDataset& ds, const SplitRatios& r = {}, Eigen::Index min_len = 0) {
  const auto b = split_bounds(ds.length(), r, min_len);
  return {ds.slice(0, b.train_end), ds.slice(b.train_end, b.val_end), ds.slice(b.val_end, b.total)};
}

// ---------------------------------------------------------------------------
// ESRI ASCII raster

/// North-up grid: row 0 is the northernmost row.
struct RasterGrid {
  Eigen::Index ncols = 0;
  Eigen::Index nrows = 0;
  double xllcorner = 0.0;
  double yllcorner = 0.0;
  double cellsize = 1.0;
  double nodata = -9999.0;
  Eigen::MatrixXd values;  // nrows x ncols

  double center_lon(Eigen::Index col) const { return xllcorner + (static_cast<double>(col) + 0.5) * cellsize; }
  double center_lat(Eigen::Index row) const {
    return yllcorner + (static_cast<double>(nrows - row) - 0.5) * cellsize;
  }

  void validate() const {
    if (ncols < 1 || nrows < 1) fail(Errc::ParseError, "raster dimensions must be positive");
    if (!(cellsize > 0.0)) fail(Errc::ParseError, "raster cellsize must be positive");
    if (values.rows() != nrows || values.cols() != ncols) fail(Errc::ParseError, "raster values do not match header");
  }
};

inline RasterGrid read_ascii_grid(std::istream& in) {
  RasterGrid g;
  bool have[6] = {};
  auto lower = [](std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
  };
  std::string key;
  // Header keys may come in any order; the grid body starts at the first numeric token.
  for (;;) {
    const auto pos = in.tellg();
    if (!(in >> key)) fail(Errc::ParseError, "raster header ended early");
    const auto k = lower(key);
    double v = 0.0;
    if (k == "ncols" || k == "nrows" || k == "xllcorner" || k == "yllcorner" || k == "cellsize" ||
        k == "nodata_value") {
      if (!(in >> v)) fail(Errc::ParseError, "raster header value for " + key + " is not numeric");
      if (k == "ncols") g.ncols = static_cast<Eigen::Index>(v), have[0] = true;
      if (k == "nrows") g.nrows = static_cast<Eigen::Index>(v), have[1] = true;
      if (k == "xllcorner") g.xllcorner = v, have[2] = true;
      if (k == "yllcorner") g.yllcorner = v, have[3] = true;
      if (k == "cellsize") g.cellsize = v, have[4] = true;
      if (k == "nodata_value") g.nodata = v, have[5] = true;
      continue;
    }
    in.clear();
    in.seekg(pos);
    break;
  }
  for (int i = 0; i < 5; ++i)
    if (!have[i]) fail(Errc::ParseError, "raster header lacks a required key");
  if (g.ncols < 1 || g.nrows < 1) fail(Errc::ParseError, "raster dimensions must be positive");
  g.values.resize(g.nrows, g.ncols);
  for (Eigen::Index r = 0; r < g.nrows; ++r)
    for (Eigen::Index c = 0; c < g.ncols; ++c) {
      std::string tok;
      if (!(in >> tok)) fail(Errc::ParseError, "raster body is truncated");
      const auto v = detail::parse_double(tok);
      if (!v) fail(Errc::ParseError, "raster cell is not numeric: " + tok);
      g.values(r, c) = *v;
    }
  g.validate();
  return g;
}

inline RasterGrid read_ascii_grid(const std::filesystem::path& path) {
  auto in = detail::open(path);
  return read_ascii_grid(static_cast<std::istream&>(in));
}

inline void write_ascii_grid(std::ostream& out, const RasterGrid& g) {
  g.validate();
  out << std::setprecision(17);
  out << "ncols " << g.ncols << "\nnrows " << g.nrows << "\nxllcorner " << g.xllcorner << "\nyllcorner "
      << g.yllcorner << "\ncellsize " << g.cellsize << "\nNODATA_value " << g.nodata << "\n";
  for (Eigen::Index r = 0; r < g.nrows; ++r) {
    for (Eigen::Index c = 0; c < g.ncols; ++c) out << (c ? " " : "") << g.values(r, c);
    out << "\n";
  }
}

inline constexpr std::size_t kRasterSamplePixels = 12;

/// Mean over the 12 pixel centers nearest to `coord` (planar distance in
/// degrees, ties by row-major index); nodata pixels are left out of the mean.
inline double sample_raster(const RasterGrid& g, const Coordinate& coord) {
  const double x_max = g.xllcorner + static_cast<double>(g.ncols) * g.cellsize;
  const double y_max = g.yllcorner + static_cast<double>(g.nrows) * g.cellsize;
  if (coord.lon() < g.xllcorner || coord.lon() > x_max || coord.lat() < g.yllcorner || coord.lat() > y_max)
    fail(Errc::OutOfBounds, "coordinate lies outside the raster extent");

  // The 12 nearest centers always fall within 4 cells of the containing cell.
  constexpr Eigen::Index reach = 4;
  const auto col0 = std::clamp<Eigen::Index>(
      static_cast<Eigen::Index>(std::floor((coord.lon() - g.xllcorner) / g.cellsize)), 0, g.ncols - 1);
  const auto row0 = std::clamp<Eigen::Index>(
      static_cast<Eigen::Index>(std::floor((y_max - coord.lat()) / g.cellsize)), 0, g.nrows - 1);

  struct Candidate {
    double d2;
    Eigen::Index index;
  };
  std::vector<Candidate> cands;
  for (Eigen::Index r = std::max<Eigen::Index>(0, row0 - reach); r <= std::min(g.nrows - 1, row0 + reach); ++r)
    for (Eigen::Index c = std::max<Eigen::Index>(0, col0 - reach); c <= std::min(g.ncols - 1, col0 + reach); ++c) {
      const double dx = g.center_lon(c) - coord.lon();
      const double dy = g.center_lat(r) - coord.lat();
      cands.push_back({dx * dx + dy * dy, r * g.ncols + c});
    }
  const auto take = std::min(kRasterSamplePixels, cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(take), cands.end(),
                    [](const Candidate& a, const Candidate& b) { return a.d2 != b.d2 ? a.d2 < b.d2 : a.index < b.index; });

  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < take; ++i) {
    const double v = g.values(cands[i].index / g.ncols, cands[i].index % g.ncols);
    if (v == g.nodata || !std::isfinite(v)) continue;
    sum += v;
    ++count;
  }
  if (count == 0) fail(Errc::AllNoData, "every nearby pixel is nodata");
  return sum / static_cast<double>(count);
}

}  // namespace geovec::io
