#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "geovec/dataio.hpp"
#include "geovec/embedding.hpp"
#include "geovec/geo_core.hpp"
#include "geovec/geo_predict.hpp"
#include "geovec/hash.hpp"
#include "geovec/prompt.hpp"

// Generators for offline experiments. Everything is a pure function of the seed.
namespace geovec::synth {

inline std::string node_id(std::string_view prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return std::string(prefix) + buf;
}

/// Embeds every node with instruction-only prompts; enough for providers that
/// only look at the coordinate.
inline GeoRepresentation embed_nodes(const NodeSet& nodes, const EmbeddingProvider& provider, unsigned parallelism = 1) {
  const auto variant = PromptVariant::instruction_only();
  return build_geovec(
      nodes, provider, variant,
      [&](std::size_t, const std::string&, const Coordinate& c) { return build_prompt(variant, c, std::nullopt, std::nullopt); },
      parallelism);
}

// ---------------------------------------------------------------------------
// Geographic prediction

struct GpDataset {
  NodeSet nodes;
  AttributeVector attribute;
};

inline double smooth_attribute(const Coordinate& c) { return std::sin(c.lon() / 15.0) + std::cos(c.lat() / 10.0); }

/// Nodes uniform over lon [-180, 180], lat [-60, 60];
/// attribute = sin(lon/15) + cos(lat/10) + Normal(0, noise_sd).
inline GpDataset gp_dataset(std::size_t n, std::uint64_t seed, double noise_sd = 0.05) {
  SplitMix64 rng(derive_seed(seed, "gp-nodes"));
  SplitMix64 noise(derive_seed(seed, "gp-noise"));
  std::vector<std::string> ids;
  std::vector<Coordinate> coords;
  AttributeVector attr;
  attr.name = "synthetic";
  for (std::size_t i = 0; i < n; ++i) {
    const double lon = rng.uniform(-180.0, 180.0);
    const double lat = rng.uniform(-60.0, 60.0);
    coords.emplace_back(lon, lat);
    ids.push_back(node_id("g", i));
    attr.node_ids.push_back(ids.back());
    attr.values.push_back(smooth_attribute(coords.back()) + noise_sd * noise.normal());
  }
  return {NodeSet(std::move(ids), std::move(coords)), std::move(attr)};
}

enum class Half { Longitude, Latitude };

/// RFF representation that only sees one coordinate axis (the other is zeroed),
/// so each half carries one of the two attribute terms.
inline GeoRepresentation half_signal_representation(const NodeSet& nodes, Half half, Eigen::Index dim,
                                                    std::uint64_t seed, double lengthscale_deg) {
  const RffFeatureMap map(dim, seed, lengthscale_deg);
  GeoRepresentation rep;
  rep.node_ids = nodes.ids();
  rep.dim = static_cast<std::uint32_t>(dim);
  rep.matrix.reserve(static_cast<std::size_t>(dim) * nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& c = nodes.coord(i);
    const auto v = map(half == Half::Longitude ? Coordinate(c.lon(), 0.0) : Coordinate(0.0, c.lat()));
    for (Eigen::Index r = 0; r < dim; ++r) rep.matrix.push_back(static_cast<float>(v[r]));
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "rff-%s-d%ld", half == Half::Longitude ? "lon" : "lat", static_cast<long>(dim));
  rep.provider_id = buf;
  rep.variant = "coordinates";
  rep.validate();
  return rep;
}

// ---------------------------------------------------------------------------
// Forecasting

/// Smooth per-node amplitude a and offset b over a fixed frame anchored at
/// (lon0, lat0); the frame spans 7 x 4 degrees.
struct GeoSignalField {
  double lon0 = -100.0;
  double lat0 = 35.0;
  double amp_max = 0.8;

  double u(const Coordinate& c) const { return (c.lon() - lon0) / 7.0; }
  double v(const Coordinate& c) const { return (c.lat() - lat0) / 4.0; }

  double amplitude(const Coordinate& c) const {
    const double s = 0.5 + 0.5 * std::sin(kPi * (1.5 * u(c) + v(c)));
    return amp_max * s * s;
  }
  double offset(const Coordinate& c) const { return std::cos(2.0 * u(c) + v(c)); }
};

struct GeoSignalOptions {
  std::size_t cols = 8;
  std::size_t rows = 5;
  double spacing_deg = 1.0;
  double lon_shift = 0.0;  // grid origin relative to the field frame
  double lat_shift = 0.0;
  Eigen::Index length = 960;
  double period = 24.0;
  double noise_sd = 0.1;
  std::string id_prefix = "s";
  GeoSignalField field{};
};

struct GeoSignalDataset {
  NodeSet nodes;
  io::TimeSeriesDataset series;
  std::vector<double> amplitude;
  std::vector<double> offset;
};

inline std::vector<std::string> hourly_timestamps(Eigen::Index length, std::int64_t start_epoch = 1704067200) {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(length));
  for (Eigen::Index t = 0; t < length; ++t) out.push_back(io::format_rfc3339(start_epoch + 3600 * static_cast<std::int64_t>(t)));
  return out;
}

/// series(t, i) = a_i sin(2 pi t / period) + b_i + Normal(0, noise_sd) on a
/// cols x rows grid.
inline GeoSignalDataset geo_signal(const GeoSignalOptions& o, std::uint64_t seed) {
  std::vector<std::string> ids;
  std::vector<Coordinate> coords;
  for (std::size_t r = 0; r < o.rows; ++r)
    for (std::size_t c = 0; c < o.cols; ++c) {
      ids.push_back(node_id(o.id_prefix, ids.size()));
      coords.emplace_back(o.field.lon0 + o.lon_shift + o.spacing_deg * static_cast<double>(c),
                          o.field.lat0 + o.lat_shift + o.spacing_deg * static_cast<double>(r));
    }
  GeoSignalDataset out{NodeSet(ids, coords), {}, {}, {}};
  const auto n = static_cast<Eigen::Index>(ids.size());
  for (const auto& c : coords) {
    out.amplitude.push_back(o.field.amplitude(c));
    out.offset.push_back(o.field.offset(c));
  }
  auto& ds = out.series;
  ds.node_ids = ids;
  ds.timestamps = hourly_timestamps(o.length);
  for (const auto& ts : ds.timestamps) ds.epoch_seconds.push_back(*io::parse_rfc3339(ts));
  ds.values.resize(o.length, n);
  SplitMix64 noise(derive_seed(seed, "geo-signal-noise:" + o.id_prefix));
  for (Eigen::Index t = 0; t < o.length; ++t) {
    const double wave = std::sin(2.0 * kPi * static_cast<double>(t) / o.period);
    for (Eigen::Index i = 0; i < n; ++i)
      ds.values(t, i) = out.amplitude[static_cast<std::size_t>(i)] * wave + out.offset[static_cast<std::size_t>(i)] +
                        o.noise_sd * noise.normal();
  }
  return out;
}

/// The unseen region for transfer: a grid offset by half a cell inside the
/// same field, so every node is new but the field is the one the model learned.
inline GeoSignalOptions transfer_region(GeoSignalOptions o) {
  o.cols -= 1;
  o.rows -= 1;
  o.lon_shift += 0.5 * o.spacing_deg;
  o.lat_shift += 0.5 * o.spacing_deg;
  o.id_prefix = "t";
  return o;
}

/// Independent Normal(0, sd) noise for every node and step.
inline io::TimeSeriesDataset pure_noise(std::size_t nodes, Eigen::Index length, std::uint64_t seed, double sd = 1.0) {
  io::TimeSeriesDataset ds;
  for (std::size_t i = 0; i < nodes; ++i) ds.node_ids.push_back(node_id("n", i));
  ds.timestamps = hourly_timestamps(length);
  for (const auto& ts : ds.timestamps) ds.epoch_seconds.push_back(*io::parse_rfc3339(ts));
  ds.values.resize(length, static_cast<Eigen::Index>(nodes));
  SplitMix64 rng(derive_seed(seed, "pure-noise"));
  for (Eigen::Index t = 0; t < length; ++t)
    for (Eigen::Index i = 0; i < ds.values.cols(); ++i) ds.values(t, i) = sd * rng.normal();
  return ds;
}

}  // namespace geovec::synth
