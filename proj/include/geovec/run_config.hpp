#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geovec/embedding.hpp"
#include "geovec/error.hpp"
#include "geovec/forecast.hpp"
#include "geovec/hash.hpp"
#include "geovec/transport.hpp"

namespace geovec {

struct ProviderConfig {
  std::string kind;  // mock | rff | remote
  long dim = 64;
  double lengthscale_deg = 10.0;
  std::string url;
  std::string model;
  int max_retries = 3;
  int backoff_ms = 200;
};

/// Everything a CLI run needs. Loaded from one JSON document; command-line
/// flags are applied on top.
struct RunConfig {
  std::string nodes;
  std::string attributes;
  std::string timeseries;
  std::string cache_dir;
  std::string store;
  std::vector<std::string> fixtures;
  std::optional<ProviderConfig> provider;
  std::string variant = "instruction-address-top10";
  double radius_km = 100.0;
  double alpha = 1.0;
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  forecast::ForecastConfig forecast{};
  bool offline = true;
  unsigned parallelism = 1;

  // Sub-seeds are keyed hashes of the single run seed.
  std::uint64_t provider_seed() const { return derive_seed(seed, "provider"); }
  std::uint64_t gp_seed() const { return derive_seed(seed, "gp-folds"); }
  std::uint64_t forecast_seed() const { return derive_seed(seed, "forecast"); }

  void require_path(const std::string& path, const char* what) const {
    if (path.empty()) fail(Errc::InvalidArgument, std::string("missing ") + what + " path");
    if (!std::filesystem::exists(path)) fail(Errc::Io, std::string(what) + " not found: " + path);
  }

  void validate_paths() const {
    for (const auto* p : {&nodes, &attributes, &timeseries})
      if (!p->empty() && !std::filesystem::exists(*p)) fail(Errc::Io, "path not found: " + *p);
    for (const auto& f : fixtures)
      if (!std::filesystem::exists(f)) fail(Errc::Io, "fixture file not found: " + f);
  }

  const ProviderConfig& require_provider() const {
    if (!provider || provider->kind.empty()) fail(Errc::InvalidArgument, "no embedding provider selected");
    const auto& k = provider->kind;
    if (k != "mock" && k != "rff" && k != "remote")
      fail(Errc::InvalidArgument, "provider must be one of mock, rff, remote (got '" + k + "')");
    if (k == "remote" && provider->url.empty()) fail(Errc::InvalidArgument, "remote provider needs a url");
    return *provider;
  }
};

inline void to_json(nlohmann::json& j, const ProviderConfig& p) {
  j = {{"kind", p.kind},   {"dim", p.dim},     {"lengthscale", p.lengthscale_deg}, {"url", p.url},
       {"model", p.model}, {"max_retries", p.max_retries}, {"backoff_ms", p.backoff_ms}};
}

inline void from_json(const nlohmann::json& j, ProviderConfig& p) {
  ProviderConfig d;
  p.kind = j.value("kind", d.kind);
  p.dim = j.value("dim", d.dim);
  p.lengthscale_deg = j.value("lengthscale", d.lengthscale_deg);
  p.url = j.value("url", d.url);
  p.model = j.value("model", d.model);
  p.max_retries = j.value("max_retries", d.max_retries);
  p.backoff_ms = j.value("backoff_ms", d.backoff_ms);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"paths",
        {{"nodes", c.nodes},
         {"attributes", c.attributes},
         {"timeseries", c.timeseries},
         {"cache_dir", c.cache_dir},
         {"store", c.store},
         {"fixtures", c.fixtures}}},
       {"variant", c.variant},
       {"radius_km", c.radius_km},
       {"gp", {{"alpha", c.alpha}, {"folds", c.folds}}},
       {"forecast", c.forecast},
       {"offline", c.offline},
       {"parallelism", c.parallelism},
       {"seed", c.seed}};
  if (c.provider) j["provider"] = *c.provider;
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) fail(Errc::ParseError, "run config must be a JSON object");
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    c.nodes = p.value("nodes", c.nodes);
    c.attributes = p.value("attributes", c.attributes);
    c.timeseries = p.value("timeseries", c.timeseries);
    c.cache_dir = p.value("cache_dir", c.cache_dir);
    c.store = p.value("store", c.store);
    c.fixtures = p.value("fixtures", c.fixtures);
  }
  if (j.contains("provider") && !j.at("provider").is_null()) c.provider = j.at("provider").get<ProviderConfig>();
  c.variant = j.value("variant", c.variant);
  c.radius_km = j.value("radius_km", c.radius_km);
  if (j.contains("gp")) {
    c.alpha = j.at("gp").value("alpha", c.alpha);
    c.folds = j.at("gp").value("folds", c.folds);
  }
  if (j.contains("forecast")) c.forecast = j.at("forecast").get<forecast::ForecastConfig>();
  c.offline = j.value("offline", c.offline);
  c.parallelism = j.value("parallelism", c.parallelism);
  c.seed = j.value("seed", c.seed);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::Io, "cannot open config " + path.string());
  try {
    return nlohmann::json::parse(in).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ParseError, "config " + path.string() + ": " + e.what());
  }
}

inline std::unique_ptr<EmbeddingProvider> make_provider(const RunConfig& c, std::shared_ptr<HttpTransport> transport) {
  const auto& p = c.require_provider();
  if (p.kind == "mock") return std::make_unique<MockProvider>(p.dim, c.provider_seed());
  if (p.kind == "rff") return std::make_unique<RffProvider>(p.dim, c.provider_seed(), p.lengthscale_deg);
  return std::make_unique<RemoteProvider>(p.url, p.model, p.dim, std::move(transport), p.max_retries,
                                          std::chrono::milliseconds(p.backoff_ms));
}

}  // namespace geovec
