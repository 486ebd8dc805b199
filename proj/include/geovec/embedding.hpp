#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "geovec/error.hpp"
#include "geovec/geo_core.hpp"
#include "geovec/hash.hpp"
#include "geovec/prompt.hpp"
#include "geovec/transport.hpp"

namespace geovec {

static_assert(std::endian::native == std::endian::little, "store I/O assumes a little-endian host");

/// Last-layer hidden states, one row per token.
class TokenMatrix {
 public:
  explicit TokenMatrix(Eigen::MatrixXd states) : states_(std::move(states)) {
    if (states_.rows() < 1) fail(Errc::EmptyTokenMatrix, "token matrix has no rows");
    if (states_.cols() < 1) fail(Errc::DimMismatch, "token matrix has zero width");
    if (!states_.allFinite()) fail(Errc::InvalidArgument, "token matrix has non-finite entries");
  }

  Eigen::Index tokens() const noexcept { return states_.rows(); }
  Eigen::Index dim() const noexcept { return states_.cols(); }
  const Eigen::MatrixXd& states() const noexcept { return states_; }

 private:
  Eigen::MatrixXd states_;
};

inline Eigen::VectorXd mean_pool(const Eigen::MatrixXd& states) {
  if (states.rows() < 1) fail(Errc::EmptyTokenMatrix, "cannot pool zero tokens");
  return states.colwise().mean().transpose();
}

inline Eigen::VectorXd mean_pool(const TokenMatrix& tokens) { return mean_pool(tokens.states()); }

// ---------------------------------------------------------------------------
// Providers

enum class ProviderMode { Remote, Mock, Rff };

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string id() const = 0;
  virtual Eigen::Index dim() const = 0;
  virtual ProviderMode mode() const = 0;
  // Providers that cannot take concurrent calls report true and are driven
  // from a single thread.
  virtual bool serialized() const { return false; }
  virtual TokenMatrix token_states(const Prompt& prompt) const = 0;
};

// splitmix expansion of hash64(seed, token) into values uniform in [-1, 1).
inline Eigen::VectorXd mock_token_vector(std::string_view token, Eigen::Index dim, std::uint64_t seed) {
  if (dim < 1) fail(Errc::InvalidArgument, "mock dim must be >= 1");
  SplitMix64 rng(hash64(seed, token));
  Eigen::VectorXd v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v[i] = 2.0 * rng.uniform() - 1.0;
  return v;
}

inline std::vector<std::string_view> whitespace_tokens(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const auto start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

/// Deterministic stand-in for an LLM: whitespace tokens, hashed token vectors.
class MockProvider final : public EmbeddingProvider {
 public:
  MockProvider(Eigen::Index dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 1) fail(Errc::InvalidArgument, "mock dim must be >= 1");
  }

  std::string id() const override { return "mock-d" + std::to_string(dim_) + "-s" + std::to_string(seed_); }
  Eigen::Index dim() const override { return dim_; }
  ProviderMode mode() const override { return ProviderMode::Mock; }

  TokenMatrix token_states(const Prompt& prompt) const override {
    const auto tokens = whitespace_tokens(prompt.text);
    if (tokens.empty()) fail(Errc::EmptyTokenMatrix, "prompt has no tokens");
    Eigen::MatrixXd states(static_cast<Eigen::Index>(tokens.size()), dim_);
    for (std::size_t t = 0; t < tokens.size(); ++t)
      states.row(static_cast<Eigen::Index>(t)) = mock_token_vector(tokens[t], dim_, seed_).transpose();
    return TokenMatrix(std::move(states));
  }

 private:
  Eigen::Index dim_;
  std::uint64_t seed_;
};

/// Random Fourier features of (lon, lat) in degrees: M/2 frequency pairs drawn
/// from Normal(0, 1/lengthscale^2), each emitting [cos, sin] scaled by sqrt(2/M).
class RffFeatureMap {
 public:
  RffFeatureMap(Eigen::Index dim, std::uint64_t seed, double lengthscale_deg) : dim_(dim) {
    if (dim < 2 || dim % 2 != 0) fail(Errc::OddDimension, "RFF dimension must be even and positive");
    if (!(lengthscale_deg > 0.0)) fail(Errc::InvalidArgument, "lengthscale must be positive");
    SplitMix64 rng(derive_seed(seed, "rff-frequencies"));
    freqs_.resize(dim / 2, 2);
    for (Eigen::Index j = 0; j < dim / 2; ++j) {
      freqs_(j, 0) = rng.normal() / lengthscale_deg;
      freqs_(j, 1) = rng.normal() / lengthscale_deg;
    }
  }

  Eigen::VectorXd operator()(const Coordinate& c) const {
    const double scale = std::sqrt(2.0 / static_cast<double>(dim_));
    Eigen::VectorXd out(dim_);
    for (Eigen::Index j = 0; j < dim_ / 2; ++j) {
      const double phase = freqs_(j, 0) * c.lon() + freqs_(j, 1) * c.lat();
      out[2 * j] = scale * std::cos(phase);
      out[2 * j + 1] = scale * std::sin(phase);
    }
    return out;
  }

  const Eigen::MatrixX2d& frequencies() const noexcept { return freqs_; }

 private:
  Eigen::Index dim_;
  Eigen::MatrixX2d freqs_;
};

inline Eigen::VectorXd rff_embed(const Coordinate& coord, Eigen::Index dim, std::uint64_t seed, double lengthscale_deg) {
  if (dim % 2 != 0) fail(Errc::OddDimension, "RFF dimension must be even");
  return RffFeatureMap(dim, seed, lengthscale_deg)(coord);
}

/// Synthetic provider: ignores the prompt text and emits RFF features of the
/// prompt's coordinate as a single token.
class RffProvider final : public EmbeddingProvider {
 public:
  RffProvider(Eigen::Index dim, std::uint64_t seed, double lengthscale_deg)
      : map_(dim, seed, lengthscale_deg), dim_(dim), seed_(seed), lengthscale_(lengthscale_deg) {}

  std::string id() const override {
    char buf[96];
    std::snprintf(buf, sizeof buf, "rff-d%ld-s%llu-l%g", static_cast<long>(dim_),
                  static_cast<unsigned long long>(seed_), lengthscale_);
    return buf;
  }
  Eigen::Index dim() const override { return dim_; }
  ProviderMode mode() const override { return ProviderMode::Rff; }

  TokenMatrix token_states(const Prompt& prompt) const override {
    return TokenMatrix(map_(prompt.coord).transpose());
  }

 private:
  RffFeatureMap map_;
  Eigen::Index dim_;
  std::uint64_t seed_;
  double lengthscale_;
};

/// Parses a `/token_embeddings` response: {"dim": M, "tokens": T, "states": [[...]]}.
inline TokenMatrix parse_token_states(const std::string& body) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ParseError, std::string("token_embeddings body is not JSON: ") + e.what());
  }
  try {
    const auto dim = doc.at("dim").get<long>();
    const auto tokens = doc.at("tokens").get<long>();
    const auto& states = doc.at("states");
    if (tokens < 1 || !states.is_array() || states.empty()) fail(Errc::EmptyTokenMatrix, "response carries no tokens");
    if (static_cast<long>(states.size()) != tokens)
      fail(Errc::ParseError, "states row count disagrees with 'tokens'");
    Eigen::MatrixXd m(tokens, dim);
    for (long t = 0; t < tokens; ++t) {
      const auto& row = states[static_cast<std::size_t>(t)];
      if (static_cast<long>(row.size()) != dim) fail(Errc::DimMismatch, "state row width disagrees with 'dim'");
      for (long j = 0; j < dim; ++j) m(t, j) = row[static_cast<std::size_t>(j)].get<double>();
    }
    return TokenMatrix(std::move(m));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ParseError, std::string("malformed token_embeddings response: ") + e.what());
  }
}

/// Client for a model server speaking the `/token_embeddings` protocol.
/// One request per prompt; transient failures are retried with exponential
/// backoff before ProviderUnavailable is raised.
class RemoteProvider final : public EmbeddingProvider {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  RemoteProvider(std::string base_url, std::string model, Eigen::Index dim, std::shared_ptr<HttpTransport> transport,
                 int max_retries = 3, std::chrono::milliseconds backoff = std::chrono::milliseconds(200),
                 Sleeper sleeper = nullptr)
      : base_url_(std::move(base_url)),
        model_(std::move(model)),
        dim_(dim),
        transport_(std::move(transport)),
        max_retries_(max_retries),
        backoff_(backoff),
        sleeper_(sleeper ? std::move(sleeper) : Sleeper([](std::chrono::milliseconds d) {
          std::this_thread::sleep_for(d);
        })) {
    if (dim < 1) fail(Errc::InvalidArgument, "remote dim must be >= 1");
    if (!transport_) fail(Errc::InvalidArgument, "remote provider needs a transport");
  }

  std::string id() const override { return "remote:" + model_; }
  Eigen::Index dim() const override { return dim_; }
  ProviderMode mode() const override { return ProviderMode::Remote; }
  bool serialized() const override { return true; }

  TokenMatrix token_states(const Prompt& prompt) const override {
    const auto url = split_url(base_url_);
    std::string path = url.path == "/" ? "" : url.path;
    path += "/token_embeddings";
    const auto body = nlohmann::json{{"model", model_}, {"text", prompt.text}}.dump();
    std::string last_error = "no attempt made";
    auto delay = backoff_;
    for (int attempt = 0; attempt <= max_retries_; ++attempt) {
      if (attempt > 0) {
        sleeper_(delay);
        delay *= 2;
      }
      const auto res = transport_->post(url.origin, path, body, "application/json");
      if (!res) {
        last_error = "connection failed";
        continue;
      }
      if (res->status >= 500 || res->status == 429) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) fail(Errc::ProviderUnavailable, "model server returned HTTP " + std::to_string(res->status));
      return parse_token_states(res->body);
    }
    fail(Errc::ProviderUnavailable, base_url_ + ": " + last_error + " after " + std::to_string(max_retries_ + 1) +
                                        " attempts");
  }

 private:
  std::string base_url_;
  std::string model_;
  Eigen::Index dim_;
  std::shared_ptr<HttpTransport> transport_;
  int max_retries_;
  std::chrono::milliseconds backoff_;
  Sleeper sleeper_;
};

inline Eigen::VectorXd embed_text(const EmbeddingProvider& provider, const Prompt& prompt) {
  if (prompt.text.empty()) fail(Errc::InvalidArgument, "prompt text is empty");
  const auto tokens = provider.token_states(prompt);
  if (tokens.dim() != provider.dim())
    fail(Errc::DimMismatch, "provider " + provider.id() + " declared dim " + std::to_string(provider.dim()) +
                                " but returned " + std::to_string(tokens.dim()));
  return mean_pool(tokens);
}

// ---------------------------------------------------------------------------
// Representation

/// Z in R^{M x N}: one column per node, stored column-major in 32-bit floats.
struct GeoRepresentation {
  std::vector<std::string> node_ids;
  std::uint32_t dim = 0;
  std::vector<float> matrix;
  std::string provider_id;
  std::string variant;
  std::string prompt_hash;

  std::size_t size() const noexcept { return node_ids.size(); }

  std::span<const float> column(std::size_t node) const {
    return {matrix.data() + node * dim, static_cast<std::size_t>(dim)};
  }

  float at(std::size_t row, std::size_t node) const { return matrix[node * dim + row]; }

  // N x M design matrix in double precision (one row per node).
  Eigen::MatrixXd design() const {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(size()), static_cast<Eigen::Index>(dim));
    for (std::size_t n = 0; n < size(); ++n)
      for (std::size_t r = 0; r < dim; ++r) x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(r)) = at(r, n);
    return x;
  }

  std::optional<std::size_t> index_of(std::string_view id) const {
    for (std::size_t i = 0; i < node_ids.size(); ++i)
      if (node_ids[i] == id) return i;
    return std::nullopt;
  }

  void validate() const {
    if (matrix.size() != static_cast<std::size_t>(dim) * node_ids.size())
      fail(Errc::DimMismatch, "matrix size does not match dim x N");
    for (float v : matrix)
      if (!std::isfinite(v)) fail(Errc::InvalidArgument, "representation has non-finite entries");
  }

  friend bool operator==(const GeoRepresentation&, const GeoRepresentation&) = default;
};

inline std::string hash_prompts(std::span<const std::string> texts) {
  std::uint64_t h = kFnvOffset;
  for (const auto& t : texts) {
    h = fnv1a64(t, h);
    const unsigned char sep = 0;
    h = fnv1a64(std::span(&sep, 1), h);
  }
  return to_hex(h);
}

using PromptSource = std::function<Prompt(std::size_t index, const std::string& id, const Coordinate& coord)>;

/// Embeds every node's prompt. Work is spread over `parallelism` threads
/// (one for serialized providers); columns always follow node order. Any
/// failure aborts the whole build and names the first failing node.
inline GeoRepresentation build_geovec(const NodeSet& nodes, const EmbeddingProvider& provider,
                                      const PromptVariant& variant, const PromptSource& prompt_source,
                                      unsigned parallelism = 1) {
  const std::size_t n = nodes.size();
  const auto dim = provider.dim();
  std::vector<std::string> texts(n);
  std::vector<Eigen::VectorXd> columns(n);
  std::vector<std::exception_ptr> errors(n);

  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i = next++; i < n && !failed; i = next++) {
      try {
        const auto prompt = prompt_source(i, nodes.id(i), nodes.coord(i));
        texts[i] = prompt.text;
        columns[i] = embed_text(provider, prompt);
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
      }
    }
  };
  const unsigned threads = provider.serialized() ? 1u : std::max(1u, std::min<unsigned>(parallelism, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const Error& e) {
      throw Error(e.code(), "node '" + nodes.id(i) + "': " + e.what());
    } catch (const std::exception& e) {
      throw Error(Errc::InvalidArgument, "node '" + nodes.id(i) + "': " + e.what());
    }
  }

  GeoRepresentation rep;
  rep.node_ids = nodes.ids();
  rep.dim = static_cast<std::uint32_t>(dim);
  rep.matrix.resize(static_cast<std::size_t>(dim) * n);
  for (std::size_t i = 0; i < n; ++i)
    for (Eigen::Index r = 0; r < dim; ++r) rep.matrix[i * rep.dim + static_cast<std::size_t>(r)] = static_cast<float>(columns[i][r]);
  rep.provider_id = provider.id();
  rep.variant = variant.to_string();
  rep.prompt_hash = hash_prompts(texts);
  rep.validate();
  return rep;
}

// ---------------------------------------------------------------------------
// GVEC store
//
// Little-endian layout:
//   "GVEC" | u32 version | u32 N | u32 M | u32 meta_len | meta JSON (UTF-8)
//   | N*M f32, column-major (column = node) | u64 FNV-1a of all preceding bytes

inline constexpr char kStoreMagic[4] = {'G', 'V', 'E', 'C'};
inline constexpr std::uint32_t kStoreVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t offset) {
  T v;
  std::memcpy(&v, in.data() + offset, sizeof(T));
  return v;
}

}  // namespace detail

inline std::string encode_store(const GeoRepresentation& rep) {
  rep.validate();
  const nlohmann::json meta{{"provider_id", rep.provider_id},
                            {"variant", rep.variant},
                            {"prompt_hash", rep.prompt_hash},
                            {"node_ids", rep.node_ids}};
  const auto meta_text = meta.dump();
  std::string out(kStoreMagic, 4);
  detail::put_le<std::uint32_t>(out, kStoreVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rep.size()));
  detail::put_le<std::uint32_t>(out, rep.dim);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta_text.size()));
  out += meta_text;
  out.append(reinterpret_cast<const char*>(rep.matrix.data()), rep.matrix.size() * sizeof(float));
  detail::put_le<std::uint64_t>(out, fnv1a64(out));
  return out;
}

inline GeoRepresentation decode_store(const std::string& bytes) {
  constexpr std::size_t header = 4 + 4 * 4;
  if (bytes.size() < 4) fail(Errc::TruncatedFile, "store shorter than its magic");
  if (std::memcmp(bytes.data(), kStoreMagic, 4) != 0) fail(Errc::BadMagic, "not a GVEC store");
  if (bytes.size() < header) fail(Errc::TruncatedFile, "store header is truncated");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kStoreVersion) fail(Errc::VersionMismatch, "unsupported store version " + std::to_string(version));
  const auto n = detail::get_le<std::uint32_t>(bytes, 8);
  const auto m = detail::get_le<std::uint32_t>(bytes, 12);
  const auto meta_len = detail::get_le<std::uint32_t>(bytes, 16);
  const std::uint64_t expected =
      header + std::uint64_t{meta_len} + std::uint64_t{n} * m * sizeof(float) + sizeof(std::uint64_t);
  if (bytes.size() < expected) fail(Errc::TruncatedFile, "store is shorter than its header declares");
  if (bytes.size() > expected) fail(Errc::TruncatedFile, "store has trailing bytes beyond its declared size");
  const auto body_len = static_cast<std::size_t>(expected - sizeof(std::uint64_t));
  const auto stored = detail::get_le<std::uint64_t>(bytes, body_len);
  if (fnv1a64(std::string_view(bytes.data(), body_len)) != stored) fail(Errc::ChecksumMismatch, "store checksum mismatch");

  GeoRepresentation rep;
  try {
    const auto meta = nlohmann::json::parse(bytes.substr(header, meta_len));
    rep.provider_id = meta.at("provider_id").get<std::string>();
    rep.variant = meta.at("variant").get<std::string>();
    rep.prompt_hash = meta.at("prompt_hash").get<std::string>();
    rep.node_ids = meta.at("node_ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ParseError, std::string("store metadata: ") + e.what());
  }
  if (rep.node_ids.size() != n) fail(Errc::ParseError, "store metadata lists a different node count");
  rep.dim = m;
  rep.matrix.resize(std::size_t{n} * m);
  std::memcpy(rep.matrix.data(), bytes.data() + header + meta_len, rep.matrix.size() * sizeof(float));
  return rep;
}

inline std::uint64_t store_checksum(const GeoRepresentation& rep) {
  const auto bytes = encode_store(rep);
  return detail::get_le<std::uint64_t>(bytes, bytes.size() - sizeof(std::uint64_t));
}

// Writes through a temporary file so a failed save never leaves a partial store.
inline void save_store(const GeoRepresentation& rep, const std::filesystem::path& path) {
  const auto bytes = encode_store(rep);
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::Io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(Errc::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(Errc::Io, "cannot move store into place at " + path.string());
  }
}

inline GeoRepresentation load_store(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::Io, "cannot open store " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_store(bytes);
}

}  // namespace geovec
