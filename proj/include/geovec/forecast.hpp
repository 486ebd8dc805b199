#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "geovec/dataio.hpp"
#include "geovec/embedding.hpp"
#include "geovec/error.hpp"
#include "geovec/geo_core.hpp"
#include "geovec/hash.hpp"

// Channel-independent MLP forecaster. One shared network maps each node's
// length-H history to its next F values:
//
//   n, mu, sigma = RevIN(window)
//   s   = E n + e                    token embedding, d_t wide
//   s'  = [s ; z']                   z' = Adapter(z_node) or a learned table column
//   h   = LeakyReLU(C s' + c)
//   out = D h + d
//   y   = out * sigma + mu
//
// The adapter is W2 LeakyReLU(W1 z + b1) + b2. Gradients are derived by hand.
namespace geovec::forecast {

struct ForecastConfig {
  int history = 12;     // H
  int horizon = 12;     // F
  int token_dim = 16;   // d_t
  int geo_dim = 32;     // d_s
  int hidden = 64;
  double lr = 1e-3;
  int epochs = 50;
  int batch = 64;
  std::uint64_t seed = 0;
  double leaky_slope = 0.01;
  double revin_eps = 1e-5;
  // When set, the token embedding shrinks by d_s so the encoder input keeps
  // the plain model's width.
  bool preserve_width = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  io::SplitRatios splits{};

  Eigen::Index window() const { return history + horizon; }

  void validate() const {
    if (history < 1 || horizon < 1 || token_dim < 1 || hidden < 1 || batch < 1 || epochs < 1 || geo_dim < 0)
      fail(Errc::InvalidArgument, "forecast config sizes must be positive");
    if (!(lr > 0.0) || !(revin_eps > 0.0)) fail(Errc::InvalidArgument, "lr and revin_eps must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ForecastConfig& c) {
  j = {{"history", c.history},       {"horizon", c.horizon},
       {"token_dim", c.token_dim},   {"geo_dim", c.geo_dim},
       {"hidden", c.hidden},         {"lr", c.lr},
       {"epochs", c.epochs},         {"batch", c.batch},
       {"seed", c.seed},             {"leaky_slope", c.leaky_slope},
       {"revin_eps", c.revin_eps},   {"preserve_width", c.preserve_width},
       {"beta1", c.beta1},           {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},     {"splits", {c.splits.train, c.splits.val, c.splits.test}}};
}

inline void from_json(const nlohmann::json& j, ForecastConfig& c) {
  ForecastConfig d;
  c.history = j.value("history", d.history);
  c.horizon = j.value("horizon", d.horizon);
  c.token_dim = j.value("token_dim", d.token_dim);
  c.geo_dim = j.value("geo_dim", d.geo_dim);
  c.hidden = j.value("hidden", d.hidden);
  c.lr = j.value("lr", d.lr);
  c.epochs = j.value("epochs", d.epochs);
  c.batch = j.value("batch", d.batch);
  c.seed = j.value("seed", d.seed);
  c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
  c.revin_eps = j.value("revin_eps", d.revin_eps);
  c.preserve_width = j.value("preserve_width", d.preserve_width);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  if (j.contains("splits")) {
    const auto s = j.at("splits").get<std::vector<double>>();
    if (s.size() != 3) fail(Errc::InvalidArgument, "splits must have three ratios");
    c.splits = {s[0], s[1], s[2]};
  }
}

// ---------------------------------------------------------------------------
// Building blocks

struct RevinResult {
  Eigen::VectorXd normalized;
  double mu = 0.0;
  double sigma = 1.0;
};

inline RevinResult revin_normalize(const Eigen::VectorXd& window, double epsilon) {
  if (window.size() < 1) fail(Errc::InvalidArgument, "RevIN needs a non-empty window");
  RevinResult r;
  r.mu = window.mean();
  const double var = (window.array() - r.mu).square().mean();
  r.sigma = std::sqrt(var + epsilon);
  r.normalized = (window.array() - r.mu) / r.sigma;
  return r;
}

inline Eigen::VectorXd revin_denormalize(const Eigen::VectorXd& values, double mu, double sigma) {
  if (!(sigma > 0.0)) fail(Errc::InvalidArgument, "sigma must be positive");
  return (values.array() * sigma + mu).matrix();
}

template <typename Derived>
auto leaky_relu(const Eigen::ArrayBase<Derived>& x, double slope) {
  return (x > 0.0).select(x, x * slope);
}

template <typename Derived>
auto leaky_relu_grad(const Eigen::ArrayBase<Derived>& x, double slope) {
  using Array = Eigen::Array<double, Derived::RowsAtCompileTime, Derived::ColsAtCompileTime>;
  return (x > 0.0).select(Array::Ones(x.rows(), x.cols()), Array::Constant(x.rows(), x.cols(), slope));
}

struct AdapterParams {
  Eigen::MatrixXd w1;  // d_s x M
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // d_s x d_s
  Eigen::VectorXd b2;
};

struct ForecasterParams {
  Eigen::MatrixXd embed_w;  // d_t x H
  Eigen::VectorXd embed_b;
  Eigen::MatrixXd enc_w;    // hidden x (d_t + d_s)
  Eigen::VectorXd enc_b;
  Eigen::MatrixXd dec_w;    // F x hidden
  Eigen::VectorXd dec_b;
};

/// Learnable per-node embeddings; nodes never seen in training use `fallback`.
struct NodeEmbeddingTable {
  std::vector<std::string> node_ids;
  Eigen::MatrixXd table;     // d_s x N
  Eigen::VectorXd fallback;  // column mean of `table`

  void refresh_fallback() {
    fallback = table.cols() ? Eigen::VectorXd(table.rowwise().mean()) : Eigen::VectorXd::Zero(table.rows());
  }
};

// Adapter on a batch of embeddings laid out as columns.
inline Eigen::MatrixXd adapter_forward(const Eigen::MatrixXd& z, const AdapterParams& p, double slope) {
  if (z.rows() != p.w1.cols()) fail(Errc::DimMismatch, "adapter expects inputs of width " + std::to_string(p.w1.cols()));
  if (p.w2.cols() != p.w1.rows() || p.b1.size() != p.w1.rows() || p.b2.size() != p.w2.rows())
    fail(Errc::DimMismatch, "adapter parameter shapes are inconsistent");
  const Eigen::MatrixXd a1 = (p.w1 * z).colwise() + p.b1;
  const Eigen::MatrixXd h1 = leaky_relu(a1.array(), slope).matrix();
  return (p.w2 * h1).colwise() + p.b2;
}

inline Eigen::VectorXd adapter_forward(const Eigen::VectorXd& z, const AdapterParams& p, double slope) {
  return adapter_forward(Eigen::MatrixXd(z), p, slope).col(0);
}

inline Eigen::VectorXd forecaster_forward(const Eigen::VectorXd& window, const Eigen::VectorXd& z_prime,
                                          const ForecasterParams& p, const ForecastConfig& config) {
  if (window.size() != p.embed_w.cols()) fail(Errc::DimMismatch, "window length does not match H");
  if (p.enc_w.cols() != p.embed_w.rows() + z_prime.size())
    fail(Errc::DimMismatch, "encoder width is not d_t + d_s");
  if (p.dec_w.cols() != p.enc_w.rows()) fail(Errc::DimMismatch, "decoder width does not match hidden size");
  const auto rv = revin_normalize(window, config.revin_eps);
  Eigen::VectorXd s_prime(p.enc_w.cols());
  s_prime.head(p.embed_w.rows()) = p.embed_w * rv.normalized + p.embed_b;
  s_prime.tail(z_prime.size()) = z_prime;
  const Eigen::VectorXd h = leaky_relu((p.enc_w * s_prime + p.enc_b).array(), config.leaky_slope).matrix();
  const Eigen::VectorXd out = p.dec_w * h + p.dec_b;
  return revin_denormalize(out, rv.mu, rv.sigma);
}

// ---------------------------------------------------------------------------
// Model

enum class Conditioning { Plain, Geovec, NodeTable };

inline std::string to_string(Conditioning c) {
  switch (c) {
    case Conditioning::Plain: return "plain";
    case Conditioning::Geovec: return "geovec";
    case Conditioning::NodeTable: return "node_table";
  }
  return "plain";
}

inline Conditioning parse_conditioning(const std::string& s) {
  if (s == "plain") return Conditioning::Plain;
  if (s == "geovec") return Conditioning::Geovec;
  if (s == "node_table") return Conditioning::NodeTable;
  fail(Errc::InvalidArgument, "unknown conditioning '" + s + "'");
}

struct Model {
  ForecastConfig config;
  Conditioning mode = Conditioning::Plain;
  ForecasterParams net;
  AdapterParams adapter;       // empty unless mode == Geovec
  NodeEmbeddingTable table;    // empty unless mode == NodeTable
  std::string rep_provider;    // provider id of the representation used in training

  Eigen::Index token_dim() const { return net.embed_w.rows(); }
  Eigen::Index geo_dim() const { return net.enc_w.cols() - net.embed_w.rows(); }
  Eigen::Index rep_dim() const { return adapter.w1.cols(); }
};

// Visits every parameter block as a flat span in a fixed order.
template <typename ModelT, typename Fn>
void for_each_param(ModelT& m, Fn&& fn) {
  auto visit = [&](const char* name, auto& block) {
    fn(name, std::span(block.data(), static_cast<std::size_t>(block.size())));
  };
  visit("embed_w", m.net.embed_w);
  visit("embed_b", m.net.embed_b);
  visit("enc_w", m.net.enc_w);
  visit("enc_b", m.net.enc_b);
  visit("dec_w", m.net.dec_w);
  visit("dec_b", m.net.dec_b);
  visit("adapter_w1", m.adapter.w1);
  visit("adapter_b1", m.adapter.b1);
  visit("adapter_w2", m.adapter.w2);
  visit("adapter_b2", m.adapter.b2);
  visit("node_table", m.table.table);
}

inline std::size_t param_count(const Model& m) {
  std::size_t n = 0;
  for_each_param(m, [&](const char*, std::span<const double> p) { n += p.size(); });
  return n;
}

inline std::uint64_t param_hash(const Model& m) {
  std::uint64_t h = kFnvOffset;
  for_each_param(m, [&](const char*, std::span<const double> p) {
    h = fnv1a64(std::span(reinterpret_cast<const unsigned char*>(p.data()), p.size_bytes()), h);
  });
  if (m.mode == Conditioning::NodeTable)
    h = fnv1a64(std::span(reinterpret_cast<const unsigned char*>(m.table.fallback.data()),
                          static_cast<std::size_t>(m.table.fallback.size()) * sizeof(double)),
                h);
  return h;
}

inline Model zeros_like(const Model& m) {
  Model z = m;
  for_each_param(z, [](const char*, std::span<double> p) { std::fill(p.begin(), p.end(), 0.0); });
  z.table.fallback.setZero();
  return z;
}

namespace detail {

inline void xavier(Eigen::MatrixXd& w, Eigen::Index rows, Eigen::Index cols, SplitMix64& rng) {
  w.resize(rows, cols);
  const double bound = rows + cols > 0 ? std::sqrt(6.0 / static_cast<double>(rows + cols)) : 0.0;
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) w(i, j) = rng.uniform(-bound, bound);
}

}  // namespace detail

/// Fresh parameters: Xavier-uniform weights, zero biases. `rep_dim` is M for
/// the geovec adapter; `table_ids` lists the nodes of a learnable table.
inline Model init_model(const ForecastConfig& config, Conditioning mode, Eigen::Index rep_dim = 0,
                        const std::vector<std::string>& table_ids = {}) {
  config.validate();
  Model m;
  m.config = config;
  m.mode = mode;
  const Eigen::Index ds = mode == Conditioning::Plain ? 0 : config.geo_dim;
  const Eigen::Index dt = config.preserve_width ? config.token_dim - ds : config.token_dim;
  if (dt < 1) fail(Errc::InvalidArgument, "preserve_width leaves no room for the token embedding");

  SplitMix64 net_rng(derive_seed(config.seed, "init-net"));
  detail::xavier(m.net.embed_w, dt, config.history, net_rng);
  m.net.embed_b = Eigen::VectorXd::Zero(dt);
  detail::xavier(m.net.enc_w, config.hidden, dt + ds, net_rng);
  m.net.enc_b = Eigen::VectorXd::Zero(config.hidden);
  detail::xavier(m.net.dec_w, config.horizon, config.hidden, net_rng);
  m.net.dec_b = Eigen::VectorXd::Zero(config.horizon);

  if (mode == Conditioning::Geovec) {
    if (rep_dim < 1) fail(Errc::InvalidArgument, "geovec conditioning needs a representation");
    SplitMix64 rng(derive_seed(config.seed, "init-adapter"));
    detail::xavier(m.adapter.w1, ds, rep_dim, rng);
    m.adapter.b1 = Eigen::VectorXd::Zero(ds);
    detail::xavier(m.adapter.w2, ds, ds, rng);
    m.adapter.b2 = Eigen::VectorXd::Zero(ds);
  } else {
    m.adapter.w1.resize(0, 0);
    m.adapter.w2.resize(0, 0);
    m.adapter.b1.resize(0);
    m.adapter.b2.resize(0);
  }
  if (mode == Conditioning::NodeTable) {
    if (table_ids.empty()) fail(Errc::InvalidArgument, "node table needs node ids");
    SplitMix64 rng(derive_seed(config.seed, "init-table"));
    m.table.node_ids = table_ids;
    detail::xavier(m.table.table, ds, static_cast<Eigen::Index>(table_ids.size()), rng);
    m.table.refresh_fallback();
  } else {
    m.table.table.resize(0, 0);
    m.table.fallback.resize(0);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Node conditioning

/// Per-dataset view of what each node contributes to the concatenation:
/// representation columns (geovec) or table slots (node table).
struct NodeContext {
  Eigen::MatrixXd rep;              // M x N, geovec only
  std::vector<Eigen::Index> slot;   // table column per node, -1 for fallback
};

inline NodeContext make_context(const Model& m, const std::vector<std::string>& node_ids,
                                const GeoRepresentation* rep) {
  NodeContext ctx;
  const auto n = static_cast<Eigen::Index>(node_ids.size());
  if (m.mode == Conditioning::Geovec) {
    if (!rep) fail(Errc::Misalignment, "geovec model needs a representation for its nodes");
    if (static_cast<Eigen::Index>(rep->dim) != m.rep_dim())
      fail(Errc::DimMismatch, "representation dim " + std::to_string(rep->dim) + " does not match adapter input " +
                                  std::to_string(m.rep_dim()));
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < rep->size(); ++i) index.emplace(rep->node_ids[i], i);
    ctx.rep.resize(rep->dim, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto it = index.find(node_ids[static_cast<std::size_t>(i)]);
      if (it == index.end())
        fail(Errc::Misalignment, "representation has no embedding for node '" + node_ids[static_cast<std::size_t>(i)] + "'");
      const auto col = rep->column(it->second);
      for (std::uint32_t r = 0; r < rep->dim; ++r) ctx.rep(r, i) = col[r];
    }
  } else if (m.mode == Conditioning::NodeTable) {
    std::unordered_map<std::string, Eigen::Index> index;
    for (std::size_t i = 0; i < m.table.node_ids.size(); ++i)
      index.emplace(m.table.node_ids[i], static_cast<Eigen::Index>(i));
    for (const auto& id : node_ids) {
      auto it = index.find(id);
      ctx.slot.push_back(it == index.end() ? -1 : it->second);
    }
  }
  return ctx;
}

struct AdapterCache {
  Eigen::MatrixXd a1, h1;
};

// z' for every node of the context, d_s x N.
inline Eigen::MatrixXd node_features(const Model& m, const NodeContext& ctx, AdapterCache* cache = nullptr) {
  switch (m.mode) {
    case Conditioning::Plain: return Eigen::MatrixXd(0, 0);
    case Conditioning::Geovec: {
      Eigen::MatrixXd a1 = (m.adapter.w1 * ctx.rep).colwise() + m.adapter.b1;
      Eigen::MatrixXd h1 = leaky_relu(a1.array(), m.config.leaky_slope).matrix();
      Eigen::MatrixXd out = (m.adapter.w2 * h1).colwise() + m.adapter.b2;
      if (cache) {
        cache->a1 = std::move(a1);
        cache->h1 = std::move(h1);
      }
      return out;
    }
    case Conditioning::NodeTable: {
      Eigen::MatrixXd out(m.table.table.rows(), static_cast<Eigen::Index>(ctx.slot.size()));
      for (std::size_t i = 0; i < ctx.slot.size(); ++i)
        out.col(static_cast<Eigen::Index>(i)) = ctx.slot[i] >= 0 ? Eigen::VectorXd(m.table.table.col(ctx.slot[i])) : m.table.fallback;
      return out;
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Batched forward / backward

/// Columns are windows. `node` indexes the NodeContext node list.
struct Batch {
  Eigen::MatrixXd inputs;   // H x B
  Eigen::MatrixXd targets;  // F x B
  std::vector<Eigen::Index> node;
};

struct WindowRef {
  Eigen::Index node;
  Eigen::Index start;
};

inline std::vector<WindowRef> enumerate_windows(const io::TimeSeriesDataset& ds, const ForecastConfig& c) {
  const auto w = c.window();
  if (ds.length() < w)
    fail(Errc::TooShort, "split of length " + std::to_string(ds.length()) + " is shorter than H + F = " + std::to_string(w));
  std::vector<WindowRef> out;
  out.reserve(static_cast<std::size_t>((ds.length() - w + 1) * ds.nodes()));
  for (Eigen::Index s = 0; s + w <= ds.length(); ++s)
    for (Eigen::Index i = 0; i < ds.nodes(); ++i) out.push_back({i, s});
  return out;
}

inline Batch make_batch(const io::TimeSeriesDataset& ds, const ForecastConfig& c, std::span<const WindowRef> refs) {
  Batch b;
  const auto n = static_cast<Eigen::Index>(refs.size());
  b.inputs.resize(c.history, n);
  b.targets.resize(c.horizon, n);
  b.node.resize(refs.size());
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& r = refs[static_cast<std::size_t>(k)];
    b.inputs.col(k) = ds.values.col(r.node).segment(r.start, c.history);
    b.targets.col(k) = ds.values.col(r.node).segment(r.start + c.history, c.horizon);
    b.node[static_cast<std::size_t>(k)] = r.node;
  }
  return b;
}

struct Forward {
  Eigen::RowVectorXd mu, sigma;
  Eigen::MatrixXd normalized;  // H x B
  Eigen::MatrixXd s_prime;     // (d_t + d_s) x B
  Eigen::MatrixXd pre;         // hidden x B
  Eigen::MatrixXd hidden;      // hidden x B
  Eigen::MatrixXd output;      // F x B, denormalized
};

inline Forward forward_batch(const Model& m, const Batch& b, const Eigen::MatrixXd& zp_nodes) {
  const auto& c = m.config;
  const auto& p = m.net;
  Forward f;
  f.mu = b.inputs.colwise().mean();
  f.sigma = ((b.inputs.rowwise() - f.mu).array().square().colwise().mean() + c.revin_eps).sqrt().matrix();
  f.normalized = ((b.inputs.rowwise() - f.mu).array().rowwise() / f.sigma.array()).matrix();
  const auto dt = p.embed_w.rows();
  const auto ds = zp_nodes.rows();
  f.s_prime.resize(dt + ds, b.inputs.cols());
  f.s_prime.topRows(dt) = (p.embed_w * f.normalized).colwise() + p.embed_b;
  for (Eigen::Index k = 0; k < b.inputs.cols() && ds > 0; ++k)
    f.s_prime.col(k).tail(ds) = zp_nodes.col(b.node[static_cast<std::size_t>(k)]);
  f.pre = (p.enc_w * f.s_prime).colwise() + p.enc_b;
  f.hidden = leaky_relu(f.pre.array(), c.leaky_slope).matrix();
  const Eigen::MatrixXd out = (p.dec_w * f.hidden).colwise() + p.dec_b;
  f.output = ((out.array().rowwise() * f.sigma.array()).rowwise() + f.mu.array()).matrix();
  return f;
}

/// Mean squared error over the batch (times `loss_scale`); when `grad` is
/// given, its parameters receive the analytic gradient of that loss.
inline double loss_and_grad(const Model& m, const NodeContext& ctx, const Batch& b, Model* grad,
                            double loss_scale = 1.0) {
  AdapterCache cache;
  const Eigen::MatrixXd zp = node_features(m, ctx, &cache);
  const auto f = forward_batch(m, b, zp);
  const Eigen::MatrixXd err = f.output - b.targets;
  const double count = static_cast<double>(err.size());
  const double loss = loss_scale * err.squaredNorm() / count;
  if (!grad) return loss;

  const auto& p = m.net;
  auto& g = *grad;
  const double slope = m.config.leaky_slope;
  const Eigen::MatrixXd d_out = ((err * (2.0 * loss_scale / count)).array().rowwise() * f.sigma.array()).matrix();
  g.net.dec_w += d_out * f.hidden.transpose();
  g.net.dec_b += d_out.rowwise().sum();
  const Eigen::MatrixXd d_pre = ((p.dec_w.transpose() * d_out).array() * leaky_relu_grad(f.pre.array(), slope)).matrix();
  g.net.enc_w += d_pre * f.s_prime.transpose();
  g.net.enc_b += d_pre.rowwise().sum();
  const Eigen::MatrixXd d_sp = p.enc_w.transpose() * d_pre;
  const auto dt = p.embed_w.rows();
  const auto ds = zp.rows();
  g.net.embed_w += d_sp.topRows(dt) * f.normalized.transpose();
  g.net.embed_b += d_sp.topRows(dt).rowwise().sum();

  if (m.mode == Conditioning::Plain || ds == 0) return loss;
  Eigen::MatrixXd d_zp = Eigen::MatrixXd::Zero(ds, zp.cols());
  for (Eigen::Index k = 0; k < b.inputs.cols(); ++k) d_zp.col(b.node[static_cast<std::size_t>(k)]) += d_sp.col(k).tail(ds);

  if (m.mode == Conditioning::Geovec) {
    g.adapter.w2 += d_zp * cache.h1.transpose();
    g.adapter.b2 += d_zp.rowwise().sum();
    const Eigen::MatrixXd d_a1 =
        ((m.adapter.w2.transpose() * d_zp).array() * leaky_relu_grad(cache.a1.array(), slope)).matrix();
    g.adapter.w1 += d_a1 * ctx.rep.transpose();
    g.adapter.b1 += d_a1.rowwise().sum();
  } else {
    for (std::size_t i = 0; i < ctx.slot.size(); ++i)
      if (ctx.slot[i] >= 0) g.table.table.col(ctx.slot[i]) += d_zp.col(static_cast<Eigen::Index>(i));
  }
  return loss;
}

/// Largest |analytic - central difference| / max(1, |analytic|, |fd|) over
/// every parameter, with step h.
inline double grad_check(const Model& model, const NodeContext& ctx, const Batch& batch, double h = 1e-4) {
  Model grad = zeros_like(model);
  loss_and_grad(model, ctx, batch, &grad);
  Model probe = model;
  std::vector<std::span<double>> params, grads;
  for_each_param(probe, [&](const char*, std::span<double> p) { params.push_back(p); });
  for_each_param(grad, [&](const char*, std::span<double> p) { grads.push_back(p); });
  double worst = 0.0;
  for (std::size_t blk = 0; blk < params.size(); ++blk) {
    for (std::size_t i = 0; i < params[blk].size(); ++i) {
      double& w = params[blk][i];
      const double saved = w;
      w = saved + h;
      if (probe.mode == Conditioning::NodeTable) probe.table.refresh_fallback();
      const double up = loss_and_grad(probe, ctx, batch, nullptr);
      w = saved - h;
      if (probe.mode == Conditioning::NodeTable) probe.table.refresh_fallback();
      const double down = loss_and_grad(probe, ctx, batch, nullptr);
      w = saved;
      const double fd = (up - down) / (2.0 * h);
      const double ga = grads[blk][i];
      worst = std::max(worst, std::abs(ga - fd) / std::max({1.0, std::abs(ga), std::abs(fd)}));
    }
  }
  if (probe.mode == Conditioning::NodeTable) probe.table.refresh_fallback();
  return worst;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adaptive-moment optimizer over the flattened parameter list.
class Adam {
 public:
  Adam(const Model& m, const ForecastConfig& c)
      : lr_(c.lr), b1_(c.beta1), b2_(c.beta2), eps_(c.adam_eps), m_(param_count(m), 0.0), v_(param_count(m), 0.0) {}

  void step(Model& model, const Model& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    std::vector<std::span<const double>> grads;
    for_each_param(grad, [&](const char*, std::span<const double> g) { grads.push_back(g); });
    std::size_t offset = 0, blk = 0;
    for_each_param(model, [&](const char*, std::span<double> p) {
      const auto g = grads[blk++];
      for (std::size_t i = 0; i < p.size(); ++i, ++offset) {
        m_[offset] = b1_ * m_[offset] + (1.0 - b1_) * g[i];
        v_[offset] = b2_ * v_[offset] + (1.0 - b2_) * g[i] * g[i];
        p[i] -= lr_ * (m_[offset] / c1) / (std::sqrt(v_[offset] / c2) + eps_);
      }
    });
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

struct ForecastMetrics {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t windows = 0;
};

inline constexpr std::size_t kEvalBatch = 2048;

// MSE / MAE in original units over every window, node and horizon step.
// Windows are reduced in a fixed order, so the result is deterministic.
inline ForecastMetrics evaluate_forecaster(const Model& m, const io::TimeSeriesDataset& split,
                                           const GeoRepresentation* rep = nullptr) {
  const auto refs = enumerate_windows(split, m.config);
  const auto ctx = make_context(m, split.node_ids, rep);
  const Eigen::MatrixXd zp = node_features(m, ctx);
  double sq = 0.0, ab = 0.0;
  for (std::size_t pos = 0; pos < refs.size(); pos += kEvalBatch) {
    const auto n = std::min(kEvalBatch, refs.size() - pos);
    const auto b = make_batch(split, m.config, std::span(refs).subspan(pos, n));
    const auto f = forward_batch(m, b, zp);
    const Eigen::ArrayXXd e = f.output - b.targets;
    sq += e.square().sum();
    ab += e.abs().sum();
  }
  const double count = static_cast<double>(refs.size()) * m.config.horizon;
  return {sq / count, ab / count, refs.size()};
}

inline ForecastMetrics evaluate_forecaster(const Model& m, const io::TimeSeriesDataset& split,
                                           const std::optional<GeoRepresentation>& rep) {
  return evaluate_forecaster(m, split, rep ? &*rep : nullptr);
}

/// Frozen evaluation on another region's test split, using that region's own
/// embeddings (or the table fallback for node-table models).
inline ForecastMetrics zero_shot_eval(const Model& m, const io::TimeSeriesDataset& target_ds,
                                      const GeoRepresentation* target_rep) {
  const auto splits = io::chronological_split(target_ds, m.config.splits, m.config.window());
  return evaluate_forecaster(m, splits.test, target_rep);
}

// ---------------------------------------------------------------------------
// Training

struct EpochLoss {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct TrainResult {
  Model model;  // parameters from the epoch with the lowest validation MSE
  std::vector<EpochLoss> history;
  int best_epoch = 0;
};

inline TrainResult train_model(const io::TimeSeriesDataset& ds, Conditioning mode, const GeoRepresentation* rep,
                               const ForecastConfig& config) {
  config.validate();
  const auto splits = io::chronological_split(ds, config.splits, config.window());
  Model model = init_model(config, mode, rep ? static_cast<Eigen::Index>(rep->dim) : 0, ds.node_ids);
  if (rep && mode == Conditioning::Geovec) model.rep_provider = rep->provider_id;
  const auto ctx = make_context(model, ds.node_ids, rep);

  auto refs = enumerate_windows(splits.train, config);
  SplitMix64 shuffle(derive_seed(config.seed, "shuffle"));
  Adam adam(model, config);
  Model grad = zeros_like(model);

  TrainResult result{model, {}, 0};
  double best_val = std::numeric_limits<double>::infinity();
  const auto batch = static_cast<std::size_t>(config.batch);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = refs.size() - 1; i > 0; --i) std::swap(refs[i], refs[shuffle.below(i + 1)]);
    double weighted = 0.0;
    for (std::size_t pos = 0; pos < refs.size(); pos += batch) {
      const auto n = std::min(batch, refs.size() - pos);
      const auto b = make_batch(splits.train, config, std::span(refs).subspan(pos, n));
      grad = zeros_like(model);
      const double loss = loss_and_grad(model, ctx, b, &grad);
      if (!std::isfinite(loss))
        fail(Errc::NonFiniteLoss, "loss became " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                                      ", batch starting at window " + std::to_string(pos) + " (lr " +
                                      std::to_string(config.lr) + ")");
      adam.step(model, grad);
      weighted += loss * static_cast<double>(n);
    }
    if (mode == Conditioning::NodeTable) model.table.refresh_fallback();
    const double val = evaluate_forecaster(model, splits.val, rep).mse;
    if (!std::isfinite(val)) fail(Errc::NonFiniteLoss, "validation loss is not finite at epoch " + std::to_string(epoch));
    result.history.push_back({epoch, weighted / static_cast<double>(refs.size()), val});
    if (val < best_val) {
      best_val = val;
      result.model = model;
      result.best_epoch = epoch;
    }
  }
  return result;
}

/// Trains the forecaster, jointly with the adapter when `rep` is given.
inline TrainResult train_forecaster(const io::TimeSeriesDataset& ds, const GeoRepresentation* rep,
                                    const ForecastConfig& config) {
  return train_model(ds, rep ? Conditioning::Geovec : Conditioning::Plain, rep, config);
}

inline TrainResult train_forecaster(const io::TimeSeriesDataset& ds, const std::optional<GeoRepresentation>& rep,
                                    const ForecastConfig& config) {
  return train_forecaster(ds, rep ? &*rep : nullptr, config);
}

/// Learnable-embedding baseline: z' is a per-node table column trained jointly.
inline TrainResult train_with_node_table(const io::TimeSeriesDataset& ds, const ForecastConfig& config) {
  return train_model(ds, Conditioning::NodeTable, nullptr, config);
}

/// Optional spatial pre-smoothing: X <- (1 - beta) X + beta X A_rn^T with the
/// row-normalized inverse-distance adjacency.
inline io::TimeSeriesDataset presmooth(const io::TimeSeriesDataset& ds, const AdjacencyMatrix& adj, double beta) {
  if (static_cast<Eigen::Index>(adj.n) != ds.nodes()) fail(Errc::DimMismatch, "adjacency size does not match nodes");
  Eigen::MatrixXd a = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      adj.weights.data(), static_cast<Eigen::Index>(adj.n), static_cast<Eigen::Index>(adj.n));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double s = a.row(i).sum();
    if (s > 0.0) a.row(i) /= s;
  }
  auto out = ds;
  out.values = (1.0 - beta) * ds.values + beta * ds.values * a.transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

inline void write_loss_history_csv(std::ostream& out, const std::vector<EpochLoss>& history) {
  out << "epoch,train_mse,val_mse\n" << std::setprecision(17);
  for (const auto& e : history) out << e.epoch << ',' << e.train_mse << ',' << e.val_mse << '\n';
}

// Checkpoint: one line of JSON (config, mode, shapes, node ids) followed by
// the parameters as raw little-endian f64 in for_each_param order.
inline void save_checkpoint(const std::filesystem::path& path, const Model& m) {
  nlohmann::json shapes = nlohmann::json::object();
  auto shape_of = [](const auto& blk) { return std::vector<Eigen::Index>{blk.rows(), blk.cols()}; };
  shapes["embed_w"] = shape_of(m.net.embed_w);
  shapes["embed_b"] = shape_of(m.net.embed_b);
  shapes["enc_w"] = shape_of(m.net.enc_w);
  shapes["enc_b"] = shape_of(m.net.enc_b);
  shapes["dec_w"] = shape_of(m.net.dec_w);
  shapes["dec_b"] = shape_of(m.net.dec_b);
  shapes["adapter_w1"] = shape_of(m.adapter.w1);
  shapes["adapter_b1"] = shape_of(m.adapter.b1);
  shapes["adapter_w2"] = shape_of(m.adapter.w2);
  shapes["adapter_b2"] = shape_of(m.adapter.b2);
  shapes["node_table"] = shape_of(m.table.table);
  const nlohmann::json header{{"format", "geovec-forecaster"},
                              {"version", 1},
                              {"config", m.config},
                              {"seed", m.config.seed},
                              {"mode", to_string(m.mode)},
                              {"rep_provider", m.rep_provider},
                              {"table_node_ids", m.table.node_ids},
                              {"shapes", shapes},
                              {"param_count", param_count(m)}};
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::Io, "cannot write checkpoint " + path.string());
    out << header.dump() << '\n';
    for_each_param(m, [&](const char*, std::span<const double> p) {
      out.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size_bytes()));
    });
    if (!out) fail(Errc::Io, "write failed for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::Io, "cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(Errc::TruncatedFile, "checkpoint has no header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ParseError, std::string("checkpoint header: ") + e.what());
  }
  if (header.value("format", std::string{}) != "geovec-forecaster") fail(Errc::BadMagic, "not a forecaster checkpoint");
  if (header.value("version", 0) != 1) fail(Errc::VersionMismatch, "unsupported checkpoint version");
  Model m;
  m.config = header.at("config").get<ForecastConfig>();
  m.mode = parse_conditioning(header.at("mode").get<std::string>());
  m.rep_provider = header.value("rep_provider", std::string{});
  m.table.node_ids = header.at("table_node_ids").get<std::vector<std::string>>();
  const auto& shapes = header.at("shapes");
  auto shape = [&](const char* name, auto& blk) {
    const auto s = shapes.at(name).get<std::vector<Eigen::Index>>();
    if constexpr (std::remove_reference_t<decltype(blk)>::ColsAtCompileTime == 1)
      blk.resize(s.at(0));
    else
      blk.resize(s.at(0), s.at(1));
  };
  shape("embed_w", m.net.embed_w);
  shape("embed_b", m.net.embed_b);
  shape("enc_w", m.net.enc_w);
  shape("enc_b", m.net.enc_b);
  shape("dec_w", m.net.dec_w);
  shape("dec_b", m.net.dec_b);
  shape("adapter_w1", m.adapter.w1);
  shape("adapter_b1", m.adapter.b1);
  shape("adapter_w2", m.adapter.w2);
  shape("adapter_b2", m.adapter.b2);
  shape("node_table", m.table.table);
  for_each_param(m, [&](const char* name, std::span<double> p) {
    in.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(p.size_bytes()));
    if (!in) fail(Errc::TruncatedFile, std::string("checkpoint ends inside ") + name);
  });
  if (in.peek() != std::char_traits<char>::eof()) fail(Errc::TruncatedFile, "checkpoint has trailing bytes");
  if (m.mode == Conditioning::NodeTable) m.table.refresh_fallback();
  return m;
}

}  // namespace geovec::forecast
