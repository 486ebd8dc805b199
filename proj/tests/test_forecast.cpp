#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "geovec/forecast.hpp"
#include "geovec/synthetic.hpp"
#include "oracles.hpp"

using namespace geovec;
using namespace geovec::forecast;

namespace {

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return Errc::Io;
}

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, SplitMix64& rng, double scale = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

GeoRepresentation random_rep(const std::vector<std::string>& ids, std::uint32_t dim, SplitMix64& rng) {
  GeoRepresentation r;
  r.node_ids = ids;
  r.dim = dim;
  r.provider_id = "random";
  for (std::size_t i = 0; i < ids.size() * dim; ++i) r.matrix.push_back(static_cast<float>(rng.normal()));
  return r;
}

// Scalar reference for one window; mirrors the math, not the code.
std::vector<double> forward_oracle(const std::vector<double>& window, const std::vector<double>& zp, const Model& m) {
  const double n = static_cast<double>(window.size());
  double mu = 0.0;
  for (double v : window) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : window) var += (v - mu) * (v - mu);
  const double sigma = std::sqrt(var / n + m.config.revin_eps);
  std::vector<double> x;
  for (double v : window) x.push_back((v - mu) / sigma);
  auto s = oracle::affine(m.net.embed_w, m.net.embed_b, x);
  s.insert(s.end(), zp.begin(), zp.end());
  auto h = oracle::affine(m.net.enc_w, m.net.enc_b, s);
  for (auto& v : h) v = oracle::leaky(v, m.config.leaky_slope);
  auto out = oracle::affine(m.net.dec_w, m.net.dec_b, h);
  for (auto& v : out) v = v * sigma + mu;
  return out;
}

ForecastConfig small_config(std::uint64_t seed = 3) {
  ForecastConfig c;
  c.history = 8;
  c.horizon = 4;
  c.token_dim = 6;
  c.geo_dim = 3;
  c.hidden = 10;
  c.epochs = 3;
  c.batch = 32;
  c.seed = seed;
  return c;
}

// The geo-signal benchmark, trained once for every test that needs it.
struct Benchmark {
  synth::GeoSignalDataset src = synth::geo_signal({}, 7);
  synth::GeoSignalDataset tgt = synth::geo_signal(synth::transfer_region({}), 7);
  GeoRepresentation rep, trep;
  ForecastConfig config;
  TrainResult plain, geo, table;
  io::Splits splits;

  Benchmark() {
    RffProvider provider(64, 3, 2.0);
    rep = synth::embed_nodes(src.nodes, provider);
    trep = synth::embed_nodes(tgt.nodes, provider);
    config.history = 8;
    config.horizon = 8;
    config.token_dim = 16;
    config.geo_dim = 8;
    config.hidden = 64;
    config.epochs = 40;
    config.batch = 64;
    config.seed = 1;
    plain = train_forecaster(src.series, nullptr, config);
    geo = train_forecaster(src.series, &rep, config);
    table = train_with_node_table(src.series, config);
    splits = io::chronological_split(src.series, config.splits, config.window());
  }

  static const Benchmark& get() {
    static const Benchmark b;
    return b;
  }
};

}  // namespace

TEST(Revin, HandComputed) {
  const auto r = revin_normalize(Eigen::Vector3d(1, 2, 3), 0.0);
  EXPECT_DOUBLE_EQ(r.mu, 2.0);
  EXPECT_NEAR(r.sigma, std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(r.normalized[0], -1.224744871391589, 1e-12);
  EXPECT_NEAR(r.normalized[1], 0.0, 1e-15);
  EXPECT_NEAR(r.normalized[2], 1.224744871391589, 1e-12);
  const auto c = revin_normalize(Eigen::Vector4d::Constant(5.0), 1e-5);
  EXPECT_EQ(c.normalized, Eigen::Vector4d::Zero());
  EXPECT_NEAR(c.sigma, std::sqrt(1e-5), 1e-18);
  EXPECT_THROW(revin_denormalize(Eigen::Vector2d(1, 2), 0.0, 0.0), Error);
}

TEST(Revin, RoundTrip) {
  SplitMix64 rng(5);
  for (int t = 0; t < 100; ++t) {
    const Eigen::VectorXd w = random_matrix(12, 1, rng, rng.uniform(0.1, 100.0)).array() + rng.uniform(-50, 50);
    const auto r = revin_normalize(w, 1e-5);
    EXPECT_NEAR(r.normalized.mean(), 0.0, 1e-12);
    EXPECT_LT((revin_denormalize(r.normalized, r.mu, r.sigma) - w).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Adapter, ZeroIdentityAndOracle) {
  const Eigen::Index ds = 4;
  AdapterParams p{Eigen::MatrixXd::Zero(ds, 6), Eigen::VectorXd::Zero(ds), Eigen::MatrixXd::Zero(ds, ds),
                  Eigen::VectorXd::Zero(ds)};
  SplitMix64 rng(1);
  const Eigen::VectorXd z = random_matrix(6, 1, rng);
  EXPECT_EQ(adapter_forward(z, p, 0.01), Eigen::VectorXd::Zero(ds));

  AdapterParams id{Eigen::MatrixXd::Identity(ds, ds), Eigen::VectorXd::Zero(ds), Eigen::MatrixXd::Identity(ds, ds),
                   Eigen::VectorXd::Zero(ds)};
  const Eigen::Vector4d v(1.5, -2.0, 0.0, 3.0);
  EXPECT_EQ(adapter_forward(Eigen::VectorXd(v), id, 0.01), Eigen::Vector4d(1.5, -0.02, 0.0, 3.0));

  AdapterParams r{random_matrix(ds, 6, rng), random_matrix(ds, 1, rng), random_matrix(ds, ds, rng),
                  random_matrix(ds, 1, rng)};
  const auto got = adapter_forward(z, r, 0.2);
  auto h = oracle::affine(r.w1, r.b1, std::vector<double>(z.data(), z.data() + z.size()));
  for (auto& x : h) x = oracle::leaky(x, 0.2);
  const auto want = oracle::affine(r.w2, r.b2, h);
  for (Eigen::Index i = 0; i < ds; ++i) EXPECT_NEAR(got[i], want[static_cast<std::size_t>(i)], 1e-12);
  EXPECT_EQ(code_of([&] { adapter_forward(Eigen::VectorXd(Eigen::Vector3d(1, 2, 3)), r, 0.2); }), Errc::DimMismatch);
}

TEST(Forecaster, MatchesScalarOracle) {
  SplitMix64 rng(17);
  for (auto mode : {Conditioning::Plain, Conditioning::Geovec, Conditioning::NodeTable}) {
    auto c = small_config(static_cast<std::uint64_t>(mode) + 1);
    const auto ds = synth::pure_noise(3, 40, 2, 5.0);
    const auto rep = random_rep(ds.node_ids, 5, rng);
    const auto m = init_model(c, mode, 5, ds.node_ids);
    const auto ctx = make_context(m, ds.node_ids, &rep);
    const Eigen::MatrixXd zp = node_features(m, ctx);
    const auto refs = enumerate_windows(ds, c);
    const auto b = make_batch(ds, c, refs);
    const auto f = forward_batch(m, b, zp);
    for (std::size_t k = 0; k < refs.size(); k += 7) {
      const auto kk = static_cast<Eigen::Index>(k);
      std::vector<double> window(b.inputs.col(kk).data(), b.inputs.col(kk).data() + c.history);
      std::vector<double> z;
      if (zp.size()) z.assign(zp.col(refs[k].node).data(), zp.col(refs[k].node).data() + zp.rows());
      const auto want = forward_oracle(window, z, m);
      const Eigen::VectorXd single =
          forecaster_forward(b.inputs.col(kk), zp.size() ? Eigen::VectorXd(zp.col(refs[k].node)) : Eigen::VectorXd(0), m.net, c);
      for (int j = 0; j < c.horizon; ++j) {
        EXPECT_NEAR(f.output(j, kk), want[static_cast<std::size_t>(j)], 1e-10);
        EXPECT_NEAR(single[j], want[static_cast<std::size_t>(j)], 1e-10);
      }
    }
  }
}

TEST(Forecaster, ZeroGeoDimMatchesPlain) {
  auto c = small_config(9);
  c.geo_dim = 0;
  const auto ds = synth::pure_noise(4, 120, 3);
  SplitMix64 rng(2);
  const auto rep = random_rep(ds.node_ids, 6, rng);
  const auto plain = train_forecaster(ds, nullptr, c);
  const auto geo = train_forecaster(ds, &rep, c);
  ASSERT_EQ(plain.history.size(), geo.history.size());
  for (std::size_t i = 0; i < plain.history.size(); ++i) {
    EXPECT_EQ(plain.history[i].train_mse, geo.history[i].train_mse);
    EXPECT_EQ(plain.history[i].val_mse, geo.history[i].val_mse);
  }
  EXPECT_EQ(plain.model.net.enc_w, geo.model.net.enc_w);
  EXPECT_EQ(plain.model.net.dec_b, geo.model.net.dec_b);
}

TEST(Forecaster, ShiftAndScaleEquivariance) {
  auto c = small_config();
  const auto ds = synth::pure_noise(3, 30, 8);
  const auto m = init_model(c, Conditioning::Plain);
  const auto refs = enumerate_windows(ds, c);
  const auto b = make_batch(ds, c, refs);
  const auto base = forward_batch(m, b, Eigen::MatrixXd(0, 0)).output;
  for (double shift : {-1000.0, 3.5, 1e4}) {
    auto moved = b;
    moved.inputs.array() += shift;
    const auto out = forward_batch(m, moved, Eigen::MatrixXd(0, 0)).output;
    EXPECT_LT(((out.array() - shift) - base.array()).abs().maxCoeff(), 1e-9 * std::max(1.0, std::abs(shift)));
  }
  // Scaling is exact only as epsilon vanishes relative to the variance.
  auto scaled = b;
  scaled.inputs *= 1000.0;
  const auto out = forward_batch(m, scaled, Eigen::MatrixXd(0, 0)).output;
  EXPECT_LT((out / 1000.0 - base).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Gradients, CentralDifferenceOnRandomConfigs) {
  SplitMix64 rng(99);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ForecastConfig c;
    c.history = 2 + static_cast<int>(rng.below(8));
    c.horizon = 1 + static_cast<int>(rng.below(5));
    c.token_dim = 1 + static_cast<int>(rng.below(6));
    c.geo_dim = static_cast<int>(rng.below(5));
    c.hidden = 1 + static_cast<int>(rng.below(8));
    c.leaky_slope = rng.uniform(0.0, 0.3);
    c.seed = rng.next();
    const auto mode = static_cast<Conditioning>(trial % 3);
    const auto n = 2 + rng.below(4);
    const auto ds = synth::pure_noise(n, c.window() + 6, rng.next(), rng.uniform(0.5, 3.0));
    const auto m_dim = static_cast<std::uint32_t>(1 + rng.below(6));
    const auto rep = random_rep(ds.node_ids, m_dim, rng);
    auto model = init_model(c, mode, m_dim, ds.node_ids);
    // Perturb biases so they are not all zero.
    for_each_param(model, [&](const char*, std::span<double> p) {
      for (auto& v : p) v += 0.1 * rng.normal();
    });
    if (mode == Conditioning::NodeTable) model.table.refresh_fallback();
    const auto ctx = make_context(model, ds.node_ids, &rep);
    auto refs = enumerate_windows(ds, c);
    refs.resize(std::min<std::size_t>(refs.size(), 9));
    const auto b = make_batch(ds, c, refs);
    const double e = grad_check(model, ctx, b);
    worst = std::max(worst, e);
    EXPECT_LT(e, 1e-4) << "trial " << trial << " mode " << to_string(mode);
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Gradients, ZeroLossBatchHasZeroGradient) {
  auto c = small_config();
  const auto ds = synth::pure_noise(3, 30, 4);
  SplitMix64 rng(3);
  const auto rep = random_rep(ds.node_ids, 4, rng);
  const auto m = init_model(c, Conditioning::Geovec, 4);
  const auto ctx = make_context(m, ds.node_ids, &rep);
  const auto refs = enumerate_windows(ds, c);
  auto b = make_batch(ds, c, refs);
  b.targets = forward_batch(m, b, node_features(m, ctx)).output;
  auto g = zeros_like(m);
  EXPECT_EQ(loss_and_grad(m, ctx, b, &g), 0.0);
  for_each_param(g, [](const char* name, std::span<const double> p) {
    for (double v : p) ASSERT_EQ(v, 0.0) << name;
  });
}

TEST(Gradients, LossScaleIsLinear) {
  auto c = small_config();
  const auto ds = synth::pure_noise(3, 30, 6);
  const auto m = init_model(c, Conditioning::NodeTable, 0, ds.node_ids);
  const auto ctx = make_context(m, ds.node_ids, nullptr);
  const auto refs = enumerate_windows(ds, c);
  const auto b = make_batch(ds, c, refs);
  auto g1 = zeros_like(m), g3 = zeros_like(m);
  const double l1 = loss_and_grad(m, ctx, b, &g1, 1.0);
  const double l3 = loss_and_grad(m, ctx, b, &g3, 3.0);
  EXPECT_NEAR(l3, 3.0 * l1, 1e-12 * l3);
  std::vector<double> a, s;
  for_each_param(g1, [&](const char*, std::span<const double> p) { a.insert(a.end(), p.begin(), p.end()); });
  for_each_param(g3, [&](const char*, std::span<const double> p) { s.insert(s.end(), p.begin(), p.end()); });
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(s[i], 3.0 * a[i], 1e-12 * (1.0 + std::abs(s[i])));
}

TEST(Training, DeterministicForFixedSeed) {
  auto c = small_config(21);
  const auto data = synth::geo_signal({.cols = 3, .rows = 2, .length = 200}, 4);
  RffProvider provider(16, 1, 2.0);
  const auto rep = synth::embed_nodes(data.nodes, provider);
  const auto a = train_forecaster(data.series, &rep, c);
  const auto b = train_forecaster(data.series, &rep, c);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_mse, b.history[i].train_mse);
    EXPECT_EQ(a.history[i].val_mse, b.history[i].val_mse);
  }
  EXPECT_EQ(param_hash(a.model), param_hash(b.model));
  c.seed = 22;
  EXPECT_NE(param_hash(train_forecaster(data.series, &rep, c).model), param_hash(a.model));
}

TEST(Training, BestValidationEpochIsKept) {
  auto c = small_config(5);
  c.epochs = 6;
  const auto ds = synth::pure_noise(4, 300, 12);
  const auto r = train_forecaster(ds, nullptr, c);
  double best = r.history.front().val_mse;
  int best_epoch = 1;
  for (const auto& e : r.history)
    if (e.val_mse < best) best = e.val_mse, best_epoch = e.epoch;
  EXPECT_EQ(r.best_epoch, best_epoch);
  const auto splits = io::chronological_split(ds, c.splits, c.window());
  EXPECT_EQ(evaluate_forecaster(r.model, splits.val).mse, best);
}

TEST(Training, PureNoiseApproachesTheVariance) {
  ForecastConfig c;
  c.history = 32;
  c.horizon = 8;
  c.token_dim = 8;
  c.hidden = 16;
  c.epochs = 15;
  c.batch = 128;
  c.seed = 4;
  const auto ds = synth::pure_noise(8, 1500, 31);
  const auto r = train_forecaster(ds, nullptr, c);
  const double best = r.history[static_cast<std::size_t>(r.best_epoch - 1)].val_mse;
  // Predicting the window mean leaves var * (1 + 1/H); no model can see past it.
  EXPECT_LT(best, 1.1);
  EXPECT_GT(best, 0.9);
}

TEST(Training, ZeroParametersPredictTheWindowMean) {
  ForecastConfig c;
  c.history = 48;
  c.horizon = 12;
  c.geo_dim = 0;
  const auto ds = synth::pure_noise(10, 2000, 77);
  const auto m = zeros_like(init_model(c, Conditioning::Plain));
  const auto splits = io::chronological_split(ds, c.splits, c.window());
  const auto metrics = evaluate_forecaster(m, splits.test);
  EXPECT_NEAR(metrics.mse, 1.0, 0.05);
  EXPECT_EQ(metrics.windows, static_cast<std::size_t>((splits.test.length() - c.window() + 1) * 10));
}

TEST(Training, NonFiniteLossIsReported) {
  auto c = small_config();
  c.lr = 1e300;
  c.epochs = 5;
  const auto ds = synth::pure_noise(3, 200, 1, 1e150);
  EXPECT_EQ(code_of([&] { train_forecaster(ds, nullptr, c); }), Errc::NonFiniteLoss);
}

TEST(Benchmark, GeovecImprovesOverPlain) {
  const auto& b = Benchmark::get();
  const double plain = evaluate_forecaster(b.plain.model, b.splits.test).mse;
  const double geo = evaluate_forecaster(b.geo.model, b.splits.test, &b.rep).mse;
  const double imp = 100.0 * (plain - geo) / plain;
  RecordProperty("imp_percent", std::to_string(imp));
  EXPECT_GE(imp, 20.0) << "plain " << plain << " geovec " << geo;
}

TEST(Benchmark, NodeTableBeatsPlainOnValidation) {
  const auto& b = Benchmark::get();
  const double plain = b.plain.history[static_cast<std::size_t>(b.plain.best_epoch - 1)].val_mse;
  const double table = b.table.history[static_cast<std::size_t>(b.table.best_epoch - 1)].val_mse;
  EXPECT_LE(table, plain);
}

TEST(Benchmark, ZeroShotGeovecBeatsNodeTable) {
  const auto& b = Benchmark::get();
  const auto hash = param_hash(b.geo.model);
  const double geo = zero_shot_eval(b.geo.model, b.tgt.series, &b.trep).mse;
  const double table = zero_shot_eval(b.table.model, b.tgt.series, nullptr).mse;
  EXPECT_LT(geo, table);
  EXPECT_EQ(param_hash(b.geo.model), hash);
}

TEST(Benchmark, ZeroShotOnSourceEqualsTestEvaluation) {
  const auto& b = Benchmark::get();
  EXPECT_EQ(zero_shot_eval(b.geo.model, b.src.series, &b.rep).mse,
            evaluate_forecaster(b.geo.model, b.splits.test, &b.rep).mse);
}

TEST(NodeTable, UnseenNodesUseTheFallback) {
  const auto& b = Benchmark::get();
  const auto& m = b.table.model;
  std::vector<std::string> ids = b.tgt.series.node_ids;
  ids.push_back(b.src.series.node_ids[2]);
  const auto ctx = make_context(m, ids, nullptr);
  const auto zp = node_features(m, ctx);
  const Eigen::VectorXd mean = m.table.table.rowwise().mean();
  for (Eigen::Index i = 0; i + 1 < zp.cols(); ++i) {
    EXPECT_EQ(ctx.slot[static_cast<std::size_t>(i)], -1);
    EXPECT_LT((zp.col(i) - mean).cwiseAbs().maxCoeff(), 1e-15);
  }
  EXPECT_EQ(zp.col(zp.cols() - 1), m.table.table.col(2));
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const auto& b = Benchmark::get();
  const auto dir = scratch_dir("checkpoint");
  for (const auto* r : {&b.plain, &b.geo, &b.table}) {
    const auto path = dir / ("m_" + to_string(r->model.mode) + ".ckpt");
    save_checkpoint(path, r->model);
    const auto back = load_checkpoint(path);
    EXPECT_EQ(param_hash(back), param_hash(r->model));
    EXPECT_EQ(back.mode, r->model.mode);
    EXPECT_EQ(back.config.history, r->model.config.history);
    EXPECT_FALSE(std::filesystem::exists(path.string() + ".partial"));
  }
  const auto path = dir / "m_geovec.ckpt";
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.rep_provider, b.rep.provider_id);
  EXPECT_EQ(evaluate_forecaster(back, b.splits.test, &b.rep).mse,
            evaluate_forecaster(b.geo.model, b.splits.test, &b.rep).mse);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };
  EXPECT_EQ(code_of([&] { load_checkpoint(write("short.ckpt", bytes.substr(0, bytes.size() - 8))); }), Errc::TruncatedFile);
  EXPECT_EQ(code_of([&] { load_checkpoint(write("long.ckpt", bytes + "x")); }), Errc::TruncatedFile);
  auto magic = bytes;
  magic.replace(magic.find("geovec-forecaster"), 6, "other-");
  EXPECT_EQ(code_of([&] { load_checkpoint(write("magic.ckpt", magic)); }), Errc::BadMagic);
  auto version = bytes;
  version.replace(version.find("\"version\":1"), 11, "\"version\":2");
  EXPECT_EQ(code_of([&] { load_checkpoint(write("version.ckpt", version)); }), Errc::VersionMismatch);
}

TEST(Errors, TooShortAndMisalignment) {
  auto c = small_config();
  const auto tiny = synth::pure_noise(2, 20, 1);
  EXPECT_EQ(code_of([&] { train_forecaster(tiny, nullptr, c); }), Errc::TooShort);
  EXPECT_EQ(code_of([&] { enumerate_windows(tiny.slice(0, 5), c); }), Errc::TooShort);

  const auto ds = synth::pure_noise(3, 200, 2);
  SplitMix64 rng(1);
  auto rep = random_rep({ds.node_ids[0], ds.node_ids[1]}, 4, rng);
  EXPECT_EQ(code_of([&] { train_forecaster(ds, &rep, c); }), Errc::Misalignment);
  const auto m = init_model(c, Conditioning::Geovec, 4);
  EXPECT_EQ(code_of([&] { evaluate_forecaster(m, ds, nullptr); }), Errc::Misalignment);
  const auto wide = random_rep(ds.node_ids, 5, rng);
  EXPECT_EQ(code_of([&] { evaluate_forecaster(m, ds, &wide); }), Errc::DimMismatch);
}

TEST(Config, JsonRoundTripAndValidation) {
  auto c = small_config(44);
  c.lr = 3e-4;
  c.splits = {0.6, 0.2, 0.2};
  const nlohmann::json j = c;
  const auto back = j.get<ForecastConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  c.history = 0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_conditioning("node_table"), Conditioning::NodeTable);
  EXPECT_THROW(parse_conditioning("table"), Error);
}

TEST(Presmooth, RowNormalisedAverage) {
  const auto data = synth::geo_signal({.cols = 3, .rows = 1, .length = 10}, 1);
  const auto adj = build_adjacency(data.nodes);
  const auto zero = presmooth(data.series, adj, 0.0);
  EXPECT_EQ(zero.values, data.series.values);
  const auto full = presmooth(data.series, adj, 1.0);
  // The middle node is equidistant from both ends.
  const Eigen::VectorXd mid = 0.5 * (data.series.values.col(0) + data.series.values.col(2));
  EXPECT_LT((full.values.col(1) - mid).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(LossHistory, CsvLayout) {
  std::ostringstream out;
  write_loss_history_csv(out, {{1, 0.5, 0.25}, {2, 0.125, 0.0625}});
  EXPECT_EQ(out.str(), "epoch,train_mse,val_mse\n1,0.5,0.25\n2,0.125,0.0625\n");
}
