// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "geovec/geovec.hpp"
#include "oracles.hpp"

using namespace geovec;

namespace {

struct Outcome {
  bool ok = true;
  std::ostringstream detail;

  void check(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << " [failed: " << what << "]";
    }
  }
};

template <typename F>
bool raises(F&& f, Errc code) {
  try {
    f();
  } catch (const Error& e) {
    return e.code() == code;
  }
  return false;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Eigen::MatrixXd randn(Eigen::Index r, Eigen::Index c, SplitMix64& rng) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

GeoRepresentation random_rep(std::size_t n, std::uint32_t dim, SplitMix64& rng) {
  GeoRepresentation r;
  for (std::size_t i = 0; i < n; ++i) r.node_ids.push_back("n" + std::to_string(i));
  r.dim = dim;
  r.provider_id = "random";
  r.variant = "instruction-only";
  r.prompt_hash = to_hex(rng.next());
  for (std::size_t i = 0; i < n * dim; ++i) r.matrix.push_back(static_cast<float>(rng.normal()));
  return r;
}

// 1
void geodesy(Outcome& o) {
  SplitMix64 rng(1);
  bool exact = true;
  for (int i = 0; i < 1000; ++i) {
    const Coordinate a(rng.uniform(-180, 180), rng.uniform(-90, 90)), b(rng.uniform(-180, 180), rng.uniform(-90, 90));
    exact = exact && haversine_km(a, a) == 0.0 && haversine_km(a, b) == haversine_km(b, a);
  }
  o.check(exact, "identity/symmetry");
  const double anti = haversine_km(Coordinate(0, 0), Coordinate(180, 0));
  o.check(std::abs(anti - 20015.115) <= 1e-3, "antipodal");
  const double pl = haversine_km(Coordinate(2.3522, 48.8566), Coordinate(-0.1278, 51.5074));
  const double ref = oracle::distance_km(48.8566, 2.3522, 51.5074, -0.1278);
  o.check(std::abs(pl - ref) <= 0.5, "Paris-London");
  o.detail << "antipodal " << std::setprecision(10) << anti << " km, Paris-London " << pl << " vs " << ref;
}

// 2
void ridge(Outcome& o) {
  SplitMix64 rng(2);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Eigen::MatrixXd x = randn(100, 10, rng);
    Eigen::VectorXd y = x * randn(10, 1, rng);
    for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += 0.3 * rng.normal();
    const auto s = standardize_fit(x);
    const auto m = ridge_fit(s.xz, y, 1.0);
    std::vector<std::vector<double>> rows(100, std::vector<double>(10));
    for (int i = 0; i < 100; ++i)
      for (int j = 0; j < 10; ++j) rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = s.xz(i, j);
    const auto [w, b] = oracle::ridge_gd(rows, std::vector<double>(y.data(), y.data() + y.size()), 1.0, 4000);
    double se = 0.0;
    for (int j = 0; j < 10; ++j) se += std::pow(m.weights[j] - w[static_cast<std::size_t>(j)], 2);
    worst = std::max(worst, std::sqrt(se / 10.0));
  }
  o.check(worst < 1e-6, "coefficient RMSE");
  o.detail << "worst coefficient RMSE " << worst;
}

// 3
void metric_checks(Outcome& o) {
  const std::vector<double> y{3.0, -1.0, 4.5, 2.0, 7.25};
  const auto perfect = metrics(y, y);
  o.check(perfect.mae == 0.0 && perfect.rmse == 0.0 && perfect.r2 == 1.0, "perfect");
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  o.check(metrics(y, std::vector<double>(y.size(), mean)).r2 == 0.0, "mean predictor");
  const auto h = metrics(std::vector<double>{1, 2, 3, 4, 5}, std::vector<double>{1.1, 1.9, 3.2, 3.8, 5.0});
  o.check(std::abs(h.mae - 0.12) < 1e-9 && std::abs(h.rmse - std::sqrt(0.02)) < 1e-9 && std::abs(h.r2 - 0.99) < 1e-9,
          "hand case");
  o.detail << "hand case MAE " << h.mae << " RMSE " << h.rmse << " R2 " << h.r2;
}

// 4
void synthetic_gp(Outcome& o) {
  const auto data = synth::gp_dataset(2000, 1);
  RffProvider rff(256, 4, 10.0);
  const auto rep = synth::embed_nodes(data.nodes, rff, 4);
  const double r2 = kfold_cv(rep, data.attribute).mean_r2;
  o.check(r2 >= 0.9, "CV R2");
  const auto lon = synth::half_signal_representation(data.nodes, synth::Half::Longitude, 128, 5, 10.0);
  const auto lat = synth::half_signal_representation(data.nodes, synth::Half::Latitude, 128, 6, 10.0);
  const double r_lon = kfold_cv(lon, data.attribute).mean_r2, r_lat = kfold_cv(lat, data.attribute).mean_r2;
  const double r_both = kfold_cv(concat_representations(std::vector<GeoRepresentation>{lon, lat}), data.attribute).mean_r2;
  o.check(r_both >= std::max(r_lon, r_lat) - 0.02, "concatenation");
  o.detail << "CV R2 " << r2 << "; halves " << r_lon << " / " << r_lat << ", concatenated " << r_both;
}

// 5
std::string random_word(SplitMix64& rng) {
  static const char* words[] = {"Cafe", "Park", "Main", "St.", "Museum", "Lake", "North", "Hall"};
  std::string w;
  const auto n = 1 + rng.below(3);
  for (std::uint64_t i = 0; i < n; ++i) w += std::string(i ? " " : "") + words[rng.below(8)];
  return w;
}

void prompts(Outcome& o) {
  using namespace osm;
  const Coordinate nyc(-73.9857, 40.7484);
  auto fixtures = std::make_shared<FixtureStore>(FixtureStore::load(test_data("fixtures_nyc.json")));
  OsmClient client(ClientConfig{}, nullptr, fixtures);
  const auto g = client.reverse_geocode(nyc);
  const auto places = client.nearby_places(nyc, 100.0, 10);
  const std::span<const PlaceOfInterest> view(places);
  o.check(build_prompt(PromptVariant::instruction_only(), nyc, std::nullopt, std::nullopt).text ==
              slurp(test_data("golden_instruction_only.txt")),
          "instruction-only golden");
  o.check(build_prompt(PromptVariant::instruction_address(), nyc, g, std::nullopt).text ==
              slurp(test_data("golden_instruction_address.txt")),
          "address golden");
  o.check(build_prompt(PromptVariant::top_k(10), nyc, g, view).text ==
              slurp(test_data("golden_instruction_address_top10.txt")),
          "top10 golden");

  SplitMix64 rng(5);
  int held = 0;
  for (int t = 0; t < 100; ++t) {
    const Coordinate c(rng.uniform(-180, 180), rng.uniform(-85, 85));
    std::vector<std::pair<std::string, std::string>> comps;
    for (std::uint64_t i = 0, n = 1 + rng.below(4); i < n; ++i) comps.emplace_back("k" + std::to_string(i), random_word(rng));
    const auto geo = GeocodeResult::from_components(comps);
    std::vector<RawElement> raw;
    for (std::uint64_t i = 0, n = rng.below(15); i < n; ++i)
      raw.push_back({random_word(rng) + " " + std::to_string(i),
                     Coordinate(std::clamp(c.lon() + rng.uniform(-0.5, 0.5), -180.0, 180.0),
                                std::clamp(c.lat() + rng.uniform(-0.5, 0.5), -90.0, 90.0)),
                     PlaceKind::Poi});
    const auto ranked = rank_places(c, raw, 100.0, 10);
    const std::span<const PlaceOfInterest> v(ranked);
    const std::string seq[] = {build_prompt(PromptVariant::instruction_only(), c, geo, v).text,
                               build_prompt(PromptVariant::instruction_address(), c, geo, v).text,
                               build_prompt(PromptVariant::top_k(1), c, geo, v).text,
                               build_prompt(PromptVariant::top_k(5), c, geo, v).text,
                               build_prompt(PromptVariant::top_k(10), c, geo, v).text};
    bool ok = true;
    for (int i = 0; i + 1 < 5; ++i) ok = ok && seq[i + 1].rfind(seq[i], 0) == 0;
    held += ok;
  }
  o.check(held == 100, "prefix property");
  o.detail << "3 goldens byte-equal, prefix property " << held << "/100";
}

// 6
void store(Outcome& o) {
  SplitMix64 rng(6);
  const auto dir = std::filesystem::temp_directory_path() / "geovec_acceptance_store";
  std::filesystem::create_directories(dir);
  int same = 0;
  for (int i = 0; i < 100; ++i) {
    const auto rep = random_rep(1 + rng.below(40), static_cast<std::uint32_t>(1 + rng.below(64)), rng);
    save_store(rep, dir / "r.gvec");
    same += load_store(dir / "r.gvec") == rep;
  }
  o.check(same == 100, "round trip");
  const auto bytes = encode_store(random_rep(5, 8, rng));
  auto magic = bytes;
  magic[0] = 'X';
  auto flipped = bytes;
  flipped[bytes.size() - 12] ^= 0x5a;
  o.check(raises([&] { decode_store(magic); }, Errc::BadMagic), "bad magic");
  o.check(raises([&] { decode_store(bytes.substr(0, bytes.size() - 3)); }, Errc::TruncatedFile), "truncation");
  o.check(raises([&] { decode_store(flipped); }, Errc::ChecksumMismatch), "checksum");
  std::filesystem::remove_all(dir);
  o.detail << same << "/100 round trips; magic, truncation and checksum errors raised";
}

// 7
void forecaster_numerics(Outcome& o) {
  using namespace forecast;
  SplitMix64 rng(7);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    ForecastConfig c;
    c.history = 2 + static_cast<int>(rng.below(8));
    c.horizon = 1 + static_cast<int>(rng.below(5));
    c.token_dim = 1 + static_cast<int>(rng.below(6));
    c.geo_dim = static_cast<int>(rng.below(5));
    c.hidden = 1 + static_cast<int>(rng.below(8));
    c.seed = rng.next();
    const auto mode = static_cast<Conditioning>(t % 3);
    const auto ds = synth::pure_noise(2 + rng.below(4), c.window() + 6, rng.next());
    auto rep = random_rep(0, 4, rng);
    rep.node_ids = ds.node_ids;
    for (std::size_t i = 0; i < ds.node_ids.size() * 4; ++i) rep.matrix.push_back(static_cast<float>(rng.normal()));
    auto model = init_model(c, mode, 4, ds.node_ids);
    for_each_param(model, [&](const char*, std::span<double> p) {
      for (auto& v : p) v += 0.1 * rng.normal();
    });
    if (mode == Conditioning::NodeTable) model.table.refresh_fallback();
    auto refs = enumerate_windows(ds, c);
    refs.resize(std::min<std::size_t>(refs.size(), 9));
    worst = std::max(worst, grad_check(model, make_context(model, ds.node_ids, &rep), make_batch(ds, c, refs)));
  }
  o.check(worst < 1e-4, "gradient check");

  double revin = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Eigen::VectorXd w = (randn(16, 1, rng) * rng.uniform(0.1, 50.0)).array() + rng.uniform(-100, 100);
    const auto r = revin_normalize(w, 1e-5);
    revin = std::max(revin, (revin_denormalize(r.normalized, r.mu, r.sigma) - w).cwiseAbs().maxCoeff());
  }
  o.check(revin < 1e-9, "RevIN round trip");

  ForecastConfig c;
  c.history = 8;
  c.horizon = 4;
  c.token_dim = 8;
  c.geo_dim = 4;
  c.hidden = 16;
  c.epochs = 3;
  c.seed = 12;
  const auto data = synth::geo_signal({.cols = 4, .rows = 2, .length = 240}, 3);
  RffProvider provider(16, 1, 2.0);
  const auto rep = synth::embed_nodes(data.nodes, provider);
  const auto a = train_forecaster(data.series, &rep, c), b = train_forecaster(data.series, &rep, c);
  bool same = param_hash(a.model) == param_hash(b.model) && a.history.size() == b.history.size();
  for (std::size_t i = 0; same && i < a.history.size(); ++i)
    same = a.history[i].train_mse == b.history[i].train_mse && a.history[i].val_mse == b.history[i].val_mse;
  o.check(same, "seed determinism");
  o.detail << "grad check worst " << worst << ", RevIN round trip " << revin << ", reruns bitwise "
           << (same ? "identical" : "different");
}

// 8 and 9 share one benchmark.
struct Benchmark {
  synth::GeoSignalDataset src = synth::geo_signal({}, 7);
  synth::GeoSignalDataset tgt = synth::geo_signal(synth::transfer_region({}), 7);
  GeoRepresentation rep, trep;
  forecast::ForecastConfig config;
  forecast::TrainResult plain, geo, table;
  double seconds = 0.0;

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
    config.seed = 1;
    const auto t0 = std::chrono::steady_clock::now();
    plain = forecast::train_forecaster(src.series, nullptr, config);
    geo = forecast::train_forecaster(src.series, &rep, config);
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    table = forecast::train_with_node_table(src.series, config);
  }
};

const Benchmark& bench() {
  static const Benchmark b;
  return b;
}

void enhancement(Outcome& o) {
  const auto& b = bench();
  const auto test = io::chronological_split(b.src.series, b.config.splits, b.config.window()).test;
  const double plain = forecast::evaluate_forecaster(b.plain.model, test).mse;
  const double geo = forecast::evaluate_forecaster(b.geo.model, test, &b.rep).mse;
  o.check(geo <= 0.8 * plain, "IMP >= 20%");
  o.check(b.seconds <= 300.0, "runtime");
  o.detail << "plain MSE " << plain << ", geovec MSE " << geo << ", IMP " << std::fixed << std::setprecision(2)
           << 100.0 * (plain - geo) / plain << "%, training " << std::setprecision(1) << b.seconds << " s";
}

void zero_shot(Outcome& o) {
  const auto& b = bench();
  const auto hg = forecast::param_hash(b.geo.model), ht = forecast::param_hash(b.table.model);
  const double geo = forecast::zero_shot_eval(b.geo.model, b.tgt.series, &b.trep).mse;
  const double table = forecast::zero_shot_eval(b.table.model, b.tgt.series, nullptr).mse;
  o.check(geo < table, "geovec below node table");
  o.check(forecast::param_hash(b.geo.model) == hg && forecast::param_hash(b.table.model) == ht, "parameters frozen");
  o.detail << "zero-shot MSE geovec " << geo << ", node table " << table << ", parameter hashes unchanged";
}

// 10
void adjacency(Outcome& o) {
  SplitMix64 rng(10);
  std::vector<std::string> ids;
  std::vector<Coordinate> coords;
  for (int i = 0; i < 30; ++i) {
    ids.push_back("a" + std::to_string(i));
    coords.emplace_back(rng.uniform(-180, 180), rng.uniform(-80, 80));
  }
  ids.push_back("dup");
  coords.push_back(coords[3]);
  const NodeSet nodes(ids, coords);
  const auto a = build_adjacency(nodes);
  double worst = 0.0;
  bool sym = true;
  for (std::size_t i = 0; i < a.n; ++i) {
    sym = sym && a(i, i) == 0.0;
    for (std::size_t j = 0; j < a.n; ++j) {
      sym = sym && a(i, j) == a(j, i);
      if (i == j) continue;
      const auto &p = coords[i], &q = coords[j];
      const double d = std::max(oracle::distance_km(p.lat(), p.lon(), q.lat(), q.lon()), kDefaultMinDistKm);
      worst = std::max(worst, std::abs(a(i, j) - 1.0 / d));
    }
  }
  o.check(worst <= 1e-12, "oracle");
  o.check(sym, "symmetry/diagonal");
  o.check(a(3, 30) == 1.0 / kDefaultMinDistKm, "coincident clamp");
  o.detail << "max deviation " << worst << ", coincident weight " << a(3, 30);
}

// 11
void raster(Outcome& o) {
  io::RasterGrid g;
  g.ncols = 20;
  g.nrows = 15;
  g.xllcorner = -10;
  g.yllcorner = 30;
  g.cellsize = 0.5;
  g.values = Eigen::MatrixXd::Constant(15, 20, 4.25);
  SplitMix64 rng(11);
  bool uniform = true;
  for (int i = 0; i < 200; ++i) uniform = uniform && io::sample_raster(g, Coordinate(rng.uniform(-10, 0), rng.uniform(30, 37.5))) == 4.25;
  o.check(uniform, "uniform identity");
  for (Eigen::Index r = 0; r < g.nrows; ++r)
    for (Eigen::Index c = 0; c < g.ncols; ++c) g.values(r, c) = (r + c) % 2 ? 1.0 : -1.0;
  double worst = 0.0;
  for (int i = 0; i < 500; ++i) {
    const double lon = rng.uniform(-10, 0), lat = rng.uniform(30, 37.5);
    worst = std::max(worst, std::abs(io::sample_raster(g, Coordinate(lon, lat)) -
                                     oracle::raster_knn(g.values, g.xllcorner, g.yllcorner, g.cellsize, g.nodata, lon, lat)));
  }
  o.check(worst <= 1e-12, "checkerboard");
  o.detail << "uniform grid exact, checkerboard max deviation " << worst;
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<void(Outcome&)>> criteria[] = {
      {"geodesy", geodesy},
      {"ridge closed form vs gradient descent", ridge},
      {"regression metrics", metric_checks},
      {"synthetic geographic prediction", synthetic_gp},
      {"prompt determinism", prompts},
      {"embedding store", store},
      {"forecaster numerics", forecaster_numerics},
      {"geovec enhancement", enhancement},
      {"zero-shot transfer", zero_shot},
      {"adjacency", adjacency},
      {"raster sampling", raster},
  };
  int failed = 0, n = 0;
  for (const auto& [name, fn] : criteria) {
    ++n;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn(o);
    } catch (const std::exception& e) {
      o.ok = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.ok;
    std::cout << (o.ok ? "PASS" : "FAIL") << " " << n << " " << name << ": " << o.detail.str() << " ("
              << std::fixed << std::setprecision(1) << secs << " s)" << std::defaultfloat << std::endl;
  }
  std::cout << (n - failed) << "/" << n << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
