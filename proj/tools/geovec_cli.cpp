#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "geovec/geovec.hpp"
#include "geovec/httplib_transport.hpp"
#include "geovec/run_config.hpp"

using namespace geovec;
using nlohmann::json;

namespace {

enum class Family { Prompt, Embed, Gp, Forecast, Other };

int exit_code(Family family, Errc code) {
  if (code == Errc::ProviderUnavailable) return 3;
  if (family == Family::Embed && (code == Errc::EmptyTokenMatrix || code == Errc::DimMismatch)) return 3;
  if (family == Family::Gp &&
      (code == Errc::Misalignment || code == Errc::NodeMismatch || code == Errc::OverlapDetected))
    return 4;
  if (family == Family::Forecast &&
      (code == Errc::TooShort || code == Errc::Misalignment || code == Errc::NonFiniteLoss ||
       code == Errc::DimMismatch || code == Errc::NodeMismatch))
    return 5;
  return 2;
}

std::string config_path_from(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--config") == 0 && i + 1 < argc) return argv[i + 1];
    if (std::strncmp(argv[i], "--config=", 9) == 0) return argv[i] + 9;
  }
  return {};
}

std::shared_ptr<HttpTransport> live_transport() { return std::make_shared<HttplibTransport>(); }

std::shared_ptr<osm::OsmClient> make_osm_client(const RunConfig& cfg) {
  osm::ClientConfig cc;
  cc.apply_env();
  cc.source = cfg.offline ? osm::Source::Fixture : osm::Source::Live;
  auto fixtures = std::make_shared<osm::FixtureStore>();
  for (const auto& f : cfg.fixtures) fixtures->merge(osm::FixtureStore::load(f).to_json());
  std::shared_ptr<osm::ResponseCache> cache;
  if (!cfg.cache_dir.empty()) cache = std::make_shared<osm::ResponseCache>(cfg.cache_dir);
  return std::make_shared<osm::OsmClient>(cc, cache, fixtures, cfg.offline ? nullptr : live_transport());
}

// Prompt for one coordinate, fetching only the sections the variant needs.
class PromptFactory {
 public:
  PromptFactory(const RunConfig& cfg, PromptVariant variant) : cfg_(cfg), variant_(variant) {
    if (variant_.needs_address()) client_ = make_osm_client(cfg);
  }

  Prompt operator()(const Coordinate& c) {
    std::optional<osm::GeocodeResult> geocode;
    std::optional<std::vector<osm::PlaceOfInterest>> places;
    if (variant_.needs_address()) {
      std::lock_guard lock(mu_);
      geocode = client_->reverse_geocode(c);
      if (variant_.needs_places())
        places = client_->nearby_places(c, cfg_.radius_km, static_cast<std::size_t>(variant_.k()));
    }
    std::optional<std::span<const osm::PlaceOfInterest>> view;
    if (places) view = std::span<const osm::PlaceOfInterest>(*places);
    return build_prompt(variant_, c, geocode, view);
  }

 private:
  const RunConfig& cfg_;
  PromptVariant variant_;
  std::shared_ptr<osm::OsmClient> client_;
  std::mutex mu_;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::Io, "cannot write " + path);
  out << text;
}

// ---------------------------------------------------------------------------

void cmd_prompt(const RunConfig& cfg, const std::string& node, std::optional<double> lat, std::optional<double> lon) {
  std::optional<Coordinate> coord;
  if (!node.empty()) {
    cfg.require_path(cfg.nodes, "nodes");
    const auto nodes = io::load_nodes_csv(cfg.nodes);
    const auto idx = nodes.index_of(node);
    if (!idx) fail(Errc::InvalidArgument, "unknown node id '" + node + "'");
    coord = nodes.coord(*idx);
  } else if (lat && lon) {
    coord = Coordinate(*lon, *lat);
  } else {
    fail(Errc::InvalidArgument, "give --node or both --lat and --lon");
  }
  PromptFactory factory(cfg, PromptVariant::parse(cfg.variant));
  std::cout << factory(*coord).text << std::flush;
}

void cmd_embed(const RunConfig& cfg) {
  cfg.require_path(cfg.nodes, "nodes");
  if (cfg.store.empty()) fail(Errc::InvalidArgument, "missing store path");
  const auto provider = make_provider(cfg, live_transport());
  const auto nodes = io::load_nodes_csv(cfg.nodes);
  const auto variant = PromptVariant::parse(cfg.variant);
  PromptFactory factory(cfg, variant);
  const auto rep = build_geovec(
      nodes, *provider, variant, [&](std::size_t, const std::string&, const Coordinate& c) { return factory(c); },
      cfg.parallelism);
  save_store(rep, cfg.store);
  std::cout << "N=" << rep.size() << " M=" << rep.dim << " provider=" << rep.provider_id << "\n";
}

GeoRepresentation load_gp_rep(const RunConfig& cfg, const std::string& concat) {
  cfg.require_path(cfg.store, "store");
  auto rep = load_store(cfg.store);
  if (concat.empty()) return rep;
  auto other = load_store(concat);
  return concat_representations(std::vector<GeoRepresentation>{std::move(rep), std::move(other)});
}

std::vector<std::string> read_ids(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::Io, "cannot open id list " + path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = io::detail::trim(line);
    if (!t.empty() && t != "id") ids.emplace_back(t);
  }
  return ids;
}

void cmd_gp(const RunConfig& cfg, const std::string& mode, const std::string& concat, const std::string& report,
            const std::string& train_ids, const std::string& test_ids, double test_fraction) {
  cfg.require_path(cfg.attributes, "attributes");
  const auto rep = load_gp_rep(cfg, concat);
  const auto attr = io::load_attributes_csv(cfg.attributes);
  json out;
  if (mode == "cv") {
    const auto r = kfold_cv(rep, attr, cfg.folds, cfg.alpha, cfg.gp_seed());
    out = r.to_json();
    out["provider"] = rep.provider_id;
    std::cout << "mean R2 " << std::setprecision(6) << r.mean_r2 << " over " << r.folds << " folds\n";
  } else {
    std::vector<std::string> train, test;
    if (!train_ids.empty() || !test_ids.empty()) {
      train = read_ids(train_ids);
      test = read_ids(test_ids);
    } else {
      if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail(Errc::InvalidArgument, "test fraction must be in (0, 1)");
      std::vector<std::size_t> order(rep.size());
      std::iota(order.begin(), order.end(), 0);
      SplitMix64 rng(derive_seed(cfg.seed, "holdout-split"));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(order.size())));
      for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_test ? test : train).push_back(rep.node_ids[order[i]]);
    }
    const auto m = holdout_eval(rep, attr, train, test, cfg.alpha);
    out = {{"mae", m.mae}, {"rmse", m.rmse}, {"r2", m.r2}, {"train", train.size()}, {"test", test.size()},
           {"alpha", cfg.alpha}, {"provider", rep.provider_id}};
    std::cout << "holdout R2 " << std::setprecision(6) << m.r2 << "\n";
  }
  if (!report.empty()) write_text(report, out.dump(2) + "\n");
}

std::optional<GeoRepresentation> optional_store(const RunConfig& cfg) {
  if (cfg.store.empty()) return std::nullopt;
  cfg.require_path(cfg.store, "store");
  return load_store(cfg.store);
}

double read_metrics_mse(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::Io, "cannot open metrics file " + path);
  std::string header, row;
  if (!std::getline(in, header) || !std::getline(in, row)) fail(Errc::ParseError, path + ": empty metrics file");
  const auto h = io::detail::split_csv(header);
  const auto r = io::detail::split_csv(row);
  for (std::size_t i = 0; i < h.size() && i < r.size(); ++i)
    if (h[i] == "mse")
      if (auto v = io::detail::parse_double(r[i])) return *v;
  fail(Errc::ParseError, path + ": no mse column");
}

void emit_metrics(const forecast::ForecastMetrics& m, const std::string& split, const std::string& path,
                  const std::string& compare) {
  std::ostringstream csv;
  csv << std::setprecision(17);
  std::optional<double> imp;
  if (!compare.empty()) {
    const double base = read_metrics_mse(compare);
    imp = 100.0 * (base - m.mse) / base;
  }
  csv << "split,mse,mae,windows" << (imp ? ",imp_percent" : "") << "\n";
  csv << split << ',' << m.mse << ',' << m.mae << ',' << m.windows;
  if (imp) csv << ',' << *imp;
  csv << "\n";
  if (!path.empty()) write_text(path, csv.str());
  std::cout << std::setprecision(6) << split << " MSE " << m.mse << " MAE " << m.mae << "\n";
  if (imp) std::cout << "IMP " << std::fixed << std::setprecision(2) << *imp << "%\n";
}

void cmd_forecast_train(const RunConfig& cfg, const std::string& mode_name, const std::string& checkpoint,
                        const std::string& loss_history) {
  cfg.require_path(cfg.timeseries, "timeseries");
  if (checkpoint.empty()) fail(Errc::InvalidArgument, "missing --checkpoint");
  const auto ds = io::load_timeseries_csv(cfg.timeseries);
  const auto rep = optional_store(cfg);
  auto fc = cfg.forecast;
  fc.seed = cfg.forecast_seed();
  auto mode = mode_name.empty() ? (rep ? forecast::Conditioning::Geovec : forecast::Conditioning::Plain)
                                : forecast::parse_conditioning(mode_name);
  if (mode == forecast::Conditioning::Geovec && !rep) fail(Errc::Misalignment, "geovec mode needs --store");
  const auto result = forecast::train_model(ds, mode, mode == forecast::Conditioning::Geovec ? &*rep : nullptr, fc);
  forecast::save_checkpoint(checkpoint, result.model);
  if (!loss_history.empty()) {
    std::ostringstream csv;
    forecast::write_loss_history_csv(csv, result.history);
    write_text(loss_history, csv.str());
  }
  std::cout << "mode " << forecast::to_string(mode) << " best epoch " << result.best_epoch << " val MSE "
            << std::setprecision(6) << result.history.at(static_cast<std::size_t>(result.best_epoch - 1)).val_mse
            << " params " << to_hex(forecast::param_hash(result.model)) << "\n";
}

void cmd_forecast_eval(const RunConfig& cfg, bool zeroshot, const std::string& checkpoint, const std::string& split,
                       const std::string& metrics_path, const std::string& compare) {
  cfg.require_path(cfg.timeseries, "timeseries");
  cfg.require_path(checkpoint, "checkpoint");
  const auto model = forecast::load_checkpoint(checkpoint);
  const auto ds = io::load_timeseries_csv(cfg.timeseries);
  const auto rep = optional_store(cfg);
  if (model.mode == forecast::Conditioning::Geovec && !rep)
    fail(Errc::Misalignment, "geovec checkpoint needs --store with embeddings for these nodes");
  const GeoRepresentation* rp = model.mode == forecast::Conditioning::Geovec ? &*rep : nullptr;
  forecast::ForecastMetrics m;
  if (zeroshot) {
    m = forecast::zero_shot_eval(model, ds, rp);
  } else {
    const auto s = io::chronological_split(ds, model.config.splits, model.config.window());
    const auto& part = split == "train" ? s.train : split == "val" ? s.val : s.test;
    if (split != "train" && split != "val" && split != "test") fail(Errc::InvalidArgument, "split must be train, val or test");
    m = forecast::evaluate_forecaster(model, part, rp);
  }
  emit_metrics(m, zeroshot ? "zeroshot" : split, metrics_path, compare);
}

void cmd_adjacency(const RunConfig& cfg, const std::string& out_path, double min_dist) {
  cfg.require_path(cfg.nodes, "nodes");
  const auto nodes = io::load_nodes_csv(cfg.nodes);
  const auto a = build_adjacency(nodes, min_dist);
  std::ostringstream csv;
  csv << std::setprecision(17) << "id";
  for (const auto& id : nodes.ids()) csv << ',' << id;
  csv << "\n";
  for (std::size_t i = 0; i < a.n; ++i) {
    csv << nodes.id(i);
    for (std::size_t j = 0; j < a.n; ++j) csv << ',' << a(i, j);
    csv << "\n";
  }
  if (out_path.empty())
    std::cout << csv.str();
  else
    write_text(out_path, csv.str());
}

void cmd_sample_raster(const RunConfig& cfg, const std::string& grid, const std::string& out_path,
                       std::optional<double> lat, std::optional<double> lon) {
  cfg.require_path(grid, "grid");
  const auto g = io::read_ascii_grid(grid);
  if (lat && lon) {
    std::cout << std::setprecision(17) << io::sample_raster(g, Coordinate(*lon, *lat)) << "\n";
    return;
  }
  cfg.require_path(cfg.nodes, "nodes");
  const auto nodes = io::load_nodes_csv(cfg.nodes);
  AttributeVector attr;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    attr.node_ids.push_back(nodes.id(i));
    attr.values.push_back(io::sample_raster(g, nodes.coord(i)));
  }
  if (out_path.empty()) fail(Errc::InvalidArgument, "missing --out");
  io::write_attributes_csv(out_path, attr);
  std::cout << "sampled " << attr.values.size() << " nodes\n";
}

void cmd_synth(const std::string& kind, std::uint64_t seed, std::size_t n, const std::string& nodes_out,
               const std::string& values_out, bool transfer) {
  if (kind == "gp") {
    const auto d = synth::gp_dataset(n, seed);
    io::write_nodes_csv(nodes_out, d.nodes);
    io::write_attributes_csv(values_out, d.attribute);
  } else if (kind == "geo-signal") {
    synth::GeoSignalOptions o;
    const auto d = synth::geo_signal(transfer ? synth::transfer_region(o) : o, seed);
    io::write_nodes_csv(nodes_out, d.nodes);
    io::write_timeseries_csv(values_out, d.series);
  } else {
    fail(Errc::InvalidArgument, "synth kind must be gp or geo-signal");
  }
  std::cout << "wrote " << nodes_out << " and " << values_out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  try {
    if (const auto path = config_path_from(argc, argv); !path.empty()) cfg = load_run_config(path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"Geolocation embeddings: prompts, representations, prediction and forecasting"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_file;
  app.add_option("--config", config_file, "JSON run config; flags override its values");

  ProviderConfig prov = cfg.provider.value_or(ProviderConfig{});
  bool live = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--nodes", cfg.nodes, "nodes CSV (id,lon,lat)");
    sub->add_option("--attributes", cfg.attributes, "attribute CSV (id,value)");
    sub->add_option("--timeseries", cfg.timeseries, "time series CSV");
    sub->add_option("--store", cfg.store, "embedding store path");
    sub->add_option("--cache-dir", cfg.cache_dir, "response cache directory");
    sub->add_option("--fixtures", cfg.fixtures, "fixture files")->expected(1, -1);
    sub->add_option("--variant", cfg.variant, "prompt variant");
    sub->add_option("--radius-km", cfg.radius_km, "nearby-place search radius");
    sub->add_option("--seed", cfg.seed, "run seed");
    sub->add_flag("--live", live, "query live services instead of fixtures");
  };
  auto add_provider = [&](CLI::App* sub) {
    sub->add_option("--provider", prov.kind, "mock | rff | remote");
    sub->add_option("--dim", prov.dim, "embedding dimension");
    sub->add_option("--lengthscale", prov.lengthscale_deg, "RFF lengthscale in degrees");
    sub->add_option("--provider-url", prov.url, "model server base URL");
    sub->add_option("--model", prov.model, "model name for the remote provider");
    sub->add_option("--parallelism", cfg.parallelism, "embedding threads");
  };
  auto add_forecast = [&](CLI::App* sub) {
    sub->add_option("--history", cfg.forecast.history, "H");
    sub->add_option("--horizon", cfg.forecast.horizon, "F");
    sub->add_option("--token-dim", cfg.forecast.token_dim, "d_t");
    sub->add_option("--geo-dim", cfg.forecast.geo_dim, "d_s");
    sub->add_option("--hidden", cfg.forecast.hidden, "hidden width");
    sub->add_option("--lr", cfg.forecast.lr, "learning rate");
    sub->add_option("--epochs", cfg.forecast.epochs, "epochs");
    sub->add_option("--batch", cfg.forecast.batch, "batch size");
    sub->add_flag("--preserve-width", cfg.forecast.preserve_width, "shrink d_t by d_s");
  };

  Family family = Family::Other;
  std::function<void()> run;

  auto* prompt = app.add_subcommand("prompt", "print the prompt for a node or coordinate");
  add_common(prompt);
  std::string node_id;
  std::optional<double> lat, lon;
  prompt->add_option("--node", node_id, "node id from --nodes");
  prompt->add_option("--lat", lat, "latitude");
  prompt->add_option("--lon", lon, "longitude");
  prompt->callback([&] {
    family = Family::Prompt;
    run = [&] { cmd_prompt(cfg, node_id, lat, lon); };
  });

  auto* embed = app.add_subcommand("embed", "embed every node and write a store");
  add_common(embed);
  add_provider(embed);
  embed->callback([&] {
    family = Family::Embed;
    run = [&] { cmd_embed(cfg); };
  });

  auto* gp = app.add_subcommand("gp", "ridge regression from representations to an attribute");
  add_common(gp);
  std::string gp_mode, concat, report, train_ids, test_ids;
  double test_fraction = 0.2;
  gp->add_option("mode", gp_mode, "cv | holdout")->required()->check(CLI::IsMember({"cv", "holdout"}));
  gp->add_option("--concat", concat, "second store to concatenate");
  gp->add_option("--report", report, "JSON report path");
  gp->add_option("--alpha", cfg.alpha, "ridge penalty");
  gp->add_option("--folds", cfg.folds, "cross-validation folds");
  gp->add_option("--train-ids", train_ids, "file of training ids (holdout)");
  gp->add_option("--test-ids", test_ids, "file of test ids (holdout)");
  gp->add_option("--test-fraction", test_fraction, "random holdout fraction");
  gp->callback([&] {
    family = Family::Gp;
    run = [&] { cmd_gp(cfg, gp_mode, concat, report, train_ids, test_ids, test_fraction); };
  });

  auto* fc = app.add_subcommand("forecast", "train and evaluate the forecaster");
  fc->require_subcommand(1);
  std::string checkpoint, loss_history, mode_name, split = "test", metrics_out, compare;
  auto* train = fc->add_subcommand("train", "train a model");
  add_common(train);
  add_forecast(train);
  train->add_option("--mode", mode_name, "plain | geovec | node_table");
  train->add_option("--checkpoint", checkpoint, "checkpoint output")->required();
  train->add_option("--loss-history", loss_history, "per-epoch loss CSV");
  train->callback([&] {
    family = Family::Forecast;
    run = [&] { cmd_forecast_train(cfg, mode_name, checkpoint, loss_history); };
  });
  for (const char* name : {"eval", "zeroshot"}) {
    auto* sub = fc->add_subcommand(name, std::strcmp(name, "eval") == 0 ? "evaluate on a split" : "frozen transfer to another region");
    add_common(sub);
    sub->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    sub->add_option("--metrics", metrics_out, "metrics CSV output");
    sub->add_option("--compare", compare, "baseline metrics CSV; prints IMP");
    if (std::strcmp(name, "eval") == 0) sub->add_option("--split", split, "train | val | test");
    const bool zs = std::strcmp(name, "zeroshot") == 0;
    sub->callback([&, zs] {
      family = Family::Forecast;
      run = [&, zs] { cmd_forecast_eval(cfg, zs, checkpoint, split, metrics_out, compare); };
    });
  }

  auto* adj = app.add_subcommand("adjacency", "inverse-distance adjacency as CSV");
  add_common(adj);
  std::string out_path;
  double min_dist = kDefaultMinDistKm;
  adj->add_option("--out", out_path, "CSV output (stdout if omitted)");
  adj->add_option("--min-dist-km", min_dist, "distance clamp");
  adj->callback([&] { run = [&] { cmd_adjacency(cfg, out_path, min_dist); }; });

  auto* raster = app.add_subcommand("sample-raster", "sample an ASCII grid at node locations");
  add_common(raster);
  std::string grid;
  raster->add_option("--grid", grid, "ASCII grid file")->required();
  raster->add_option("--out", out_path, "attribute CSV output");
  raster->add_option("--lat", lat, "single latitude");
  raster->add_option("--lon", lon, "single longitude");
  raster->callback([&] { run = [&] { cmd_sample_raster(cfg, grid, out_path, lat, lon); }; });

  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
  std::string kind, nodes_out, values_out;
  std::size_t synth_n = 2000;
  bool transfer = false;
  synth_cmd->add_option("kind", kind, "gp | geo-signal")->required();
  synth_cmd->add_option("--n", synth_n, "node count (gp)");
  synth_cmd->add_option("--seed", cfg.seed, "seed");
  synth_cmd->add_option("--nodes-out", nodes_out, "nodes CSV")->required();
  synth_cmd->add_option("--values-out", values_out, "attribute or time series CSV")->required();
  synth_cmd->add_flag("--transfer", transfer, "the shifted transfer region (geo-signal)");
  synth_cmd->callback([&] { run = [&] { cmd_synth(kind, cfg.seed, synth_n, nodes_out, values_out, transfer); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (live) cfg.offline = false;
    if (!prov.kind.empty()) cfg.provider = prov;
    cfg.validate_paths();
    run();
    return 0;
  } catch (const Error& e) {
    std::cerr << "error [" << errc_name(e.code()) << "]: " << e.what() << "\n";
    return exit_code(family, e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
