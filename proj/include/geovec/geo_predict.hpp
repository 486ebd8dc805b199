#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "geovec/embedding.hpp"
#include "geovec/error.hpp"
#include "geovec/hash.hpp"

namespace geovec {

struct AttributeVector {
  std::vector<std::string> node_ids;
  std::vector<double> values;
  std::string name;
};

// ---------------------------------------------------------------------------
// Standardization

struct Standardization {
  Eigen::MatrixXd xz;                 // K x |kept|
  Eigen::VectorXd means;              // per kept column
  Eigen::VectorXd stds;               // per kept column, > 0
  std::vector<Eigen::Index> kept;     // indices into the input columns
  std::vector<Eigen::Index> dropped;  // constant columns
};

// Population z-score; columns whose spread is zero (to 1e-12 relative) are dropped.
inline Standardization standardize_fit(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) fail(Errc::InvalidArgument, "standardization needs at least two rows");
  Standardization s;
  std::vector<double> means, stds;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).mean();
    const double var = (x.col(j).array() - mean).square().mean();
    const double sd = std::sqrt(var);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      s.dropped.push_back(j);
      continue;
    }
    s.kept.push_back(j);
    means.push_back(mean);
    stds.push_back(sd);
  }
  const auto k = static_cast<Eigen::Index>(s.kept.size());
  s.means = Eigen::Map<Eigen::VectorXd>(means.data(), k);
  s.stds = Eigen::Map<Eigen::VectorXd>(stds.data(), k);
  s.xz.resize(x.rows(), k);
  for (Eigen::Index c = 0; c < k; ++c)
    s.xz.col(c) = (x.col(s.kept[static_cast<std::size_t>(c)]).array() - s.means[c]) / s.stds[c];
  return s;
}

inline Eigen::MatrixXd standardize_apply(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& kept,
                                         const Eigen::VectorXd& means, const Eigen::VectorXd& stds) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(kept.size()));
  for (Eigen::Index c = 0; c < out.cols(); ++c)
    out.col(c) = (x.col(kept[static_cast<std::size_t>(c)]).array() - means[c]) / stds[c];
  return out;
}

// ---------------------------------------------------------------------------
// Ridge

struct RidgeModel {
  Eigen::VectorXd weights;  // one per kept feature
  double intercept = 0.0;
  double alpha = 1.0;
  Eigen::VectorXd feature_means;
  Eigen::VectorXd feature_stds;
  std::vector<Eigen::Index> kept_columns;
  Eigen::Index input_dim = 0;
};

inline constexpr double kDefaultAlpha = 1.0;

// Solves (X'X + alpha I) w = X'(y - mean(y)) by Cholesky. If the factorization
// fails, retries once with 1e-10 * trace jitter on the diagonal.
inline RidgeModel ridge_fit(const Eigen::MatrixXd& xz, const Eigen::VectorXd& y, double alpha = kDefaultAlpha) {
  if (xz.rows() < 1) fail(Errc::InvalidArgument, "ridge needs at least one row");
  if (y.size() != xz.rows()) fail(Errc::DimMismatch, "target length does not match design rows");
  if (!(alpha >= 0.0)) fail(Errc::InvalidArgument, "alpha must be non-negative");
  RidgeModel model;
  model.alpha = alpha;
  model.intercept = y.mean();
  model.input_dim = xz.cols();
  model.feature_means = Eigen::VectorXd::Zero(xz.cols());
  model.feature_stds = Eigen::VectorXd::Ones(xz.cols());
  model.kept_columns.resize(static_cast<std::size_t>(xz.cols()));
  std::iota(model.kept_columns.begin(), model.kept_columns.end(), Eigen::Index{0});
  if (xz.cols() == 0) {
    model.weights.resize(0);
    return model;
  }

  Eigen::MatrixXd gram = xz.transpose() * xz;
  gram.diagonal().array() += alpha;
  const Eigen::VectorXd rhs = xz.transpose() * (y.array() - model.intercept).matrix();

  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) {
    const double jitter = 1e-10 * gram.trace();
    if (!(jitter > 0.0)) fail(Errc::SingularSystem, "normal equations are singular");
    gram.diagonal().array() += jitter;
    llt.compute(gram);
    if (llt.info() != Eigen::Success) fail(Errc::SingularSystem, "normal equations are singular after jitter");
  }
  model.weights = llt.solve(rhs);
  if (!model.weights.allFinite()) fail(Errc::SingularSystem, "ridge solution is not finite");
  return model;
}

// Standardizes raw features (dropping constant ones) and fits ridge on top.
inline RidgeModel fit_ridge_model(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double alpha = kDefaultAlpha) {
  auto s = standardize_fit(x);
  auto model = ridge_fit(s.xz, y, alpha);
  model.feature_means = std::move(s.means);
  model.feature_stds = std::move(s.stds);
  model.kept_columns = std::move(s.kept);
  model.input_dim = x.cols();
  return model;
}

inline Eigen::VectorXd ridge_predict(const RidgeModel& model, const Eigen::MatrixXd& x) {
  if (x.cols() != model.input_dim)
    fail(Errc::DimMismatch, "model expects " + std::to_string(model.input_dim) + " features, got " +
                                std::to_string(x.cols()));
  const auto xz = standardize_apply(x, model.kept_columns, model.feature_means, model.feature_stds);
  return (xz * model.weights).array() + model.intercept;
}

inline double ridge_objective(const Eigen::MatrixXd& xz, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                              double alpha) {
  const Eigen::VectorXd r = xz * w - (y.array() - y.mean()).matrix();
  return r.squaredNorm() + alpha * w.squaredNorm();
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  double r2 = 0.0;
};

inline Metrics metrics(std::span<const double> y_true, std::span<const double> y_pred) {
  if (y_true.size() != y_pred.size()) fail(Errc::DimMismatch, "metric inputs differ in length");
  const std::size_t q = y_true.size();
  if (q < 2) fail(Errc::InvalidArgument, "metrics need at least two points");
  double sum = 0.0;
  for (double v : y_true) sum += v;
  const double mean = sum / static_cast<double>(q);
  double abs_err = 0.0, sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < q; ++i) {
    const double e = y_true[i] - y_pred[i];
    const double d = y_true[i] - mean;
    abs_err += std::abs(e);
    sse += e * e;
    sst += d * d;
  }
  if (sst == 0.0) fail(Errc::DegenerateTarget, "R^2 is undefined for a constant target");
  const double n = static_cast<double>(q);
  return Metrics{abs_err / n, std::sqrt(sse / n), 1.0 - sse / sst};
}

inline Metrics metrics(const Eigen::VectorXd& y_true, const Eigen::VectorXd& y_pred) {
  return metrics(std::span<const double>(y_true.data(), static_cast<std::size_t>(y_true.size())),
                 std::span<const double>(y_pred.data(), static_cast<std::size_t>(y_pred.size())));
}

// ---------------------------------------------------------------------------
// Cross-validation

// Seeded Fisher-Yates shuffle of [0, n) cut into contiguous chunks; the first
// n % folds chunks get one extra element.
inline std::vector<std::vector<std::size_t>> kfold_partition(std::size_t n, std::size_t folds, std::uint64_t seed) {
  if (folds < 2 || n < folds) fail(Errc::InvalidArgument, "need n >= folds >= 2");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(derive_seed(seed, "kfold-shuffle"));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  std::vector<std::vector<std::size_t>> out(folds);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t len = n / folds + (f < n % folds ? 1 : 0);
    out[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return out;
}

struct CVReport {
  std::vector<Metrics> per_fold;
  double mean_mae = 0.0;
  double mean_rmse = 0.0;
  double mean_r2 = 0.0;
  std::size_t folds = 0;
  std::uint64_t seed = 0;
  double alpha = kDefaultAlpha;

  nlohmann::json to_json() const {
    auto folds_json = nlohmann::json::array();
    for (const auto& m : per_fold) folds_json.push_back({{"mae", m.mae}, {"rmse", m.rmse}, {"r2", m.r2}});
    return {{"folds", folds},  {"seed", seed},           {"alpha", alpha},        {"per_fold", folds_json},
            {"mean_mae", mean_mae}, {"mean_rmse", mean_rmse}, {"mean_r2", mean_r2}};
  }

  static CVReport from_json(const nlohmann::json& j) {
    CVReport r;
    r.folds = j.at("folds").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.alpha = j.value("alpha", kDefaultAlpha);
    for (const auto& f : j.at("per_fold"))
      r.per_fold.push_back({f.at("mae").get<double>(), f.at("rmse").get<double>(), f.at("r2").get<double>()});
    r.mean_mae = j.at("mean_mae").get<double>();
    r.mean_rmse = j.at("mean_rmse").get<double>();
    r.mean_r2 = j.at("mean_r2").get<double>();
    return r;
  }
};

// Attribute values reordered to follow the representation's node order.
inline Eigen::VectorXd align_attribute(const GeoRepresentation& rep, const AttributeVector& attr) {
  if (attr.node_ids.size() != attr.values.size()) fail(Errc::Misalignment, "attribute ids and values differ in length");
  std::unordered_map<std::string, double> by_id;
  by_id.reserve(attr.node_ids.size());
  for (std::size_t i = 0; i < attr.node_ids.size(); ++i) by_id.emplace(attr.node_ids[i], attr.values[i]);
  if (by_id.size() != rep.size() || attr.node_ids.size() != rep.size())
    fail(Errc::Misalignment, "representation has " + std::to_string(rep.size()) + " nodes, attribute has " +
                                 std::to_string(attr.node_ids.size()));
  Eigen::VectorXd y(static_cast<Eigen::Index>(rep.size()));
  for (std::size_t i = 0; i < rep.size(); ++i) {
    auto it = by_id.find(rep.node_ids[i]);
    if (it == by_id.end()) fail(Errc::Misalignment, "attribute has no value for node '" + rep.node_ids[i] + "'");
    y[static_cast<Eigen::Index>(i)] = it->second;
  }
  return y;
}

namespace detail {

inline Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline Eigen::VectorXd take(const Eigen::VectorXd& v, const std::vector<std::size_t>& idx) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[static_cast<Eigen::Index>(idx[i])];
  return out;
}

}  // namespace detail

inline CVReport kfold_cv(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::size_t folds = 5,
                         double alpha = kDefaultAlpha, std::uint64_t seed = 0) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (static_cast<std::size_t>(y.size()) != n) fail(Errc::Misalignment, "design rows and targets differ");
  const auto parts = kfold_partition(n, folds, seed);
  CVReport report;
  report.folds = folds;
  report.seed = seed;
  report.alpha = alpha;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> train;
    train.reserve(n - parts[f].size());
    for (std::size_t g = 0; g < folds; ++g)
      if (g != f) train.insert(train.end(), parts[g].begin(), parts[g].end());
    const auto model = fit_ridge_model(detail::take_rows(x, train), detail::take(y, train), alpha);
    const auto pred = ridge_predict(model, detail::take_rows(x, parts[f]));
    report.per_fold.push_back(metrics(detail::take(y, parts[f]), pred));
  }
  for (const auto& m : report.per_fold) {
    report.mean_mae += m.mae;
    report.mean_rmse += m.rmse;
    report.mean_r2 += m.r2;
  }
  const double k = static_cast<double>(folds);
  report.mean_mae /= k;
  report.mean_rmse /= k;
  report.mean_r2 /= k;
  return report;
}

inline CVReport kfold_cv(const GeoRepresentation& rep, const AttributeVector& attr, std::size_t folds = 5,
                         double alpha = kDefaultAlpha, std::uint64_t seed = 0) {
  const auto y = align_attribute(rep, attr);
  return kfold_cv(rep.design(), y, folds, alpha, seed);
}

/// Stacks representations feature-wise; all inputs must list the same nodes
/// in the same order.
inline GeoRepresentation concat_representations(std::span<const GeoRepresentation> reps) {
  if (reps.empty()) fail(Errc::InvalidArgument, "nothing to concatenate");
  if (reps.size() == 1) return reps.front();
  GeoRepresentation out;
  out.node_ids = reps.front().node_ids;
  std::string hashes;
  std::vector<std::string> variants;
  for (const auto& r : reps) {
    if (r.node_ids != out.node_ids) fail(Errc::NodeMismatch, "representations list different nodes");
    out.dim += r.dim;
    if (!out.provider_id.empty()) out.provider_id += "+";
    out.provider_id += r.provider_id;
    if (!hashes.empty()) hashes += "+";
    hashes += r.prompt_hash;
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
  }
  for (const auto& v : variants) out.variant += (out.variant.empty() ? "" : "+") + v;
  out.prompt_hash = hashes;
  out.matrix.reserve(static_cast<std::size_t>(out.dim) * out.size());
  for (std::size_t n = 0; n < out.size(); ++n)
    for (const auto& r : reps) {
      const auto col = r.column(n);
      out.matrix.insert(out.matrix.end(), col.begin(), col.end());
    }
  return out;
}

inline GeoRepresentation concat_representations(const std::vector<GeoRepresentation>& reps) {
  return concat_representations(std::span<const GeoRepresentation>(reps));
}

/// Fits on `train_ids` and scores on `test_ids`. Overlapping lists are an
/// error unless `allow_overlap` is set (in-sample diagnostics).
inline Metrics holdout_eval(const GeoRepresentation& rep, const AttributeVector& attr,
                            const std::vector<std::string>& train_ids, const std::vector<std::string>& test_ids,
                            double alpha = kDefaultAlpha, bool allow_overlap = false) {
  const auto y = align_attribute(rep, attr);
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < rep.size(); ++i) index.emplace(rep.node_ids[i], i);
  auto resolve = [&](const std::vector<std::string>& ids) {
    std::vector<std::size_t> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      auto it = index.find(id);
      if (it == index.end()) fail(Errc::Misalignment, "unknown node id '" + id + "' in split");
      out.push_back(it->second);
    }
    return out;
  };
  const auto train = resolve(train_ids);
  const auto test = resolve(test_ids);
  if (!allow_overlap) {
    const std::set<std::size_t> train_set(train.begin(), train.end());
    for (auto t : test)
      if (train_set.count(t)) fail(Errc::OverlapDetected, "node '" + rep.node_ids[t] + "' is in both splits");
  }
  const auto x = rep.design();
  const auto model = fit_ridge_model(detail::take_rows(x, train), detail::take(y, train), alpha);
  return metrics(detail::take(y, test), ridge_predict(model, detail::take_rows(x, test)));
}

}  // namespace geovec
