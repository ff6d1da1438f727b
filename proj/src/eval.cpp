#include "eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "json.hpp"

namespace ula::eval {

using metrics::MetricKind;
using metrics::ScoreTable;
using nlohmann::json;

// -----------------------------------------------------------------------------
// standardized mean difference
// -----------------------------------------------------------------------------

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Bessel-corrected sample variance around a precomputed mean (two-pass).
double sample_var(const std::vector<double>& v, double mean) {
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size() - 1);
}

std::vector<double> column(const ScoreTable& t) {
  std::vector<double> out;
  out.reserve(t.rows.size());
  for (const auto& [id, score] : t.rows) out.push_back(score);
  return out;
}

}  // namespace

double smd(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ConfigError("smd: both samples need at least 2 entries");
  }
  for (double x : a) {
    if (!std::isfinite(x)) throw NumericError("smd: non-finite entry in first sample");
  }
  for (double x : b) {
    if (!std::isfinite(x)) throw NumericError("smd: non-finite entry in second sample");
  }
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  const double va = sample_var(a, ma);
  const double vb = sample_var(b, mb);
  const double pooled =
      std::sqrt(((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0));
  if (!(pooled > 0.0)) {
    throw NumericError("smd: pooled standard deviation is zero; effect size undefined");
  }
  return (ma - mb) / pooled;
}

std::string SmdResult::to_json() const {
  json j;
  j["mean_smd"] = mean_smd;
  j["sd_smd"] = sd_smd;
  j["n_repeats"] = n_repeats;
  j["sample_size"] = sample_size;
  j["inconsistent"] = inconsistent;
  return j.dump(2);
}

SmdResult SmdResult::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("smd result: bad json: ") + e.what());
  }
  try {
    SmdResult r;
    r.mean_smd = j.at("mean_smd").get<double>();
    r.sd_smd = j.at("sd_smd").get<double>();
    r.n_repeats = j.at("n_repeats").get<int64_t>();
    r.sample_size = j.at("sample_size").get<int64_t>();
    r.inconsistent = j.at("inconsistent").get<bool>();
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("smd result: missing or mistyped field: ") + e.what());
  }
}

SmdResult bootstrap_smd(const ScoreTable& table_a, const ScoreTable& table_b,
                        int64_t sample_size, int64_t repeats, uint64_t seed,
                        int threads) {
  if (repeats < 1) throw ConfigError("bootstrap_smd: repeats must be >= 1");
  if (sample_size < 2) throw ConfigError("bootstrap_smd: sample_size must be >= 2");
  const auto a = column(table_a);
  const auto b = column(table_b);
  if (a.size() < 2) throw ConfigError("bootstrap_smd: first table needs >= 2 rows");
  if (sample_size > static_cast<int64_t>(b.size())) {
    throw ConfigError("bootstrap_smd: sample_size " + std::to_string(sample_size) +
                      " exceeds second table size " + std::to_string(b.size()));
  }

  SmdResult out;
  out.n_repeats = repeats;
  out.sample_size = sample_size;

  if (sample_size == static_cast<int64_t>(b.size())) {
    // Every draw is the whole table; keep canonical row order so a table
    // bootstrapped against itself comes out exactly 0.
    out.mean_smd = smd(a, b);
    out.sd_smd = 0.0;
    out.inconsistent = std::abs(out.mean_smd) > 0.5;
    return out;
  }

  std::vector<double> draws(static_cast<size_t>(repeats), 0.0);
  parallel_for(static_cast<size_t>(repeats), threads, [&](size_t r) {
    Rng rng(Rng::mix(seed, static_cast<uint64_t>(r)));
    const auto idx =
        sample_without_replacement(b.size(), static_cast<size_t>(sample_size), rng);
    std::vector<double> sub;
    sub.reserve(idx.size());
    for (size_t i : idx) sub.push_back(b[i]);
    draws[r] = smd(a, sub);
  });

  const double m = mean_of(draws);
  out.mean_smd = m;
  out.sd_smd = repeats > 1 ? std::sqrt(sample_var(draws, m)) : 0.0;
  out.inconsistent = std::abs(m) > 0.5;
  return out;
}

// -----------------------------------------------------------------------------
// joint normalization
// -----------------------------------------------------------------------------

std::string NormalizedScores::to_csv() const {
  std::string out = "sentence_id,score,dataset_tag\n";
  for (const auto& t : tables) {
    for (const auto& [id, score] : t.rows) {
      out += std::to_string(id) + "," + format_double(score) + "," +
             t.dataset_tag + "\n";
    }
  }
  return out;
}

NormalizedScores normalize_scores(const std::vector<ScoreTable>& tables) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  size_t total = 0;
  for (const auto& t : tables) {
    for (const auto& [id, score] : t.rows) {
      if (!std::isfinite(score)) {
        throw NumericError("normalize_scores: non-finite score for sentence " +
                           std::to_string(id));
      }
      lo = std::min(lo, score);
      hi = std::max(hi, score);
      ++total;
    }
  }
  if (total == 0) throw ConfigError("normalize_scores: no rows to normalize");
  if (!(lo < hi)) {
    throw ConfigError("normalize_scores: all scores equal; range is degenerate");
  }
  NormalizedScores out;
  out.min_used = lo;
  out.max_used = hi;
  out.tables = tables;
  const double range = hi - lo;
  for (auto& t : out.tables) {
    for (auto& [id, score] : t.rows) score = (score - lo) / range;
  }
  return out;
}

// -----------------------------------------------------------------------------
// correlation
// -----------------------------------------------------------------------------

namespace {

// 1-based ranks with ties sharing the average of the ranks they occupy.
std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t i, size_t j) {
    if (v[i] != v[j]) return v[i] < v[j];
    return i < j;
  });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double shared = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t t = i; t <= j; ++t) ranks[order[t]] = shared;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double pearson_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ConfigError("correlation: length mismatch");
  if (x.size() < 2) throw ConfigError("correlation: need at least 2 points");
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  // A constant axis carries no ordering information; report 0 by convention.
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson_rho(average_ranks(x), average_ranks(y));
}

std::string CorrelationReport::to_csv() const {
  std::string out = "sentence_id,nn_distance,score\n";
  for (const auto& [id, dist, score] : pairs) {
    out += std::to_string(id) + "," + format_double(dist) + "," +
           format_double(score) + "\n";
  }
  return out;
}

std::string CorrelationReport::to_json() const {
  json j;
  j["spearman_rho"] = spearman_rho;
  j["pearson_rho"] = pearson_rho;
  j["k"] = k;
  j["n"] = pairs.size();
  return j.dump(2);
}

CorrelationReport nn_correlation(const ScoreTable& scores,
                                 const embed::EmbeddingIndex& queries,
                                 const embed::EmbeddingIndex& index, int64_t k) {
  queries.validate();
  index.validate();
  if (scores.rows.size() < 2) {
    throw ConfigError("nn_correlation: need at least 2 scored sentences");
  }
  if (queries.vectors.cols() != index.vectors.cols()) {
    throw CompatError("nn_correlation: query dimension " +
                      std::to_string(queries.vectors.cols()) +
                      " does not match index dimension " +
                      std::to_string(index.vectors.cols()));
  }
  if (!queries.model_tag.empty() && !index.model_tag.empty() &&
      queries.model_tag != index.model_tag) {
    throw CompatError("nn_correlation: queries embedded under '" + queries.model_tag +
                      "' but index under '" + index.model_tag + "'");
  }
  std::unordered_map<int64_t, Eigen::Index> by_id;
  by_id.reserve(queries.ids.size());
  for (size_t i = 0; i < queries.ids.size(); ++i) {
    by_id.emplace(queries.ids[i], static_cast<Eigen::Index>(i));
  }
  if (by_id.size() != scores.rows.size()) {
    throw ConfigError("nn_correlation: scores and embeddings cover different sentences");
  }

  const int64_t kk = embed::clamp_k(k, index.size());
  CorrelationReport report;
  report.k = kk;
  std::vector<double> xs, ys;
  xs.reserve(scores.rows.size());
  ys.reserve(scores.rows.size());
  for (const auto& [id, score] : scores.rows) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw ConfigError("nn_correlation: no embedding for sentence " + std::to_string(id));
    }
    const embed::Vec q = queries.vectors.row(it->second).transpose();
    const double dist = embed::mean_knn_distance(index, q, kk);
    report.pairs.emplace_back(id, dist, score);
    xs.push_back(dist);
    ys.push_back(score);
  }
  report.spearman_rho = spearman_rho(xs, ys);
  report.pearson_rho = pearson_rho(xs, ys);
  return report;
}

// -----------------------------------------------------------------------------
// construction-axis sweeps
// -----------------------------------------------------------------------------

std::string ablation_kind_name(AblationKind k) {
  switch (k) {
    case AblationKind::Coefficient: return "coefficient";
    case AblationKind::DistanceMetric: return "distance_metric";
    case AblationKind::GenerationMode: return "generation_mode";
  }
  throw ConfigError("ablation: unknown axis kind");
}

AblationKind ablation_kind_from_name(const std::string& name) {
  if (name == "coefficient") return AblationKind::Coefficient;
  if (name == "distance_metric") return AblationKind::DistanceMetric;
  if (name == "generation_mode") return AblationKind::GenerationMode;
  throw ConfigError("ablation: unknown axis kind '" + name + "'");
}

AblationAxis AblationAxis::coefficient(std::vector<double> grid) {
  AblationAxis a;
  a.kind = AblationKind::Coefficient;
  a.coefficients = std::move(grid);
  return a;
}

AblationAxis AblationAxis::distance_metric(std::vector<embed::DistanceMetric> grid) {
  AblationAxis a;
  a.kind = AblationKind::DistanceMetric;
  a.metrics = std::move(grid);
  return a;
}

AblationAxis AblationAxis::generation_mode(std::vector<psg::GenerationMode> grid) {
  AblationAxis a;
  a.kind = AblationKind::GenerationMode;
  a.modes = std::move(grid);
  return a;
}

size_t AblationAxis::size() const {
  switch (kind) {
    case AblationKind::Coefficient: return coefficients.size();
    case AblationKind::DistanceMetric: return metrics.size();
    case AblationKind::GenerationMode: return modes.size();
  }
  return 0;
}

void AblationAxis::validate() const {
  if (size() == 0) throw ConfigError("ablation: empty grid for the selected axis");
  if (kind == AblationKind::Coefficient) {
    for (double c : coefficients) {
      if (!std::isfinite(c) || c <= 0.0) {
        throw ConfigError("ablation: coefficients must be positive");
      }
    }
  }
}

std::string AblationReport::to_json() const {
  json j;
  j["kind"] = ablation_kind_name(kind);
  j["points"] = json::array();
  for (const auto& p : points) {
    json pj;
    pj["label"] = p.label;
    pj["accepted"] = p.accepted;
    if (!p.under_yield.empty()) pj["under_yield"] = p.under_yield;
    json res = json::object();
    for (const auto& [kind_m, r] : p.results) {
      res[metrics::metric_name(kind_m)] = json::parse(r.to_json());
    }
    pj["results"] = std::move(res);
    j["points"].push_back(std::move(pj));
  }
  return j.dump(2);
}

AblationReport ablation_sweep(const AblationAxis& axis, const AblationContext& ctx) {
  axis.validate();
  if (ctx.theta == nullptr || ctx.theta_f == nullptr || ctx.theta_u_hat == nullptr) {
    throw ConfigError("ablation: all three model checkpoints are required");
  }
  if (ctx.d_u == nullptr || ctx.d_u->empty()) {
    throw ConfigError("ablation: the unlearn set is required");
  }
  if (ctx.tok == nullptr) throw ConfigError("ablation: tokenizer is required");
  if (ctx.metric_kinds.empty()) {
    throw ConfigError("ablation: at least one metric is required");
  }
  ctx.psg.validate();
  ctx.metric_cfg.validate();

  // Unlearn-set scores under θ̂_u do not depend on the swept axis.
  metrics::ScoreContext sc;
  sc.theta = ctx.theta;
  sc.relearn_set = ctx.d_u;
  sc.dataset_tag = "D_u";
  sc.threads = ctx.threads;
  std::vector<ScoreTable> du_tables;
  du_tables.reserve(ctx.metric_kinds.size());
  for (MetricKind m : ctx.metric_kinds) {
    du_tables.push_back(
        metrics::score_dataset(*ctx.theta_u_hat, *ctx.d_u, *ctx.tok, m, ctx.metric_cfg, sc));
  }

  // The τ_dist baseline under the configured metric, shared by coefficient
  // points; distance-metric points rebuild it per grid value.
  lm::Lm finetuned(*ctx.theta_f);
  embed::EmbeddingIndex base_index;
  int64_t base_k = 0;
  if (axis.kind == AblationKind::Coefficient) {
    base_index =
        embed::build_index(finetuned, *ctx.d_u, *ctx.tok, ctx.psg.metric, ctx.threads);
    base_k = embed::clamp_k(ctx.psg.thresholds.k, base_index.size());
  }

  AblationReport report;
  report.kind = axis.kind;
  for (size_t g = 0; g < axis.size(); ++g) {
    psg::PsgConfig pc = ctx.psg;
    AblationPoint point;
    switch (axis.kind) {
      case AblationKind::Coefficient: {
        const double c = axis.coefficients[g];
        point.label = format_double(c);
        pc.thresholds.coefficient = c;
        pc.thresholds.tau_dist = embed::compute_tau_dist(base_index, base_k, c);
        break;
      }
      case AblationKind::DistanceMetric: {
        const embed::DistanceMetric m = axis.metrics[g];
        point.label = embed::metric_name(m);
        pc.metric = m;
        const auto idx = embed::build_index(finetuned, *ctx.d_u, *ctx.tok, m, ctx.threads);
        const int64_t kk = embed::clamp_k(pc.thresholds.k, idx.size());
        pc.thresholds.tau_dist =
            embed::compute_tau_dist(idx, kk, pc.thresholds.coefficient);
        break;
      }
      case AblationKind::GenerationMode: {
        pc.generation_mode = axis.modes[g];
        point.label = psg::mode_name(axis.modes[g]);
        break;
      }
    }

    psg::SurrogateDataset ds;
    try {
      ds = psg::generate_surrogates(*ctx.theta, *ctx.theta_f, *ctx.d_u, *ctx.tok, pc,
                                    ctx.threads);
    } catch (const UnderYieldError& e) {
      point.under_yield = e.what();
      report.points.push_back(std::move(point));
      continue;
    }
    point.accepted = static_cast<int64_t>(ds.records.size());
    if (ds.records.size() < 2) {
      point.under_yield = "fewer than 2 surrogates accepted; effect size undefined";
      report.points.push_back(std::move(point));
      continue;
    }

    std::vector<corpus::Sentence> surrogates;
    surrogates.reserve(ds.records.size());
    for (size_t i = 0; i < ds.records.size(); ++i) {
      surrogates.push_back(
          {static_cast<int64_t>(i), ds.records[i].text, std::string("psg")});
    }
    metrics::ScoreContext ssc = sc;
    ssc.dataset_tag = "D~u";
    for (size_t mi = 0; mi < ctx.metric_kinds.size(); ++mi) {
      const ScoreTable surrogate_table = metrics::score_dataset(
          *ctx.theta_u_hat, surrogates, *ctx.tok, ctx.metric_kinds[mi], ctx.metric_cfg, ssc);
      const int64_t draw =
          std::min<int64_t>(ctx.sample_size, static_cast<int64_t>(ctx.d_u->size()));
      point.results.emplace_back(
          ctx.metric_kinds[mi],
          bootstrap_smd(surrogate_table, du_tables[mi], draw, ctx.repeats, ctx.seed,
                        ctx.threads));
    }
    report.points.push_back(std::move(point));
  }
  return report;
}

}  // namespace ula::eval
