#include "metrics.hpp"

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "common.hpp"
#include "gcg.hpp"

namespace ula::metrics {

using json = nlohmann::ordered_json;
using lm::Lm;
using lm::Mat;
using lm::TokenSeq;
using lm::Vec;
using model::ModelCheckpoint;

const std::vector<MetricKind>& all_metrics() {
  static const std::vector<MetricKind> kAll = {
      MetricKind::Likelihood,    MetricKind::ZlibRatio,
      MetricKind::MinKProb,      MetricKind::MinKPlusPlus,
      MetricKind::Memorization,  MetricKind::Orthogonalization,
      MetricKind::LogitLens,
  };
  return kAll;
}

std::string metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::Likelihood: return "likelihood";
    case MetricKind::ZlibRatio: return "zlib_ratio";
    case MetricKind::MinKProb: return "min_k_prob";
    case MetricKind::MinKPlusPlus: return "min_k_pp";
    case MetricKind::Memorization: return "memorization";
    case MetricKind::Orthogonalization: return "orthogonalization";
    case MetricKind::LogitLens: return "logit_lens";
  }
  throw ConfigError("metrics: unknown metric kind");
}

MetricKind metric_from_name(const std::string& name) {
  for (MetricKind m : all_metrics()) {
    if (metric_name(m) == name) return m;
  }
  throw ConfigError("metrics: unknown metric name '" + name + "'");
}

void MetricConfig::validate() const {
  if (!(min_k_fraction > 0.0) || min_k_fraction > 1.0) {
    throw ConfigError("metrics: min_k_fraction must be in (0, 1]");
  }
  if (!(ortho_fraction > 0.0) || ortho_fraction > 1.0) {
    throw ConfigError("metrics: ortho_fraction must be in (0, 1]");
  }
  if (mem_adv_tokens < 0 || mem_gcg_iters < 0 || ortho_steps < 0) {
    throw ConfigError("metrics: counts must be >= 0");
  }
  if (mem_gcg_topk < 1 || mem_gcg_batch < 1 || ortho_batch < 1) {
    throw ConfigError("metrics: gcg/relearn sizes must be >= 1");
  }
  if (!(ortho_lr > 0.0)) throw ConfigError("metrics: ortho_lr must be > 0");
  if (!(sigma_floor > 0.0)) throw ConfigError("metrics: sigma_floor must be > 0");
}

std::string MetricConfig::to_json() const {
  json j;
  j["min_k_fraction"] = min_k_fraction;
  j["mem_adv_tokens"] = mem_adv_tokens;
  j["mem_gcg_iters"] = mem_gcg_iters;
  j["mem_gcg_topk"] = mem_gcg_topk;
  j["mem_gcg_batch"] = mem_gcg_batch;
  j["ortho_fraction"] = ortho_fraction;
  j["ortho_steps"] = ortho_steps;
  j["ortho_batch"] = ortho_batch;
  j["ortho_lr"] = ortho_lr;
  j["ortho_scale"] = ortho_scale;
  j["lens_layer"] = lens_layer;
  j["sigma_floor"] = sigma_floor;
  j["seed"] = seed;
  return j.dump(2);
}

MetricConfig MetricConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  MetricConfig c;
  c.min_k_fraction = j.value("min_k_fraction", c.min_k_fraction);
  c.mem_adv_tokens = j.value("mem_adv_tokens", c.mem_adv_tokens);
  c.mem_gcg_iters = j.value("mem_gcg_iters", c.mem_gcg_iters);
  c.mem_gcg_topk = j.value("mem_gcg_topk", c.mem_gcg_topk);
  c.mem_gcg_batch = j.value("mem_gcg_batch", c.mem_gcg_batch);
  c.ortho_fraction = j.value("ortho_fraction", c.ortho_fraction);
  c.ortho_steps = j.value("ortho_steps", c.ortho_steps);
  c.ortho_batch = j.value("ortho_batch", c.ortho_batch);
  c.ortho_lr = j.value("ortho_lr", c.ortho_lr);
  c.ortho_scale = j.value("ortho_scale", c.ortho_scale);
  c.lens_layer = j.value("lens_layer", c.lens_layer);
  c.sigma_floor = j.value("sigma_floor", c.sigma_floor);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string MetricConfig::digest() const { return digest_hex(to_json()); }

// -----------------------------------------------------------------------------
// score table serialization
// -----------------------------------------------------------------------------

std::string ScoreTable::to_csv() const {
  std::string out = "sentence_id,score\n";
  for (const auto& [id, score] : rows) {
    out += std::to_string(id);
    out += ',';
    out += format_double(score);
    out += '\n';
  }
  return out;
}

std::string ScoreTable::sidecar_json(const std::string& config_digest) const {
  json j;
  j["metric"] = metric_name(metric);
  j["config_digest"] = config_digest;
  j["model_tag"] = model_tag;
  j["dataset_tag"] = dataset_tag;
  return j.dump(2);
}

ScoreTable ScoreTable::from_csv(const std::string& csv, const std::string& sidecar) {
  ScoreTable t;
  json j = json::parse(sidecar);
  t.metric = metric_from_name(j.at("metric").get<std::string>());
  t.model_tag = j.at("model_tag").get<std::string>();
  t.dataset_tag = j.at("dataset_tag").get<std::string>();

  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "sentence_id,score") {
    throw IoError("score table: bad header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw IoError("score table: bad row");
    try {
      t.rows.emplace_back(std::stoll(line.substr(0, comma)),
                          std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw IoError("score table: unparsable row '" + line + "'");
    }
  }
  return t;
}

// -----------------------------------------------------------------------------
// the seven scores
// -----------------------------------------------------------------------------

double likelihood_score(const Lm& model, const TokenSeq& ids) {
  return model.mean_logprob(ids);
}

int64_t zlib_entropy_bits(const std::string& text) {
  if (text.empty()) throw ConfigError("zlib_ratio: empty text");
  uLongf dest_len = compressBound(static_cast<uLong>(text.size()));
  std::vector<Bytef> dest(dest_len);
  const int rc = compress2(dest.data(), &dest_len,
                           reinterpret_cast<const Bytef*>(text.data()),
                           static_cast<uLong>(text.size()), 6);
  if (rc != Z_OK) throw NumericError("zlib_ratio: compression failed");
  return static_cast<int64_t>(dest_len) * 8;
}

double zlib_ratio_score(const Lm& model, const TokenSeq& ids,
                        const std::string& raw_text) {
  return model.sum_logprob(ids) / static_cast<double>(zlib_entropy_bits(raw_text));
}

double min_k_of(std::vector<double> values, double k) {
  if (!(k > 0.0) || k > 1.0) throw ConfigError("min_k: fraction must be in (0, 1]");
  if (values.empty()) throw ConfigError("min_k: empty value list");
  const auto n = static_cast<double>(values.size());
  const auto count = static_cast<size_t>(std::ceil(k * n));
  std::sort(values.begin(), values.end());
  double acc = 0.0;
  for (size_t i = 0; i < count; ++i) acc += values[i];
  return acc / static_cast<double>(count);
}

double min_k_prob_score(const Lm& model, const TokenSeq& ids, double k) {
  return min_k_of(model.forward_trace(ids, false, false).token_logprobs, k);
}

double min_k_pp_score(const Lm& model, const TokenSeq& ids, double k,
                      double sigma_floor) {
  if (!(sigma_floor > 0.0)) throw ConfigError("min_k_pp: sigma_floor must be > 0");
  const auto trace = model.forward_trace(ids, true, false);
  const auto n = static_cast<int64_t>(trace.token_logprobs.size());
  std::vector<double> z(static_cast<size_t>(n));
  for (int64_t t = 0; t < n; ++t) {
    const auto row = trace.full_rows.row(t).array();
    const auto p = row.exp();
    const double mu = (p * row).sum();
    const double var = (p * (row - mu).square()).sum();
    const double sigma = std::sqrt(std::max(var, 0.0));
    z[static_cast<size_t>(t)] =
        (trace.token_logprobs[static_cast<size_t>(t)] - mu) / std::max(sigma, sigma_floor);
  }
  return min_k_of(std::move(z), k);
}

double memorization_score(const Lm& model, const TokenSeq& target,
                          const MetricConfig& cfg) {
  cfg.validate();
  if (target.empty()) throw LengthError("memorization: empty target");
  const int64_t P = cfg.mem_adv_tokens;
  const auto total = 1 + P + static_cast<int64_t>(target.size());
  if (total > model.config().max_seq) {
    throw LengthError("memorization: prefix + target exceeds the context window");
  }

  Rng rng(cfg.seed);
  TokenSeq ids;
  ids.reserve(static_cast<size_t>(total));
  ids.push_back(lm::kEotId);
  std::vector<int64_t> positions;
  for (int64_t i = 0; i < P; ++i) {
    ids.push_back(static_cast<lm::TokenId>(rng.uniform_int(model.config().vocab_size)));
    positions.push_back(1 + i);
  }
  ids.insert(ids.end(), target.begin(), target.end());

  if (P > 0 && cfg.mem_gcg_iters > 0) {
    // minimize −Σ log p(target); rows P..P+|target|−1 score the target tokens
    auto loss_fn = [&](const lm::ForwardTrace& tr) {
      lm::TraceGrad tg;
      const int64_t first = P;  // row index of the first target token
      for (size_t t = static_cast<size_t>(first); t < tr.token_logprobs.size(); ++t) {
        tg.loss -= tr.token_logprobs[t];
      }
      if (tr.full_rows.size() != 0) {  // gradient pass
        tg.d_logprob = Mat::Zero(static_cast<int64_t>(ids.size()),
                                 model.config().vocab_size);
        for (size_t t = static_cast<size_t>(first); t < tr.token_logprobs.size(); ++t) {
          tg.d_logprob(static_cast<int64_t>(t), ids[t + 1]) = -1.0;
        }
      }
      return tg;
    };
    gcg::GcgOptions opt;
    opt.iters = cfg.mem_gcg_iters;
    opt.topk = cfg.mem_gcg_topk;
    opt.batch = cfg.mem_gcg_batch;
    ids = gcg::gcg_minimize(model, ids, positions, loss_fn, opt, rng).ids;
  }

  TokenSeq ctx(ids.begin(), ids.begin() + 1 + P);
  const TokenSeq gen = greedy_decode(model, ctx, static_cast<int64_t>(target.size()));
  int64_t matches = 0;
  for (size_t i = 0; i < target.size(); ++i) {
    if (i < gen.size() && gen[i] == target[i]) ++matches;
  }
  return static_cast<double>(matches) / static_cast<double>(target.size());
}

ModelCheckpoint build_ortho_model(const ModelCheckpoint& theta_u_hat,
                                  const std::vector<corpus::Sentence>& relearn_set,
                                  const corpus::Tokenizer& tok, const MetricConfig& cfg) {
  cfg.validate();
  if (relearn_set.empty()) throw ConfigError("orthogonalization: empty relearn set");
  const auto n = static_cast<double>(relearn_set.size());
  const auto count = std::min<size_t>(
      relearn_set.size(),
      static_cast<size_t>(std::max<int64_t>(
          1, static_cast<int64_t>(std::ceil(cfg.ortho_fraction * n)))));
  const std::vector<corpus::Sentence> subset(relearn_set.begin(),
                                             relearn_set.begin() + static_cast<int64_t>(count));

  lm::TrainConfig tc;
  tc.steps = cfg.ortho_steps;
  tc.batch_size = cfg.ortho_batch;
  tc.lr = cfg.ortho_lr;
  tc.seed = cfg.seed;
  const auto relearned = lm::train_lm(theta_u_hat, subset, tok, tc, "relearned");

  ModelCheckpoint out = theta_u_hat;
  out.tag = "modified";
  for (size_t i = 0; i < out.params.size(); ++i) {
    const double base = static_cast<double>(theta_u_hat.params[i]);
    const double delta = static_cast<double>(relearned.params[i]) - base;
    out.params[i] = static_cast<float>(base + cfg.ortho_scale * delta);
  }
  out.validate();
  return out;
}

double orthogonalization_score(const ModelCheckpoint& theta,
                               const ModelCheckpoint& theta_u_hat, const TokenSeq& ids,
                               const std::vector<corpus::Sentence>& relearn_set,
                               const corpus::Tokenizer& tok, const MetricConfig& cfg) {
  if (theta.config != theta_u_hat.config) {
    throw CompatError("orthogonalization: checkpoints do not share a layout");
  }
  const Lm modified(build_ortho_model(theta_u_hat, relearn_set, tok, cfg));
  return modified.mean_logprob(ids);
}

double logit_lens_score(const Lm& model, const TokenSeq& ids, int64_t lens_layer) {
  const auto& cfg = model.config();
  const int64_t layer = lens_layer < 0 ? cfg.n_layers / 2 : lens_layer;
  if (layer > cfg.n_layers) throw ConfigError("logit_lens: layer out of range");
  const auto trace = model.forward_trace(ids, false, true);
  const Mat& h = trace.hidden.at(static_cast<size_t>(layer));

  const auto gamma = model.tensor("ln_f.w");
  const auto beta = model.tensor("ln_f.b");
  const auto head = model.tensor("head.w");
  constexpr double kLnEps = 1e-5;  // matches the runtime's layer norm

  const int64_t T = h.rows();
  double acc = 0.0;
  for (int64_t t = 0; t + 1 < T; ++t) {
    const double mu = h.row(t).mean();
    const double var = (h.row(t).array() - mu).square().mean();
    const Eigen::RowVectorXd xhat = (h.row(t).array() - mu) / std::sqrt(var + kLnEps);
    const Eigen::RowVectorXd y = xhat.cwiseProduct(gamma.row(0)) + beta.row(0);
    Eigen::RowVectorXd logits = y * head;
    const double shift = logits.maxCoeff();
    const double lse = shift + std::log((logits.array() - shift).exp().sum());
    acc += logits(ids[static_cast<size_t>(t) + 1]) - lse;
  }
  return acc / static_cast<double>(T - 1);
}

// -----------------------------------------------------------------------------
// dataset scoring
// -----------------------------------------------------------------------------

ScoreTable score_dataset(const ModelCheckpoint& ckpt,
                         const std::vector<corpus::Sentence>& data,
                         const corpus::Tokenizer& tok, MetricKind metric,
                         const MetricConfig& cfg, const ScoreContext& ctx) {
  cfg.validate();
  if (ctx.dataset_tag != "D_u" && ctx.dataset_tag != "D~u" && ctx.dataset_tag != "D_r") {
    throw ConfigError("score_dataset: dataset_tag must be one of D_u, D~u, D_r");
  }

  ScoreTable table;
  table.metric = metric;
  table.model_tag = ckpt.tag;
  table.dataset_tag = ctx.dataset_tag;
  table.rows.resize(data.size());
  if (data.empty()) return table;

  // Orthogonalization scores a derived model built once and reused
  const Lm scored = [&] {
    if (metric != MetricKind::Orthogonalization) return Lm(ckpt);
    if (!ctx.theta || !ctx.relearn_set) {
      throw ConfigError("score_dataset: orthogonalization needs theta and the relearn set");
    }
    if (ctx.theta->config != ckpt.config) {
      throw CompatError("score_dataset: checkpoints do not share a layout");
    }
    return Lm(build_ortho_model(ckpt, *ctx.relearn_set, tok, cfg));
  }();

  parallel_for(static_cast<int64_t>(data.size()), ctx.threads, [&](int64_t i) {
    const auto& sent = data[static_cast<size_t>(i)];
    // Sentences are scored in their training framing (sentinel-delimited,
    // truncated to the window) so positions line up with what training shaped.
    // The memorization probe instead takes the bare sentence and builds its
    // own prefix + target layout.
    TokenSeq ids;
    if (metric == MetricKind::Memorization) {
      ids = tok.encode(sent.text);
      const int64_t cap = ckpt.config.max_seq - 1 - cfg.mem_adv_tokens;
      if (cap > 0 && static_cast<int64_t>(ids.size()) > cap) {
        ids.resize(static_cast<size_t>(cap));
      }
    } else {
      ids = lm::frame_sentence(tok, sent.text, ckpt.config.max_seq);
    }
    double score = 0.0;
    switch (metric) {
      case MetricKind::Likelihood: score = likelihood_score(scored, ids); break;
      case MetricKind::ZlibRatio: score = zlib_ratio_score(scored, ids, sent.text); break;
      case MetricKind::MinKProb:
        score = min_k_prob_score(scored, ids, cfg.min_k_fraction);
        break;
      case MetricKind::MinKPlusPlus:
        score = min_k_pp_score(scored, ids, cfg.min_k_fraction, cfg.sigma_floor);
        break;
      case MetricKind::Memorization: score = memorization_score(scored, ids, cfg); break;
      case MetricKind::Orthogonalization: score = scored.mean_logprob(ids); break;
      case MetricKind::LogitLens:
        score = logit_lens_score(scored, ids, cfg.lens_layer);
        break;
    }
    if (!std::isfinite(score)) throw NumericError("score_dataset: non-finite score");
    table.rows[static_cast<size_t>(i)] = {sent.id, score};
  });
  return table;
}

}  // namespace ula::metrics
