#include "psg.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_set>
#include <utility>

#include "json.hpp"

namespace ula::psg {

using embed::EmbeddingIndex;
using lm::Lm;
using lm::Mat;
using lm::TokenSeq;
using lm::Vec;
using nlohmann::json;

std::string mode_name(GenerationMode m) {
  return m == GenerationMode::ContinueFromDu ? "continue_from_du" : "from_scratch";
}

GenerationMode mode_from_name(const std::string& name) {
  if (name == "continue_from_du") return GenerationMode::ContinueFromDu;
  if (name == "from_scratch") return GenerationMode::FromScratch;
  throw ConfigError("unknown generation mode '" + name + "'");
}

// -----------------------------------------------------------------------------
// config
// -----------------------------------------------------------------------------

void PsgConfig::validate() const {
  if (iterations < 1) throw ConfigError("psg: iterations must be >= 1");
  if (w_likelihood < 0.0 || !(w_prefer > w_likelihood)) {
    throw ConfigError("psg: need w_prefer > w_likelihood >= 0");
  }
  if (std::abs(w_prefer + w_likelihood - 1.0) > 1e-12) {
    throw ConfigError("psg: mixture weights must sum to 1");
  }
  if (!(w_dist > 0.0)) throw ConfigError("psg: w_dist must be > 0");
  if (free_tokens < 0) throw ConfigError("psg: free_tokens must be >= 0");
  if (gcg_iters_per_round < 0) throw ConfigError("psg: gcg_iters_per_round must be >= 0");
  if (gcg_topk < 1) throw ConfigError("psg: gcg_topk must be >= 1");
  if (gcg_batch < 1) throw ConfigError("psg: gcg_batch must be >= 1");
  if (minibatch_size < 1) throw ConfigError("psg: minibatch_size must be >= 1");
  if (max_tokens < 1) throw ConfigError("psg: max_tokens must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("psg: temperature must be > 0");
  if (target_size < 1) throw ConfigError("psg: target_size must be >= 1");
  if (pass_budget < 1) throw ConfigError("psg: pass_budget must be >= 1");
  if (thresholds.k < 1) throw ConfigError("psg: thresholds.k must be >= 1");
}

std::string PsgConfig::to_json() const {
  json j;
  j["iterations"] = iterations;
  j["w_prefer"] = w_prefer;
  j["w_likelihood"] = w_likelihood;
  j["w_dist"] = w_dist;
  j["free_tokens"] = free_tokens;
  j["gcg_iters_per_round"] = gcg_iters_per_round;
  j["gcg_topk"] = gcg_topk;
  j["gcg_batch"] = gcg_batch;
  j["minibatch_size"] = minibatch_size;
  j["max_tokens"] = max_tokens;
  j["temperature"] = temperature;
  j["top_k"] = top_k;
  j["metric"] = embed::metric_name(metric);
  j["thresholds"] = {{"tau_prefer", thresholds.tau_prefer},
                     {"tau_likelihood", thresholds.tau_likelihood},
                     {"tau_dist", thresholds.tau_dist},
                     {"coefficient", thresholds.coefficient},
                     {"k", thresholds.k}};
  j["generation_mode"] = mode_name(generation_mode);
  j["target_size"] = target_size;
  j["pass_budget"] = pass_budget;
  j["seed"] = seed;
  return j.dump(2);
}

PsgConfig PsgConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  PsgConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.w_prefer = j.value("w_prefer", c.w_prefer);
  c.w_likelihood = j.value("w_likelihood", c.w_likelihood);
  c.w_dist = j.value("w_dist", c.w_dist);
  c.free_tokens = j.value("free_tokens", c.free_tokens);
  c.gcg_iters_per_round = j.value("gcg_iters_per_round", c.gcg_iters_per_round);
  c.gcg_topk = j.value("gcg_topk", c.gcg_topk);
  c.gcg_batch = j.value("gcg_batch", c.gcg_batch);
  c.minibatch_size = j.value("minibatch_size", c.minibatch_size);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.temperature = j.value("temperature", c.temperature);
  c.top_k = j.value("top_k", c.top_k);
  if (j.contains("metric")) {
    c.metric = embed::metric_from_name(j.at("metric").get<std::string>());
  }
  if (j.contains("thresholds")) {
    const auto& t = j.at("thresholds");
    c.thresholds.tau_prefer = t.value("tau_prefer", c.thresholds.tau_prefer);
    c.thresholds.tau_likelihood = t.value("tau_likelihood", c.thresholds.tau_likelihood);
    c.thresholds.tau_dist = t.value("tau_dist", c.thresholds.tau_dist);
    c.thresholds.coefficient = t.value("coefficient", c.thresholds.coefficient);
    c.thresholds.k = t.value("k", c.thresholds.k);
  }
  if (j.contains("generation_mode")) {
    c.generation_mode = mode_from_name(j.at("generation_mode").get<std::string>());
  }
  c.target_size = j.value("target_size", c.target_size);
  c.pass_budget = j.value("pass_budget", c.pass_budget);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string PsgConfig::digest() const { return digest_hex(to_json()); }

// -----------------------------------------------------------------------------
// records
// -----------------------------------------------------------------------------

namespace {

json record_to_json(const SurrogateRecord& r) {
  json j;
  j["text"] = r.text;
  if (r.seed_sentence_id >= 0) j["seed_sentence_id"] = r.seed_sentence_id;
  j["prefer_delta"] = r.prefer_delta;
  j["base_likelihood"] = r.base_likelihood;
  j["knn_distance"] = r.knn_distance;
  j["accepted"] = r.accepted;
  if (!r.reject_reason.empty()) j["reject_reason"] = r.reject_reason;
  if (!r.round_trace.empty()) j["round_trace"] = r.round_trace;
  return j;
}

SurrogateRecord record_from_json(const json& j) {
  SurrogateRecord r;
  r.text = j.at("text").get<std::string>();
  r.seed_sentence_id = j.value("seed_sentence_id", int64_t{-1});
  r.prefer_delta = j.at("prefer_delta").get<double>();
  r.base_likelihood = j.at("base_likelihood").get<double>();
  r.knn_distance = j.at("knn_distance").get<double>();
  r.accepted = j.at("accepted").get<bool>();
  r.reject_reason = j.value("reject_reason", std::string{});
  if (j.contains("round_trace")) {
    r.round_trace = j.at("round_trace").get<std::vector<double>>();
  }
  return r;
}

}  // namespace

std::string SurrogateRecord::to_json() const { return record_to_json(*this).dump(); }

SurrogateRecord SurrogateRecord::from_json(const std::string& text) {
  return record_from_json(json::parse(text));
}

void SurrogateDataset::validate() const {
  for (const auto& r : records) {
    if (!r.accepted) {
      throw ConfigError("surrogates: dataset contains a rejected record");
    }
  }
}

std::string SurrogateDataset::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    json j = record_to_json(r);
    j["config_digest"] = config_digest;
    j["model_tag"] = model_tag;
    j["finetuned_tag"] = finetuned_tag;
    out += j.dump();
    out += '\n';
  }
  return out;
}

SurrogateDataset SurrogateDataset::from_jsonl(const std::string& text) {
  SurrogateDataset ds;
  size_t start = 0;
  bool first = true;
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string digest = j.value("config_digest", std::string{});
    const std::string mtag = j.value("model_tag", std::string{});
    const std::string ftag = j.value("finetuned_tag", std::string{});
    if (first) {
      ds.config_digest = digest;
      ds.model_tag = mtag;
      ds.finetuned_tag = ftag;
      first = false;
    } else if (digest != ds.config_digest || mtag != ds.model_tag ||
               ftag != ds.finetuned_tag) {
      throw ConfigError("surrogates: mixed provenance in one dataset");
    }
    ds.records.push_back(record_from_json(j));
  }
  ds.validate();
  return ds;
}

// -----------------------------------------------------------------------------
// embedding-separation GCG
// -----------------------------------------------------------------------------

TokenSeq gcg_maximize_distance(const Lm& model, const TokenSeq& ids,
                               const std::vector<int64_t>& free_positions,
                               const EmbeddingIndex& index, const PsgConfig& cfg,
                               Rng& rng, std::vector<double>* loss_trace) {
  cfg.validate();
  index.validate();
  if (index.size() == 0) throw ConfigError("separation: empty embedding index");
  if (index.vectors.cols() != model.config().d_model) {
    throw CompatError("separation: index dimension does not match the model");
  }
  if (free_positions.empty()) {
    log_warn("separation: no free positions; sequence returned unchanged");
    return ids;
  }

  TokenSeq cur = ids;
  for (int64_t round = 0; round < cfg.gcg_iters_per_round; ++round) {
    const size_t m =
        std::min<size_t>(static_cast<size_t>(cfg.minibatch_size), index.size());
    auto rows = sample_without_replacement(index.size(), m, rng);
    // fixed summation order: re-evaluating a sequence under the same row set
    // reproduces its loss bitwise, which keeps the per-round trace monotone
    std::sort(rows.begin(), rows.end());

    const auto loss_fn = [&](const lm::ForwardTrace& trace) {
      lm::TraceGrad tg;
      const Mat& h = trace.hidden.back();
      const auto T = h.rows();
      const auto d = h.cols();
      const Vec e = h.colwise().mean().transpose();
      double dist_sum = 0.0;
      Vec de = Vec::Zero(d);
      const bool grad_pass = trace.full_rows.size() != 0;
      for (const size_t ri : rows) {
        const Vec row = index.vectors.row(static_cast<Eigen::Index>(ri)).transpose();
        dist_sum += embed::distance(e, row, index.metric);
        if (!grad_pass) continue;
        if (index.metric == embed::DistanceMetric::L2) {
          const Vec diff = e - row;
          const double n = diff.norm();
          if (n > 0.0) de += diff / n;  // coincident points contribute no pull
        } else {
          const double ne = e.norm(), nr = row.norm();  // nonzero: distance() checked
          const Vec eh = e / ne, rh = row / nr;
          de += (eh.dot(rh) * eh - rh) / ne;
        }
      }
      tg.loss = -cfg.w_dist * dist_sum / static_cast<double>(m);
      if (grad_pass) {
        de *= -cfg.w_dist / static_cast<double>(m);
        Mat dh(T, d);
        // every position feeds the mean embedding equally
        dh.rowwise() = (de / static_cast<double>(T)).transpose();
        tg.d_hidden.emplace_back(model.config().n_layers, std::move(dh));
      }
      return tg;
    };

    gcg::GcgOptions opt;
    opt.iters = 1;
    opt.topk = cfg.gcg_topk;
    opt.batch = cfg.gcg_batch;
    opt.value_needs_hidden = true;
    auto step = gcg::gcg_minimize(model, cur, free_positions, loss_fn, opt, rng);
    cur = std::move(step.ids);
    if (loss_trace) {
      if (round == 0) loss_trace->push_back(step.trajectory.front());
      loss_trace->push_back(step.trajectory.back());
    }
  }
  return cur;
}

// -----------------------------------------------------------------------------
// rephrasing
// -----------------------------------------------------------------------------

TokenSeq build_rephrase_prompt(const TokenSeq& x_star, const corpus::Tokenizer& tok) {
  if (x_star.empty()) throw ConfigError("rephrase: empty sequence");
  TokenSeq out = tok.encode("Rephrase: ");
  out.insert(out.end(), x_star.begin(), x_star.end());
  const TokenSeq tail = tok.encode(" Rephrased: ");
  out.insert(out.end(), tail.begin(), tail.end());
  return out;
}

TokenSeq psg_iteration(const Lm& theta, const Lm& theta_f, const corpus::Tokenizer& tok,
                       const TokenSeq& x, const EmbeddingIndex& index,
                       const PsgConfig& cfg, Rng& rng) {
  cfg.validate();
  if (x.empty()) throw ConfigError("psg: empty candidate");
  if (!index.model_tag.empty() && index.model_tag != theta_f.tag()) {
    throw CompatError("psg: embedding index was not built under the finetuned model");
  }
  const int64_t window = std::min(theta.config().max_seq, theta_f.config().max_seq);
  const int64_t wrap = static_cast<int64_t>(tok.encode("Rephrase: ").size()) +
                       static_cast<int64_t>(tok.encode(" Rephrased: ").size());
  // the prompt cedes enough window for a full-length sample
  const int64_t keep = window - cfg.free_tokens - wrap - cfg.max_tokens;
  if (keep < 1) throw ConfigError("psg: context window too small for the prompt");
  TokenSeq xt(x.begin(),
              x.begin() + std::min<int64_t>(static_cast<int64_t>(x.size()), keep));

  TokenSeq with_free = xt;
  std::vector<int64_t> free_pos;
  for (int64_t i = 0; i < cfg.free_tokens; ++i) {
    free_pos.push_back(static_cast<int64_t>(with_free.size()));
    with_free.push_back(static_cast<lm::TokenId>(
        rng.uniform_int(static_cast<uint64_t>(theta_f.config().vocab_size))));
  }
  const TokenSeq x_star =
      cfg.free_tokens > 0
          ? gcg_maximize_distance(theta_f, with_free, free_pos, index, cfg, rng)
          : with_free;

  const TokenSeq prompt = build_rephrase_prompt(x_star, tok);
  TokenSeq out = lm::sample_mixed(theta, theta_f, prompt, cfg.w_prefer, cfg.w_likelihood,
                                  cfg.temperature, cfg.top_k, cfg.max_tokens,
                                  rng.next_u64());
  if (out.empty()) {
    out = lm::sample_mixed(theta, theta_f, prompt, cfg.w_prefer, cfg.w_likelihood,
                           cfg.temperature, cfg.top_k, cfg.max_tokens, rng.next_u64());
  }
  return out;  // still empty ⇒ degenerate candidate
}

// -----------------------------------------------------------------------------
// filtering
// -----------------------------------------------------------------------------

SurrogateRecord filter_candidate(const Lm& theta, const Lm& theta_f,
                                 const corpus::Tokenizer& tok, const std::string& text,
                                 const EmbeddingIndex& index,
                                 const embed::Thresholds& thresholds) {
  if (!index.model_tag.empty() && index.model_tag != theta_f.tag()) {
    throw CompatError("filter: embedding index was not built under the finetuned model");
  }
  SurrogateRecord rec;
  rec.text = text;
  TokenSeq ids = tok.encode(text);
  if (ids.size() < 2) {
    rec.reject_reason = "untokenizable";
    return rec;
  }
  const auto window = static_cast<size_t>(
      std::min(theta.config().max_seq, theta_f.config().max_seq));
  if (ids.size() > window) ids.resize(window);  // scoring view only; text intact

  // the same bare-sequence convention the thresholds were computed with
  rec.base_likelihood = theta.mean_logprob(ids);
  rec.prefer_delta = theta_f.mean_logprob(ids) - rec.base_likelihood;
  const Vec q = embed::embed_sentence(theta_f, ids);
  const int64_t k = embed::clamp_k(thresholds.k, index.size());
  rec.knn_distance = embed::mean_knn_distance(index, q, k);

  std::string why;
  auto fail = [&](const char* what) {
    if (!why.empty()) why += '+';
    why += what;
  };
  if (!(rec.prefer_delta > thresholds.tau_prefer)) fail("prefer");
  if (!(rec.knn_distance > thresholds.tau_dist)) fail("dist");
  if (!(rec.base_likelihood > thresholds.tau_likelihood)) fail("likelihood");
  rec.accepted = why.empty();
  rec.reject_reason = why;
  return rec;
}

// -----------------------------------------------------------------------------
// full generation loop
// -----------------------------------------------------------------------------

namespace {

// continuation under θ: greedy tokens after the framed sentence, cut to the
// next sentence boundary
TokenSeq seed_continuation(const Lm& theta, const corpus::Sentence& sent,
                           const corpus::Tokenizer& tok, const PsgConfig& cfg) {
  const int64_t window = theta.config().max_seq;
  int64_t n = std::max<int64_t>(1, cfg.max_tokens / 2);
  n = std::min(n, window - 1);
  TokenSeq prompt;
  prompt.push_back(lm::kEotId);
  const TokenSeq ids = tok.encode(sent.text);
  prompt.insert(prompt.end(), ids.begin(), ids.end());
  if (static_cast<int64_t>(prompt.size()) > window - n) {
    prompt.resize(static_cast<size_t>(window - n));
  }
  TokenSeq gen = lm::greedy_decode(theta, prompt, n);
  // strip boundary sentinels: keep the first full sentence of the continuation
  size_t b = 0;
  while (b < gen.size() && gen[b] == lm::kEotId) ++b;
  size_t e = b;
  while (e < gen.size() && gen[e] != lm::kEotId) ++e;
  return TokenSeq(gen.begin() + static_cast<int64_t>(b),
                  gen.begin() + static_cast<int64_t>(e));
}

TokenSeq seed_from_scratch(const Lm& theta, const Lm& theta_f, const PsgConfig& cfg,
                           Rng& rng) {
  const TokenSeq prompt{lm::kEotId};
  TokenSeq out = lm::sample_mixed(theta, theta_f, prompt, cfg.w_prefer,
                                  cfg.w_likelihood, cfg.temperature, cfg.top_k,
                                  cfg.max_tokens, rng.next_u64());
  if (out.empty()) {
    out = lm::sample_mixed(theta, theta_f, prompt, cfg.w_prefer, cfg.w_likelihood,
                           cfg.temperature, cfg.top_k, cfg.max_tokens, rng.next_u64());
  }
  return out;
}

}  // namespace

SurrogateDataset generate_surrogates(const model::ModelCheckpoint& theta,
                                     const model::ModelCheckpoint& theta_f,
                                     const std::vector<corpus::Sentence>& d_u,
                                     const corpus::Tokenizer& tok, const PsgConfig& cfg,
                                     int threads,
                                     std::vector<SurrogateRecord>* rejected) {
  cfg.validate();
  if (d_u.empty()) throw ConfigError("surrogates: empty unlearn set");
  if (theta.tag == "unlearned" || theta_f.tag == "unlearned") {
    throw ConfigError("surrogates: generation must not see an unlearned model");
  }
  if (theta.config != theta_f.config) {
    throw CompatError("surrogates: checkpoints do not share a layout");
  }
  if (!theta.tokenizer_hash.empty() && !theta_f.tokenizer_hash.empty() &&
      theta.tokenizer_hash != theta_f.tokenizer_hash) {
    throw CompatError("surrogates: checkpoints do not share a tokenizer");
  }

  const Lm base(theta);
  const Lm finetuned(theta_f);
  const EmbeddingIndex index = embed::build_index(finetuned, d_u, tok, cfg.metric,
                                                  threads);
  const int64_t trace_k = embed::clamp_k(cfg.thresholds.k, index.size());

  // one candidate per (sentence, pass), on its own stream
  const auto make_candidate = [&](const corpus::Sentence& sent,
                                  int64_t pass) -> SurrogateRecord {
    Rng rng(Rng::mix(Rng::mix(cfg.seed, static_cast<uint64_t>(sent.id)),
                     static_cast<uint64_t>(pass)));
    TokenSeq x = cfg.generation_mode == GenerationMode::ContinueFromDu
                     ? seed_continuation(base, sent, tok, cfg)
                     : seed_from_scratch(base, finetuned, cfg, rng);
    std::vector<double> trace;
    for (int64_t it = 0; it < cfg.iterations && !x.empty(); ++it) {
      x = psg_iteration(base, finetuned, tok, x, index, cfg, rng);
      if (!x.empty()) {
        trace.push_back(embed::mean_knn_distance(
            index, embed::embed_sentence(finetuned, x), trace_k));
      }
    }
    SurrogateRecord rec;
    if (x.empty()) {
      rec.reject_reason = "degenerate";
    } else {
      rec = filter_candidate(base, finetuned, tok, tok.decode(x), index,
                             cfg.thresholds);
    }
    rec.seed_sentence_id =
        cfg.generation_mode == GenerationMode::ContinueFromDu ? sent.id : -1;
    rec.round_trace = std::move(trace);
    return rec;
  };

  std::vector<size_t> order(d_u.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return d_u[a].id < d_u[b].id; });

  SurrogateDataset ds;
  ds.config_digest = cfg.digest();
  ds.model_tag = theta.tag;
  ds.finetuned_tag = theta_f.tag;

  std::unordered_set<std::string> seen;
  std::map<std::string, int64_t> reject_hist;
  // fixed chunking keeps the early-stop point independent of the thread count
  constexpr size_t kChunk = 64;
  bool done = false;
  int64_t passes_used = 0;
  for (int64_t pass = 0; pass < cfg.pass_budget && !done; ++pass) {
    passes_used = pass + 1;
    for (size_t c0 = 0; c0 < order.size() && !done; c0 += kChunk) {
      const size_t c1 = std::min(order.size(), c0 + kChunk);
      std::vector<SurrogateRecord> buf(c1 - c0);
      parallel_for(c1 - c0, threads, [&](size_t j) {
        buf[j] = make_candidate(d_u[order[c0 + j]], pass);
      });
      for (auto& rec : buf) {
        if (done) break;
        if (rec.accepted && seen.count(rec.text)) {
          rec.accepted = false;
          rec.reject_reason = "duplicate";
        }
        if (rec.accepted) {
          seen.insert(rec.text);
          ds.records.push_back(std::move(rec));
          if (static_cast<int64_t>(ds.records.size()) >= cfg.target_size) done = true;
        } else {
          ++reject_hist[rec.reject_reason.empty() ? "unknown" : rec.reject_reason];
          if (rejected) rejected->push_back(std::move(rec));
        }
      }
    }
  }

  if (ds.records.empty() || static_cast<int64_t>(ds.records.size()) < cfg.target_size) {
    std::string hist;
    for (const auto& [reason, count] : reject_hist) {
      if (!hist.empty()) hist += ", ";
      hist += reason + "=" + std::to_string(count);
    }
    if (ds.records.empty()) {
      throw UnderYieldError("surrogates: no candidates accepted after " +
                            std::to_string(passes_used) + " passes (rejections: " +
                            (hist.empty() ? "none" : hist) + ")");
    }
    log_warn("surrogates: accepted " + std::to_string(ds.records.size()) + " of " +
             std::to_string(cfg.target_size) + " after " +
             std::to_string(passes_used) + " passes (rejections: " + hist + ")");
  }
  return ds;
}

}  // namespace ula::psg
