#include "unlearn.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <unordered_map>

#include "common.hpp"
#include "embed.hpp"

namespace ula::unlearn {

using json = nlohmann::ordered_json;
using lm::Lm;
using lm::Mat;
using lm::TokenSeq;
using lm::TraceGrad;
using lm::Vec;
using model::ModelCheckpoint;

void NpoConfig::validate() const {
  if (!(beta > 0.0)) throw ConfigError("npo: beta must be > 0");
  if (retain_weight < 0.0) throw ConfigError("npo: retain_weight must be >= 0");
  train.validate();
}

void RmuConfig::validate() const {
  if (retain_weight < 0.0) throw ConfigError("rmu: retain_weight must be >= 0");
  train.validate();
}

std::string NpoConfig::to_json() const {
  json j;
  j["beta"] = beta;
  j["retain_weight"] = retain_weight;
  j["train"] = json::parse(train.to_json());
  return j.dump(2);
}

NpoConfig NpoConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("npo config: bad json: ") + e.what());
  }
  try {
    NpoConfig c;
    c.beta = j.value("beta", c.beta);
    c.retain_weight = j.value("retain_weight", c.retain_weight);
    if (j.contains("train")) c.train = lm::TrainConfig::from_json(j["train"].dump());
    return c;
  } catch (const json::exception& e) {
    throw IoError(std::string("npo config: mistyped field: ") + e.what());
  }
}

std::string RmuConfig::to_json() const {
  json j;
  j["layer"] = layer;
  j["steer_scale"] = steer_scale;
  j["retain_weight"] = retain_weight;
  j["steer_seed"] = steer_seed;
  j["train"] = json::parse(train.to_json());
  return j.dump(2);
}

RmuConfig RmuConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("rmu config: bad json: ") + e.what());
  }
  try {
    RmuConfig c;
    c.layer = j.value("layer", c.layer);
    c.steer_scale = j.value("steer_scale", c.steer_scale);
    c.retain_weight = j.value("retain_weight", c.retain_weight);
    c.steer_seed = j.value("steer_seed", c.steer_seed);
    if (j.contains("train")) c.train = lm::TrainConfig::from_json(j["train"].dump());
    return c;
  } catch (const json::exception& e) {
    throw IoError(std::string("rmu config: mistyped field: ") + e.what());
  }
}

std::string TrainingLog::to_json() const {
  json j;
  j["method"] = method;
  json res = json::object();
  for (const auto& [k, v] : resolved) res[k] = v;
  j["resolved"] = res;
  json arr = json::array();
  for (const auto& e : entries) {
    arr.push_back({{"step", e.step},
                   {"forget", e.forget},
                   {"retain", e.retain},
                   {"total", e.total}});
  }
  j["entries"] = arr;
  return j.dump(2);
}

namespace {

void check_common(const ModelCheckpoint& theta, const std::vector<corpus::Sentence>& d_u,
                  const std::vector<corpus::Sentence>& d_r, const corpus::Tokenizer& tok,
                  const char* name) {
  if (theta.tag != "base" && theta.tag != "finetuned") {
    throw ConfigError(std::string(name) + ": input model must be tagged base or finetuned");
  }
  if (d_u.empty()) throw ConfigError(std::string(name) + ": empty forget set");
  if (d_r.empty()) throw ConfigError(std::string(name) + ": empty retain set");
  if (!theta.tokenizer_hash.empty() && theta.tokenizer_hash != tok.hash()) {
    throw CompatError(std::string(name) + ": tokenizer does not match checkpoint");
  }
}

std::vector<TokenSeq> frame_all(const std::vector<corpus::Sentence>& data,
                                const corpus::Tokenizer& tok, int64_t max_seq) {
  std::vector<TokenSeq> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(lm::frame_sentence(tok, s.text, max_seq));
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

ModelCheckpoint npo_unlearn(const ModelCheckpoint& theta,
                            const std::vector<corpus::Sentence>& d_u,
                            const std::vector<corpus::Sentence>& d_r,
                            const corpus::Tokenizer& tok, const NpoConfig& cfg,
                            TrainingLog* log) {
  cfg.validate();
  check_common(theta, d_u, d_r, tok, "npo");
  if (log) {
    log->method = "npo";
    log->resolved = {{"beta", cfg.beta}, {"retain_weight", cfg.retain_weight}};
    log->entries.clear();
  }
  if (cfg.train.steps == 0) {
    ModelCheckpoint out = theta;
    out.tag = "unlearned";
    out.validate();
    return out;
  }

  const int64_t max_seq = theta.config.max_seq;
  const auto forget_seqs = frame_all(d_u, tok, max_seq);
  const auto retain_seqs = frame_all(d_r, tok, max_seq);

  // the reference model is frozen, so its summed log-probs are constants
  Lm ref(theta);
  std::vector<double> ref_sum(forget_seqs.size());
  for (size_t i = 0; i < forget_seqs.size(); ++i) {
    double s = 0.0;
    for (double lp : ref.forward_trace(forget_seqs[i], false, false).token_logprobs) {
      s += lp;
    }
    ref_sum[i] = s;
  }

  Lm model(theta);
  Rng rng(cfg.train.seed);
  const int64_t b = cfg.train.batch_size;

  lm::adam_loop(
      model, cfg.train,
      [&](int64_t step, std::vector<double>& grad) {
        std::vector<size_t> fidx(static_cast<size_t>(b)), ridx(static_cast<size_t>(b));
        for (auto& i : fidx) i = static_cast<size_t>(rng.uniform_int(
                                 static_cast<int64_t>(forget_seqs.size())));
        for (auto& i : ridx) i = static_cast<size_t>(rng.uniform_int(
                                 static_cast<int64_t>(retain_seqs.size())));

        // forget: L = (2/β)·log(1+exp(βΔ)), Δ = Σ logp − Σ logp_ref.
        // dL/d logp[t, y] = 2·σ(βΔ), batch-averaged.
        double forget_loss = 0.0;
        for (size_t i : fidx) {
          const auto& ids = forget_seqs[i];
          const double sref = ref_sum[i];
          auto loss_fn = [&](const lm::ForwardTrace& tr) {
            double s = 0.0;
            for (double lp : tr.token_logprobs) s += lp;
            const double delta = s - sref;
            // log1p(exp(z)) computed stably on both sides of z = 0
            const double z = cfg.beta * delta;
            const double softplus =
                z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
            TraceGrad tg;
            tg.loss = (2.0 / cfg.beta) * softplus;
            const double w = 2.0 * sigmoid(z) / static_cast<double>(b);
            tg.d_logprob = Mat::Zero(static_cast<int64_t>(ids.size()),
                                     model.config().vocab_size);
            for (size_t t = 0; t + 1 < ids.size(); ++t) {
              tg.d_logprob(static_cast<int64_t>(t), ids[t + 1]) = w;
            }
            tg.loss /= static_cast<double>(b);
            return tg;
          };
          forget_loss += model.backward(ids, loss_fn, &grad).loss;
        }

        // retain: λ · token-mean cross-entropy over the retain batch
        int64_t positions = 0;
        for (size_t i : ridx) positions += static_cast<int64_t>(retain_seqs[i].size()) - 1;
        double retain_loss = 0.0;
        for (size_t i : ridx) {
          const auto& ids = retain_seqs[i];
          auto loss_fn = [&](const lm::ForwardTrace& tr) {
            TraceGrad tg;
            const double coeff = cfg.retain_weight / static_cast<double>(positions);
            tg.d_logprob = Mat::Zero(static_cast<int64_t>(ids.size()),
                                     model.config().vocab_size);
            for (size_t t = 0; t + 1 < ids.size(); ++t) {
              tg.loss -= coeff * tr.token_logprobs[t];
              tg.d_logprob(static_cast<int64_t>(t), ids[t + 1]) = -coeff;
            }
            return tg;
          };
          retain_loss += model.backward(ids, loss_fn, &grad).loss;
        }

        if (log) {
          log->entries.push_back(
              {step, forget_loss,
               cfg.retain_weight > 0.0 ? retain_loss / cfg.retain_weight : 0.0,
               forget_loss + retain_loss});
        }
        return forget_loss + retain_loss;
      },
      nullptr);

  auto out = model.to_checkpoint("unlearned");
  out.validate();
  return out;
}

Vec steer_direction(int64_t d_model, uint64_t steer_seed) {
  Rng rng(steer_seed);
  Vec u(d_model);
  for (int64_t i = 0; i < d_model; ++i) u(i) = rng.normal();
  const double n = u.norm();
  if (!(n > 0.0)) throw NumericError("rmu: degenerate steering direction");
  return u / n;
}

double resolve_steer_scale(const Lm& frozen, const std::vector<corpus::Sentence>& d_r,
                           const corpus::Tokenizer& tok, int64_t layer,
                           double configured) {
  if (configured > 0.0) return configured;
  const size_t n = std::min<size_t>(256, d_r.size());
  std::vector<double> norms;
  for (size_t i = 0; i < n; ++i) {
    const auto ids = lm::frame_sentence(tok, d_r[i].text, frozen.config().max_seq);
    const auto trace = frozen.forward_trace(ids, false, true);
    const Mat& h = trace.hidden.at(static_cast<size_t>(layer));
    for (int64_t t = 0; t < h.rows(); ++t) norms.push_back(h.row(t).norm());
  }
  return 5.0 * embed::quantile_r7(norms, 0.5);
}

ModelCheckpoint rmu_unlearn(const ModelCheckpoint& theta,
                            const std::vector<corpus::Sentence>& d_u,
                            const std::vector<corpus::Sentence>& d_r,
                            const corpus::Tokenizer& tok, const RmuConfig& cfg,
                            TrainingLog* log) {
  cfg.validate();
  check_common(theta, d_u, d_r, tok, "rmu");
  const int64_t n_layers = theta.config.n_layers;
  const int64_t layer = cfg.layer < 0 ? n_layers / 2 : cfg.layer;
  if (layer > n_layers) throw ConfigError("rmu: layer out of range");

  Lm frozen(theta);
  const Vec u = steer_direction(theta.config.d_model, cfg.steer_seed);
  const double c = resolve_steer_scale(frozen, d_r, tok, layer, cfg.steer_scale);
  if (log) {
    log->method = "rmu";
    log->resolved = {{"layer", static_cast<double>(layer)},
                     {"steer_scale", c},
                     {"retain_weight", cfg.retain_weight}};
    log->entries.clear();
  }
  if (cfg.train.steps == 0) {
    ModelCheckpoint out = theta;
    out.tag = "unlearned";
    out.validate();
    return out;
  }

  const int64_t max_seq = theta.config.max_seq;
  const auto forget_seqs = frame_all(d_u, tok, max_seq);
  const auto retain_seqs = frame_all(d_r, tok, max_seq);

  // Only the MLPs of the steered block and the two before it are trainable
  // (for ℓ = 0 the embeddings, the only parameters below that point). Keeping
  // the rest frozen confines the edit, which is what lets the retain anchor
  // actually hold: full-network Adam moves every parameter at ~lr regardless
  // of gradient scale, degrading retain likelihood as fast as forget.
  std::vector<uint8_t> trainable(theta.params.size(), 0);
  {
    const auto layout = model::make_layout(theta.config);
    auto mark = [&](const std::string& name) {
      for (const auto& t : layout) {
        if (t.name == name) {
          std::fill(trainable.begin() + static_cast<int64_t>(t.offset),
                    trainable.begin() + static_cast<int64_t>(t.offset + t.size()), 1);
          return;
        }
      }
      throw ConfigError("rmu: unknown tensor " + name);
    };
    if (layer == 0) {
      mark("tok_emb");
      mark("pos_emb");
    } else {
      for (int64_t blk = std::max<int64_t>(0, layer - 3); blk <= layer - 1; ++blk) {
        const std::string p = "layers." + std::to_string(blk) + ".mlp.";
        mark(p + "w1");
        mark(p + "b1");
        mark(p + "w2");
        mark(p + "b2");
      }
    }
  }

  // anchors under the frozen model are constants; cache them lazily
  std::unordered_map<size_t, Vec> frozen_mean;
  auto anchor = [&](size_t i) -> const Vec& {
    auto it = frozen_mean.find(i);
    if (it == frozen_mean.end()) {
      const auto tr = frozen.forward_trace(retain_seqs[i], false, true);
      const Mat& h = tr.hidden.at(static_cast<size_t>(layer));
      it = frozen_mean.emplace(i, h.colwise().mean().transpose()).first;
    }
    return it->second;
  };

  Lm model(theta);
  Rng rng(cfg.train.seed);
  const int64_t b = cfg.train.batch_size;

  lm::adam_loop(
      model, cfg.train,
      [&](int64_t step, std::vector<double>& grad) {
        std::vector<size_t> fidx(static_cast<size_t>(b)), ridx(static_cast<size_t>(b));
        for (auto& i : fidx) i = static_cast<size_t>(rng.uniform_int(
                                 static_cast<int64_t>(forget_seqs.size())));
        for (auto& i : ridx) i = static_cast<size_t>(rng.uniform_int(
                                 static_cast<int64_t>(retain_seqs.size())));

        // forget: ‖h̄ − c·u‖² with h̄ the position mean, so each position row
        // receives (2/T)·(h̄ − c·u), batch-averaged
        double forget_loss = 0.0;
        for (size_t i : fidx) {
          const auto& ids = forget_seqs[i];
          auto loss_fn = [&](const lm::ForwardTrace& tr) {
            const Mat& h = tr.hidden.at(static_cast<size_t>(layer));
            const Vec mean = h.colwise().mean().transpose();
            const Vec diff = mean - c * u;
            const double T = static_cast<double>(h.rows());
            TraceGrad tg;
            tg.loss = diff.squaredNorm() / static_cast<double>(b);
            Mat dh(h.rows(), h.cols());
            dh.rowwise() = (diff * (2.0 / (T * static_cast<double>(b)))).transpose();
            tg.d_hidden.emplace_back(layer, std::move(dh));
            return tg;
          };
          forget_loss += model.backward(ids, loss_fn, &grad).loss;
        }

        double retain_loss = 0.0;
        for (size_t i : ridx) {
          const auto& ids = retain_seqs[i];
          const Vec& a = anchor(i);
          auto loss_fn = [&](const lm::ForwardTrace& tr) {
            const Mat& h = tr.hidden.at(static_cast<size_t>(layer));
            const Vec mean = h.colwise().mean().transpose();
            const Vec diff = mean - a;
            const double T = static_cast<double>(h.rows());
            const double w = cfg.retain_weight / static_cast<double>(b);
            TraceGrad tg;
            tg.loss = w * diff.squaredNorm();
            Mat dh(h.rows(), h.cols());
            dh.rowwise() = (diff * (2.0 * w / T)).transpose();
            tg.d_hidden.emplace_back(layer, std::move(dh));
            return tg;
          };
          retain_loss += model.backward(ids, loss_fn, &grad).loss;
        }

        for (size_t j = 0; j < grad.size(); ++j) {
          if (!trainable[j]) grad[j] = 0.0;
        }

        if (log) {
          log->entries.push_back(
              {step, forget_loss,
               cfg.retain_weight > 0.0 ? retain_loss / cfg.retain_weight : 0.0,
               forget_loss + retain_loss});
        }
        return forget_loss + retain_loss;
      },
      nullptr);

  auto out = model.to_checkpoint("unlearned");
  out.validate();
  return out;
}

}  // namespace ula::unlearn
