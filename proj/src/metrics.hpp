#pragma once

// Seven per-sentence scores of retained knowledge, all oriented so that a
// higher raw value means the model still knows the sentence. Sign conventions
// are fixed here, at each metric's definition, so downstream comparisons never
// flip them.

#include <cstdint>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "lm.hpp"
#include "model.hpp"

namespace ula::metrics {

enum class MetricKind {
  Likelihood,
  ZlibRatio,
  MinKProb,
  MinKPlusPlus,
  Memorization,
  Orthogonalization,
  LogitLens,
};

constexpr int kMetricCount = 7;
const std::vector<MetricKind>& all_metrics();
std::string metric_name(MetricKind m);
MetricKind metric_from_name(const std::string& name);

struct MetricConfig {
  double min_k_fraction = 0.2;  // fraction of scored tokens kept, in (0, 1]
  int64_t mem_adv_tokens = 8;   // adversarial prefix length
  int64_t mem_gcg_iters = 50;
  int64_t mem_gcg_topk = 64;
  int64_t mem_gcg_batch = 64;
  double ortho_fraction = 0.05; // leading share of the relearn set
  int64_t ortho_steps = 50;
  int64_t ortho_batch = 8;
  double ortho_lr = 1e-3;
  double ortho_scale = 1.0;
  int64_t lens_layer = -1;      // probed block output; < 0 → n_layers / 2
  double sigma_floor = 1e-6;    // lower bound on the per-row std deviation
  uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static MetricConfig from_json(const std::string& text);
  std::string digest() const;
};

struct ScoreTable {
  MetricKind metric = MetricKind::Likelihood;
  std::string model_tag;
  std::string dataset_tag;  // one of D_u, D~u, D_r
  std::vector<std::pair<int64_t, double>> rows;  // (sentence id, raw score)

  std::string to_csv() const;
  // sidecar describing what produced the table
  std::string sidecar_json(const std::string& config_digest) const;
  static ScoreTable from_csv(const std::string& csv, const std::string& sidecar);
};

// mean log-probability of the realized tokens; higher ⇒ retained
double likelihood_score(const lm::Lm& model, const lm::TokenSeq& ids);

// summed log-probability ÷ (8 × zlib-compressed byte count of the raw text).
// Numerator ≤ 0 and denominator > 0, so higher (toward 0) ⇒ retained.
double zlib_ratio_score(const lm::Lm& model, const lm::TokenSeq& ids,
                        const std::string& raw_text);

// bits assigned by the pinned reference compressor (zlib container, level 6)
int64_t zlib_entropy_bits(const std::string& text);

// mean of the ⌈k·n⌉ smallest entries, accumulated in ascending order
double min_k_of(std::vector<double> values, double k);

// min_k_of over the sentence's token log-probs; higher ⇒ retained
double min_k_prob_score(const lm::Lm& model, const lm::TokenSeq& ids, double k);

// per position, z = (logp − μ)/max(σ, sigma_floor) with μ, σ the mean and
// standard deviation of the row's log-probs under the row's own probability
// weights; returns the mean of the ⌈k·(len−1)⌉ smallest z. Higher ⇒ retained.
double min_k_pp_score(const lm::Lm& model, const lm::TokenSeq& ids, double k,
                      double sigma_floor);

// optimizes a mem_adv_tokens prefix to maximize the target's summed log-prob,
// then greedy-decodes len(target) tokens from that prefix and returns the
// fraction of positions matching the target; higher ⇒ retained
double memorization_score(const lm::Lm& model, const lm::TokenSeq& target,
                          const MetricConfig& cfg);

// relearns theta_u_hat on the leading ortho_fraction of relearn_set for
// ortho_steps, then applies the parameter delta back scaled by ortho_scale;
// tagged "modified"
model::ModelCheckpoint build_ortho_model(const model::ModelCheckpoint& theta_u_hat,
                                         const std::vector<corpus::Sentence>& relearn_set,
                                         const corpus::Tokenizer& tok,
                                         const MetricConfig& cfg);

// mean log-prob of ids under the relearn-and-apply model built above; theta
// only validates that the two checkpoints share a layout. Higher ⇒ retained.
double orthogonalization_score(const model::ModelCheckpoint& theta,
                               const model::ModelCheckpoint& theta_u_hat,
                               const lm::TokenSeq& ids,
                               const std::vector<corpus::Sentence>& relearn_set,
                               const corpus::Tokenizer& tok, const MetricConfig& cfg);

// mean realized-token log-prob when the final layer norm + output head read
// the hidden states after block lens_layer (0 = embedding output); higher ⇒
// retained
double logit_lens_score(const lm::Lm& model, const lm::TokenSeq& ids,
                        int64_t lens_layer);

struct ScoreContext {
  // required for Orthogonalization: the pre-unlearning model and relearn set
  const model::ModelCheckpoint* theta = nullptr;
  const std::vector<corpus::Sentence>* relearn_set = nullptr;
  std::string dataset_tag = "D_u";
  int64_t threads = 1;
};

// One row per sentence, in input order; deterministic for fixed inputs.
ScoreTable score_dataset(const model::ModelCheckpoint& model,
                         const std::vector<corpus::Sentence>& data,
                         const corpus::Tokenizer& tok, MetricKind metric,
                         const MetricConfig& cfg, const ScoreContext& ctx = {});

}  // namespace ula::metrics
