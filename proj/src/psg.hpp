#pragma once

// Surrogate-sentence construction: seed a candidate from the unlearn set (or
// from scratch), iterate (embedding-separation GCG over appended free tokens →
// rephrase prompt → two-model mixture sampling), then keep candidates that
// pass all three filter thresholds. The result is a dataset of fluent
// sentences the finetuned model prefers yet that sit far from the unlearn set
// in embedding space.

#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "embed.hpp"
#include "gcg.hpp"

namespace ula::psg {

enum class GenerationMode { ContinueFromDu, FromScratch };

std::string mode_name(GenerationMode m);
GenerationMode mode_from_name(const std::string& name);

struct PsgConfig {
  int64_t iterations = 3;  // composite (separate → rephrase → sample) rounds
  double w_prefer = 0.7;   // mixture weight on the finetuned model
  double w_likelihood = 0.3;  // mixture weight on the base model
  double w_dist = 1.0;        // scale of the separation objective
  int64_t free_tokens = 8;    // appended slots the GCG step may rewrite
  int64_t gcg_iters_per_round = 5;  // GCG coordinate steps per composite round
  int64_t gcg_topk = 32;            // gradient-ranked candidates per slot
  int64_t gcg_batch = 32;           // substitutions evaluated per GCG step
  int64_t minibatch_size = 32;      // embedding rows drawn per GCG step
  int64_t max_tokens = 32;          // sampling budget per generation
  double temperature = 1.0;
  int64_t top_k = 50;  // sampling truncation; <= 0 keeps the full vocabulary
  embed::DistanceMetric metric = embed::DistanceMetric::L2;
  embed::Thresholds thresholds;
  GenerationMode generation_mode = GenerationMode::ContinueFromDu;
  int64_t target_size = 100;  // accepted records wanted
  int64_t pass_budget = 10;   // full passes over the unlearn set allowed
  uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static PsgConfig from_json(const std::string& text);
  std::string digest() const;  // fingerprint of every generation-relevant field
};

struct SurrogateRecord {
  std::string text;
  int64_t seed_sentence_id = -1;  // origin sentence; -1 when seeded from scratch
  double prefer_delta = 0.0;      // mean_logprob(θ_f) − mean_logprob(θ)
  double base_likelihood = 0.0;   // mean_logprob(θ)
  double knn_distance = 0.0;      // mean distance to the k nearest index rows
  bool accepted = false;
  std::string reject_reason;         // empty when accepted
  std::vector<double> round_trace;   // knn_distance after each composite round

  std::string to_json() const;
  static SurrogateRecord from_json(const std::string& text);
};

struct SurrogateDataset {
  std::vector<SurrogateRecord> records;  // accepted records only
  std::string config_digest;
  std::string model_tag;      // θ
  std::string finetuned_tag;  // θ_f

  void validate() const;  // every record carries accepted = true
  std::string to_jsonl() const;
  static SurrogateDataset from_jsonl(const std::string& text);
};

// Rewrites the tokens at free_positions to maximize w_dist × (mean distance
// from the sequence embedding under `model` to a fresh minibatch of index
// rows). Per coordinate step: rank candidate tokens by the one-hot gradient,
// evaluate a batch of single substitutions plus the unmodified sequence
// against the same minibatch, and keep the minimum-loss sequence — so at a
// fixed minibatch the loss never increases. The sentence tokens outside
// free_positions are never touched. Empty free_positions or
// gcg_iters_per_round = 0 returns the input unchanged. When provided,
// loss_trace receives the start loss then the best loss after each step
// (each under that step's minibatch).
lm::TokenSeq gcg_maximize_distance(const lm::Lm& model, const lm::TokenSeq& ids,
                                   const std::vector<int64_t>& free_positions,
                                   const embed::EmbeddingIndex& index,
                                   const PsgConfig& cfg, Rng& rng,
                                   std::vector<double>* loss_trace = nullptr);

// encode("Rephrase: ") ++ x_star ++ encode(" Rephrased: ").
lm::TokenSeq build_rephrase_prompt(const lm::TokenSeq& x_star,
                                   const corpus::Tokenizer& tok);

// One composite round: append free_tokens slots (seeded uniformly from rng),
// run gcg_maximize_distance under θ_f (the index's embedding space), wrap the
// result in the rephrase prompt, and sample the next sentence from the
// θ_f/θ mixture. Returns only the sampled tokens. Zero tokens sampled →
// one retry with a fresh stream, then an empty result marks the candidate
// degenerate.
lm::TokenSeq psg_iteration(const lm::Lm& theta, const lm::Lm& theta_f,
                           const corpus::Tokenizer& tok, const lm::TokenSeq& x,
                           const embed::EmbeddingIndex& index, const PsgConfig& cfg,
                           Rng& rng);

// Scores a candidate against the three thresholds: prefer_delta and
// base_likelihood from the bare token sequence (matching how the thresholds
// are computed), knn_distance from the sequence embedding under θ_f. Sets
// accepted iff all three strict inequalities hold; never mutates the text.
// Texts shorter than two tokens are rejected as untokenizable.
SurrogateRecord filter_candidate(const lm::Lm& theta, const lm::Lm& theta_f,
                                 const corpus::Tokenizer& tok, const std::string& text,
                                 const embed::EmbeddingIndex& index,
                                 const embed::Thresholds& thresholds);

// Full generation loop. Seeds one candidate per (sentence, pass) — greedy
// continuation of the sentence under θ in ContinueFromDu mode, mixture
// sampling from the end-of-text sentinel in FromScratch mode — applies
// `iterations` composite rounds, filters, and deduplicates exact texts.
// Passes repeat (fresh per-candidate streams derived from seed, sentence id,
// and pass) until target_size records are accepted or pass_budget passes
// complete. Candidates within a pass are independent; records are assembled
// in sentence-id order, so results are identical for any thread count.
// Rejected candidates are appended to *rejected when provided. Zero
// acceptances after the full budget raise UnderYieldError carrying the
// rejection-reason histogram. Neither checkpoint may be tagged "unlearned":
// surrogate construction must not see the unlearned model.
SurrogateDataset generate_surrogates(const model::ModelCheckpoint& theta,
                                     const model::ModelCheckpoint& theta_f,
                                     const std::vector<corpus::Sentence>& d_u,
                                     const corpus::Tokenizer& tok, const PsgConfig& cfg,
                                     int threads = 1,
                                     std::vector<SurrogateRecord>* rejected = nullptr);

}  // namespace ula::psg
