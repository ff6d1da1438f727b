#pragma once

// Sentence embeddings, distances, the exact nearest-neighbor index over the
// unlearn set, and the three surrogate-filter thresholds.

#include <string>
#include <utility>
#include <vector>

#include "lm.hpp"

namespace ula::embed {

using lm::Mat;
using lm::Vec;

enum class DistanceMetric { L2, Cosine };

std::string metric_name(DistanceMetric m);
DistanceMetric metric_from_name(const std::string& name);

// e(x): arithmetic mean over positions of the final-block hidden states.
Vec embed_sentence(const lm::Lm& model, const lm::TokenSeq& ids);

// L2 → ‖a−b‖; Cosine → 1 − a·b/(‖a‖‖b‖) (zero vectors rejected).
double distance(const Vec& a, const Vec& b, DistanceMetric metric);

// =============================================================================
// EmbeddingIndex: E_f, one row per sentence. Exact brute-force queries.
// =============================================================================

struct EmbeddingIndex {
  Mat vectors;               // [n, d]
  std::vector<int64_t> ids;  // aligned sentence ids
  DistanceMetric metric = DistanceMetric::L2;
  std::string model_tag;

  size_t size() const { return ids.size(); }
  void validate() const;

  std::string to_csv() const;  // sentence_id,v0..v{d-1}
  static EmbeddingIndex from_csv(const std::string& text, DistanceMetric metric,
                                 const std::string& model_tag);
};

EmbeddingIndex build_index(const lm::Lm& model,
                           const std::vector<corpus::Sentence>& sentences,
                           const corpus::Tokenizer& tok, DistanceMetric metric,
                           int threads);

// Exact k smallest distances, ascending, ties broken by lower sentence id.
// pre: 1 <= k <= index size
std::vector<std::pair<int64_t, double>> knn(const EmbeddingIndex& index,
                                            const Vec& query, int64_t k);

double mean_knn_distance(const EmbeddingIndex& index, const Vec& query, int64_t k);

// =============================================================================
// Thresholds
// =============================================================================

struct Thresholds {
  double tau_prefer = 0.0;
  double tau_likelihood = 0.0;
  double tau_dist = 0.0;
  double coefficient = 1.5;
  int64_t k = 100;

  std::string to_json(const std::string& model_tag,
                      const std::string& finetuned_tag, DistanceMetric metric) const;
  static Thresholds from_json(const std::string& text);
};

// R-7 quantile (linear interpolation, h = (n−1)p). values need not be sorted.
double quantile_r7(std::vector<double> values, double p);

// Requested neighbor count clamped to index size − 1 (self is excluded in the
// τ_dist baseline); logs when it bites.
int64_t clamp_k(int64_t requested, size_t index_size);

// coefficient × mean over index points of the mean distance to their k
// nearest neighbors excluding self. pre: index size > k >= 1
double compute_tau_dist(const EmbeddingIndex& index, int64_t k, double coefficient);

// 0.25 quantile of mean_logprob(θ_f, x) − mean_logprob(θ, x) over x ∈ D_u.
double compute_tau_prefer(const lm::Lm& theta, const lm::Lm& theta_f,
                          const std::vector<corpus::Sentence>& d_u,
                          const corpus::Tokenizer& tok, int threads);

// 0.25 quantile of mean_logprob(θ, x) over x ∈ D_u.
double compute_tau_likelihood(const lm::Lm& theta,
                              const std::vector<corpus::Sentence>& d_u,
                              const corpus::Tokenizer& tok, int threads);

}  // namespace ula::embed
