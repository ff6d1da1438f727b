#pragma once

// Statistics over score tables: joint [0,1] normalization, standardized mean
// differences with a subsampling bootstrap and the 0.5 inconsistency verdict,
// the nearest-neighbor-distance correlation analysis, and grid sweeps that
// rerun surrogate generation while varying one construction axis.

#include <cstdint>
#include <string>
#include <vector>

#include "metrics.hpp"
#include "psg.hpp"

namespace ula::eval {

// =============================================================================
// standardized mean difference
// =============================================================================

// (mean(a) − mean(b)) / s_pooled with the Bessel-corrected two-sample pooled
// standard deviation. Sign convention: a is the surrogate set, b the unlearn
// set, so positive means the surrogates look less unlearned.
// pre: both lists have >= 2 entries; errors: zero pooled sd.
double smd(const std::vector<double>& a, const std::vector<double>& b);

struct SmdResult {
  double mean_smd = 0.0;
  double sd_smd = 0.0;
  int64_t n_repeats = 0;
  int64_t sample_size = 0;
  bool inconsistent = false;  // |mean_smd| > 0.5

  std::string to_json() const;
  static SmdResult from_json(const std::string& text);
};

// Repeats rounds of: take all of table_a, draw sample_size rows from table_b
// without replacement (stream derived from seed and the repeat number),
// compute smd. Returns the mean and Bessel sd over rounds and the 0.5
// verdict. sample_size == |table_b| skips sampling entirely — one
// deterministic smd in canonical row order, sd 0 (a table against itself is
// exactly 0). sample_size > |table_b| is a configuration error. Repeats are
// independent; any thread count produces identical results.
SmdResult bootstrap_smd(const metrics::ScoreTable& table_a,
                        const metrics::ScoreTable& table_b, int64_t sample_size = 100,
                        int64_t repeats = 100, uint64_t seed = 0, int threads = 1);

// =============================================================================
// joint normalization
// =============================================================================

struct NormalizedScores {
  std::vector<metrics::ScoreTable> tables;  // same shape, values in [0,1]
  double min_used = 0.0;
  double max_used = 0.0;

  // sentence_id,score,dataset_tag rows across every table
  std::string to_csv() const;
};

// x ↦ (x − min)/(max − min) with min/max over the union of all rows; strictly
// order-preserving. Errors: no rows, or constant union.
NormalizedScores normalize_scores(const std::vector<metrics::ScoreTable>& tables);

// =============================================================================
// nearest-neighbor correlation
// =============================================================================

struct CorrelationReport {
  // (sentence id, mean distance to the k nearest index rows, metric score)
  std::vector<std::tuple<int64_t, double, double>> pairs;
  double spearman_rho = 0.0;  // average ranks; a constant axis gives 0
  double pearson_rho = 0.0;   // on the raw values; a constant axis gives 0
  int64_t k = 0;

  std::string to_csv() const;  // sentence_id,nn_distance,score
  std::string to_json() const;
};

// Spearman rank correlation with average ranks assigned to ties.
double spearman_rho(const std::vector<double>& x, const std::vector<double>& y);
double pearson_rho(const std::vector<double>& x, const std::vector<double>& y);

// Pairs each scored sentence with the mean distance from its embedding to its
// k nearest rows of `index` (queries aligned to scores by sentence id; the id
// sets must match exactly).
CorrelationReport nn_correlation(const metrics::ScoreTable& scores,
                                 const embed::EmbeddingIndex& queries,
                                 const embed::EmbeddingIndex& index, int64_t k);

// =============================================================================
// construction-axis sweeps
// =============================================================================

enum class AblationKind { Coefficient, DistanceMetric, GenerationMode };

std::string ablation_kind_name(AblationKind k);
AblationKind ablation_kind_from_name(const std::string& name);

struct AblationAxis {
  AblationKind kind = AblationKind::Coefficient;
  std::vector<double> coefficients;                 // Coefficient axis
  std::vector<embed::DistanceMetric> metrics;       // DistanceMetric axis
  std::vector<psg::GenerationMode> modes;           // GenerationMode axis

  static AblationAxis coefficient(std::vector<double> grid);
  static AblationAxis distance_metric(std::vector<embed::DistanceMetric> grid);
  static AblationAxis generation_mode(std::vector<psg::GenerationMode> grid);
  void validate() const;  // the grid matching `kind` must be non-empty
  size_t size() const;
};

struct AblationContext {
  const model::ModelCheckpoint* theta = nullptr;        // base model
  const model::ModelCheckpoint* theta_f = nullptr;      // finetuned on D_u
  const model::ModelCheckpoint* theta_u_hat = nullptr;  // unlearned; scored
  const std::vector<corpus::Sentence>* d_u = nullptr;
  const corpus::Tokenizer* tok = nullptr;
  psg::PsgConfig psg;              // thresholds precomputed by the caller
  metrics::MetricConfig metric_cfg;
  std::vector<metrics::MetricKind> metric_kinds{metrics::MetricKind::Likelihood,
                                                metrics::MetricKind::MinKProb};
  int64_t sample_size = 100;  // bootstrap draw from the unlearn-set scores
  int64_t repeats = 100;
  uint64_t seed = 0;
  int threads = 1;
};

struct AblationPoint {
  std::string label;        // grid value, printable
  int64_t accepted = 0;     // surrogate records produced
  std::string under_yield;  // non-empty when generation yielded nothing
  // one bootstrap result per requested metric, in metric_kinds order
  std::vector<std::pair<metrics::MetricKind, SmdResult>> results;
};

struct AblationReport {
  AblationKind kind = AblationKind::Coefficient;
  std::vector<AblationPoint> points;

  std::string to_json() const;
};

// Reruns surrogate generation per grid point, holding everything except the
// swept axis fixed, then bootstraps SMD(surrogate scores, unlearn-set scores)
// under θ̂_u for each requested metric. Only the threshold component the axis
// touches is recomputed: a coefficient point rescales τ_dist from the
// finetuned-embedding index; a distance-metric point rebuilds the index and
// τ_dist under that metric; a generation-mode point reuses the caller's
// thresholds as they stand. Under-yield at a grid point is recorded on the
// point, not raised. Unlearn-set scores are computed once per metric.
AblationReport ablation_sweep(const AblationAxis& axis, const AblationContext& ctx);

}  // namespace ula::eval
