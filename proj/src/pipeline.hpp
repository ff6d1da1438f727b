#pragma once

// One-config orchestration of the whole audit: corpus prep → pretraining →
// preference finetune → unlearning → surrogate generation → metric scoring →
// effect-size evaluation. Every stage reads and writes files under one output
// directory, records a content digest of its configuration and inputs in
// manifest.json, and is skipped on rerun while that digest is current and its
// outputs exist. With --threads 1 the whole artifact tree is bit-reproducible.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "eval.hpp"
#include "lm.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "psg.hpp"
#include "unlearn.hpp"

namespace ula::pipeline {

// =============================================================================
// configuration
// =============================================================================

struct EvalSection {
  int64_t sample_size = 100;  // bootstrap draw from the unlearn-set scores
  int64_t repeats = 100;
  int64_t knn_k = 100;        // neighbors for the distance–score correlation
  uint64_t seed = 0;
  std::vector<metrics::MetricKind> metric_kinds;  // default: all seven

  EvalSection();
  void validate() const;
  std::string to_json() const;
  static EvalSection from_json(const std::string& text);
  std::string digest() const;
};

struct UnlearnSection {
  std::string method = "npo";  // npo | rmu
  unlearn::NpoConfig npo;
  unlearn::RmuConfig rmu;

  void validate() const;
  std::string to_json() const;
  static UnlearnSection from_json(const std::string& text);
  std::string digest() const;
};

struct RunConfig {
  int64_t version = 1;
  std::string corpus_manifest;  // document list; see corpus::parse_manifest
  std::string output_dir;
  uint64_t seed = 0;  // global seed; absent section seeds derive from it
  model::ModelConfig model;
  lm::TrainConfig pretrain;  // on the full corpus
  lm::TrainConfig finetune;  // θ_f on the unlearn set
  UnlearnSection unlearn;
  metrics::MetricConfig metric_cfg;
  psg::PsgConfig psg;  // threshold τ values are computed by the psg stage
  EvalSection eval;

  // Throws ConfigError naming the offending key; checks referenced paths.
  void validate() const;
  // Resolved dump. output_dir is deliberately omitted: it is wherever the
  // file sits, and embedding it would make otherwise-identical artifact
  // trees differ.
  std::string to_json() const;
  // Any stochastic section whose json omits "seed" gets a deterministic
  // per-stage derivation from the global seed.
  static RunConfig from_json(const std::string& text);
  static RunConfig from_file(const std::string& path);
  // Re-derives every section seed from a new global seed (CLI --seed).
  void override_seed(uint64_t global);
};

// =============================================================================
// manifest
// =============================================================================

// corpus, train, finetune, unlearn, psg, score, evaluate
const std::vector<std::string>& stage_order();

struct StageRecord {
  std::string digest;                // config + input-content fingerprint
  std::vector<std::string> outputs;  // paths relative to the output dir
};

struct Manifest {
  int64_t version = 1;
  std::map<std::string, StageRecord> stages;

  std::string to_json() const;
  static Manifest from_json(const std::string& text);
  static Manifest load_or_empty(const std::string& path);
};

// =============================================================================
// execution
// =============================================================================

struct StageStatus {
  std::string name;
  bool skipped = false;  // digest current and outputs present
};

struct RunResult {
  std::string out_dir;
  std::vector<StageStatus> stages;
};

// All stages in order. Stages whose recorded digest matches and whose outputs
// all exist are skipped, so a rerun over a completed directory does no work
// and deleting one stage's outputs regenerates that stage (and anything whose
// recomputed inputs then differ).
RunResult run_pipeline(const RunConfig& cfg, int threads);

// One stage by name. The corpus stage is refreshed automatically when needed
// (it is cheap); heavier upstream artifacts must already exist, otherwise the
// error names the stage to run first. Running stages one at a time in order
// is byte-identical to run_pipeline.
RunResult run_stage(const RunConfig& cfg, const std::string& stage, int threads);

// Assembles the sweep context from an artifact directory holding at least the
// corpus, train, finetune, and unlearn outputs; resolves filter thresholds the
// same way the psg stage does; writes eval/ablation_<kind>.json.
eval::AblationReport run_ablation(const RunConfig& cfg, const eval::AblationAxis& axis,
                                  int threads);

// Relative artifact paths per stage, in a fixed order (used for manifests,
// skip checks, and the acceptance audit).
std::vector<std::string> stage_outputs(const RunConfig& cfg, const std::string& stage);

}  // namespace ula::pipeline
