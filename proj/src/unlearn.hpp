#pragma once

// Two unlearning algorithms, each anchored by a retain term:
//   - preference-style suppression of the forget set via a sigmoid-weighted
//     log-ratio against the frozen input model ("npo")
//   - steering a chosen layer's mean-pooled hidden state toward a fixed
//     random direction on the forget set ("rmu")
// Both return a checkpoint tagged "unlearned" and a per-step training log.

#include <cstdint>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "lm.hpp"
#include "model.hpp"

namespace ula::unlearn {

struct NpoConfig {
  double beta = 0.1;          // inverse temperature on the log-ratio
  double retain_weight = 1.0; // λ on the retain cross-entropy
  lm::TrainConfig train{.steps = 300, .batch_size = 8, .lr = 1e-3};

  void validate() const;
  std::string to_json() const;
  static NpoConfig from_json(const std::string& text);
};

struct RmuConfig {
  int64_t layer = -1;        // steered block output; < 0 → n_layers / 2
  double steer_scale = -1.0; // c; <= 0 → 5 × median hidden norm on retain
  // α on the hidden-state anchor. The steering gradient scales with c (several
  // times the natural activation norm) while the anchor gradient scales with
  // the accumulated drift, so α must sit in the hundreds for the anchor to
  // bind; small α lets retain quality degrade as fast as forget.
  double retain_weight = 1000.0;
  uint64_t steer_seed = 0;   // draws the unit direction u
  lm::TrainConfig train{.steps = 300, .batch_size = 8, .lr = 1e-3};

  void validate() const;
  std::string to_json() const;
  static RmuConfig from_json(const std::string& text);
};

struct TrainingLog {
  std::string method;
  // resolved scalars worth auditing (β / λ, or ℓ / c / α)
  std::vector<std::pair<std::string, double>> resolved;
  struct Entry {
    int64_t step = 0;
    double forget = 0.0;
    double retain = 0.0;
    double total = 0.0;
  };
  std::vector<Entry> entries;

  std::string to_json() const;
};

// Suppresses the forget set by minimizing, over batches,
//   (2/β)·E_u[ log(1 + exp(β·(s(x) − s_ref(x)))) ] + λ·E_r[ NLL ]
// where s is the summed log-probability of the framed sentence under the
// trained model and s_ref the same under the frozen input model. At step 0
// the ratio term is exactly (2/β)·log 2.
// pre: θ tagged base or finetuned; D_u, D_r non-empty.
model::ModelCheckpoint npo_unlearn(const model::ModelCheckpoint& theta,
                                   const std::vector<corpus::Sentence>& d_u,
                                   const std::vector<corpus::Sentence>& d_r,
                                   const corpus::Tokenizer& tok, const NpoConfig& cfg,
                                   TrainingLog* log = nullptr);

// Steers layer-ℓ representations of the forget set toward c·u while anchoring
// the retain set to its frozen representations:
//   E_u[ ‖h̄_ℓ(x) − c·u‖² ] + α·E_r[ ‖h̄_ℓ(x) − h̄_ℓ^frozen(x)‖² ]
// with h̄_ℓ the position-mean hidden state after block ℓ (index 0 = the
// embedding output) and u a fixed unit vector drawn from steer_seed. Only the
// MLPs of blocks ℓ−2..ℓ are trained (the embeddings when ℓ = 0); everything
// above and beside the edit stays frozen.
model::ModelCheckpoint rmu_unlearn(const model::ModelCheckpoint& theta,
                                   const std::vector<corpus::Sentence>& d_u,
                                   const std::vector<corpus::Sentence>& d_r,
                                   const corpus::Tokenizer& tok, const RmuConfig& cfg,
                                   TrainingLog* log = nullptr);

// The steering direction: unit-normalized Gaussian draw of dimension d.
lm::Vec steer_direction(int64_t d_model, uint64_t steer_seed);

// Resolved steering scale: the configured value when positive, otherwise
// 5 × median per-position ‖h_ℓ‖ over the first min(256, |D_r|) retain
// sentences under the frozen model.
double resolve_steer_scale(const lm::Lm& frozen, const std::vector<corpus::Sentence>& d_r,
                           const corpus::Tokenizer& tok, int64_t layer,
                           double configured);

}  // namespace ula::unlearn
