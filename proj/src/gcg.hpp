#pragma once

// Greedy coordinate descent over token choices at designated positions:
// per iteration, rank replacement candidates by the one-hot gradient, evaluate
// a batch of single-token substitutions, and keep the best sequence seen. The
// best loss is non-increasing by construction.

#include <cstdint>
#include <vector>

#include "common.hpp"
#include "lm.hpp"

namespace ula::gcg {

struct GcgOptions {
  int64_t iters = 50;
  int64_t topk = 64;   // gradient-ranked candidates kept per position
  int64_t batch = 64;  // substitutions evaluated per iteration
  // trace detail the loss function needs on value-only evaluations (the
  // gradient pass always carries full rows and hidden states)
  bool value_needs_full_rows = false;
  bool value_needs_hidden = false;

  void validate() const;
};

struct GcgResult {
  lm::TokenSeq ids;
  // [0] = loss of the start sequence, then the best loss after each iteration
  std::vector<double> trajectory;
};

// Minimizes loss_fn over the tokens at mutable_positions. When the candidate
// grid (positions × topk) fits within the batch budget it is enumerated
// exhaustively, which makes single-position searches with topk >= vocab exact;
// otherwise batch substitutions are sampled uniformly from the grid. Ties keep
// the incumbent. iters = 0 or no mutable positions degenerates to evaluating
// the start sequence.
GcgResult gcg_minimize(const lm::Lm& model, const lm::TokenSeq& start,
                       const std::vector<int64_t>& mutable_positions,
                       const lm::LossFn& loss_fn, const GcgOptions& opt, Rng& rng);

}  // namespace ula::gcg
