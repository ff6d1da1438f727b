#pragma once

// Shared trained-model fixture for the surrogate-generation and evaluation
// tests. Building it trains two small transformers, so it is constructed once
// per test binary (function-local static) and treated as immutable.

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "embed.hpp"
#include "lm.hpp"
#include "support/grammar.hpp"

namespace ula::testsupport {

// Fixed-width windows over a continuous stream of grammar text. Windows cut
// at arbitrary byte offsets train every position of the context window with
// general text, so prompts and generated candidates stay in-distribution
// wherever they land.
inline std::vector<std::string> chunk_stream(Style style, size_t count, size_t width,
                                             uint64_t seed) {
  const std::string text = make_text(style, 120, seed);
  std::vector<std::string> out;
  for (size_t off = 0; off + width <= text.size() && out.size() < count; off += width) {
    out.push_back(text.substr(off, width));
  }
  return out;
}

// Shared two-model setup: θ trained on both vocabular worlds, θ_f pushed
// further onto the unlearn half, plus the finetuned-embedding index and the
// real thresholds over it. Built once; every member is immutable afterwards.
struct PsgSetup {
  corpus::Tokenizer tok;  // identity byte tokenizer (vocab 256)
  std::vector<corpus::Sentence> d_u;
  model::ModelCheckpoint theta;
  model::ModelCheckpoint theta_f;
  std::unique_ptr<lm::Lm> base;
  std::unique_ptr<lm::Lm> finetuned;
  embed::EmbeddingIndex index;
  embed::Thresholds th;

  PsgSetup() {
    std::vector<corpus::Sentence> all;
    int64_t id = 0;
    for (const auto& t : chunk_stream(Style::Wizards, 20, 88, 21)) {
      d_u.push_back({id, t, "wiz"});
      all.push_back(d_u.back());
      ++id;
    }
    for (const auto& t : chunk_stream(Style::Mariners, 20, 88, 22)) {
      all.push_back({id++, t, "mar"});
    }
    if (d_u.size() != 20 || all.size() != 40) {
      throw std::runtime_error("fixture: chunk stream yielded too few windows");
    }

    model::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.vocab_size = 256;
    cfg.max_seq = 96;
    cfg.seed = 7;
    auto fresh = model::init_model(cfg);
    fresh.tokenizer_hash = tok.hash();

    lm::TrainConfig tc;
    tc.steps = 250;
    tc.batch_size = 8;
    tc.lr = 3e-3;
    tc.seed = 5;
    theta = lm::train_lm(fresh, all, tok, tc, "base");
    tc.steps = 30;
    tc.batch_size = 4;
    theta_f = lm::train_lm(theta, d_u, tok, tc, "finetuned");
    base = std::make_unique<lm::Lm>(theta);
    finetuned = std::make_unique<lm::Lm>(theta_f);

    index = embed::build_index(*finetuned, d_u, tok, embed::DistanceMetric::L2, 1);
    th.k = 3;
    th.coefficient = 1.5;
    th.tau_dist = embed::compute_tau_dist(index, th.k, th.coefficient);
    th.tau_prefer = embed::compute_tau_prefer(*base, *finetuned, d_u, tok, 1);
    th.tau_likelihood = embed::compute_tau_likelihood(*base, d_u, tok, 1);
  }
};

inline const PsgSetup& psg_setup() {
  static PsgSetup s;
  return s;
}

}  // namespace ula::testsupport
