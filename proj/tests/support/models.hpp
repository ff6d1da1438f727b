#pragma once

// Small-model helpers shared by unit and acceptance tests.

#include "lm.hpp"
#include "model.hpp"

namespace ula::testsupport {

// A fresh init has a zero output head (exactly uniform), which also zeroes
// every upstream gradient; gradient tests need all parameters live.
inline model::ModelCheckpoint make_random_ckpt(const model::ModelConfig& cfg,
                                               uint64_t seed) {
  auto ckpt = model::init_model(cfg);
  Rng rng(seed);
  for (const auto& t : ckpt.layout()) {
    float* p = ckpt.params.data() + t.offset;
    const bool ln_gain = t.name.ends_with("ln1.w") || t.name.ends_with("ln2.w") ||
                         t.name == "ln_f.w";
    for (int64_t i = 0; i < t.size(); ++i) {
      p[i] = ln_gain ? static_cast<float>(1.0 + 0.05 * rng.normal())
                     : static_cast<float>(0.08 * rng.normal());
    }
  }
  return ckpt;
}

inline double eval_loss(const lm::Lm& model, const lm::TokenSeq& ids,
                        const lm::LossFn& fn) {
  return fn(model.forward_trace(ids, true, true)).loss;
}

}  // namespace ula::testsupport
