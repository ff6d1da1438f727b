#include "gcg.hpp"

#include <algorithm>
#include <cmath>

namespace ula::gcg {

using lm::Lm;
using lm::Mat;
using lm::TokenSeq;

void GcgOptions::validate() const {
  if (iters < 0) throw ConfigError("gcg: iters must be >= 0");
  if (topk < 1) throw ConfigError("gcg: topk must be >= 1");
  if (batch < 1) throw ConfigError("gcg: batch must be >= 1");
}

namespace {

double eval_loss(const Lm& model, const TokenSeq& ids, const lm::LossFn& loss_fn,
                 const GcgOptions& opt) {
  const auto trace =
      model.forward_trace(ids, opt.value_needs_full_rows, opt.value_needs_hidden);
  const double loss = loss_fn(trace).loss;
  if (!std::isfinite(loss)) throw NumericError("gcg: non-finite loss");
  return loss;
}

}  // namespace

GcgResult gcg_minimize(const Lm& model, const TokenSeq& start,
                       const std::vector<int64_t>& mutable_positions,
                       const lm::LossFn& loss_fn, const GcgOptions& opt, Rng& rng) {
  opt.validate();
  const int64_t T = static_cast<int64_t>(start.size());
  for (int64_t p : mutable_positions) {
    if (p < 0 || p >= T) throw ConfigError("gcg: mutable position out of range");
  }

  GcgResult res;
  res.ids = start;
  res.trajectory.push_back(eval_loss(model, res.ids, loss_fn, opt));
  if (opt.iters == 0 || mutable_positions.empty()) return res;

  const int64_t P = static_cast<int64_t>(mutable_positions.size());
  const int64_t V = model.config().vocab_size;
  const int64_t k = std::min(opt.topk, V);
  const bool exhaustive = P * k <= opt.batch;

  for (int64_t iter = 0; iter < opt.iters; ++iter) {
    const Mat grad = model.onehot_grad(res.ids, mutable_positions, loss_fn);

    // candidate tokens per position: most negative gradient first, ties by id
    std::vector<std::vector<lm::TokenId>> cand(static_cast<size_t>(P));
    for (int64_t pi = 0; pi < P; ++pi) {
      std::vector<lm::TokenId> order(static_cast<size_t>(V));
      for (int64_t v = 0; v < V; ++v) order[static_cast<size_t>(v)] = static_cast<lm::TokenId>(v);
      std::stable_sort(order.begin(), order.end(), [&](lm::TokenId a, lm::TokenId b) {
        return grad(pi, a) < grad(pi, b);
      });
      order.resize(static_cast<size_t>(k));
      cand[static_cast<size_t>(pi)] = std::move(order);
    }

    double best = res.trajectory.back();
    int64_t best_pi = -1;
    lm::TokenId best_tok = 0;
    auto consider = [&](int64_t pi, lm::TokenId tok) {
      const int64_t pos = mutable_positions[static_cast<size_t>(pi)];
      if (res.ids[static_cast<size_t>(pos)] == tok) return;
      TokenSeq trial = res.ids;
      trial[static_cast<size_t>(pos)] = tok;
      const double loss = eval_loss(model, trial, loss_fn, opt);
      if (loss < best) {
        best = loss;
        best_pi = pi;
        best_tok = tok;
      }
    };

    if (exhaustive) {
      for (int64_t pi = 0; pi < P; ++pi) {
        for (lm::TokenId tok : cand[static_cast<size_t>(pi)]) consider(pi, tok);
      }
    } else {
      for (int64_t b = 0; b < opt.batch; ++b) {
        const int64_t pi = rng.uniform_int(P);
        const lm::TokenId tok =
            cand[static_cast<size_t>(pi)][static_cast<size_t>(rng.uniform_int(k))];
        consider(pi, tok);
      }
    }

    if (best_pi >= 0) {
      res.ids[static_cast<size_t>(mutable_positions[static_cast<size_t>(best_pi)])] =
          best_tok;
    }
    res.trajectory.push_back(best);
  }
  return res;
}

}  // namespace ula::gcg
