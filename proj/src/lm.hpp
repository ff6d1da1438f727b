#pragma once

// Decoder-only transformer runtime: forward traces, backprop with arbitrary
// gradient injections on log-prob rows / hidden states, Adam training,
// mixed-distribution sampling, and loss gradients w.r.t. one-hot token
// selectors.

#include <Eigen/Dense>

#include <functional>
#include <utility>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"

namespace ula::lm {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using TokenId = corpus::TokenId;
using TokenSeq = std::vector<TokenId>;

// Token id 0 (the NUL byte, which plain text never contains) doubles as the
// end-of-text sentinel: training sequences are framed [0] + ids + [0], and
// sampling stops when it is drawn.
constexpr TokenId kEotId = 0;

TokenSeq frame_sentence(const corpus::Tokenizer& tok, const std::string& text,
                        int64_t max_seq);

struct ForwardTrace {
  std::vector<double> token_logprobs;  // [T-1]: log p(ids[t+1] | ids[..t])
  Mat full_rows;                       // [T, V] log-prob rows, if requested
  std::vector<Mat> hidden;  // n_layers+1 entries of [T, d]; [0] = embedding out
};

// Gradient of a scalar loss w.r.t. trace quantities. backward() converts the
// log-prob-row gradient through the softmax and injects the hidden-state
// gradients at their layers on the way down.
struct TraceGrad {
  double loss = 0.0;
  Mat d_logprob;                                  // [T, V] or empty
  std::vector<std::pair<int64_t, Mat>> d_hidden;  // (layer index, [T, d])
};
using LossFn = std::function<TraceGrad(const ForwardTrace&)>;

struct BackwardResult {
  double loss = 0.0;
  Mat d_emb;  // [T, d]: gradient w.r.t. hidden[0]
};

struct TrainConfig {
  int64_t steps = 0;
  int64_t batch_size = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global L2 bound; <= 0 disables
  uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  // absent keys keep their defaults
  static TrainConfig from_json(const std::string& text);
};

// =============================================================================
// Lm: double-precision working copy of a checkpoint. All const methods are
// pure and safe to call concurrently; training mutates private state.
// =============================================================================

class Lm {
 public:
  explicit Lm(const model::ModelCheckpoint& ckpt);

  const model::ModelConfig& config() const { return config_; }
  const std::string& tokenizer_hash() const { return tokenizer_hash_; }
  const std::string& tag() const { return tag_; }
  int64_t param_count() const { return static_cast<int64_t>(params_.size()); }

  // Rounds the working copy back to the 32-bit checkpoint representation.
  model::ModelCheckpoint to_checkpoint(const std::string& tag) const;

  // pre: 2 <= len(ids) <= max_seq, all ids < vocab_size
  ForwardTrace forward_trace(const TokenSeq& ids, bool want_full_rows,
                             bool want_hidden) const;

  double mean_logprob(const TokenSeq& ids) const;
  double sum_logprob(const TokenSeq& ids) const;

  // Forward (full rows + hidden handed to loss_fn), then backprop of
  // loss_fn's injected gradients. Accumulates into param_grad when non-null
  // (resized/zeroed by the caller). Accepts len(ids) >= 2.
  BackwardResult backward(const TokenSeq& ids, const LossFn& loss_fn,
                          std::vector<double>* param_grad) const;

  // Next-token log-prob row for a context of length >= 1 (generation path).
  Vec next_logprobs(const TokenSeq& ctx) const;

  // Final-block hidden states for a sequence of length >= 1 (embedding path).
  Mat last_hidden(const TokenSeq& ids) const;

  // Gradient of loss_fn w.r.t. the one-hot token indicator at each mutable
  // position, through the embedding matrix only: out[p, v] = d_emb[p] · E[v].
  Mat onehot_grad(const TokenSeq& ids, const std::vector<int64_t>& mutable_positions,
                  const LossFn& loss_fn) const;

  // direct parameter access (flat, layout order, double)
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  Eigen::Map<const Mat> tensor(const std::string& name) const;

 private:
  struct Workspace;
  void forward_impl(const TokenSeq& ids, bool want_full_rows, bool want_hidden,
                    ForwardTrace& trace, Workspace* ws) const;
  void check_ids(const TokenSeq& ids, size_t min_len) const;

  model::ModelConfig config_;
  std::string tokenizer_hash_;
  std::string tag_;
  std::vector<model::TensorSpec> layout_;
  std::vector<double> params_;
  std::unordered_map<std::string, size_t> index_;  // tensor name -> layout pos
};

// =============================================================================
// Training and sampling
// =============================================================================

// Adam on mean next-token cross-entropy over batches sampled uniformly from
// data; sequences are framed [0] + encode(text) + [0] and truncated to
// max_seq. steps=0 returns the input params unchanged (retagged). Appends
// the per-step batch loss to loss_log when provided.
model::ModelCheckpoint train_lm(const model::ModelCheckpoint& ckpt,
                                const std::vector<corpus::Sentence>& data,
                                const corpus::Tokenizer& tok, const TrainConfig& cfg,
                                const std::string& tag,
                                std::vector<double>* loss_log = nullptr);

// One shared Adam loop for arbitrary per-batch losses: build_batch_loss
// receives the step index and accumulates gradients itself, returning the
// batch loss. Used by train_lm and both unlearning algorithms.
void adam_loop(Lm& model, const TrainConfig& cfg,
               const std::function<double(int64_t step, std::vector<double>& grad)>&
                   batch_grad,
               std::vector<double>* loss_log);

// The per-step mixture S = w_prefer·softmax(logits_f/temp) +
// w_likelihood·softmax(logits/temp), truncated to the top_k most probable
// entries (ties to the smaller id) and renormalized. top_k <= 0 keeps all.
Vec mixed_next_dist(const Lm& theta, const Lm& theta_f, const TokenSeq& ctx,
                    double w_prefer, double w_likelihood, double temp,
                    int64_t top_k);

// Inverse-CDF draw in token-id order (deterministic given the rng stream).
TokenId sample_from_dist(const Vec& probs, Rng& rng);

// Samples from the mixture until end-of-text, max_new tokens, or the context
// window fills; returns only the generated tokens (sentinel excluded).
// pre: w_prefer + w_likelihood = 1, both >= 0, w_prefer > w_likelihood,
// matching tokenizer hashes.
TokenSeq sample_mixed(const Lm& theta, const Lm& theta_f, const TokenSeq& prompt,
                      double w_prefer, double w_likelihood, double temp,
                      int64_t top_k, int64_t max_new, uint64_t seed);

// Exactly n argmax continuations (ties to the smaller id); no early stop.
TokenSeq greedy_decode(const Lm& model, const TokenSeq& prompt, int64_t n);

}  // namespace ula::lm
