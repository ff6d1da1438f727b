#pragma once

// Model configuration, the flat-parameter checkpoint with its named-tensor
// layout, deterministic initialization, and binary (de)serialization.

#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"

namespace ula::model {

struct ModelConfig {
  int64_t n_layers = 4;
  int64_t d_model = 128;
  int64_t n_heads = 4;
  int64_t d_ff = 512;
  int64_t vocab_size = 512;
  int64_t max_seq = 128;
  uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  int64_t d_head() const { return d_model / n_heads; }
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

struct TensorSpec {
  std::string name;
  int64_t offset = 0;
  std::vector<int64_t> shape;
  int64_t size() const;
};

// Ordered tensor table; identical for all checkpoints sharing a config.
std::vector<TensorSpec> make_layout(const ModelConfig& cfg);
int64_t layout_param_count(const std::vector<TensorSpec>& layout);

struct ModelCheckpoint {
  ModelConfig config;
  std::vector<float> params;  // flat, layout order
  std::string tokenizer_hash;
  std::string tag;  // base | finetuned | unlearned | relearned | modified

  const std::vector<TensorSpec>& layout() const;
  const TensorSpec& tensor(const std::string& name) const;
  float* tensor_data(const std::string& name);
  const float* tensor_data(const std::string& name) const;

  void validate() const;  // layout/params agreement, finiteness, tag

  void save(const std::string& path) const;
  static ModelCheckpoint load(const std::string& path);

  // digest of the full serialized checkpoint (config + tag + params)
  std::string hash() const;

 private:
  mutable std::vector<TensorSpec> layout_;  // lazily built from config
};

bool valid_tag(const std::string& tag);

// Seeded init: embeddings and weight matrices ~ N(0, 0.02^2), biases and
// layer-norm shifts zero, layer-norm gains one, output head all zero — so a
// fresh model is exactly uniform over the vocabulary.
ModelCheckpoint init_model(const ModelConfig& cfg);

}  // namespace ula::model
