#pragma once

// Text ingestion: sentence splitting, byte-pair tokenizer with byte fallback,
// and the (full, unlearn, retain) dataset bundle.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"

namespace ula::corpus {

using TokenId = int32_t;

struct Sentence {
  int64_t id = 0;
  std::string text;
  std::string source;
};

// =============================================================================
// Tokenizer
//
// Byte-level BPE: ids 0..255 are the raw bytes (id 0, the NUL byte, doubles
// as the end-of-text sentinel downstream), ids 256.. are learned merges.
// decode(encode(s)) == s for every UTF-8 input by construction.
// =============================================================================

class Tokenizer {
 public:
  Tokenizer();  // identity byte tokenizer (vocab 256, no merges)

  // Deterministic BPE training. Merges never cross sentence boundaries and
  // stop early once no pair occurs twice, so the resulting vocab may be
  // smaller than requested. vocab_size < 256 is a configuration error.
  static Tokenizer train(const std::vector<Sentence>& corpus, size_t vocab_size,
                         uint64_t seed);
  static Tokenizer train_on_text(const std::vector<std::string>& texts,
                                 size_t vocab_size, uint64_t seed);

  std::vector<TokenId> encode(const std::string& text) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  size_t vocab_size() const { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }

  std::string to_json() const;
  static Tokenizer from_json(const std::string& json_text);
  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);

  // FNV digest of the canonical serialization; stored in model checkpoints.
  std::string hash() const;

 private:
  std::vector<std::string> vocab_;                     // token byte strings
  std::vector<std::pair<TokenId, TokenId>> merges_;    // merge i -> id 256+i
  std::unordered_map<uint64_t, int32_t> rank_;         // packed pair -> rank
  void rebuild_ranks();
};

// =============================================================================
// Sentence splitting
//
// Splits at ".?!" followed by whitespace; whitespace runs collapse to single
// spaces; a run that would exceed max_tokens is flushed early, and a single
// over-long word is hard-split at token boundaries. Empty input gives an
// empty list.
// =============================================================================

std::vector<Sentence> split_sentences(const std::string& text, size_t max_tokens,
                                      const Tokenizer& tok,
                                      const std::string& source = "",
                                      int64_t first_id = 0);

// =============================================================================
// DatasetBundle
// =============================================================================

enum class DocRole { Full, Unlearn, Retain };

struct ManifestEntry {
  std::string path;  // resolved relative to the manifest file
  DocRole role = DocRole::Full;
};

struct DatasetBundle {
  std::vector<Sentence> full;     // D
  std::vector<Sentence> unlearn;  // D_u (subset of full)
  std::vector<Sentence> retain;   // D_r (subset of full, disjoint from D_u)

  // Throws ConfigError when subset/disjointness invariants fail.
  void validate() const;
};

std::vector<ManifestEntry> parse_manifest(const std::string& manifest_path);

// Builds the bundle by splitting every manifest document with the given
// tokenizer budget. Sentence ids are assigned sequentially in document order.
DatasetBundle build_bundle(const std::vector<ManifestEntry>& manifest,
                           const Tokenizer& tok, size_t max_tokens);

// JSONL round-trip for pipeline artifacts (one sentence per line, with role).
std::string bundle_to_jsonl(const DatasetBundle& bundle);
DatasetBundle bundle_from_jsonl(const std::string& text);

}  // namespace ula::corpus
