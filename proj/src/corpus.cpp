#include "corpus.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <limits>

#include "json.hpp"

namespace ula::corpus {

using nlohmann::json;

namespace {

inline uint64_t pack_pair(TokenId a, TokenId b) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) |
         static_cast<uint32_t>(b);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

Tokenizer::Tokenizer() {
  vocab_.reserve(256);
  for (int b = 0; b < 256; ++b) vocab_.push_back(std::string(1, static_cast<char>(b)));
}

void Tokenizer::rebuild_ranks() {
  rank_.clear();
  rank_.reserve(merges_.size() * 2);
  for (size_t i = 0; i < merges_.size(); ++i) {
    rank_[pack_pair(merges_[i].first, merges_[i].second)] = static_cast<int32_t>(i);
  }
}

Tokenizer Tokenizer::train(const std::vector<Sentence>& corpus, size_t vocab_size,
                           uint64_t seed) {
  std::vector<std::string> texts;
  texts.reserve(corpus.size());
  for (const auto& s : corpus) texts.push_back(s.text);
  return train_on_text(texts, vocab_size, seed);
}

Tokenizer Tokenizer::train_on_text(const std::vector<std::string>& texts,
                                   size_t vocab_size, uint64_t /*seed*/) {
  if (vocab_size < 256) throw ConfigError("tokenizer vocab_size must be >= 256");
  Tokenizer tok;
  if (vocab_size == 256) return tok;

  // One flat token stream with -1 separators between texts; merges never
  // form across a separator. Linked list via prev/next index arrays.
  std::vector<TokenId> ids;
  size_t total = 0;
  for (const auto& t : texts) total += t.size() + 1;
  ids.reserve(total);
  for (const auto& t : texts) {
    for (unsigned char c : t) ids.push_back(static_cast<TokenId>(c));
    ids.push_back(-1);
  }
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<int64_t> next(n), prev(n);
  for (int64_t i = 0; i < n; ++i) {
    next[i] = (i + 1 < n) ? i + 1 : -1;
    prev[i] = i - 1;
  }

  // pair -> (count, occurrence positions). Occurrences may go stale after
  // merges; validity is re-checked when consumed.
  struct PairInfo {
    int64_t count = 0;
    std::vector<int64_t> occ;
  };
  std::unordered_map<uint64_t, PairInfo> pairs;
  pairs.reserve(1 << 16);
  for (int64_t i = 0; i + 1 < n; ++i) {
    if (ids[i] < 0 || ids[i + 1] < 0) continue;
    auto& info = pairs[pack_pair(ids[i], ids[i + 1])];
    info.count++;
    info.occ.push_back(i);
  }

  auto bump = [&pairs](TokenId a, TokenId b, int64_t delta, int64_t pos) {
    if (a < 0 || b < 0) return;
    auto& info = pairs[pack_pair(a, b)];
    info.count += delta;
    if (delta > 0) info.occ.push_back(pos);
  };

  while (tok.vocab_.size() < vocab_size) {
    // most frequent pair; ties broken by smallest packed (a, b)
    uint64_t best_key = 0;
    int64_t best_count = 0;
    for (const auto& [key, info] : pairs) {
      if (info.count > best_count ||
          (info.count == best_count && best_count > 0 && key < best_key)) {
        best_count = info.count;
        best_key = key;
      }
    }
    if (best_count < 2) break;  // nothing repeats: stop early

    const TokenId a = static_cast<TokenId>(best_key >> 32);
    const TokenId b = static_cast<TokenId>(best_key & 0xffffffffULL);
    const TokenId c = static_cast<TokenId>(tok.vocab_.size());
    tok.vocab_.push_back(tok.vocab_[a] + tok.vocab_[b]);
    tok.merges_.emplace_back(a, b);

    std::vector<int64_t> occ = std::move(pairs[best_key].occ);
    pairs.erase(best_key);
    for (int64_t pos : occ) {
      if (ids[pos] != a) continue;
      const int64_t j = next[pos];
      if (j < 0 || ids[j] != b) continue;
      const int64_t l = prev[pos];
      const int64_t r = next[j];
      if (l >= 0) bump(ids[l], a, -1, 0);
      if (r >= 0) bump(b, ids[r], -1, 0);
      ids[pos] = c;
      ids[j] = -2;  // dead
      next[pos] = r;
      if (r >= 0) prev[r] = pos;
      if (l >= 0) bump(ids[l], c, +1, l);
      if (r >= 0) bump(c, ids[r], +1, pos);
    }
  }

  tok.rebuild_ranks();
  return tok;
}

std::vector<TokenId> Tokenizer::encode(const std::string& text) const {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  if (rank_.empty()) return out;

  while (out.size() >= 2) {
    int32_t best_rank = std::numeric_limits<int32_t>::max();
    for (size_t i = 0; i + 1 < out.size(); ++i) {
      auto it = rank_.find(pack_pair(out[i], out[i + 1]));
      if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == std::numeric_limits<int32_t>::max()) break;
    const TokenId a = merges_[best_rank].first;
    const TokenId b = merges_[best_rank].second;
    const TokenId c = static_cast<TokenId>(256 + best_rank);
    std::vector<TokenId> merged;
    merged.reserve(out.size());
    for (size_t i = 0; i < out.size(); ++i) {
      if (i + 1 < out.size() && out[i] == a && out[i + 1] == b) {
        merged.push_back(c);
        ++i;
      } else {
        merged.push_back(out[i]);
      }
    }
    out = std::move(merged);
  }
  return out;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<size_t>(id) >= vocab_.size()) {
      throw ConfigError("decode: token id " + std::to_string(id) + " out of range");
    }
    out += vocab_[static_cast<size_t>(id)];
  }
  return out;
}

std::string Tokenizer::to_json() const {
  json j;
  j["version"] = 1;
  json vocab = json::array();
  for (const auto& tokstr : vocab_) {
    json bytes = json::array();
    for (unsigned char c : tokstr) bytes.push_back(static_cast<int>(c));
    vocab.push_back(std::move(bytes));
  }
  j["vocab"] = std::move(vocab);
  json merges = json::array();
  for (const auto& [a, b] : merges_) merges.push_back(json::array({a, b}));
  j["merges"] = std::move(merges);
  return j.dump();
}

Tokenizer Tokenizer::from_json(const std::string& json_text) {
  json j = json::parse(json_text);
  if (!j.contains("vocab") || !j.contains("merges")) {
    throw ConfigError("tokenizer json missing vocab/merges");
  }
  Tokenizer tok;
  const auto& merges = j["merges"];
  for (const auto& m : merges) {
    if (!m.is_array() || m.size() != 2) throw ConfigError("bad merge entry");
    TokenId a = m[0].get<TokenId>();
    TokenId b = m[1].get<TokenId>();
    const TokenId limit = static_cast<TokenId>(tok.vocab_.size());
    if (a < 0 || a >= limit || b < 0 || b >= limit) {
      throw ConfigError("merge refers to unknown token id");
    }
    tok.vocab_.push_back(tok.vocab_[a] + tok.vocab_[b]);
    tok.merges_.emplace_back(a, b);
  }
  // vocab array is redundant with merges; verify consistency when present
  const auto& vocab = j["vocab"];
  if (vocab.size() != tok.vocab_.size()) {
    throw ConfigError("tokenizer vocab array inconsistent with merges");
  }
  for (size_t i = 0; i < vocab.size(); ++i) {
    std::string s;
    for (const auto& b : vocab[i]) s += static_cast<char>(b.get<int>());
    if (s != tok.vocab_[i]) throw ConfigError("tokenizer vocab entry mismatch");
  }
  tok.rebuild_ranks();
  return tok;
}

void Tokenizer::save(const std::string& path) const { write_text_file(path, to_json()); }

Tokenizer Tokenizer::load(const std::string& path) {
  return from_json(read_text_file(path));
}

std::string Tokenizer::hash() const { return digest_hex(to_json()); }

// ---------------------------------------------------------------------------
// Sentence splitting
// ---------------------------------------------------------------------------

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

bool ends_sentence(const std::string& word) {
  if (word.empty()) return false;
  char c = word.back();
  return c == '.' || c == '?' || c == '!';
}

// Hard-split one over-long word into <= max_tokens pieces. Chunks are cut at
// token boundaries and re-measured after decode, since re-encoding a decoded
// chunk can re-merge differently.
void split_long_word(const std::string& word, size_t max_tokens, const Tokenizer& tok,
                     std::vector<std::string>& out) {
  std::vector<TokenId> ids = tok.encode(word);
  size_t start = 0;
  while (start < ids.size()) {
    size_t take = std::min(max_tokens, ids.size() - start);
    while (take > 0) {
      std::vector<TokenId> chunk(ids.begin() + static_cast<long>(start),
                                 ids.begin() + static_cast<long>(start + take));
      std::string piece = tok.decode(chunk);
      if (tok.encode(piece).size() <= max_tokens) {
        out.push_back(std::move(piece));
        break;
      }
      --take;
    }
    if (take == 0) take = 1;  // single byte always fits (max_tokens >= 1)
    start += take;
  }
}

}  // namespace

std::vector<Sentence> split_sentences(const std::string& text, size_t max_tokens,
                                      const Tokenizer& tok, const std::string& source,
                                      int64_t first_id) {
  if (max_tokens == 0) throw ConfigError("split_sentences: max_tokens must be >= 1");

  // whitespace-delimited words, runs collapsed
  std::vector<std::string> words;
  {
    std::string cur;
    for (unsigned char c : text) {
      if (is_space(c)) {
        if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
      } else {
        cur += static_cast<char>(c);
      }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
  }

  std::vector<std::string> pieces;
  std::string cur;
  size_t cur_tokens = 0;
  auto flush = [&] {
    if (!cur.empty()) {
      pieces.push_back(std::move(cur));
      cur.clear();
      cur_tokens = 0;
    }
  };
  for (const auto& word : words) {
    const size_t word_tokens = tok.encode(word).size();
    if (word_tokens > max_tokens) {
      flush();
      split_long_word(word, max_tokens, tok, pieces);
      continue;
    }
    // +1 for the joining space when cur is non-empty; measuring the joined
    // string exactly keeps the budget honest under BPE boundary merges
    if (!cur.empty()) {
      std::string joined = cur + " " + word;
      size_t joined_tokens = tok.encode(joined).size();
      if (joined_tokens > max_tokens) {
        flush();
        cur = word;
        cur_tokens = word_tokens;
      } else {
        cur = std::move(joined);
        cur_tokens = joined_tokens;
      }
    } else {
      cur = word;
      cur_tokens = word_tokens;
    }
    if (ends_sentence(word)) flush();
    (void)cur_tokens;
  }
  flush();

  std::vector<Sentence> out;
  out.reserve(pieces.size());
  int64_t id = first_id;
  for (auto& p : pieces) {
    out.push_back(Sentence{id++, std::move(p), source});
  }
  return out;
}

// ---------------------------------------------------------------------------
// DatasetBundle
// ---------------------------------------------------------------------------

void DatasetBundle::validate() const {
  std::unordered_map<int64_t, const Sentence*> by_id;
  by_id.reserve(full.size());
  for (const auto& s : full) {
    if (s.text.empty()) throw ConfigError("bundle: empty sentence text (id " +
                                          std::to_string(s.id) + ")");
    if (!by_id.emplace(s.id, &s).second) {
      throw ConfigError("bundle: duplicate sentence id " + std::to_string(s.id));
    }
  }
  std::unordered_map<int64_t, int> role;
  for (const auto& s : unlearn) {
    if (!by_id.count(s.id)) throw ConfigError("bundle: unlearn sentence not in full");
    role[s.id] |= 1;
  }
  for (const auto& s : retain) {
    if (!by_id.count(s.id)) throw ConfigError("bundle: retain sentence not in full");
    if ((role[s.id] |= 2) == 3) {
      throw ConfigError("bundle: sentence " + std::to_string(s.id) +
                        " in both unlearn and retain");
    }
  }
}

std::vector<ManifestEntry> parse_manifest(const std::string& manifest_path) {
  json j = json::parse(read_text_file(manifest_path));
  if (!j.contains("documents") || !j["documents"].is_array()) {
    throw ConfigError("manifest: missing 'documents' array in " + manifest_path);
  }
  const auto base = std::filesystem::path(manifest_path).parent_path();
  std::vector<ManifestEntry> out;
  for (const auto& d : j["documents"]) {
    if (!d.contains("path") || !d.contains("role")) {
      throw ConfigError("manifest: document entries need 'path' and 'role'");
    }
    ManifestEntry e;
    std::filesystem::path p = d["path"].get<std::string>();
    e.path = p.is_absolute() ? p.string() : (base / p).string();
    const std::string role = d["role"].get<std::string>();
    if (role == "full") e.role = DocRole::Full;
    else if (role == "unlearn") e.role = DocRole::Unlearn;
    else if (role == "retain") e.role = DocRole::Retain;
    else throw ConfigError("manifest: unknown role '" + role + "'");
    if (!file_exists(e.path)) {
      throw ConfigError("manifest: document does not exist: " + e.path);
    }
    out.push_back(std::move(e));
  }
  return out;
}

DatasetBundle build_bundle(const std::vector<ManifestEntry>& manifest,
                           const Tokenizer& tok, size_t max_tokens) {
  DatasetBundle bundle;
  int64_t next_id = 0;
  for (const auto& entry : manifest) {
    const std::string text = read_text_file(entry.path);
    const std::string source = std::filesystem::path(entry.path).filename().string();
    auto sentences = split_sentences(text, max_tokens, tok, source, next_id);
    if (!sentences.empty()) next_id = sentences.back().id + 1;
    for (auto& s : sentences) {
      if (entry.role == DocRole::Unlearn) bundle.unlearn.push_back(s);
      else if (entry.role == DocRole::Retain) bundle.retain.push_back(s);
      bundle.full.push_back(std::move(s));
    }
  }
  bundle.validate();
  return bundle;
}

std::string bundle_to_jsonl(const DatasetBundle& bundle) {
  std::unordered_map<int64_t, const char*> role;
  for (const auto& s : bundle.unlearn) role[s.id] = "unlearn";
  for (const auto& s : bundle.retain) role[s.id] = "retain";
  std::string out;
  for (const auto& s : bundle.full) {
    json line;
    line["id"] = s.id;
    line["text"] = s.text;
    line["source"] = s.source;
    auto it = role.find(s.id);
    line["role"] = it == role.end() ? "full" : it->second;
    out += line.dump();
    out += '\n';
  }
  return out;
}

DatasetBundle bundle_from_jsonl(const std::string& text) {
  DatasetBundle bundle;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    if (end > pos) {
      json line = json::parse(text.substr(pos, end - pos));
      Sentence s{line["id"].get<int64_t>(), line["text"].get<std::string>(),
                 line["source"].get<std::string>()};
      const std::string role = line["role"].get<std::string>();
      if (role == "unlearn") bundle.unlearn.push_back(s);
      else if (role == "retain") bundle.retain.push_back(s);
      bundle.full.push_back(std::move(s));
    }
    pos = end + 1;
  }
  bundle.validate();
  return bundle;
}

}  // namespace ula::corpus
