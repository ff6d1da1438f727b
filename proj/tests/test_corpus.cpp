#include "doctest.h"

#include <algorithm>
#include <set>

#include "corpus.hpp"
#include "support/grammar.hpp"

using namespace ula;
using namespace ula::corpus;

namespace {

Tokenizer identity() { return Tokenizer(); }

std::string random_utf8(Rng& rng, size_t max_len) {
  // mixes ASCII, multi-byte codepoints, and raw continuation-ish bytes;
  // encode/decode must round-trip arbitrary byte strings anyway
  const size_t len = rng.uniform_int(max_len + 1);
  std::string s;
  for (size_t i = 0; i < len; ++i) {
    const double r = rng.uniform();
    if (r < 0.6) {
      s += static_cast<char>(32 + rng.uniform_int(95));
    } else if (r < 0.8) {
      // 2-byte codepoint U+0080..U+07FF
      uint32_t cp = 0x80 + static_cast<uint32_t>(rng.uniform_int(0x780));
      s += static_cast<char>(0xC0 | (cp >> 6));
      s += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
      // 3-byte codepoint U+0800..U+FFFF (skipping surrogates)
      uint32_t cp = 0x800 + static_cast<uint32_t>(rng.uniform_int(0xD800 - 0x800));
      s += static_cast<char>(0xE0 | (cp >> 12));
      s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      s += static_cast<char>(0x80 | (cp & 0x3F));
    }
  }
  return s;
}

}  // namespace

TEST_CASE("split_sentences: delimiter definition") {
  auto tok = identity();
  auto got = split_sentences("A. B? C!", 64, tok);
  REQUIRE(got.size() == 3);
  CHECK(got[0].text == "A.");
  CHECK(got[1].text == "B?");
  CHECK(got[2].text == "C!");
  CHECK(got[0].id == 0);
  CHECK(got[2].id == 2);
}

TEST_CASE("split_sentences: empty input gives empty list") {
  auto tok = identity();
  CHECK(split_sentences("", 64, tok).empty());
  CHECK(split_sentences("   \n\t ", 64, tok).empty());
}

TEST_CASE("split_sentences: whitespace runs collapse, content reconstructs") {
  auto tok = identity();
  auto got = split_sentences("one  two\n three.   four five!", 64, tok);
  REQUIRE(got.size() == 2);
  CHECK(got[0].text == "one two three.");
  CHECK(got[1].text == "four five!");
}

TEST_CASE("split_sentences: oversize run flushes early at token budget") {
  auto tok = identity();
  // budget 10 bytes with identity tokenizer; words of 4 incl. space joins
  auto got = split_sentences("aaaa bbbb cccc dddd.", 10, tok);
  for (const auto& s : got) {
    CHECK(!s.text.empty());
    CHECK(tok.encode(s.text).size() <= 10);
  }
  std::string joined;
  for (const auto& s : got) {
    if (!joined.empty()) joined += ' ';
    joined += s.text;
  }
  CHECK(joined == "aaaa bbbb cccc dddd.");
}

TEST_CASE("split_sentences: single over-long word hard-splits at token boundary") {
  auto tok = identity();
  std::string word(23, 'x');
  auto got = split_sentences(word, 8, tok);
  REQUIRE(got.size() == 3);
  CHECK(got[0].text.size() == 8);
  CHECK(got[1].text.size() == 8);
  CHECK(got[2].text.size() == 7);
}

TEST_CASE("split_sentences: 5MB synthetic grammar, every output within budget") {
  using namespace ula::testsupport;
  std::string text;
  text.reserve(5u << 20);
  Rng rng(77);
  while (text.size() < (5u << 20)) {
    if (!text.empty()) text += ' ';
    text += make_sentence(Style::Wizards, rng);
    text += ' ';
    text += make_sentence(Style::Mariners, rng);
  }
  auto tok = Tokenizer::train_on_text({text.substr(0, 1 << 16)}, 400, 1);
  auto got = split_sentences(text, 24, tok);
  CHECK(got.size() > 1000);
  for (const auto& s : got) {
    REQUIRE(!s.text.empty());
    REQUIRE(tok.encode(s.text).size() <= 24);
  }
}

TEST_CASE("tokenizer: vocab_size=256 is the identity byte tokenizer") {
  auto tok = Tokenizer::train_on_text({"anything at all"}, 256, 0);
  CHECK(tok.vocab_size() == 256);
  CHECK(tok.merges().empty());
  auto ids = tok.encode("hi");
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] == 'h');
  CHECK(ids[1] == 'i');
}

TEST_CASE("tokenizer: vocab_size < 256 is a configuration error") {
  CHECK_THROWS_AS(Tokenizer::train_on_text({"x"}, 255, 0), ConfigError);
}

TEST_CASE("tokenizer: repeated abab learns exactly one merge") {
  auto tok = Tokenizer::train_on_text({"abababab"}, 257, 0);
  CHECK(tok.vocab_size() == 257);
  REQUIRE(tok.merges().size() == 1);
  CHECK(tok.merges()[0].first == 'a');
  CHECK(tok.merges()[0].second == 'b');
  auto ids = tok.encode("abab");
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] == 256);
  CHECK(ids[1] == 256);
}

TEST_CASE("tokenizer: training stops when no pair repeats") {
  auto tok = Tokenizer::train_on_text({"abcdefg"}, 512, 0);
  CHECK(tok.vocab_size() == 256);  // every pair occurs once
}

TEST_CASE("tokenizer: merges never cross sentence boundaries") {
  // "ab" is frequent only via concatenation across texts; per-text it never
  // appears, so no merge may form
  std::vector<std::string> texts;
  for (int i = 0; i < 8; ++i) {
    texts.push_back("xa");
    texts.push_back("bx");
  }
  auto tok = Tokenizer::train_on_text(texts, 260, 0);
  for (auto [a, b] : tok.merges()) CHECK(!(a == 'a' && b == 'b'));
}

TEST_CASE("tokenizer: deterministic across runs, serialization byte-identical") {
  using namespace ula::testsupport;
  auto texts = make_sentences(Style::Wizards, 300, 42);
  auto t1 = Tokenizer::train_on_text(texts, 512, 7);
  auto t2 = Tokenizer::train_on_text(texts, 512, 7);
  CHECK(t1.to_json() == t2.to_json());
  CHECK(t1.hash() == t2.hash());
  CHECK(t1.vocab_size() > 256);
}

TEST_CASE("tokenizer: json round-trip preserves behaviour") {
  using namespace ula::testsupport;
  auto texts = make_sentences(Style::Mariners, 200, 9);
  auto t1 = Tokenizer::train_on_text(texts, 384, 0);
  auto t2 = Tokenizer::from_json(t1.to_json());
  CHECK(t1.to_json() == t2.to_json());
  const std::string probe = "the captain weathered the mainsail before dawn.";
  CHECK(t1.encode(probe) == t2.encode(probe));
}

TEST_CASE("tokenizer: encode/decode round-trip on 1000 random UTF-8 strings") {
  using namespace ula::testsupport;
  auto texts = make_sentences(Style::Wizards, 100, 3);
  auto tok = Tokenizer::train_on_text(texts, 320, 0);
  Rng rng(12345);
  for (int i = 0; i < 1000; ++i) {
    std::string s = random_utf8(rng, 120);
    CHECK(tok.decode(tok.encode(s)) == s);
  }
  CHECK(tok.encode("").empty());
  CHECK(tok.decode(tok.encode("hello")) == "hello");
}

TEST_CASE("tokenizer: decode rejects out-of-range ids") {
  auto tok = identity();
  CHECK_THROWS_AS(tok.decode({0, 999}), ConfigError);
  CHECK_THROWS_AS(tok.decode({-1}), ConfigError);
}

TEST_CASE("bundle: manifest parse, build, jsonl round-trip") {
  using namespace ula::testsupport;
  const std::string dir = "corpus_test_tmp";
  make_dirs(dir);
  write_text_file(dir + "/u.txt", make_text(Style::Wizards, 40, 1));
  write_text_file(dir + "/r.txt", make_text(Style::Mariners, 40, 2));
  write_text_file(dir + "/manifest.json",
                  R"({"documents":[{"path":"u.txt","role":"unlearn"},)"
                  R"({"path":"r.txt","role":"retain"}]})");
  auto entries = parse_manifest(dir + "/manifest.json");
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].role == DocRole::Unlearn);

  auto tok = identity();
  auto bundle = build_bundle(entries, tok, 64);
  CHECK(bundle.full.size() == bundle.unlearn.size() + bundle.retain.size());
  CHECK(!bundle.unlearn.empty());
  CHECK(!bundle.retain.empty());
  std::set<int64_t> ids;
  for (const auto& s : bundle.full) ids.insert(s.id);
  CHECK(ids.size() == bundle.full.size());
  CHECK(bundle.unlearn.front().source == "u.txt");

  auto text = bundle_to_jsonl(bundle);
  auto back = bundle_from_jsonl(text);
  CHECK(back.full.size() == bundle.full.size());
  CHECK(back.unlearn.size() == bundle.unlearn.size());
  CHECK(back.retain.size() == bundle.retain.size());
  CHECK(back.full[3].text == bundle.full[3].text);
  CHECK(bundle_to_jsonl(back) == text);
}

TEST_CASE("bundle: validate rejects overlap and orphans") {
  Sentence a{0, "a.", "d"};
  Sentence b{1, "b.", "d"};
  DatasetBundle bad1{{a, b}, {a}, {a}};
  CHECK_THROWS_AS(bad1.validate(), ConfigError);
  DatasetBundle bad2{{a}, {b}, {}};
  CHECK_THROWS_AS(bad2.validate(), ConfigError);
  DatasetBundle ok{{a, b}, {a}, {b}};
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("manifest: unknown role and missing file rejected") {
  const std::string dir = "corpus_test_tmp2";
  make_dirs(dir);
  write_text_file(dir + "/manifest.json",
                  R"({"documents":[{"path":"nope.txt","role":"unlearn"}]})");
  CHECK_THROWS_AS(parse_manifest(dir + "/manifest.json"), ConfigError);
  write_text_file(dir + "/x.txt", "x.");
  write_text_file(dir + "/manifest.json",
                  R"({"documents":[{"path":"x.txt","role":"bogus"}]})");
  CHECK_THROWS_AS(parse_manifest(dir + "/manifest.json"), ConfigError);
}
