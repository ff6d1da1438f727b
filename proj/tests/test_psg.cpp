#include "doctest.h"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>

#include "psg.hpp"
#include "support/fixtures.hpp"
#include "support/grammar.hpp"
#include "support/models.hpp"

using namespace ula;
using namespace ula::psg;
using lm::Lm;
using lm::TokenSeq;
using ula::testsupport::Style;

namespace {

using testsupport::PsgSetup;

const PsgSetup& setup() { return testsupport::psg_setup(); }

PsgConfig small_psg() {
  PsgConfig cfg;
  cfg.iterations = 1;
  cfg.free_tokens = 4;
  cfg.gcg_iters_per_round = 1;
  cfg.gcg_topk = 8;
  cfg.gcg_batch = 8;
  cfg.minibatch_size = 8;
  cfg.max_tokens = 16;
  cfg.top_k = 20;
  cfg.target_size = 100;
  cfg.pass_budget = 1;
  cfg.seed = 11;
  return cfg;
}

embed::Thresholds vacuous() {
  embed::Thresholds t;
  t.tau_prefer = -1e300;
  t.tau_likelihood = -1e300;
  t.tau_dist = -1e300;
  t.k = 3;
  return t;
}

// index over pseudo-random embeddings, detached from any model tag
embed::EmbeddingIndex toy_index(int64_t n, int64_t d, embed::DistanceMetric metric,
                                uint64_t seed) {
  embed::EmbeddingIndex idx;
  idx.vectors.resize(n, d);
  Rng rng(seed);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) idx.vectors(i, j) = rng.normal();
    idx.ids.push_back(i);
  }
  idx.metric = metric;
  return idx;
}

}  // namespace

TEST_CASE("psg: mode names and config validation") {
  CHECK(mode_from_name(mode_name(GenerationMode::ContinueFromDu)) ==
        GenerationMode::ContinueFromDu);
  CHECK(mode_from_name(mode_name(GenerationMode::FromScratch)) ==
        GenerationMode::FromScratch);
  CHECK_THROWS_AS(mode_from_name("beam"), ConfigError);

  PsgConfig cfg;
  cfg.validate();

  auto bad = cfg;
  bad.iterations = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.w_prefer = 0.5;
  bad.w_likelihood = 0.5;  // not strictly preferred
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.w_prefer = 0.8;  // weights no longer sum to one
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.w_likelihood = -0.1;
  bad.w_prefer = 1.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.w_dist = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.free_tokens = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.temperature = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.target_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.pass_budget = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.minibatch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.thresholds.k = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("psg: config json round-trip and digest sensitivity") {
  PsgConfig cfg;
  cfg.thresholds.tau_dist = 1.25;
  cfg.metric = embed::DistanceMetric::Cosine;
  cfg.generation_mode = GenerationMode::FromScratch;
  auto back = PsgConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.digest() == cfg.digest());
  CHECK(back.metric == embed::DistanceMetric::Cosine);
  CHECK(back.generation_mode == GenerationMode::FromScratch);
  CHECK(back.thresholds.tau_dist == 1.25);

  auto other = cfg;
  other.w_dist = 2.0;
  CHECK(other.digest() != cfg.digest());
  other = cfg;
  other.thresholds.coefficient = 2.0;
  CHECK(other.digest() != cfg.digest());

  // partial json keeps defaults elsewhere
  auto sparse = PsgConfig::from_json(R"({"iterations": 5})");
  CHECK(sparse.iterations == 5);
  CHECK(sparse.w_prefer == cfg.w_prefer);
}

TEST_CASE("psg: record and dataset serialization round-trips") {
  SurrogateRecord r;
  r.text = "the archmage warded the tower.";
  r.seed_sentence_id = 42;
  r.prefer_delta = 0.25;
  r.base_likelihood = -1.5;
  r.knn_distance = 3.75;
  r.accepted = true;
  r.round_trace = {3.0, 3.5, 3.75};
  auto back = SurrogateRecord::from_json(r.to_json());
  CHECK(back.text == r.text);
  CHECK(back.seed_sentence_id == 42);
  CHECK(back.prefer_delta == r.prefer_delta);
  CHECK(back.base_likelihood == r.base_likelihood);
  CHECK(back.knn_distance == r.knn_distance);
  CHECK(back.accepted);
  CHECK(back.round_trace == r.round_trace);

  // scratch-seeded records carry no origin id
  SurrogateRecord s = r;
  s.seed_sentence_id = -1;
  CHECK(s.to_json().find("seed_sentence_id") == std::string::npos);
  CHECK(SurrogateRecord::from_json(s.to_json()).seed_sentence_id == -1);

  SurrogateDataset ds;
  ds.config_digest = "abc123";
  ds.model_tag = "base";
  ds.finetuned_tag = "finetuned";
  ds.records = {r, s};
  auto parsed = SurrogateDataset::from_jsonl(ds.to_jsonl());
  CHECK(parsed.to_jsonl() == ds.to_jsonl());
  CHECK(parsed.config_digest == "abc123");
  CHECK(parsed.records.size() == 2);

  // mixed provenance and rejected rows are refused
  auto mixed = ds.to_jsonl();
  const auto pos = mixed.rfind("abc123");
  mixed.replace(pos, 6, "zzz999");
  CHECK_THROWS_AS(SurrogateDataset::from_jsonl(mixed), ConfigError);

  SurrogateDataset bad = ds;
  bad.records[0].accepted = false;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(SurrogateDataset::from_jsonl(bad.to_jsonl()), ConfigError);
}

TEST_CASE("separation search: degenerate calls leave the sequence unchanged") {
  model::ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = 32;
  cfg.max_seq = 16;
  Lm m(testsupport::make_random_ckpt(cfg, 3));
  const auto idx = toy_index(10, 16, embed::DistanceMetric::L2, 17);
  const TokenSeq ids{1, 2, 3, 4, 5, 6};

  auto pc = small_psg();
  pc.gcg_iters_per_round = 0;
  Rng r1(1);
  std::vector<double> trace;
  CHECK(gcg_maximize_distance(m, ids, {4, 5}, idx, pc, r1, &trace) == ids);
  CHECK(trace.empty());

  pc = small_psg();
  Rng r2(1);
  CHECK(gcg_maximize_distance(m, ids, {}, idx, pc, r2) == ids);

  CHECK_THROWS_AS(gcg_maximize_distance(m, ids, {6}, idx, pc, r2), ConfigError);

  const auto narrow = toy_index(10, 8, embed::DistanceMetric::L2, 17);
  CHECK_THROWS_AS(gcg_maximize_distance(m, ids, {5}, narrow, pc, r2), CompatError);

  embed::EmbeddingIndex empty;
  empty.vectors.resize(0, 16);
  CHECK_THROWS_AS(gcg_maximize_distance(m, ids, {5}, empty, pc, r2), ConfigError);
}

TEST_CASE("separation search: loss is monotone at a fixed minibatch") {
  model::ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = 32;
  cfg.max_seq = 16;
  Lm m(testsupport::make_random_ckpt(cfg, 3));

  for (const auto metric : {embed::DistanceMetric::L2, embed::DistanceMetric::Cosine}) {
    const auto idx = toy_index(10, 16, metric, 29);
    auto pc = small_psg();
    pc.w_dist = 1.5;
    pc.minibatch_size = 64;  // covers the whole index: every round sees one batch
    pc.gcg_iters_per_round = 6;
    pc.gcg_topk = 8;
    pc.gcg_batch = 8;

    const TokenSeq start{9, 4, 7, 1, 2, 3};
    const std::vector<int64_t> free_pos{3, 4, 5};
    Rng rng(5);
    std::vector<double> trace;
    const TokenSeq out = gcg_maximize_distance(m, start, free_pos, idx, pc, rng, &trace);

    REQUIRE(trace.size() == 7);  // start + one entry per round
    for (size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1]);

    // endpoints match an independent mean-distance computation
    auto loss_of = [&](const TokenSeq& s) {
      const auto e = embed::embed_sentence(m, s);
      double acc = 0.0;
      for (int64_t i = 0; i < 10; ++i) {
        acc += embed::distance(e, idx.vectors.row(i).transpose(), metric);
      }
      return -pc.w_dist * acc / 10.0;
    };
    CHECK(trace.front() == doctest::Approx(loss_of(start)).epsilon(1e-12));
    CHECK(trace.back() == doctest::Approx(loss_of(out)).epsilon(1e-12));

    // sentence tokens are immutable
    for (int64_t p = 0; p < 3; ++p) CHECK(out[static_cast<size_t>(p)] == start[static_cast<size_t>(p)]);

    // the search never loses ground against the start sequence
    CHECK(trace.back() <= trace.front());

    Rng again(5);
    CHECK(gcg_maximize_distance(m, start, free_pos, idx, pc, again) == out);
  }
}

TEST_CASE("separation search: one free slot matches brute force over the vocabulary") {
  model::ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = 32;
  cfg.max_seq = 16;
  Lm m(testsupport::make_random_ckpt(cfg, 3));

  for (const auto metric : {embed::DistanceMetric::L2, embed::DistanceMetric::Cosine}) {
    const auto idx = toy_index(10, 16, metric, 31);
    auto pc = small_psg();
    pc.gcg_iters_per_round = 1;
    pc.gcg_topk = 32;   // full vocabulary ranked
    pc.gcg_batch = 32;  // 1 × 32 grid fits: exhaustive enumeration
    pc.minibatch_size = 64;

    const TokenSeq start{9, 4, 7, 1, 2, 0};
    const std::vector<int64_t> free_pos{5};

    // brute force: highest mean distance over the whole index wins
    double best_dist = -1.0;
    lm::TokenId best_tok = 0;
    for (lm::TokenId v = 0; v < 32; ++v) {
      TokenSeq trial = start;
      trial[5] = v;
      const auto e = embed::embed_sentence(m, trial);
      double acc = 0.0;
      for (int64_t i = 0; i < 10; ++i) {
        acc += embed::distance(e, idx.vectors.row(i).transpose(), metric);
      }
      if (acc / 10.0 > best_dist) {
        best_dist = acc / 10.0;
        best_tok = v;
      }
    }

    Rng rng(5);
    const TokenSeq out = gcg_maximize_distance(m, start, free_pos, idx, pc, rng);
    CHECK(out[5] == best_tok);
  }
}

TEST_CASE("rephrase prompt wraps the sequence exactly") {
  corpus::Tokenizer tok;
  const std::string inner = "three wizards traced the sigil.";
  const TokenSeq x = tok.encode(inner);
  const TokenSeq prompt = build_rephrase_prompt(x, tok);
  CHECK(tok.decode(prompt) == "Rephrase: " + inner + " Rephrased: ");

  CHECK_THROWS_AS(build_rephrase_prompt({}, tok), ConfigError);

  // equal-length inputs share the wrap and differ only in the middle
  const TokenSeq a = tok.encode("abcd");
  const TokenSeq b = tok.encode("wxyz");
  const TokenSeq pa = build_rephrase_prompt(a, tok);
  const TokenSeq pb = build_rephrase_prompt(b, tok);
  REQUIRE(pa.size() == pb.size());
  const size_t pre = tok.encode("Rephrase: ").size();
  for (size_t i = 0; i < pa.size(); ++i) {
    const bool middle = i >= pre && i < pre + a.size();
    if (middle) {
      CHECK(pa[i] == a[i - pre]);
      CHECK(pb[i] == b[i - pre]);
    } else {
      CHECK(pa[i] == pb[i]);
    }
  }
}

TEST_CASE("psg_iteration: with gcg and mixing disabled it is plain self-rephrasing") {
  const auto& s = setup();
  // θ_f := θ makes the mixture collapse onto the base model
  const auto self_index =
      embed::build_index(*s.base, s.d_u, s.tok, embed::DistanceMetric::L2, 1);

  auto pc = small_psg();
  pc.free_tokens = 0;  // nothing appended, nothing optimized
  pc.w_prefer = 1.0;
  pc.w_likelihood = 0.0;
  pc.max_tokens = 12;

  // short enough that the prompt keeps the input intact
  const TokenSeq x = s.tok.encode(s.d_u[0].text.substr(0, 40));
  Rng r1(9);
  const TokenSeq got = psg_iteration(*s.base, *s.base, s.tok, x, self_index, pc, r1);

  // replay the same derivation by hand
  Rng r2(9);
  const TokenSeq prompt = build_rephrase_prompt(x, s.tok);
  TokenSeq want = lm::sample_mixed(*s.base, *s.base, prompt, 1.0, 0.0, pc.temperature,
                                   pc.top_k, pc.max_tokens, r2.next_u64());
  if (want.empty()) {
    want = lm::sample_mixed(*s.base, *s.base, prompt, 1.0, 0.0, pc.temperature,
                            pc.top_k, pc.max_tokens, r2.next_u64());
  }
  CHECK(got == want);
  CHECK(got.size() <= 12);

  Rng r3(9);
  CHECK(psg_iteration(*s.base, *s.base, s.tok, x, self_index, pc, r3) == got);

  CHECK_THROWS_AS(psg_iteration(*s.base, *s.base, s.tok, {}, self_index, pc, r3),
                  ConfigError);
  // index built under the finetuned model does not pair with θ_f := θ
  CHECK_THROWS_AS(psg_iteration(*s.base, *s.base, s.tok, x, s.index, pc, r3),
                  CompatError);
}

TEST_CASE("psg_iteration: full step stays inside the window and is deterministic") {
  const auto& s = setup();
  auto pc = small_psg();
  const TokenSeq x = s.tok.encode(s.d_u[1].text);
  Rng r1(13), r2(13);
  const TokenSeq a = psg_iteration(*s.base, *s.finetuned, s.tok, x, s.index, pc, r1);
  const TokenSeq b = psg_iteration(*s.base, *s.finetuned, s.tok, x, s.index, pc, r2);
  CHECK(a == b);
  CHECK(a.size() <= static_cast<size_t>(pc.max_tokens));
}

TEST_CASE("filter_candidate: statistics, reasons, and soundness") {
  const auto& s = setup();

  // vacuous thresholds accept anything scoreable
  const auto ok =
      filter_candidate(*s.base, *s.finetuned, s.tok, s.d_u[2].text, s.index, vacuous());
  CHECK(ok.accepted);
  CHECK(ok.reject_reason.empty());
  CHECK(ok.text == s.d_u[2].text);

  // recomputing every statistic from scratch reproduces the record exactly
  const TokenSeq ids = s.tok.encode(s.d_u[2].text);
  const double base_lp = s.base->mean_logprob(ids);
  const double delta = s.finetuned->mean_logprob(ids) - base_lp;
  const double dist = embed::mean_knn_distance(
      s.index, embed::embed_sentence(*s.finetuned, ids), embed::clamp_k(3, s.index.size()));
  CHECK(ok.base_likelihood == base_lp);
  CHECK(ok.prefer_delta == delta);
  CHECK(ok.knn_distance == dist);

  // a verbatim unlearn-set sentence sits on top of itself in the index
  embed::Thresholds nearest = s.th;
  nearest.k = 1;
  nearest.tau_dist = embed::compute_tau_dist(s.index, 1, 1.5);
  CHECK(nearest.tau_dist > 0.0);
  const auto copy =
      filter_candidate(*s.base, *s.finetuned, s.tok, s.d_u[2].text, s.index, nearest);
  CHECK_FALSE(copy.accepted);
  CHECK(copy.knn_distance == 0.0);
  CHECK(copy.reject_reason.find("dist") != std::string::npos);

  // byte gibberish is implausible under the base model
  const auto junk = filter_candidate(*s.base, *s.finetuned, s.tok,
                                     "qz@#7vv!!xkp~~rr$$wq", s.index, s.th);
  CHECK_FALSE(junk.accepted);
  CHECK(junk.base_likelihood < s.th.tau_likelihood);
  CHECK(junk.reject_reason.find("likelihood") != std::string::npos);

  // too short to score
  for (const std::string text : {"", "a"}) {
    const auto r = filter_candidate(*s.base, *s.finetuned, s.tok, text, s.index, s.th);
    CHECK_FALSE(r.accepted);
    CHECK(r.reject_reason == "untokenizable");
  }

  // acceptance is exactly the three-way conjunction
  embed::Thresholds edge = s.th;
  edge.tau_prefer = ok.prefer_delta;  // strict > now fails on equality
  const auto eq =
      filter_candidate(*s.base, *s.finetuned, s.tok, s.d_u[2].text, s.index, edge);
  CHECK_FALSE(eq.accepted);
  CHECK(eq.reject_reason.find("prefer") != std::string::npos);
}

TEST_CASE("generate_surrogates: vacuous filter yields one record per sentence") {
  const auto& s = setup();
  std::vector<corpus::Sentence> ten(s.d_u.begin(), s.d_u.begin() + 10);

  auto pc = small_psg();
  pc.thresholds = vacuous();

  std::vector<SurrogateRecord> rejected;
  const auto ds = generate_surrogates(s.theta, s.theta_f, ten, s.tok, pc, 1, &rejected);
  CHECK(ds.records.size() == 10);
  CHECK(rejected.empty());
  CHECK(ds.config_digest == pc.digest());
  CHECK(ds.model_tag == "base");
  CHECK(ds.finetuned_tag == "finetuned");
  ds.validate();
  for (size_t i = 0; i < ds.records.size(); ++i) {
    const auto& rec = ds.records[i];
    CHECK(rec.accepted);
    CHECK(rec.seed_sentence_id == ten[i].id);  // sentence-id order
    CHECK(rec.round_trace.size() == 1);
    CHECK_FALSE(rec.text.empty());
  }

  // bytes are identical across reruns and thread counts
  const auto again = generate_surrogates(s.theta, s.theta_f, ten, s.tok, pc, 1);
  CHECK(again.to_jsonl() == ds.to_jsonl());
  const auto par = generate_surrogates(s.theta, s.theta_f, ten, s.tok, pc, 2);
  CHECK(par.to_jsonl() == ds.to_jsonl());

  // target_size cuts the same stream short
  auto three = pc;
  three.target_size = 3;
  const auto cut = generate_surrogates(s.theta, s.theta_f, ten, s.tok, three);
  REQUIRE(cut.records.size() == 3);
  for (size_t i = 0; i < 3; ++i) CHECK(cut.records[i].text == ds.records[i].text);
}

TEST_CASE("generate_surrogates: from-scratch seeding carries no origin ids") {
  const auto& s = setup();
  std::vector<corpus::Sentence> few(s.d_u.begin(), s.d_u.begin() + 4);
  auto pc = small_psg();
  pc.thresholds = vacuous();
  pc.generation_mode = GenerationMode::FromScratch;
  const auto ds = generate_surrogates(s.theta, s.theta_f, few, s.tok, pc);
  CHECK_FALSE(ds.records.empty());
  for (const auto& rec : ds.records) CHECK(rec.seed_sentence_id == -1);
  const auto again = generate_surrogates(s.theta, s.theta_f, few, s.tok, pc);
  CHECK(again.to_jsonl() == ds.to_jsonl());
}

TEST_CASE("generate_surrogates: rejects, under-yield, and model guards") {
  const auto& s = setup();
  std::vector<corpus::Sentence> few(s.d_u.begin(), s.d_u.begin() + 4);
  auto pc = small_psg();

  // impossible thresholds reject everything and report why
  pc.thresholds = vacuous();
  pc.thresholds.tau_dist = 1e300;
  pc.target_size = 2;
  std::vector<SurrogateRecord> rejected;
  try {
    generate_surrogates(s.theta, s.theta_f, few, s.tok, pc, 1, &rejected);
    FAIL("under-yield expected");
  } catch (const UnderYieldError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("rejections:") != std::string::npos);
    CHECK(msg.find("dist") != std::string::npos);
  }
  CHECK(rejected.size() == few.size());
  for (const auto& r : rejected) {
    CHECK_FALSE(r.accepted);
    CHECK(r.reject_reason.find("dist") != std::string::npos);
  }

  // surrogate construction must never see an unlearned model
  auto renamed = s.theta;
  renamed.tag = "unlearned";
  CHECK_THROWS_AS(generate_surrogates(renamed, s.theta_f, few, s.tok, pc), ConfigError);
  CHECK_THROWS_AS(generate_surrogates(s.theta, renamed, few, s.tok, pc), ConfigError);

  // incompatible pairs are refused
  auto other_hash = s.theta_f;
  other_hash.tokenizer_hash = "feedbeef";
  CHECK_THROWS_AS(generate_surrogates(s.theta, other_hash, few, s.tok, pc),
                  CompatError);
  CHECK_THROWS_AS(generate_surrogates(s.theta, s.theta_f, {}, s.tok, pc), ConfigError);
}

TEST_CASE("generate_surrogates: accepted records re-satisfy the filter exactly") {
  const auto& s = setup();

  auto pc = small_psg();
  pc.iterations = 2;
  pc.gcg_iters_per_round = 2;
  pc.max_tokens = 24;
  pc.temperature = 0.7;
  pc.thresholds = s.th;
  pc.target_size = 5;
  pc.pass_budget = 3;
  pc.seed = 4;

  const auto ds = generate_surrogates(s.theta, s.theta_f, s.d_u, s.tok, pc, 2);
  REQUIRE_FALSE(ds.records.empty());

  double delta_sum = 0.0;
  double min_dist = 1e300;
  for (const auto& rec : ds.records) {
    // independent recomputation from the stored text alone
    const auto redo =
        filter_candidate(*s.base, *s.finetuned, s.tok, rec.text, s.index, s.th);
    CHECK(redo.accepted);
    CHECK(redo.prefer_delta == rec.prefer_delta);
    CHECK(redo.base_likelihood == rec.base_likelihood);
    CHECK(redo.knn_distance == rec.knn_distance);
    CHECK(rec.prefer_delta > s.th.tau_prefer);
    CHECK(rec.knn_distance > s.th.tau_dist);
    CHECK(rec.base_likelihood > s.th.tau_likelihood);
    delta_sum += rec.prefer_delta;
    min_dist = std::min(min_dist, rec.knn_distance);
  }
  CHECK(min_dist > s.th.tau_dist);
  CHECK(s.th.tau_dist > 0.0);
  CHECK(delta_sum / static_cast<double>(ds.records.size()) > s.th.tau_prefer);

  // exact duplicates never appear
  std::set<std::string> texts;
  for (const auto& rec : ds.records) CHECK(texts.insert(rec.text).second);
}
